//! Linear projection encoders with L2-normalised outputs and cosine similarity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::SimilarityMatrix;
use crate::matrix::{dot, norm, Matrix};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `d_embed x d_img`
    pub w_img: Matrix,
    /// `d_embed x d_txt`
    pub w_txt: Matrix,
    pub temperature: f64,
}

impl EncoderParams {
    pub fn new(w_img: Matrix, w_txt: Matrix, temperature: f64) -> Result<Self> {
        let p = Self {
            w_img,
            w_txt,
            temperature,
        };
        p.validate()?;
        Ok(p)
    }

    /// Entries drawn i.i.d. from `U(-1/sqrt(d_in), 1/sqrt(d_in))`.
    pub fn init(d_img: usize, d_txt: usize, d_embed: usize, temperature: f64, seed: u64) -> Result<Self> {
        if d_img == 0 || d_txt == 0 || d_embed == 0 {
            return Err(Error::config("d_embed", "encoder dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
        };
        let w_img = draw(d_embed, d_img);
        let w_txt = draw(d_embed, d_txt);
        Self::new(w_img, w_txt, temperature)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be finite and > 0"));
        }
        if self.w_img.rows() != self.w_txt.rows() {
            return Err(Error::shape("image and text encoders disagree on d_embed"));
        }
        if !self.w_img.is_finite() || !self.w_txt.is_finite() {
            return Err(Error::NonFinite("encoder weights".into()));
        }
        Ok(())
    }

    pub fn d_embed(&self) -> usize {
        self.w_img.rows()
    }

    pub fn d_img(&self) -> usize {
        self.w_img.cols()
    }

    pub fn d_txt(&self) -> usize {
        self.w_txt.cols()
    }

    pub fn weights(&self, modality: Modality) -> &Matrix {
        match modality {
            Modality::Image => &self.w_img,
            Modality::Text => &self.w_txt,
        }
    }
}

/// Projection before and after normalisation, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Embedded {
    pub unit: Vec<f64>,
    pub norm: f64,
}

pub(crate) fn embed_full(w: &Matrix, x: &[f64]) -> Result<Embedded> {
    if let Some(k) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("feature component {k}")));
    }
    let y = w.mul_vec(x)?;
    let n = norm(&y);
    if n < NORM_EPS {
        return Err(Error::invalid("zero-norm projection (degenerate encoder)"));
    }
    let unit = y.iter().map(|v| v / n.max(NORM_EPS)).collect();
    Ok(Embedded { unit, norm: n })
}

/// `W x / |W x|` for the encoder of the given modality.
pub fn embed(params: &EncoderParams, x: &[f64], modality: Modality) -> Result<Vec<f64>> {
    Ok(embed_full(params.weights(modality), x)?.unit)
}

/// `S[i][j] = <embed(img_i), embed(txt_j)> / tau`.
pub fn batch_similarity<I, T>(params: &EncoderParams, images: &[I], texts: &[T]) -> Result<SimilarityMatrix>
where
    I: AsRef<[f64]>,
    T: AsRef<[f64]>,
{
    Ok(forward(params, images, texts)?.similarity)
}

pub(crate) struct Forward {
    pub images: Vec<Embedded>,
    pub texts: Vec<Embedded>,
    pub similarity: SimilarityMatrix,
}

pub(crate) fn forward<I, T>(params: &EncoderParams, images: &[I], texts: &[T]) -> Result<Forward>
where
    I: AsRef<[f64]>,
    T: AsRef<[f64]>,
{
    if images.len() != texts.len() {
        return Err(Error::shape(format!(
            "{} images but {} texts",
            images.len(),
            texts.len()
        )));
    }
    let images = images
        .iter()
        .map(|x| embed_full(&params.w_img, x.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let texts = texts
        .iter()
        .map(|x| embed_full(&params.w_txt, x.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let inv_t = 1.0 / params.temperature;
    let b = images.len();
    let s = Matrix::from_fn(b, b, |i, j| inv_t * dot(&images[i].unit, &texts[j].unit));
    Ok(Forward {
        images,
        texts,
        similarity: SimilarityMatrix::new(s)?,
    })
}

/// Gradients of the loss with respect to both weight matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub w_img: Matrix,
    pub w_txt: Matrix,
}

/// Chains `dL/dS` through the cosine similarity, the normalisation and the projections.
pub(crate) fn backward<I, T>(
    params: &EncoderParams,
    fwd: &Forward,
    images: &[I],
    texts: &[T],
    grad_s: &Matrix,
) -> EncoderGrads
where
    I: AsRef<[f64]>,
    T: AsRef<[f64]>,
{
    let b = fwd.images.len();
    let d = params.d_embed();
    let inv_t = 1.0 / params.temperature;

    let mut w_img = Matrix::zeros(d, params.d_img());
    for i in 0..b {
        let mut g_unit = vec![0.0; d];
        for j in 0..b {
            let g = inv_t * grad_s[(i, j)];
            for (acc, v) in g_unit.iter_mut().zip(&fwd.texts[j].unit) {
                *acc += g * v;
            }
        }
        accumulate_projection_grad(&mut w_img, &fwd.images[i], &g_unit, images[i].as_ref());
    }

    let mut w_txt = Matrix::zeros(d, params.d_txt());
    for j in 0..b {
        let mut g_unit = vec![0.0; d];
        for i in 0..b {
            let g = inv_t * grad_s[(i, j)];
            for (acc, u) in g_unit.iter_mut().zip(&fwd.images[i].unit) {
                *acc += g * u;
            }
        }
        accumulate_projection_grad(&mut w_txt, &fwd.texts[j], &g_unit, texts[j].as_ref());
    }

    EncoderGrads { w_img, w_txt }
}

/// For `u = y / |y|`: `dL/dy = (g - u (u . g)) / |y|`, then `dL/dW += dL/dy x^T`.
fn accumulate_projection_grad(w_grad: &mut Matrix, e: &Embedded, g_unit: &[f64], x: &[f64]) {
    let proj = dot(&e.unit, g_unit);
    for (r, (&g, &u)) in g_unit.iter().zip(&e.unit).enumerate() {
        let gy = (g - u * proj) / e.norm;
        for (w, &xc) in w_grad.row_mut(r).iter_mut().zip(x) {
            *w += gy * xc;
        }
    }
}
