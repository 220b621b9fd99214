//! Contrastive losses over a `B x B` image-text similarity matrix.
//!
//! Four objectives are provided, each returning its value together with the
//! exact gradient with respect to the similarity matrix:
//!
//! * [`infonce_baseline`]: symmetric InfoNCE over rows and columns.
//! * [`off_diagonal_loss`]: binary cross-entropy against a target that marks
//!   the diagonal and every normal-normal pair as positive.
//! * [`abnormal_infonce`]: InfoNCE restricted to the abnormal pairs.
//! * [`total_loss`]: `L_off + lambda_ab * L_ab`.
//!
//! Rows index images and columns index texts. Everything is computed in
//! `f64` without clamping the scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Square, finite matrix of image-text similarity scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(Matrix);

impl SimilarityMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::shape(format!(
                "similarity matrix must be square, got {}x{}",
                values.rows(),
                values.cols()
            )));
        }
        if values.rows() == 0 {
            return Err(Error::shape("similarity matrix must have B >= 1"));
        }
        if let Some((i, j)) = values.first_non_finite() {
            return Err(Error::NonFinite(format!("similarity entry ({i}, {j})")));
        }
        Ok(Self(values))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn batch_size(&self) -> usize {
        self.0.rows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }
}

/// Report-level pseudo-label carried by an image-text pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairPseudoLabel {
    PseudoNormal,
    PseudoAbnormal,
}

impl PairPseudoLabel {
    pub fn is_normal(self) -> bool {
        self == PairPseudoLabel::PseudoNormal
    }
}

/// Binary target: 1 on the diagonal and wherever both pairs are pseudo-normal.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix {
    values: Matrix,
    labels: Vec<PairPseudoLabel>,
}

impl TargetMatrix {
    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn source_labels(&self) -> &[PairPseudoLabel] {
        &self.labels
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }
}

/// Strictly increasing batch positions whose pair label is abnormal.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AbnormalIndexSet {
    indices: Vec<usize>,
}

impl AbnormalIndexSet {
    pub fn from_labels(labels: &[PairPseudoLabel]) -> Self {
        let indices = labels
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.is_normal())
            .map(|(i, _)| i)
            .collect();
        Self { indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// `d loss / d S`, same shape as the input.
    pub gradient: Matrix,
}

impl LossResult {
    fn zero(b: usize) -> Self {
        Self {
            value: 0.0,
            gradient: Matrix::zeros(b, b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_ab: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_ab: 1.0 }
    }
}

impl LossConfig {
    pub fn new(lambda_ab: f64) -> Result<Self> {
        let cfg = Self { lambda_ab };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda_ab.is_finite() || self.lambda_ab < 0.0 {
            return Err(Error::config(
                "lambda_ab",
                format!("must be finite and >= 0, got {}", self.lambda_ab),
            ));
        }
        Ok(())
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_labels(b: usize, labels: &[PairPseudoLabel]) -> Result<()> {
    if labels.len() != b {
        return Err(Error::shape(format!(
            "{} pair labels for a batch of {b}",
            labels.len()
        )));
    }
    Ok(())
}

/// Symmetric InfoNCE: image-to-text over rows plus text-to-image over columns.
pub fn infonce_baseline(s: &SimilarityMatrix) -> LossResult {
    let m = s.as_matrix();
    let b = m.rows();
    let inv_b = 1.0 / b as f64;

    let mut row_sm = Matrix::zeros(b, b);
    let mut row_lse = vec![0.0; b];
    for i in 0..b {
        let row = m.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        row_lse[i] = max + sum.ln();
        for j in 0..b {
            row_sm[(i, j)] = (row[j] - row_lse[i]).exp();
        }
    }

    let mut col_sm = Matrix::zeros(b, b);
    let mut col_lse = vec![0.0; b];
    for j in 0..b {
        let max = (0..b).map(|i| m[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..b).map(|i| (m[(i, j)] - max).exp()).sum();
        col_lse[j] = max + sum.ln();
        for i in 0..b {
            col_sm[(i, j)] = (m[(i, j)] - col_lse[j]).exp();
        }
    }

    let mut value = 0.0;
    for i in 0..b {
        value += (row_lse[i] - m[(i, i)]) + (col_lse[i] - m[(i, i)]);
    }
    value *= inv_b;

    let gradient = Matrix::from_fn(b, b, |i, j| {
        let eye = if i == j { 1.0 } else { 0.0 };
        inv_b * ((row_sm[(i, j)] - eye) + (col_sm[(i, j)] - eye))
    });

    LossResult {
        // Cross-entropy terms are >= 0 mathematically; rounding can leave -0.0 or -1e-17.
        value: value.max(0.0),
        gradient,
    }
}

pub fn build_target_matrix(labels: &[PairPseudoLabel]) -> Result<TargetMatrix> {
    if labels.is_empty() {
        return Err(Error::invalid("cannot build a target matrix from zero labels"));
    }
    let b = labels.len();
    let values = Matrix::from_fn(b, b, |i, j| {
        if i == j || (labels[i].is_normal() && labels[j].is_normal()) {
            1.0
        } else {
            0.0
        }
    });
    Ok(TargetMatrix {
        values,
        labels: labels.to_vec(),
    })
}

/// Mean binary cross-entropy of `sigmoid(S)` against the target matrix.
///
/// The symmetric double sum with its `1 / (2 B^2)` factor visits every entry
/// twice, so it reduces to the plain mean over all `B^2` entries.
pub fn off_diagonal_loss(s: &SimilarityMatrix, y: &TargetMatrix) -> Result<LossResult> {
    let b = s.batch_size();
    if y.batch_size() != b {
        return Err(Error::shape(format!(
            "target is {0}x{0} but similarity is {b}x{b}",
            y.batch_size()
        )));
    }
    let m = s.as_matrix();
    let t = y.values();
    let inv_n = 1.0 / (b * b) as f64;

    let mut value = 0.0;
    let mut gradient = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            let x = m[(i, j)];
            let target = t[(i, j)];
            // -log sigma(x) = softplus(-x), -log(1 - sigma(x)) = softplus(x)
            value += target * softplus(-x) + (1.0 - target) * softplus(x);
            gradient[(i, j)] = inv_n * (sigmoid(x) - target);
        }
    }
    Ok(LossResult {
        value: value * inv_n,
        gradient,
    })
}

/// Rows and columns of `S` at the abnormal positions, in original order.
///
/// The returned matrix is `0 x 0` when the batch has no abnormal pairs.
pub fn extract_abnormal_submatrix(
    s: &SimilarityMatrix,
    labels: &[PairPseudoLabel],
) -> Result<(Matrix, AbnormalIndexSet)> {
    check_labels(s.batch_size(), labels)?;
    let idx = AbnormalIndexSet::from_labels(labels);
    let sub = s.as_matrix().select(idx.indices(), idx.indices());
    Ok((sub, idx))
}

/// InfoNCE over the abnormal submatrix, with the gradient scattered back to `B x B`.
///
/// An all-normal batch contributes zero loss and zero gradient.
pub fn abnormal_infonce(s: &SimilarityMatrix, labels: &[PairPseudoLabel]) -> Result<LossResult> {
    let b = s.batch_size();
    let (sub, idx) = extract_abnormal_submatrix(s, labels)?;
    if idx.is_empty() {
        return Ok(LossResult::zero(b));
    }
    let inner = infonce_baseline(&SimilarityMatrix::new(sub)?);
    let mut gradient = Matrix::zeros(b, b);
    let ix = idx.indices();
    for (a, &i) in ix.iter().enumerate() {
        for (c, &j) in ix.iter().enumerate() {
            gradient[(i, j)] = inner.gradient[(a, c)];
        }
    }
    Ok(LossResult {
        value: inner.value,
        gradient,
    })
}

/// Both components of the combined objective, unweighted.
#[derive(Debug, Clone, PartialEq)]
pub struct OffClipParts {
    pub off: LossResult,
    pub ab: LossResult,
}

impl OffClipParts {
    pub fn combine(&self, cfg: &LossConfig) -> LossResult {
        let mut gradient = self.off.gradient.clone();
        gradient
            .add_scaled(&self.ab.gradient, cfg.lambda_ab)
            .expect("component gradients share the batch shape");
        LossResult {
            value: self.off.value + cfg.lambda_ab * self.ab.value,
            gradient,
        }
    }
}

pub fn off_clip_parts(s: &SimilarityMatrix, labels: &[PairPseudoLabel]) -> Result<OffClipParts> {
    check_labels(s.batch_size(), labels)?;
    let y = build_target_matrix(labels)?;
    Ok(OffClipParts {
        off: off_diagonal_loss(s, &y)?,
        ab: abnormal_infonce(s, labels)?,
    })
}

/// `L_off + lambda_ab * L_ab`.
pub fn total_loss(
    s: &SimilarityMatrix,
    labels: &[PairPseudoLabel],
    cfg: &LossConfig,
) -> Result<LossResult> {
    cfg.validate()?;
    Ok(off_clip_parts(s, labels)?.combine(cfg))
}

/// Selects one of the four objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Baseline,
    OffDiagonal,
    AbnormalInfonce,
    Total,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Baseline,
        LossKind::OffDiagonal,
        LossKind::AbnormalInfonce,
        LossKind::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Baseline => "baseline",
            LossKind::OffDiagonal => "off_diagonal",
            LossKind::AbnormalInfonce => "abnormal_infonce",
            LossKind::Total => "total",
        }
    }

    pub fn evaluate(
        self,
        s: &SimilarityMatrix,
        labels: &[PairPseudoLabel],
        cfg: &LossConfig,
    ) -> Result<LossResult> {
        match self {
            LossKind::Baseline => Ok(infonce_baseline(s)),
            LossKind::OffDiagonal => {
                check_labels(s.batch_size(), labels)?;
                off_diagonal_loss(s, &build_target_matrix(labels)?)
            }
            LossKind::AbnormalInfonce => abnormal_infonce(s, labels),
            LossKind::Total => total_loss(s, labels, cfg),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown loss kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub kind: LossKind,
    pub batch_size: usize,
    pub max_rel_error: f64,
    /// Entry where the maximum was attained.
    pub worst_entry: (usize, usize),
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient against central differences on every entry of `S`.
pub fn finite_difference_check(
    kind: LossKind,
    s: &SimilarityMatrix,
    labels: &[PairPseudoLabel],
    cfg: &LossConfig,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("step must be > 0, got {step}")));
    }
    if !(tolerance > 0.0) {
        return Err(Error::invalid(format!(
            "tolerance must be > 0, got {tolerance}"
        )));
    }
    let analytic = kind.evaluate(s, labels, cfg)?.gradient;
    let b = s.batch_size();
    let mut probe = s.as_matrix().clone();
    let mut max_rel = 0.0;
    let mut worst = (0, 0);
    for i in 0..b {
        for j in 0..b {
            let orig = probe[(i, j)];
            probe[(i, j)] = orig + step;
            let plus = kind
                .evaluate(&SimilarityMatrix::new(probe.clone())?, labels, cfg)?
                .value;
            probe[(i, j)] = orig - step;
            let minus = kind
                .evaluate(&SimilarityMatrix::new(probe.clone())?, labels, cfg)?
                .value;
            probe[(i, j)] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let rel = relative_error(analytic[(i, j)], numeric);
            if rel > max_rel {
                max_rel = rel;
                worst = (i, j);
            }
        }
    }
    Ok(GradCheckReport {
        kind,
        batch_size: b,
        max_rel_error: max_rel,
        worst_entry: worst,
        tolerance,
        passed: max_rel < tolerance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelPattern {
    /// Random labels with at least one of each kind.
    Mixed,
    Alternating,
    AllAbnormal,
    AllNormal,
}

impl LabelPattern {
    const CYCLE: [LabelPattern; 4] = [
        LabelPattern::Mixed,
        LabelPattern::Alternating,
        LabelPattern::AllAbnormal,
        LabelPattern::AllNormal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LabelPattern::Mixed => "mixed",
            LabelPattern::Alternating => "alternating",
            LabelPattern::AllAbnormal => "all_abnormal",
            LabelPattern::AllNormal => "all_normal",
        }
    }
}

/// A seeded gradient-check problem.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckInstance {
    pub pattern: LabelPattern,
    pub similarity: SimilarityMatrix,
    pub labels: Vec<PairPseudoLabel>,
}

/// `per_size` instances for every batch size, entries uniform in `[-scale, scale]`.
///
/// Label patterns cycle through [`LabelPattern`] within each size.
pub fn random_check_instances(
    seed: u64,
    batch_sizes: &[usize],
    per_size: usize,
    scale: f64,
) -> Result<Vec<CheckInstance>> {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("scale must be finite and > 0, got {scale}")));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(batch_sizes.len() * per_size);
    for &b in batch_sizes {
        if b < 2 {
            return Err(Error::invalid(format!("batch size must be at least 2, got {b}")));
        }
        for k in 0..per_size {
            let pattern = LabelPattern::CYCLE[k % LabelPattern::CYCLE.len()];
            let s = Matrix::from_fn(b, b, |_, _| rng.random_range(-scale..=scale));
            let labels = match pattern {
                LabelPattern::Mixed => {
                    let mut l: Vec<PairPseudoLabel> = (0..b)
                        .map(|i| match i {
                            0 => PairPseudoLabel::PseudoNormal,
                            1 => PairPseudoLabel::PseudoAbnormal,
                            _ if rng.random_bool(0.5) => PairPseudoLabel::PseudoNormal,
                            _ => PairPseudoLabel::PseudoAbnormal,
                        })
                        .collect();
                    l.shuffle(&mut rng);
                    l
                }
                LabelPattern::Alternating => (0..b)
                    .map(|i| {
                        if i % 2 == 0 {
                            PairPseudoLabel::PseudoNormal
                        } else {
                            PairPseudoLabel::PseudoAbnormal
                        }
                    })
                    .collect(),
                LabelPattern::AllAbnormal => vec![PairPseudoLabel::PseudoAbnormal; b],
                LabelPattern::AllNormal => vec![PairPseudoLabel::PseudoNormal; b],
            };
            out.push(CheckInstance {
                pattern,
                similarity: SimilarityMatrix::new(s)?,
                labels,
            });
        }
    }
    Ok(out)
}
