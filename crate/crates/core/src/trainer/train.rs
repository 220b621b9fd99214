//! Deterministic single-threaded training loop with Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{backward, forward, EncoderGrads, EncoderParams, DEFAULT_TEMPERATURE};
use super::synthetic::SyntheticDataset;
use crate::error::{Error, Result};
use crate::losses::{
    infonce_baseline, off_clip_parts, LossConfig, LossResult, OffClipParts, PairPseudoLabel,
    SimilarityMatrix,
};
use crate::matrix::Matrix;
use crate::report::{retained_sentence_indices, select_sentence_index, SentenceLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Symmetric InfoNCE over the full batch.
    Baseline,
    /// Off-diagonal BCE plus `lambda_ab` times abnormal-only InfoNCE.
    OffClip,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Baseline => "baseline",
            LossMode::OffClip => "off_clip",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss_mode: LossMode,
    pub text_filtering: bool,
    pub lambda_ab: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_mode: LossMode::OffClip,
            text_filtering: true,
            lambda_ab: 1.0,
            batch_size: 32,
            epochs: 30,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            temperature: DEFAULT_TEMPERATURE,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        // learning_rate 0 is allowed and freezes the parameters.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be finite and >= 0"));
        }
        LossConfig::new(self.lambda_ab)?;
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, "must lie in [0, 1)"));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::config("adam_epsilon", "must be > 0"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be finite and > 0"));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_ab: self.lambda_ab,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub total_loss: f64,
    pub off_loss: Option<f64>,
    pub ab_loss: Option<f64>,
    pub baseline_loss: Option<f64>,
    pub batches: usize,
    /// Training sentences drawn from pseudo-abnormal reports this epoch.
    pub abnormal_report_selections: usize,
    /// How many of those were normal-labelled sentences.
    pub abnormal_report_normal_selections: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainingHistory {
    pub const CSV_HEADER: &'static str = "epoch,total_loss,off_loss,ab_loss,baseline_loss";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:?},{},{},{}\n",
                e.epoch,
                e.total_loss,
                opt(e.off_loss),
                opt(e.ab_loss),
                opt(e.baseline_loss)
            ));
        }
        out
    }

    pub fn total_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.total_loss).collect()
    }
}

/// One optimisation step as seen by a [`TrainObserver`].
pub struct BatchEvent<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub similarity: &'a SimilarityMatrix,
    pub labels: &'a [PairPseudoLabel],
    pub loss: &'a LossResult,
    /// Present in `OffClip` mode.
    pub parts: Option<&'a OffClipParts>,
}

pub trait TrainObserver {
    fn on_batch(&mut self, _event: &BatchEvent<'_>) {}

    fn on_epoch_end(&mut self, _stats: &EpochStats, _params: &EncoderParams) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Loss value, its S-gradient and (for `OffClip`) the unweighted parts.
pub(crate) fn batch_objective(
    s: &SimilarityMatrix,
    labels: &[PairPseudoLabel],
    mode: LossMode,
    cfg: &LossConfig,
) -> Result<(LossResult, Option<OffClipParts>)> {
    match mode {
        LossMode::Baseline => Ok((infonce_baseline(s), None)),
        LossMode::OffClip => {
            let parts = off_clip_parts(s, labels)?;
            Ok((parts.combine(cfg), Some(parts)))
        }
    }
}

/// Loss and encoder gradients for one batch of paired features.
pub fn batch_loss_and_grads<I, T>(
    params: &EncoderParams,
    images: &[I],
    texts: &[T],
    labels: &[PairPseudoLabel],
    mode: LossMode,
    cfg: &LossConfig,
) -> Result<(f64, EncoderGrads)>
where
    I: AsRef<[f64]>,
    T: AsRef<[f64]>,
{
    let fwd = forward(params, images, texts)?;
    let (loss, _) = batch_objective(&fwd.similarity, labels, mode, cfg)?;
    let grads = backward(params, &fwd, images, texts, &loss.gradient);
    Ok((loss.value, grads))
}

struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    lr: f64,
    t: i32,
    m: [Matrix; 2],
    v: [Matrix; 2],
}

impl Adam {
    fn new(cfg: &TrainConfig, params: &EncoderParams) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_epsilon,
            lr: cfg.learning_rate,
            t: 0,
            m: [z(&params.w_img), z(&params.w_txt)],
            v: [z(&params.w_img), z(&params.w_txt)],
        }
    }

    fn step(&mut self, params: &mut EncoderParams, grads: &EncoderGrads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let targets = [
            (&mut params.w_img, &grads.w_img),
            (&mut params.w_txt, &grads.w_txt),
        ];
        for (k, (w, g)) in targets.into_iter().enumerate() {
            let m = self.m[k].as_mut_slice();
            let v = self.v[k].as_mut_slice();
            for (((w, &g), m), v) in w
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Initial encoder weights for a dataset and training config.
pub fn initial_params(data: &SyntheticDataset, cfg: &TrainConfig) -> Result<EncoderParams> {
    EncoderParams::init(
        data.config.d_img,
        data.config.d_txt,
        data.config.d_embed,
        cfg.temperature,
        cfg.seed,
    )
}

pub fn train(data: &SyntheticDataset, cfg: &TrainConfig) -> Result<(EncoderParams, TrainingHistory)> {
    train_with_observer(data, cfg, &mut ())
}

/// Runs the full loop. Only report pseudo-labels are read; ground truth is never touched.
pub fn train_with_observer(
    data: &SyntheticDataset,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(EncoderParams, TrainingHistory)> {
    cfg.validate()?;
    let n = data.train.len();
    if cfg.batch_size > n {
        return Err(Error::config(
            "batch_size",
            format!("{} exceeds the {n} training samples", cfg.batch_size),
        ));
    }
    let loss_cfg = cfg.loss_config();
    let mut params = initial_params(data, cfg)?;
    let mut adam = Adam::new(cfg, &params);

    // Candidate sentences per report, fixed across epochs.
    let candidates: Vec<Vec<usize>> = data
        .train
        .iter()
        .map(|r| {
            if cfg.text_filtering {
                retained_sentence_indices(&r.report)
            } else {
                Ok((0..r.report.sentences().len()).collect())
            }
        })
        .collect::<Result<_>>()?;
    let labels: Vec<PairPseudoLabel> = data.train.iter().map(|r| r.pseudo_label().into()).collect();

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5851_f42d_4c95_7f2d);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = TrainingHistory::default();

    for epoch in 0..cfg.epochs {
        let mut abn_sel = 0;
        let mut abn_norm_sel = 0;
        let chosen: Vec<usize> = data
            .train
            .iter()
            .zip(&candidates)
            .zip(&labels)
            .map(|((r, cand), label)| {
                let k = select_sentence_index(r.report.id(), cand.len(), epoch as u64, cfg.seed)?;
                let idx = cand[k];
                if !label.is_normal() {
                    abn_sel += 1;
                    if r.report.sentences()[idx].label == Some(SentenceLabel::Normal) {
                        abn_norm_sel += 1;
                    }
                }
                Ok(idx)
            })
            .collect::<Result<_>>()?;

        order.shuffle(&mut shuffle_rng);
        let n_batches = n / cfg.batch_size;
        let (mut sum_total, mut sum_off, mut sum_ab) = (0.0, 0.0, 0.0);
        for b in 0..n_batches {
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let images: Vec<&[f64]> = idx.iter().map(|&i| data.train[i].image.as_slice()).collect();
            let texts: Vec<&[f64]> = idx
                .iter()
                .map(|&i| data.train[i].sentence_features[chosen[i]].as_slice())
                .collect();
            let batch_labels: Vec<PairPseudoLabel> = idx.iter().map(|&i| labels[i]).collect();

            let fwd = forward(&params, &images, &texts)?;
            let (loss, parts) = batch_objective(&fwd.similarity, &batch_labels, cfg.loss_mode, &loss_cfg)?;
            if !loss.value.is_finite() || !loss.gradient.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    reason: format!("loss {} with finite inputs", loss.value),
                });
            }
            observer.on_batch(&BatchEvent {
                epoch,
                batch: b,
                similarity: &fwd.similarity,
                labels: &batch_labels,
                loss: &loss,
                parts: parts.as_ref(),
            });
            let grads = backward(&params, &fwd, &images, &texts, &loss.gradient);
            adam.step(&mut params, &grads);

            sum_total += loss.value;
            if let Some(p) = &parts {
                sum_off += p.off.value;
                sum_ab += p.ab.value;
            }
        }
        if !params.w_img.is_finite() || !params.w_txt.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: n_batches,
                reason: "non-finite encoder weights".into(),
            });
        }

        let mean = |x: f64| x / n_batches as f64;
        let stats = EpochStats {
            epoch,
            total_loss: mean(sum_total),
            off_loss: (cfg.loss_mode == LossMode::OffClip).then(|| mean(sum_off)),
            ab_loss: (cfg.loss_mode == LossMode::OffClip).then(|| mean(sum_ab)),
            baseline_loss: (cfg.loss_mode == LossMode::Baseline).then(|| mean(sum_total)),
            batches: n_batches,
            abnormal_report_selections: abn_sel,
            abnormal_report_normal_selections: abn_norm_sel,
        };
        observer.on_epoch_end(&stats, &params)?;
        history.epochs.push(stats);
    }
    Ok((params, history))
}

/// Maximum relative error between the chained analytic gradient and central
/// differences over every entry of both weight matrices.
pub fn whole_model_gradient_check<I, T>(
    params: &EncoderParams,
    images: &[I],
    texts: &[T],
    labels: &[PairPseudoLabel],
    mode: LossMode,
    cfg: &LossConfig,
    step: f64,
) -> Result<f64>
where
    I: AsRef<[f64]>,
    T: AsRef<[f64]>,
{
    let (_, analytic) = batch_loss_and_grads(params, images, texts, labels, mode, cfg)?;
    let loss_at = |p: &EncoderParams| -> Result<f64> {
        let fwd = forward(p, images, texts)?;
        Ok(batch_objective(&fwd.similarity, labels, mode, cfg)?.0.value)
    };
    let mut max_rel: f64 = 0.0;
    let analytic = [analytic.w_img.as_slice(), analytic.w_txt.as_slice()];
    for (which, grad) in analytic.into_iter().enumerate() {
        for (k, &a) in grad.iter().enumerate() {
            let mut probe = params.clone();
            let orig = weights_mut(&mut probe, which)[k];
            weights_mut(&mut probe, which)[k] = orig + step;
            let plus = loss_at(&probe)?;
            weights_mut(&mut probe, which)[k] = orig - step;
            let minus = loss_at(&probe)?;
            let numeric = (plus - minus) / (2.0 * step);
            max_rel = max_rel.max(crate::losses::relative_error(a, numeric));
        }
    }
    Ok(max_rel)
}

fn weights_mut(p: &mut EncoderParams, which: usize) -> &mut [f64] {
    if which == 0 {
        p.w_img.as_mut_slice()
    } else {
        p.w_txt.as_mut_slice()
    }
}
