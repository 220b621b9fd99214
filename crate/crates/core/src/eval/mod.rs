//! Zero-shot evaluation: ROC-AUC, FP/FN balance, pointing game and the ablation grid.

mod ablation;
mod grounding;
mod zero_shot;

use serde::{Deserialize, Serialize};

pub use ablation::{
    ablation_grid, ablation_over_seeds, mean_rows, rows_to_csv, AblationRow, AblationVariant,
    ABLATION_VARIANTS,
};
pub use grounding::{
    pointing_game, pointing_game_suite, read_grounding_file, AttentionMap, GroundTruthBox,
    GroundingCase, PointingSuiteResult,
};
pub use zero_shot::{
    read_scores_csv, score_eval_split, scores_to_csv, summarize, EvalSummary, ScoreRow,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub truth: bool,
}

impl ScoredSample {
    pub fn new(score: f64, truth: bool) -> Self {
        Self { score, truth }
    }
}

fn class_counts(samples: &[ScoredSample]) -> Result<(usize, usize)> {
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::NonFinite(format!("score {}", s.score)));
    }
    let pos = samples.iter().filter(|s| s.truth).count();
    let neg = samples.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(format!(
            "AUC needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUC: probability a positive outscores a negative, ties count half.
///
/// Uses average ranks over tied groups; the rank sum is a multiple of 0.5 and
/// therefore exact in `f64` for any realistic sample count.
pub fn auc(samples: &[ScoredSample]) -> Result<f64> {
    let (pos, neg) = class_counts(samples)?;
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].score == sorted[i].score {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean
        let avg_rank = (i + j + 2) as f64 / 2.0;
        let group_pos = sorted[i..=j].iter().filter(|s| s.truth).count();
        rank_sum_pos += avg_rank * group_pos as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Area under the empirical ROC curve by the trapezoidal rule.
pub fn roc_auc_trapezoid(samples: &[ScoredSample]) -> Result<f64> {
    let (pos, neg) = class_counts(samples)?;
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));

    // Work in counts and divide once so the result matches pair counting exactly.
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut twice_area: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let (prev_tp, prev_fp) = (tp, fp);
        let score = sorted[i].score;
        while i < sorted.len() && sorted[i].score == score {
            if sorted[i].truth {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += ((fp - prev_fp) * (tp + prev_tp)) as u128;
    }
    Ok(twice_area as f64 / 2.0 / (pos as f64 * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    PredictedNormal,
    PredictedAbnormal,
}

/// Abnormal iff the abnormal prompt scores strictly higher.
pub fn binary_decision(normal_score: f64, abnormal_score: f64) -> Decision {
    if abnormal_score > normal_score {
        Decision::PredictedAbnormal
    } else {
        Decision::PredictedNormal
    }
}

/// Error-type balance. A false positive is a truly normal sample predicted abnormal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    pub total: usize,
    pub true_positives: usize,
    pub true_negatives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub fn_over_total: f64,
    pub fp_over_total: f64,
    pub fn_share: f64,
    pub fp_share: f64,
    pub imbalance: f64,
}

impl ConfusionReport {
    pub fn correct_over_total(&self) -> f64 {
        (self.true_positives + self.true_negatives) as f64 / self.total as f64
    }
}

/// `truths[i]` is `true` for an abnormal sample.
pub fn confusion_report(decisions: &[Decision], truths: &[bool]) -> Result<ConfusionReport> {
    if decisions.is_empty() {
        return Err(Error::invalid("confusion report needs at least one sample"));
    }
    if decisions.len() != truths.len() {
        return Err(Error::shape(format!(
            "{} decisions for {} truths",
            decisions.len(),
            truths.len()
        )));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (&d, &t) in decisions.iter().zip(truths) {
        match (t, d) {
            (true, Decision::PredictedAbnormal) => tp += 1,
            (true, Decision::PredictedNormal) => fn_ += 1,
            (false, Decision::PredictedAbnormal) => fp += 1,
            (false, Decision::PredictedNormal) => tn += 1,
        }
    }
    let total = decisions.len();
    let errors = fp + fn_;
    let (fn_share, fp_share) = if errors == 0 {
        (0.0, 0.0)
    } else {
        (fn_ as f64 / errors as f64, fp as f64 / errors as f64)
    };
    Ok(ConfusionReport {
        total,
        true_positives: tp,
        true_negatives: tn,
        false_positives: fp,
        false_negatives: fn_,
        fn_over_total: fn_ as f64 / total as f64,
        fp_over_total: fp as f64 / total as f64,
        fn_share,
        fp_share,
        imbalance: (fn_share - fp_share).abs(),
    })
}
