//! Six-row ablation over text filtering, the off-diagonal loss and abnormal InfoNCE.

use serde::{Deserialize, Serialize};

use super::{score_eval_split, summarize, ConfusionReport};
use crate::error::Result;
use crate::trainer::{
    generate_synthetic_dataset, train, LossMode, SyntheticConfig, SyntheticDataset, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationVariant {
    pub text_filtering: bool,
    pub off_diagonal: bool,
    pub abnormal_infonce: bool,
}

const fn variant(text_filtering: bool, off_diagonal: bool, abnormal_infonce: bool) -> AblationVariant {
    AblationVariant {
        text_filtering,
        off_diagonal,
        abnormal_infonce,
    }
}

/// Rows 1-6: {}, {off}, {off, ab}, {filter}, {filter, off}, {filter, off, ab}.
pub const ABLATION_VARIANTS: [AblationVariant; 6] = [
    variant(false, false, false),
    variant(false, true, false),
    variant(false, true, true),
    variant(true, false, false),
    variant(true, true, false),
    variant(true, true, true),
];

impl AblationVariant {
    /// Without the off-diagonal term the objective is plain InfoNCE.
    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.text_filtering = self.text_filtering;
        if self.off_diagonal {
            cfg.loss_mode = LossMode::OffClip;
            cfg.lambda_ab = if self.abnormal_infonce { base.lambda_ab } else { 0.0 };
        } else {
            cfg.loss_mode = LossMode::Baseline;
        }
        cfg
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.text_filtering {
            parts.push("filter");
        }
        if self.off_diagonal {
            parts.push("L_off");
        }
        if self.abnormal_infonce {
            parts.push("L_ab");
        }
        format!("{{{}}}", parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// 1-based row number.
    pub row: usize,
    pub variant: AblationVariant,
    /// `None` for rows averaged over seeds.
    pub seed: Option<u64>,
    pub normal_auc: f64,
    pub total_auc: f64,
    pub fn_over_total: f64,
    pub fp_over_total: f64,
    pub fn_share: f64,
    pub fp_share: f64,
    pub imbalance: f64,
}

impl AblationRow {
    fn new(row: usize, variant: AblationVariant, seed: u64, normal_auc: f64, total_auc: f64, c: &ConfusionReport) -> Self {
        Self {
            row,
            variant,
            seed: Some(seed),
            normal_auc,
            total_auc,
            fn_over_total: c.fn_over_total,
            fp_over_total: c.fp_over_total,
            fn_share: c.fn_share,
            fp_share: c.fp_share,
            imbalance: c.imbalance,
        }
    }
}

/// Trains and evaluates all six variants on one dataset, one thread per variant.
pub fn ablation_grid(data: &SyntheticDataset, base: &TrainConfig) -> Result<Vec<AblationRow>> {
    let results: Vec<Result<AblationRow>> = std::thread::scope(|scope| {
        let handles: Vec<_> = ABLATION_VARIANTS
            .iter()
            .enumerate()
            .map(|(i, v)| {
                scope.spawn(move || {
                    let cfg = v.train_config(base);
                    let (params, _) = train(data, &cfg)?;
                    let rows = score_eval_split(&params, &data.eval, &data.prompts)?;
                    let s = summarize(&rows)?;
                    Ok(AblationRow::new(i + 1, *v, cfg.seed, s.normal_auc, s.total_auc, &s.confusion))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation worker panicked"))
            .collect()
    });
    results.into_iter().collect()
}

/// Runs the grid once per seed; the seed drives both data generation and training.
pub fn ablation_over_seeds(
    synthetic: &SyntheticConfig,
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let data = generate_synthetic_dataset(&SyntheticConfig {
            seed,
            ..synthetic.clone()
        })?;
        let cfg = TrainConfig {
            seed,
            ..base.clone()
        };
        rows.extend(ablation_grid(&data, &cfg)?);
    }
    Ok(rows)
}

/// Per-row means over all seeds, in row order.
pub fn mean_rows(rows: &[AblationRow]) -> Vec<AblationRow> {
    let mut out = Vec::new();
    for (i, v) in ABLATION_VARIANTS.iter().enumerate() {
        let group: Vec<&AblationRow> = rows.iter().filter(|r| r.row == i + 1).collect();
        if group.is_empty() {
            continue;
        }
        let m = |f: fn(&AblationRow) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / group.len() as f64;
        out.push(AblationRow {
            row: i + 1,
            variant: *v,
            seed: None,
            normal_auc: m(|r| r.normal_auc),
            total_auc: m(|r| r.total_auc),
            fn_over_total: m(|r| r.fn_over_total),
            fp_over_total: m(|r| r.fp_over_total),
            fn_share: m(|r| r.fn_share),
            fp_share: m(|r| r.fp_share),
            imbalance: m(|r| r.imbalance),
        });
    }
    out
}

pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "row,text_filter,l_off,l_ab,seed,normal_auc,total_auc,fn_over_total,fp_over_total,fn_share,fp_share,imbalance\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            r.row,
            r.variant.text_filtering as u8,
            r.variant.off_diagonal as u8,
            r.variant.abnormal_infonce as u8,
            r.seed.map_or_else(|| "mean".to_string(), |s| s.to_string()),
            r.normal_auc,
            r.total_auc,
            r.fn_over_total,
            r.fp_over_total,
            r.fn_share,
            r.fp_share,
            r.imbalance
        ));
    }
    out
}
