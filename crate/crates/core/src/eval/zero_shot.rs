//! Prompt-based zero-shot scoring of held-out images and the scores file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{auc, binary_decision, confusion_report, ConfusionReport, ScoredSample};
use crate::error::{Error, Result};
use crate::matrix::dot;
use crate::trainer::{embed, EncoderParams, EvalRecord, Modality, PromptBank};

/// Cosine scores of one image against the normal and disease prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    /// `true` for a truly abnormal image.
    pub truth: bool,
    pub normal_score: f64,
    /// Best disease prompt score.
    pub abnormal_score: f64,
    /// `0` for normal, `k + 1` for disease `k`; optional in score files.
    pub class: Option<usize>,
    pub disease_scores: Vec<f64>,
}

pub fn score_eval_split(
    params: &EncoderParams,
    eval: &[EvalRecord],
    prompts: &PromptBank,
) -> Result<Vec<ScoreRow>> {
    let normal = embed(params, &prompts.normal.features, Modality::Text)?;
    let diseases = prompts
        .diseases
        .iter()
        .map(|p| embed(params, &p.features, Modality::Text))
        .collect::<Result<Vec<_>>>()?;
    if diseases.is_empty() {
        return Err(Error::invalid("prompt bank has no disease prompts"));
    }
    eval.iter()
        .map(|r| {
            let u = embed(params, &r.image, Modality::Image)?;
            let disease_scores: Vec<f64> = diseases.iter().map(|d| dot(&u, d)).collect();
            let abnormal_score = disease_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok(ScoreRow {
                id: r.id.clone(),
                truth: r.is_abnormal(),
                normal_score: dot(&u, &normal),
                abnormal_score,
                class: Some(r.class),
                disease_scores,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub samples: usize,
    /// AUC for detecting normal images from `normal_score - abnormal_score`.
    pub normal_auc: f64,
    /// One-vs-rest AUC per disease from `disease_score - normal_score`, when classes are known.
    pub disease_auc: Vec<Option<f64>>,
    /// Mean of the normal AUC and every defined disease AUC.
    pub total_auc: f64,
    pub confusion: ConfusionReport,
}

pub fn summarize(rows: &[ScoreRow]) -> Result<EvalSummary> {
    let normal: Vec<ScoredSample> = rows
        .iter()
        .map(|r| ScoredSample::new(r.normal_score - r.abnormal_score, !r.truth))
        .collect();
    let normal_auc = auc(&normal)?;

    let n_diseases = rows.first().map_or(0, |r| r.disease_scores.len());
    let classes_known = rows
        .iter()
        .all(|r| r.class.is_some() && r.disease_scores.len() == n_diseases);
    let mut disease_auc = Vec::new();
    if classes_known {
        for k in 0..n_diseases {
            let s: Vec<ScoredSample> = rows
                .iter()
                .map(|r| ScoredSample::new(r.disease_scores[k] - r.normal_score, r.class == Some(k + 1)))
                .collect();
            // a disease absent from the split has no AUC
            disease_auc.push(auc(&s).ok());
        }
    }
    let defined: Vec<f64> = std::iter::once(normal_auc)
        .chain(disease_auc.iter().flatten().copied())
        .collect();
    let total_auc = defined.iter().sum::<f64>() / defined.len() as f64;

    let decisions: Vec<_> = rows
        .iter()
        .map(|r| binary_decision(r.normal_score, r.abnormal_score))
        .collect();
    let truths: Vec<bool> = rows.iter().map(|r| r.truth).collect();
    Ok(EvalSummary {
        samples: rows.len(),
        normal_auc,
        disease_auc,
        total_auc,
        confusion: confusion_report(&decisions, &truths)?,
    })
}

impl EvalSummary {
    pub fn to_csv(&self) -> String {
        let c = &self.confusion;
        let mut out = String::from(
            "samples,normal_auc,total_auc,fn_over_total,fp_over_total,fn_share,fp_share,imbalance\n",
        );
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            self.samples,
            self.normal_auc,
            self.total_auc,
            c.fn_over_total,
            c.fp_over_total,
            c.fn_share,
            c.fp_share,
            c.imbalance
        ));
        out
    }
}

/// `id,truth,normal_score,abnormal_score[,class,score_0,...]`; truth is 1 for abnormal.
pub fn scores_to_csv(rows: &[ScoreRow]) -> String {
    let n_d = rows.first().map_or(0, |r| r.disease_scores.len());
    let with_classes = rows
        .iter()
        .all(|r| r.class.is_some() && r.disease_scores.len() == n_d);
    let mut out = String::from("id,truth,normal_score,abnormal_score");
    if with_classes {
        out.push_str(",class");
        for k in 0..n_d {
            out.push_str(&format!(",score_{k}"));
        }
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:?},{:?}",
            r.id, r.truth as u8, r.normal_score, r.abnormal_score
        ));
        if with_classes {
            out.push_str(&format!(",{}", r.class.unwrap_or_default()));
            for s in &r.disease_scores {
                out.push_str(&format!(",{s:?}"));
            }
        }
        out.push('\n');
    }
    out
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let required = |name: &str| {
        col(name).ok_or_else(|| Error::config(name, format!("missing column in {}", path.display())))
    };
    let (c_id, c_truth, c_norm, c_abn) = (
        required("id")?,
        required("truth")?,
        required("normal_score")?,
        required("abnormal_score")?,
    );
    let c_class = col("class");
    let score_cols: Vec<usize> = (0..)
        .map_while(|k| col(&format!("score_{k}")))
        .collect();

    let mut rows = Vec::new();
    for (n, rec) in reader.records().enumerate() {
        let line = n + 2;
        let rec_err = |reason: String| Error::Record {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let rec = rec.map_err(|e| rec_err(e.to_string()))?;
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let num = |c: usize| -> Result<f64> {
            let v: f64 = field(c)
                .parse()
                .map_err(|_| rec_err(format!("`{}` is not a number", field(c))))?;
            if !v.is_finite() {
                return Err(rec_err(format!("non-finite score `{}`", field(c))));
            }
            Ok(v)
        };
        let truth = match field(c_truth) {
            "1" => true,
            "0" => false,
            other => return Err(rec_err(format!("truth must be 0 or 1, got `{other}`"))),
        };
        let class = match c_class {
            Some(c) => Some(
                field(c)
                    .parse::<usize>()
                    .map_err(|_| rec_err(format!("bad class `{}`", field(c))))?,
            ),
            None => None,
        };
        rows.push(ScoreRow {
            id: field(c_id).to_string(),
            truth,
            normal_score: num(c_norm)?,
            abnormal_score: num(c_abn)?,
            class,
            disease_scores: score_cols.iter().map(|&c| num(c)).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}
