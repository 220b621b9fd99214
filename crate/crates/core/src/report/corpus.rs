//! Line-delimited corpus and prediction files.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{filter_report, LexiconClassifier, Report, ReportLabel, Sentence, SentenceLabel};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusRecord {
    id: String,
    sentences: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<Option<SentenceLabel>>>,
}

/// One externally predicted sentence label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub id: String,
    pub sentence_index: usize,
    pub label: SentenceLabel,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub reports: usize,
    pub reports_pseudo_normal: usize,
    pub reports_pseudo_abnormal: usize,
    pub sentences_in: usize,
    pub sentences_out: usize,
    pub sentences_removed: usize,
    pub removed_normal: usize,
    pub removed_uncertain: usize,
}

/// Reports with unique ids, kept in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    reports: Vec<Report>,
}

impl Corpus {
    pub fn new(reports: Vec<Report>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &reports {
            if !seen.insert(r.id()) {
                return Err(Error::invalid(format!("duplicate report id `{}`", r.id())));
            }
        }
        Ok(Self { reports })
    }

    pub fn reports(&self) -> &[Report] {
        &self.reports
    }

    pub fn reports_mut(&mut self) -> &mut [Report] {
        &mut self.reports
    }

    pub fn into_reports(self) -> Vec<Report> {
        self.reports
    }

    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }

    pub fn from_jsonl_str(text: &str, source: &Path) -> Result<Self> {
        let mut reports = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec_err = |reason: String| Error::Record {
                path: source.to_path_buf(),
                line: n + 1,
                reason,
            };
            let rec: CorpusRecord =
                serde_json::from_str(line).map_err(|e| rec_err(e.to_string()))?;
            if let Some(labels) = &rec.labels {
                if labels.len() != rec.sentences.len() {
                    return Err(rec_err(format!(
                        "{} labels for {} sentences",
                        labels.len(),
                        rec.sentences.len()
                    )));
                }
            }
            let labels = rec.labels.unwrap_or_else(|| vec![None; rec.sentences.len()]);
            let sentences = rec
                .sentences
                .into_iter()
                .zip(labels)
                .map(|(t, l)| {
                    let mut s = Sentence::new(t)?;
                    s.label = l;
                    Ok(s)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| rec_err(e.to_string()))?;
            let mut report = Report::new(rec.id, sentences).map_err(|e| rec_err(e.to_string()))?;
            if report.is_fully_labeled() {
                report.assign_report_label()?;
            }
            reports.push(report);
        }
        Self::new(reports)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl_str(&text, path)
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut out = String::new();
        for r in &self.reports {
            let any_label = r.sentences().iter().any(|s| s.label.is_some());
            let rec = CorpusRecord {
                id: r.id().to_string(),
                sentences: r.sentences().iter().map(|s| s.text().to_string()).collect(),
                labels: any_label.then(|| r.sentences().iter().map(|s| s.label).collect()),
            };
            out.push_str(&serde_json::to_string(&rec).expect("corpus records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl_string()).map_err(|e| Error::io(path, e))
    }

    pub fn classify_unlabeled(&mut self, clf: &LexiconClassifier) -> Result<()> {
        for r in &mut self.reports {
            r.classify_unlabeled(clf)
                .map_err(|e| Error::invalid(format!("report `{}`: {e}", r.id())))?;
        }
        Ok(())
    }

    pub fn assign_report_labels(&mut self) -> Result<()> {
        for r in &mut self.reports {
            r.assign_report_label()?;
        }
        Ok(())
    }

    /// Filters every report; all reports must already carry labels.
    pub fn filter(&self) -> Result<(Corpus, FilterStats)> {
        let mut stats = FilterStats {
            reports: self.reports.len(),
            ..FilterStats::default()
        };
        let mut out = Vec::with_capacity(self.reports.len());
        for r in &self.reports {
            let f = filter_report(r)?;
            match f.report_label {
                Some(ReportLabel::PseudoAbnormal) => stats.reports_pseudo_abnormal += 1,
                _ => stats.reports_pseudo_normal += 1,
            }
            stats.sentences_in += r.sentences().len();
            stats.sentences_out += f.sentences().len();
            if f.sentences().len() != r.sentences().len() {
                for s in r.sentences() {
                    match s.label {
                        Some(SentenceLabel::Normal) => stats.removed_normal += 1,
                        Some(SentenceLabel::Uncertain) => stats.removed_uncertain += 1,
                        _ => {}
                    }
                }
            }
            out.push(f);
        }
        stats.sentences_removed = stats.sentences_in - stats.sentences_out;
        Ok((Corpus { reports: out }, stats))
    }
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            serde_json::from_str(line).map_err(|e| Error::Record {
                path: path.to_path_buf(),
                line: n + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Attaches imported labels, overriding whatever the sentence had.
///
/// Sentences not named by any prediction keep their current label. The corpus
/// is left untouched when any record is rejected.
pub fn import_sentence_labels(corpus: &mut Corpus, predictions: &[Prediction]) -> Result<()> {
    let index: HashMap<&str, usize> = corpus
        .reports
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id(), i))
        .collect();
    let mut seen = HashSet::new();
    let mut resolved = Vec::with_capacity(predictions.len());
    for (n, p) in predictions.iter().enumerate() {
        let bad = |reason: &str| {
            Error::invalid(format!(
                "prediction record {} (id `{}`, sentence_index {}): {reason}",
                n + 1,
                p.id,
                p.sentence_index
            ))
        };
        let &ri = index.get(p.id.as_str()).ok_or_else(|| bad("unknown report id"))?;
        if p.sentence_index >= corpus.reports[ri].sentences().len() {
            return Err(bad("sentence index out of range"));
        }
        if !seen.insert((ri, p.sentence_index)) {
            return Err(bad("duplicate entry"));
        }
        resolved.push((ri, p.sentence_index, p.label));
    }
    for (ri, si, label) in resolved {
        corpus.reports[ri].sentences_mut()[si].label = Some(label);
    }
    Ok(())
}
