//! Report pipeline: sentence labels, report pseudo-labels, filtering of
//! normal and uncertain sentences out of abnormal reports, prompt templating
//! and the per-epoch choice of one training sentence per report.

mod corpus;
mod lexicon;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use corpus::{
    import_sentence_labels, read_predictions, Corpus, FilterStats, Prediction,
};
pub use lexicon::LexiconClassifier;

use crate::error::{Error, Result};
use crate::losses::PairPseudoLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentenceLabel {
    Normal,
    Abnormal,
    Uncertain,
}

impl SentenceLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SentenceLabel::Normal => "normal",
            SentenceLabel::Abnormal => "abnormal",
            SentenceLabel::Uncertain => "uncertain",
        }
    }
}

impl std::str::FromStr for SentenceLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(SentenceLabel::Normal),
            "abnormal" => Ok(SentenceLabel::Abnormal),
            "uncertain" => Ok(SentenceLabel::Uncertain),
            other => Err(Error::invalid(format!("unknown sentence label `{other}`"))),
        }
    }
}

/// Report-level pseudo-label, shared by the image and its report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportLabel {
    PseudoNormal,
    PseudoAbnormal,
}

impl From<ReportLabel> for PairPseudoLabel {
    fn from(l: ReportLabel) -> Self {
        match l {
            ReportLabel::PseudoNormal => PairPseudoLabel::PseudoNormal,
            ReportLabel::PseudoAbnormal => PairPseudoLabel::PseudoAbnormal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    text: String,
    /// `None` until a classifier or an import assigns one.
    pub label: Option<SentenceLabel>,
}

impl Sentence {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::invalid("sentence text is empty"));
        }
        Ok(Self { text, label: None })
    }

    pub fn labeled(text: impl Into<String>, label: SentenceLabel) -> Result<Self> {
        let mut s = Self::new(text)?;
        s.label = Some(label);
        Ok(s)
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    id: String,
    sentences: Vec<Sentence>,
    pub report_label: Option<ReportLabel>,
}

impl Report {
    pub fn new(id: impl Into<String>, sentences: Vec<Sentence>) -> Result<Self> {
        let id = id.into();
        if sentences.is_empty() {
            return Err(Error::invalid(format!("report `{id}` has no sentences")));
        }
        Ok(Self {
            id,
            sentences,
            report_label: None,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn sentences_mut(&mut self) -> &mut [Sentence] {
        &mut self.sentences
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.sentences.iter().all(|s| s.label.is_some())
    }

    /// Labels every sentence that does not have a label yet.
    pub fn classify_unlabeled(&mut self, clf: &LexiconClassifier) -> Result<()> {
        for s in self.sentences.iter_mut().filter(|s| s.label.is_none()) {
            s.label = Some(clf.classify(&s.text)?);
        }
        Ok(())
    }

    /// Aggregates sentence labels and stores the report label.
    pub fn assign_report_label(&mut self) -> Result<ReportLabel> {
        let labels: Vec<_> = self.sentences.iter().map(|s| s.label).collect();
        let label = aggregate_report_label(&labels)
            .map_err(|e| Error::invalid(format!("report `{}`: {e}", self.id)))?;
        self.report_label = Some(label);
        Ok(label)
    }
}

pub fn classify_sentence(s: &Sentence, clf: &LexiconClassifier) -> Result<SentenceLabel> {
    clf.classify(&s.text)
}

/// Abnormal iff at least one sentence is abnormal; otherwise normal.
pub fn aggregate_report_label(labels: &[Option<SentenceLabel>]) -> Result<ReportLabel> {
    if labels.is_empty() {
        return Err(Error::invalid("no sentence labels to aggregate"));
    }
    let mut any_abnormal = false;
    for (i, l) in labels.iter().enumerate() {
        match l {
            None => return Err(Error::invalid(format!("sentence {i} is unlabeled"))),
            Some(SentenceLabel::Abnormal) => any_abnormal = true,
            Some(_) => {}
        }
    }
    Ok(if any_abnormal {
        ReportLabel::PseudoAbnormal
    } else {
        ReportLabel::PseudoNormal
    })
}

/// Indices of the sentences that survive filtering, in order.
pub fn retained_sentence_indices(r: &Report) -> Result<Vec<usize>> {
    if !r.is_fully_labeled() {
        return Err(Error::invalid(format!("report `{}` is not fully labeled", r.id)));
    }
    match r.report_label {
        None => Err(Error::invalid(format!("report `{}` has no report label", r.id))),
        Some(ReportLabel::PseudoNormal) => Ok((0..r.sentences.len()).collect()),
        Some(ReportLabel::PseudoAbnormal) => {
            let kept: Vec<usize> = r
                .sentences
                .iter()
                .enumerate()
                .filter(|(_, s)| s.label == Some(SentenceLabel::Abnormal))
                .map(|(i, _)| i)
                .collect();
            assert!(
                !kept.is_empty(),
                "abnormal report `{}` has no abnormal sentence",
                r.id
            );
            Ok(kept)
        }
    }
}

/// Drops normal and uncertain sentences from abnormal reports; normal reports pass through.
pub fn filter_report(r: &Report) -> Result<Report> {
    let kept = retained_sentence_indices(r)?;
    Ok(Report {
        id: r.id.clone(),
        sentences: kept.into_iter().map(|i| r.sentences[i].clone()).collect(),
        report_label: r.report_label,
    })
}

/// `There is {finding}` or `There is no {finding}`.
pub fn apply_prompt_template(finding: &str, negated: bool) -> Result<String> {
    let finding = finding.split_whitespace().collect::<Vec<_>>().join(" ");
    if finding.is_empty() {
        return Err(Error::invalid("prompt finding is empty"));
    }
    Ok(if negated {
        format!("There is no {finding}")
    } else {
        format!("There is {finding}")
    })
}

/// Uniform index in `0..n`, keyed on `(seed, report id)` with the epoch as the ChaCha stream.
pub fn select_sentence_index(report_id: &str, n: usize, epoch: u64, seed: u64) -> Result<usize> {
    if n == 0 {
        return Err(Error::invalid(format!(
            "report `{report_id}` has no sentences to select from"
        )));
    }
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(report_id.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(epoch);
    Ok(rng.random_range(0..n))
}

pub fn select_training_sentence(r: &Report, epoch: u64, seed: u64) -> Result<&Sentence> {
    let i = select_sentence_index(&r.id, r.sentences.len(), epoch, seed)?;
    Ok(&r.sentences[i])
}

#[cfg(test)]
mod tests {
    use super::SentenceLabel::{Abnormal as Abn, Normal as Norm, Uncertain as Unc};
    use super::*;

    fn report(id: &str, parts: &[(&str, SentenceLabel)]) -> Report {
        let sentences = parts
            .iter()
            .map(|(t, l)| Sentence::labeled(*t, *l).unwrap())
            .collect();
        let mut r = Report::new(id, sentences).unwrap();
        r.assign_report_label().unwrap();
        r
    }

    #[test]
    fn sentence_and_report_validation() {
        assert!(Sentence::new("  \t").is_err());
        assert!(Report::new("r", vec![]).is_err());
    }

    #[test]
    fn aggregation_examples() {
        assert_eq!(
            aggregate_report_label(&[Some(Norm), Some(Abn)]).unwrap(),
            ReportLabel::PseudoAbnormal
        );
        assert_eq!(
            aggregate_report_label(&[Some(Norm), Some(Unc)]).unwrap(),
            ReportLabel::PseudoNormal
        );
        assert_eq!(
            aggregate_report_label(&[Some(Unc)]).unwrap(),
            ReportLabel::PseudoNormal
        );
        assert!(aggregate_report_label(&[Some(Abn), None]).is_err());
        assert!(aggregate_report_label(&[]).is_err());
    }

    #[test]
    fn filter_examples() {
        let r = report(
            "a",
            &[("no effusion", Norm), ("cardiomegaly present", Abn)],
        );
        let f = filter_report(&r).unwrap();
        assert_eq!(f.sentences().len(), 1);
        assert_eq!(f.sentences()[0].text(), "cardiomegaly present");
        assert_eq!(f.report_label, Some(ReportLabel::PseudoAbnormal));

        let n = report("n", &[("a", Norm), ("b", Unc), ("c", Norm)]);
        assert_eq!(filter_report(&n).unwrap(), n);

        let mixed = report("m", &[("s0", Abn), ("s1", Unc), ("s2", Abn), ("s3", Norm)]);
        let f = filter_report(&mixed).unwrap();
        let texts: Vec<_> = f.sentences().iter().map(|s| s.text()).collect();
        assert_eq!(texts, ["s0", "s2"]);
    }

    #[test]
    fn filter_requires_labels() {
        let r = Report::new("x", vec![Sentence::new("effusion").unwrap()]).unwrap();
        assert!(filter_report(&r).is_err());
        let mut r = r;
        r.sentences_mut()[0].label = Some(Abn);
        // sentence labeled but no report label yet
        assert!(filter_report(&r).is_err());
    }

    #[test]
    fn template_examples() {
        assert_eq!(
            apply_prompt_template("pneumonia", true).unwrap(),
            "There is no pneumonia"
        );
        assert_eq!(
            apply_prompt_template("pleural effusion at the left lung base", false).unwrap(),
            "There is pleural effusion at the left lung base"
        );
        assert_eq!(
            apply_prompt_template("cardiomegaly", false).unwrap(),
            "There is cardiomegaly"
        );
        assert!(apply_prompt_template("  ", false).is_err());
    }

    #[test]
    fn selection_single_sentence_and_determinism() {
        let r = report("solo", &[("effusion", Abn)]);
        for epoch in 0..50 {
            assert_eq!(select_training_sentence(&r, epoch, 3).unwrap().text(), "effusion");
        }
        let r4 = report("four", &[("a", Abn), ("b", Abn), ("c", Abn), ("d", Abn)]);
        for epoch in 0..20 {
            assert_eq!(
                select_training_sentence(&r4, epoch, 9).unwrap(),
                select_training_sentence(&r4, epoch, 9).unwrap()
            );
        }
        assert!(select_sentence_index("empty", 0, 0, 0).is_err());
    }

    #[test]
    fn selection_is_uniform() {
        let mut counts = [0usize; 4];
        for epoch in 0..10_000 {
            counts[select_sentence_index("rpt-17", 4, epoch, 42).unwrap()] += 1;
        }
        for c in counts {
            let freq = c as f64 / 10_000.0;
            assert!((freq - 0.25).abs() <= 0.02, "{counts:?}");
        }
    }
}
