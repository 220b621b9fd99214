//! Rule-based sentence classifier with whole-phrase matching and forward negation scope.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SentenceLabel;
use crate::error::{Error, Result};

const DEFAULT_ABNORMAL: &[&str] = &[
    "aortic enlargement",
    "atelectasis",
    "calcification",
    "cardiomegaly",
    "cavitation",
    "collapse",
    "congestion",
    "consolidation",
    "edema",
    "effusion",
    "effusions",
    "emphysema",
    "enlarged",
    "enlargement",
    "fibrosis",
    "fracture",
    "granuloma",
    "hernia",
    "hyperinflation",
    "infiltrate",
    "infiltrates",
    "infiltration",
    "lesion",
    "lymphadenopathy",
    "mass",
    "metastasis",
    "nodule",
    "nodules",
    "opacification",
    "opacities",
    "opacity",
    "pleural effusion",
    "pleural thickening",
    "pneumonia",
    "pneumothorax",
    "scarring",
    "thickening",
    "tortuosity",
    "tortuous",
    "widening",
];

const DEFAULT_NEGATION: &[&str] = &["no", "without", "free of", "negative for"];

const DEFAULT_NORMAL: &[&str] = &["unremarkable", "clear", "normal", "within normal limits"];

/// Lowercase phrase sets used to label sentences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconClassifier {
    abnormal_terms: BTreeSet<String>,
    negation_markers: BTreeSet<String>,
    normal_terms: BTreeSet<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LexiconFile {
    abnormal_terms: Vec<String>,
    negation_markers: Vec<String>,
    normal_terms: Vec<String>,
}

impl Default for LexiconClassifier {
    fn default() -> Self {
        let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self::new(set(DEFAULT_ABNORMAL), set(DEFAULT_NEGATION), set(DEFAULT_NORMAL))
            .expect("default lexicon is valid")
    }
}

impl LexiconClassifier {
    pub fn new(
        abnormal_terms: BTreeSet<String>,
        negation_markers: BTreeSet<String>,
        normal_terms: BTreeSet<String>,
    ) -> Result<Self> {
        let lists = [
            ("abnormal_terms", &abnormal_terms),
            ("negation_markers", &negation_markers),
            ("normal_terms", &normal_terms),
        ];
        for (name, set) in lists {
            for term in set {
                if term.trim().is_empty() {
                    return Err(Error::config(name, "contains an empty phrase"));
                }
                if *term != term.to_lowercase() {
                    return Err(Error::config(name, format!("`{term}` is not lowercase")));
                }
            }
        }
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            if let Some(shared) = lists[a].1.intersection(lists[b].1).next() {
                return Err(Error::config(
                    lists[b].0,
                    format!("`{shared}` also appears in {}", lists[a].0),
                ));
            }
        }
        Ok(Self {
            abnormal_terms,
            negation_markers,
            normal_terms,
        })
    }

    /// Parses a TOML document with `abnormal_terms`, `negation_markers` and `normal_terms` arrays.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: LexiconFile = toml::from_str(text)
            .map_err(|e| Error::config("lexicon", e.to_string()))?;
        Self::new(
            file.abnormal_terms.into_iter().collect(),
            file.negation_markers.into_iter().collect(),
            file.normal_terms.into_iter().collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            abnormal_terms: &'a BTreeSet<String>,
            negation_markers: &'a BTreeSet<String>,
            normal_terms: &'a BTreeSet<String>,
        }
        toml::to_string(&Out {
            abnormal_terms: &self.abnormal_terms,
            negation_markers: &self.negation_markers,
            normal_terms: &self.normal_terms,
        })
        .expect("string sets serialize")
    }

    pub fn abnormal_terms(&self) -> &BTreeSet<String> {
        &self.abnormal_terms
    }

    pub fn negation_markers(&self) -> &BTreeSet<String> {
        &self.negation_markers
    }

    pub fn normal_terms(&self) -> &BTreeSet<String> {
        &self.normal_terms
    }

    /// Labels one sentence.
    ///
    /// An abnormal term with no negation marker before it in the sentence wins.
    /// Otherwise a normal term or a negated abnormal term gives `Normal`, and a
    /// sentence with no hits is `Uncertain`.
    pub fn classify(&self, text: &str) -> Result<SentenceLabel> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::invalid("cannot classify an empty sentence"));
        }
        // Start index of the earliest negation marker; negation scopes forward.
        let first_negation = self
            .negation_markers
            .iter()
            .filter_map(|m| find_phrase(&tokens, m).first().copied())
            .min();

        let mut negated_hit = false;
        for term in &self.abnormal_terms {
            for start in find_phrase(&tokens, term) {
                match first_negation {
                    Some(neg) if neg < start => negated_hit = true,
                    _ => return Ok(SentenceLabel::Abnormal),
                }
            }
        }
        let normal_hit = self
            .normal_terms
            .iter()
            .any(|t| !find_phrase(&tokens, t).is_empty());
        if normal_hit || negated_hit {
            Ok(SentenceLabel::Normal)
        } else {
            Ok(SentenceLabel::Uncertain)
        }
    }
}

/// Lowercased alphanumeric runs; every other character is a boundary.
fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Token start positions where `phrase` occurs as a whole-token sequence.
fn find_phrase(tokens: &[String], phrase: &str) -> Vec<usize> {
    let needle = tokenize(phrase);
    if needle.is_empty() || needle.len() > tokens.len() {
        return Vec::new();
    }
    tokens
        .windows(needle.len())
        .enumerate()
        .filter(|(_, w)| *w == needle.as_slice())
        .map(|(i, _)| i)
        .collect()
}
