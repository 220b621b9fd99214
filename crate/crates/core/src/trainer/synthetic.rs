//! Synthetic paired image/report data with a single normal cluster and
//! several disease clusters.
//!
//! Each report has a latent instance vector shared by its image and all of its
//! sentences, so instance-level matching is learnable. Abnormal reports carry
//! one guaranteed abnormal sentence plus slots that are normal sentences with
//! a probability chosen so that a uniformly chosen sentence is normal with
//! probability `normal_sentence_contamination`.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::report::{
    apply_prompt_template, Corpus, LexiconClassifier, Report, ReportLabel, Sentence, SentenceLabel,
};

/// Finding names for disease clusters, cycled when there are more clusters.
pub const DISEASE_NAMES: &[&str] = &[
    "pleural effusion",
    "pneumonia",
    "cardiomegaly",
    "nodule",
    "atelectasis",
    "pneumothorax",
    "consolidation",
    "emphysema",
    "edema",
    "mass",
    "fibrosis",
    "pleural thickening",
];

/// Per-sentence jitter relative to `cluster_spread`.
const SENTENCE_JITTER: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    /// Held-out images used only for evaluation.
    pub n_eval_samples: usize,
    pub normal_fraction: f64,
    pub n_disease_clusters: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub d_embed: usize,
    pub sentences_per_report: usize,
    pub cluster_spread: f64,
    pub cluster_separation: f64,
    pub normal_sentence_contamination: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_samples: 512,
            n_eval_samples: 512,
            normal_fraction: 0.6,
            n_disease_clusters: 4,
            d_img: 32,
            d_txt: 32,
            d_embed: 16,
            sentences_per_report: 4,
            cluster_spread: 1.0,
            cluster_separation: 3.5,
            normal_sentence_contamination: 0.5,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::config("n_samples", "must be at least 2"));
        }
        if self.n_eval_samples == 0 {
            return Err(Error::config("n_eval_samples", "must be positive"));
        }
        for (name, v) in [
            ("d_img", self.d_img),
            ("d_txt", self.d_txt),
            ("d_embed", self.d_embed),
            ("n_disease_clusters", self.n_disease_clusters),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.sentences_per_report < 2 && self.normal_sentence_contamination > 0.0 {
            return Err(Error::config(
                "sentences_per_report",
                "must be at least 2 when contamination is positive",
            ));
        }
        if self.sentences_per_report == 0 {
            return Err(Error::config("sentences_per_report", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.normal_fraction) {
            return Err(Error::config("normal_fraction", "must lie in [0, 1]"));
        }
        let c = self.normal_sentence_contamination;
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::config("normal_sentence_contamination", "must lie in [0, 1]"));
        }
        let m = self.sentences_per_report as f64;
        if self.sentences_per_report > 1 && c > (m - 1.0) / m {
            return Err(Error::config(
                "normal_sentence_contamination",
                format!(
                    "at most {:.4} with {} sentences per report (one sentence must stay abnormal)",
                    (m - 1.0) / m,
                    self.sentences_per_report
                ),
            ));
        }
        for (name, v) in [
            ("cluster_spread", self.cluster_spread),
            ("cluster_separation", self.cluster_separation),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be finite and > 0"));
            }
        }
        Ok(())
    }

    /// Per-slot probability that a non-leading sentence of an abnormal report is normal.
    fn slot_contamination(&self) -> f64 {
        if self.sentences_per_report < 2 {
            return 0.0;
        }
        let m = self.sentences_per_report as f64;
        self.normal_sentence_contamination * m / (m - 1.0)
    }
}

/// Class index: `0` is normal, `k + 1` is disease cluster `k`.
pub type ClassId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub report: Report,
    pub image: Vec<f64>,
    /// One feature vector per report sentence, same order.
    pub sentence_features: Vec<Vec<f64>>,
}

impl TrainRecord {
    pub fn pseudo_label(&self) -> ReportLabel {
        self.report
            .report_label
            .expect("synthetic reports are labelled at generation")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub image: Vec<f64>,
    pub class: ClassId,
}

impl EvalRecord {
    pub fn is_abnormal(&self) -> bool {
        self.class != 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub features: Vec<f64>,
}

/// Zero-shot prompts: the normal prompt and one prompt per disease cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    pub normal: Prompt,
    pub diseases: Vec<Prompt>,
}

/// True classes of the training reports; every read is counted.
#[derive(Debug, Default)]
pub struct GroundTruth {
    classes: Vec<ClassId>,
    reads: AtomicUsize,
}

impl GroundTruth {
    fn new(classes: Vec<ClassId>) -> Self {
        Self {
            classes,
            reads: AtomicUsize::new(0),
        }
    }

    pub fn classes(&self) -> &[ClassId] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.classes
    }

    pub fn read_count(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }
}

impl Clone for GroundTruth {
    fn clone(&self) -> Self {
        Self::new(self.classes.clone())
    }
}

impl PartialEq for GroundTruth {
    fn eq(&self, other: &Self) -> bool {
        self.classes == other.classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub train: Vec<TrainRecord>,
    pub eval: Vec<EvalRecord>,
    pub prompts: PromptBank,
    pub ground_truth: GroundTruth,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn add_scaled(base: &[f64], v: &[f64], s: f64) -> Vec<f64> {
    base.iter().zip(v).map(|(a, b)| a + s * b).collect()
}

pub fn disease_name(k: usize) -> &'static str {
    DISEASE_NAMES[k % DISEASE_NAMES.len()]
}

struct Generator<'a> {
    cfg: &'a SyntheticConfig,
    img_centers: Vec<Vec<f64>>,
    txt_centers: Vec<Vec<f64>>,
    coupling: Matrix,
}

impl Generator<'_> {
    fn image(&self, class: ClassId, instance: &[f64]) -> Vec<f64> {
        add_scaled(&self.img_centers[class], instance, self.cfg.cluster_spread)
    }

    /// `coupled` controls whether the sentence carries the report's
    /// instance signal. Boilerplate negatives inside abnormal reports do not.
    fn sentence(
        &self,
        rng: &mut ChaCha8Rng,
        class: ClassId,
        instance: &[f64],
        coupled: bool,
    ) -> Vec<f64> {
        let shared = if coupled {
            self.coupling.mul_vec(instance).expect("coupling is d_txt x d_img")
        } else {
            vec![0.0; self.cfg.d_txt]
        };
        let jitter = gaussian(rng, self.cfg.d_txt, SENTENCE_JITTER);
        let noise: Vec<f64> = shared.iter().zip(&jitter).map(|(a, b)| a + b).collect();
        add_scaled(&self.txt_centers[class], &noise, self.cfg.cluster_spread)
    }
}

/// Builds train and eval splits, prompts and ground truth from one seed.
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_classes = cfg.n_disease_clusters + 1;
    let img_scale = cfg.cluster_separation / (cfg.d_img as f64).sqrt();
    let txt_scale = cfg.cluster_separation / (cfg.d_txt as f64).sqrt();
    let img_centers: Vec<_> = (0..n_classes).map(|_| gaussian(&mut rng, cfg.d_img, img_scale)).collect();
    let txt_centers: Vec<_> = (0..n_classes).map(|_| gaussian(&mut rng, cfg.d_txt, txt_scale)).collect();
    let coupling = Matrix::from_vec(
        cfg.d_txt,
        cfg.d_img,
        gaussian(&mut rng, cfg.d_txt * cfg.d_img, 1.0 / (cfg.d_img as f64).sqrt()),
    )?;
    let gen = Generator {
        cfg,
        img_centers,
        txt_centers,
        coupling,
    };
    let lexicon = LexiconClassifier::default();

    let train_classes = draw_classes(&mut rng, cfg.n_samples, cfg);
    let q = cfg.slot_contamination();
    let mut train = Vec::with_capacity(cfg.n_samples);
    for (i, &class) in train_classes.iter().enumerate() {
        let instance = gaussian(&mut rng, cfg.d_img, 1.0);
        let image = gen.image(class, &instance);
        let mut sentence_classes = Vec::with_capacity(cfg.sentences_per_report);
        for slot in 0..cfg.sentences_per_report {
            let normal = class == 0 || (slot > 0 && rng.random_bool(q));
            sentence_classes.push(if normal { 0 } else { class });
        }
        sentence_classes.shuffle(&mut rng);

        let mut sentences = Vec::with_capacity(sentence_classes.len());
        let mut features = Vec::with_capacity(sentence_classes.len());
        for &sc in &sentence_classes {
            let text = if sc == 0 {
                let other = rng.random_range(0..cfg.n_disease_clusters);
                apply_prompt_template(disease_name(other), true)?
            } else {
                apply_prompt_template(disease_name(sc - 1), false)?
            };
            let mut s = Sentence::new(text)?;
            s.label = Some(lexicon.classify(s.text())?);
            debug_assert_eq!(
                s.label,
                Some(if sc == 0 { SentenceLabel::Normal } else { SentenceLabel::Abnormal })
            );
            sentences.push(s);
            let coupled = sc != 0 || class == 0;
            features.push(gen.sentence(&mut rng, sc, &instance, coupled));
        }
        let mut report = Report::new(format!("train-{i:05}"), sentences)?;
        report.assign_report_label()?;
        train.push(TrainRecord {
            report,
            image,
            sentence_features: features,
        });
    }

    let eval_classes = draw_classes(&mut rng, cfg.n_eval_samples, cfg);
    let eval = eval_classes
        .iter()
        .enumerate()
        .map(|(i, &class)| {
            let instance = gaussian(&mut rng, cfg.d_img, 1.0);
            EvalRecord {
                id: format!("eval-{i:05}"),
                image: gen.image(class, &instance),
                class,
            }
        })
        .collect();

    let prompts = PromptBank {
        normal: Prompt {
            text: apply_prompt_template("finding", true)?,
            features: gen.txt_centers[0].clone(),
        },
        diseases: (0..cfg.n_disease_clusters)
            .map(|k| {
                Ok(Prompt {
                    text: apply_prompt_template(disease_name(k), false)?,
                    features: gen.txt_centers[k + 1].clone(),
                })
            })
            .collect::<Result<_>>()?,
    };

    Ok(SyntheticDataset {
        config: cfg.clone(),
        train,
        eval,
        prompts,
        ground_truth: GroundTruth::new(train_classes),
    })
}

/// Exactly `round(n * normal_fraction)` normals in shuffled positions, the rest
/// spread uniformly over the disease clusters.
fn draw_classes(rng: &mut ChaCha8Rng, n: usize, cfg: &SyntheticConfig) -> Vec<ClassId> {
    let n_normal = (n as f64 * cfg.normal_fraction).round() as usize;
    let mut classes: Vec<ClassId> = (0..n)
        .map(|i| {
            if i < n_normal {
                0
            } else {
                1 + rng.random_range(0..cfg.n_disease_clusters)
            }
        })
        .collect();
    classes.shuffle(rng);
    classes
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFeatures {
    id: String,
    image: Vec<f64>,
    sentences: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureFile {
    config: SyntheticConfig,
    train: Vec<TrainFeatures>,
    eval: Vec<EvalRecord>,
    prompts: PromptBank,
    ground_truth: Vec<ClassId>,
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const FEATURES_FILE: &str = "features.json";

impl SyntheticDataset {
    pub fn corpus(&self) -> Corpus {
        Corpus::new(self.train.iter().map(|r| r.report.clone()).collect())
            .expect("generated ids are unique")
    }

    /// Writes `corpus.jsonl` and `features.json` into `dir`; returns the file paths.
    pub fn save(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let corpus_path = dir.join(CORPUS_FILE);
        self.corpus().write(&corpus_path)?;
        let file = FeatureFile {
            config: self.config.clone(),
            train: self
                .train
                .iter()
                .map(|r| TrainFeatures {
                    id: r.report.id().to_string(),
                    image: r.image.clone(),
                    sentences: r.sentence_features.clone(),
                })
                .collect(),
            eval: self.eval.clone(),
            prompts: self.prompts.clone(),
            ground_truth: self.ground_truth.classes.clone(),
        };
        let features_path = dir.join(FEATURES_FILE);
        let text = serde_json::to_string(&file)?;
        std::fs::write(&features_path, text).map_err(|e| Error::io(&features_path, e))?;
        Ok(vec![corpus_path, features_path])
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut corpus = Corpus::read(&dir.join(CORPUS_FILE))?;
        let features_path = dir.join(FEATURES_FILE);
        let text = std::fs::read_to_string(&features_path).map_err(|e| Error::io(&features_path, e))?;
        let file: FeatureFile = serde_json::from_str(&text)?;
        file.config.validate()?;
        if file.train.len() != corpus.len() || file.ground_truth.len() != corpus.len() {
            return Err(Error::invalid(format!(
                "{} corpus reports, {} feature records, {} ground-truth entries",
                corpus.len(),
                file.train.len(),
                file.ground_truth.len()
            )));
        }
        corpus.classify_unlabeled(&LexiconClassifier::default())?;
        corpus.assign_report_labels()?;
        let train = corpus
            .into_reports()
            .into_iter()
            .zip(file.train)
            .map(|(report, f)| {
                if report.id() != f.id || report.sentences().len() != f.sentences.len() {
                    return Err(Error::invalid(format!(
                        "feature record `{}` does not match corpus report `{}`",
                        f.id,
                        report.id()
                    )));
                }
                Ok(TrainRecord {
                    report,
                    image: f.image,
                    sentence_features: f.sentences,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: file.config,
            train,
            eval: file.eval,
            prompts: file.prompts,
            ground_truth: GroundTruth::new(file.ground_truth),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_contamination_gives_pure_abnormal_reports() {
        let cfg = SyntheticConfig {
            n_samples: 200,
            normal_sentence_contamination: 0.0,
            ..SyntheticConfig::default()
        };
        let d = generate_synthetic_dataset(&cfg).unwrap();
        for r in d.train.iter().filter(|r| r.pseudo_label() == ReportLabel::PseudoAbnormal) {
            assert!(r
                .report
                .sentences()
                .iter()
                .all(|s| s.label == Some(SentenceLabel::Abnormal)));
        }
    }

    #[test]
    fn all_normal_data_is_pseudo_normal() {
        let cfg = SyntheticConfig {
            n_samples: 100,
            normal_fraction: 1.0,
            ..SyntheticConfig::default()
        };
        let d = generate_synthetic_dataset(&cfg).unwrap();
        assert!(d.train.iter().all(|r| r.pseudo_label() == ReportLabel::PseudoNormal));
    }

    #[test]
    fn default_config_frequencies() {
        let d = generate_synthetic_dataset(&SyntheticConfig::default()).unwrap();
        assert_eq!(d.train.len(), 512);
        let normals = d
            .train
            .iter()
            .filter(|r| r.pseudo_label() == ReportLabel::PseudoNormal)
            .count();
        assert!((normals as f64 / 512.0 - 0.6).abs() <= 0.05);

        let (mut normal_sent, mut total_sent) = (0usize, 0usize);
        for r in d.train.iter().filter(|r| r.pseudo_label() == ReportLabel::PseudoAbnormal) {
            for s in r.report.sentences() {
                total_sent += 1;
                normal_sent += (s.label == Some(SentenceLabel::Normal)) as usize;
            }
        }
        let freq = normal_sent as f64 / total_sent as f64;
        assert!((freq - 0.5).abs() <= 0.05, "contamination frequency {freq}");
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SyntheticConfig {
            n_samples: 64,
            n_eval_samples: 16,
            ..SyntheticConfig::default()
        };
        assert_eq!(
            generate_synthetic_dataset(&cfg).unwrap(),
            generate_synthetic_dataset(&cfg).unwrap()
        );
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let bad = |f: fn(&mut SyntheticConfig)| {
            let mut c = SyntheticConfig::default();
            f(&mut c);
            generate_synthetic_dataset(&c).unwrap_err().to_string()
        };
        assert!(bad(|c| c.n_samples = 1).contains("n_samples"));
        assert!(bad(|c| c.d_img = 0).contains("d_img"));
        assert!(bad(|c| c.normal_fraction = 1.5).contains("normal_fraction"));
        assert!(bad(|c| c.normal_sentence_contamination = 0.9).contains("contamination"));
        assert!(bad(|c| c.cluster_spread = 0.0).contains("cluster_spread"));
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = SyntheticConfig {
            n_samples: 20,
            n_eval_samples: 8,
            ..SyntheticConfig::default()
        };
        let d = generate_synthetic_dataset(&cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("offclip-synth-{}", std::process::id()));
        d.save(&dir).unwrap();
        let back = SyntheticDataset::load(&dir).unwrap();
        std::fs::remove_dir_all(&dir).ok();
        assert_eq!(back, d);
    }
}
