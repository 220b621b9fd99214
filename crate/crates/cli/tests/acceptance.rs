//! Acceptance suite. Each test prints one PASS/FAIL line and then asserts.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use offclip_core::eval::{
    ablation_over_seeds, auc, mean_rows, pointing_game, pointing_game_suite, AttentionMap,
    GroundTruthBox, GroundingCase, ScoredSample,
};
use offclip_core::losses::{
    abnormal_infonce, build_target_matrix, finite_difference_check, infonce_baseline,
    off_diagonal_loss, random_check_instances, total_loss, LossConfig, LossKind, PairPseudoLabel,
    SimilarityMatrix,
};
use offclip_core::report::{
    aggregate_report_label, apply_prompt_template, filter_report, LexiconClassifier, Report,
    ReportLabel, Sentence, SentenceLabel,
};
use offclip_core::trainer::{SyntheticConfig, TrainConfig};
use offclip_core::Matrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use PairPseudoLabel::{PseudoAbnormal as A, PseudoNormal as N};

/// Bypasses libtest's capture so the verdict lines always reach the log.
fn report(id: u32, name: &str, passed: bool, detail: &str) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "acceptance {id} [{verdict}] {name}: {detail}");
    let _ = out.flush();
}

fn sim(rows: &[Vec<f64>]) -> SimilarityMatrix {
    SimilarityMatrix::from_rows(rows).unwrap()
}

fn random_rows(rng: &mut ChaCha8Rng, b: usize, range: f64) -> Vec<Vec<f64>> {
    (0..b)
        .map(|_| (0..b).map(|_| rng.random_range(-range..range)).collect())
        .collect()
}

fn random_labels(rng: &mut ChaCha8Rng, b: usize) -> Vec<PairPseudoLabel> {
    (0..b).map(|_| if rng.random_bool(0.5) { N } else { A }).collect()
}

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let instances = random_check_instances(20_240_601, &[2, 4, 8, 16], 5, 4.0).unwrap();
    let cfg = LossConfig::default();
    let mut worst = 0.0f64;
    let mut checks = 0;
    for inst in &instances {
        for kind in LossKind::ALL {
            let r = finite_difference_check(kind, &inst.similarity, &inst.labels, &cfg, 1e-5, 1e-5).unwrap();
            worst = worst.max(r.max_rel_error);
            checks += 1;
        }
    }
    let elapsed = start.elapsed();
    let mixed = instances
        .iter()
        .filter(|i| i.labels.contains(&N) && i.labels.contains(&A))
        .count();
    let passed = instances.len() >= 20 && mixed > 0 && worst < 1e-5 && elapsed < Duration::from_secs(10);
    report(
        1,
        "gradient correctness",
        passed,
        &format!(
            "{} instances, {checks} checks, {mixed} mixed-label, max rel error {worst:.3e} (< 1e-5), {:.2}s (< 10s)",
            instances.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_2_loss_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = Vec::new();

    // (a) all-abnormal: the abnormal term is the baseline
    let mut a_dev = 0.0f64;
    for b in [2, 3, 5, 8, 16] {
        let s = sim(&random_rows(&mut rng, b, 5.0));
        let ab = abnormal_infonce(&s, &vec![A; b]).unwrap();
        let base = infonce_baseline(&s);
        a_dev = a_dev.max((ab.value - base.value).abs());
        a_dev = a_dev.max(ab.gradient.max_abs_diff(&base.gradient));
    }
    if a_dev > 1e-12 {
        failures.push(format!("(a) deviation {a_dev:e}"));
    }
    // (b) all-abnormal target is the identity
    for b in 1..=6 {
        if *build_target_matrix(&vec![A; b]).unwrap().values() != Matrix::identity(b) {
            failures.push(format!("(b) B={b}"));
        }
    }
    // (c) lambda 0 reduces the total to the off-diagonal term
    let mut c_dev = 0.0f64;
    for b in [2, 4, 7] {
        let s = sim(&random_rows(&mut rng, b, 5.0));
        let labels = random_labels(&mut rng, b);
        let t = total_loss(&s, &labels, &LossConfig::new(0.0).unwrap()).unwrap();
        let off = off_diagonal_loss(&s, &build_target_matrix(&labels).unwrap()).unwrap();
        c_dev = c_dev.max((t.value - off.value).abs()).max(t.gradient.max_abs_diff(&off.gradient));
    }
    if c_dev != 0.0 {
        failures.push(format!("(c) deviation {c_dev:e}"));
    }
    // (d) uniform S gives 2 ln B
    let mut d_dev = 0.0f64;
    for b in [1, 2, 3, 8, 16] {
        for c in [-3.0, 0.0, 7.5] {
            let v = infonce_baseline(&sim(&vec![vec![c; b]; b])).value;
            d_dev = d_dev.max((v - 2.0 * (b as f64).ln()).abs());
        }
    }
    if d_dev > 1e-10 {
        failures.push(format!("(d) deviation {d_dev:e}"));
    }
    // (e) S = 0 against an all-ones target gives ln 2
    let mut e_dev = 0.0f64;
    for b in [1, 2, 5] {
        let v = off_diagonal_loss(&sim(&vec![vec![0.0; b]; b]), &build_target_matrix(&vec![N; b]).unwrap())
            .unwrap()
            .value;
        e_dev = e_dev.max((v - 2f64.ln()).abs());
    }
    if e_dev > 1e-12 {
        failures.push(format!("(e) deviation {e_dev:e}"));
    }
    let passed = failures.is_empty();
    report(
        2,
        "loss identities",
        passed,
        &if passed {
            format!("(a) {a_dev:.1e} (b) exact (c) {c_dev:.1e} (d) {d_dev:.1e} (e) {e_dev:.1e}")
        } else {
            failures.join(", ")
        },
    );
    assert!(passed);
}

/// The printed symmetric double sum with its `-1 / (2 B^2)` factor.
fn literal_off_diagonal(s: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let b = s.len();
    let sigma = |x: f64| 1.0 / (1.0 + (-x).exp());
    let term = |i: usize, j: usize| y[i][j] * sigma(s[i][j]).ln() + (1.0 - y[i][j]) * (1.0 - sigma(s[i][j])).ln();
    let mut acc = 0.0;
    for i in 0..b {
        for j in 0..b {
            acc += term(i, j) + term(j, i);
        }
    }
    -acc / (2.0 * (b * b) as f64)
}

#[test]
fn criterion_3_off_diagonal_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let b = rng.random_range(1..=12);
        let rows = random_rows(&mut rng, b, 6.0);
        let labels = random_labels(&mut rng, b);
        let y = build_target_matrix(&labels).unwrap();
        let y_rows: Vec<Vec<f64>> = (0..b).map(|i| y.values().row(i).to_vec()).collect();
        let fast = off_diagonal_loss(&sim(&rows), &y).unwrap().value;
        worst = worst.max((fast - literal_off_diagonal(&rows, &y_rows)).abs());
    }
    let passed = worst <= 1e-12;
    report(
        3,
        "off-diagonal oracle equivalence",
        passed,
        &format!("100 instances, max |mean-BCE - double sum| {worst:.2e} (<= 1e-12)"),
    );
    assert!(passed);
}

fn pair_count_auc(samples: &[ScoredSample]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for p in samples.iter().filter(|s| s.truth) {
        for n in samples.iter().filter(|s| !s.truth) {
            pairs += 1.0;
            wins += if p.score > n.score {
                1.0
            } else if p.score == n.score {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

#[test]
fn criterion_4_auc_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut tied = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=200);
        let mut samples: Vec<ScoredSample> = (0..n)
            .map(|_| ScoredSample::new(rng.random_range(0.0..1.0), rng.random_bool(0.4)))
            .collect();
        samples[0].truth = true;
        samples[1].truth = false;
        // inject ties by copying scores around
        for _ in 0..n / 3 {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            samples[i].score = samples[j].score;
        }
        if rng.random_bool(0.3) {
            for s in &mut samples {
                s.score = (s.score * 4.0).round();
            }
        }
        samples.shuffle(&mut rng);
        tied += usize::from({
            let mut v: Vec<f64> = samples.iter().map(|s| s.score).collect();
            v.sort_by(f64::total_cmp);
            v.windows(2).any(|w| w[0] == w[1])
        });
        worst = worst.max((auc(&samples).unwrap() - pair_count_auc(&samples)).abs());
    }
    let hand: Vec<ScoredSample> = [(0.9, true), (0.6, false), (0.4, true), (0.1, false)]
        .into_iter()
        .map(|(s, t)| ScoredSample::new(s, t))
        .collect();
    let hand_auc = auc(&hand).unwrap();
    let passed = worst <= 1e-12 && hand_auc == 0.75;
    report(
        4,
        "AUC oracle",
        passed,
        &format!("100 fixtures ({tied} with ties), max deviation {worst:.2e}; hand case {hand_auc} (== 0.75)"),
    );
    assert!(passed);
}

fn labeled_report(id: &str, parts: &[(&str, SentenceLabel)]) -> Report {
    let sentences = parts
        .iter()
        .map(|(t, l)| Sentence::labeled(*t, *l).unwrap())
        .collect();
    let mut r = Report::new(id, sentences).unwrap();
    r.assign_report_label().unwrap();
    r
}

fn texts(r: &Report) -> Vec<&str> {
    r.sentences().iter().map(|s| s.text()).collect()
}

#[test]
fn criterion_5_pipeline_semantics() {
    use SentenceLabel::{Abnormal as Abn, Normal as Norm, Uncertain as Unc};
    let clf = LexiconClassifier::default();
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    check("classify negated", clf.classify("There is no pneumonia").unwrap() == Norm);
    check(
        "classify finding",
        clf.classify("There is pleural effusion at the left lung base").unwrap() == Abn,
    );
    check("classify no hits", clf.classify("Comparison with prior study.").unwrap() == Unc);

    check("aggregate [N,A]", aggregate_report_label(&[Some(Norm), Some(Abn)]).unwrap() == ReportLabel::PseudoAbnormal);
    check("aggregate [N,U]", aggregate_report_label(&[Some(Norm), Some(Unc)]).unwrap() == ReportLabel::PseudoNormal);
    check("aggregate [U]", aggregate_report_label(&[Some(Unc)]).unwrap() == ReportLabel::PseudoNormal);
    check("aggregate unlabeled", aggregate_report_label(&[Some(Abn), None]).is_err());

    let r = labeled_report("a", &[("no effusion", Norm), ("cardiomegaly present", Abn)]);
    check("filter abnormal", texts(&filter_report(&r).unwrap()) == ["cardiomegaly present"]);
    let r = labeled_report("n", &[("lungs clear", Norm), ("heart normal", Norm), ("old film", Unc)]);
    check("filter normal untouched", filter_report(&r).unwrap() == r);
    let r = labeled_report("o", &[("a1", Abn), ("u", Unc), ("a2", Abn), ("n", Norm)]);
    check("filter keeps order", texts(&filter_report(&r).unwrap()) == ["a1", "a2"]);
    let unlabeled = Report::new("x", vec![Sentence::new("effusion").unwrap()]).unwrap();
    check("filter unlabeled", filter_report(&unlabeled).is_err());

    check("template negated", apply_prompt_template("pneumonia", true).unwrap() == "There is no pneumonia");
    check(
        "template finding",
        apply_prompt_template("pleural effusion at the left lung base", false).unwrap()
            == "There is pleural effusion at the left lung base",
    );

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels = [Norm, Abn, Unc];
    let mut corpora_ok = 0;
    for c in 0..1000 {
        let n_reports = rng.random_range(1..8);
        let mut ok = true;
        for k in 0..n_reports {
            let n_sent = rng.random_range(1..7);
            let parts: Vec<(String, SentenceLabel)> = (0..n_sent)
                .map(|i| (format!("s{c}-{k}-{i}"), labels[rng.random_range(0..3)]))
                .collect();
            let borrowed: Vec<(&str, SentenceLabel)> = parts.iter().map(|(t, l)| (t.as_str(), *l)).collect();
            let r = labeled_report(&format!("r{k}"), &borrowed);
            let once = filter_report(&r).unwrap();
            let twice = filter_report(&once).unwrap();
            ok &= once == twice;
            ok &= !once.sentences().is_empty();
            ok &= once.report_label == r.report_label;
            let relabeled: Vec<_> = once.sentences().iter().map(|s| s.label).collect();
            ok &= aggregate_report_label(&relabeled).unwrap() == r.report_label.unwrap();
        }
        corpora_ok += usize::from(ok);
    }
    check("random corpora", corpora_ok == 1000);

    let passed = failures.is_empty();
    report(
        5,
        "pipeline semantics",
        passed,
        &if passed {
            format!("14 fixtures; idempotence and non-empty filtering held on {corpora_ok}/1000 random corpora")
        } else {
            format!("failed: {}", failures.join(", "))
        },
    );
    assert!(passed);
}

fn grid(rows: [[f64; 4]; 4]) -> AttentionMap {
    AttentionMap::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn bx(x0: usize, y0: usize, x1: usize, y1: usize) -> GroundTruthBox {
    GroundTruthBox::new(x0, y0, x1, y1).unwrap()
}

#[test]
fn criterion_6_pointing_game() {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    let mut peak = [[0.0; 4]; 4];
    peak[2][1] = 1.0;
    let peak = grid(peak);
    let uniform = grid([[0.5; 4]; 4]);

    check("unique max inside", pointing_game(&peak, &[bx(0, 2, 2, 4)], 0.1).unwrap());
    check("max outside, 1/16", !pointing_game(&peak, &[bx(2, 0, 4, 2)], 1.0 / 16.0).unwrap());
    // k = 8 on a uniform map takes rows 0 and 1
    check("tie-break left half", pointing_game(&uniform, &[bx(0, 0, 2, 4)], 0.5).unwrap());
    check("tie-break bottom half", !pointing_game(&uniform, &[bx(0, 2, 4, 4)], 0.5).unwrap());
    check("tie-break k=8 reaches row 1", pointing_game(&uniform, &[bx(3, 1, 4, 2)], 0.5).unwrap());
    check("tie-break k=7 stops short", !pointing_game(&uniform, &[bx(3, 1, 4, 2)], 7.0 / 16.0).unwrap());
    // fraction 0.2 gives k = 3: indices 0, 1, 2
    check("k=3 includes (2,0)", pointing_game(&uniform, &[bx(2, 0, 3, 1)], 0.2).unwrap());
    check("k=3 excludes (3,0)", !pointing_game(&uniform, &[bx(3, 0, 4, 1)], 0.2).unwrap());
    check("tiny fraction selects one", pointing_game(&uniform, &[bx(0, 0, 1, 1)], 1e-6).unwrap());
    check("any of several boxes", pointing_game(&peak, &[bx(3, 3, 4, 4), bx(1, 2, 2, 3)], 0.1).unwrap());
    check("bad fraction", pointing_game(&peak, &[bx(0, 0, 1, 1)], 0.0).is_err());
    check("no boxes", pointing_game(&peak, &[], 0.1).is_err());

    let case = |id: &str, hit: bool| GroundingCase {
        id: id.into(),
        disease: "nodule".into(),
        map: peak.clone(),
        boxes: vec![if hit { bx(1, 2, 2, 3) } else { bx(3, 3, 4, 4) }],
    };
    let suite = pointing_game_suite(&[case("a", true), case("b", true), case("c", false), case("d", true)], 0.1).unwrap();
    check("suite 3 of 4", suite.per_disease["nodule"].rate == 0.75 && suite.overall == 0.75);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let fractions: Vec<f64> = (1..=20).map(|i| i as f64 / 20.0).collect();
    let mut monotone = 0;
    for _ in 0..500 {
        let (h, w) = (rng.random_range(1..10), rng.random_range(1..10));
        let values: Vec<f64> = (0..h * w).map(|_| f64::from(rng.random_range(0..6))).collect();
        let map = AttentionMap::new(h, w, values).unwrap();
        let x0 = rng.random_range(0..w);
        let y0 = rng.random_range(0..h);
        let b = bx(x0, y0, rng.random_range(x0 + 1..=w), rng.random_range(y0 + 1..=h));
        let hits: Vec<bool> = fractions.iter().map(|&f| pointing_game(&map, &[b], f).unwrap()).collect();
        monotone += usize::from(hits.windows(2).all(|p| !p[0] || p[1]) && *hits.last().unwrap());
    }
    check("monotone", monotone == 500);

    let passed = failures.is_empty();
    report(
        6,
        "pointing-game exactness",
        passed,
        &if passed {
            format!("14 hand fixtures incl. row-major tie-break; monotone on {monotone}/500 random maps")
        } else {
            format!("failed: {}", failures.join(", "))
        },
    );
    assert!(passed);
}

#[test]
fn criterion_7_ablation_direction() {
    let start = Instant::now();
    let synthetic = SyntheticConfig::default();
    assert_eq!(synthetic.n_samples, 512);
    assert_eq!(synthetic.normal_sentence_contamination, 0.5);
    let rows = ablation_over_seeds(&synthetic, &TrainConfig::default(), &[7, 11, 13]).unwrap();
    let means = mean_rows(&rows);
    let (r1, r3, r6) = (&means[0], &means[2], &means[5]);
    assert!(!r1.variant.text_filtering && r6.variant.text_filtering);
    let a = r6.normal_auc - r1.normal_auc;
    let b = r1.imbalance - r6.imbalance;
    let c = r6.fn_over_total <= r3.fn_over_total;
    let elapsed = start.elapsed();
    let passed = a >= 0.10 && b >= 0.3 && c && elapsed < Duration::from_secs(300);
    report(
        7,
        "desk-scale ablation direction",
        passed,
        &format!(
            "(a) normal AUC {:.4} -> {:.4}, gain {a:.4} (>= 0.10); (b) imbalance {:.4} -> {:.4}, drop {b:.4} (>= 0.3); \
             (c) FN/total {:.4} (filter on) vs {:.4} (off); {:.1}s (< 300s)",
            r1.normal_auc,
            r6.normal_auc,
            r1.imbalance,
            r6.imbalance,
            r6.fn_over_total,
            r3.fn_over_total,
            elapsed.as_secs_f64()
        ),
    );
    assert!(passed);
}

fn offclip(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_offclip"))
        .current_dir(dir)
        .args(args)
        .arg("--quiet")
        .output()
        .expect("binary runs")
}

fn manifest_outputs(path: &Path) -> Vec<String> {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o["path"].as_str().unwrap().to_string())
        .collect()
}

#[test]
fn criterion_8_manifest_replay_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("grounding.jsonl"),
        concat!(
            r#"{"id":"1","disease":"nodule","attention":[[0,0,0],[0,5,0],[0,0,1]],"boxes":[[1,1,2,2]]}"#,
            "\n",
            r#"{"id":"2","disease":"mass","attention":[[3,0,0],[0,0,0],[0,0,1]],"boxes":[[2,2,3,3]]}"#,
            "\n"
        ),
    )
    .unwrap();
    let small = ["--set", "synthetic.n_samples=96", "--set", "synthetic.n_eval_samples=64"];
    let quick = ["--set", "train.epochs=2", "--set", "train.batch_size=16"];
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("gen-data", [&["gen-data", "--out-dir", "d"][..], &small].concat()),
        ("train", [&["train", "--data", "d", "--checkpoint-every", "1", "--out-dir", "t"][..], &quick].concat()),
        ("eval", vec!["eval", "--checkpoint", "t/model.ckpt", "--data", "d", "--out-dir", "e"]),
        ("eval", vec!["eval", "--scores", "t/scores.csv", "--out-dir", "s"]),
        ("filter-reports", vec!["filter-reports", "--in", "d/corpus.jsonl", "--out-dir", "f"]),
        ("pointing-game", vec!["pointing-game", "--grounding", "grounding.jsonl", "--top-fraction", "0.1,0.2", "--out-dir", "p"]),
        ("loss-check", vec!["loss-check", "--out-dir", "l"]),
        ("ablation", [&["ablation", "--seeds", "7", "--out-dir", "a"][..], &small, &quick].concat()),
    ];
    let mut failures = Vec::new();
    let mut compared = 0;
    for (name, args) in &runs {
        let out_dir = PathBuf::from(args[args.iter().position(|a| *a == "--out-dir").unwrap() + 1]);
        let run = offclip(dir, args);
        if !run.status.success() {
            failures.push(format!("{name} exited {:?}", run.status.code()));
            continue;
        }
        let manifest = dir.join(&out_dir).join(format!("{name}.manifest.json"));
        let replay_dir = dir.join(format!("replay-{}", out_dir.display()));
        let replay = offclip(dir, &["replay", manifest.to_str().unwrap(), "--out-dir", replay_dir.to_str().unwrap()]);
        if !replay.status.success() {
            failures.push(format!("replay of {name} exited {:?}", replay.status.code()));
            continue;
        }
        let outputs = manifest_outputs(&manifest);
        if outputs.is_empty() {
            failures.push(format!("{name} recorded no outputs"));
        }
        for rel in outputs {
            let a = std::fs::read(dir.join(&out_dir).join(&rel)).unwrap();
            let b = std::fs::read(replay_dir.join(&rel)).unwrap_or_default();
            if a != b {
                failures.push(format!("{name}: {rel} differs"));
            }
            compared += 1;
        }
    }
    let passed = failures.is_empty();
    report(
        8,
        "manifest replay determinism",
        passed,
        &if passed {
            format!("{} runs over 7 subcommands replayed; {compared} primary outputs byte-identical", runs.len())
        } else {
            failures.join("; ")
        },
    );
    assert!(passed);
}
