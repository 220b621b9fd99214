use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::Parser;
use offclip_core::eval::{
    ablation_over_seeds, mean_rows, pointing_game_suite, read_grounding_file, read_scores_csv,
    rows_to_csv, score_eval_split, scores_to_csv, summarize, ScoreRow,
};
use offclip_core::losses::{finite_difference_check, random_check_instances, LossConfig, LossKind};
use offclip_core::report::{
    import_sentence_labels, read_predictions, Corpus, LexiconClassifier, ReportLabel,
};
use offclip_core::trainer::checkpoint::{decode_checkpoint, encode_checkpoint};
use offclip_core::trainer::{
    generate_synthetic_dataset, train_with_observer, write_checkpoint, EncoderParams, EpochStats,
    LossMode, SyntheticDataset, TrainObserver,
};
use serde_json::json;

use crate::config::{self, RunConfig};
use crate::manifest::{self, describe_output, write_atomic, RunManifest};
use crate::{
    AblationArgs, Cli, Command, ConfigArgs, EvalArgs, FilterArgs, GenDataArgs, GlobalArgs,
    LossCheckArgs, PointingArgs, ReplayArgs, TrainArgs,
};

const DEFAULT_ABLATION_SEEDS: [u64; 3] = [7, 11, 13];
const DEFAULT_LOSS_CHECK_SEED: u64 = 7;

pub enum Failure {
    /// Exit code 2: bad flags, config or inputs.
    Usage(anyhow::Error),
    /// Exit code 1: a verification or run-time check failed.
    Check(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<offclip_core::Error>() {
            Some(offclip_core::Error::Diverged { .. }) => Failure::Check(e),
            _ => Failure::Usage(e),
        }
    }
}

impl From<offclip_core::Error> for Failure {
    fn from(e: offclip_core::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

pub struct Ctx {
    out_dir: Option<PathBuf>,
    quiet: bool,
    seed: Option<u64>,
    argv: Vec<String>,
    /// Recorded configuration used instead of `--config`/`--set` during replay.
    config_override: Option<serde_json::Value>,
}

impl Ctx {
    pub fn new(global: &GlobalArgs, argv: Vec<String>) -> Self {
        Self {
            out_dir: global.out_dir.clone(),
            quiet: global.quiet,
            seed: global.seed,
            argv,
            config_override: None,
        }
    }

    fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn run_config(&self, args: &ConfigArgs) -> anyhow::Result<RunConfig> {
        match &self.config_override {
            Some(v) => {
                let cfg: RunConfig = serde_json::from_value(v.clone()).context("recorded config is malformed")?;
                cfg.validate()?;
                Ok(cfg)
            }
            None => config::resolve(args.config.as_deref(), &args.set, self.seed),
        }
    }
}

/// What a command produced; turned into a manifest by [`execute`].
#[derive(Default)]
struct Outcome {
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    timings_ms: BTreeMap<String, f64>,
    check_failure: Option<String>,
}

impl Outcome {
    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings_ms
            .insert(phase.to_string(), start.elapsed().as_secs_f64() * 1e3);
        out
    }

    fn write(&mut self, path: PathBuf, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
        write_atomic(&path, bytes.as_ref())?;
        self.outputs.push(path);
        Ok(())
    }
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::GenData(_) => "gen-data",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::FilterReports(_) => "filter-reports",
        Command::PointingGame(_) => "pointing-game",
        Command::LossCheck(_) => "loss-check",
        Command::Ablation(_) => "ablation",
        Command::Replay(_) => "replay",
    }
}

pub fn execute(ctx: &Ctx, cmd: &Command) -> Result<(), Failure> {
    if let Command::Replay(args) = cmd {
        return replay(ctx, args);
    }
    run_and_record(ctx, cmd).map(|_| ())
}

fn run_and_record(ctx: &Ctx, cmd: &Command) -> Result<RunManifest, Failure> {
    let start = Instant::now();
    let out_dir = ctx.out_dir();
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("cannot create output directory {}", out_dir.display()))?;
    let mut outcome = match cmd {
        Command::GenData(a) => gen_data(ctx, a)?,
        Command::Train(a) => train(ctx, a)?,
        Command::Eval(a) => eval(ctx, a)?,
        Command::FilterReports(a) => filter_reports(ctx, a)?,
        Command::PointingGame(a) => pointing(ctx, a)?,
        Command::LossCheck(a) => loss_check(ctx, a)?,
        Command::Ablation(a) => ablation(ctx, a)?,
        Command::Replay(_) => unreachable!("replay is dispatched separately"),
    };
    outcome
        .timings_ms
        .insert("total".into(), start.elapsed().as_secs_f64() * 1e3);

    let manifest = RunManifest {
        command: command_name(cmd).to_string(),
        argv: ctx.argv.clone(),
        cwd: std::env::current_dir().context("cannot read working directory")?,
        versions: manifest::versions(),
        platform: manifest::platform(),
        config: outcome.config,
        seeds: outcome.seeds,
        inputs: outcome.inputs.iter().map(|p| absolute(p)).collect(),
        outputs: outcome
            .outputs
            .iter()
            .map(|p| describe_output(&out_dir, p))
            .collect::<anyhow::Result<_>>()?,
        timings_ms: outcome.timings_ms,
    };
    let path = manifest.write(&out_dir)?;
    ctx.say(format!("manifest: {}", path.display()));
    if let Some(msg) = outcome.check_failure {
        return Err(Failure::Check(anyhow!(msg)));
    }
    Ok(manifest)
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn gen_data(ctx: &Ctx, args: &GenDataArgs) -> Result<Outcome, Failure> {
    let cfg = ctx.run_config(&args.config)?;
    let mut outcome = Outcome {
        config: serde_json::to_value(&cfg).expect("config serializes"),
        seeds: vec![cfg.synthetic.seed],
        ..Outcome::default()
    };
    if let Some(p) = &args.config.config {
        outcome.inputs.push(p.clone());
    }
    let data = outcome.time("generate", || generate_synthetic_dataset(&cfg.synthetic))?;
    let out_dir = ctx.out_dir();
    let written = data.save(&out_dir)?;
    outcome.outputs.extend(written);
    ctx.say(format!(
        "generated {} training reports ({} pseudo-abnormal) and {} evaluation images in {}",
        data.train.len(),
        data.train.iter().filter(|r| r.pseudo_label() == ReportLabel::PseudoAbnormal).count(),
        data.eval.len(),
        out_dir.display()
    ));
    Ok(outcome)
}

fn load_or_generate(
    ctx: &Ctx,
    cfg: &mut RunConfig,
    data_dir: Option<&Path>,
    outcome: &mut Outcome,
) -> anyhow::Result<SyntheticDataset> {
    match data_dir {
        Some(dir) => {
            let data = outcome.time("load_data", || SyntheticDataset::load(dir))?;
            ctx.say(format!("loaded {} training reports from {}", data.train.len(), dir.display()));
            cfg.synthetic = data.config.clone();
            outcome.inputs.push(dir.to_path_buf());
            Ok(data)
        }
        None => Ok(outcome.time("generate", || generate_synthetic_dataset(&cfg.synthetic))?),
    }
}

struct Progress<'a> {
    ctx: &'a Ctx,
    every: Option<usize>,
    dir: PathBuf,
    seed: u64,
    mode: LossMode,
    written: Vec<PathBuf>,
}

impl TrainObserver for Progress<'_> {
    fn on_epoch_end(&mut self, stats: &EpochStats, params: &EncoderParams) -> offclip_core::Result<()> {
        let epoch = stats.epoch + 1;
        self.ctx.say(format!("epoch {epoch:>4}  loss {:.6}", stats.total_loss));
        if let Some(k) = self.every {
            if epoch % k == 0 {
                std::fs::create_dir_all(&self.dir).map_err(|source| offclip_core::Error::Io {
                    path: self.dir.clone(),
                    source,
                })?;
                let path = self.dir.join(format!("epoch-{epoch:04}.ckpt"));
                write_checkpoint(&path, params, self.seed, self.mode)?;
                self.written.push(path);
            }
        }
        Ok(())
    }
}

fn evaluate_and_write(
    ctx: &Ctx,
    rows: &[ScoreRow],
    outcome: &mut Outcome,
    write_scores: bool,
) -> anyhow::Result<()> {
    let out_dir = ctx.out_dir();
    let summary = summarize(rows)?;
    if write_scores {
        outcome.write(out_dir.join("scores.csv"), scores_to_csv(rows))?;
    }
    outcome.write(out_dir.join("eval_summary.csv"), summary.to_csv())?;
    let c = &summary.confusion;
    ctx.say(format!(
        "normal AUC {:.4}  total AUC {:.4}  FN/total {:.4}  FP/total {:.4}  imbalance {:.4}",
        summary.normal_auc, summary.total_auc, c.fn_over_total, c.fp_over_total, c.imbalance
    ));
    Ok(())
}

fn train(ctx: &Ctx, args: &TrainArgs) -> Result<Outcome, Failure> {
    let mut cfg = ctx.run_config(&args.config)?;
    if args.checkpoint_every == Some(0) {
        return Err(Failure::Usage(anyhow!("--checkpoint-every must be at least 1")));
    }
    let mut outcome = Outcome::default();
    if let Some(p) = &args.config.config {
        outcome.inputs.push(p.clone());
    }
    let data = load_or_generate(ctx, &mut cfg, args.data.as_deref(), &mut outcome)?;
    outcome.config = serde_json::to_value(&cfg).expect("config serializes");
    outcome.seeds = vec![cfg.synthetic.seed, cfg.train.seed];

    let out_dir = ctx.out_dir();
    let mut progress = Progress {
        ctx,
        every: args.checkpoint_every,
        dir: out_dir.join("checkpoints"),
        seed: cfg.train.seed,
        mode: cfg.train.loss_mode,
        written: Vec::new(),
    };
    let (params, history) = outcome.time("train", || train_with_observer(&data, &cfg.train, &mut progress))?;
    outcome.outputs.append(&mut progress.written);

    outcome.write(
        out_dir.join("model.ckpt"),
        encode_checkpoint(&params, cfg.train.seed, cfg.train.loss_mode),
    )?;
    outcome.write(out_dir.join("history.csv"), history.to_csv())?;
    outcome.write(out_dir.join("config.toml"), cfg.to_toml())?;
    let rows = outcome.time("score", || score_eval_split(&params, &data.eval, &data.prompts))?;
    evaluate_and_write(ctx, &rows, &mut outcome, true)?;
    Ok(outcome)
}

fn eval(ctx: &Ctx, args: &EvalArgs) -> Result<Outcome, Failure> {
    let mut outcome = Outcome::default();
    if let Some(scores) = &args.scores {
        let rows = read_scores_csv(scores)?;
        outcome.inputs.push(scores.clone());
        outcome.config = json!({ "scores": scores });
        evaluate_and_write(ctx, &rows, &mut outcome, false)?;
        return Ok(outcome);
    }
    let ckpt = args.checkpoint.as_ref().expect("clap requires a source");
    let bytes = std::fs::read(ckpt).with_context(|| format!("cannot read checkpoint {}", ckpt.display()))?;
    let (header, params) = decode_checkpoint(&bytes)
        .with_context(|| format!("invalid checkpoint {}", ckpt.display()))?;
    outcome.inputs.push(ckpt.clone());
    let mut cfg = ctx.run_config(&args.config)?;
    if let Some(p) = &args.config.config {
        outcome.inputs.push(p.clone());
    }
    let data = load_or_generate(ctx, &mut cfg, args.data.as_deref(), &mut outcome)?;
    if (header.d_img, header.d_txt) != (data.config.d_img, data.config.d_txt) {
        return Err(Failure::Usage(anyhow!(
            "checkpoint expects d_img={} d_txt={}, data has d_img={} d_txt={}",
            header.d_img,
            header.d_txt,
            data.config.d_img,
            data.config.d_txt
        )));
    }
    outcome.config = serde_json::to_value(&cfg).expect("config serializes");
    outcome.seeds = vec![cfg.synthetic.seed, header.seed];
    let rows = outcome.time("score", || score_eval_split(&params, &data.eval, &data.prompts))?;
    evaluate_and_write(ctx, &rows, &mut outcome, true)?;
    Ok(outcome)
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (std::fs::canonicalize(a), std::fs::canonicalize(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn filter_reports(ctx: &Ctx, args: &FilterArgs) -> Result<Outcome, Failure> {
    let out_dir = ctx.out_dir();
    let out = args.out.clone().unwrap_or_else(|| out_dir.join("filtered.jsonl"));
    let stats_out = args.stats_out.clone().unwrap_or_else(|| out_dir.join("filter_stats.json"));
    for inp in [Some(&args.input), args.predictions.as_ref(), args.lexicon.as_ref()].into_iter().flatten() {
        if same_file(inp, &out) || same_file(inp, &stats_out) {
            return Err(Failure::Usage(anyhow!("refusing to overwrite input {}", inp.display())));
        }
    }
    let mut outcome = Outcome {
        config: json!({
            "in": args.input,
            "out": out,
            "lexicon": args.lexicon,
            "predictions": args.predictions,
            "stats_out": stats_out,
        }),
        ..Outcome::default()
    };
    outcome.inputs.push(args.input.clone());

    let mut corpus = Corpus::read(&args.input)?;
    if let Some(p) = &args.predictions {
        let preds = read_predictions(p)?;
        import_sentence_labels(&mut corpus, &preds)?;
        outcome.inputs.push(p.clone());
        ctx.say(format!("imported {} sentence labels", preds.len()));
    }
    let clf = match &args.lexicon {
        Some(p) => {
            outcome.inputs.push(p.clone());
            LexiconClassifier::load(p)?
        }
        None => LexiconClassifier::default(),
    };
    corpus.classify_unlabeled(&clf)?;
    corpus.assign_report_labels()?;
    let (filtered, stats) = corpus.filter()?;

    outcome.write(out, filtered.to_jsonl_string())?;
    let mut text = serde_json::to_string_pretty(&stats).expect("stats serialize");
    text.push('\n');
    outcome.write(stats_out, text)?;
    ctx.say(format!(
        "{} reports ({} pseudo-normal, {} pseudo-abnormal); removed {} of {} sentences ({} normal, {} uncertain)",
        stats.reports,
        stats.reports_pseudo_normal,
        stats.reports_pseudo_abnormal,
        stats.sentences_removed,
        stats.sentences_in,
        stats.removed_normal,
        stats.removed_uncertain
    ));
    Ok(outcome)
}

fn pointing(ctx: &Ctx, args: &PointingArgs) -> Result<Outcome, Failure> {
    let cases = read_grounding_file(&args.grounding)?;
    let mut outcome = Outcome {
        config: json!({ "grounding": args.grounding, "top_fraction": args.top_fraction }),
        inputs: vec![args.grounding.clone()],
        ..Outcome::default()
    };
    let mut csv = String::from("top_fraction,disease,cases,hits,rate\n");
    for &f in &args.top_fraction {
        let result = pointing_game_suite(&cases, f)?;
        for line in result.to_csv().lines().skip(1) {
            csv.push_str(&format!("{f:?},{line}\n"));
        }
        ctx.say(format!(
            "top {:.0}%: overall {:.4} over {} cases, {} diseases",
            f * 100.0,
            result.overall,
            cases.len(),
            result.per_disease.len()
        ));
    }
    outcome.write(ctx.out_dir().join("pointing_game.csv"), csv)?;
    Ok(outcome)
}

fn loss_check(ctx: &Ctx, args: &LossCheckArgs) -> Result<Outcome, Failure> {
    let seed = ctx.seed.unwrap_or(DEFAULT_LOSS_CHECK_SEED);
    let loss_cfg = LossConfig::new(args.lambda_ab)?;
    let instances = random_check_instances(seed, &args.batch_sizes, args.per_size, args.scale)?;
    if instances.is_empty() {
        return Err(Failure::Usage(anyhow!("no instances requested")));
    }
    let mut outcome = Outcome {
        config: json!({
            "batch_sizes": args.batch_sizes,
            "per_size": args.per_size,
            "scale": args.scale,
            "step": args.step,
            "tolerance": args.tolerance,
            "lambda_ab": args.lambda_ab,
        }),
        seeds: vec![seed],
        ..Outcome::default()
    };
    let mut csv = String::from("loss,instance,batch_size,pattern,max_rel_error,worst_row,worst_col,passed\n");
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut failures = 0;
    let start = Instant::now();
    for kind in LossKind::ALL {
        for (i, inst) in instances.iter().enumerate() {
            let r = finite_difference_check(
                kind,
                &inst.similarity,
                &inst.labels,
                &loss_cfg,
                args.step,
                args.tolerance,
            )?;
            csv.push_str(&format!(
                "{},{i},{},{},{:e},{},{},{}\n",
                kind.name(),
                r.batch_size,
                inst.pattern.name(),
                r.max_rel_error,
                r.worst_entry.0,
                r.worst_entry.1,
                r.passed
            ));
            let w = worst.entry(kind.name()).or_insert(0.0);
            *w = w.max(r.max_rel_error);
            failures += usize::from(!r.passed);
        }
    }
    outcome
        .timings_ms
        .insert("check".into(), start.elapsed().as_secs_f64() * 1e3);
    for (name, w) in &worst {
        ctx.say(format!("{name:<18} max relative error {w:.3e}"));
    }
    outcome.write(ctx.out_dir().join("loss_check.csv"), csv)?;
    if failures > 0 {
        outcome.check_failure = Some(format!(
            "{failures} gradient checks exceeded tolerance {:e}",
            args.tolerance
        ));
    }
    Ok(outcome)
}

fn ablation(ctx: &Ctx, args: &AblationArgs) -> Result<Outcome, Failure> {
    let cfg = ctx.run_config(&args.config)?;
    let seeds = match (&args.seeds, ctx.seed) {
        (Some(s), _) if !s.is_empty() => s.clone(),
        (Some(_), _) => return Err(Failure::Usage(anyhow!("--seeds is empty"))),
        (None, Some(s)) => vec![s],
        (None, None) => DEFAULT_ABLATION_SEEDS.to_vec(),
    };
    let mut outcome = Outcome {
        config: serde_json::to_value(&cfg).expect("config serializes"),
        seeds: seeds.clone(),
        ..Outcome::default()
    };
    if let Some(p) = &args.config.config {
        outcome.inputs.push(p.clone());
    }
    let rows = outcome.time("grid", || ablation_over_seeds(&cfg.synthetic, &cfg.train, &seeds))?;
    let means = mean_rows(&rows);
    let out_dir = ctx.out_dir();
    outcome.write(out_dir.join("ablation.csv"), rows_to_csv(&means))?;
    outcome.write(out_dir.join("ablation_per_seed.csv"), rows_to_csv(&rows))?;
    ctx.say("row  variant              normal_auc  total_auc  fn/total  fp/total  imbalance");
    for r in &means {
        ctx.say(format!(
            "{:>3}  {:<19}  {:>10.4}  {:>9.4}  {:>8.4}  {:>8.4}  {:>9.4}",
            r.row,
            r.variant.label(),
            r.normal_auc,
            r.total_auc,
            r.fn_over_total,
            r.fp_over_total,
            r.imbalance
        ));
    }
    Ok(outcome)
}

fn replay(ctx: &Ctx, args: &ReplayArgs) -> Result<(), Failure> {
    let recorded = RunManifest::read(&args.manifest)?;
    let out_dir = match &ctx.out_dir {
        Some(d) => d.clone(),
        None => args
            .manifest
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("replay-{}", recorded.command)),
    };
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("cannot create output directory {}", out_dir.display()))?;
    let out_dir = absolute(&out_dir);

    let mut argv = vec!["offclip".to_string()];
    argv.extend(recorded.argv.iter().cloned());
    let cli = Cli::try_parse_from(&argv).context("recorded arguments no longer parse")?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(Failure::Usage(anyhow!("cannot replay a replay")));
    }
    std::env::set_current_dir(&recorded.cwd)
        .with_context(|| format!("cannot enter recorded directory {}", recorded.cwd.display()))?;
    let inner = Ctx {
        out_dir: Some(out_dir.clone()),
        quiet: ctx.quiet || cli.global.quiet,
        seed: cli.global.seed,
        argv: recorded.argv.clone(),
        config_override: uses_run_config(&cli.command).then(|| recorded.config.clone()),
    };
    let fresh = run_and_record(&inner, &cli.command)?;

    let mut mismatches = Vec::new();
    for old in &recorded.outputs {
        match fresh.outputs.iter().find(|o| o.path == old.path) {
            Some(new) if new.sha256 == old.sha256 => {}
            Some(_) => mismatches.push(format!("{} differs", old.path)),
            None => mismatches.push(format!("{} was not produced", old.path)),
        }
    }
    if mismatches.is_empty() {
        ctx.say(format!(
            "replay of {} reproduced {} outputs byte for byte in {}",
            recorded.command,
            recorded.outputs.len(),
            out_dir.display()
        ));
        Ok(())
    } else {
        Err(Failure::Check(anyhow!("replay mismatch: {}", mismatches.join("; "))))
    }
}

fn uses_run_config(cmd: &Command) -> bool {
    match cmd {
        Command::GenData(_) | Command::Train(_) | Command::Ablation(_) => true,
        Command::Eval(a) => a.scores.is_none(),
        _ => false,
    }
}
