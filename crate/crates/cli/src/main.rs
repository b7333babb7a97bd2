//! `dualtal` command line: corpus generation, training, inference, fusion,
//! evaluation and reporting.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dualtal::config::{schema, ExperimentConfig};
use dualtal::data::{generate_synthetic, load_dataset, save_dataset, Dataset, SynthSpec};
use dualtal::eval::{pr_curve, Preset, BUCKET_NAMES};
use dualtal::inference::{DetectionRecord, InferenceConfig};
use dualtal::losses::{BranchMode, LossReport};
use dualtal::network::Heads;
use dualtal::pipeline::{
    decode_windows, eval_detections, evaluate, fuse_raw, ground_truth, inference_windows, input_hash, postprocess, to_records,
    FullReport, RawWindow,
};
use dualtal::train::{load_model, read_json, training_windows, write_json, TrainSet, Trainer};
use dualtal::Error;

const CHECKPOINT: &str = "checkpoint";
const LOG: &str = "train_log.jsonl";
const CURVE: &str = "loss_curve.csv";
const CURVE_HEADER: &str = "epoch,lr,total,af_cls,af_reg,ab_cls,ab_overlap,ab_reg";

#[derive(Parser)]
#[command(name = "dualtal", version, about = "Temporal action localization with anchor-free and anchor-based heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature corpus with a manifest
    Synth(SynthArgs),
    /// Train a model into a run directory
    Train(TrainArgs),
    /// Detect actions with a trained run
    Infer(InferArgs),
    /// Pool the detections of an anchor-free-only and an anchor-based-only run
    Fuse(FuseArgs),
    /// Score detections against a manifest's annotations
    Eval(EvalArgs),
    /// Print the config schema, a run summary or a comparison of evaluations
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// TOML file with corpus parameters; missing keys take defaults
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Override one parameter, e.g. `--set seed=3`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory for manifest.json and feature files
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (TOML)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set lr=0.001`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    run_dir: PathBuf,
    /// Continue from the run directory's last checkpoint
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Clone)]
struct InferenceOverrides {
    /// Manifest to run on; defaults to the run's eval_manifest
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    nms_iou: Option<f64>,
    #[arg(long)]
    score_floor: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Windows per forward pass
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Detections JSONL to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    run_dir: PathBuf,
    #[command(flatten)]
    opts: InferenceOverrides,
}

#[derive(Args)]
struct FuseArgs {
    /// Run directory of an af_only model
    #[arg(long)]
    af: PathBuf,
    /// Run directory of an ab_only model
    #[arg(long)]
    ab: PathBuf,
    #[command(flatten)]
    opts: InferenceOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    detections: PathBuf,
    /// Manifest holding the ground truth
    #[arg(long)]
    manifest: PathBuf,
    /// Config supplying preset, interpolation and bucket bounds
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Directory for eval.json, eval.txt, eval.csv and pr_curve.csv
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[command(subcommand)]
    what: ReportKind,
}

#[derive(Subcommand)]
enum ReportKind {
    /// Every config key with its default
    Schema,
    /// Provenance and loss curve of a run directory
    Run { run_dir: PathBuf },
    /// mAP rows of several eval.json files side by side
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    toml::Value::String(s.to_string())
        .try_into()
        .map_err(|_| format!("unknown preset {s:?}; expected thumos, thumos_short or activity_net"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Fuse(a) => fuse(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Failure with an explicit exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(Exit(code, _)) = e.downcast_ref::<Exit>() {
        return *code;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 1,
        Some(Error::Numerical(_)) => 3,
        _ => 2,
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Exit(1, msg.into()).into()
}

/// `file` overlaid by `key=value` pairs; values are TOML literals, falling
/// back to bare strings.
fn overlay(mut table: toml::Table, file: Option<&Path>, sets: &[String]) -> Result<toml::Table> {
    if let Some(p) = file {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let t: toml::Table = text.parse().map_err(|e| usage(format!("{}: {e}", p.display())))?;
        table.extend(t);
    }
    for s in sets {
        let (k, v) = s.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        let v = v.trim();
        let value = format!("v = {v}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(v.to_string()));
        table.insert(k.trim().to_string(), value);
    }
    Ok(table)
}

fn load_config(file: Option<&Path>, sets: &[String]) -> Result<ExperimentConfig> {
    let table = overlay(toml::Table::new(), file, sets)?;
    let cfg = ExperimentConfig::from_toml(&table.to_string())?;
    cfg.validate()?;
    Ok(cfg)
}

fn synth(a: SynthArgs) -> Result<()> {
    let base = toml::Table::try_from(SynthSpec::default())?;
    let table = overlay(base, a.spec.as_deref(), &a.sets)?;
    let spec: SynthSpec = toml::from_str(&table.to_string()).map_err(|e| usage(format!("corpus spec: {e}")))?;
    let corpus = generate_synthetic(&spec)?;
    let manifest = save_dataset(&a.out, &corpus.dataset)?;
    fs::write(a.out.join("synth.toml"), toml::to_string(&spec)?)?;
    let mut counts = [0usize; 5];
    let buckets = dualtal::eval::DurationBuckets::new(spec.bounds)?;
    for v in &corpus.dataset.videos {
        for s in &v.annotations {
            counts[buckets.bucket(s.end - s.start)] += 1;
        }
    }
    println!("wrote {} ({} videos)", manifest.display(), corpus.dataset.videos.len());
    let parts: Vec<String> = BUCKET_NAMES.iter().zip(counts).map(|(n, c)| format!("{n} {c}")).collect();
    println!("actions by bucket: {}; placements dropped: {}", parts.join(", "), corpus.dropped);
    Ok(())
}

fn require_manifest(p: Option<&PathBuf>, key: &str) -> Result<PathBuf> {
    p.cloned().ok_or_else(|| usage(format!("no manifest given; set {key} or pass --manifest")))
}

fn check_dataset(cfg: &ExperimentConfig, data: &Dataset) -> Result<()> {
    if data.classes.len() != cfg.num_classes {
        bail!(Exit(
            2,
            format!("manifest lists {} classes but num_classes = {}", data.classes.len(), cfg.num_classes)
        ));
    }
    Ok(())
}

/// Provenance written next to the resolved config.
#[derive(serde::Serialize, serde::Deserialize)]
struct RunInfo {
    seed: u64,
    input_hash: String,
    overrides: Vec<String>,
}

fn train(a: TrainArgs) -> Result<()> {
    let run = &a.run_dir;
    let cfg_path = run.join("config.toml");
    let cfg = if a.resume {
        if a.config.is_some() {
            return Err(usage("--resume reads the run's own config.toml; drop --config"));
        }
        load_config(Some(&cfg_path), &a.sets)?
    } else {
        if cfg_path.exists() {
            return Err(usage(format!("{} already holds a run; pass --resume or pick another directory", run.display())));
        }
        load_config(a.config.as_deref(), &a.sets)?
    };
    let manifest = require_manifest(cfg.train_manifest.as_ref(), "train_manifest")?;
    let data = load_dataset(&manifest)?;
    check_dataset(&cfg, &data)?;

    fs::create_dir_all(run)?;
    fs::write(&cfg_path, cfg.to_toml())?;
    let info = RunInfo {
        seed: cfg.seed,
        input_hash: input_hash(&cfg, &manifest)?,
        overrides: cfg.overrides(),
    };
    fs::write(run.join("run.json"), serde_json::to_string_pretty(&info)?)?;
    for o in &info.overrides {
        eprintln!("override: {o}");
    }

    let mut trainer = if a.resume {
        Trainer::resume(cfg.clone(), &run.join(CHECKPOINT))?
    } else {
        Trainer::new(cfg.clone())?
    };
    let set = TrainSet::new(training_windows(&data, &cfg)?, &trainer.model.spec, &cfg.coder())?;
    eprintln!("{} training windows, input hash {}", set.len(), info.input_hash);

    // keep only what the checkpoint covers, so a resumed log has no gaps or repeats
    let steps = trainer.optim.steps_taken();
    let epoch = trainer.epoch;
    truncate_lines(&run.join(LOG), |l| {
        serde_json::from_str::<serde_json::Value>(l).ok().and_then(|v| v["step"].as_u64()).is_some_and(|s| s <= steps)
    })?;
    truncate_lines(&run.join(CURVE), |l| {
        l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e <= epoch)
    })?;
    let mut log = append(&run.join(LOG))?;
    let curve_path = run.join(CURVE);
    let fresh_curve = !curve_path.exists() || fs::metadata(&curve_path)?.len() == 0;
    let mut curve = append(&curve_path)?;
    if fresh_curve {
        writeln!(curve, "{CURVE_HEADER}")?;
    }

    while trainer.epoch < cfg.epochs {
        let mut sums = LossReport::default();
        let mut n = 0.0;
        let mut io_err = None;
        let lr = trainer.schedule.lr_at(trainer.epoch);
        let out = trainer.train_epoch(&set, |s| {
            add(&mut sums, &s.report);
            n += 1.0;
            if let Err(e) = serde_json::to_writer(&mut log, s).map_err(anyhow::Error::from).and_then(|_| Ok(writeln!(log)?)) {
                io_err.get_or_insert(e);
            }
        });
        log.flush()?;
        if let Some(e) = io_err {
            return Err(e.context("writing training log"));
        }
        let mean = match out {
            Ok(m) => m,
            Err(e @ Error::Numerical(_)) => {
                let kept = run.join(CHECKPOINT);
                let note = if kept.exists() {
                    format!("training stopped; last good checkpoint kept in {}", kept.display())
                } else {
                    "training stopped before the first checkpoint".to_string()
                };
                return Err(anyhow!(e).context(note));
            }
            Err(e) => return Err(e.into()),
        };
        writeln!(
            curve,
            "{},{lr},{},{},{},{},{},{}",
            trainer.epoch,
            sums.total / n,
            sums.af_cls / n,
            sums.af_reg / n,
            sums.ab_cls / n,
            sums.ab_overlap / n,
            sums.ab_reg / n
        )?;
        curve.flush()?;
        save_checkpoint(&trainer, run, mean)?;
        eprintln!("epoch {:>3}/{}  loss {mean:.5}  lr {lr:e}", trainer.epoch, cfg.epochs);
    }
    println!("trained {} epochs; checkpoint in {}", trainer.epoch, run.join(CHECKPOINT).display());
    Ok(())
}

fn add(acc: &mut LossReport, r: &LossReport) {
    acc.total += r.total;
    acc.af_cls += r.af_cls;
    acc.af_reg += r.af_reg;
    acc.ab_cls += r.ab_cls;
    acc.ab_overlap += r.ab_overlap;
    acc.ab_reg += r.ab_reg;
}

/// Replaces the checkpoint only once the new one is fully written.
fn save_checkpoint(trainer: &Trainer, run: &Path, loss: f64) -> Result<()> {
    let tmp = run.join("checkpoint.tmp");
    let old = run.join("checkpoint.old");
    let dst = run.join(CHECKPOINT);
    let _ = fs::remove_dir_all(&tmp);
    trainer.save(&tmp, Some(loss))?;
    if dst.exists() {
        let _ = fs::remove_dir_all(&old);
        fs::rename(&dst, &old)?;
    }
    fs::rename(&tmp, &dst)?;
    let _ = fs::remove_dir_all(&old);
    Ok(())
}

fn append(path: &Path) -> Result<BufWriter<fs::File>> {
    let f = fs::OpenOptions::new().create(true).append(true).open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Keeps the header line and the lines accepted by `keep`.
fn truncate_lines(path: &Path, keep: impl Fn(&str) -> bool) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut out = String::new();
    for (i, l) in text.lines().enumerate() {
        if (i == 0 && l == CURVE_HEADER) || keep(l) {
            out.push_str(l);
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

struct LoadedRun {
    cfg: ExperimentConfig,
    model: dualtal::network::Model,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let cfg = load_config(Some(&dir.join("config.toml")), &[])?;
    let model = load_model(&dir.join(CHECKPOINT).join("model.ckpt"), cfg.model())?;
    Ok(LoadedRun { cfg, model })
}

fn heads(mode: BranchMode) -> Heads {
    Heads {
        anchor_free: mode.uses_af(),
        anchor_based: mode.uses_ab(),
    }
}

fn inference_config(cfg: &ExperimentConfig, o: &InferenceOverrides) -> Result<InferenceConfig> {
    let inf = InferenceConfig {
        lambda: o.lambda.unwrap_or(cfg.lambda),
        nms_iou: o.nms_iou.unwrap_or(cfg.nms_iou),
        score_floor: o.score_floor.unwrap_or(cfg.score_floor),
        top_k: o.top_k.unwrap_or(cfg.top_k),
    };
    inf.validate()?;
    Ok(inf)
}

fn raw_detections(run: &LoadedRun, data: &Dataset, inf: &InferenceConfig, batch: usize) -> Result<Vec<RawWindow>> {
    check_dataset(&run.cfg, data)?;
    let windows = inference_windows(data, &run.cfg)?;
    Ok(decode_windows(&run.model, &windows, heads(run.cfg.branch_mode), &run.cfg.coder(), inf.score_floor, batch)?)
}

/// Writes detections and a sidecar recording the inference settings.
fn write_detections(path: &Path, data: &Dataset, raw: &[RawWindow], inf: &InferenceConfig) -> Result<()> {
    let records = to_records(data, &postprocess(raw, data.videos.len(), inf));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    write_json(&sidecar(path), inf)?;
    println!("wrote {} detections to {}", records.len(), path.display());
    Ok(())
}

fn sidecar(detections: &Path) -> PathBuf {
    let mut s = detections.as_os_str().to_owned();
    s.push(".inference.json");
    PathBuf::from(s)
}

fn infer(a: InferArgs) -> Result<()> {
    let run = load_run(&a.run_dir)?;
    let inf = inference_config(&run.cfg, &a.opts)?;
    let manifest = require_manifest(a.opts.manifest.as_ref().or(run.cfg.eval_manifest.as_ref()), "eval_manifest")?;
    let data = load_dataset(&manifest)?;
    let raw = raw_detections(&run, &data, &inf, a.opts.batch)?;
    write_detections(&a.opts.out, &data, &raw, &inf)
}

fn fuse(a: FuseArgs) -> Result<()> {
    let af = load_run(&a.af)?;
    let ab = load_run(&a.ab)?;
    if af.cfg.branch_mode != BranchMode::AfOnly || ab.cfg.branch_mode != BranchMode::AbOnly {
        return Err(usage(format!(
            "fuse needs an af_only and an ab_only run, got {:?} and {:?}",
            af.cfg.branch_mode, ab.cfg.branch_mode
        )));
    }
    if (af.cfg.window, af.cfg.data_mode, af.cfg.eval_stride) != (ab.cfg.window, ab.cfg.data_mode, ab.cfg.eval_stride) {
        return Err(usage("the two runs cut windows differently (window, data_mode or eval_stride)"));
    }
    let inf = inference_config(&af.cfg, &a.opts)?;
    let manifest = require_manifest(a.opts.manifest.as_ref().or(af.cfg.eval_manifest.as_ref()), "eval_manifest")?;
    let data = load_dataset(&manifest)?;
    let raw = fuse_raw(&raw_detections(&af, &data, &inf, a.opts.batch)?, &raw_detections(&ab, &data, &inf, a.opts.batch)?)?;
    write_detections(&a.opts.out, &data, &raw, &inf)
}

fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| Exit(2, format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), &[])?;
    if let Some(p) = a.preset {
        cfg.eval_preset = p;
    }
    let data = load_dataset(&a.manifest)?;
    let records = read_detections(&a.detections)?;
    let (mut report, unknown) = evaluate(&data, &records, &cfg)?;
    let side = sidecar(&a.detections);
    if side.exists() {
        report.inference = read_json(&side)?;
    }

    fs::create_dir_all(&a.out_dir)?;
    write_json(&a.out_dir.join("eval.json"), &report)?;
    fs::write(a.out_dir.join("eval.txt"), report.table())?;
    fs::write(a.out_dir.join("eval.csv"), report.overall.to_csv())?;
    fs::write(a.out_dir.join("pr_curve.csv"), pr_csv(&data, &records, &report))?;
    print!("{}", report.table());
    if !unknown.is_empty() {
        bail!(Exit(2, format!("detections name videos missing from the manifest (excluded): {}", unknown.join(", "))));
    }
    Ok(())
}

fn pr_csv(data: &Dataset, records: &[DetectionRecord], report: &FullReport) -> String {
    let (dets, _) = eval_detections(data, records);
    let gts = ground_truth(data);
    let mut s = String::from("threshold,class,rank,recall,precision\n");
    for &t in &report.overall.thresholds {
        for &c in &report.overall.classes {
            let d: Vec<_> = dets.iter().copied().filter(|x| x.label == c).collect();
            let g: Vec<_> = gts.iter().copied().filter(|x| x.label == c).collect();
            for (k, (r, p)) in pr_curve(&d, &g, t).into_iter().enumerate() {
                let _ = writeln!(s, "{t},{c},{},{r},{p}", k + 1);
            }
        }
    }
    s
}

fn report(a: ReportArgs) -> Result<()> {
    match a.what {
        ReportKind::Schema => print!("{}", schema()),
        ReportKind::Run { run_dir } => {
            let cfg = load_config(Some(&run_dir.join("config.toml")), &[])?;
            let info: RunInfo = read_json(&run_dir.join("run.json"))?;
            println!("run        {}", run_dir.display());
            println!("seed       {}", info.seed);
            println!("input hash {}", info.input_hash);
            println!("branches   {:?}", cfg.branch_mode);
            if info.overrides.is_empty() {
                println!("overrides  none");
            }
            for o in &info.overrides {
                println!("override   {o}");
            }
            let curve = run_dir.join(CURVE);
            if curve.exists() {
                println!();
                print!("{}", fs::read_to_string(curve)?.replace(',', "\t"));
            }
        }
        ReportKind::Compare { reports } => {
            let loaded: Vec<(String, FullReport)> = reports
                .iter()
                .map(|p| {
                    let name = p
                        .parent()
                        .and_then(|d| d.file_name())
                        .or(p.file_stem())
                        .map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
                    read_json(p).map(|r| (name, r)).map_err(anyhow::Error::from)
                })
                .collect::<Result<_>>()?;
            print!("{}", compare_table(&loaded));
        }
    }
    Ok(())
}

fn compare_table(rows: &[(String, FullReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(4);
    let thresholds = rows.first().map(|(_, r)| r.overall.thresholds.clone()).unwrap_or_default();
    let mut s = format!("{:width$}", "run");
    for t in &thresholds {
        let _ = write!(s, "{:>7}", format!("{t:.2}"));
    }
    s.push_str("    avg |");
    for b in BUCKET_NAMES {
        let _ = write!(s, "{b:>7}");
    }
    s.push_str("  (buckets at tIoU 0.5)\n");
    for (name, r) in rows {
        let _ = write!(s, "{name:width$}");
        for t in &thresholds {
            match r.overall.map_at(*t) {
                Some(m) => {
                    let _ = write!(s, "{:>7.2}", 100.0 * m);
                }
                None => s.push_str("      -"),
            }
        }
        let _ = write!(s, "{:>7.2} |", 100.0 * r.overall.average_map);
        for b in &r.buckets.reports {
            match b.map_at(0.5).filter(|_| !b.classes.is_empty()) {
                Some(m) => {
                    let _ = write!(s, "{:>7.2}", 100.0 * m);
                }
                None => s.push_str("      -"),
            }
        }
        s.push('\n');
    }
    s
}
