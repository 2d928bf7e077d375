//! Command-line front end: argument parsing, config-file merging and the
//! experiment commands behind the `esuot` binary.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::data::{self, Family, LabelShiftSpec, SyntheticSpec};
use crate::diagnostics::{motivation_compare, DsmConfig, MotivationConfig};
use crate::divergence::ConjugateKind;
use crate::error::{Error, Result};
use crate::gda::{run_gda, ClassifierConfig, GdaConfig, GdaReport};
use crate::ot::DistanceOptions;
use crate::suot::{ESuotConfig, TrainerKind};
use crate::Dataset;

pub const SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "SUOT_SEED";

#[derive(Debug, Parser)]
#[command(name = "esuot", version, about = "Gradual domain adaptation with entropic semi-dual unbalanced OT")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write source.csv and target.csv for a synthetic benchmark.
    GenData(GenDataArgs),
    /// Run the full adaptation pipeline and write a JSON report.
    RunGda(RunGdaArgs),
    /// Trainer x conjugate grid, or a one-parameter sweep, as long-format CSV.
    Ablate(AblateArgs),
    /// Unbalanced vs balanced transport under target label shift.
    LabelShift(LabelShiftArgs),
    /// Score-based Langevin transport vs a learned direct map.
    Motivation(MotivationArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Key = value file; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overridden by the SUOT_SEED environment variable when set.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub family: Option<Family>,
    /// Rotation angle in degrees (rotation families).
    #[arg(long, allow_hyphen_values = true)]
    pub angle: Option<f64>,
    /// Comma-separated shift vector (shift families).
    #[arg(long, allow_hyphen_values = true)]
    pub shift: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Source CSV; with --target, replaces the synthetic generator.
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TransportArgs {
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub stages: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// kl | chi2 | identity | softplus
    #[arg(long)]
    pub fstar: Option<ConjugateKind>,
    /// esuot | adversarial | barycentric
    #[arg(long)]
    pub trainer: Option<TrainerKind>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub warm_start: Option<bool>,
    #[arg(long)]
    pub recenter: Option<bool>,
    #[arg(long)]
    pub anchor: Option<f64>,
    #[arg(long)]
    pub clf_hidden: Option<usize>,
    #[arg(long)]
    pub clf_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub clf_lr: Option<f64>,
    #[arg(long)]
    pub clf_batch: Option<usize>,
    /// Entropy strength of the Sinkhorn distance estimates in reports.
    #[arg(long)]
    pub eval_epsilon: Option<f64>,
    #[arg(long)]
    pub eval_max_points: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RunGdaArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub transport: TransportArgs,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SeedListArgs {
    /// Comma-separated seeds; defaults to the single resolved --seed.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Parallel runs across seeds and grid points.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub transport: TransportArgs,
    #[command(flatten)]
    pub runs: SeedListArgs,
    /// One-parameter sweep `name=v1,v2,...` instead of the trainer x conjugate grid.
    #[arg(long)]
    pub sweep: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct LabelShiftArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub transport: TransportArgs,
    #[command(flatten)]
    pub runs: SeedListArgs,
    /// Comma-separated target priors p(y=1).
    #[arg(long)]
    pub priors: Option<String>,
    /// Gauge-anchor weight of the balanced comparator.
    #[arg(long)]
    pub balanced_anchor: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct MotivationArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub transport: TransportArgs,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub langevin_step: Option<f64>,
    #[arg(long)]
    pub langevin_steps: Option<usize>,
    #[arg(long)]
    pub dsm_epochs: Option<usize>,
    #[arg(long)]
    pub n_snapshots: Option<usize>,
    /// JSON result path.
    #[arg(long)]
    pub out: PathBuf,
    /// Snapshot CSV; defaults to `<out stem>_snapshots.csv`.
    #[arg(long)]
    pub snapshots_out: Option<PathBuf>,
}

/// Process exit code for an error: 2 configuration, 3 data, 4 numeric.
pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Config(_) => 2,
        Error::Numeric { .. } | Error::Diverged(_) | Error::DegeneratePlan(_) => 4,
        _ => 3,
    }
}

/// Values from a config file, tracking which keys were read.
#[derive(Debug, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, (String, usize)>,
    used: RefCell<BTreeSet<String>>,
}

fn normalize_key(key: &str) -> String {
    key.trim().replace('_', "-")
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`", i + 1)))?;
            let key = normalize_key(key);
            if key.is_empty() {
                return Err(Error::Config(format!("config line {}: empty key", i + 1)));
            }
            if values.insert(key.clone(), (value.trim().to_string(), i + 1)).is_some() {
                return Err(Error::Config(format!("config line {}: duplicate key {key}", i + 1)));
            }
        }
        Ok(ConfigFile {
            values,
            used: RefCell::default(),
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(ConfigFile::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    /// Flag value if given, else the file value, else `None`.
    pub fn pick<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let key = normalize_key(key);
        self.used.borrow_mut().insert(key.clone());
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(&key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Config(format!("config line {line}: bad value for {key}: {e}"))),
        }
    }

    pub fn check_all_used(&self) -> Result<()> {
        let used = self.used.borrow();
        match self.values.iter().find(|(k, _)| !used.contains(*k)) {
            Some((k, (_, line))) => Err(Error::Config(format!("config line {line}: unknown key {k}"))),
            None => Ok(()),
        }
    }
}

fn resolve_seed(common: &CommonArgs, file: &ConfigFile) -> Result<u64> {
    if let Ok(v) = std::env::var(SEED_ENV) {
        let seed = v
            .trim()
            .parse::<u64>()
            .map_err(|e| Error::Config(format!("{SEED_ENV}={v:?} is not a seed: {e}")))?;
        file.pick::<u64>(None, "seed")?;
        return Ok(seed);
    }
    Ok(file.pick(common.seed, "seed")?.unwrap_or(0))
}

fn parse_list<T>(text: &str, what: &str) -> Result<Vec<T>>
where
    T: FromStr,
    T::Err: Display,
{
    let items: Result<Vec<T>> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| Error::Config(format!("bad {what} entry {s:?}: {e}"))))
        .collect();
    let items = items?;
    if items.is_empty() {
        return Err(Error::Config(format!("empty {what} list")));
    }
    Ok(items)
}

/// Where a command's data comes from, echoed into reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv { source: PathBuf, target: PathBuf },
}

impl DataSource {
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Synthetic(spec) => data::generate(&SyntheticSpec { seed, ..spec.clone() }),
            DataSource::Csv { source, target } => {
                let mut src = data::load_csv(source)?;
                let mut tgt = data::load_csv(target)?;
                let k = src.class_count.max(tgt.class_count);
                src.class_count = k;
                tgt.class_count = k;
                Ok((src, tgt))
            }
        }
    }
}

fn resolve_data(args: &DataArgs, file: &ConfigFile, seed: u64, default_family: Family) -> Result<DataSource> {
    let source: Option<PathBuf> = file.pick(args.source.clone(), "source")?;
    let target: Option<PathBuf> = file.pick(args.target.clone(), "target")?;
    let family = file.pick(args.family, "family")?;
    let angle = file.pick(args.angle, "angle")?;
    let shift: Option<String> = file.pick(args.shift.clone(), "shift")?;
    let n = file.pick(args.n, "n")?;
    let noise = file.pick(args.noise, "noise")?;
    match (source, target) {
        (Some(source), Some(target)) => return Ok(DataSource::Csv { source, target }),
        (None, None) => {}
        _ => return Err(Error::Config("--source and --target must be given together".into())),
    }
    // The implicit default benchmark is the 45° rotation; an explicit
    // rotation family must name its angle.
    let explicit = family.is_some();
    let family = family.unwrap_or(default_family);
    let shift = shift.map(|s| parse_list::<f64>(&s, "--shift")).transpose()?;
    let angle = angle.or((!explicit && family.is_rotation()).then_some(45.0));
    let spec = SyntheticSpec {
        family,
        n: n.unwrap_or(2000),
        angle_deg: angle,
        shift,
        noise: noise.unwrap_or(0.1),
        seed,
    };
    spec.validate()?;
    Ok(DataSource::Synthetic(spec))
}

fn resolve_gda(args: &TransportArgs, file: &ConfigFile, seed: u64) -> Result<GdaConfig> {
    let d = GdaConfig::default();
    let t = &d.transport;
    let c = &d.classifier;
    let transport = ESuotConfig {
        epsilon: file.pick(args.epsilon, "epsilon")?.unwrap_or(t.epsilon),
        eta: file.pick(args.eta, "eta")?.unwrap_or(t.eta),
        stages: file.pick(args.stages, "stages")?.unwrap_or(t.stages),
        batch: file.pick(args.batch, "batch")?.unwrap_or(t.batch),
        epochs: file.pick(args.epochs, "epochs")?.unwrap_or(t.epochs),
        lr: file.pick(args.lr, "lr")?.unwrap_or(t.lr),
        conjugate: file.pick(args.fstar, "fstar")?.unwrap_or(t.conjugate),
        trainer: file.pick(args.trainer, "trainer")?.unwrap_or(t.trainer),
        seed,
        hidden: file.pick(args.hidden, "hidden")?.unwrap_or(t.hidden),
        warm_start: file.pick(args.warm_start, "warm-start")?.unwrap_or(t.warm_start),
        recenter: file.pick(args.recenter, "recenter")?.unwrap_or(t.recenter),
        anchor: file.pick(args.anchor, "anchor")?.unwrap_or(t.anchor),
    };
    let classifier = ClassifierConfig {
        hidden: file.pick(args.clf_hidden, "clf-hidden")?.unwrap_or(c.hidden),
        epochs: file.pick(args.clf_epochs, "clf-epochs")?.unwrap_or(c.epochs),
        finetune_epochs: file.pick(args.finetune_epochs, "finetune-epochs")?.or(c.finetune_epochs),
        lr: file.pick(args.clf_lr, "clf-lr")?.unwrap_or(c.lr),
        batch: file.pick(args.clf_batch, "clf-batch")?.unwrap_or(c.batch),
        seed,
    };
    let distance = DistanceOptions {
        epsilon: file.pick(args.eval_epsilon, "eval-epsilon")?.unwrap_or(d.distance.epsilon),
        max_points: file.pick(args.eval_max_points, "eval-max-points")?.unwrap_or(d.distance.max_points),
        ..d.distance
    };
    if !(distance.epsilon > 0.0) || distance.max_points == 0 {
        return Err(Error::Config("eval-epsilon must be positive and eval-max-points at least 1".into()));
    }
    let cfg = GdaConfig {
        transport,
        classifier,
        distance,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_seeds(runs: &SeedListArgs, file: &ConfigFile, seed: u64) -> Result<(Vec<u64>, usize)> {
    let seeds = match file.pick(runs.seeds.clone(), "seeds")? {
        Some(s) => parse_list::<u64>(&s, "--seeds")?,
        None => vec![seed],
    };
    let jobs = file.pick(runs.jobs, "jobs")?.unwrap_or(1);
    if jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    Ok((seeds, jobs))
}

/// Runs `f(0..n)` on up to `jobs` threads; results come back in index order.
pub fn run_parallel<T, F>(n: usize, jobs: usize, f: F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if jobs <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("result slots poisoned")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every index is visited"))
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn to_json(value: &Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report values are finite JSON");
    s.push('\n');
    s
}

fn envelope(command: &str, mut body: Value, started: Instant) -> Value {
    let obj = body.as_object_mut().expect("report bodies are objects");
    obj.insert("schema_version".into(), json!(SCHEMA_VERSION));
    obj.insert("command".into(), json!(command));
    obj.insert("wall_time_s".into(), json!(started.elapsed().as_secs_f64()));
    body
}

fn serialize<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::numeric(format!("report serialization: {e}")))
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let file = ConfigFile::load(args.common.config.as_deref())?;
    let seed = resolve_seed(&args.common, &file)?;
    let family = file
        .pick(args.data.family, "family")?
        .ok_or_else(|| Error::Config("--family is required".into()))?;
    let source = resolve_data(&DataArgs { family: Some(family), ..args.data.clone() }, &file, seed, family)?;
    file.check_all_used()?;
    let (src, tgt) = match &source {
        DataSource::Synthetic(spec) => data::generate(spec)?,
        DataSource::Csv { .. } => return Err(Error::Config("gen-data takes a synthetic family, not CSV paths".into())),
    };
    fs::create_dir_all(&args.out)?;
    data::save_csv(&src, args.out.join("source.csv"))?;
    data::save_csv(&tgt, args.out.join("target.csv"))?;
    Ok(())
}

/// The run-gda report as JSON, without the wall-clock field.
pub fn gda_report_json(source: &DataSource, report: &GdaReport) -> Result<Value> {
    let mut body = serialize(report)?;
    let obj = body.as_object_mut().expect("GdaReport is a struct");
    obj.insert("data".into(), serialize(source)?);
    Ok(body)
}

pub fn cmd_run_gda(args: &RunGdaArgs) -> Result<Value> {
    let started = Instant::now();
    let file = ConfigFile::load(args.common.config.as_deref())?;
    let seed = resolve_seed(&args.common, &file)?;
    let source = resolve_data(&args.data, &file, seed, Family::TwoMoonsRotation)?;
    let cfg = resolve_gda(&args.transport, &file, seed)?;
    file.check_all_used()?;
    let (src, tgt) = source.load(seed)?;
    let report = run_gda(&cfg, &src, &tgt)?;
    let value = envelope("run-gda", gda_report_json(&source, &report)?, started);
    match &args.out {
        Some(path) => write_text(path, &to_json(&value))?,
        None => std::io::stdout().write_all(to_json(&value).as_bytes())?,
    }
    Ok(value)
}

/// `(trainer, conjugate)` pairs of the ablation grid: every conjugate for
/// the entropic trainer, every conjugate except identity for the others.
pub fn ablation_grid() -> Vec<(TrainerKind, ConjugateKind)> {
    let mut out = Vec::new();
    for trainer in [TrainerKind::Esuot, TrainerKind::Adversarial, TrainerKind::Barycentric] {
        for conj in ConjugateKind::ALL {
            if trainer != TrainerKind::Esuot && conj == ConjugateKind::Identity {
                continue;
            }
            out.push((trainer, conj));
        }
    }
    out
}

pub const SWEEP_KEYS: [&str; 7] = ["epsilon", "eta", "stages", "batch", "epochs", "lr", "hidden"];

fn apply_sweep(cfg: &mut ESuotConfig, key: &str, value: f64) -> Result<()> {
    let as_count = |v: f64| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::Config(format!("{key} must be a positive integer, got {v}")))
        }
    };
    match key {
        "epsilon" => cfg.epsilon = value,
        "eta" => cfg.eta = value,
        "lr" => cfg.lr = value,
        "stages" => cfg.stages = as_count(value)?,
        "batch" => cfg.batch = as_count(value)?,
        "epochs" => cfg.epochs = as_count(value)?,
        "hidden" => cfg.hidden = as_count(value)?,
        other => {
            return Err(Error::Config(format!(
                "cannot sweep {other:?}; expected one of {}",
                SWEEP_KEYS.join(", ")
            )))
        }
    }
    cfg.validate()
}

pub const ABLATE_HEADER: [&str; 9] = [
    "seed",
    "trainer",
    "conjugate",
    "param",
    "value",
    "source_only_accuracy",
    "final_accuracy",
    "final_w2",
    "status",
];

struct AblationPoint {
    seed: u64,
    cfg: GdaConfig,
    param: String,
    value: String,
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<usize> {
    let file = ConfigFile::load(args.common.config.as_deref())?;
    let seed = resolve_seed(&args.common, &file)?;
    let source = resolve_data(&args.data, &file, seed, Family::TwoMoonsRotation)?;
    let base = resolve_gda(&args.transport, &file, seed)?;
    let (seeds, jobs) = resolve_seeds(&args.runs, &file, seed)?;
    let sweep: Option<String> = file.pick(args.sweep.clone(), "sweep")?;
    file.check_all_used()?;

    let mut points = Vec::new();
    for &s in &seeds {
        let seeded = base.clone().with_seed(s);
        match &sweep {
            None => {
                for (trainer, conj) in ablation_grid() {
                    let mut cfg = seeded.clone();
                    cfg.transport.trainer = trainer;
                    cfg.transport.conjugate = conj;
                    points.push(AblationPoint {
                        seed: s,
                        cfg,
                        param: String::new(),
                        value: String::new(),
                    });
                }
            }
            Some(spec) => {
                let (key, values) = spec
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("--sweep expects name=v1,v2,..., got {spec:?}")))?;
                let key = key.trim();
                for v in parse_list::<f64>(values, "--sweep")? {
                    let mut cfg = seeded.clone();
                    apply_sweep(&mut cfg.transport, key, v)?;
                    points.push(AblationPoint {
                        seed: s,
                        cfg,
                        param: key.to_string(),
                        value: format!("{v:?}"),
                    });
                }
            }
        }
    }

    let results = run_parallel(points.len(), jobs, |i| {
        let p = &points[i];
        let (src, tgt) = source.load(p.seed)?;
        run_gda(&p.cfg, &src, &tgt)
    });
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ABLATE_HEADER).map_err(csv_io)?;
    for (p, r) in points.iter().zip(results) {
        let (src_acc, acc, w2, status) = match r {
            Ok(rep) => (
                format!("{:?}", rep.source_only_accuracy),
                format!("{:?}", rep.final_accuracy),
                format!("{:?}", rep.per_stage.last().map(|s| s.w2_to_target).unwrap_or(f64::NAN)),
                "ok".to_string(),
            ),
            // A diverged run is a result of the ablation, not a failure of it.
            Err(e) if exit_code(&e) == 4 => (String::new(), String::new(), String::new(), format!("numeric: {e}")),
            Err(e) => return Err(e),
        };
        w.write_record([
            p.seed.to_string(),
            p.cfg.transport.trainer.to_string(),
            p.cfg.transport.conjugate.to_string(),
            p.param.clone(),
            p.value.clone(),
            src_acc,
            acc,
            w2,
            status,
        ])
        .map_err(csv_io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_text(&args.out, &String::from_utf8(bytes).expect("csv output is UTF-8"))?;
    Ok(points.len())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub const LABEL_SHIFT_HEADER: [&str; 6] = ["prior", "seed", "variant", "source_only_accuracy", "final_accuracy", "status"];

/// Default gauge-anchor weight for the balanced comparator.
pub const BALANCED_ANCHOR: f64 = 1.0;

/// The balanced comparator: identity conjugate (exact target marginal) plus
/// the `(mean w)²` anchor that pins the potential's free additive constant.
pub fn balanced_variant(cfg: &GdaConfig, anchor: f64) -> GdaConfig {
    let mut b = cfg.clone();
    b.transport.conjugate = ConjugateKind::Identity;
    b.transport.anchor = anchor;
    b
}

pub fn cmd_label_shift(args: &LabelShiftArgs) -> Result<usize> {
    let file = ConfigFile::load(args.common.config.as_deref())?;
    let seed = resolve_seed(&args.common, &file)?;
    let source = resolve_data(&args.data, &file, seed, Family::TwoMoonsRotation)?;
    let base = resolve_gda(&args.transport, &file, seed)?;
    let (seeds, jobs) = resolve_seeds(&args.runs, &file, seed)?;
    let priors = match file.pick(args.priors.clone(), "priors")? {
        Some(p) => parse_list::<f64>(&p, "--priors")?,
        None => vec![0.0, 0.5, 1.0],
    };
    if let Some(bad) = priors.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Config(format!("prior {bad} outside [0, 1]")));
    }
    let anchor = file.pick(args.balanced_anchor, "balanced-anchor")?.unwrap_or(BALANCED_ANCHOR);
    file.check_all_used()?;

    let mut points = Vec::new();
    for &prior in &priors {
        for &s in &seeds {
            let cfg = base.clone().with_seed(s);
            points.push((prior, s, "esuot", cfg.clone()));
            points.push((prior, s, "balanced", balanced_variant(&cfg, anchor)));
        }
    }
    let results = run_parallel(points.len(), jobs, |i| {
        let (prior, s, _, cfg) = &points[i];
        let (src, tgt) = source.load(*s)?;
        let shifted = data::resample_label_shift(
            &tgt,
            &LabelShiftSpec {
                positive_prior: *prior,
                n: tgt.len(),
                seed: *s,
            },
        )?;
        run_gda(cfg, &src, &shifted)
    });
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LABEL_SHIFT_HEADER).map_err(csv_io)?;
    for ((prior, s, variant, _), r) in points.iter().zip(results) {
        let (src_acc, acc, status) = match r {
            Ok(rep) => (
                format!("{:?}", rep.source_only_accuracy),
                format!("{:?}", rep.final_accuracy),
                "ok".to_string(),
            ),
            Err(e) if exit_code(&e) == 4 => (String::new(), String::new(), format!("numeric: {e}")),
            Err(e) => return Err(e),
        };
        w.write_record([format!("{prior:?}"), s.to_string(), variant.to_string(), src_acc, acc, status])
            .map_err(csv_io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_text(&args.out, &String::from_utf8(bytes).expect("csv output is UTF-8"))?;
    Ok(points.len())
}

pub fn resolve_motivation(args: &MotivationArgs, file: &ConfigFile, seed: u64) -> Result<MotivationConfig> {
    let d = MotivationConfig::default();
    let eta = file.pick(args.transport.eta, "eta")?.unwrap_or(d.transport.eta);
    let gda = resolve_gda(
        &TransportArgs {
            stages: Some(1),
            eta: Some(eta),
            ..args.transport.clone()
        },
        file,
        seed,
    )?;
    let cfg = MotivationConfig {
        transport: gda.transport,
        dsm: DsmConfig {
            epochs: file.pick(args.dsm_epochs, "dsm-epochs")?.unwrap_or(d.dsm.epochs),
            seed,
            ..d.dsm
        },
        sigma: file.pick(args.sigma, "sigma")?.unwrap_or(d.sigma),
        langevin_step: file.pick(args.langevin_step, "langevin-step")?.unwrap_or(d.langevin_step),
        langevin_steps: file.pick(args.langevin_steps, "langevin-steps")?.unwrap_or(d.langevin_steps),
        holdout: d.holdout,
        distance: gda.distance,
        snapshots: file.pick(args.n_snapshots, "n-snapshots")?.unwrap_or(d.snapshots),
    };
    if !(cfg.sigma > 0.0) || !(cfg.langevin_step > 0.0) {
        return Err(Error::Config("sigma and langevin-step must be positive".into()));
    }
    Ok(cfg)
}

pub const SNAPSHOT_HEADER_PREFIX: [&str; 2] = ["snapshot", "particle"];

pub fn cmd_motivation(args: &MotivationArgs) -> Result<Value> {
    let started = Instant::now();
    let file = ConfigFile::load(args.common.config.as_deref())?;
    let seed = resolve_seed(&args.common, &file)?;
    let source = resolve_data(&args.data, &file, seed, Family::GaussianRingShift)?;
    let cfg = resolve_motivation(args, &file, seed)?;
    file.check_all_used()?;
    let (src, tgt) = source.load(seed)?;
    let run = motivation_compare(&cfg, &src.features, &tgt.features)?;

    let snapshots_path = args.snapshots_out.clone().unwrap_or_else(|| {
        let stem = args.out.file_stem().and_then(|s| s.to_str()).unwrap_or("motivation");
        args.out.with_file_name(format!("{stem}_snapshots.csv"))
    });
    let d = src.dim();
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = SNAPSHOT_HEADER_PREFIX
        .iter()
        .map(|s| s.to_string())
        .chain((0..d).map(|k| format!("f{k}")))
        .collect();
    w.write_record(&header).map_err(csv_io)?;
    for (k, snap) in run.snapshots.iter().enumerate() {
        for (i, row) in snap.outer_iter().enumerate() {
            let rec: Vec<String> = [k.to_string(), i.to_string()]
                .into_iter()
                .chain(row.iter().map(|v| format!("{v:?}")))
                .collect();
            w.write_record(&rec).map_err(csv_io)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_text(&snapshots_path, &String::from_utf8(bytes).expect("csv output is UTF-8"))?;

    let mut body = serialize(&run.result)?;
    let obj = body.as_object_mut().expect("MotivationResult is a struct");
    obj.insert("config".into(), serialize(&cfg)?);
    obj.insert("data".into(), serialize(&source)?);
    obj.insert("seed".into(), json!(seed));
    obj.insert("n_particles".into(), json!(src.len()));
    obj.insert("n_snapshots".into(), json!(run.snapshots.len()));
    obj.insert("snapshots_csv".into(), json!(snapshots_path.display().to_string()));
    let value = envelope("motivation", body, started);
    write_text(&args.out, &to_json(&value))?;
    Ok(value)
}

/// Dispatches a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::RunGda(a) => cmd_run_gda(a).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(a).map(|_| ()),
        Command::LabelShift(a) => cmd_label_shift(a).map(|_| ()),
        Command::Motivation(a) => cmd_motivation(a).map(|_| ()),
    }
}
