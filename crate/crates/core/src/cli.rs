//! Command-line orchestration for generation, training, evaluation,
//! verification and ablations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::autograd::Real;
use crate::detector::{
    load_checkpoint, read_manifest, read_train_log, resume, train, DetectorConfig, Model, Precision, Variant,
};
use crate::evalkit::{
    equivariance_probe, evaluate, median_forward_seconds, write_report, EvalReport, ProbeBounds, ProbeReport,
};
use crate::error::{EonError, Result};
use crate::parallel::workers_from_env;
use crate::scenegen::{generate_dataset, generate_scene, load_scene, DatasetManifest, Scene, SceneGenConfig};

#[derive(Parser, Debug)]
#[command(name = "eon", version, about = "Object-level rotation-equivariant 3D detection on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(CommonArgs),
    /// Train a detector on the configured dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Probe object-level equivariance on one scene.
    Verify(VerifyArgs),
    /// Train and evaluate the variant grid.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset directory (overrides `data_dir`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Continue from `<out>/checkpoint` up to the configured epoch count.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Split name (overrides `eval_split`).
    #[arg(long)]
    pub split: Option<String>,
    /// Comma-separated IoU thresholds.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
}

#[derive(Args, Debug, Clone)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, conflicts_with = "random_params")]
    pub checkpoint: Option<PathBuf>,
    /// Use freshly initialized weights from the configured detector.
    #[arg(long)]
    pub random_params: bool,
    /// Scene file; generated from the scene config when absent.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub object: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyOptions {
    pub scene: Option<PathBuf>,
    pub object_id: usize,
    /// Seed of the generated scene when no file is given.
    pub scene_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateOptions {
    pub variants: Vec<Variant>,
    /// Group orders to sweep; empty uses the detector's.
    pub group_orders: Vec<usize>,
    /// ObjAug settings to sweep.
    pub objaug: Vec<bool>,
    pub objaug_degrees: f64,
    /// Adds an eon row with both oracle flags.
    pub oracle: bool,
}

impl Default for AblateOptions {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            group_orders: Vec::new(),
            objaug: vec![false],
            objaug_degrees: 180.0,
            oracle: true,
        }
    }
}

/// One JSON document configuring every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneGenConfig,
    pub detector: DetectorConfig,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Split name → scene count.
    pub splits: BTreeMap<String, usize>,
    pub train_split: String,
    pub eval_split: String,
    pub thresholds: Vec<f64>,
    pub timing_runs: usize,
    pub verify: VerifyOptions,
    pub ablate: AblateOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneGenConfig::default(),
            detector: DetectorConfig::default(),
            data_dir: None,
            out_dir: None,
            checkpoint: None,
            splits: BTreeMap::from([("train".to_string(), 200), ("test".to_string(), 50)]),
            train_split: "train".into(),
            eval_split: "test".into(),
            thresholds: vec![0.25, 0.5],
            timing_runs: 5,
            verify: VerifyOptions::default(),
            ablate: AblateOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| EonError::parse(context, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| EonError::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.detector.validate()?;
        validate_thresholds(&self.thresholds)?;
        if self.timing_runs == 0 {
            return Err(EonError::Config("timing_runs must be positive".into()));
        }
        if self.ablate.group_orders.contains(&0) {
            return Err(EonError::Config("ablate.group_orders entries must be positive".into()));
        }
        Ok(())
    }
}

fn validate_thresholds(t: &[f64]) -> Result<()> {
    if t.is_empty() || t.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
        return Err(EonError::Config("thresholds must be non-empty and lie in (0, 1]".into()));
    }
    Ok(())
}

/// Creates `dir`, refusing a non-empty one unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| EonError::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(EonError::Config(format!(
                "output directory {} is not empty (pass --force to write into it)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| EonError::io(dir, e))
}

fn out_dir(args: &CommonArgs, cfg: &RunConfig) -> Result<PathBuf> {
    args.out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| EonError::Config("an output directory is required (--out or out_dir)".into()))
}

fn data_dir(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = flag
        .clone()
        .or_else(|| cfg.data_dir.clone())
        .ok_or_else(|| EonError::Config("a dataset directory is required (--data or data_dir)".into()))?;
    if !dir.join("manifest.json").is_file() {
        return Err(EonError::Config(format!("no dataset manifest in {}", dir.display())));
    }
    Ok(dir)
}

fn load_split(dir: &Path, split: &str) -> Result<Vec<Scene>> {
    DatasetManifest::load(&dir.join("manifest.json"))?.load_split(dir, split, None)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| EonError::parse(path.display().to_string(), e.to_string()))?;
    fs::write(path, bytes).map_err(|e| EonError::io(path, e))
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    }
}

pub fn cmd_gen(args: &CommonArgs) -> Result<i32> {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let out = out_dir(args, &cfg)?;
    prepare_out_dir(&out, args.force)?;
    let manifest = generate_dataset(&cfg.scene, &cfg.splits, &out, workers_from_env())?;
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    let mut total = 0;
    for split in cfg.splits.keys() {
        for scene in manifest.load_split(&out, split, None)? {
            *histogram.entry(scene.gt_boxes.len()).or_default() += 1;
            total += 1;
        }
    }
    println!("generated {total} scenes into {}", out.display());
    for (split, n) in &cfg.splits {
        println!("  split {split}: {n}");
    }
    for (objects, n) in &histogram {
        println!("  {objects} objects: {n} scenes");
    }
    Ok(0)
}

pub fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let cfg = RunConfig::load_or_default(args.common.config.as_deref())?;
    let out = out_dir(&args.common, &cfg)?;
    let data = data_dir(&args.data, &cfg)?;
    let scenes = load_split(&data, &cfg.train_split)?;
    if args.resume {
        if !out.join("checkpoint").join("manifest.json").is_file() {
            return Err(EonError::Config(format!("nothing to resume in {}", out.display())));
        }
    } else {
        prepare_out_dir(&out, args.common.force)?;
    }
    write_json(&out.join("config.json"), &cfg)?;
    let workers = workers_from_env();
    let outcome = match (cfg.detector.precision, args.resume) {
        (Precision::F32, false) => train::<f32>(&cfg.detector, &scenes, &out, workers)?,
        (Precision::F64, false) => train::<f64>(&cfg.detector, &scenes, &out, workers)?,
        (Precision::F32, true) => resume::<f32>(&out, cfg.detector.epochs, &scenes, workers)?,
        (Precision::F64, true) => resume::<f64>(&out, cfg.detector.epochs, &scenes, workers)?,
    };
    if let Some(last) = outcome.log.last() {
        println!("epoch {} total loss {:.6}", last.epoch, last.total);
    }
    println!("checkpoint written to {}", outcome.checkpoint.display());
    Ok(0)
}

fn eval_with<T: Real>(checkpoint: &Path, scenes: &[Scene], thresholds: &[f64], timing_runs: usize) -> Result<(EvalReport, f64)> {
    let (model, _, _) = load_checkpoint::<T>(checkpoint)?;
    let report = evaluate(&model, scenes, thresholds, workers_from_env())?;
    let t = scenes.first().map_or(0.0, |s| median_forward_seconds(&model, s, timing_runs));
    Ok((report, t))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let cfg = RunConfig::load_or_default(args.common.config.as_deref())?;
    let out = out_dir(&args.common, &cfg)?;
    let checkpoint = args
        .checkpoint
        .clone()
        .or_else(|| cfg.checkpoint.clone())
        .ok_or_else(|| EonError::Config("a checkpoint is required (--checkpoint or checkpoint)".into()))?;
    let thresholds = args.thresholds.clone().unwrap_or_else(|| cfg.thresholds.clone());
    validate_thresholds(&thresholds)?;
    let data = data_dir(&args.data, &cfg)?;
    let split = args.split.clone().unwrap_or_else(|| cfg.eval_split.clone());
    let scenes = load_split(&data, &split)?;
    let manifest = read_manifest(&checkpoint)?;
    prepare_out_dir(&out, args.common.force)?;
    let (report, seconds) = match manifest.config.precision {
        Precision::F32 => eval_with::<f32>(&checkpoint, &scenes, &thresholds, cfg.timing_runs)?,
        Precision::F64 => eval_with::<f64>(&checkpoint, &scenes, &thresholds, cfg.timing_runs)?,
    };
    let log_path = checkpoint.parent().map(|p| p.join("train_log.jsonl"));
    let log = match log_path {
        Some(p) if p.is_file() => read_train_log(&p)?,
        _ => Vec::new(),
    };
    write_report(&out, &report, &log)?;
    write_json(
        &out.join("timing.json"),
        &serde_json::json!({ "median_forward_ms": seconds * 1e3, "runs": cfg.timing_runs }),
    )?;
    for t in &report.tables {
        println!("mAP@{} = {:.4}", t.threshold, t.map);
    }
    println!("report written to {}", out.display());
    Ok(0)
}

fn verify_with<T: Real>(model: &Model<T>, scene: &Scene, object_id: usize) -> Result<(ProbeReport, Option<bool>)> {
    let probe = equivariance_probe(model, scene, object_id)?;
    let c = &model.cfg;
    let asserted = matches!(c.variant, Variant::Eon | Variant::FullEon) && c.use_gt_orientation && c.use_gt_segmentation;
    let verdict = (asserted && probe.applicable)
        .then(|| probe.within(&ProbeBounds::for_precision(c.precision == Precision::F64)));
    Ok((probe, verdict))
}

fn print_probe(p: &ProbeReport, verdict: Option<bool>) {
    println!(
        "variant {} N={} object {} isolation: point gap {:.3} (need > {:.3}), vote gap {:.3} (need > {:.3}) -> {}",
        p.variant,
        p.group_order,
        p.object_id,
        p.point_gap,
        p.required_point_gap,
        p.vote_gap,
        p.required_vote_gap,
        if p.applicable { "isolated" } else { "not isolated" }
    );
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3e}"));
    for r in &p.rows {
        println!(
            "  g0={} orbit {} shift {} yaw {:.3e} size {:.3e} center {:.3e} static {:.3e} ({} object / {} static regions)",
            r.g0,
            fmt(r.orbit_residual),
            fmt(r.shift_rate),
            r.yaw_delta,
            r.size_drift,
            r.center_drift,
            r.static_drift,
            r.object_regions,
            r.static_regions
        );
    }
    match verdict {
        Some(true) => println!("bounds hold"),
        Some(false) => println!("bounds violated"),
        None => println!("bounds not asserted for this configuration"),
    }
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<i32> {
    let cfg = RunConfig::load_or_default(args.common.config.as_deref())?;
    let checkpoint = args.checkpoint.clone().or_else(|| cfg.checkpoint.clone());
    if checkpoint.is_none() && !args.random_params {
        return Err(EonError::Config("verify needs --checkpoint or --random-params".into()));
    }
    let scene = match args.scene.clone().or_else(|| cfg.verify.scene.clone()) {
        Some(p) => load_scene(&p, None)?,
        None => generate_scene(&cfg.scene, cfg.verify.scene_seed)?,
    };
    let object_id = args.object.unwrap_or(cfg.verify.object_id);
    let precision = match (&checkpoint, args.random_params) {
        (Some(c), false) => read_manifest(c)?.config.precision,
        _ => cfg.detector.precision,
    };
    let (probe, verdict) = match (precision, args.random_params) {
        (Precision::F32, true) => verify_with(&Model::<f32>::new(&cfg.detector)?, &scene, object_id)?,
        (Precision::F64, true) => verify_with(&Model::<f64>::new(&cfg.detector)?, &scene, object_id)?,
        (Precision::F32, false) => verify_with(&load_checkpoint::<f32>(checkpoint.as_deref().unwrap_or(Path::new("")))?.0, &scene, object_id)?,
        (Precision::F64, false) => verify_with(&load_checkpoint::<f64>(checkpoint.as_deref().unwrap_or(Path::new("")))?.0, &scene, object_id)?,
    };
    print_probe(&probe, verdict);
    if let Some(out) = args.common.out.clone().or_else(|| cfg.out_dir.clone()) {
        prepare_out_dir(&out, args.common.force)?;
        write_json(
            &out.join("verify.json"),
            &serde_json::json!({ "probe": probe, "asserted": verdict.is_some(), "passed": verdict }),
        )?;
    }
    Ok(if verdict == Some(false) { 1 } else { 0 })
}

/// One configuration of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub tag: String,
    pub variant: Variant,
    pub oracle: bool,
    pub group_order: usize,
    pub objaug: bool,
}

/// Ablation grid in emission order; the baseline appears once per ObjAug
/// setting since its group order is always 1.
pub fn ablation_grid(cfg: &RunConfig) -> Vec<AblationRun> {
    let orders = if cfg.ablate.group_orders.is_empty() {
        vec![cfg.detector.group_order]
    } else {
        cfg.ablate.group_orders.clone()
    };
    let mut runs = Vec::new();
    let mut push = |variant: Variant, oracle: bool, n: usize, objaug: bool| {
        let n = if variant == Variant::Baseline { 1 } else { n };
        let tag = format!(
            "{}{}_n{}_objaug_{}",
            variant.name(),
            if oracle { "_oracle" } else { "" },
            n,
            if objaug { "on" } else { "off" }
        );
        if !runs.iter().any(|r: &AblationRun| r.tag == tag) {
            runs.push(AblationRun {
                tag,
                variant,
                oracle,
                group_order: n,
                objaug,
            });
        }
    };
    for &objaug in &cfg.ablate.objaug {
        for &n in &orders {
            for &v in &cfg.ablate.variants {
                push(v, false, n, objaug);
            }
            if cfg.ablate.oracle {
                push(Variant::Eon, true, n, objaug);
            }
        }
    }
    runs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub run: AblationRun,
    pub map_25: Option<f64>,
    pub map_50: Option<f64>,
    pub params: Option<usize>,
    pub median_forward_ms: Option<f64>,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<EvalReport>,
}

pub const ABLATION_HEADER: &str = "variant,N,objaug,mAP@0.25,mAP@0.5,params,median_forward_ms,status";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        let name = if r.run.oracle {
            format!("{}_oracle", r.run.variant.name())
        } else {
            r.run.variant.name().to_string()
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            name,
            r.run.group_order,
            if r.run.objaug { "on" } else { "off" },
            opt(r.map_25),
            opt(r.map_50),
            r.params.map_or_else(String::new, |p| p.to_string()),
            r.median_forward_ms.map_or_else(String::new, |t| format!("{t:.3}")),
            r.status.replace(',', ";")
        );
    }
    out
}

fn ablation_detector(cfg: &RunConfig, run: &AblationRun) -> DetectorConfig {
    DetectorConfig {
        variant: run.variant,
        group_order: run.group_order,
        use_gt_orientation: run.oracle,
        use_gt_segmentation: run.oracle,
        objaug_degrees: if run.objaug { cfg.ablate.objaug_degrees } else { 0.0 },
        ..cfg.detector.clone()
    }
}

fn ablation_one<T: Real>(
    det: &DetectorConfig,
    train_scenes: &[Scene],
    test_scenes: &[Scene],
    thresholds: &[f64],
    dir: &Path,
    timing_runs: usize,
) -> Result<(EvalReport, f64)> {
    let workers = workers_from_env();
    let outcome = train::<T>(det, train_scenes, dir, workers)?;
    let (model, _, _) = load_checkpoint::<T>(&outcome.checkpoint)?;
    let report = evaluate(&model, test_scenes, thresholds, workers)?;
    write_report(&dir.join("report"), &report, &outcome.log)?;
    let t = test_scenes.first().map_or(0.0, |s| median_forward_seconds(&model, s, timing_runs));
    Ok((report, t))
}

/// Trains and evaluates every grid row; a failing row is recorded and the
/// sweep continues.
pub fn run_ablation(cfg: &RunConfig, out: &Path, thresholds: &[f64]) -> Result<Vec<AblationRow>> {
    let mut thr: Vec<f64> = thresholds.to_vec();
    thr.extend([0.25, 0.5]);
    thr.sort_by(f64::total_cmp);
    thr.dedup();
    let runs = ablation_grid(cfg);
    let mut data: BTreeMap<usize, (Vec<Scene>, Vec<Scene>)> = BTreeMap::new();
    let mut rows = Vec::with_capacity(runs.len());
    for run in runs {
        let scene_order = if run.variant == Variant::Baseline {
            cfg.scene.group_order
        } else {
            run.group_order
        };
        #[allow(clippy::map_entry)]
        if !data.contains_key(&scene_order) {
            let scene_cfg = SceneGenConfig {
                group_order: scene_order,
                ..cfg.scene.clone()
            };
            let split = |name: &str, index: u64| -> Result<Vec<Scene>> {
                let n = cfg.splits.get(name).copied().unwrap_or(0);
                let seeds: Vec<u64> = (0..n as u64)
                    .map(|i| crate::scenegen::scene_seed(scene_cfg.seed, index, i))
                    .collect();
                crate::parallel::run_indexed(workers_from_env(), seeds.len(), |i| generate_scene(&scene_cfg, seeds[i]))
                    .into_iter()
                    .collect()
            };
            let names: Vec<&String> = cfg.splits.keys().collect();
            let index_of = |s: &str| names.iter().position(|n| *n == s).unwrap_or(0) as u64;
            let built = (
                split(&cfg.train_split, index_of(&cfg.train_split))?,
                split(&cfg.eval_split, index_of(&cfg.eval_split))?,
            );
            data.insert(scene_order, built);
        }
        let (train_scenes, test_scenes) = &data[&scene_order];
        let det = ablation_detector(cfg, &run);
        let dir = out.join("runs").join(&run.tag);
        let result = fs::create_dir_all(&dir).map_err(|e| EonError::io(&dir, e)).and_then(|_| match det.precision {
            Precision::F32 => ablation_one::<f32>(&det, train_scenes, test_scenes, &thr, &dir, cfg.timing_runs),
            Precision::F64 => ablation_one::<f64>(&det, train_scenes, test_scenes, &thr, &dir, cfg.timing_runs),
        });
        let row = match result {
            Ok((report, seconds)) => AblationRow {
                map_25: report.map_at(0.25),
                map_50: report.map_at(0.5),
                params: Some(report.parameter_count),
                median_forward_ms: Some(seconds * 1e3),
                status: "ok".into(),
                report: Some(report),
                run,
            },
            Err(e) => AblationRow {
                run,
                map_25: None,
                map_50: None,
                params: None,
                median_forward_ms: None,
                status: format!("failed: {e}"),
                report: None,
            },
        };
        println!(
            "{:<28} mAP@0.25 {:>8} mAP@0.5 {:>8} {}",
            row.run.tag,
            row.map_25.map_or("-".into(), |v| format!("{v:.4}")),
            row.map_50.map_or("-".into(), |v| format!("{v:.4}")),
            row.status
        );
        rows.push(row);
    }
    Ok(rows)
}

/// Splits of the same index are generated identically to `gen`.
pub fn cmd_ablate(args: &AblateArgs) -> Result<i32> {
    let cfg = RunConfig::load_or_default(args.common.config.as_deref())?;
    let out = out_dir(&args.common, &cfg)?;
    let thresholds = args.thresholds.clone().unwrap_or_else(|| cfg.thresholds.clone());
    validate_thresholds(&thresholds)?;
    prepare_out_dir(&out, args.common.force)?;
    write_json(&out.join("config.json"), &cfg)?;
    let rows = run_ablation(&cfg, &out, &thresholds)?;
    let csv_path = out.join("ablation.csv");
    fs::write(&csv_path, ablation_csv(&rows)).map_err(|e| EonError::io(&csv_path, e))?;
    write_json(&out.join("ablation.json"), &rows)?;
    println!("ablation table written to {}", csv_path.display());
    Ok(0)
}
