//! Command-line front end. Every command writes a `run.json` manifest next
//! to its outputs.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::dataset::{self, InputSpec};
use crate::data::{metrics, pnm, synth, SynthConfig};
use crate::error::{Error, Result};
use crate::explain::{self, ImportanceMatrix, Target};
use crate::grid::{self, build_grid, GridKind, GridSpec, PriorMatrix, PROJECTIONS};
use crate::net::{self, FoldReport, PolarNetModel, TrainConfig};
use crate::polar::{self, CartesianImage, Laterality, PolarParams};

#[derive(Parser, Debug)]
#[command(name = "polarnet", version, about = "FAZ-centred polar transform, multi-branch classifier and region importance")]
pub struct Cli {
    /// Log verbosity (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Resample one image around its FAZ centre.
    Transform(TransformArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// K-fold training.
    Train(TrainArgs),
    /// Score the held-out fold of every checkpoint in a run.
    Eval(EvalArgs),
    /// Region importance matrices and heatmaps for a run.
    Explain(ExplainArgs),
    /// Draw a region grid as an indexed PGM.
    Grid(GridArgs),
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected two comma-separated numbers")?;
    let a: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((a, b))
}

#[derive(Args, Debug, Serialize)]
pub struct TransformArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// FAZ centre `u,v` in pixels.
    #[arg(long, value_parser = parse_pair, required_unless_present = "sidecar")]
    pub center: Option<(f64, f64)>,
    /// JSON with `center` and `laterality`.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    #[arg(long)]
    pub laterality: Option<String>,
    #[arg(long, default_value_t = 224)]
    pub theta: usize,
    #[arg(long, default_value_t = 224)]
    pub r: usize,
    /// Start angle in degrees.
    #[arg(long, default_value_t = 0.0)]
    pub start_angle: f64,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the polar image as a tensor record.
    #[arg(long)]
    pub tensor: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_case: Option<usize>,
    #[arg(long)]
    pub n_control: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub prior: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    /// Folds trained in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub prior: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct ExplainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Class index or `predicted`.
    #[arg(long, default_value = "predicted")]
    pub target: String,
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Ignore any prior recorded in the run.
    #[arg(long)]
    pub no_prior: bool,
    /// Heatmap side in pixels.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct GridArgs {
    #[arg(long, default_value = "etdrs")]
    pub kind: String,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, value_parser = parse_pair)]
    pub center: Option<(f64, f64)>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub started: f64,
    pub finished: f64,
    pub outputs: Vec<PathBuf>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Hex SHA-256 of the canonical JSON of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

struct Run {
    command: &'static str,
    started: f64,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(command: &'static str) -> Self {
        Run { command, started: now(), outputs: Vec::new() }
    }

    fn finish<T: Serialize>(self, path: &Path, config: &T, seed: Option<u64>) -> Result<()> {
        let m = RunManifest {
            command: self.command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config_hash(config)?,
            seed,
            started: self.started,
            finished: now(),
            outputs: self.outputs,
        };
        write_json(path, &m)
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Transform(a) => transform(&a),
        Command::Synth(a) => synth_cmd(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Explain(a) => explain_cmd(&a),
        Command::Grid(a) => grid_cmd(&a),
    }
}

#[derive(Deserialize)]
struct Sidecar {
    center: [f64; 2],
    #[serde(default)]
    laterality: Option<String>,
}

#[derive(Serialize)]
struct PolarSidecar {
    radius: f64,
    start_angle: f64,
    origin: [f64; 2],
    theta_samples: usize,
    r_samples: usize,
    laterality: String,
    mirrored: bool,
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn transform(a: &TransformArgs) -> Result<()> {
    let mut run = Run::new("transform");
    let side: Option<Sidecar> = a.sidecar.as_deref().map(read_json).transpose()?;
    let center = match (a.center, &side) {
        (Some(c), _) => c,
        (None, Some(s)) => (s.center[0], s.center[1]),
        (None, None) => return Err(Error::Config("--center or --sidecar is required".into())),
    };
    let lat_str = a.laterality.clone().or_else(|| side.as_ref().and_then(|s| s.laterality.clone()));
    let laterality: Laterality = match lat_str {
        Some(s) => s.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
        None => Laterality::Unknown,
    };
    if let Some(r) = a.radius {
        if !(r > 0.0) {
            return Err(Error::Config(format!("radius {r} must be positive")));
        }
    }
    let g = pnm::read_pgm(&a.input).map_err(|e| Error::Data(format!("{}: {e}", a.input.display())))?;
    let img = CartesianImage::new(g.width, g.height, 1, g.pixels, center, laterality).map_err(|e| Error::Data(e.to_string()))?;
    let (norm, warned) = polar::normalize_laterality(&img);
    let params = PolarParams { theta_samples: a.theta, r_samples: a.r, start_angle: a.start_angle.to_radians(), radius_override: a.radius };
    let p = polar::to_polar(&norm, &params).map_err(|e| Error::Config(e.to_string()))?;
    pnm::write_pgm_f32(&a.out, p.r_samples, p.theta_samples, &p.pixels)?;
    run.outputs.push(a.out.clone());
    let meta = PolarSidecar {
        radius: p.radius,
        start_angle: p.start_angle,
        origin: [p.origin.0, p.origin.1],
        theta_samples: p.theta_samples,
        r_samples: p.r_samples,
        laterality: laterality.to_string(),
        mirrored: laterality == Laterality::Os && !warned,
    };
    let side_path = with_extension(&a.out, "json");
    write_json(&side_path, &meta)?;
    run.outputs.push(side_path);
    if let Some(tp) = &a.tensor {
        let mut f = std::io::BufWriter::new(std::fs::File::create(tp)?);
        crate::tensor::io::write_record(&mut f, "polar", &p.to_tensor())?;
        std::io::Write::flush(&mut f)?;
        run.outputs.push(tp.clone());
    }
    run.finish(&with_extension(&a.out, "run.json"), a, None)
}

fn synth_cmd(a: &SynthArgs) -> Result<()> {
    let run = Run::new("synth");
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n_case {
        cfg.n_case = n;
    }
    if let Some(n) = a.n_control {
        cfg.n_control = n;
    }
    cfg.validate()?;
    synth::synth_generate(&cfg, &a.out)?;
    let mut run = run;
    run.outputs.push(a.out.join("groundtruth.json"));
    run.finish(&a.out.join("run.json"), &cfg, Some(cfg.seed))
}

fn load_prior_opt(path: Option<&Path>) -> Result<Option<PriorMatrix>> {
    path.map(grid::load_prior).transpose().map_err(|e| match e {
        Error::Io(io) => Error::Config(io.to_string()),
        other => other,
    })
}

fn load_samples(data: &Path, input: &InputSpec) -> Result<(Vec<dataset::Sample>, Vec<usize>)> {
    let subjects = dataset::load_dataset(data)?;
    let labels = subjects.iter().map(|s| s.label).collect();
    Ok((dataset::prepare_samples(&subjects, input)?, labels))
}

#[derive(Serialize, Deserialize)]
struct MetricsFile {
    folds: Vec<FoldReport>,
    summary: Option<net::Summary>,
    subject_summary: Option<net::Summary>,
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut run = Run::new("train");
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(p) = &a.prior {
        cfg.prior_path = Some(p.clone());
    }
    cfg.validate()?;
    let prior = load_prior_opt(cfg.prior_path.as_deref())?;
    let (samples, labels) = load_samples(&a.data, &cfg.input)?;
    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let results = net::cross_validate(&cfg, &samples, &labels, prior.as_ref(), a.jobs.max(1))?;
    let mut reports = Vec::new();
    for (model, report) in results {
        let dir = a.out.join(format!("fold{}", report.fold));
        std::fs::create_dir_all(&dir)?;
        model.save(&dir.join("model.ckpt"))?;
        run.outputs.push(dir.join("model.ckpt"));
        reports.push(report);
    }
    let summary = net::summarize(&reports);
    let subject_summary = net::summarize_subjects(&reports);
    write_json(&a.out.join("metrics.json"), &MetricsFile { folds: reports, summary, subject_summary })?;
    run.outputs.push(a.out.join("metrics.json"));
    run.finish(&a.out.join("run.json"), &cfg, Some(cfg.seed))
}

struct LoadedRun {
    cfg: TrainConfig,
    models: Vec<PolarNetModel>,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let cfg: TrainConfig = read_json(&dir.join("config.json"))?;
    let models =
        (0..cfg.folds).map(|f| PolarNetModel::load(&dir.join(format!("fold{f}")).join("model.ckpt"))).collect::<Result<Vec<_>>>()?;
    Ok(LoadedRun { cfg, models })
}

fn resolve_prior(run: &LoadedRun, explicit: Option<&Path>, none: bool) -> Result<Option<PriorMatrix>> {
    if none {
        return Ok(None);
    }
    load_prior_opt(explicit.or(run.cfg.prior_path.as_deref()))
}

#[derive(Serialize)]
struct EvalFile {
    folds: Vec<Option<metrics::Metrics>>,
    summary: Option<net::Summary>,
    subject_folds: Vec<Option<metrics::Metrics>>,
    subject_summary: Option<net::Summary>,
}

fn eval(a: &EvalArgs) -> Result<()> {
    let mut run = Run::new("eval");
    let lr = load_run(&a.run)?;
    let prior = resolve_prior(&lr, a.prior.as_deref(), false)?;
    let (samples, labels) = load_samples(&a.data, &lr.cfg.input)?;
    let folds = net::sample_folds(&samples, &labels, lr.cfg.folds, lr.cfg.seed)?;
    let mut reports = Vec::new();
    for (f, model) in lr.models.iter().enumerate() {
        let test = &folds[f].1;
        let scores = net::score_samples(model, &samples, test, lr.cfg.batch_size, prior.as_ref())?;
        let y: Vec<usize> = test.iter().map(|&i| samples[i].label).collect();
        let (m, sm) = net::fold_metrics(&samples, test, &scores);
        if let Some(m) = m {
            println!("fold {f}: ACC {:.4} AUROC {:.4} Kappa {:.4}", m.acc, m.auroc, m.kappa);
        } else {
            println!("fold {f}: single-class test fold, metrics undefined");
        }
        reports.push(FoldReport {
            fold: f,
            epochs: Vec::new(),
            test_samples: test.clone(),
            labels: y,
            scores,
            metrics: m,
            subject_metrics: sm,
        });
    }
    let summary = net::summarize(&reports);
    let subject_summary = net::summarize_subjects(&reports);
    if let Some(s) = &subject_summary {
        println!(
            "per subject: ACC {:.4}±{:.4}  AUROC {:.4}±{:.4}  Kappa {:.4}±{:.4}",
            s.acc.0, s.acc.1, s.auroc.0, s.auroc.1, s.kappa.0, s.kappa.1
        );
    }
    match &summary {
        Some(s) => {
            println!("ACC {:.4}±{:.4}  AUROC {:.4}±{:.4}  Kappa {:.4}±{:.4}", s.acc.0, s.acc.1, s.auroc.0, s.auroc.1, s.kappa.0, s.kappa.1)
        }
        None => return Err(Error::Data("no fold had both classes in its test set".into())),
    }
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        write_json(
            &out.join("eval.json"),
            &EvalFile {
                folds: reports.iter().map(|r| r.metrics).collect(),
                summary,
                subject_folds: reports.iter().map(|r| r.subject_metrics).collect(),
                subject_summary,
            },
        )?;
        run.outputs.push(out.join("eval.json"));
        run.finish(&out.join("run.json"), a, Some(lr.cfg.seed))?;
    } else {
        run.finish(&a.run.join("eval.run.json"), a, Some(lr.cfg.seed))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ImportanceFile {
    #[serde(flatten)]
    aggregate: ImportanceMatrix,
    folds: Vec<ImportanceMatrix>,
}

fn explain_cmd(a: &ExplainArgs) -> Result<()> {
    let mut run = Run::new("explain");
    let target: Target = a.target.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    if a.size < 8 {
        return Err(Error::Config(format!("heatmap size {} too small", a.size)));
    }
    let lr = load_run(&a.run)?;
    let prior = resolve_prior(&lr, a.prior.as_deref(), a.no_prior)?;
    let (samples, labels) = load_samples(&a.data, &lr.cfg.input)?;
    let folds = net::sample_folds(&samples, &labels, lr.cfg.folds, lr.cfg.seed)?;
    std::fs::create_dir_all(&a.out)?;
    let mut all = Vec::new();
    let mut per_fold = Vec::new();
    for (f, model) in lr.models.iter().enumerate() {
        let (per, agg) = explain::explain_samples(model, &samples, &folds[f].1, target, prior.as_ref(), lr.cfg.batch_size)?;
        all.extend(per);
        per_fold.push(agg);
    }
    let aggregate = explain::aggregate(&all)?;
    write_json(&a.out.join("importance.json"), &ImportanceFile { aggregate: aggregate.clone(), folds: per_fold })?;
    run.outputs.push(a.out.join("importance.json"));
    let display = aggregate.unit_max();
    for p in PROJECTIONS.iter().filter(|p| display.projections.contains_key(**p)) {
        let center = display.centers.get(*p).copied().unwrap_or(0.0);
        let hm = explain::matrix_to_cartesian(&display.projections[*p], center, a.size, 1.0)?;
        let path = a.out.join(format!("heatmap_{p}.ppm"));
        pnm::write_ppm(&path, hm.width, hm.height, hm.rgb.clone())?;
        run.outputs.push(path);
    }
    let hm = explain::matrix_to_cartesian(&display.global, display.center, a.size, 1.0)?;
    pnm::write_ppm(&a.out.join("heatmap_fusion.ppm"), hm.width, hm.height, hm.rgb.clone())?;
    pnm::write_pgm(&a.out.join("mask.pgm"), hm.width, hm.height, hm.mask_bytes())?;
    run.outputs.push(a.out.join("heatmap_fusion.ppm"));
    run.outputs.push(a.out.join("mask.pgm"));
    run.finish(&a.out.join("run.json"), a, Some(lr.cfg.seed))
}

#[derive(Serialize)]
struct GridFile {
    kind: String,
    radius: f64,
    center: [f64; 2],
    regions: Vec<GridRegion>,
}

#[derive(Serialize)]
struct GridRegion {
    name: String,
    level: u8,
    pixels: usize,
}

fn grid_cmd(a: &GridArgs) -> Result<()> {
    let mut run = Run::new("grid");
    let kind: GridKind = a.kind.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    if a.size < 2 {
        return Err(Error::Config("grid canvas too small".into()));
    }
    let half = a.size as f64 / 2.0;
    let center = a.center.unwrap_or((half, half));
    let radius = a.radius.unwrap_or_else(|| center.0.min(center.1).min(a.size as f64 - center.0).min(a.size as f64 - center.1));
    let mask = build_grid(&GridSpec::for_kind(kind), radius, center, a.size, a.size).map_err(|e| Error::Config(e.to_string()))?;
    let bytes = mask.to_indexed_gray();
    pnm::write_pgm(&a.out, a.size, a.size, bytes)?;
    run.outputs.push(a.out.clone());
    let n = mask.names.len() as f64;
    let info = GridFile {
        kind: kind.name().into(),
        radius,
        center: [center.0, center.1],
        regions: mask
            .names
            .iter()
            .enumerate()
            .map(|(i, name)| GridRegion { name: name.clone(), level: (255.0 * (i as f64 + 1.0) / n).round() as u8, pixels: mask.count(i) })
            .collect(),
    };
    let side = with_extension(&a.out, "json");
    write_json(&side, &info)?;
    run.outputs.push(side);
    run.finish(&with_extension(&a.out, "run.json"), a, None)
}
