use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use nrsfm_core::data::{self, GeneratorParams, SequenceFile, Skeleton};
use nrsfm_core::diffusion::{self, DenoiserTrainConfig, DiffusionPrior, NoiseSchedule};
use nrsfm_core::former::{FormerModel, ModelConfig};
use nrsfm_core::io::write_atomic;
use nrsfm_core::losses::{LossBreakdown, LossConfig};
use nrsfm_core::metrics::{self, EvalOptions};
use nrsfm_core::procrustes::generalized_procrustes;
use nrsfm_core::rmnrd::{self, InitMethod, NormGuard, SolverConfig};
use nrsfm_core::{Error, Joints3D, Result};

const LOG_EVERY: usize = 10;
const TRACE_HEADER: &str = "iteration,reproj,proc,prior,smooth,total";

#[derive(Parser)]
#[command(name = "nrsfm", version, about = "Non-rigid structure from motion toolkit")]
struct Cli {
    /// Worker threads for parallel per-frame work.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene (2D measurements plus ground truth).
    Synth(SynthArgs),
    /// Align every frame of a 3D sequence to a common reference.
    Align(AlignArgs),
    /// Low-rank factorization residual of the measurement matrix for K = 1..max-k.
    Baseline(BaselineArgs),
    /// Fit reference shape, deformations and rotations to 2D measurements.
    Fit(FitArgs),
    /// Train a diffusion pose prior on the synthetic pose family.
    TrainPrior(TrainPriorArgs),
    /// Train the sequence network on synthetic sequences.
    TrainFormer(TrainFormerArgs),
    /// Compare a reconstruction against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SeedArg {
    /// Random seed. Falls back to the config file, then NRSFM_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON config with `joints` and `generator` keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// 17 or 14.
    #[arg(long)]
    joints: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    /// Peak joint swing in radians.
    #[arg(long)]
    amplitude: Option<f64>,
    /// Joint swing frequency in radians per frame.
    #[arg(long)]
    frequency: Option<f64>,
    /// Total camera rotation in radians.
    #[arg(long)]
    camera_sweep: Option<f64>,
    /// 2D noise standard deviation in mm.
    #[arg(long)]
    noise: Option<f64>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct AlignArgs {
    /// 3D sequence, or a scene file (its ground truth is aligned).
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-frame residual CSV.
    #[arg(long)]
    residuals: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Largest rank to report.
    #[arg(long)]
    max_k: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Decomposition JSON. Defaults to `<in stem>.fit.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss trace CSV. Defaults to `<out stem>.trace.csv`.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Frozen prior checkpoint from `train-prior`.
    #[arg(long)]
    prior: Option<PathBuf>,
    /// JSON solver config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    rigid_warmup: Option<usize>,
    #[arg(long, value_parser = parse_init)]
    init: Option<InitMethod>,
    #[arg(long, value_parser = parse_guard)]
    norm_guard: Option<NormGuard>,
    #[command(flatten)]
    loss: LossArgs,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct LossArgs {
    /// Weights of reprojection, Procrustes, prior and smoothness, comma separated.
    #[arg(long, value_delimiter = ',')]
    beta: Option<Vec<f64>>,
    #[arg(long)]
    lambda_r: Option<f64>,
    #[arg(long)]
    lambda_s: Option<f64>,
    /// Monte Carlo draws per frame for the prior term.
    #[arg(long)]
    mc_samples: Option<usize>,
}

#[derive(Args)]
struct TrainPriorArgs {
    /// Prior checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Loss CSV (epoch, loss).
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    joints: Option<usize>,
    /// Training poses drawn from the pose family.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct TrainFormerArgs {
    /// Model checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Loss trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    prior: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    joints: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Synthetic training sequences.
    #[arg(long)]
    sequences: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[command(flatten)]
    loss: LossArgs,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct EvalArgs {
    /// Reconstruction from `fit` (or any 3D sequence).
    #[arg(long)]
    pred: PathBuf,
    /// Scene file from `synth` (or any 3D sequence).
    #[arg(long)]
    gt: PathBuf,
    /// Report JSON. Printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// PCK threshold in mm.
    #[arg(long)]
    pck_threshold: Option<f64>,
    /// Scale-normalize N-MPJPE over the whole sequence instead of per frame.
    #[arg(long)]
    sequence_scale: bool,
}

fn parse_init(s: &str) -> std::result::Result<InitMethod, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| "expected lifted or factorization".into())
}

fn parse_guard(s: &str) -> std::result::Result<NormGuard, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| "expected freeze, floor or off".into())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SynthConfig {
    joints: usize,
    generator: GeneratorParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            joints: 17,
            generator: GeneratorParams::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AlignConfig {
    tol: f64,
    max_iters: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { tol: 1e-10, max_iters: 100 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct BaselineConfig {
    max_k: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { max_k: 6 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PriorConfig {
    joints: usize,
    count: usize,
    amplitude: f64,
    steps: usize,
    train: DenoiserTrainConfig,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            joints: 17,
            count: 4000,
            amplitude: 0.2,
            steps: diffusion::DEFAULT_STEPS,
            train: DenoiserTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FormerConfig {
    model: ModelConfig,
    loss: LossConfig,
    sequences: usize,
    steps: usize,
    lr: f64,
    batch_size: usize,
    generator: GeneratorParams,
}

impl Default for FormerConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            model,
            loss: LossConfig::default(),
            sequences: 32,
            steps: 200,
            lr: 1e-3,
            batch_size: 4,
            generator: GeneratorParams {
                frames: model.frames,
                ..GeneratorParams::default()
            },
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Align(a) => align(a),
        Command::Baseline(a) => baseline(a),
        Command::Fit(a) => fit(a),
        Command::TrainPrior(a) => train_prior(a),
        Command::TrainFormer(a) => train_former(a),
        Command::Eval(a) => eval(a),
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => nrsfm_core::io::load_json(p),
        None => Ok(T::default()),
    }
}

/// Flag, then config file (already in `current`), then NRSFM_SEED.
fn resolve_seed(flag: Option<u64>, from_file: bool, current: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if from_file {
        return Ok(current);
    }
    match std::env::var("NRSFM_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Validation { field: "NRSFM_SEED".into(), message: format!("not an unsigned integer: {v:?}") }),
        Err(_) => Ok(current),
    }
}

/// Whether the JSON config file sets `key` (possibly nested under `section`).
fn file_sets(path: Option<&Path>, section: Option<&str>, key: &str) -> Result<bool> {
    let Some(p) = path else { return Ok(false) };
    let value: serde_json::Value = nrsfm_core::io::load_json(p)?;
    let scope = match section {
        Some(s) => value.get(s),
        None => Some(&value),
    };
    Ok(scope.and_then(|v| v.get(key)).is_some())
}

fn skeleton_for(joints: usize) -> Result<Skeleton> {
    Skeleton::by_joint_count(joints)
        .ok_or_else(|| Error::Validation { field: "joints".into(), message: format!("no skeleton with {joints} joints (use 17 or 14)") })
}

fn apply_loss(loss: &mut LossConfig, a: &LossArgs) -> Result<()> {
    if let Some(b) = &a.beta {
        if b.len() != 4 {
            return Err(Error::Validation { field: "beta".into(), message: format!("expected 4 weights, got {}", b.len()) });
        }
        loss.beta.copy_from_slice(b);
    }
    if let Some(v) = a.lambda_r {
        loss.lambda_r = v;
    }
    if let Some(v) = a.lambda_s {
        loss.lambda_s = v;
    }
    if let Some(v) = a.mc_samples {
        loss.prior_mc_samples = v;
    }
    Ok(())
}

fn load_prior(path: Option<&Path>) -> Result<Option<DiffusionPrior>> {
    path.map(DiffusionPrior::load).transpose()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn trace_csv<'a>(rows: impl Iterator<Item = (usize, &'a LossBreakdown)>) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for (i, b) in rows {
        out.push_str(&format!("{i},{},{},{},{},{}\n", b.reproj, b.proc, b.prior, b.smooth, b.total));
    }
    out
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = load_config(a.config.as_deref())?;
    let seed_in_file = file_sets(a.config.as_deref(), Some("generator"), "seed")?;
    let g = &mut cfg.generator;
    if let Some(v) = a.joints {
        cfg.joints = v;
    }
    if let Some(v) = a.frames {
        g.frames = v;
    }
    if let Some(v) = a.amplitude {
        g.amplitude = v;
    }
    if let Some(v) = a.frequency {
        g.frequency = v;
    }
    if let Some(v) = a.camera_sweep {
        g.camera_sweep = v;
    }
    if let Some(v) = a.noise {
        g.noise_sigma = v;
    }
    g.seed = resolve_seed(a.seed.seed, seed_in_file, g.seed)?;
    g.validate()?;
    let skeleton = skeleton_for(cfg.joints)?;
    let scene = data::generate(&skeleton, &cfg.generator)?;
    SequenceFile::from_scene(&scene).save(&a.out)
}

/// 3D poses of a file: its points when 3D, else its ground truth.
fn poses_of(file: &SequenceFile) -> Result<Vec<Joints3D>> {
    if file.dims == 3 {
        return file.poses();
    }
    file.ground_truth
        .clone()
        .ok_or_else(|| Error::Validation { field: "dims".into(), message: "expected 3D points or ground_truth".into() })
}

fn align(a: AlignArgs) -> Result<()> {
    let mut cfg: AlignConfig = load_config(a.config.as_deref())?;
    if let Some(v) = a.tol {
        cfg.tol = v;
    }
    if let Some(v) = a.max_iters {
        cfg.max_iters = v;
    }
    let seq = poses_of(&SequenceFile::load(&a.input)?)?;
    let gpa = generalized_procrustes(&seq, cfg.tol, cfg.max_iters)?;
    let mut out = SequenceFile::from_poses(&gpa.alignment.aligned);
    out.rotations = Some(gpa.alignment.rotations.iter().map(|r| *r.matrix()).collect());
    out.reference = Some(gpa.reference.clone());
    let mut csv = String::from("frame,residual\n");
    for (i, r) in gpa.alignment.per_frame_residual.iter().enumerate() {
        csv.push_str(&format!("{i},{r}\n"));
    }
    write_text(&a.out, &out.to_json()?)?;
    write_text(&a.residuals, &csv)
}

fn baseline(a: BaselineArgs) -> Result<()> {
    let mut cfg: BaselineConfig = load_config(a.config.as_deref())?;
    if let Some(v) = a.max_k {
        cfg.max_k = v;
    }
    if cfg.max_k == 0 {
        return Err(Error::Validation { field: "max_k".into(), message: "must be at least 1".into() });
    }
    let w = SequenceFile::load(&a.input)?.measurements()?;
    let norm = rmnrd::measurement_matrix(&w).frobenius();
    let limit = cfg.max_k.min(2 * w.len()).min(w.first().map_or(0, |f| f.num_joints()));
    let mut csv = String::from("k,residual,relative_residual\n");
    for k in 1..=limit {
        let fac = rmnrd::low_rank_factorize(&w, k)?;
        let rel = if norm > 0.0 { fac.residual / norm } else { 0.0 };
        csv.push_str(&format!("{k},{},{rel}\n", fac.residual));
    }
    write_text(&a.out, &csv)
}

fn fit(a: FitArgs) -> Result<()> {
    let mut cfg: SolverConfig = load_config(a.config.as_deref())?;
    let seed_in_file = file_sets(a.config.as_deref(), None, "seed")?;
    if let Some(v) = a.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.rigid_warmup {
        cfg.rigid_warmup = v;
    }
    if let Some(v) = a.init {
        cfg.init = v;
    }
    if let Some(v) = a.norm_guard {
        cfg.norm_guard = v;
    }
    apply_loss(&mut cfg.loss, &a.loss)?;
    cfg.seed = resolve_seed(a.seed.seed, seed_in_file, cfg.seed)?;
    cfg.validate()?;
    let prior = load_prior(a.prior.as_deref())?;
    let w = SequenceFile::load(&a.input)?.measurements()?;
    let (decomp, trace) = rmnrd::fit_sequence(&w, prior.as_ref(), &cfg)?;
    let out = a.out.unwrap_or_else(|| with_suffix(&a.input, ".fit.json"));
    let trace_path = a.trace.unwrap_or_else(|| with_suffix(&out, ".trace.csv"));
    let csv = trace_csv(trace.iter().enumerate().filter(|(i, _)| i % LOG_EVERY == 0));
    write_text(&out, &SequenceFile::from_decomposition(&decomp).to_json()?)?;
    write_text(&trace_path, &csv)
}

fn train_prior(a: TrainPriorArgs) -> Result<()> {
    let mut cfg: PriorConfig = load_config(a.config.as_deref())?;
    let seed_in_file = file_sets(a.config.as_deref(), Some("train"), "seed")?;
    if let Some(v) = a.joints {
        cfg.joints = v;
    }
    if let Some(v) = a.count {
        cfg.count = v;
    }
    if let Some(v) = a.amplitude {
        cfg.amplitude = v;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.hidden {
        t.hidden = v;
    }
    t.seed = resolve_seed(a.seed.seed, seed_in_file, t.seed)?;
    if cfg.count == 0 {
        return Err(Error::Validation { field: "count".into(), message: "must be at least 1".into() });
    }
    let schedule = NoiseSchedule::linear(cfg.steps, diffusion::DEFAULT_BETA_START, diffusion::DEFAULT_BETA_END)?;
    let skeleton = skeleton_for(cfg.joints)?;
    let dataset = data::pose_family(&skeleton, cfg.count, cfg.amplitude, cfg.train.seed)?;
    let (mut denoiser, trace) = diffusion::train_denoiser(&dataset, &schedule, &cfg.train)?;
    denoiser.freeze();
    let prior = DiffusionPrior::new(schedule, denoiser);
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in trace.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    prior.save(&a.out)?;
    match a.trace {
        Some(p) => write_text(&p, &csv),
        None => Ok(()),
    }
}

fn train_former(a: TrainFormerArgs) -> Result<()> {
    let mut cfg: FormerConfig = load_config(a.config.as_deref())?;
    let seed_in_file = file_sets(a.config.as_deref(), Some("model"), "seed")?;
    let m = &mut cfg.model;
    for (slot, flag) in [
        (&mut m.frames, a.frames),
        (&mut m.joints, a.joints),
        (&mut m.width, a.width),
        (&mut m.blocks, a.blocks),
        (&mut m.heads, a.heads),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    m.seed = resolve_seed(a.seed.seed, seed_in_file, m.seed)?;
    if let Some(v) = a.sequences {
        cfg.sequences = v;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    apply_loss(&mut cfg.loss, &a.loss)?;
    cfg.model.validate()?;
    cfg.loss.validate()?;
    cfg.generator.frames = cfg.model.frames;
    cfg.generator.validate()?;
    if cfg.sequences == 0 || cfg.batch_size == 0 {
        return Err(Error::Validation { field: "sequences".into(), message: "sequences and batch_size must be at least 1".into() });
    }
    let prior = load_prior(a.prior.as_deref())?;
    let skeleton = skeleton_for(cfg.model.joints)?;
    let sequences = (0..cfg.sequences as u64)
        .map(|i| {
            let params = GeneratorParams {
                seed: cfg.model.seed.wrapping_mul(1_000_003).wrapping_add(i),
                ..cfg.generator
            };
            Ok(data::generate(&skeleton, &params)?.measurements)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = FormerModel::new(cfg.model)?;
    let mut rows = Vec::new();
    for step in 0..cfg.steps {
        let start = (step * cfg.batch_size) % sequences.len();
        let batch: Vec<_> = (0..cfg.batch_size).map(|j| sequences[(start + j) % sequences.len()].clone()).collect();
        let b = model.train_step(&batch, prior.as_ref(), &cfg.loss, cfg.lr)?;
        if step % LOG_EVERY == 0 {
            rows.push((step, b));
        }
    }
    let csv = trace_csv(rows.iter().map(|(i, b)| (*i, b)));
    model.save(&a.out)?;
    match a.trace {
        Some(p) => write_text(&p, &csv),
        None => Ok(()),
    }
}

/// Camera-frame poses of a file: `R_i S_i` when rotations are stored.
fn camera_poses(file: &SequenceFile) -> Result<Vec<Joints3D>> {
    let shapes = poses_of(file)?;
    Ok(match file.rotations() {
        Some(r) if r.len() == shapes.len() => nrsfm_core::losses::camera_frame_poses(&r, &shapes),
        _ => shapes,
    })
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut opts: EvalOptions = load_config(a.config.as_deref())?;
    if let Some(v) = a.pck_threshold {
        opts.pck_threshold = v;
    }
    if a.sequence_scale {
        opts.sequence_scale = true;
    }
    let pred = SequenceFile::load(&a.pred)?;
    let gt = SequenceFile::load(&a.gt)?;
    for (field, p, g) in [("num_joints", pred.num_joints, gt.num_joints), ("num_frames", pred.num_frames, gt.num_frames)] {
        if p != g {
            return Err(Error::Validation {
                field: field.into(),
                message: format!("prediction has {p}, ground truth has {g}"),
            });
        }
    }
    let report = metrics::evaluate(&camera_poses(&pred)?, &camera_poses(&gt)?, &opts)?;
    let json = nrsfm_core::io::to_json(&report)?;
    match a.out {
        Some(p) => write_text(&p, &json),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}
