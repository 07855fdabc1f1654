//! Conditional denoising diffusion over single-frame 3D poses.
//!
//! The denoiser regresses the clean pose directly (ŷ₀-parameterization)
//! from the noisy pose, the frame's 2D keypoints and a sinusoidal timestep
//! embedding. Poses and conditions are divided by fixed scales estimated
//! from the training set, so the network and the noise live in unit-scale
//! coordinates while every public function takes and returns millimeters.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Joints2D, Joints3D};
use crate::io::{self, Checkpoint, FORMAT_VERSION};
use crate::params::{Adam, AdamConfig, Params};
use crate::tensor::{Graph, NodeId, Tensor};

pub const TIME_EMBED_DIM: usize = 16;
pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.1;
pub const DEFAULT_HIDDEN: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRecord", into = "ScheduleRecord")]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleRecord {
    steps: usize,
    betas: Vec<f64>,
}

impl TryFrom<ScheduleRecord> for NoiseSchedule {
    type Error = Error;

    fn try_from(r: ScheduleRecord) -> Result<Self> {
        if r.steps != r.betas.len() {
            return Err(Error::validation(
                "schedule.steps",
                format!("{} steps but {} betas", r.steps, r.betas.len()),
            ));
        }
        NoiseSchedule::from_betas(r.betas)
    }
}

impl From<NoiseSchedule> for ScheduleRecord {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleRecord {
            steps: s.steps(),
            betas: s.betas,
        }
    }
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::validation("schedule.betas", "at least one step required"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::validation("schedule.betas", format!("{b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Betas spaced linearly from `start` to `end` over `steps` steps.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    start
                } else {
                    start + (end - start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid default")
    }
}

/// `y_t = √ᾱ_t y0 + √(1−ᾱ_t) ε`.
pub fn forward_noise(schedule: &NoiseSchedule, y0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    if y0.len() != eps.len() {
        return Err(Error::DimensionMismatch(format!(
            "pose has {} entries, noise has {}",
            y0.len(),
            eps.len()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(y0.iter().zip(eps).map(|(y, e)| a * y + b * e).collect())
}

pub fn time_embedding(t: usize) -> [f64; TIME_EMBED_DIM] {
    let half = TIME_EMBED_DIM / 2;
    let mut out = [0.0; TIME_EMBED_DIM];
    for k in 0..half {
        let freq = (-(10000f64).ln() * k as f64 / half as f64).exp();
        out[k] = (t as f64 * freq).sin();
        out[half + k] = (t as f64 * freq).cos();
    }
    out
}

/// Two-hidden-layer GELU perceptron `g_ω(y_t, c, t) → ŷ₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    params: Params,
    num_joints: usize,
    hidden: usize,
    pose_scale: f64,
    cond_scale: f64,
    frozen: bool,
}

impl Denoiser {
    /// Gaussian fan-in initialization; biases start at zero.
    pub fn new(num_joints: usize, hidden: usize, pose_scale: f64, cond_scale: f64, seed: u64) -> Result<Self> {
        if num_joints == 0 || hidden == 0 {
            return Err(Error::InvalidArgument("joints and hidden width must be positive".into()));
        }
        if !(pose_scale > 0.0 && cond_scale > 0.0 && pose_scale.is_finite() && cond_scale.is_finite()) {
            return Err(Error::InvalidArgument("normalization scales must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dp, dc) = (3 * num_joints, 2 * num_joints);
        let d_in = dp + dc + TIME_EMBED_DIM;
        let mut params = Params::new();
        params.gaussian("w1", &[d_in, hidden], 1.0 / (d_in as f64).sqrt(), &mut rng);
        params.insert("b1", Tensor::zeros(vec![hidden]));
        params.gaussian("w2", &[hidden, hidden], 1.0 / (hidden as f64).sqrt(), &mut rng);
        params.insert("b2", Tensor::zeros(vec![hidden]));
        params.gaussian("w3", &[hidden, dp], 1.0 / (hidden as f64).sqrt(), &mut rng);
        params.insert("b3", Tensor::zeros(vec![dp]));
        Ok(Self {
            params,
            num_joints,
            hidden,
            pose_scale,
            cond_scale,
            frozen: false,
        })
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn pose_scale(&self) -> f64 {
        self.pose_scale
    }

    pub fn cond_scale(&self) -> f64 {
        self.cond_scale
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> Result<&mut Params> {
        if self.frozen {
            return Err(Error::InvalidArgument("denoiser is frozen".into()));
        }
        Ok(&mut self.params)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn pose_dim(&self) -> usize {
        3 * self.num_joints
    }

    pub fn cond_dim(&self) -> usize {
        2 * self.num_joints
    }

    /// Builds the network on `[N, 3P]` noisy poses, `[N, 2P]` conditions and
    /// `[N, 16]` timestep embeddings, all in normalized units.
    pub fn graph_forward(
        &self,
        g: &mut Graph,
        ids: &HashMap<String, NodeId>,
        y_t: NodeId,
        cond: NodeId,
        temb: NodeId,
    ) -> Result<NodeId> {
        let x = g.concat(&[y_t, cond, temb], 1)?;
        let h = g.linear(x, ids["w1"], ids["b1"])?;
        let h = g.gelu(h)?;
        let h = g.linear(h, ids["w2"], ids["b2"])?;
        let h = g.gelu(h)?;
        Ok(g.linear(h, ids["w3"], ids["b3"])?)
    }

    /// Batched prediction in normalized units; `y_t` is `N x 3P`, `cond`
    /// is `N x 2P`.
    pub fn predict_normalized(&self, y_t: &[f64], cond: &[f64], ts: &[usize]) -> Result<Vec<f64>> {
        let n = ts.len();
        let mut g = Graph::new();
        let ids = self.params.bind_frozen(&mut g)?;
        let y = g.constant(Tensor::new(vec![n, self.pose_dim()], y_t.to_vec())?)?;
        let c = g.constant(Tensor::new(vec![n, self.cond_dim()], cond.to_vec())?)?;
        let e = g.constant(embedding_tensor(ts))?;
        let out = self.graph_forward(&mut g, &ids, y, c, e)?;
        Ok(g.value(out).data().to_vec())
    }
}

fn embedding_tensor(ts: &[usize]) -> Tensor {
    let data = ts.iter().flat_map(|&t| time_embedding(t)).collect();
    Tensor::new(vec![ts.len(), TIME_EMBED_DIM], data).expect("embedding shape")
}

/// Schedule plus denoiser, usable as a loss term once the denoiser is frozen.
#[derive(Debug)]
pub struct DiffusionPrior {
    pub schedule: NoiseSchedule,
    pub denoiser: Denoiser,
    invocations: AtomicUsize,
}

impl Clone for DiffusionPrior {
    fn clone(&self) -> Self {
        Self {
            schedule: self.schedule.clone(),
            denoiser: self.denoiser.clone(),
            invocations: AtomicUsize::new(self.invocations()),
        }
    }
}

impl DiffusionPrior {
    pub fn new(schedule: NoiseSchedule, denoiser: Denoiser) -> Self {
        Self {
            schedule,
            denoiser,
            invocations: AtomicUsize::new(0),
        }
    }

    /// Number of loss evaluations and samples drawn so far.
    pub fn invocations(&self) -> usize {
        self.invocations.load(Ordering::Relaxed)
    }

    fn touch(&self) -> Result<()> {
        if !self.denoiser.is_frozen() {
            return Err(Error::NotFrozen);
        }
        self.invocations.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::save_json(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<PriorHeader> {
        let d = &self.denoiser;
        Checkpoint {
            version: FORMAT_VERSION,
            kind: PRIOR_KIND.into(),
            header: PriorHeader {
                num_joints: d.num_joints,
                hidden: d.hidden,
                pose_scale: d.pose_scale,
                cond_scale: d.cond_scale,
                frozen: d.frozen,
                schedule: self.schedule.clone(),
            },
            params: d.params.to_records(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint<PriorHeader> = Checkpoint::parse(text, PRIOR_KIND)?;
        let h = ck.header;
        let layout = Denoiser::new(h.num_joints, h.hidden, h.pose_scale, h.cond_scale, 0)
            .map_err(|e| Error::validation("header", e.to_string()))?;
        let params = Params::from_records(ck.params, layout.params())?;
        let denoiser = Denoiser {
            params,
            frozen: h.frozen,
            ..layout
        };
        Ok(Self::new(h.schedule, denoiser))
    }
}

const PRIOR_KIND: &str = "diffusion-prior";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorHeader {
    pub num_joints: usize,
    pub hidden: usize,
    pub pose_scale: f64,
    pub cond_scale: f64,
    pub frozen: bool,
    pub schedule: NoiseSchedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            batch_size: 64,
            hidden: DEFAULT_HIDDEN,
            seed: 0,
        }
    }
}

/// Root-mean-square coordinate over a set of flat vectors.
fn rms<'a>(xs: impl Iterator<Item = &'a f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x * x;
        n += 1;
    }
    (s / n.max(1) as f64).sqrt()
}

/// One `(t, ε)` draw per row.
fn draw(schedule: &NoiseSchedule, rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<f64>) {
    let mut ts = Vec::with_capacity(rows);
    let mut eps = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        ts.push(rng.random_range(1..=schedule.steps()));
        eps.extend((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
    }
    (ts, eps)
}

struct Batch {
    y0: Vec<f64>,
    y_t: Vec<f64>,
    cond: Vec<f64>,
    ts: Vec<usize>,
}

fn make_batch(
    schedule: &NoiseSchedule,
    denoiser: &Denoiser,
    data: &[(Vec<f64>, Vec<f64>)],
    idx: &[usize],
    rng: &mut ChaCha8Rng,
) -> Batch {
    let dp = denoiser.pose_dim();
    let (ts, eps) = draw(schedule, idx.len(), dp, rng);
    let mut b = Batch {
        y0: Vec::with_capacity(idx.len() * dp),
        y_t: Vec::with_capacity(idx.len() * dp),
        cond: Vec::with_capacity(idx.len() * denoiser.cond_dim()),
        ts,
    };
    for (k, &i) in idx.iter().enumerate() {
        let (y0, c) = &data[i];
        let ab = schedule.alpha_bar(b.ts[k]);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (j, y) in y0.iter().enumerate() {
            b.y0.push(*y);
            b.y_t.push(sa * y + sb * eps[k * dp + j]);
        }
        b.cond.extend_from_slice(c);
    }
    b
}

/// Builds `‖y0 − g(y_t, c, t)‖²` averaged over rows, in normalized units.
fn batch_loss_graph(denoiser: &Denoiser, b: &Batch, trainable: bool) -> Result<(Graph, NodeId)> {
    let n = b.ts.len();
    let mut g = Graph::new();
    let ids = if trainable {
        denoiser.params.bind(&mut g)?
    } else {
        denoiser.params.bind_frozen(&mut g)?
    };
    let y0 = g.constant(Tensor::new(vec![n, denoiser.pose_dim()], b.y0.clone())?)?;
    let yt = g.constant(Tensor::new(vec![n, denoiser.pose_dim()], b.y_t.clone())?)?;
    let c = g.constant(Tensor::new(vec![n, denoiser.cond_dim()], b.cond.clone())?)?;
    let e = g.constant(embedding_tensor(&b.ts))?;
    let pred = denoiser.graph_forward(&mut g, &ids, yt, c, e)?;
    let diff = g.sub(y0, pred)?;
    let sq = g.frob_sq(diff)?;
    let root = g.scale(sq, 1.0 / n as f64)?;
    Ok((g, root))
}

const EVAL_CHUNK: usize = 512;

/// Trains a fresh denoiser on `(pose, condition)` pairs with the Monte-Carlo
/// denoising objective.
///
/// The returned trace has `epochs + 1` entries: the objective on a fixed set
/// of `(t, ε)` draws (one per sample) at initialization and after each
/// epoch, in normalized units.
pub fn train_denoiser(
    dataset: &[(Joints3D, Joints2D)],
    schedule: &NoiseSchedule,
    config: &DenoiserTrainConfig,
) -> Result<(Denoiser, Vec<f64>)> {
    let (first, _) = dataset
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty training set".into()))?;
    let p = first.num_joints();
    if let Some(i) = dataset
        .iter()
        .position(|(y, c)| y.num_joints() != p || c.num_joints() != p)
    {
        return Err(Error::DimensionMismatch(format!("training pair {i} has a different joint count")));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let pose_scale = rms(dataset.iter().flat_map(|(y, _)| y.0.iter().flatten()));
    let cond_scale = rms(dataset.iter().flat_map(|(_, c)| c.0.iter().flatten()));
    let mut denoiser = Denoiser::new(p, config.hidden, pose_scale, cond_scale, config.seed)?;
    let data: Vec<(Vec<f64>, Vec<f64>)> = dataset
        .iter()
        .map(|(y, c)| {
            (
                y.flat().iter().map(|v| v / pose_scale).collect(),
                c.flat().iter().map(|v| v / cond_scale).collect(),
            )
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let all: Vec<usize> = (0..data.len()).collect();
    let eval_batches: Vec<Batch> = all
        .chunks(EVAL_CHUNK)
        .map(|idx| make_batch(schedule, &denoiser, &data, idx, &mut rng))
        .collect();
    let evaluate = |d: &Denoiser| -> Result<f64> {
        let mut total = 0.0;
        for b in &eval_batches {
            let (g, root) = batch_loss_graph(d, b, false)?;
            total += g.value(root).item() * b.ts.len() as f64;
        }
        Ok(total / data.len() as f64)
    };

    let mut trace = vec![evaluate(&denoiser)?];
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut order = all.clone();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(config.batch_size) {
            let b = make_batch(schedule, &denoiser, &data, idx, &mut rng);
            let (g, root) = batch_loss_graph(&denoiser, &b, true)?;
            if !g.value(root).item().is_finite() {
                return Err(Error::NonFiniteLoss { iteration: epoch });
            }
            let grads = g.backward(root)?;
            adam.step(&mut denoiser.params, &grads);
        }
        let loss = evaluate(&denoiser)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: epoch });
        }
        trace.push(loss);
    }
    Ok((denoiser, trace))
}

fn normalized_condition(d: &Denoiser, c: &Joints2D) -> Result<Vec<f64>> {
    if c.num_joints() != d.num_joints {
        return Err(Error::DimensionMismatch(format!(
            "condition has {} joints, prior expects {}",
            c.num_joints(),
            d.num_joints
        )));
    }
    Ok(c.flat().iter().map(|v| v / d.cond_scale).collect())
}

/// Monte-Carlo estimate of `E_{t,ε} ‖y0 − g(y_t, c, t)‖²` in millimeters².
///
/// Draws are fully determined by `seed`, so two calls with the same seed
/// use identical `(t, ε)` pairs.
pub fn prior_loss(prior: &DiffusionPrior, y0: &Joints3D, c: &Joints2D, mc_samples: usize, seed: u64) -> Result<f64> {
    prior.touch()?;
    let d = &prior.denoiser;
    if y0.num_joints() != d.num_joints {
        return Err(Error::DimensionMismatch(format!(
            "pose has {} joints, prior expects {}",
            y0.num_joints(),
            d.num_joints
        )));
    }
    if mc_samples == 0 {
        return Err(Error::InvalidArgument("mc_samples must be at least 1".into()));
    }
    let cond = normalized_condition(d, c)?;
    let y0n: Vec<f64> = y0.flat().iter().map(|v| v / d.pose_scale).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dp = d.pose_dim();
    let mut total = 0.0;
    let mut remaining = mc_samples;
    while remaining > 0 {
        let n = remaining.min(4096);
        remaining -= n;
        let (ts, eps) = draw(&prior.schedule, n, dp, &mut rng);
        let mut y_t = Vec::with_capacity(n * dp);
        for (k, &t) in ts.iter().enumerate() {
            y_t.extend(forward_noise(&prior.schedule, &y0n, t, &eps[k * dp..(k + 1) * dp])?);
        }
        let conds: Vec<f64> = (0..n).flat_map(|_| cond.iter().copied()).collect();
        let pred = d.predict_normalized(&y_t, &conds, &ts)?;
        for row in pred.chunks(dp) {
            total += row
                .iter()
                .zip(&y0n)
                .map(|(p, y)| {
                    let e = (y - p) * d.pose_scale;
                    e * e
                })
                .sum::<f64>();
        }
    }
    Ok(total / mc_samples as f64)
}

/// [`prior_loss`] with an arbitrary denoiser closure `(y_t, t) → ŷ₀` acting
/// on raw coordinates. Uses the same draws as [`prior_loss`] for a given seed.
pub fn prior_loss_with(
    schedule: &NoiseSchedule,
    y0: &[f64],
    mc_samples: usize,
    seed: u64,
    denoise: impl Fn(&[f64], usize) -> Vec<f64>,
) -> Result<f64> {
    if mc_samples == 0 {
        return Err(Error::InvalidArgument("mc_samples must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..mc_samples {
        let (ts, eps) = draw(schedule, 1, y0.len(), &mut rng);
        let y_t = forward_noise(schedule, y0, ts[0], &eps)?;
        let pred = denoise(&y_t, ts[0]);
        total += y0.iter().zip(&pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / mc_samples as f64)
}

/// Ancestral sampling with an arbitrary `(y_t, t) → ŷ₀` closure, starting
/// from `y_T ~ N(0, I)` of dimension `dim`.
pub fn sample_with(
    schedule: &NoiseSchedule,
    dim: usize,
    seed: u64,
    mut denoise: impl FnMut(&[f64], usize) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    for t in (1..=schedule.steps()).rev() {
        let y0_hat = denoise(&y, t)?;
        if t == 1 {
            // ᾱ_0 = 1 makes the posterior mean exactly ŷ₀.
            return Ok(y0_hat);
        }
        let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t - 1));
        let beta = schedule.beta(t);
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = schedule.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
        y = y0_hat
            .iter()
            .zip(&y)
            .map(|(a, b)| c0 * a + ct * b + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
    }
    Ok(y)
}

/// Draws one pose conditioned on the 2D keypoints `c`.
pub fn sample(prior: &DiffusionPrior, c: &Joints2D, seed: u64) -> Result<Joints3D> {
    prior.touch()?;
    let d = &prior.denoiser;
    let cond = normalized_condition(d, c)?;
    let y = sample_with(&prior.schedule, d.pose_dim(), seed, |y_t, t| {
        d.predict_normalized(y_t, &cond, &[t])
    })?;
    let mm: Vec<f64> = y.iter().map(|v| v * d.pose_scale).collect();
    Ok(Joints3D::from_flat(&mm))
}

/// Differentiable prior term for a `[F, P, 3]` batch of poses (mm) with
/// per-frame conditions: the mean over frames and `mc_samples` draws of
/// `‖y0 − g(y_t, c, t)‖²`. With `detach`, `y_t` is a constant and the
/// gradient only flows through the direct `y0` term.
pub fn prior_term(
    g: &mut Graph,
    prior: &DiffusionPrior,
    poses: NodeId,
    conds: &[Joints2D],
    mc_samples: usize,
    detach: bool,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    prior.touch()?;
    let d = &prior.denoiser;
    let shape = g.value(poses).shape().to_vec();
    let (f, p) = (shape[0], shape[1]);
    if p != d.num_joints || conds.len() != f {
        return Err(Error::DimensionMismatch(format!(
            "{f} poses of {p} joints against {} conditions for a {}-joint prior",
            conds.len(),
            d.num_joints
        )));
    }
    if mc_samples == 0 {
        return Err(Error::InvalidArgument("mc_samples must be at least 1".into()));
    }
    let dp = d.pose_dim();
    let n = f * mc_samples;
    let (ts, eps) = draw(&prior.schedule, n, dp, rng);
    let mut a = Vec::with_capacity(n * dp);
    let mut b = Vec::with_capacity(n * dp);
    for (k, &t) in ts.iter().enumerate() {
        let ab = prior.schedule.alpha_bar(t);
        a.extend(std::iter::repeat_n(ab.sqrt(), dp));
        b.extend(eps[k * dp..(k + 1) * dp].iter().map(|e| (1.0 - ab).sqrt() * e));
    }
    let mut cond = Vec::with_capacity(n * d.cond_dim());
    for _ in 0..mc_samples {
        for c in conds {
            cond.extend(normalized_condition(d, c)?);
        }
    }

    let ids = d.params.bind_frozen(g)?;
    let flat = g.reshape(poses, &[f, dp])?;
    let y0 = g.scale(flat, 1.0 / d.pose_scale)?;
    let rep = g.tile(y0, mc_samples)?;
    let rep = g.reshape(rep, &[n, dp])?;
    let a = g.constant(Tensor::new(vec![n, dp], a)?)?;
    let b = g.constant(Tensor::new(vec![n, dp], b)?)?;
    let y_t = if detach {
        let v: Vec<f64> = g
            .value(rep)
            .data()
            .iter()
            .zip(g.value(a).data())
            .zip(g.value(b).data())
            .map(|((y, a), b)| a * y + b)
            .collect();
        g.constant(Tensor::new(vec![n, dp], v)?)?
    } else {
        let scaled = g.mul(rep, a)?;
        g.add(scaled, b)?
    };
    let c = g.constant(Tensor::new(vec![n, d.cond_dim()], cond)?)?;
    let e = g.constant(embedding_tensor(&ts))?;
    let pred = d.graph_forward(g, &ids, y_t, c, e)?;
    let diff = g.sub(rep, pred)?;
    let sq = g.frob_sq(diff)?;
    Ok(g.scale(sq, d.pose_scale * d.pose_scale / n as f64)?)
}
