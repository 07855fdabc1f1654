//! Reference-plus-deformation decomposition of a pose sequence, the direct
//! per-sequence solver, and the classical rank-3K factorization baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionPrior;
use crate::error::{Error, Result};
use crate::geometry::{centralize, Joints2D, Joints3D, PointSet, Rotation};
use crate::linalg::{least_squares, svd, symmetric_eigen, Matrix};
use crate::losses::{build_total, LossBreakdown, LossConfig};
use crate::nn;
use crate::params::{Adam, AdamConfig, Params};
use crate::procrustes::GpaResult;
use crate::tensor::{Graph, Tensor};

/// `S_i = S̄ + δ_i` with per-frame camera rotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmnrdDecomposition {
    pub reference: Joints3D,
    pub deformations: Vec<Joints3D>,
    pub rotations: Vec<Rotation>,
}

impl RmnrdDecomposition {
    pub fn num_frames(&self) -> usize {
        self.deformations.len()
    }

    pub fn num_joints(&self) -> usize {
        self.reference.num_joints()
    }

    pub fn reconstruct(&self, frame: usize) -> Result<Joints3D> {
        let d = self.deformations.get(frame).ok_or(Error::IndexOutOfRange {
            index: frame,
            len: self.deformations.len(),
        })?;
        Ok(self.reference.add(d))
    }

    /// Every reconstructed frame.
    pub fn shapes(&self) -> Vec<Joints3D> {
        self.deformations.iter().map(|d| self.reference.add(d)).collect()
    }

    /// Decomposes an aligned sequence around its Procrustean mean, with the
    /// alignment rotations as the per-frame motion.
    pub fn from_alignment(gpa: &GpaResult) -> Self {
        Self {
            reference: gpa.reference.clone(),
            deformations: gpa.alignment.aligned.iter().map(|s| s.sub(&gpa.reference)).collect(),
            rotations: gpa.alignment.rotations.iter().map(Rotation::transpose).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.num_joints();
        if self.rotations.len() != self.deformations.len() {
            return Err(Error::validation(
                "rotations",
                format!("{} rotations for {} frames", self.rotations.len(), self.deformations.len()),
            ));
        }
        if let Some(i) = self.deformations.iter().position(|d| d.num_joints() != p) {
            return Err(Error::validation(&format!("deformations[{i}]"), format!("expected {p} joints")));
        }
        if !self.reference.is_finite() || self.deformations.iter().any(|d| !d.is_finite()) {
            return Err(Error::validation("deformations", "non-finite value"));
        }
        Ok(())
    }
}

/// Linear shape-basis model `S_i = Σ_k c_ik B_k` with per-frame motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeBasisModel {
    pub bases: Vec<Joints3D>,
    pub coefficients: Vec<Vec<f64>>,
    pub motion: Vec<Rotation>,
}

impl ShapeBasisModel {
    pub fn shape(&self, frame: usize) -> Joints3D {
        let p = self.bases.first().map_or(0, Joints3D::num_joints);
        let mut out = Joints3D::zeros(p);
        for (c, b) in self.coefficients[frame].iter().zip(&self.bases) {
            out = out.add(&b.scaled(*c));
        }
        out
    }

    pub fn measurements(&self) -> Vec<Joints2D> {
        (0..self.coefficients.len())
            .map(|i| crate::geometry::project_orthographic(&self.motion[i], &self.shape(i)))
            .collect()
    }
}

/// Stacks a measurement sequence into the `2F x P` matrix with x and y
/// coordinates of frame `i` in rows `2i` and `2i + 1`.
pub fn measurement_matrix(w: &[Joints2D]) -> Matrix {
    let p = w.first().map_or(0, Joints2D::num_joints);
    Matrix::from_fn(2 * w.len(), p, |r, c| w[r / 2].0[c][r % 2])
}

#[derive(Debug, Clone)]
pub struct LowRankFactorization {
    /// `2F x 3K` motion factor.
    pub motion: Matrix,
    /// `3K x P` shape factor.
    pub basis: Matrix,
    /// `‖W − M B‖_F`.
    pub residual: f64,
    /// Full singular spectrum of `W`.
    pub singular_values: Vec<f64>,
}

/// Rank-`3K` truncated SVD of the stacked measurements, split as
/// `M = U √Σ`, `B = √Σ Vᵀ`. The block-rotation structure of `M` is not
/// enforced.
pub fn low_rank_factorize(w: &[Joints2D], k: usize) -> Result<LowRankFactorization> {
    if w.is_empty() || k == 0 {
        return Err(Error::InvalidArgument("need at least one frame and K >= 1".into()));
    }
    let a = measurement_matrix(w);
    let r = 3 * k;
    let bound = a.rows().min(a.cols());
    if r > bound {
        return Err(Error::InvalidArgument(format!(
            "rank 3K = {r} exceeds min(2F, P) = {bound}"
        )));
    }
    let s = svd(&a);
    let motion = Matrix::from_fn(a.rows(), r, |i, j| s.u[(i, j)] * s.singular_values[j].sqrt());
    let basis = Matrix::from_fn(r, a.cols(), |i, j| s.singular_values[i].sqrt() * s.v[(j, i)]);
    let residual = a.sub(&motion.matmul(&basis)).frobenius();
    Ok(LowRankFactorization {
        motion,
        basis,
        residual,
        singular_values: s.singular_values,
    })
}

/// Rigid rank-3 factorization with the orthographic metric upgrade: finds
/// `Q` so that each frame's two motion rows become orthonormal after `M Q`.
/// Returns the shape `Q⁻¹ B` and the per-frame rotations. Fails when the
/// measurements have rank below 3 (planar or collinear structure).
pub fn rigid_factorization(w: &[Joints2D]) -> Result<(Joints3D, Vec<Rotation>)> {
    let fac = low_rank_factorize(w, 1)?;
    let sv = &fac.singular_values;
    if sv[2] <= 1e-6 * sv[0] {
        return Err(Error::Degenerate { frame: None });
    }
    let m = &fac.motion;
    let coeffs = |a: [f64; 3], b: [f64; 3]| {
        [
            a[0] * b[0],
            a[0] * b[1] + a[1] * b[0],
            a[0] * b[2] + a[2] * b[0],
            a[1] * b[1],
            a[1] * b[2] + a[2] * b[1],
            a[2] * b[2],
        ]
    };
    let f = w.len();
    let mut rows = Vec::with_capacity(3 * f * 6);
    let mut rhs = Vec::with_capacity(3 * f);
    for i in 0..f {
        let a = [m[(2 * i, 0)], m[(2 * i, 1)], m[(2 * i, 2)]];
        let b = [m[(2 * i + 1, 0)], m[(2 * i + 1, 1)], m[(2 * i + 1, 2)]];
        for (x, y, t) in [(a, a, 1.0), (b, b, 1.0), (a, b, 0.0)] {
            rows.extend(coeffs(x, y));
            rhs.push(t);
        }
    }
    let l = least_squares(&Matrix::from_vec(3 * f, 6, rows), &rhs);
    let lm = Matrix::from_vec(3, 3, vec![l[0], l[1], l[2], l[1], l[3], l[4], l[2], l[4], l[5]]);
    let (vals, vecs) = symmetric_eigen(&lm);
    if !(vals[0] > 0.0) {
        return Err(Error::Degenerate { frame: None });
    }
    let vals: Vec<f64> = vals.iter().map(|v| v.max(vals[0] * 1e-8)).collect();
    let q = Matrix::from_fn(3, 3, |r, c| vecs[(r, c)] * vals[c].sqrt());
    let q_inv = Matrix::from_fn(3, 3, |r, c| vecs[(c, r)] / vals[r].sqrt());

    let mq = m.matmul(&q);
    let mut rotations = Vec::with_capacity(f);
    for i in 0..f {
        let r1 = [mq[(2 * i, 0)], mq[(2 * i, 1)], mq[(2 * i, 2)]];
        let r2 = [mq[(2 * i + 1, 0)], mq[(2 * i + 1, 1)], mq[(2 * i + 1, 2)]];
        // Rows r1, r2 are the camera axes; orthonormalize them as columns of
        // Rᵀ and transpose.
        let rt = Rotation::from_six(r1, r2).map_err(|_| Error::Degenerate { frame: Some(i) })?;
        rotations.push(rt.transpose());
    }
    let shape = q_inv.matmul(&fac.basis);
    let p = shape.cols();
    let shape = Joints3D((0..p).map(|j| [shape[(0, j)], shape[(1, j)], shape[(2, j)]]).collect());
    Ok((centralize(&shape), rotations))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMethod {
    /// First frame's keypoints lifted with zero depth, identity rotations
    /// plus small noise.
    Lifted,
    /// Rigid factorization with metric upgrade; falls back to `Lifted` when
    /// the measurements are rank-deficient.
    Factorization,
}

/// What keeps the reference from collapsing towards zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormGuard {
    /// Rescale the reference to its norm at the end of the rigid warmup
    /// after every step.
    Freeze,
    /// Rescale only when the norm drops below that value.
    Floor,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub loss: LossConfig,
    pub seed: u64,
    pub init: InitMethod,
    pub norm_guard: NormGuard,
    /// Standard deviation of the noise added to identity rotations by the
    /// lifted initialization.
    pub rotation_noise: f64,
    /// Leading iterations during which deformations stay at zero.
    pub rigid_warmup: usize,
    /// The learning rate follows a cosine from `learning_rate` down to
    /// `learning_rate · final_lr_fraction`, restarted when deformations
    /// are released. 1 keeps it constant.
    pub final_lr_fraction: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            iterations: 5000,
            loss: LossConfig::default(),
            seed: 0,
            init: InitMethod::Factorization,
            norm_guard: NormGuard::Freeze,
            rotation_noise: 0.01,
            rigid_warmup: 2500,
            final_lr_fraction: 0.01,
        }
    }
}

impl SolverConfig {
    /// Learning rate used for the update at iteration `it`.
    pub fn learning_rate_at(&self, it: usize) -> f64 {
        let warmup = self.rigid_warmup.min(self.iterations);
        let (pos, len) = if it < warmup {
            (it, warmup)
        } else {
            (it - warmup, self.iterations - warmup)
        };
        let progress = if len > 1 { pos as f64 / (len - 1) as f64 } else { 0.0 };
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cosine)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::validation("iterations", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate", "must be positive"));
        }
        if !(self.rotation_noise >= 0.0 && self.rotation_noise.is_finite()) {
            return Err(Error::validation("rotation_noise", "must be >= 0"));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::validation("final_lr_fraction", "must be in (0, 1]"));
        }
        self.loss.validate()
    }
}

/// Optimizer state of [`fit_sequence`] in normalized units: shapes in the
/// graph are `scale · (S̄ + δ_i)` millimeters.
#[derive(Debug, Clone)]
pub struct FitState {
    pub params: Params,
    pub scale: f64,
}

impl FitState {
    /// Parameters that reproduce `decomp` exactly (up to the rotation
    /// parameterization round trip).
    pub fn from_decomposition(decomp: &RmnrdDecomposition, scale: f64) -> Self {
        let f = decomp.num_frames();
        let p = decomp.num_joints();
        let mut params = Params::new();
        let reference: Vec<f64> = decomp.reference.flat().iter().map(|v| v / scale).collect();
        params.insert(REFERENCE, Tensor::new(vec![p, 3], reference).expect("shape"));
        let delta: Vec<f64> = decomp
            .deformations
            .iter()
            .flat_map(|d| d.flat())
            .map(|v| v / scale)
            .collect();
        params.insert(DELTA, Tensor::new(vec![f, p, 3], delta).expect("shape"));
        let six: Vec<f64> = decomp.rotations.iter().flat_map(|r| r.to_six()).collect();
        params.insert(SIX, Tensor::new(vec![f, 6], six).expect("shape"));
        Self { params, scale }
    }

    pub fn decomposition(&self) -> Result<RmnrdDecomposition> {
        let s = self.scale;
        let reference = self.params.get(REFERENCE).expect("reference");
        let delta = self.params.get(DELTA).expect("delta");
        let mut g = Graph::new();
        let six = g.constant(self.params.get(SIX).expect("six").clone())?;
        let rot = nn::rotations_from_six(&mut g, six)?;
        let scaled = |x: &[f64]| Joints3D::from_flat(&x.iter().map(|v| v * s).collect::<Vec<_>>());
        let p = reference.shape()[0];
        Ok(RmnrdDecomposition {
            reference: scaled(reference.data()),
            deformations: delta.data().chunks(3 * p).map(scaled).collect(),
            rotations: nn::rotations_from_tensor(g.value(rot)),
        })
    }

    /// The mirror image of the current state (see [`prefers_mirror`]).
    fn depth_flipped(&self) -> FitState {
        let mut params = self.params.clone();
        for name in [REFERENCE, DELTA] {
            for xyz in params.get_mut(name).expect("shape parameter").data_mut().chunks_mut(3) {
                xyz[2] = -xyz[2];
            }
        }
        for six in params.get_mut(SIX).expect("six").data_mut().chunks_mut(6) {
            six[2] = -six[2];
            six[5] = -six[5];
        }
        FitState {
            params,
            scale: self.scale,
        }
    }

    /// Builds the loss graph at the current parameters and returns the
    /// breakdown with gradients.
    fn evaluate(
        &self,
        w: &[Joints2D],
        prior: Option<&DiffusionPrior>,
        loss: &LossConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<(LossBreakdown, crate::tensor::Gradients)> {
        let mut g = Graph::new();
        let ids = self.params.bind(&mut g)?;
        let rot = nn::rotations_from_six(&mut g, ids[SIX])?;
        let shapes = nn::add_reference(&mut g, ids[REFERENCE], ids[DELTA])?;
        let shapes = g.scale(shapes, self.scale)?;
        let reference = g.scale(ids[REFERENCE], self.scale)?;
        let nodes = build_total(&mut g, rot, shapes, reference, w, prior, loss, rng)?;
        let breakdown = nodes.breakdown(&g, &loss.beta);
        let grads = g.backward(nodes.total)?;
        Ok((breakdown, grads))
    }
}

const REFERENCE: &str = "reference";
const DELTA: &str = "delta";
const SIX: &str = "six";

/// Root-mean-square of the measurement coordinates.
pub fn measurement_scale(w: &[Joints2D]) -> f64 {
    let n: usize = w.iter().map(|x| 2 * x.num_joints()).sum();
    let s: f64 = w.iter().map(Joints2D::squared_norm).sum();
    (s / n.max(1) as f64).sqrt()
}

/// Initial decomposition used by [`fit_sequence`].
pub fn initialize(w: &[Joints2D], config: &SolverConfig) -> Result<RmnrdDecomposition> {
    let f = w.len();
    let p = w[0].num_joints();
    if config.init == InitMethod::Factorization && 3 <= p.min(2 * f) {
        if let Ok((shape, rotations)) = rigid_factorization(w) {
            return Ok(RmnrdDecomposition {
                reference: shape,
                deformations: vec![Joints3D::zeros(p); f],
                rotations,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let first = centralize(&w[0]);
    let reference = Joints3D(first.0.iter().map(|q| [q[0], q[1], 0.0]).collect());
    let mut rotations = Vec::with_capacity(f);
    for _ in 0..f {
        let mut six = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        if config.rotation_noise > 0.0 {
            let noise = Normal::new(0.0, config.rotation_noise).expect("finite sigma");
            six.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
        rotations.push(Rotation::from_six([six[0], six[1], six[2]], [six[3], six[4], six[5]])?);
    }
    Ok(RmnrdDecomposition {
        reference,
        deformations: vec![Joints3D::zeros(p); f],
        rotations,
    })
}

fn check_measurements(w: &[Joints2D]) -> Result<usize> {
    let p = w
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty measurement sequence".into()))?
        .num_joints();
    if p < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 joints, got {p}")));
    }
    if let Some(i) = w.iter().position(|x| x.num_joints() != p) {
        return Err(Error::DimensionMismatch(format!("frame {i} has {} joints, expected {p}", w[i].num_joints())));
    }
    if let Some(i) = w.iter().position(|x| !x.is_finite()) {
        return Err(Error::validation(&format!("points[{i}]"), "non-finite value"));
    }
    Ok(p)
}

/// Minimizes the total loss over `{S̄, δ_i, R_i}` with Adam, starting from
/// [`initialize`]. Returns the final decomposition and the loss breakdown
/// at every iteration (evaluated before that iteration's update).
pub fn fit_sequence(
    w: &[Joints2D],
    prior: Option<&DiffusionPrior>,
    config: &SolverConfig,
) -> Result<(RmnrdDecomposition, Vec<LossBreakdown>)> {
    config.validate()?;
    check_measurements(w)?;
    if w.len() < 2 && config.loss.uses_smoothness() {
        return Err(Error::InvalidArgument("smoothness needs at least 2 frames".into()));
    }
    let init = initialize(w, config)?;
    fit_from(w, prior, config, &init)
}

/// [`fit_sequence`] from an explicit starting decomposition.
pub fn fit_from(
    w: &[Joints2D],
    prior: Option<&DiffusionPrior>,
    config: &SolverConfig,
    init: &RmnrdDecomposition,
) -> Result<(RmnrdDecomposition, Vec<LossBreakdown>)> {
    config.validate()?;
    let p = check_measurements(w)?;
    let w: Vec<Joints2D> = w.iter().map(centralize).collect();
    let w = &w[..];
    init.validate()?;
    if init.num_frames() != w.len() || init.num_joints() != p {
        return Err(Error::DimensionMismatch("initial decomposition does not match the measurements".into()));
    }
    let scale = measurement_scale(w);
    if !(scale > 0.0) {
        return Err(Error::Degenerate { frame: None });
    }
    let mut state = FitState::from_decomposition(init, scale);
    let reference_norm = |params: &Params| params.get(REFERENCE).expect("reference").data().iter().map(|v| v * v).sum::<f64>().sqrt();
    // The guard norm is taken once deformations are released; before that
    // δ is pinned at zero and the reference cannot collapse into it.
    let mut norm0 = reference_norm(&state.params);
    let mut adam = Adam::new(AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut trace = Vec::with_capacity(config.iterations);
    let uses_prior = prior.is_some() && config.loss.uses_prior();
    for it in 0..config.iterations {
        if uses_prior && it == config.rigid_warmup && prefers_mirror(&state, w, prior, &config.loss, &rng)? {
            state = state.depth_flipped();
            adam = Adam::new(adam.config);
        }
        let (breakdown, mut grads) = state.evaluate(w, prior, &config.loss, &mut rng)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        trace.push(breakdown);
        adam.config.lr = config.learning_rate_at(it);
        let rigid = it < config.rigid_warmup;
        if rigid {
            grads.remove(DELTA);
        }
        adam.step(&mut state.params, &grads);
        if rigid {
            project_reference(&mut state.params, norm0, NormGuard::Off);
            norm0 = reference_norm(&state.params);
        } else {
            project_reference(&mut state.params, norm0, config.norm_guard);
        }
    }
    Ok((state.decomposition()?, trace))
}

/// Every loss term except the prior is invariant under the depth flip
/// `S_i → D S_i, R_i → D R_i D` with `D = diag(1, 1, −1)`. Gradient steps
/// cannot cross between the two mirror images, so this picks whichever the
/// total loss prefers, with both evaluated on the same noise draws.
fn prefers_mirror(
    state: &FitState,
    w: &[Joints2D],
    prior: Option<&DiffusionPrior>,
    loss: &LossConfig,
    rng: &ChaCha8Rng,
) -> Result<bool> {
    let (kept, _) = state.evaluate(w, prior, loss, &mut rng.clone())?;
    let (other, _) = state.depth_flipped().evaluate(w, prior, loss, &mut rng.clone())?;
    Ok(other.total < kept.total)
}

/// Re-centers the reference and applies the norm guard.
fn project_reference(params: &mut Params, norm0: f64, guard: NormGuard) {
    let t = params.get_mut(REFERENCE).expect("reference");
    let shape = Joints3D::from_flat(t.data());
    let centered = shape.centralized();
    let norm = centered.frobenius();
    let factor = match guard {
        NormGuard::Freeze if norm > 0.0 => norm0 / norm,
        NormGuard::Floor if norm > 0.0 && norm < norm0 => norm0 / norm,
        _ => 1.0,
    };
    for (dst, src) in t.data_mut().iter_mut().zip(centered.flat()) {
        *dst = src * factor;
    }
}
