//! Reprojection, Procrustes, prior and smoothness losses and their weighted
//! total. Every term has a plain evaluation on poses and a graph builder
//! used for training; both compute the same value.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{prior_loss, prior_term, DiffusionPrior};
use crate::error::{Error, Result};
use crate::geometry::{centralize, project_orthographic, Joints2D, Joints3D, Rotation};
use crate::nn;
use crate::procrustes::align_to_reference;
use crate::rmnrd::RmnrdDecomposition;
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weights of reprojection, Procrustes, prior and smoothness.
    pub beta: [f64; 4],
    pub lambda_r: f64,
    pub lambda_s: f64,
    pub prior_mc_samples: usize,
    /// Square the per-frame Procrustes distance.
    pub squared_proc: bool,
    /// Treat the noisy pose inside the prior term as a constant.
    pub prior_detach: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: [1.0, 0.5, 0.1, 0.1],
            lambda_r: 1.0,
            lambda_s: 1.0,
            prior_mc_samples: 4,
            squared_proc: false,
            prior_detach: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.beta.iter().enumerate() {
            if !(b.is_finite() && *b >= 0.0) {
                return Err(Error::validation(&format!("beta[{i}]"), "must be finite and >= 0"));
            }
        }
        for (name, v) in [("lambda_r", self.lambda_r), ("lambda_s", self.lambda_s)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(name, "must be finite and >= 0"));
            }
        }
        if self.prior_mc_samples == 0 {
            return Err(Error::validation("prior_mc_samples", "must be at least 1"));
        }
        Ok(())
    }

    pub fn uses_prior(&self) -> bool {
        self.beta[2] > 0.0
    }

    pub fn uses_smoothness(&self) -> bool {
        self.beta[3] > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reproj: f64,
    pub proc: f64,
    pub prior: f64,
    pub smooth: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Fills in `total = ((β₁ r + β₂ p) + β₃ q) + β₄ s`.
    pub fn weighted(reproj: f64, proc: f64, prior: f64, smooth: f64, beta: &[f64; 4]) -> Self {
        let total = ((beta[0] * reproj + beta[1] * proc) + beta[2] * prior) + beta[3] * smooth;
        Self {
            reproj,
            proc,
            prior,
            smooth,
            total,
        }
    }
}

fn check_frames(what: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch(format!("{found} {what} for {expected} frames")));
    }
    Ok(())
}

fn check_joints(shapes: &[Joints3D], p: usize) -> Result<()> {
    if let Some((i, s)) = shapes.iter().enumerate().find(|(_, s)| s.num_joints() != p) {
        return Err(Error::DimensionMismatch(format!(
            "frame {i} has {} joints, expected {p}",
            s.num_joints()
        )));
    }
    Ok(())
}

/// `(1/F) Σ_i ‖Π R_i S_i − W_i‖²_F`.
pub fn reprojection_loss(rotations: &[Rotation], shapes: &[Joints3D], w: &[Joints2D]) -> Result<f64> {
    let f = w.len();
    if f == 0 {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    check_frames("shapes", f, shapes.len())?;
    check_frames("rotations", f, rotations.len())?;
    let mut total = 0.0;
    for ((r, s), wi) in rotations.iter().zip(shapes).zip(w) {
        if s.num_joints() != wi.num_joints() {
            return Err(Error::DimensionMismatch(format!(
                "shape has {} joints, measurement has {}",
                s.num_joints(),
                wi.num_joints()
            )));
        }
        let proj = project_orthographic(r, s);
        total += proj
            .0
            .iter()
            .zip(&wi.0)
            .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
            .sum::<f64>();
    }
    Ok(total / f as f64)
}

/// `(1/F) Σ_i ‖S_i − S*_i‖_F` where `S*_i = R_iᵀ S̄` is the reference
/// carried into the pose of frame `i` by its Procrustes rotation, so each
/// term equals the alignment residual `‖R_i S_i − S̄‖_F` of the centralized
/// shapes. Squared per frame when `squared` is set.
pub fn procrustes_loss(shapes: &[Joints3D], reference: &Joints3D, squared: bool) -> Result<f64> {
    if shapes.is_empty() {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    let aligned = align_to_reference(shapes, reference)?;
    let total: f64 = aligned
        .per_frame_residual
        .iter()
        .map(|d| if squared { d * d } else { *d })
        .sum();
    Ok(total / shapes.len() as f64)
}

/// `Σ_{i≥2} λ_R ‖R_i − R_{i−1}‖²_F + λ_S ‖S_i − S_{i−1}‖²_F`.
pub fn smoothness_loss(rotations: &[Rotation], shapes: &[Joints3D], lambda_r: f64, lambda_s: f64) -> Result<f64> {
    if shapes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "smoothness needs at least 2 frames, got {}",
            shapes.len()
        )));
    }
    check_frames("rotations", shapes.len(), rotations.len())?;
    check_joints(shapes, shapes[0].num_joints())?;
    let mut total = 0.0;
    for i in 1..shapes.len() {
        let (a, b) = (rotations[i].matrix(), rotations[i - 1].matrix());
        let dr: f64 = (0..3)
            .flat_map(|r| (0..3).map(move |c| (r, c)))
            .map(|(r, c)| (a[r][c] - b[r][c]).powi(2))
            .sum();
        let ds = shapes[i].sub(&shapes[i - 1]).squared_norm();
        total += lambda_r * dr + lambda_s * ds;
    }
    Ok(total)
}

/// Camera-frame poses `centralize(R_i S_i)` fed to the prior.
pub fn camera_frame_poses(rotations: &[Rotation], shapes: &[Joints3D]) -> Vec<Joints3D> {
    rotations
        .iter()
        .zip(shapes)
        .map(|(r, s)| centralize(&s.rotated(r)))
        .collect()
}

/// Mean prior loss over frames of the camera-frame poses, each conditioned
/// on its own measurement. Frame `i` uses seed `seed + i`.
pub fn sequence_prior_loss(
    prior: &DiffusionPrior,
    rotations: &[Rotation],
    shapes: &[Joints3D],
    w: &[Joints2D],
    mc_samples: usize,
    seed: u64,
) -> Result<f64> {
    let poses = camera_frame_poses(rotations, shapes);
    let mut total = 0.0;
    for (i, (y0, c)) in poses.iter().zip(w).enumerate() {
        total += prior_loss(prior, y0, c, mc_samples, seed.wrapping_add(i as u64))?;
    }
    Ok(total / w.len() as f64)
}

/// All four terms on a decomposition. Shapes are `reconstruct(decomp, i)`.
/// The prior term is zero (and the prior untouched) when it is absent or
/// its weight is zero; the smoothness term is zero for a single frame with
/// zero weight.
pub fn total_loss(
    decomp: &RmnrdDecomposition,
    w: &[Joints2D],
    prior: Option<&DiffusionPrior>,
    config: &LossConfig,
    seed: u64,
) -> Result<LossBreakdown> {
    config.validate()?;
    let shapes = decomp.shapes();
    let rotations = &decomp.rotations;
    let reproj = reprojection_loss(rotations, &shapes, w)?;
    let proc = procrustes_loss(&shapes, &decomp.reference, config.squared_proc)?;
    let prior_value = match prior {
        Some(p) if config.uses_prior() => {
            sequence_prior_loss(p, rotations, &shapes, w, config.prior_mc_samples, seed)?
        }
        _ => 0.0,
    };
    let smooth = if shapes.len() < 2 && !config.uses_smoothness() {
        0.0
    } else {
        smoothness_loss(rotations, &shapes, config.lambda_r, config.lambda_s)?
    };
    Ok(LossBreakdown::weighted(reproj, proc, prior_value, smooth, &config.beta))
}

/// Graph nodes of the individual terms and the weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub reproj: NodeId,
    pub proc: NodeId,
    pub prior: Option<NodeId>,
    pub smooth: Option<NodeId>,
    pub total: NodeId,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph, beta: &[f64; 4]) -> LossBreakdown {
        let v = |n: Option<NodeId>| n.map_or(0.0, |n| g.value(n).item());
        LossBreakdown::weighted(
            g.value(self.reproj).item(),
            g.value(self.proc).item(),
            v(self.prior),
            v(self.smooth),
            beta,
        )
    }
}

/// Reprojection term on `[F, 3, 3]` rotations and `[F, P, 3]` shapes.
pub fn reprojection_term(g: &mut Graph, rotations: NodeId, shapes: NodeId, w: &[Joints2D]) -> Result<NodeId> {
    let f = w.len();
    let rotated = nn::rotate(g, rotations, shapes)?;
    let proj = nn::project(g, rotated)?;
    let w = g.constant(nn::measurements_tensor(w))?;
    let diff = g.sub(proj, w)?;
    let sq = g.frob_sq(diff)?;
    Ok(g.scale(sq, 1.0 / f as f64)?)
}

/// Procrustes term against a `[P, 3]` or `[1, P, 3]` reference node. The
/// alignment rotations are computed from the current values and enter the
/// graph as constants; since they minimize each frame's residual, that
/// still gives the exact gradient.
pub fn procrustes_term(g: &mut Graph, shapes: NodeId, reference: NodeId, squared: bool) -> Result<NodeId> {
    let rotations = alignment_rotations(g, shapes, reference)?;
    procrustes_term_fixed(g, shapes, reference, &rotations, squared)
}

/// Rotations aligning the current value of `shapes` to `reference`.
pub fn alignment_rotations(g: &Graph, shapes: NodeId, reference: NodeId) -> Result<Vec<Rotation>> {
    let current = nn::shapes_from_tensor(g.value(shapes));
    let reference = Joints3D::from_flat(g.value(reference).data());
    Ok(align_to_reference(&current, &reference)?.rotations)
}

/// Procrustes term with the alignment rotations given as constants.
pub fn procrustes_term_fixed(
    g: &mut Graph,
    shapes: NodeId,
    reference: NodeId,
    rotations: &[Rotation],
    squared: bool,
) -> Result<NodeId> {
    let shape = g.value(shapes).shape().to_vec();
    let (f, p) = (shape[0], shape[1]);
    check_frames("rotations", f, rotations.len())?;
    let rot = g.constant(nn::rotations_tensor(rotations))?;
    let centered = nn::centralize(g, shapes)?;
    let aligned = nn::rotate(g, rot, centered)?;
    let flat_ref = g.reshape(reference, &[p, 3])?;
    let tiled = g.tile(flat_ref, f)?;
    let target = nn::centralize(g, tiled)?;
    let diff = g.sub(aligned, target)?;
    let per_frame = if squared {
        let flat = g.reshape(diff, &[f, p * 3])?;
        let sq = g.mul(flat, flat)?;
        g.sum_last(sq)?
    } else {
        nn::frame_norms(g, diff)?
    };
    let total = g.sum(per_frame)?;
    Ok(g.scale(total, 1.0 / f as f64)?)
}

/// Smoothness term over consecutive frames.
pub fn smoothness_term(g: &mut Graph, rotations: NodeId, shapes: NodeId, lambda_r: f64, lambda_s: f64) -> Result<NodeId> {
    let f = g.value(shapes).shape()[0];
    if f < 2 {
        return Err(Error::InvalidArgument(format!("smoothness needs at least 2 frames, got {f}")));
    }
    let mut parts = Vec::with_capacity(2);
    for (x, lambda) in [(rotations, lambda_r), (shapes, lambda_s)] {
        let next = g.slice(x, 0, 1, f)?;
        let prev = g.slice(x, 0, 0, f - 1)?;
        let d = g.sub(next, prev)?;
        let sq = g.frob_sq(d)?;
        parts.push(g.scale(sq, lambda)?);
    }
    Ok(g.add(parts[0], parts[1])?)
}

/// Builds every enabled term and the weighted total. The prior is only
/// touched when it is present and `β₃ > 0`; smoothness is skipped when
/// `β₄ = 0` and there is a single frame.
#[allow(clippy::too_many_arguments)]
pub fn build_total(
    g: &mut Graph,
    rotations: NodeId,
    shapes: NodeId,
    reference: NodeId,
    w: &[Joints2D],
    prior: Option<&DiffusionPrior>,
    config: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossNodes> {
    let alignment = alignment_rotations(g, shapes, reference)?;
    build_total_aligned(g, rotations, shapes, reference, &alignment, w, prior, config, rng)
}

/// [`build_total`] with the Procrustes alignment rotations supplied.
#[allow(clippy::too_many_arguments)]
pub fn build_total_aligned(
    g: &mut Graph,
    rotations: NodeId,
    shapes: NodeId,
    reference: NodeId,
    alignment: &[Rotation],
    w: &[Joints2D],
    prior: Option<&DiffusionPrior>,
    config: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossNodes> {
    config.validate()?;
    let f = w.len();
    let reproj = reprojection_term(g, rotations, shapes, w)?;
    let proc = procrustes_term_fixed(g, shapes, reference, alignment, config.squared_proc)?;
    let prior = match prior {
        Some(p) if config.uses_prior() => {
            let rotated = nn::rotate(g, rotations, shapes)?;
            let poses = nn::centralize(g, rotated)?;
            Some(prior_term(g, p, poses, w, config.prior_mc_samples, config.prior_detach, rng)?)
        }
        _ => None,
    };
    let smooth = if f < 2 && !config.uses_smoothness() {
        None
    } else {
        Some(smoothness_term(g, rotations, shapes, config.lambda_r, config.lambda_s)?)
    };

    let [b1, b2, b3, b4] = config.beta;
    let r = g.scale(reproj, b1)?;
    let p = g.scale(proc, b2)?;
    let mut total = g.add(r, p)?;
    let zero = g.constant(Tensor::scalar(0.0))?;
    let q = match prior {
        Some(n) => g.scale(n, b3)?,
        None => g.scale(zero, b3)?,
    };
    total = g.add(total, q)?;
    let s = match smooth {
        Some(n) => g.scale(n, b4)?,
        None => g.scale(zero, b4)?,
    };
    total = g.add(total, s)?;
    Ok(LossNodes {
        reproj,
        proc,
        prior,
        smooth,
        total,
    })
}
