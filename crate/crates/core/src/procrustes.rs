//! Sequence-level Procrustean alignment.
//!
//! [`align_to_reference`] rotates every frame onto a fixed reference shape,
//! one independent Kabsch problem per frame. [`generalized_procrustes`]
//! additionally estimates the reference by alternating between those
//! rotations and the mean of the aligned shapes. Shapes related by a pure
//! rotation end up identical after alignment, which is what makes the
//! aligned set transversal.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{centralize, kabsch, Joints3D, PoseSequence, Rotation};

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub aligned: PoseSequence,
    pub rotations: Vec<Rotation>,
    /// `‖aligned[i] − reference‖_F` in millimeters.
    pub per_frame_residual: Vec<f64>,
}

impl AlignmentResult {
    pub fn num_frames(&self) -> usize {
        self.aligned.len()
    }
}

/// Centralizes each frame and the reference, then rotates each frame onto
/// the reference (no scaling).
pub fn align_to_reference(seq: &[Joints3D], reference: &Joints3D) -> Result<AlignmentResult> {
    let p = reference.num_joints();
    if p < 3 {
        return Err(Error::InvalidArgument(format!("alignment needs at least 3 joints, got {p}")));
    }
    if let Some((i, s)) = seq.iter().enumerate().find(|(_, s)| s.num_joints() != p) {
        return Err(Error::DimensionMismatch(format!(
            "frame {i} has {} joints, reference has {p}",
            s.num_joints()
        )));
    }
    let target = centralize(reference);
    let fits: Vec<(Joints3D, Rotation, f64)> = seq
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let source = centralize(s);
            let fit = kabsch(&source, &target, false).map_err(|e| match e {
                Error::Degenerate { .. } => Error::Degenerate { frame: Some(i) },
                other => other,
            })?;
            let aligned = source.rotated(&fit.rotation);
            let residual = aligned.distance(&target);
            Ok((aligned, fit.rotation, residual))
        })
        .collect::<Result<_>>()?;

    let mut result = AlignmentResult {
        aligned: Vec::with_capacity(fits.len()),
        rotations: Vec::with_capacity(fits.len()),
        per_frame_residual: Vec::with_capacity(fits.len()),
    };
    for (a, r, e) in fits {
        result.aligned.push(a);
        result.rotations.push(r);
        result.per_frame_residual.push(e);
    }
    Ok(result)
}

/// Output of [`generalized_procrustes`].
#[derive(Debug, Clone, PartialEq)]
pub struct GpaResult {
    /// Centralized reference shape.
    pub reference: Joints3D,
    pub alignment: AlignmentResult,
    /// `Σ_i ‖R_i S_i − S̄‖²_F` after each alignment pass.
    pub objective: Vec<f64>,
}

pub const DEFAULT_GPA_TOL: f64 = 1e-10;
pub const DEFAULT_GPA_MAX_ITERS: usize = 100;

/// Alternating minimization of `Σ_i ‖R_i S_i − S̄‖²` over the rotations and
/// the reference, starting from the centralized first frame.
pub fn generalized_procrustes(seq: &[Joints3D], tol: f64, max_iters: usize) -> Result<GpaResult> {
    let first = seq
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty sequence".into()))?;
    if max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
    }
    let mut reference = centralize(first);
    let mut objective = Vec::new();
    loop {
        let alignment = align_to_reference(seq, &reference)?;
        let value: f64 = alignment.per_frame_residual.iter().map(|r| r * r).sum();
        let converged = objective.last().is_some_and(|prev: &f64| prev - value < tol);
        objective.push(value);
        if converged || objective.len() >= max_iters {
            return Ok(GpaResult {
                reference,
                alignment,
                objective,
            });
        }
        reference = mean_shape(&alignment.aligned);
    }
}

pub(crate) fn mean_shape(shapes: &[Joints3D]) -> Joints3D {
    let p = shapes[0].num_joints();
    let mut mean = Joints3D::zeros(p);
    for s in shapes {
        for (m, q) in mean.0.iter_mut().zip(&s.0) {
            for k in 0..3 {
                m[k] += q[k];
            }
        }
    }
    let n = shapes.len() as f64;
    mean.0.iter_mut().flatten().for_each(|x| *x /= n);
    mean
}
