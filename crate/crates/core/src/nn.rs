//! Graph-level building blocks shared by the solver, the losses and the
//! networks. Pose batches are `[F, P, 3]` tensors with joints as rows;
//! rotation batches are `[F, 3, 3]`.

use crate::error::Result;
use crate::geometry::{Joints2D, Joints3D, Rotation};
use crate::tensor::{Graph, NodeId, Tensor};

pub fn shapes_tensor(seq: &[Joints3D]) -> Tensor {
    let p = seq.first().map_or(0, Joints3D::num_joints);
    let data = seq.iter().flat_map(|s| s.0.iter().flatten().copied()).collect();
    Tensor::new(vec![seq.len(), p, 3], data).expect("uniform joint count")
}

pub fn measurements_tensor(w: &[Joints2D]) -> Tensor {
    let p = w.first().map_or(0, Joints2D::num_joints);
    let data = w.iter().flat_map(|s| s.0.iter().flatten().copied()).collect();
    Tensor::new(vec![w.len(), p, 2], data).expect("uniform joint count")
}

pub fn rotations_tensor(rotations: &[Rotation]) -> Tensor {
    let data = rotations.iter().flat_map(|r| r.matrix().iter().flatten().copied()).collect();
    Tensor::new(vec![rotations.len(), 3, 3], data).expect("3x3 blocks")
}

/// Splits a `[F, P, 3]` tensor back into poses.
pub fn shapes_from_tensor(t: &Tensor) -> Vec<Joints3D> {
    let (f, p) = (t.shape()[0], t.shape()[1]);
    (0..f)
        .map(|i| Joints3D::from_flat(&t.data()[i * p * 3..(i + 1) * p * 3]))
        .collect()
}

/// Reads a `[F, 3, 3]` tensor of proper rotations.
pub fn rotations_from_tensor(t: &Tensor) -> Vec<Rotation> {
    t.data()
        .chunks(9)
        .map(|c| Rotation::new_unchecked([[c[0], c[1], c[2]], [c[3], c[4], c[5]], [c[6], c[7], c[8]]]))
        .collect()
}

fn normalize_rows(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let sq = g.mul(x, x)?;
    let n2 = g.sum_last(sq)?;
    let inv = g.rsqrt(n2)?;
    let k = *g.value(x).shape().last().expect("rank >= 1");
    let inv = g.expand_last(inv, k)?;
    Ok(g.mul(x, inv)?)
}

/// Gram–Schmidt on the two 3-vectors stored in each row of a `[F, 6]`
/// tensor. Column 1 is the normalized first vector, column 2 the normalized
/// remainder of the second, column 3 their cross product.
pub fn rotations_from_six(g: &mut Graph, six: NodeId) -> Result<NodeId> {
    let f = g.value(six).shape()[0];
    let a = g.slice(six, 1, 0, 3)?;
    let b = g.slice(six, 1, 3, 6)?;
    let e1 = normalize_rows(g, a)?;
    let eb = g.mul(e1, b)?;
    let d = g.sum_last(eb)?;
    let d = g.expand_last(d, 3)?;
    let proj = g.mul(d, e1)?;
    let u = g.sub(b, proj)?;
    let e2 = normalize_rows(g, u)?;
    let e3 = cross_rows(g, e1, e2)?;
    // Rows of the concatenation are the columns of R.
    let cols = g.concat(&[e1, e2, e3], 1)?;
    let cols = g.reshape(cols, &[f, 3, 3])?;
    Ok(g.permute(cols, &[0, 2, 1])?)
}

fn cross_rows(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let mut ac = Vec::with_capacity(3);
    let mut bc = Vec::with_capacity(3);
    for k in 0..3 {
        ac.push(g.slice(a, 1, k, k + 1)?);
        bc.push(g.slice(b, 1, k, k + 1)?);
    }
    let mut out = Vec::with_capacity(3);
    for k in 0..3 {
        let (i, j) = ((k + 1) % 3, (k + 2) % 3);
        let l = g.mul(ac[i], bc[j])?;
        let r = g.mul(ac[j], bc[i])?;
        out.push(g.sub(l, r)?);
    }
    Ok(g.concat(&out, 1)?)
}

/// Applies `R_i` to every joint of frame `i`: `S_i R_iᵀ` in row layout.
pub fn rotate(g: &mut Graph, rotations: NodeId, shapes: NodeId) -> Result<NodeId> {
    let rt = g.permute(rotations, &[0, 2, 1])?;
    Ok(g.matmul(shapes, rt)?)
}

/// Orthographic projection of row-layout poses: keeps x and y.
pub fn project(g: &mut Graph, shapes: NodeId) -> Result<NodeId> {
    Ok(g.slice(shapes, 2, 0, 2)?)
}

/// Subtracts the per-frame joint mean from a `[F, P, 3]` tensor.
pub fn centralize(g: &mut Graph, shapes: NodeId) -> Result<NodeId> {
    let p = g.value(shapes).shape()[1];
    let cols = g.permute(shapes, &[0, 2, 1])?;
    let sums = g.sum_last(cols)?;
    let means = g.scale(sums, 1.0 / p as f64)?;
    let means = g.expand_last(means, p)?;
    let means = g.permute(means, &[0, 2, 1])?;
    Ok(g.sub(shapes, means)?)
}

/// Per-frame Frobenius norms of a `[F, ...]` tensor, as a `[F]` tensor.
pub fn frame_norms(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    let rest: usize = shape[1..].iter().product();
    let flat = g.reshape(x, &[shape[0], rest])?;
    let sq = g.mul(flat, flat)?;
    let n2 = g.sum_last(sq)?;
    Ok(g.sqrt(n2)?)
}

/// Adds a `[P, 3]` reference to every frame of a `[F, P, 3]` batch.
pub fn add_reference(g: &mut Graph, reference: NodeId, deformations: NodeId) -> Result<NodeId> {
    let f = g.value(deformations).shape()[0];
    let tiled = g.tile(reference, f)?;
    Ok(g.add(tiled, deformations)?)
}
