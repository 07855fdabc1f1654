//! Joint sets, rotations, orthographic projection and the single-pair
//! orthogonal Procrustes (Kabsch) solve.
//!
//! Shapes are stored point-major: a `P x 3` array of joints in millimeters.
//! A rotation acts on column vectors, so the rotated shape has rows `R p_j`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{det3, svd, Matrix};

pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Joints3D(pub Vec<[f64; 3]>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Joints2D(pub Vec<[f64; 2]>);

/// `F` frames of 3D joint sets.
pub type PoseSequence = Vec<Joints3D>;
/// `F` frames of 2D keypoints, frame-major.
pub type MeasurementSequence = Vec<Joints2D>;

/// Shared behaviour of 2D and 3D point sets.
pub trait PointSet: Clone {
    fn len(&self) -> usize;
    fn centroid(&self) -> Vec<f64>;
    fn translated(&self, offset: &[f64]) -> Self;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Subtracts the centroid from every point.
    fn centralized(&self) -> Self {
        let c: Vec<f64> = self.centroid().iter().map(|x| -x).collect();
        self.translated(&c)
    }
}

macro_rules! point_set {
    ($ty:ty, $d:expr) => {
        impl PointSet for $ty {
            fn len(&self) -> usize {
                self.0.len()
            }

            fn centroid(&self) -> Vec<f64> {
                let mut c = vec![0.0; $d];
                if self.0.is_empty() {
                    return c;
                }
                for p in &self.0 {
                    for k in 0..$d {
                        c[k] += p[k];
                    }
                }
                let n = self.0.len() as f64;
                c.iter_mut().for_each(|x| *x /= n);
                c
            }

            fn translated(&self, offset: &[f64]) -> Self {
                Self(
                    self.0
                        .iter()
                        .map(|p| {
                            let mut q = *p;
                            for k in 0..$d {
                                q[k] += offset[k];
                            }
                            q
                        })
                        .collect(),
                )
            }
        }
    };
}

point_set!(Joints3D, 3);
point_set!(Joints2D, 2);

/// Removes the mean from a shape.
pub fn centralize<T: PointSet>(shape: &T) -> T {
    shape.centralized()
}

impl Joints3D {
    pub fn zeros(p: usize) -> Self {
        Self(vec![[0.0; 3]; p])
    }

    pub fn num_joints(&self) -> usize {
        self.0.len()
    }

    pub fn frobenius(&self) -> f64 {
        self.squared_norm().sqrt()
    }

    pub fn squared_norm(&self) -> f64 {
        self.0.iter().flatten().map(|x| x * x).sum()
    }

    /// Frobenius distance to another shape with the same joint count.
    pub fn distance(&self, other: &Joints3D) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).powi(2)))
            .sum::<f64>()
            .sqrt()
    }

    pub fn rotated(&self, r: &Rotation) -> Joints3D {
        Joints3D(self.0.iter().map(|p| r.apply(p)).collect())
    }

    pub fn scaled(&self, s: f64) -> Joints3D {
        Joints3D(self.0.iter().map(|p| [s * p[0], s * p[1], s * p[2]]).collect())
    }

    pub fn add(&self, other: &Joints3D) -> Joints3D {
        Joints3D(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| [a[0] + b[0], a[1] + b[1], a[2] + b[2]])
                .collect(),
        )
    }

    pub fn sub(&self, other: &Joints3D) -> Joints3D {
        Joints3D(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| [a[0] - b[0], a[1] - b[1], a[2] - b[2]])
                .collect(),
        )
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }

    pub fn from_flat(data: &[f64]) -> Joints3D {
        Joints3D(data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }
}

impl Joints2D {
    pub fn num_joints(&self) -> usize {
        self.0.len()
    }

    pub fn squared_norm(&self) -> f64 {
        self.0.iter().flatten().map(|x| x * x).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }
}

/// Proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Mat3", into = "Mat3")]
pub struct Rotation(Mat3);

/// Tolerance for `RᵀR = I` and `det R = 1`.
pub const ROTATION_TOL: f64 = 1e-9;

impl TryFrom<Mat3> for Rotation {
    type Error = Error;

    fn try_from(m: Mat3) -> Result<Self> {
        Rotation::from_matrix(m)
    }
}

impl From<Rotation> for Mat3 {
    fn from(r: Rotation) -> Mat3 {
        r.0
    }
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// Validates orthonormality and a positive determinant.
    pub fn from_matrix(m: Mat3) -> Result<Self> {
        if !m.iter().flatten().all(|x| x.is_finite()) {
            return Err(Error::InvalidArgument("rotation has non-finite entries".into()));
        }
        let r = Rotation(m);
        let rtr = mat_mul(&transpose(&m), &m);
        for (i, row) in rtr.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let expected = if i == j { 1.0 } else { 0.0 };
                if (v - expected).abs() > ROTATION_TOL {
                    return Err(Error::InvalidArgument(format!(
                        "matrix is not orthonormal: (RᵀR)[{i}][{j}] = {v}"
                    )));
                }
            }
        }
        let d = det3(&m);
        if (d - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidArgument(format!("rotation determinant is {d}")));
        }
        Ok(r)
    }

    pub(crate) fn new_unchecked(m: Mat3) -> Self {
        Rotation(m)
    }

    /// Rodrigues' formula for a rotation of `angle` radians about `axis`.
    pub fn about_axis(axis: [f64; 3], angle: f64) -> Self {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n == 0.0 {
            return Self::IDENTITY;
        }
        let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        Rotation([
            [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
            [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
            [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
        ])
    }

    /// Orthonormalizes two 3-vectors (Gram–Schmidt) into the first two
    /// columns; the third is their cross product.
    pub fn from_six(a: [f64; 3], b: [f64; 3]) -> Result<Self> {
        let na = norm(&a);
        if !(na > 0.0) {
            return Err(Error::Degenerate { frame: None });
        }
        let e1 = [a[0] / na, a[1] / na, a[2] / na];
        let d = dot(&e1, &b);
        let u = [b[0] - d * e1[0], b[1] - d * e1[1], b[2] - d * e1[2]];
        let nu = norm(&u);
        if !(nu > 0.0) {
            return Err(Error::Degenerate { frame: None });
        }
        let e2 = [u[0] / nu, u[1] / nu, u[2] / nu];
        let e3 = cross(&e1, &e2);
        Ok(Rotation([
            [e1[0], e2[0], e3[0]],
            [e1[1], e2[1], e3[1]],
            [e1[2], e2[2], e3[2]],
        ]))
    }

    /// First two columns, the inverse of [`Rotation::from_six`].
    pub fn to_six(&self) -> [f64; 6] {
        let m = &self.0;
        [m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]]
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(transpose(&self.0))
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(mat_mul(&self.0, &other.0))
    }

    pub fn apply(&self, p: &[f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
        ]
    }

    /// Geodesic angle between two rotations.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        let rel = mat_mul(&transpose(&self.0), &other.0);
        let tr = rel[0][0] + rel[1][1] + rel[2][2];
        ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Largest entrywise difference.
    pub fn max_abs_diff(&self, other: &Rotation) -> f64 {
        self.0
            .iter()
            .flatten()
            .zip(other.0.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// The orthographic selector `Π = [1 0 0; 0 1 0]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Projection;

impl Projection {
    pub const MATRIX: [[f64; 3]; 2] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];

    pub fn apply(&self, p: &[f64; 3]) -> [f64; 2] {
        [p[0], p[1]]
    }
}

/// `Π R S`, returned point-major (`P x 2`).
pub fn project_orthographic(rot: &Rotation, shape: &Joints3D) -> Joints2D {
    Joints2D(shape.0.iter().map(|p| Projection.apply(&rot.apply(p))).collect())
}

/// Result of [`kabsch`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KabschFit {
    pub rotation: Rotation,
    pub scale: f64,
    /// `‖s R source − target‖_F` at the optimum.
    pub residual: f64,
}

/// Relative threshold on the second singular value of the source below which
/// it is treated as collinear.
pub const DEGENERACY_RATIO: f64 = 1e-9;

/// Rotation (and optional isotropic scale) minimizing `‖s R source − target‖_F`
/// for centralized shapes. Reflections are excluded by flipping the least
/// significant singular direction when needed.
pub fn kabsch(source: &Joints3D, target: &Joints3D, with_scale: bool) -> Result<KabschFit> {
    let p = source.num_joints();
    if p != target.num_joints() {
        return Err(Error::DimensionMismatch(format!(
            "source has {p} joints, target has {}",
            target.num_joints()
        )));
    }
    if p < 3 {
        return Err(Error::InvalidArgument(format!("alignment needs at least 3 joints, got {p}")));
    }
    if !source.is_finite() || !target.is_finite() {
        return Err(Error::InvalidArgument("non-finite joint coordinates".into()));
    }

    // Rank test on the source's scatter matrix (eigenvalues are σ²).
    let mut scatter = Matrix::zeros(3, 3);
    let mut cross_cov = Matrix::zeros(3, 3);
    for (x, y) in source.0.iter().zip(&target.0) {
        for r in 0..3 {
            for c in 0..3 {
                scatter[(r, c)] += x[r] * x[c];
                cross_cov[(r, c)] += x[r] * y[c];
            }
        }
    }
    let sv = svd(&scatter).singular_values;
    if !(sv[0] > 0.0) || sv[1].sqrt() < DEGENERACY_RATIO * sv[0].sqrt() {
        return Err(Error::Degenerate { frame: None });
    }

    // H = Σ x yᵀ = U Σ Vᵀ; the optimum is R = V D Uᵀ.
    let dec = svd(&cross_cov);
    let (u, v) = (&dec.u, &dec.v);
    let vut = mat_from(&v.matmul(&u.transpose()));
    let sign = if det3(&vut) < 0.0 { -1.0 } else { 1.0 };
    let mut r = [[0.0; 3]; 3];
    for (i, row) in r.iter_mut().enumerate() {
        for (j, val) in row.iter_mut().enumerate() {
            *val = v[(i, 0)] * u[(j, 0)] + v[(i, 1)] * u[(j, 1)] + sign * v[(i, 2)] * u[(j, 2)];
        }
    }
    let rotation = Rotation(r);

    let scale = if with_scale {
        let sigma = &dec.singular_values;
        let trace = sigma[0] + sigma[1] + sign * sigma[2];
        trace / source.squared_norm()
    } else {
        1.0
    };
    let residual = source.rotated(&rotation).scaled(scale).distance(target);
    Ok(KabschFit {
        rotation,
        scale,
        residual,
    })
}

pub(crate) fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub(crate) fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

fn mat_from(m: &Matrix) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = m[(i, j)];
        }
    }
    out
}

pub(crate) fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: &[f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Uniformly distributed random rotation (normalized Gaussian quaternion).
pub fn random_rotation<R: rand::Rng + ?Sized>(rng: &mut R) -> Rotation {
    use rand_distr::{Distribution, StandardNormal};
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    Rotation([
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ])
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_shape(rng: &mut ChaCha8Rng, p: usize) -> Joints3D {
        Joints3D((0..p).map(|_| std::array::from_fn(|_| rng.random_range(-500.0..500.0))).collect())
    }

    #[test]
    fn centralize_two_points() {
        let s = Joints3D(vec![[1.0, 1.0, 1.0], [3.0, 3.0, 3.0]]);
        assert_eq!(centralize(&s), Joints3D(vec![[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]));
    }

    #[test]
    fn centralized_mean_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = centralize(&random_shape(&mut rng, 17));
        assert!(c.centroid().iter().all(|x| x.abs() < 1e-12));
        let w = Joints2D(vec![[1.0, 2.0], [5.0, -4.0], [0.5, 0.25]]);
        assert!(centralize(&w).centroid().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn identity_projection_drops_depth() {
        let s = Joints3D(vec![[1.0, 2.0, 3.0], [-4.0, 5.0, -6.0]]);
        let w = project_orthographic(&Rotation::IDENTITY, &s);
        assert_eq!(w, Joints2D(vec![[1.0, 2.0], [-4.0, 5.0]]));
    }

    #[test]
    fn quarter_turn_about_z_projects_x_to_y() {
        let r = Rotation::about_axis([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let w = project_orthographic(&r, &Joints3D(vec![[1.0, 0.0, 0.0]]));
        assert!((w.0[0][0] - 0.0).abs() < 1e-15 && (w.0[0][1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn in_plane_rotation_preserves_projected_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_shape(&mut rng, 10);
        let r = Rotation::about_axis([0.0, 0.0, 1.0], 0.7);
        let w = project_orthographic(&r, &s);
        for (p, q) in s.0.iter().zip(&w.0) {
            let before = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let after = (q[0] * q[0] + q[1] * q[1]).sqrt();
            assert!((before - after).abs() < 1e-9);
        }
    }

    #[test]
    fn kabsch_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = centralize(&random_shape(&mut rng, 8));
        let fit = kabsch(&s, &s, false).unwrap();
        assert!(fit.rotation.max_abs_diff(&Rotation::IDENTITY) < 1e-9);
        assert!(fit.residual < 1e-9);
        assert_eq!(fit.scale, 1.0);
    }

    #[test]
    fn kabsch_recovers_quarter_turn() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = centralize(&random_shape(&mut rng, 8));
        let rz = Rotation::about_axis([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let fit = kabsch(&s, &s.rotated(&rz), false).unwrap();
        assert!(fit.rotation.max_abs_diff(&rz) < 1e-9);
    }

    #[test]
    fn kabsch_with_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = centralize(&random_shape(&mut rng, 8));
        let r = random_rotation(&mut rng);
        let fit = kabsch(&s, &s.rotated(&r).scaled(0.37), true).unwrap();
        assert!((fit.scale - 0.37).abs() < 1e-12);
        assert!(fit.residual < 1e-9);
    }

    #[test]
    fn mirrored_target_keeps_proper_rotation() {
        // Oracle: a coarse-to-fine search over proper rotations never reaches
        // zero residual against a mirrored, non-planar shape.
        let s = centralize(&Joints3D(vec![
            [0.0, 0.0, 0.0],
            [100.0, 0.0, 0.0],
            [0.0, 200.0, 0.0],
            [0.0, 0.0, 300.0],
            [50.0, 70.0, -40.0],
        ]));
        let mirrored = Joints3D(s.0.iter().map(|p| [p[0], p[1], -p[2]]).collect());
        let fit = kabsch(&s, &mirrored, false).unwrap();
        assert!((det3(fit.rotation.matrix()) - 1.0).abs() < 1e-9);
        assert!(fit.residual > 1.0);

        let mut best = f64::INFINITY;
        let steps = 24;
        for i in 0..steps {
            for j in 0..steps {
                for k in 0..steps {
                    let tau = std::f64::consts::TAU;
                    let r = Rotation::about_axis([0.0, 0.0, 1.0], tau * i as f64 / steps as f64)
                        .compose(&Rotation::about_axis([0.0, 1.0, 0.0], tau * j as f64 / steps as f64))
                        .compose(&Rotation::about_axis([1.0, 0.0, 0.0], tau * k as f64 / steps as f64));
                    best = best.min(s.rotated(&r).distance(&mirrored));
                }
            }
        }
        assert!(best > 1.0, "grid search found residual {best}");
        // The SVD optimum is at least as good as any grid point.
        assert!(fit.residual <= best + 1e-9);
    }

    #[test]
    fn collinear_source_is_degenerate() {
        let s = centralize(&Joints3D((0..5).map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect()));
        let t = s.clone();
        assert!(matches!(kabsch(&s, &t, false), Err(Error::Degenerate { .. })));
        assert!(matches!(kabsch(&Joints3D::zeros(4), &Joints3D::zeros(4), false), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn planar_source_is_accepted() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = centralize(&Joints3D((0..6).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0]).collect()));
        let r = random_rotation(&mut rng);
        let fit = kabsch(&s, &s.rotated(&r), false).unwrap();
        assert!(fit.rotation.max_abs_diff(&r) < 1e-9);
    }

    #[test]
    fn from_six_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = random_rotation(&mut rng);
        let six = r.to_six();
        let back = Rotation::from_six([six[0], six[1], six[2]], [six[3], six[4], six[5]]).unwrap();
        assert!(back.max_abs_diff(&r) < 1e-12);
        assert!(Rotation::from_matrix(*back.matrix()).is_ok());
    }

    #[test]
    fn rejects_improper_matrix() {
        let m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(Rotation::from_matrix(m).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn kabsch_recovers_random_rotations(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = centralize(&random_shape(&mut rng, 6));
            let r = random_rotation(&mut rng);
            let fit = kabsch(&s, &s.rotated(&r), false).unwrap();
            prop_assert!(fit.rotation.max_abs_diff(&r) < 1e-8);
        }

        #[test]
        fn kabsch_never_worse_than_identity(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = centralize(&random_shape(&mut rng, 7));
            let b = centralize(&random_shape(&mut rng, 7));
            let fit = kabsch(&a, &b, false).unwrap();
            prop_assert!(fit.residual <= a.distance(&b) + 1e-9);
        }

        #[test]
        fn centralize_is_idempotent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let once = centralize(&random_shape(&mut rng, 9));
            let twice = centralize(&once);
            prop_assert!(once.distance(&twice) < 1e-9);
        }

        #[test]
        fn random_rotations_are_proper(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            prop_assert!(Rotation::from_matrix(*random_rotation(&mut rng).matrix()).is_ok());
        }
    }
}
