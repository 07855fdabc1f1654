//! Skeletons, the synthetic deforming-sequence generator and the JSON
//! interchange format.
//!
//! Both shipped skeletons stand in an exactly planar T-pose (x to the
//! subject's left, y up, z out of the body plane). Each non-root joint
//! carries a fixed rotation axis in its parent's frame; the generator swings
//! every joint about its axis with a seeded-phase sinusoid and builds the
//! pose by forward kinematics.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    centralize, mat_mul, project_orthographic, random_rotation, Joints2D, Joints3D, Mat3, Rotation,
};
use crate::io::{self, check_version, FORMAT_VERSION};
use crate::rmnrd::RmnrdDecomposition;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Skeleton {
    pub name: String,
    /// Parent index per joint, `-1` for the root.
    pub parents: Vec<i32>,
    /// Length of the bone ending at each joint (0 for the root).
    pub bone_lengths: Vec<f64>,
    /// Rest-pose bone direction per joint (unit, parent frame).
    pub directions: Vec<[f64; 3]>,
    /// Swing axis per joint (unit, parent frame).
    pub axes: Vec<[f64; 3]>,
}

const LEFT: [f64; 3] = [1.0, 0.0, 0.0];
const RIGHT: [f64; 3] = [-1.0, 0.0, 0.0];
const UP: [f64; 3] = [0.0, 1.0, 0.0];
const DOWN: [f64; 3] = [0.0, -1.0, 0.0];
const X: [f64; 3] = [1.0, 0.0, 0.0];
const Y: [f64; 3] = [0.0, 1.0, 0.0];
const Z: [f64; 3] = [0.0, 0.0, 1.0];

impl Skeleton {
    /// Pelvis-rooted 17-joint body: right leg, left leg, spine to head,
    /// left arm, right arm.
    pub fn human17() -> Self {
        #[rustfmt::skip]
        let joints: [(i32, f64, [f64; 3], [f64; 3]); 17] = [
            (-1, 0.0, UP, X),       // pelvis
            (0, 130.0, RIGHT, Y),   // right hip
            (1, 450.0, DOWN, X),    // right knee
            (2, 440.0, DOWN, X),    // right ankle
            (0, 130.0, LEFT, Y),    // left hip
            (4, 450.0, DOWN, X),    // left knee
            (5, 440.0, DOWN, X),    // left ankle
            (0, 240.0, UP, X),      // spine
            (7, 250.0, UP, Z),      // thorax
            (8, 110.0, UP, X),      // neck
            (9, 110.0, UP, Y),      // head
            (8, 150.0, LEFT, Y),    // left shoulder
            (11, 280.0, LEFT, Z),   // left elbow
            (12, 250.0, LEFT, Y),   // left wrist
            (8, 150.0, RIGHT, Y),   // right shoulder
            (14, 280.0, RIGHT, Z),  // right elbow
            (15, 250.0, RIGHT, Y),  // right wrist
        ];
        Self::from_table("human17", &joints)
    }

    /// Neck-rooted 14-joint body: head, right arm, left arm, right leg,
    /// left leg.
    pub fn human14() -> Self {
        let hip_r = normalize([-0.2, -1.0, 0.0]);
        let hip_l = normalize([0.2, -1.0, 0.0]);
        #[rustfmt::skip]
        let joints: [(i32, f64, [f64; 3], [f64; 3]); 14] = [
            (-1, 0.0, UP, X),       // neck
            (0, 200.0, UP, X),      // head
            (0, 180.0, RIGHT, Y),   // right shoulder
            (2, 280.0, RIGHT, Z),   // right elbow
            (3, 250.0, RIGHT, Y),   // right wrist
            (0, 180.0, LEFT, Y),    // left shoulder
            (5, 280.0, LEFT, Z),    // left elbow
            (6, 250.0, LEFT, Y),    // left wrist
            (0, 520.0, hip_r, Z),   // right hip
            (8, 450.0, DOWN, X),    // right knee
            (9, 440.0, DOWN, X),    // right ankle
            (0, 520.0, hip_l, Z),   // left hip
            (11, 450.0, DOWN, X),   // left knee
            (12, 440.0, DOWN, X),   // left ankle
        ];
        Self::from_table("human14", &joints)
    }

    fn from_table(name: &str, joints: &[(i32, f64, [f64; 3], [f64; 3])]) -> Self {
        Self {
            name: name.into(),
            parents: joints.iter().map(|j| j.0).collect(),
            bone_lengths: joints.iter().map(|j| j.1).collect(),
            directions: joints.iter().map(|j| j.2).collect(),
            axes: joints.iter().map(|j| j.3).collect(),
        }
    }

    /// Skeleton with `num_joints` joints, if one ships.
    pub fn by_joint_count(num_joints: usize) -> Option<Self> {
        match num_joints {
            17 => Some(Self::human17()),
            14 => Some(Self::human14()),
            _ => None,
        }
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn mean_bone_length(&self) -> f64 {
        let bones: Vec<f64> = self
            .parents
            .iter()
            .zip(&self.bone_lengths)
            .filter(|(p, _)| **p >= 0)
            .map(|(_, l)| *l)
            .collect();
        bones.iter().sum::<f64>() / bones.len().max(1) as f64
    }

    /// Checks the tree structure, lengths and unit vectors.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_joints();
        for (field, len) in [
            ("bone_lengths", self.bone_lengths.len()),
            ("directions", self.directions.len()),
            ("axes", self.axes.len()),
        ] {
            if len != n {
                return Err(Error::validation(&format!("skeleton.{field}"), format!("expected {n} entries, found {len}")));
            }
        }
        let roots = self.parents.iter().filter(|p| **p == -1).count();
        if roots != 1 {
            return Err(Error::validation("skeleton.parents", format!("expected one root, found {roots}")));
        }
        for (j, &p) in self.parents.iter().enumerate() {
            if p != -1 && !(p >= 0 && (p as usize) < j) {
                return Err(Error::validation(
                    "skeleton.parents",
                    format!("joint {j} has parent {p}; parents must precede their children"),
                ));
            }
            if p >= 0 && !(self.bone_lengths[j] > 0.0 && self.bone_lengths[j].is_finite()) {
                return Err(Error::validation("skeleton.bone_lengths", format!("bone {j} must be positive")));
            }
        }
        for (field, vs) in [("directions", &self.directions), ("axes", &self.axes)] {
            if let Some(j) = vs.iter().position(|v| ((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - 1.0).abs() > 1e-9) {
                return Err(Error::validation(&format!("skeleton.{field}"), format!("entry {j} is not a unit vector")));
            }
        }
        Ok(())
    }

    /// Forward kinematics with one swing angle per joint (the root's angle
    /// is ignored). Returns joint positions with the root at the origin.
    pub fn pose(&self, angles: &[f64]) -> Joints3D {
        let n = self.num_joints();
        let mut frames: Vec<Mat3> = vec![*Rotation::IDENTITY.matrix(); n];
        let mut points = vec![[0.0; 3]; n];
        for j in 0..n {
            let p = self.parents[j];
            if p < 0 {
                continue;
            }
            let p = p as usize;
            let local = Rotation::about_axis(self.axes[j], angles[j]);
            frames[j] = mat_mul(&frames[p], local.matrix());
            let g = Rotation::new_unchecked(frames[j]);
            let d = g.apply(&self.directions[j]);
            let l = self.bone_lengths[j];
            points[j] = [
                points[p][0] + l * d[0],
                points[p][1] + l * d[1],
                points[p][2] + l * d[2],
            ];
        }
        Joints3D(points)
    }

    /// Number of swinging joints on the path from the root to each joint,
    /// inclusive of the joint itself.
    fn depths(&self) -> Vec<usize> {
        let mut depth = vec![0; self.num_joints()];
        for (j, &p) in self.parents.iter().enumerate() {
            if p >= 0 {
                depth[j] = depth[p as usize] + 1;
            }
        }
        depth
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorParams {
    pub frames: usize,
    /// Peak joint swing in radians.
    pub amplitude: f64,
    /// Angular frequency of the swings in radians per frame.
    pub frequency: f64,
    /// Total camera rotation across the sequence in radians.
    pub camera_sweep: f64,
    /// Standard deviation of the 2D noise in millimeters.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            frames: 16,
            amplitude: 0.2,
            frequency: std::f64::consts::PI / 16.0,
            camera_sweep: std::f64::consts::FRAC_PI_2,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::validation("frames", "must be at least 1"));
        }
        for (name, v) in [
            ("amplitude", self.amplitude),
            ("frequency", self.frequency),
            ("camera_sweep", self.camera_sweep),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(name, "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub skeleton: Skeleton,
    /// Centralized ground-truth shapes in the body frame.
    pub gt_shapes: Vec<Joints3D>,
    /// Camera rotations: `W_i = Π R_i S_i + noise`.
    pub gt_rotations: Vec<Rotation>,
    pub measurements: Vec<Joints2D>,
    pub noise_sigma: f64,
    pub params: GeneratorParams,
}

impl SyntheticScene {
    /// Bound on the inter-frame displacement of any joint of the
    /// centralized ground truth: twice the sum over the joint's bones of
    /// length times the number of swinging joints above it, times the peak
    /// per-frame angle change `amplitude · frequency`.
    pub fn displacement_bound(&self) -> f64 {
        let sk = &self.skeleton;
        let depth = sk.depths();
        let mut reach = vec![0.0; sk.num_joints()];
        for (j, &p) in sk.parents.iter().enumerate() {
            if p >= 0 {
                reach[j] = reach[p as usize] + sk.bone_lengths[j] * depth[j] as f64;
            }
        }
        let max_reach = reach.iter().cloned().fold(0.0, f64::max);
        2.0 * self.params.amplitude * self.params.frequency * max_reach
    }

    /// Ground-truth shapes seen from the camera: `centralize(R_i S_i)`.
    pub fn camera_frame_shapes(&self) -> Vec<Joints3D> {
        self.gt_rotations
            .iter()
            .zip(&self.gt_shapes)
            .map(|(r, s)| centralize(&s.rotated(r)))
            .collect()
    }
}

/// Swing angles at phase offset `t`: `amplitude · (sin(t + φ_j) + o_j)` where
/// `o_j` is 1 for joints whose axis lies in the rest plane and 0 otherwise.
/// Out-of-plane swings therefore only flex forward, so no pose of the
/// family is the depth mirror of another.
fn swing_angles(skeleton: &Skeleton, phases: &[f64], amplitude: f64, t: f64) -> Vec<f64> {
    phases
        .iter()
        .zip(&skeleton.axes)
        .map(|(p, a)| {
            let offset = if a[2].abs() < 1e-12 { 1.0 } else { 0.0 };
            amplitude * ((t + p).sin() + offset)
        })
        .collect()
}

/// Samples per-joint swing phases in `[0, 2π)`.
fn phases(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect()
}

/// Generates a deforming sequence viewed by a smoothly rotating
/// orthographic camera. The camera interpolates at constant angular speed
/// between a seeded random orientation and that orientation composed with
/// a rotation of `camera_sweep` radians about a seeded axis.
pub fn generate(skeleton: &Skeleton, params: &GeneratorParams) -> Result<SyntheticScene> {
    skeleton.validate()?;
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = skeleton.num_joints();
    let phi = phases(&mut rng, n);
    let start = random_rotation(&mut rng);
    let axis = random_unit(&mut rng);
    let f = params.frames;
    let mut gt_shapes = Vec::with_capacity(f);
    let mut gt_rotations = Vec::with_capacity(f);
    for i in 0..f {
        let angles = swing_angles(skeleton, &phi, params.amplitude, params.frequency * i as f64);
        gt_shapes.push(centralize(&skeleton.pose(&angles)));
        let u = if f > 1 { i as f64 / (f - 1) as f64 } else { 0.0 };
        gt_rotations.push(start.compose(&Rotation::about_axis(axis, params.camera_sweep * u)));
    }
    let noise = Normal::new(0.0, params.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let measurements = gt_rotations
        .iter()
        .zip(&gt_shapes)
        .map(|(r, s)| {
            let mut w = project_orthographic(r, s);
            if params.noise_sigma > 0.0 {
                for q in &mut w.0 {
                    q[0] += noise.sample(&mut rng);
                    q[1] += noise.sample(&mut rng);
                }
            }
            w
        })
        .collect();
    Ok(SyntheticScene {
        skeleton: skeleton.clone(),
        gt_shapes,
        gt_rotations,
        measurements,
        noise_sigma: params.noise_sigma,
        params: *params,
    })
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Independent single frames of the generator family (uniform phases), seen
/// from a uniformly random camera. Returns `(camera-frame pose, its projection)` pairs.
pub fn pose_family(skeleton: &Skeleton, count: usize, amplitude: f64, seed: u64) -> Result<Vec<(Joints3D, Joints2D)>> {
    skeleton.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = skeleton.num_joints();
    Ok((0..count)
        .map(|_| {
            let angles = swing_angles(skeleton, &phases(&mut rng, n), amplitude, 0.0);
            let r = random_rotation(&mut rng);
            let y = centralize(&skeleton.pose(&angles).rotated(&r));
            let c = project_orthographic(&Rotation::IDENTITY, &y);
            (y, c)
        })
        .collect())
}

/// On-disk sequence container. `points` holds 2D measurements (`dims = 2`)
/// or 3D poses (`dims = 3`); the optional fields carry ground truth and
/// fitted structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceFile {
    pub version: u32,
    pub num_frames: usize,
    pub num_joints: usize,
    pub dims: usize,
    pub points: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotations: Option<Vec<Mat3>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skeleton: Option<Skeleton>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Vec<Joints3D>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Joints3D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deformations: Option<Vec<Joints3D>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorParams>,
}

impl SequenceFile {
    fn bare(num_frames: usize, num_joints: usize, dims: usize, points: Vec<Vec<Vec<f64>>>) -> Self {
        Self {
            version: FORMAT_VERSION,
            num_frames,
            num_joints,
            dims,
            points,
            rotations: None,
            skeleton: None,
            ground_truth: None,
            reference: None,
            deformations: None,
            noise_sigma: None,
            generator: None,
        }
    }

    pub fn from_measurements(w: &[Joints2D]) -> Self {
        let p = w.first().map_or(0, Joints2D::num_joints);
        let points = w.iter().map(|f| f.0.iter().map(|q| q.to_vec()).collect()).collect();
        Self::bare(w.len(), p, 2, points)
    }

    pub fn from_poses(seq: &[Joints3D]) -> Self {
        let p = seq.first().map_or(0, Joints3D::num_joints);
        let points = seq.iter().map(|f| f.0.iter().map(|q| q.to_vec()).collect()).collect();
        Self::bare(seq.len(), p, 3, points)
    }

    pub fn from_scene(scene: &SyntheticScene) -> Self {
        let mut out = Self::from_measurements(&scene.measurements);
        out.rotations = Some(scene.gt_rotations.iter().map(|r| *r.matrix()).collect());
        out.skeleton = Some(scene.skeleton.clone());
        out.ground_truth = Some(scene.gt_shapes.clone());
        out.noise_sigma = Some(scene.noise_sigma);
        out.generator = Some(scene.params);
        out
    }

    /// Reconstructed shapes as points plus the full decomposition.
    pub fn from_decomposition(d: &RmnrdDecomposition) -> Self {
        let mut out = Self::from_poses(&d.shapes());
        out.rotations = Some(d.rotations.iter().map(|r| *r.matrix()).collect());
        out.reference = Some(d.reference.clone());
        out.deformations = Some(d.deformations.clone());
        out
    }

    pub fn to_json(&self) -> Result<String> {
        io::to_json(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_json()?.as_bytes())
    }

    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            version: u32,
        }
        let probe: Probe = io::from_json(text)?;
        check_version(probe.version)?;
        let file: SequenceFile = io::from_json(text)?;
        file.validate()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        check_version(self.version)?;
        if self.dims != 2 && self.dims != 3 {
            return Err(Error::validation("dims", format!("must be 2 or 3, found {}", self.dims)));
        }
        if self.points.len() != self.num_frames {
            return Err(Error::validation(
                "num_frames",
                format!("header says {} frames, points has {}", self.num_frames, self.points.len()),
            ));
        }
        for (i, frame) in self.points.iter().enumerate() {
            if frame.len() != self.num_joints {
                return Err(Error::validation(
                    "num_joints",
                    format!("header says {} joints, frame {i} has {}", self.num_joints, frame.len()),
                ));
            }
            for (j, q) in frame.iter().enumerate() {
                if q.len() != self.dims {
                    return Err(Error::validation(
                        "dims",
                        format!("header says {} coordinates, point [{i}][{j}] has {}", self.dims, q.len()),
                    ));
                }
                if q.iter().any(|v| !v.is_finite()) {
                    return Err(Error::validation("points", format!("non-finite value at [{i}][{j}]")));
                }
            }
        }
        if let Some(r) = &self.rotations {
            if r.len() != self.num_frames {
                return Err(Error::validation(
                    "rotations",
                    format!("{} rotations for {} frames", r.len(), self.num_frames),
                ));
            }
            for (i, m) in r.iter().enumerate() {
                Rotation::from_matrix(*m)
                    .map_err(|e| Error::validation(&format!("rotations[{i}]"), e.to_string()))?;
            }
        }
        if let Some(s) = &self.skeleton {
            s.validate()?;
            if s.num_joints() != self.num_joints {
                return Err(Error::validation(
                    "skeleton",
                    format!("skeleton has {} joints, header says {}", s.num_joints(), self.num_joints),
                ));
            }
        }
        let check_seq = |field: &str, seq: &[Joints3D]| -> Result<()> {
            if seq.len() != self.num_frames {
                return Err(Error::validation(field, format!("{} frames, header says {}", seq.len(), self.num_frames)));
            }
            if let Some(i) = seq.iter().position(|s| s.num_joints() != self.num_joints) {
                return Err(Error::validation(field, format!("frame {i} has {} joints", seq[i].num_joints())));
            }
            if seq.iter().any(|s| !s.is_finite()) {
                return Err(Error::validation(field, "non-finite value"));
            }
            Ok(())
        };
        if let Some(gt) = &self.ground_truth {
            check_seq("ground_truth", gt)?;
        }
        if let Some(d) = &self.deformations {
            check_seq("deformations", d)?;
        }
        if let Some(r) = &self.reference {
            if r.num_joints() != self.num_joints || !r.is_finite() {
                return Err(Error::validation("reference", format!("expected {} finite joints", self.num_joints)));
            }
        }
        Ok(())
    }

    pub fn measurements(&self) -> Result<Vec<Joints2D>> {
        if self.dims != 2 {
            return Err(Error::validation("dims", format!("expected 2D measurements, found dims = {}", self.dims)));
        }
        Ok(self
            .points
            .iter()
            .map(|f| Joints2D(f.iter().map(|q| [q[0], q[1]]).collect()))
            .collect())
    }

    pub fn poses(&self) -> Result<Vec<Joints3D>> {
        if self.dims != 3 {
            return Err(Error::validation("dims", format!("expected 3D poses, found dims = {}", self.dims)));
        }
        Ok(self
            .points
            .iter()
            .map(|f| Joints3D(f.iter().map(|q| [q[0], q[1], q[2]]).collect()))
            .collect())
    }

    pub fn rotations(&self) -> Option<Vec<Rotation>> {
        self.rotations
            .as_ref()
            .map(|r| r.iter().map(|m| Rotation::new_unchecked(*m)).collect())
    }

    /// The stored decomposition, when reference, deformations and rotations
    /// are all present.
    pub fn decomposition(&self) -> Option<RmnrdDecomposition> {
        Some(RmnrdDecomposition {
            reference: self.reference.clone()?,
            deformations: self.deformations.clone()?,
            rotations: self.rotations()?,
        })
    }

    /// Rebuilds the scene when the file carries ground truth.
    pub fn scene(&self) -> Result<SyntheticScene> {
        let missing = |field: &str| Error::validation(field, "required for a synthetic scene");
        Ok(SyntheticScene {
            skeleton: self.skeleton.clone().ok_or_else(|| missing("skeleton"))?,
            gt_shapes: self.ground_truth.clone().ok_or_else(|| missing("ground_truth"))?,
            gt_rotations: self.rotations().ok_or_else(|| missing("rotations"))?,
            measurements: self.measurements()?,
            noise_sigma: self.noise_sigma.unwrap_or(0.0),
            params: self.generator.unwrap_or_default(),
        })
    }
}
