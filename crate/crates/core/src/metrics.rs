//! Pose-error metrics: MPJPE, scale-normalized MPJPE, Procrustes-aligned
//! MPJPE, PCK and AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{centralize, kabsch, Joints3D};

/// Default PCK threshold in millimeters.
pub const PCK_THRESHOLD: f64 = 150.0;

/// `0, 5, ..., 150` mm.
pub fn default_auc_thresholds() -> Vec<f64> {
    (0..=30).map(|k| 5.0 * k as f64).collect()
}

fn check_shapes(pred: &[Joints3D], gt: &[Joints3D]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch(format!(
            "prediction has {} frames, ground truth has {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty pose sequence".into()));
    }
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.num_joints() != g.num_joints() {
            return Err(Error::DimensionMismatch(format!(
                "frame {i}: prediction has {} joints, ground truth has {}",
                p.num_joints(),
                g.num_joints()
            )));
        }
    }
    Ok(())
}

fn joint_errors(pred: &Joints3D, gt: &Joints3D) -> Vec<f64> {
    pred.0
        .iter()
        .zip(&gt.0)
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
        .collect()
}

fn frame_mean(pred: &Joints3D, gt: &Joints3D) -> f64 {
    let e = joint_errors(pred, gt);
    e.iter().sum::<f64>() / e.len() as f64
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Per-frame mean joint distances.
pub fn mpjpe_per_frame(pred: &[Joints3D], gt: &[Joints3D]) -> Result<Vec<f64>> {
    check_shapes(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| frame_mean(p, g)).collect())
}

pub fn mpjpe(pred: &[Joints3D], gt: &[Joints3D]) -> Result<f64> {
    Ok(mean(&mpjpe_per_frame(pred, gt)?))
}

fn inner(a: &Joints3D, b: &Joints3D) -> f64 {
    a.0.iter().zip(&b.0).map(|(x, y)| x[0] * y[0] + x[1] * y[1] + x[2] * y[2]).sum()
}

/// Scale-normalized errors after centralizing both poses. With
/// `sequence_scale` one scale is fitted to the whole sequence instead of
/// one per frame.
pub fn n_mpjpe_per_frame(pred: &[Joints3D], gt: &[Joints3D], sequence_scale: bool) -> Result<Vec<f64>> {
    check_shapes(pred, gt)?;
    let pc: Vec<Joints3D> = pred.iter().map(centralize).collect();
    let gc: Vec<Joints3D> = gt.iter().map(centralize).collect();
    let mut scales = Vec::with_capacity(pc.len());
    for (i, (p, g)) in pc.iter().zip(&gc).enumerate() {
        let pp = p.squared_norm();
        if !sequence_scale && !(pp > 0.0) {
            return Err(Error::Degenerate { frame: Some(i) });
        }
        scales.push((inner(p, g), pp));
    }
    let s: Vec<f64> = if sequence_scale {
        let (num, den) = scales.iter().fold((0.0, 0.0), |a, s| (a.0 + s.0, a.1 + s.1));
        if !(den > 0.0) {
            return Err(Error::Degenerate { frame: None });
        }
        vec![num / den; pc.len()]
    } else {
        scales.iter().map(|(num, den)| num / den).collect()
    };
    Ok(pc.iter().zip(&gc).zip(&s).map(|((p, g), s)| frame_mean(&p.scaled(*s), g)).collect())
}

/// N-MPJPE with per-frame scales.
pub fn n_mpjpe(pred: &[Joints3D], gt: &[Joints3D]) -> Result<f64> {
    Ok(mean(&n_mpjpe_per_frame(pred, gt, false)?))
}

/// Centralized `pred` aligned to centralized `gt` by a similarity transform
/// with a proper rotation.
pub fn procrustes_aligned(pred: &Joints3D, gt: &Joints3D) -> Result<Joints3D> {
    let p = centralize(pred);
    let g = centralize(gt);
    let fit = kabsch(&p, &g, true)?;
    Ok(p.rotated(&fit.rotation).scaled(fit.scale))
}

pub fn pa_mpjpe_per_frame(pred: &[Joints3D], gt: &[Joints3D]) -> Result<Vec<f64>> {
    check_shapes(pred, gt)?;
    pred.iter()
        .zip(gt)
        .enumerate()
        .map(|(i, (p, g))| {
            let aligned = procrustes_aligned(p, g).map_err(|e| match e {
                Error::Degenerate { .. } => Error::Degenerate { frame: Some(i) },
                e => e,
            })?;
            Ok(frame_mean(&aligned, &centralize(g)))
        })
        .collect()
}

pub fn pa_mpjpe(pred: &[Joints3D], gt: &[Joints3D]) -> Result<f64> {
    Ok(mean(&pa_mpjpe_per_frame(pred, gt)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PckMode {
    /// Compare poses as given.
    Raw,
    /// Procrustes-align each predicted frame first.
    Aligned,
}

/// Percentage of joints within `threshold` mm and the mean of that
/// percentage over `auc_thresholds`. A joint counts when its error is at
/// most the threshold.
pub fn pck_auc(pred: &[Joints3D], gt: &[Joints3D], threshold: f64, auc_thresholds: &[f64], mode: PckMode) -> Result<(f64, f64)> {
    check_shapes(pred, gt)?;
    let mut errors = Vec::new();
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        match mode {
            PckMode::Raw => errors.extend(joint_errors(p, g)),
            PckMode::Aligned => {
                let a = procrustes_aligned(p, g).map_err(|e| match e {
                    Error::Degenerate { .. } => Error::Degenerate { frame: Some(i) },
                    e => e,
                })?;
                errors.extend(joint_errors(&a, &centralize(g)));
            }
        }
    }
    let pck_at = |t: f64| 100.0 * errors.iter().filter(|e| **e <= t).count() as f64 / errors.len() as f64;
    let auc = if auc_thresholds.is_empty() {
        0.0
    } else {
        auc_thresholds.iter().map(|t| pck_at(*t)).sum::<f64>() / auc_thresholds.len() as f64
    };
    Ok((pck_at(threshold), auc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameErrors {
    pub mpjpe_mm: f64,
    pub n_mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub mpjpe_mm: f64,
    pub n_mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub pck_pct: f64,
    pub auc_pct: f64,
    pub per_frame: Vec<FrameErrors>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub pck_threshold: f64,
    pub auc_thresholds: Vec<f64>,
    pub pck_mode: PckMode,
    pub sequence_scale: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            pck_threshold: PCK_THRESHOLD,
            auc_thresholds: default_auc_thresholds(),
            pck_mode: PckMode::Raw,
            sequence_scale: false,
        }
    }
}

/// MPJPE here compares centralized poses, so that all three errors measure
/// shape and the ordering `pa ≤ n ≤ mpjpe` holds.
pub fn evaluate(pred: &[Joints3D], gt: &[Joints3D], options: &EvalOptions) -> Result<EvalReport> {
    check_shapes(pred, gt)?;
    let pc: Vec<Joints3D> = pred.iter().map(centralize).collect();
    let gc: Vec<Joints3D> = gt.iter().map(centralize).collect();
    let raw = mpjpe_per_frame(&pc, &gc)?;
    let n = n_mpjpe_per_frame(&pc, &gc, options.sequence_scale)?;
    let pa = pa_mpjpe_per_frame(&pc, &gc)?;
    let (pck, auc) = pck_auc(&pc, &gc, options.pck_threshold, &options.auc_thresholds, options.pck_mode)?;
    Ok(EvalReport {
        mpjpe_mm: mean(&raw),
        n_mpjpe_mm: mean(&n),
        pa_mpjpe_mm: mean(&pa),
        pck_pct: pck,
        auc_pct: auc,
        per_frame: raw
            .iter()
            .zip(&n)
            .zip(&pa)
            .map(|((m, n), p)| FrameErrors {
                mpjpe_mm: *m,
                n_mpjpe_mm: *n,
                pa_mpjpe_mm: *p,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_rotation, Rotation};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, p: usize) -> Joints3D {
        Joints3D((0..p).map(|_| std::array::from_fn(|_| rng.random_range(-500.0..500.0))).collect())
    }

    fn random_seq(rng: &mut ChaCha8Rng, f: usize, p: usize) -> Vec<Joints3D> {
        (0..f).map(|_| random_pose(rng, p)).collect()
    }

    fn similarity(pose: &Joints3D, s: f64, r: &Rotation, t: [f64; 3]) -> Joints3D {
        Joints3D(
            pose.rotated(r)
                .scaled(s)
                .0
                .iter()
                .map(|q| [q[0] + t[0], q[1] + t[1], q[2] + t[2]])
                .collect(),
        )
    }

    #[test]
    fn identical_poses_have_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_seq(&mut rng, 4, 17);
        assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
        assert!(n_mpjpe(&gt, &gt).unwrap() < 1e-12);
        assert!(pa_mpjpe(&gt, &gt).unwrap() < 1e-9);
    }

    #[test]
    fn constant_offset_is_pythagorean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_seq(&mut rng, 3, 10);
        let pred: Vec<Joints3D> = gt
            .iter()
            .map(|s| Joints3D(s.0.iter().map(|q| [q[0] + 3.0, q[1] + 4.0, q[2]]).collect()))
            .collect();
        assert!((mpjpe(&pred, &gt).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn mpjpe_matches_a_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (pred, gt) = (random_seq(&mut rng, 5, 7), random_seq(&mut rng, 5, 7));
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..5 {
            for j in 0..7 {
                let mut sq = 0.0;
                for k in 0..3 {
                    sq += (pred[i].0[j][k] - gt[i].0[j][k]) * (pred[i].0[j][k] - gt[i].0[j][k]);
                }
                total += f64::sqrt(sq);
                count += 1;
            }
        }
        assert!((mpjpe(&pred, &gt).unwrap() - total / count as f64).abs() < 1e-9);
    }

    #[test]
    fn scale_is_absorbed_by_n_mpjpe() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_seq(&mut rng, 3, 17);
        let pred: Vec<Joints3D> = gt.iter().map(|s| s.scaled(2.0)).collect();
        assert!(n_mpjpe(&pred, &gt).unwrap() < 1e-9);
        assert!(n_mpjpe_per_frame(&pred, &gt, true).unwrap().iter().all(|e| *e < 1e-9));
    }

    /// Golden-section minimization of the frame's mean error over the scale.
    fn golden_min(pred: &Joints3D, gt: &Joints3D) -> f64 {
        let (p, g) = (centralize(pred), centralize(gt));
        let err = |s: f64| frame_mean(&p.scaled(s), &g);
        let (mut a, mut b) = (-10.0, 10.0);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - phi * (b - a);
            let d = a + phi * (b - a);
            if err(c) < err(d) {
                b = d;
            } else {
                a = c;
            }
        }
        err(0.5 * (a + b))
    }

    #[test]
    fn least_squares_scale_is_locally_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let gt = random_pose(&mut rng, 17);
            let noisy = Joints3D(gt.0.iter().map(|q| q.map(|v| 0.7 * v + rng.random_range(-30.0..30.0))).collect());
            let pc = centralize(&noisy);
            let gc = centralize(&gt);
            let s = inner(&pc, &gc) / pc.squared_norm();
            let sq = |s: f64| pc.scaled(s).sub(&gc).squared_norm();
            assert!(sq(s) < sq(1.01 * s) && sq(s) < sq(0.99 * s));
            // The squared-error optimum is close to the mean-error optimum.
            let e = n_mpjpe(&[noisy.clone()], &[gt.clone()]).unwrap();
            assert!(e >= golden_min(&noisy, &gt) - 1e-9);
            assert!(e < 1.05 * golden_min(&noisy, &gt));
        }
    }

    #[test]
    fn zero_prediction_is_degenerate_for_n_mpjpe() {
        let gt = vec![Joints3D(vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [0.0, 1.0, 0.0]])];
        let pred = vec![Joints3D::zeros(3)];
        assert!(matches!(n_mpjpe(&pred, &gt), Err(Error::Degenerate { frame: Some(0) })));
    }

    #[test]
    fn similarity_transforms_are_absorbed() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let gt = random_pose(&mut rng, 17);
            let r = random_rotation(&mut rng);
            let s = rng.random_range(0.1..10.0);
            let t = std::array::from_fn(|_| rng.random_range(-1000.0..1000.0));
            let pred = similarity(&gt, s, &r, t);
            assert!(pa_mpjpe(&[pred], &[gt]).unwrap() < 1e-9);
        }
    }

    #[test]
    fn mirror_image_is_not_absorbed() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gt = random_pose(&mut rng, 17);
        let mirrored = Joints3D(gt.0.iter().map(|q| [q[0], q[1], -q[2]]).collect());
        let pa = pa_mpjpe(&[mirrored.clone()], &[gt.clone()]).unwrap();
        assert!(pa > 1.0);
        // No rotation on a coarse grid does better than the optimum.
        let gc = centralize(&gt);
        let mc = centralize(&mirrored);
        let mut best = f64::INFINITY;
        for a in 0..12 {
            for b in 0..6 {
                for c in 0..12 {
                    let r = Rotation::about_axis([0.0, 0.0, 1.0], a as f64 * 0.5236)
                        .compose(&Rotation::about_axis([0.0, 1.0, 0.0], b as f64 * 0.5236))
                        .compose(&Rotation::about_axis([1.0, 0.0, 0.0], c as f64 * 0.5236));
                    let rotated = mc.rotated(&r);
                    let s = (inner(&rotated, &gc) / rotated.squared_norm()).max(0.0);
                    best = best.min(frame_mean(&rotated.scaled(s), &gc));
                }
            }
        }
        assert!(best > 1.0);
    }

    #[test]
    fn pck_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt = random_seq(&mut rng, 2, 10);
        let t = default_auc_thresholds();
        assert_eq!(t.len(), 31);
        assert_eq!(pck_auc(&gt, &gt, PCK_THRESHOLD, &t, PckMode::Raw).unwrap(), (100.0, 100.0));
        let off = |d: f64, s: &Joints3D| Joints3D(s.0.iter().map(|q| [q[0] + d, q[1], q[2]]).collect());
        let far: Vec<Joints3D> = gt.iter().map(|s| off(200.0, s)).collect();
        assert_eq!(pck_auc(&far, &gt, PCK_THRESHOLD, &t, PckMode::Raw).unwrap().0, 0.0);
        let split: Vec<Joints3D> = gt
            .iter()
            .map(|s| {
                Joints3D(
                    s.0.iter()
                        .enumerate()
                        .map(|(j, q)| [q[0] + if j % 2 == 0 { 10.0 } else { 300.0 }, q[1], q[2]])
                        .collect(),
                )
            })
            .collect();
        assert_eq!(pck_auc(&split, &gt, PCK_THRESHOLD, &t, PckMode::Raw).unwrap().0, 50.0);
    }

    #[test]
    fn aligned_pck_ignores_similarity_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gt = random_seq(&mut rng, 3, 14);
        let r = random_rotation(&mut rng);
        let pred: Vec<Joints3D> = gt.iter().map(|s| similarity(s, 1.7, &r, [500.0, 0.0, 0.0])).collect();
        let t = default_auc_thresholds();
        assert!(pck_auc(&pred, &gt, PCK_THRESHOLD, &t, PckMode::Raw).unwrap().0 < 100.0);
        // Alignment leaves round-off, so only the 0 mm threshold may miss.
        let (pck, auc) = pck_auc(&pred, &gt, PCK_THRESHOLD, &t, PckMode::Aligned).unwrap();
        assert_eq!(pck, 100.0);
        assert!(auc >= 100.0 * 30.0 / 31.0);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let a = vec![Joints3D::zeros(4); 2];
        let b = vec![Joints3D::zeros(5); 2];
        assert!(matches!(mpjpe(&a, &b), Err(Error::DimensionMismatch(_))));
        assert!(matches!(mpjpe(&a, &a[..1]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn report_has_the_fixed_field_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (pred, gt) = (random_seq(&mut rng, 2, 5), random_seq(&mut rng, 2, 5));
        let report = evaluate(&pred, &gt, &EvalOptions::default()).unwrap();
        let v: serde_json::Value = serde_json::to_value(&report).unwrap();
        for key in ["mpjpe_mm", "n_mpjpe_mm", "pa_mpjpe_mm", "pck_pct", "auc_pct", "per_frame"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(report.per_frame.len(), 2);
        let back: EvalReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, report);
    }

    fn pose_strategy(p: usize) -> impl Strategy<Value = Joints3D> {
        prop::collection::vec(prop::array::uniform3(-500.0..500.0f64), p).prop_map(Joints3D)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn mpjpe_is_a_metric(a in pose_strategy(6), b in pose_strategy(6), c in pose_strategy(6)) {
            let (a, b, c) = (vec![a], vec![b], vec![c]);
            let ab = mpjpe(&a, &b).unwrap();
            prop_assert!((ab - mpjpe(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert_eq!(mpjpe(&a, &a).unwrap(), 0.0);
            prop_assert!(ab <= mpjpe(&a, &c).unwrap() + mpjpe(&c, &b).unwrap() + 1e-9);
        }

        #[test]
        fn report_ordering_holds(pred in prop::collection::vec(pose_strategy(8), 3), gt in prop::collection::vec(pose_strategy(8), 3)) {
            let r = evaluate(&pred, &gt, &EvalOptions::default()).unwrap();
            prop_assert!(r.pa_mpjpe_mm <= r.n_mpjpe_mm + 1e-9);
            prop_assert!(r.n_mpjpe_mm <= r.mpjpe_mm + 1e-9);
            prop_assert!((0.0..=100.0).contains(&r.pck_pct) && (0.0..=100.0).contains(&r.auc_pct));
        }

        #[test]
        fn pa_is_invariant_to_rigid_motion_of_gt(pred in pose_strategy(8), gt in pose_strategy(8), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = random_rotation(&mut rng);
            let moved = similarity(&gt, 1.0, &r, [10.0, -20.0, 30.0]);
            let a = pa_mpjpe(&[pred.clone()], &[gt]).unwrap();
            let b = pa_mpjpe(&[pred], &[moved]).unwrap();
            prop_assert!((a - b).abs() < 1e-7 * (1.0 + a));
        }

        #[test]
        fn pck_is_monotone_in_threshold(pred in pose_strategy(10), gt in pose_strategy(10), t in 0.0..1000.0f64) {
            let (pred, gt) = (vec![pred], vec![gt]);
            let lo = pck_auc(&pred, &gt, t, &[], PckMode::Raw).unwrap().0;
            let hi = pck_auc(&pred, &gt, t + 10.0, &[], PckMode::Raw).unwrap().0;
            prop_assert!(lo <= hi);
        }

        #[test]
        fn auc_falls_as_errors_grow(gt in pose_strategy(10), dir in prop::collection::vec(prop::array::uniform3(-1.0..1.0f64), 10), k in 1.0..4.0f64) {
            let grid = default_auc_thresholds();
            let at = |m: f64| {
                let pred = Joints3D(gt.0.iter().zip(&dir).map(|(q, d)| [q[0] + m * 60.0 * d[0], q[1] + m * 60.0 * d[1], q[2] + m * 60.0 * d[2]]).collect());
                pck_auc(&[pred], &[gt.clone()], PCK_THRESHOLD, &grid, PckMode::Raw).unwrap().1
            };
            prop_assert!(at(k) <= at(1.0));
        }
    }
}
