//! Shared fixtures for the criterion benches.

use nrsfm_core::data::{generate, GeneratorParams, Skeleton, SyntheticScene};
use nrsfm_core::Joints3D;

/// Deforming 17-joint scene with `frames` frames.
pub fn scene(frames: usize, seed: u64) -> SyntheticScene {
    let params = GeneratorParams {
        frames,
        seed,
        ..GeneratorParams::default()
    };
    generate(&Skeleton::human17(), &params).expect("valid generator parameters")
}

/// Camera-frame poses of [`scene`]: shapes that differ by rotation and deformation.
pub fn camera_poses(frames: usize, seed: u64) -> Vec<Joints3D> {
    scene(frames, seed).camera_frame_shapes()
}
