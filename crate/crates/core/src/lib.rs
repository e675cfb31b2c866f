//! Targetless LiDAR/camera spatiotemporal calibration.
//!
//! The calibration engine jointly optimizes per-camera extrinsics and time
//! offsets together with a neural-field-parameterized 3D Gaussian scene, by
//! minimizing the photometric error of splatted renderings against captured
//! images. LiDAR poses and intrinsics are inputs; Gaussian positions come from
//! the accumulated, voxel-downsampled LiDAR cloud and are never optimized.
//!
//! Module map:
//! - [`geometry`]: SE(3) poses, trajectory interpolation, calibration state,
//!   analytic pose gradients.
//! - [`cloud`]: scan accumulation, voxel downsampling, behind-camera culling.
//! - [`field`]: multiresolution hash encoding + MLP heads predicting per-
//!   Gaussian color, opacity, scale, and rotation.
//! - [`raster`]: differentiable EWA splatting (tiled forward + hand-derived
//!   backward) and a naive reference renderer.
//! - [`loss`]: cropped L1 + D-SSIM photometric loss and scale regularization.
//! - [`train`]: Adam groups, coarse-to-fine schedule, the calibration loop.
//! - [`synth`]: synthetic world generation, noise injection, and scoring.
//! - [`gradcheck`]: finite-difference verification of every gradient path.
//! - [`io`]: file formats, configuration, dataset ingestion.
//! - [`cli`]: subcommand implementations behind the `splatcal` binary.

pub mod cloud;
pub mod field;
pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod raster;
pub mod synth;
pub mod train;

/// Entry point used by the `splatcal` binary. Returns the process exit code.
pub fn run_cli() -> i32 {
    // Wired up once the CLI module lands.
    eprintln!("E_UNIMPLEMENTED: CLI not built yet");
    2
}
