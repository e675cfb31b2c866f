//! Calibration training loop: coarse-to-fine voxel stages, warm-up,
//! per-parameter-group Adam with linear learning-rate decay, seeded frame
//! sampling, and gradient routing from the image loss back to the field and
//! the calibration parameters.

use std::time::Instant;

use nalgebra::Quaternion;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cloud::{cull_behind_camera, voxel_downsample, CloudError, WorldCloud};
use crate::field::{
    field_backward, field_forward, hash_weight_decay, AttributeGradients, FieldConfig, FieldError,
    FieldParams,
};
use crate::geometry::{
    retract_calibration, rotate_gaussian_orientations, transform_points_to_camera,
    CalibrationState, CameraModel, FrameGeometry, GeometryError, Trajectory, Vec3,
};
use crate::loss::{total_loss, LossConfig, LossError};
use crate::raster::{project_attributes, render, render_backward, RenderConfig};
use crate::synth::score;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("diverged at step {step}: loss {loss}")]
    DivergenceDetected { step: usize, loss: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("dataset has no frames")]
    NoFrames,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Spatiotemporal,
    SpatialOnly,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Stage {
    pub voxel_size: f64,
    pub steps: usize,
}

/// Coarse-to-fine stage plan plus warm-up.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Schedule {
    pub stages: Vec<Stage>,
    pub warmup_steps: usize,
    pub mode: ScheduleMode,
}

impl Schedule {
    /// 6000 steps: 10 cm for 4000, 5 cm for 1000, 2 cm for 1000; 500-step warm-up.
    pub fn default_spatiotemporal() -> Schedule {
        Schedule {
            stages: vec![
                Stage { voxel_size: 0.10, steps: 4000 },
                Stage { voxel_size: 0.05, steps: 1000 },
                Stage { voxel_size: 0.02, steps: 1000 },
            ],
            warmup_steps: 500,
            mode: ScheduleMode::Spatiotemporal,
        }
    }

    /// 3000 steps: 10 cm for 2000, 5 cm for 500, 2 cm for 500.
    pub fn default_spatial_only() -> Schedule {
        Schedule {
            stages: vec![
                Stage { voxel_size: 0.10, steps: 2000 },
                Stage { voxel_size: 0.05, steps: 500 },
                Stage { voxel_size: 0.02, steps: 500 },
            ],
            warmup_steps: 500,
            mode: ScheduleMode::SpatialOnly,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps).sum()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.stages.is_empty() {
            return Err(TrainError::InvalidSchedule("no stages".into()));
        }
        for s in &self.stages {
            if s.steps == 0 {
                return Err(TrainError::InvalidSchedule("stage with zero steps".into()));
            }
            if s.voxel_size <= 0.0 {
                return Err(TrainError::InvalidSchedule("non-positive voxel size".into()));
            }
        }
        for w in self.stages.windows(2) {
            if w[1].voxel_size >= w[0].voxel_size {
                return Err(TrainError::InvalidSchedule(
                    "voxel sizes must strictly decrease across stages".into(),
                ));
            }
        }
        if self.warmup_steps >= self.total_steps() {
            return Err(TrainError::InvalidSchedule(
                "warm-up must end before the last step".into(),
            ));
        }
        Ok(())
    }
}

/// Active voxel size at `step` and whether the stage (re-)downsampling fires.
pub fn stage_controller(schedule: &Schedule, step: usize) -> (f64, bool) {
    let mut start = 0;
    for stage in &schedule.stages {
        if step < start + stage.steps {
            return (stage.voxel_size, step == start);
        }
        start += stage.steps;
    }
    panic!("step {step} beyond schedule total {}", schedule.total_steps());
}

/// Linearly decayed learning rate: base at step 0, 0.1x base at the final step.
pub fn decayed_rate(base: f64, step: usize, total_steps: usize, final_factor: f64) -> f64 {
    if total_steps <= 1 {
        return base;
    }
    let progress = step as f64 / (total_steps - 1) as f64;
    base * (1.0 - (1.0 - final_factor) * progress)
}

/// Per-group Adam moments.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> AdamState {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Advance the moments and return the update vector u; the caller applies
    /// `param <- param - u` (or the equivalent retraction).
    pub fn update(&mut self, grads: &[f64], lr: f64) -> Vec<f64> {
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let b2t = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let mut out = Vec::with_capacity(grads.len());
        for i in 0..grads.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            out.push(lr * m_hat / (v_hat.sqrt() + ADAM_EPS));
        }
        out
    }
}

/// Standard in-place Adam step.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    let updates = state.update(grads, lr);
    for (p, u) in params.iter_mut().zip(&updates) {
        *p -= u;
    }
}

/// One ground-truth frame of one camera.
#[derive(Debug, Clone)]
pub struct Frame {
    /// Capture timestamp on the camera's own clock, seconds.
    pub timestamp: f64,
    /// H x W x 3 image in [0, 1].
    pub image: Vec<f64>,
}

/// Everything `run_calibration` consumes, already in memory.
#[derive(Debug, Clone)]
pub struct TrainDataset {
    pub trajectory: Trajectory,
    pub raw_cloud: WorldCloud,
    pub cameras: Vec<CameraModel>,
    /// Frames per camera, time-ordered.
    pub frames: Vec<Vec<Frame>>,
    /// Ground-truth calibration when the synthetic harness provides one;
    /// enables the error columns of the metrics log.
    pub truth: Option<CalibrationState>,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub lr_rotation: f64,
    pub lr_translation: f64,
    pub lr_temporal: f64,
    pub lr_hash: f64,
    pub lr_mlp: f64,
    pub hash_decay: f64,
    pub lr_final_factor: f64,
    pub field: FieldConfig,
    pub loss: LossConfig,
    pub render: RenderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_rotation: 1e-4,
            lr_translation: 5e-3,
            lr_temporal: 1e-3,
            lr_hash: 1e-2,
            lr_mlp: 1e-3,
            hash_decay: 1e-4,
            lr_final_factor: 0.1,
            field: FieldConfig::default(),
            loss: LossConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MetricsRow {
    pub step: usize,
    pub rot_err_deg: Option<f64>,
    pub trans_err_cm: Option<f64>,
    pub dt_err_ms: Option<f64>,
    pub total_loss: f64,
    pub voxel_cm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossRow {
    pub step: usize,
    pub total: f64,
    pub l1: f64,
    pub dssim: f64,
    pub scale_reg: f64,
    pub stage_voxel_cm: f64,
}

pub struct RunResult {
    pub calibration: CalibrationState,
    pub field: FieldParams,
    pub metrics: Vec<MetricsRow>,
    pub losses: Vec<LossRow>,
    pub wall_seconds: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,rot_err_deg,trans_err_cm,dt_err_ms,total_loss,voxel_cm,wall_ms\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step,
            opt(r.rot_err_deg),
            opt(r.trans_err_cm),
            opt(r.dt_err_ms),
            r.total_loss,
            r.voxel_cm,
            r.wall_ms
        ));
    }
    out
}

pub fn losses_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("step,total,l1,dssim,scale_reg,stage_voxel_cm\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.total, r.l1, r.dssim, r.scale_reg, r.stage_voxel_cm
        ));
    }
    out
}

struct CalibOptim {
    rotation: Vec<AdamState>,
    translation: Vec<AdamState>,
    temporal: Vec<AdamState>,
}

/// Execute the full calibration run.
///
/// Each step samples one frame uniformly at random (seeded), renders it with
/// the current calibration and field, and backpropagates the photometric +
/// regularization loss into every parameter group. Calibration groups are
/// frozen during warm-up and whenever their learning rate is zero.
pub fn run_calibration(
    dataset: &TrainDataset,
    initial_calib: &CalibrationState,
    schedule: &Schedule,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<RunResult, TrainError> {
    schedule.validate()?;
    let start = Instant::now();
    let total_steps = schedule.total_steps();
    let n_cameras = dataset.cameras.len();
    assert_eq!(dataset.frames.len(), n_cameras);
    assert_eq!(initial_calib.cameras.len(), n_cameras);

    // Flat frame index -> (camera, frame) for uniform sampling.
    let mut frame_index = Vec::new();
    for (cam, frames) in dataset.frames.iter().enumerate() {
        for fi in 0..frames.len() {
            frame_index.push((cam, fi));
        }
    }
    if frame_index.is_empty() {
        return Err(TrainError::NoFrames);
    }

    let mut calib = initial_calib.clone();
    let field_aabb = dataset.raw_cloud.aabb.padded(0.1);
    let mut field = FieldParams::init(cfg.field, field_aabb, schedule.stages[0].voxel_size, seed);
    let mut hash_opt = AdamState::new(field.hash_tables.len());
    let mut mlp_opt = AdamState::new(field.mlp.param_count());
    let mut calib_opt = CalibOptim {
        rotation: (0..n_cameras).map(|_| AdamState::new(3)).collect(),
        translation: (0..n_cameras).map(|_| AdamState::new(3)).collect(),
        temporal: (0..n_cameras).map(|_| AdamState::new(1)).collect(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stage_points: Vec<Vec3> = Vec::new();
    let mut metrics = Vec::with_capacity(total_steps);
    let mut losses = Vec::with_capacity(total_steps);

    for step in 0..total_steps {
        let (voxel, boundary) = stage_controller(schedule, step);
        if boundary {
            stage_points = voxel_downsample(&dataset.raw_cloud, voxel).positions;
            field.voxel_size = voxel;
        }

        let (cam_id, frame_id) = frame_index[rng.gen_range(0..frame_index.len())];
        let camera = &dataset.cameras[cam_id];
        let frame = &dataset.frames[cam_id][frame_id];

        let geo = FrameGeometry::compute(&dataset.trajectory, &calib, cam_id, frame.timestamp)?;
        let points_cam_all = transform_points_to_camera(&geo.world_pose, &stage_points);
        let (points_cam, index_map) = cull_behind_camera(&points_cam_all, camera.near);
        let world_points: Vec<Vec3> = index_map.iter().map(|&i| stage_points[i]).collect();

        let (attrs, cache) = field_forward(&world_points, &field)?;
        let rotations_cam = rotate_gaussian_orientations(&geo.world_pose, &attrs.rotations);
        let projected = project_attributes(&points_cam, &rotations_cam, &attrs, camera, &cfg.render);
        let buffer = render(&projected, camera, &cfg.render);

        let (breakdown, grad_image, grad_scales_reg) = total_loss(
            &buffer.color,
            &frame.image,
            camera.width,
            camera.height,
            &attrs.scales,
            &cfg.loss,
        )?;
        if !breakdown.total.is_finite() {
            return Err(TrainError::DivergenceDetected {
                step,
                loss: breakdown.total,
            });
        }

        let mut raster_grads = render_backward(
            &projected,
            &points_cam,
            &rotations_cam,
            &attrs.scales,
            camera,
            &cfg.render,
            &buffer,
            &grad_image,
        );
        for (g, reg) in raster_grads.scales.iter_mut().zip(&grad_scales_reg) {
            *g += reg;
        }

        // Route camera-frame rotation gradients back to the world-frame
        // quaternions the field produced: r_cam = q_w_inv * r, so
        // dL/dr = q_w * dL/dr_cam.
        let q_w = geo.world_pose.rotation.into_inner();
        let world_rot_grads: Vec<Quaternion<f64>> =
            raster_grads.rotations.iter().map(|g| q_w * g).collect();

        let upstream = AttributeGradients {
            colors: raster_grads.colors.clone(),
            opacities: raster_grads.opacities.clone(),
            scales: raster_grads.scales.clone(),
            rotations: world_rot_grads,
        };
        let field_grads = field_backward(&field, &cache, &attrs, &upstream);

        let pose_grads = geo.pose_gradients(
            &world_points,
            &attrs.rotations,
            &raster_grads.positions,
            &raster_grads.rotations,
        );

        // Field update (every step, warm-up included).
        let lr_hash = decayed_rate(cfg.lr_hash, step, total_steps, cfg.lr_final_factor);
        let lr_mlp = decayed_rate(cfg.lr_mlp, step, total_steps, cfg.lr_final_factor);
        if lr_hash > 0.0 {
            adam_step(&mut field.hash_tables, &field_grads.hash_tables, &mut hash_opt, lr_hash);
            hash_weight_decay(&mut field, cfg.hash_decay, lr_hash);
        }
        if lr_mlp > 0.0 {
            let mut flat = field.mlp.flatten();
            adam_step(&mut flat, &field_grads.mlp.flatten(), &mut mlp_opt, lr_mlp);
            field.mlp.set_from_flat(&flat);
        }

        // Calibration update for the sampled camera after warm-up.
        if step >= schedule.warmup_steps {
            let cam_calib = &mut calib.cameras[cam_id];
            let lr_rot = decayed_rate(cfg.lr_rotation, step, total_steps, cfg.lr_final_factor);
            let lr_trans = decayed_rate(cfg.lr_translation, step, total_steps, cfg.lr_final_factor);
            let lr_dt = decayed_rate(cfg.lr_temporal, step, total_steps, cfg.lr_final_factor);
            let mut d_rot = Vec3::zeros();
            let mut d_trans = Vec3::zeros();
            let mut d_time = 0.0;
            if cam_calib.optimize_extrinsic && lr_rot > 0.0 {
                let u = calib_opt.rotation[cam_id].update(pose_grads.rotation.as_slice(), lr_rot);
                d_rot = Vec3::new(u[0], u[1], u[2]);
            }
            if cam_calib.optimize_extrinsic && lr_trans > 0.0 {
                let u =
                    calib_opt.translation[cam_id].update(pose_grads.translation.as_slice(), lr_trans);
                d_trans = Vec3::new(u[0], u[1], u[2]);
            }
            let temporal_enabled =
                schedule.mode == ScheduleMode::Spatiotemporal && cam_calib.optimize_temporal;
            if temporal_enabled && lr_dt > 0.0 {
                let u = calib_opt.temporal[cam_id].update(&[pose_grads.time_offset], lr_dt);
                d_time = u[0];
            }
            retract_calibration(cam_calib, d_rot, d_trans, d_time);
        }

        let (rot_err, trans_err, dt_err) = match &dataset.truth {
            Some(truth) => {
                let mut rot = 0.0;
                let mut trans = 0.0;
                let mut dt = 0.0;
                for c in 0..n_cameras {
                    let e = score(&truth.cameras[c], &calib.cameras[c]);
                    rot += e.rotation_deg;
                    trans += e.translation_cm;
                    dt += e.temporal_ms;
                }
                let n = n_cameras as f64;
                (Some(rot / n), Some(trans / n), Some(dt / n))
            }
            None => (None, None, None),
        };
        metrics.push(MetricsRow {
            step,
            rot_err_deg: rot_err,
            trans_err_cm: trans_err,
            dt_err_ms: dt_err,
            total_loss: breakdown.total,
            voxel_cm: voxel * 100.0,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        losses.push(LossRow {
            step,
            total: breakdown.total,
            l1: breakdown.l1,
            dssim: breakdown.dssim,
            scale_reg: breakdown.scale_reg,
            stage_voxel_cm: voxel * 100.0,
        });
    }

    Ok(RunResult {
        calibration: calib,
        field,
        metrics,
        losses,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedules_match_stage_plan() {
        let st = Schedule::default_spatiotemporal();
        assert_eq!(st.total_steps(), 6000);
        st.validate().unwrap();
        assert_eq!(stage_controller(&st, 0), (0.10, true));
        assert_eq!(stage_controller(&st, 1), (0.10, false));
        assert_eq!(stage_controller(&st, 3999), (0.10, false));
        assert_eq!(stage_controller(&st, 4000), (0.05, true));
        assert_eq!(stage_controller(&st, 4001), (0.05, false));
        assert_eq!(stage_controller(&st, 5000), (0.02, true));
        assert_eq!(stage_controller(&st, 5999), (0.02, false));

        let sp = Schedule::default_spatial_only();
        assert_eq!(sp.total_steps(), 3000);
        assert_eq!(stage_controller(&sp, 1999), (0.10, false));
        assert_eq!(stage_controller(&sp, 2000), (0.05, true));
        assert_eq!(stage_controller(&sp, 2500), (0.02, true));
    }

    #[test]
    fn redownsampling_fires_exactly_once_per_stage() {
        let st = Schedule::default_spatiotemporal();
        let fires: Vec<usize> = (0..st.total_steps())
            .filter(|&s| stage_controller(&st, s).1)
            .collect();
        assert_eq!(fires, vec![0, 4000, 5000]);
    }

    #[test]
    fn voxel_size_is_monotonically_non_increasing() {
        for schedule in [Schedule::default_spatiotemporal(), Schedule::default_spatial_only()] {
            let mut last = f64::INFINITY;
            for s in 0..schedule.total_steps() {
                let (v, _) = stage_controller(&schedule, s);
                assert!(v <= last);
                last = v;
            }
        }
    }

    #[test]
    fn schedule_validation_rejects_bad_plans() {
        let mut s = Schedule::default_spatiotemporal();
        s.stages[2].voxel_size = 0.2;
        assert!(s.validate().is_err());

        let mut s = Schedule::default_spatiotemporal();
        s.warmup_steps = 6000;
        assert!(s.validate().is_err());

        let mut s = Schedule::default_spatiotemporal();
        s.stages[0].steps = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn adam_zero_gradient_preserves_parameters() {
        let mut p = vec![1.5, -2.0, 0.3];
        let g = vec![0.0; 3];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &g, &mut st, 1e-2);
        assert_eq!(p, vec![1.5, -2.0, 0.3]);
    }

    /// Adam's unit-step property: with a constant gradient the update
    /// magnitude converges to the learning rate.
    #[test]
    fn adam_constant_gradient_unit_step() {
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        let lr = 1e-3;
        let mut last = 0.0;
        for _ in 0..200 {
            let before = p[0];
            adam_step(&mut p, &[0.37], &mut st, lr);
            last = (p[0] - before).abs();
        }
        assert!((last - lr).abs() < 1e-6, "step size {last}");
    }

    #[test]
    fn decayed_rate_hits_tenth_at_final_step() {
        let base = 5e-3;
        let total = 6000;
        assert_eq!(decayed_rate(base, 0, total, 0.1), base);
        let final_rate = decayed_rate(base, total - 1, total, 0.1);
        assert!((final_rate - 0.1 * base).abs() < 1e-12);
        let mid = decayed_rate(base, (total - 1) / 2, total, 0.1);
        assert!(mid < base && mid > 0.1 * base);
    }

    #[test]
    fn csv_headers_match_interface() {
        let m = metrics_csv(&[]);
        assert_eq!(m, "step,rot_err_deg,trans_err_cm,dt_err_ms,total_loss,voxel_cm,wall_ms\n");
        let l = losses_csv(&[]);
        assert_eq!(l, "step,total,l1,dssim,scale_reg,stage_voxel_cm\n");
    }

    #[test]
    fn metrics_csv_leaves_error_columns_empty_without_truth() {
        let rows = [MetricsRow {
            step: 3,
            rot_err_deg: None,
            trans_err_cm: None,
            dt_err_ms: None,
            total_loss: 0.25,
            voxel_cm: 10.0,
            wall_ms: 12.0,
        }];
        let csv = metrics_csv(&rows);
        assert!(csv.lines().nth(1).unwrap().starts_with("3,,,,0.25,10,"));
    }
}
