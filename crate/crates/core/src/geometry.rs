//! Rigid-body math, continuous trajectory interpolation, calibration
//! parameterization, and analytic derivatives of camera poses with respect to
//! extrinsic and temporal parameters.
//!
//! Conventions:
//! - A [`Pose`] maps points from its local frame into its parent frame:
//!   `p_parent = R * p_local + t`.
//! - The camera extrinsic maps camera frame -> LiDAR frame.
//! - The camera optical axis is +z, +x right, +y down.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Quat = UnitQuaternion<f64>;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("time {t} s outside trajectory span [{start}, {end}] s (clamp margin {margin} s)")]
    TimeOutOfRange {
        t: f64,
        start: f64,
        end: f64,
        margin: f64,
    },
    #[error("degenerate trajectory segment: knots {i0} and {i1} share timestamp {t} s")]
    DegenerateSegment { i0: usize, i1: usize, t: f64 },
    #[error("camera index {0} not registered in calibration state")]
    UnknownCamera(usize),
}

/// Rigid transform in SE(3): unit quaternion rotation plus translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Quat,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Quat, translation: Vec3) -> Self {
        // Renormalize so the unit-norm invariant survives long composition chains.
        let q = UnitQuaternion::new_normalize(rotation.into_inner());
        Pose {
            rotation: q,
            translation,
        }
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Quat::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_parts(qw: f64, qx: f64, qy: f64, qz: f64, tx: f64, ty: f64, tz: f64) -> Self {
        Pose::new(
            UnitQuaternion::new_normalize(Quaternion::new(qw, qx, qy, qz)),
            Vec3::new(tx, ty, tz),
        )
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.translation + self.rotation * other.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv_rot = self.rotation.inverse();
        Pose::new(inv_rot, -(inv_rot * self.translation))
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Geodesic rotation angle between the two poses, radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        geodesic_angle(&self.rotation, &other.rotation)
    }
}

/// Geodesic angle between two rotations, radians. Exactly zero for
/// bit-identical quaternions (the relative quaternion's vector part cancels
/// term by term).
pub fn geodesic_angle(a: &Quat, b: &Quat) -> f64 {
    let (aw, ai, aj, ak) = (a.w, a.i, a.j, a.k);
    let (bw, bi, bj, bk) = (b.w, b.i, b.j, b.k);
    let w = aw * bw + ai * bi + aj * bj + ak * bk;
    let i = aw * bi - ai * bw - aj * bk + ak * bj;
    let j = aw * bj - aj * bw - ak * bi + ai * bk;
    let k = aw * bk - ak * bw - ai * bj + aj * bi;
    2.0 * (i * i + j * j + k * k).sqrt().atan2(w.abs())
}

/// Continuous time -> Pose function built from discrete timestamped poses.
/// Translation is linear in time, rotation follows constant-angular-velocity
/// SLERP between bracketing knots.
#[derive(Debug, Clone)]
pub struct Trajectory {
    knots: Vec<(f64, Pose)>,
    /// Permitted overshoot beyond the span before evaluation errors out.
    /// Queries inside the margin are clamped to the span. Default 0: hard error.
    pub clamp_margin: f64,
}

impl Trajectory {
    pub fn new(knots: Vec<(f64, Pose)>) -> Result<Self, GeometryError> {
        assert!(knots.len() >= 2, "trajectory needs at least two knots");
        for i in 1..knots.len() {
            if knots[i].0 <= knots[i - 1].0 {
                return Err(GeometryError::DegenerateSegment {
                    i0: i - 1,
                    i1: i,
                    t: knots[i].0,
                });
            }
        }
        Ok(Trajectory {
            knots,
            clamp_margin: 0.0,
        })
    }

    pub fn start_time(&self) -> f64 {
        self.knots[0].0
    }

    pub fn end_time(&self) -> f64 {
        self.knots[self.knots.len() - 1].0
    }

    pub fn knots(&self) -> &[(f64, Pose)] {
        &self.knots
    }

    fn check_range(&self, t: f64) -> Result<f64, GeometryError> {
        let (start, end) = (self.start_time(), self.end_time());
        if t < start - self.clamp_margin || t > end + self.clamp_margin {
            return Err(GeometryError::TimeOutOfRange {
                t,
                start,
                end,
                margin: self.clamp_margin,
            });
        }
        Ok(t.clamp(start, end))
    }

    /// Index of the segment [knots[i], knots[i+1]] active at time `t`
    /// (t already clamped to the span). The last knot maps to the last segment.
    fn segment_index(&self, t: f64) -> usize {
        let n = self.knots.len();
        let upper = self.knots.partition_point(|&(kt, _)| kt <= t);
        upper.clamp(1, n - 1) - 1
    }

    pub fn sample(&self, t: f64) -> Result<Pose, GeometryError> {
        let t = self.check_range(t)?;
        let i = self.segment_index(t);
        let (t0, p0) = self.knots[i];
        let (t1, p1) = self.knots[i + 1];
        if t == t0 {
            return Ok(p0);
        }
        if t == t1 {
            return Ok(p1);
        }
        let s = (t - t0) / (t1 - t0);
        let translation = p0.translation + s * (p1.translation - p0.translation);
        let rotation = slerp(&p0.rotation, &p1.rotation, s);
        Ok(Pose::new(rotation, translation))
    }

    /// World-frame translational velocity and body-frame angular velocity of
    /// the segment active at `t` (one-sided at knot boundaries).
    pub fn segment_velocity(&self, t: f64) -> Result<(Vec3, Vec3), GeometryError> {
        let t = self.check_range(t)?;
        let i = self.segment_index(t);
        let (t0, p0) = self.knots[i];
        let (t1, p1) = self.knots[i + 1];
        let dt = t1 - t0;
        if dt <= 0.0 {
            return Err(GeometryError::DegenerateSegment { i0: i, i1: i + 1, t: t0 });
        }
        let linear = (p1.translation - p0.translation) / dt;
        let angular = shortest_rotation_vector(&p0.rotation, &p1.rotation) / dt;
        Ok((linear, angular))
    }
}

/// Rotation vector (angle * axis, radians) taking `q0` to `q1` along the
/// shortest path, expressed in the body frame of `q0`.
fn shortest_rotation_vector(q0: &Quat, q1: &Quat) -> Vec3 {
    let mut rel = (q0.inverse() * q1).into_inner();
    if rel.w < 0.0 {
        rel = -rel;
    }
    UnitQuaternion::new_normalize(rel).scaled_axis()
}

/// Constant-angular-velocity spherical interpolation with shortest-path sign
/// handling. Exact at both endpoints.
pub fn slerp(q0: &Quat, q1: &Quat, s: f64) -> Quat {
    if s == 0.0 {
        return *q0;
    }
    if s == 1.0 {
        return *q1;
    }
    let rotvec = shortest_rotation_vector(q0, q1);
    q0 * UnitQuaternion::from_scaled_axis(s * rotvec)
}

/// Per-camera calibration unknowns: extrinsic (camera -> LiDAR) and time offset.
#[derive(Debug, Clone, Copy)]
pub struct CameraCalibration {
    pub extrinsic: Pose,
    /// Seconds to add to the camera clock to land on the LiDAR clock.
    pub time_offset: f64,
    pub optimize_extrinsic: bool,
    pub optimize_temporal: bool,
}

impl CameraCalibration {
    pub fn new(extrinsic: Pose, time_offset: f64) -> Self {
        CameraCalibration {
            extrinsic,
            time_offset,
            optimize_extrinsic: true,
            optimize_temporal: true,
        }
    }
}

/// The optimized unknowns of a calibration run, one entry per camera.
#[derive(Debug, Clone)]
pub struct CalibrationState {
    pub cameras: Vec<CameraCalibration>,
}

impl CalibrationState {
    pub fn new(cameras: Vec<CameraCalibration>) -> Self {
        CalibrationState { cameras }
    }

    pub fn camera(&self, id: usize) -> Result<&CameraCalibration, GeometryError> {
        self.cameras.get(id).ok_or(GeometryError::UnknownCamera(id))
    }
}

/// Pinhole intrinsics plus image geometry. No distortion model.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Near-plane distance in meters used for behind-camera culling.
    pub near: f64,
}

impl CameraModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(format!("focal lengths must be positive, got ({}, {})", self.fx, self.fy));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(format!("cx {} outside (0, {})", self.cx, self.width));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(format!("cy {} outside (0, {})", self.cy, self.height));
        }
        Ok(())
    }
}

/// 𝒯(t): LiDAR pose at time `t`.
pub fn interpolate_pose(traj: &Trajectory, t: f64) -> Result<Pose, GeometryError> {
    traj.sample(t)
}

/// Absolute pose of `camera` capturing at frame time `t_frame` (camera clock):
/// 𝒯(t_frame + δ) ∘ extrinsic.
pub fn camera_world_pose(
    traj: &Trajectory,
    calib: &CalibrationState,
    camera: usize,
    t_frame: f64,
) -> Result<Pose, GeometryError> {
    let cam = calib.camera(camera)?;
    let lidar = traj.sample(t_frame + cam.time_offset)?;
    Ok(lidar.compose(&cam.extrinsic))
}

/// World points into the camera frame of `pose` (the camera's world pose).
pub fn transform_points_to_camera(pose: &Pose, points: &[Vec3]) -> Vec<Vec3> {
    let inv = pose.inverse();
    points.iter().map(|p| inv.transform_point(p)).collect()
}

/// World-frame Gaussian orientations into the camera frame of `pose`:
/// r_cam = q(Rᵀ) ⊗ r. The product of unit quaternions stays unit.
pub fn rotate_gaussian_orientations(pose: &Pose, rotations: &[Quat]) -> Vec<Quat> {
    let inv_rot = pose.rotation.inverse();
    rotations.iter().map(|r| inv_rot * r).collect()
}

/// Gradients of a scalar loss with respect to one camera's calibration, in the
/// retraction parameterization used by the optimizer: rotation tangent `ω`
/// (applied as exp([ω]×) on the left of the extrinsic rotation) plus additive
/// translation, plus the scalar time offset.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PoseGradients {
    pub rotation: Vec3,
    pub translation: Vec3,
    pub time_offset: f64,
}

/// Everything needed to evaluate one frame's camera pose and to pull loss
/// gradients back onto the calibration parameters.
#[derive(Debug, Clone)]
pub struct FrameGeometry {
    pub world_pose: Pose,
    lidar_pose: Pose,
    extrinsic: Pose,
    /// World-frame translational velocity of the active trajectory segment.
    seg_linear_velocity: Vec3,
    /// Body-frame angular velocity of the active trajectory segment, rad/s.
    seg_angular_velocity: Vec3,
}

impl FrameGeometry {
    pub fn compute(
        traj: &Trajectory,
        calib: &CalibrationState,
        camera: usize,
        t_frame: f64,
    ) -> Result<Self, GeometryError> {
        let cam = calib.camera(camera)?;
        let t = t_frame + cam.time_offset;
        let lidar_pose = traj.sample(t)?;
        let (lin, ang) = traj.segment_velocity(t)?;
        Ok(FrameGeometry {
            world_pose: lidar_pose.compose(&cam.extrinsic),
            lidar_pose,
            extrinsic: cam.extrinsic,
            seg_linear_velocity: lin,
            seg_angular_velocity: ang,
        })
    }

    /// Backpropagate per-point camera-frame gradients to the calibration
    /// parameters of this frame's camera.
    ///
    /// `world_points` / `world_rotations` are the inputs that were transformed
    /// forward; `grad_points_cam` is dL/dX_cam and `grad_rots_cam` is dL/dr_cam
    /// (raw 4-vector per quaternion, same storage order as `Quaternion`).
    pub fn pose_gradients(
        &self,
        world_points: &[Vec3],
        world_rotations: &[Quat],
        grad_points_cam: &[Vec3],
        grad_rots_cam: &[Quaternion<f64>],
    ) -> PoseGradients {
        assert_eq!(world_points.len(), grad_points_cam.len());
        assert_eq!(world_rotations.len(), grad_rots_cam.len());

        let r_ext = self.extrinsic.rotation.to_rotation_matrix();
        let r_ext_t = r_ext.transpose();
        let t_ext = self.extrinsic.translation;
        let lidar_inv = self.lidar_pose.inverse();
        let q_ext_inv = self.extrinsic.rotation.inverse().into_inner();
        let q_lidar_inv = lidar_inv.rotation.into_inner();
        let omega = self.seg_angular_velocity;
        let vel_lidar = lidar_inv.rotation * self.seg_linear_velocity;

        // Basis quaternions for the extrinsic rotation tangent:
        //   d r_cam / dω_k = (q_Eᶜ ⊗ (-½ ê_k) ⊗ q_Pᶜ) ⊗ r
        let basis = [
            Quaternion::new(0.0, -0.5, 0.0, 0.0),
            Quaternion::new(0.0, 0.0, -0.5, 0.0),
            Quaternion::new(0.0, 0.0, 0.0, -0.5),
        ];
        let rot_basis: Vec<Quaternion<f64>> =
            basis.iter().map(|e| q_ext_inv * e * q_lidar_inv).collect();
        // d r_cam / dδ = (q_Eᶜ ⊗ (0, -ω/2) ⊗ q_Pᶜ) ⊗ r
        let dq_dt = q_ext_inv
            * Quaternion::new(0.0, -0.5 * omega.x, -0.5 * omega.y, -0.5 * omega.z)
            * q_lidar_inv;

        let mut grad = PoseGradients::default();
        for (p_world, g_cam) in world_points.iter().zip(grad_points_cam) {
            // Y: point in the LiDAR frame at the frame's capture time.
            let y = lidar_inv.transform_point(p_world);
            let rg = r_ext * g_cam;
            grad.translation -= rg;
            grad.rotation -= (y - t_ext).cross(&rg);
            // δ through the point path: dX_cam/dδ = R_Eᵀ (-ω×Y - R_Pᵀ v)
            let dy_dt = -omega.cross(&y) - vel_lidar;
            grad.time_offset += g_cam.dot(&(r_ext_t * dy_dt));
        }
        for (r, g_r) in world_rotations.iter().zip(grad_rots_cam) {
            let rq = r.into_inner();
            for k in 0..3 {
                grad.rotation[k] += (rot_basis[k] * rq).dot(g_r);
            }
            grad.time_offset += (dq_dt * rq).dot(g_r);
        }
        grad
    }
}

/// Apply one optimizer update in the tangent parameterization: rotate the
/// extrinsic by exp([-dω]×) on the left, shift translation and offset
/// additively, and renormalize the quaternion.
pub fn retract_calibration(cam: &mut CameraCalibration, d_rot: Vec3, d_trans: Vec3, d_time: f64) {
    let dq = UnitQuaternion::from_scaled_axis(-d_rot);
    cam.extrinsic = Pose::new(dq * cam.extrinsic.rotation, cam.extrinsic.translation - d_trans);
    cam.time_offset -= d_time;
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random_quat(rng: &mut ChaCha8Rng) -> Quat {
        UnitQuaternion::new_normalize(Quaternion::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ))
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        Pose::new(
            random_quat(rng),
            Vec3::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            ),
        )
    }

    /// Matrix-route rotation interpolation: R(s) = R0 · exp(s·[φ]×) with the
    /// log and exp both computed on rotation matrices (Rodrigues).
    fn slerp_matrix_oracle(q0: &Quat, q1: &Quat, s: f64) -> Matrix3<f64> {
        let r0 = q0.to_rotation_matrix().into_inner();
        let r1 = q1.to_rotation_matrix().into_inner();
        let rel = r0.transpose() * r1;
        let cos_angle = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        let angle = cos_angle.acos();
        if angle < 1e-12 {
            return r0;
        }
        let axis = Vec3::new(
            rel[(2, 1)] - rel[(1, 2)],
            rel[(0, 2)] - rel[(2, 0)],
            rel[(1, 0)] - rel[(0, 1)],
        ) / (2.0 * angle.sin());
        let k = Matrix3::new(
            0.0, -axis.z, axis.y, //
            axis.z, 0.0, -axis.x, //
            -axis.y, axis.x, 0.0,
        );
        let theta = s * angle;
        r0 * (Matrix3::identity() + theta.sin() * k + (1.0 - theta.cos()) * (k * k))
    }

    #[test]
    fn pose_compose_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = random_pose(&mut rng);
            let id = p.compose(&p.inverse());
            assert!(id.rotation.angle() < 1e-9);
            assert!(id.translation.norm() < 1e-9);
            assert!((id.rotation.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn interpolation_returns_knots_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let knots: Vec<(f64, Pose)> = (0..5).map(|i| (i as f64 * 0.3, random_pose(&mut rng))).collect();
        let traj = Trajectory::new(knots.clone()).unwrap();
        for (t, p) in &knots {
            let q = traj.sample(*t).unwrap();
            assert_eq!(q.rotation, p.rotation);
            assert_eq!(q.translation, p.translation);
        }
    }

    #[test]
    fn slerp_midpoint_halves_z_rotation() {
        let p0 = Pose::identity();
        let p1 = Pose::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2),
            Vec3::new(2.0, 0.0, 0.0),
        );
        let traj = Trajectory::new(vec![(0.0, p0), (1.0, p1)]).unwrap();
        let mid = traj.sample(0.5).unwrap();
        assert!((mid.rotation.angle() - FRAC_PI_2 / 2.0).abs() < 1e-12);
        assert!((mid.translation - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn slerp_endpoint_and_midpoint_for_axis_rotations() {
        for axis in [Vector3::x_axis(), Vector3::y_axis(), Vector3::z_axis()] {
            for angle in [0.3, 1.1, 2.4] {
                let q0 = Quat::identity();
                let q1 = UnitQuaternion::from_axis_angle(&axis, angle);
                assert_eq!(slerp(&q0, &q1, 0.0), q0);
                assert_eq!(slerp(&q0, &q1, 1.0), q1);
                let mid = slerp(&q0, &q1, 0.5);
                assert!((mid.angle() - angle / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn slerp_matches_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let q0 = random_quat(&mut rng);
            let q1 = random_quat(&mut rng);
            let s = 0.37;
            let ours = slerp(&q0, &q1, s).to_rotation_matrix().into_inner();
            let oracle = slerp_matrix_oracle(&q0, &q1, s);
            assert!((ours - oracle).norm() < 1e-9);
        }
    }

    #[test]
    fn interpolation_is_continuous_at_knots() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let knots: Vec<(f64, Pose)> = (0..4).map(|i| (i as f64, random_pose(&mut rng))).collect();
        let traj = Trajectory::new(knots).unwrap();
        for knot_t in [1.0, 2.0] {
            for eps in [1e-6, 1e-9] {
                let before = traj.sample(knot_t - eps).unwrap();
                let after = traj.sample(knot_t + eps).unwrap();
                let at = traj.sample(knot_t).unwrap();
                assert!(before.rotation_angle_to(&at) < 1e-5);
                assert!(after.rotation_angle_to(&at) < 1e-5);
                assert!((before.translation - at.translation).norm() < 1e-5);
                assert!((after.translation - at.translation).norm() < 1e-5);
            }
        }
    }

    #[test]
    fn out_of_range_errors_and_clamp_margin() {
        let traj = Trajectory::new(vec![(0.0, Pose::identity()), (1.0, Pose::identity())]).unwrap();
        assert!(matches!(
            traj.sample(1.5),
            Err(GeometryError::TimeOutOfRange { .. })
        ));
        assert!(matches!(
            traj.sample(-0.1),
            Err(GeometryError::TimeOutOfRange { .. })
        ));
        let mut clamped = traj.clone();
        clamped.clamp_margin = 0.2;
        assert!(clamped.sample(1.1).is_ok());
        assert!(clamped.sample(1.3).is_err());
    }

    #[test]
    fn non_increasing_timestamps_rejected() {
        let err = Trajectory::new(vec![
            (0.0, Pose::identity()),
            (0.0, Pose::identity()),
        ]);
        assert!(matches!(err, Err(GeometryError::DegenerateSegment { .. })));
    }

    #[test]
    fn camera_world_pose_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let knots: Vec<(f64, Pose)> = (0..4).map(|i| (i as f64, random_pose(&mut rng))).collect();
        let traj = Trajectory::new(knots.clone()).unwrap();
        let calib = CalibrationState::new(vec![CameraCalibration::new(Pose::identity(), 0.0)]);
        let w = camera_world_pose(&traj, &calib, 0, 2.0).unwrap();
        assert_eq!(w.rotation, knots[2].1.rotation);
        assert_eq!(w.translation, knots[2].1.translation);

        // Pure-translation extrinsic on an identity trajectory.
        let flat = Trajectory::new(vec![(0.0, Pose::identity()), (1.0, Pose::identity())]).unwrap();
        let ext = Pose::new(Quat::identity(), Vec3::new(1.0, 0.0, 0.0));
        let calib = CalibrationState::new(vec![CameraCalibration::new(ext, 0.0)]);
        let w = camera_world_pose(&flat, &calib, 0, 0.5).unwrap();
        assert!((w.translation - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn camera_world_pose_time_offset_composes_by_hand() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let knots: Vec<(f64, Pose)> =
                (0..5).map(|i| (i as f64 * 0.5, random_pose(&mut rng))).collect();
            let traj = Trajectory::new(knots).unwrap();
            let ext = random_pose(&mut rng);
            let calib = CalibrationState::new(vec![CameraCalibration::new(ext, 0.05)]);
            let t = rng.gen_range(0.1..1.8);
            let w = camera_world_pose(&traj, &calib, 0, t).unwrap();
            let by_hand = interpolate_pose(&traj, t + 0.05).unwrap().compose(&ext);
            assert!(w.rotation_angle_to(&by_hand) < 1e-12);
            assert!((w.translation - by_hand.translation).norm() < 1e-12);
        }
    }

    #[test]
    fn unknown_camera_is_an_error() {
        let traj = Trajectory::new(vec![(0.0, Pose::identity()), (1.0, Pose::identity())]).unwrap();
        let calib = CalibrationState::new(vec![]);
        assert!(matches!(
            camera_world_pose(&traj, &calib, 0, 0.5),
            Err(GeometryError::UnknownCamera(0))
        ));
    }

    #[test]
    fn transform_points_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pose = random_pose(&mut rng);
        let points: Vec<Vec3> = (0..100)
            .map(|_| Vec3::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)))
            .collect();
        let cam = transform_points_to_camera(&pose, &points);
        assert_eq!(cam.len(), points.len());
        for (orig, c) in points.iter().zip(&cam) {
            assert!((pose.transform_point(c) - orig).norm() < 1e-9);
        }
        // Closed-form cases.
        let shifted = transform_points_to_camera(
            &Pose::new(Quat::identity(), Vec3::new(0.0, 0.0, 5.0)),
            &[Vec3::new(0.0, 0.0, 5.0)],
        );
        assert!(shifted[0].norm() < 1e-12);
        let same = transform_points_to_camera(&Pose::identity(), &points);
        assert_eq!(same, points);
    }

    #[test]
    fn rotate_orientations_matches_matrix_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pose = random_pose(&mut rng);
        let rots: Vec<Quat> = (0..50).map(|_| random_quat(&mut rng)).collect();
        let out = rotate_gaussian_orientations(&pose, &rots);
        let rt = pose.rotation.to_rotation_matrix().transpose();
        for (r, o) in rots.iter().zip(&out) {
            assert!(((o.norm()) - 1.0).abs() < 1e-12);
            let expected = rt * r.to_rotation_matrix();
            assert!((o.to_rotation_matrix().into_inner() - expected.into_inner()).norm() < 1e-9);
        }
        // 90° z-rotation pose sends the identity quaternion to a -90° z-rotation.
        let p = Pose::new(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2), Vec3::zeros());
        let out = rotate_gaussian_orientations(&p, &[Quat::identity()]);
        assert!((out[0].angle() - FRAC_PI_2).abs() < 1e-12);
        assert!((out[0].scaled_axis() - Vec3::new(0.0, 0.0, -FRAC_PI_2)).norm() < 1e-12);
    }

    #[test]
    fn composition_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let knots: Vec<(f64, Pose)> = (0..3).map(|i| (i as f64, random_pose(&mut rng))).collect();
        let traj = Trajectory::new(knots).unwrap();
        for _ in 0..50 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let t = rng.gen_range(0.0..2.0);
            let p = traj.sample(t).unwrap();
            let left = p.compose(&a).compose(&b);
            let right = p.compose(&a.compose(&b));
            assert!(left.rotation_angle_to(&right) < 1e-12);
            assert!((left.translation - right.translation).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_pose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let knots: Vec<(f64, Pose)> = (0..3).map(|i| (i as f64, random_pose(&mut rng))).collect();
        let traj = Trajectory::new(knots).unwrap();
        let calib = CalibrationState::new(vec![CameraCalibration::new(random_pose(&mut rng), 0.01)]);
        let frame = FrameGeometry::compute(&traj, &calib, 0, 1.3).unwrap();
        let pts = vec![Vec3::new(1.0, 2.0, 3.0); 4];
        let rots = vec![Quat::identity(); 4];
        let g = frame.pose_gradients(
            &pts,
            &rots,
            &vec![Vec3::zeros(); 4],
            &vec![Quaternion::new(0.0, 0.0, 0.0, 0.0); 4],
        );
        assert_eq!(g, PoseGradients::default());
    }

    /// Finite-difference oracle over a miniature loss that exercises both the
    /// point path and the quaternion path of `pose_gradients`.
    #[test]
    fn pose_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let knots: Vec<(f64, Pose)> =
                (0..4).map(|i| (i as f64 * 0.4, random_pose(&mut rng))).collect();
            let traj = Trajectory::new(knots).unwrap();
            let ext = random_pose(&mut rng);
            let delta = rng.gen_range(-0.05..0.05);
            let t_frame = rng.gen_range(0.3..0.9);
            let points: Vec<Vec3> = (0..6)
                .map(|_| Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)))
                .collect();
            let rots: Vec<Quat> = (0..6).map(|_| random_quat(&mut rng)).collect();
            // Fixed random targets so the loss has nonzero gradients.
            let pt_targets: Vec<Vec3> = (0..6)
                .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let rot_targets: Vec<Quaternion<f64>> = (0..6)
                .map(|_| Quaternion::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();

            let loss = |calib: &CalibrationState| -> f64 {
                let frame = FrameGeometry::compute(&traj, calib, 0, t_frame).unwrap();
                let pts_cam = transform_points_to_camera(&frame.world_pose, &points);
                let rots_cam = rotate_gaussian_orientations(&frame.world_pose, &rots);
                let mut l = 0.0;
                for (p, tgt) in pts_cam.iter().zip(&pt_targets) {
                    l += 0.5 * (p - tgt).norm_squared();
                }
                for (r, tgt) in rots_cam.iter().zip(&rot_targets) {
                    let d = r.into_inner() - tgt;
                    l += 0.5 * d.dot(&d);
                }
                l
            };

            let base = CalibrationState::new(vec![CameraCalibration::new(ext, delta)]);
            let frame = FrameGeometry::compute(&traj, &base, 0, t_frame).unwrap();
            let pts_cam = transform_points_to_camera(&frame.world_pose, &points);
            let rots_cam = rotate_gaussian_orientations(&frame.world_pose, &rots);
            let g_pts: Vec<Vec3> = pts_cam.iter().zip(&pt_targets).map(|(p, t)| p - t).collect();
            let g_rots: Vec<Quaternion<f64>> = rots_cam
                .iter()
                .zip(&rot_targets)
                .map(|(r, t)| r.into_inner() - t)
                .collect();
            let analytic = frame.pose_gradients(&points, &rots, &g_pts, &g_rots);

            let mut fd = PoseGradients::default();
            let h = 1e-6;
            for k in 0..3 {
                let mut axis = Vec3::zeros();
                axis[k] = 1.0;
                let perturbed = |sign: f64| {
                    let mut c = base.clone();
                    retract_calibration(&mut c.cameras[0], -sign * h * axis, Vec3::zeros(), 0.0);
                    loss(&c)
                };
                fd.rotation[k] = (perturbed(1.0) - perturbed(-1.0)) / (2.0 * h);
                let perturbed_t = |sign: f64| {
                    let mut c = base.clone();
                    retract_calibration(&mut c.cameras[0], Vec3::zeros(), -sign * h * axis, 0.0);
                    loss(&c)
                };
                fd.translation[k] = (perturbed_t(1.0) - perturbed_t(-1.0)) / (2.0 * h);
            }
            let perturbed_d = |sign: f64| {
                let mut c = base.clone();
                retract_calibration(&mut c.cameras[0], Vec3::zeros(), Vec3::zeros(), -sign * h);
                loss(&c)
            };
            fd.time_offset = (perturbed_d(1.0) - perturbed_d(-1.0)) / (2.0 * h);

            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
            for k in 0..3 {
                worst = worst.max(rel(analytic.rotation[k], fd.rotation[k]));
                worst = worst.max(rel(analytic.translation[k], fd.translation[k]));
            }
            worst = worst.max(rel(analytic.time_offset, fd.time_offset));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    /// On a linearly translating trajectory with identity rotations, the time
    /// offset gradient equals the translation gradient projected on velocity.
    #[test]
    fn time_gradient_projects_on_velocity() {
        let v = Vec3::new(0.8, -0.2, 0.1);
        let knots: Vec<(f64, Pose)> = (0..4)
            .map(|i| {
                let t = i as f64;
                (t, Pose::new(Quat::identity(), v * t))
            })
            .collect();
        let traj = Trajectory::new(knots).unwrap();
        let ext = Pose::new(Quat::identity(), Vec3::new(0.3, 0.1, -0.2));
        let calib = CalibrationState::new(vec![CameraCalibration::new(ext, 0.0)]);
        let frame = FrameGeometry::compute(&traj, &calib, 0, 1.5).unwrap();
        let points = vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, 0.5, 2.0)];
        let grads = vec![Vec3::new(0.2, -0.4, 0.6), Vec3::new(0.1, 0.3, -0.2)];
        let g = frame.pose_gradients(&points, &[], &grads, &[]);
        // With identity rotations everywhere, d X_cam/dδ = -v and the extrinsic
        // translation gradient is -Σ g, so dL/dδ = (Σ g)·(-v) = grad_t · v.
        let expected = g.translation.dot(&v);
        assert!((g.time_offset - expected).abs() < 1e-10);
    }
}
