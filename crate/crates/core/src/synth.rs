//! Synthetic ground-truth worlds: textured planar scenes sampled by
//! LiDAR-style scans along a wobbling trajectory, camera frames rendered by
//! the forward renderer itself, calibrated noise injection, and recovery
//! scoring. This is the calibration engine's acceptance oracle.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloud::{accumulate, cull_behind_camera, voxel_downsample, Scan, ScanSet};
use crate::field::GaussianAttributes;
use crate::geometry::{
    transform_points_to_camera, rotate_gaussian_orientations, CalibrationState, CameraCalibration,
    CameraModel, Pose, Quat, Trajectory, Vec3,
};
use crate::raster::{project, render, RenderConfig};
use crate::train::{Frame, TrainDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    Corridor,
    BoxRoom,
    ScatteredPlanes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    Straight,
    Arc,
    Zigzag,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub scene: SceneKind,
    pub trajectory: TrajectoryKind,
    pub n_cameras: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub frames_per_camera: usize,
    pub scan_count: usize,
    pub points_per_scan: usize,
    pub scan_range_m: f64,
    pub finest_voxel_m: f64,
    pub duration_s: f64,
    pub noise_rot_deg: f64,
    pub noise_trans_cm: f64,
    pub noise_time_ms: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            scene: SceneKind::Corridor,
            trajectory: TrajectoryKind::Straight,
            n_cameras: 1,
            image_width: 256,
            image_height: 128,
            frames_per_camera: 40,
            scan_count: 40,
            points_per_scan: 400,
            scan_range_m: 7.0,
            finest_voxel_m: 0.02,
            duration_s: 8.0,
            noise_rot_deg: 5.0,
            noise_trans_cm: 50.0,
            noise_time_ms: 100.0,
        }
    }
}

/// Recovery error between a true and an estimated camera calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationError {
    pub rotation_deg: f64,
    pub translation_cm: f64,
    pub temporal_ms: f64,
}

/// Geodesic rotation angle, Euclidean translation distance, absolute offset.
pub fn score(truth: &CameraCalibration, estimate: &CameraCalibration) -> CalibrationError {
    CalibrationError {
        rotation_deg: crate::geometry::geodesic_angle(
            &truth.extrinsic.rotation,
            &estimate.extrinsic.rotation,
        )
        .to_degrees(),
        translation_cm: (truth.extrinsic.translation - estimate.extrinsic.translation).norm()
            * 100.0,
        temporal_ms: (truth.time_offset - estimate.time_offset).abs() * 1e3,
    }
}

/// Per-axis sign-random perturbation at fixed magnitudes.
pub fn perturb_calibration(
    truth: &CalibrationState,
    rot_deg: f64,
    trans_cm: f64,
    time_ms: f64,
    seed: u64,
) -> CalibrationState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sign = move || if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let cameras = truth
        .cameras
        .iter()
        .map(|cam| {
            let rx = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), sign() * rot_deg.to_radians());
            let ry = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), sign() * rot_deg.to_radians());
            let rz = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), sign() * rot_deg.to_radians());
            let dt = Vec3::new(
                sign() * trans_cm / 100.0,
                sign() * trans_cm / 100.0,
                sign() * trans_cm / 100.0,
            );
            let mut out = *cam;
            // Direct construction keeps the zero-magnitude case bit-identical.
            out.extrinsic = Pose {
                rotation: cam.extrinsic.rotation * (rx * ry * rz),
                translation: cam.extrinsic.translation + dt,
            };
            out.time_offset = cam.time_offset + sign() * time_ms / 1e3;
            out
        })
        .collect();
    CalibrationState::new(cameras)
}

/// A textured rectangular patch: p(a, b) = origin + a*u + b*v.
#[derive(Debug, Clone)]
struct Surface {
    origin: Vec3,
    u: Vec3,
    v: Vec3,
    extent_u: f64,
    extent_v: f64,
    normal: Vec3,
    base_color: [f64; 3],
    /// Per-channel ramp slopes along u and v, in color units per extent.
    ramps: [[f64; 2]; 3],
    /// Aperiodic detail: (frequency u, frequency v, phase, amplitude) per
    /// octave, wavelengths chosen incommensurate so the photometric loss has
    /// no repeating local minima at the miscalibration scale.
    octaves: [[f64; 4]; 3],
}

impl Surface {
    fn new(origin: Vec3, u: Vec3, v: Vec3, extent_u: f64, extent_v: f64, rng: &mut ChaCha8Rng) -> Surface {
        let normal = u.cross(&v).normalize();
        let mut octaves = [[0.0; 4]; 3];
        for (o, (wavelength, amp)) in octaves
            .iter_mut()
            .zip([(1.9, 0.13), (0.71, 0.11), (0.27, 0.09)])
        {
            let w = wavelength * rng.gen_range(0.8..1.25);
            let dir = rng.gen_range(0.0..std::f64::consts::TAU);
            *o = [dir.cos() / w, dir.sin() / w, rng.gen_range(0.0..1.0), amp];
        }
        Surface {
            origin,
            u: u.normalize(),
            v: v.normalize(),
            extent_u,
            extent_v,
            normal,
            base_color: [
                rng.gen_range(0.3..0.7),
                rng.gen_range(0.3..0.7),
                rng.gen_range(0.3..0.7),
            ],
            ramps: std::array::from_fn(|_| {
                [rng.gen_range(-0.28..0.28), rng.gen_range(-0.22..0.22)]
            }),
            octaves,
        }
    }

    fn point(&self, a: f64, b: f64) -> Vec3 {
        self.origin + a * self.u + b * self.v
    }

    fn distance(&self, p: &Vec3) -> f64 {
        (p - self.origin).dot(&self.normal).abs()
    }

    /// Broadband aperiodic texture: strong monotone ramps give the loss a
    /// wide basin, incommensurate sinusoid octaves sharpen the optimum.
    fn color(&self, p: &Vec3) -> [f64; 3] {
        let rel = p - self.origin;
        let a = rel.dot(&self.u);
        let b = rel.dot(&self.v);
        let tau = std::f64::consts::TAU;
        let mut c = [0.0; 3];
        for ch in 0..3 {
            let mut v = self.base_color[ch]
                + self.ramps[ch][0] * (a / self.extent_u - 0.5)
                + self.ramps[ch][1] * (b / self.extent_v - 0.5);
            for (oi, o) in self.octaves.iter().enumerate() {
                // Channel-dependent phase decorrelates the color planes.
                let phase = o[2] + 0.37 * (ch as f64) * (oi as f64 + 1.0);
                v += o[3] * (tau * (a * o[0] + b * o[1] + phase)).sin();
            }
            c[ch] = v.clamp(0.03, 0.97);
        }
        c
    }

    /// Quaternion rotating the local frame (u, v, normal) into the world.
    fn orientation(&self) -> Quat {
        let m = nalgebra::Matrix3::from_columns(&[self.u, self.v, self.normal]);
        UnitQuaternion::from_matrix(&m)
    }
}

/// Standing panels on the floor: the 3D relief that makes lateral
/// miscalibration observable through parallax. A flat textured floor alone is
/// a near-gauge: the field can repaint it to match a laterally shifted camera.
fn add_floor_panels(surfaces: &mut Vec<Surface>, count: usize, rng: &mut ChaCha8Rng) {
    for i in 0..count {
        let cx = 0.5 + 12.5 * (i as f64 + rng.gen_range(0.0..0.9)) / count as f64;
        let cy = rng.gen_range(-1.8..1.8);
        let yaw = rng.gen_range(0.0..std::f64::consts::TAU);
        let width = rng.gen_range(0.5..1.2);
        let height = rng.gen_range(0.25..1.1);
        let u = Vec3::new(yaw.cos(), yaw.sin(), 0.0);
        let v = Vector3::z();
        surfaces.push(Surface::new(
            Vec3::new(cx - 0.5 * width * u.x, cy - 0.5 * width * u.y, 0.0),
            u,
            v,
            width,
            height,
            rng,
        ));
    }
}

fn build_surfaces(kind: SceneKind, rng: &mut ChaCha8Rng) -> Vec<Surface> {
    let x = Vector3::x();
    let y = Vector3::y();
    let z = Vector3::z();
    match kind {
        // Floor, two side walls, and standing panels along the path.
        SceneKind::Corridor => {
            let mut surfaces = vec![
                Surface::new(Vec3::new(-2.0, -2.2, 0.0), x, y, 16.0, 4.4, rng),
                Surface::new(Vec3::new(-2.0, -2.2, 0.0), x, z, 16.0, 2.2, rng),
                Surface::new(Vec3::new(-2.0, 2.2, 0.0), x, z, 16.0, 2.2, rng),
            ];
            add_floor_panels(&mut surfaces, 22, rng);
            surfaces
        }
        // Closed bare room: floor plus four walls. Kept free of obstacles so
        // accumulated scans lie exactly on the six known planes.
        SceneKind::BoxRoom => vec![
            Surface::new(Vec3::new(-2.0, -3.0, 0.0), x, y, 12.0, 6.0, rng),
            Surface::new(Vec3::new(-2.0, -3.0, 0.0), x, z, 12.0, 2.4, rng),
            Surface::new(Vec3::new(-2.0, 3.0, 0.0), x, z, 12.0, 2.4, rng),
            Surface::new(Vec3::new(-2.0, -3.0, 0.0), y, z, 6.0, 2.4, rng),
            Surface::new(Vec3::new(10.0, -3.0, 0.0), y, z, 6.0, 2.4, rng),
        ],
        // Floor plus tilted patches and panels scattered along the path.
        SceneKind::ScatteredPlanes => {
            let mut surfaces = vec![Surface::new(Vec3::new(-2.0, -3.0, 0.0), x, y, 16.0, 6.0, rng)];
            for i in 0..5 {
                let cx = 1.0 + 2.6 * i as f64 + rng.gen_range(-0.5..0.5);
                let cy = if i % 2 == 0 { -1.9 } else { 1.9 };
                let yaw = rng.gen_range(-0.5..0.5);
                let tilt = rng.gen_range(-0.25..0.25);
                let q = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw)
                    * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), tilt);
                let u = q * x;
                let v = q * z;
                surfaces.push(Surface::new(Vec3::new(cx, cy, 0.0), u, v, 2.2, 1.8, rng));
            }
            add_floor_panels(&mut surfaces, 16, rng);
            surfaces
        }
    }
}

fn trajectory_state(kind: TrajectoryKind, t: f64) -> (f64, f64, f64, f64) {
    // Returns (speed, yaw, pitch, roll). Speed modulation and attitude wobble
    // keep the time offset observable even on the straight run.
    let speed = 0.9 + 0.28 * (1.3 * t + 0.4).sin();
    match kind {
        TrajectoryKind::Straight => (
            speed,
            0.035 * (0.9 * t).sin(),
            0.018 * (1.4 * t + 1.0).sin(),
            0.012 * (1.1 * t).sin(),
        ),
        TrajectoryKind::Arc => (
            speed,
            0.09 * t + 0.03 * (1.1 * t).sin(),
            0.018 * (1.2 * t).sin(),
            0.015 * (0.8 * t + 0.5).sin(),
        ),
        TrajectoryKind::Zigzag => (
            speed,
            0.17 * (0.8 * t).sin() + 0.02 * (2.3 * t).sin(),
            0.02 * (1.3 * t).sin(),
            0.012 * (0.9 * t).sin(),
        ),
    }
}

fn build_trajectory(kind: TrajectoryKind, duration: f64) -> Trajectory {
    let dt_fine = 0.005;
    let knot_dt = 0.1;
    let mut knots = Vec::new();
    let mut pos = Vec3::new(0.0, 0.0, 1.2);
    let mut t = 0.0;
    let mut next_knot = 0.0;
    loop {
        if t + 1e-9 >= next_knot {
            let (_, yaw, pitch, roll) = trajectory_state(kind, t);
            let q = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw)
                * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), pitch)
                * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), roll);
            knots.push((next_knot, Pose::new(q, pos)));
            next_knot += knot_dt;
        }
        if t >= duration {
            break;
        }
        let (speed, yaw, _, _) = trajectory_state(kind, t);
        let dir = Vec3::new(yaw.cos(), yaw.sin(), 0.0);
        pos += dir * speed * dt_fine;
        t += dt_fine;
    }
    Trajectory::new(knots).expect("knot timestamps strictly increase")
}

/// Forward-looking camera extrinsic: optical +z along LiDAR +x, +x right
/// (LiDAR -y), +y down (LiDAR -z), pitched down slightly, offset from the
/// LiDAR origin. Extra cameras yaw away from the first.
fn default_extrinsic(camera_index: usize) -> Pose {
    let base = UnitQuaternion::from_matrix(&nalgebra::Matrix3::from_columns(&[
        -Vector3::y(),
        -Vector3::z(),
        Vector3::x(),
    ]));
    let pitch_down = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 0.30);
    let yaw = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), -0.35 * camera_index as f64);
    Pose::new(
        yaw * pitch_down * base,
        Vec3::new(0.35, 0.05 * camera_index as f64, -0.22),
    )
}

/// The ground-truth scene: fixed Gaussian positions with procedural
/// attributes evaluated from the owning surface.
#[derive(Debug, Clone)]
pub struct TrueScene {
    pub positions: Vec<Vec3>,
    pub attrs: GaussianAttributes,
}

pub struct SynthWorld {
    pub dataset: TrainDataset,
    pub true_calib: CalibrationState,
    pub scans: ScanSet,
    pub scene: TrueScene,
}

/// Quantize to 8 bits per channel, exactly what a PNG round-trip does, so
/// in-memory datasets match datasets that went through the ingestion path.
pub fn quantize_8bit(image: &mut [f64]) {
    for v in image.iter_mut() {
        *v = (*v * 255.0).round().clamp(0.0, 255.0) / 255.0;
    }
}

/// Render a set of Gaussians from a camera world pose (culling included).
pub fn render_scene_image(
    positions: &[Vec3],
    attrs: &GaussianAttributes,
    world_pose: &Pose,
    camera: &CameraModel,
    cfg: &RenderConfig,
) -> Vec<f64> {
    let points_cam_all = transform_points_to_camera(world_pose, positions);
    let (points_cam, index_map) = cull_behind_camera(&points_cam_all, camera.near);
    let rotations: Vec<Quat> = index_map.iter().map(|&i| attrs.rotations[i]).collect();
    let rotations_cam = rotate_gaussian_orientations(world_pose, &rotations);
    let scales: Vec<Vec3> = index_map.iter().map(|&i| attrs.scales[i]).collect();
    let opacities: Vec<f64> = index_map.iter().map(|&i| attrs.opacities[i]).collect();
    let colors: Vec<[f64; 3]> = index_map.iter().map(|&i| attrs.colors[i]).collect();
    let projected = project(&points_cam, &rotations_cam, &scales, &opacities, &colors, camera, cfg);
    render(&projected, camera, cfg).color
}

/// Generate the full synthetic world: trajectory, scans, ground-truth scene,
/// rendered ground-truth frames, and the true calibration.
pub fn generate_world(cfg: &SynthConfig) -> SynthWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let surfaces = build_surfaces(cfg.scene, &mut rng);
    let trajectory = build_trajectory(cfg.trajectory, cfg.duration_s);

    // LiDAR-style sampling: per scan, an in-plane jittered grid per surface,
    // limited to the scan range, decimated to the per-scan budget.
    let spacing = 0.9 * cfg.finest_voxel_m * (surfaces_area(&surfaces) / 40.0).max(1.0).sqrt();
    let mut scans = Vec::with_capacity(cfg.scan_count);
    for k in 0..cfg.scan_count {
        let t = cfg.duration_s * (k as f64 + 0.5) / cfg.scan_count as f64;
        let pose = trajectory.sample(t).expect("scan time inside span");
        let origin = pose.translation;
        let mut world_points = Vec::new();
        for s in &surfaces {
            let ja = rng.gen_range(0.0..spacing);
            let jb = rng.gen_range(0.0..spacing);
            let mut a = ja;
            while a < s.extent_u {
                let mut b = jb;
                while b < s.extent_v {
                    let p = s.point(a, b);
                    if (p - origin).norm() <= cfg.scan_range_m {
                        world_points.push(p);
                    }
                    b += spacing;
                }
                a += spacing;
            }
        }
        // Deterministic decimation to the budget.
        if world_points.len() > cfg.points_per_scan {
            let stride = world_points.len() as f64 / cfg.points_per_scan as f64;
            let offset = rng.gen_range(0.0..stride);
            world_points = (0..cfg.points_per_scan)
                .map(|i| world_points[((i as f64 * stride + offset) as usize).min(world_points.len() - 1)])
                .collect();
        }
        let inv = pose.inverse();
        let points = world_points.iter().map(|p| inv.transform_point(p)).collect();
        scans.push(Scan { timestamp: t, points });
    }
    let scans = ScanSet { scans };
    let raw_cloud = accumulate(&scans, &trajectory).expect("scan set is nonempty");

    // Ground-truth Gaussians sit exactly where the finest training stage will
    // put them: the finest-voxel downsample of the accumulated cloud.
    let gt_cloud = voxel_downsample(&raw_cloud, cfg.finest_voxel_m);
    let mut attrs = GaussianAttributes::default();
    let tangent = 0.85 * cfg.finest_voxel_m;
    let normal_scale = 0.18 * cfg.finest_voxel_m;
    for p in &gt_cloud.positions {
        let surface = surfaces
            .iter()
            .min_by(|a, b| a.distance(p).partial_cmp(&b.distance(p)).unwrap())
            .expect("at least one surface");
        attrs.colors.push(surface.color(p));
        attrs.opacities.push(0.92);
        attrs.scales.push(Vec3::new(tangent, tangent, normal_scale));
        attrs.rotations.push(surface.orientation());
    }
    let scene = TrueScene {
        positions: gt_cloud.positions.clone(),
        attrs,
    };

    let true_calib = CalibrationState::new(
        (0..cfg.n_cameras)
            .map(|i| CameraCalibration::new(default_extrinsic(i), 0.0))
            .collect(),
    );
    let cameras: Vec<CameraModel> = (0..cfg.n_cameras)
        .map(|_| CameraModel {
            fx: 0.62 * cfg.image_width as f64,
            fy: 0.62 * cfg.image_width as f64,
            cx: cfg.image_width as f64 / 2.0,
            cy: cfg.image_height as f64 / 2.0,
            width: cfg.image_width,
            height: cfg.image_height,
            near: 0.2,
        })
        .collect();

    // Frame times stay inside the span with a margin covering the injected
    // time noise plus optimizer excursions.
    let margin = (3.0 * cfg.noise_time_ms / 1e3 + 0.2).max(0.5);
    let render_cfg = RenderConfig::default();
    let mut frames = Vec::with_capacity(cfg.n_cameras);
    for cam_id in 0..cfg.n_cameras {
        let calib = &true_calib.cameras[cam_id];
        let mut cam_frames = Vec::with_capacity(cfg.frames_per_camera);
        for n in 0..cfg.frames_per_camera {
            let span = cfg.duration_s - 2.0 * margin;
            let world_t = margin + span * n as f64 / (cfg.frames_per_camera - 1).max(1) as f64;
            // Camera-clock timestamp; the true offset maps it back to world time.
            let timestamp = world_t - calib.time_offset;
            let world_pose = trajectory
                .sample(world_t)
                .expect("frame time inside span")
                .compose(&calib.extrinsic);
            let mut image =
                render_scene_image(&scene.positions, &scene.attrs, &world_pose, &cameras[cam_id], &render_cfg);
            quantize_8bit(&mut image);
            cam_frames.push(Frame { timestamp, image });
        }
        frames.push(cam_frames);
    }

    SynthWorld {
        dataset: TrainDataset {
            trajectory,
            raw_cloud,
            cameras,
            frames,
            truth: Some(true_calib.clone()),
        },
        true_calib,
        scans,
        scene,
    }
}

fn surfaces_area(surfaces: &[Surface]) -> f64 {
    surfaces.iter().map(|s| s.extent_u * s.extent_v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{photometric_loss, LossConfig};

    fn tiny_config(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            image_width: 64,
            image_height: 32,
            frames_per_camera: 6,
            scan_count: 10,
            points_per_scan: 200,
            finest_voxel_m: 0.05,
            duration_s: 4.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn ground_truth_frames_render_to_quantization_floor_at_true_calibration() {
        let cfg = tiny_config(7);
        let world = generate_world(&cfg);
        let render_cfg = RenderConfig::default();
        let calib = &world.true_calib.cameras[0];
        let frame = &world.dataset.frames[0][2];
        let world_pose = world
            .dataset
            .trajectory
            .sample(frame.timestamp + calib.time_offset)
            .unwrap()
            .compose(&calib.extrinsic);
        let image = render_scene_image(
            &world.scene.positions,
            &world.scene.attrs,
            &world_pose,
            &world.dataset.cameras[0],
            &render_cfg,
        );
        let (l1, dssim, _) =
            photometric_loss(&image, &frame.image, 64, 32, &LossConfig::default()).unwrap();
        // The only residual is the 8-bit quantization of the stored frame.
        assert!(l1 < 2.0 / 255.0, "l1 {l1}");
        assert!(dssim < 1e-3, "dssim {dssim}");
    }

    #[test]
    fn box_room_points_lie_on_known_planes() {
        let cfg = SynthConfig {
            scene: SceneKind::BoxRoom,
            ..tiny_config(11)
        };
        let world = generate_world(&cfg);
        // Every accumulated point must lie on one of the six planes: z = 0,
        // y = +/-3, x = -2, x = 10 (walls span full extents here).
        for p in &world.dataset.raw_cloud.positions {
            let residual = [
                p.z.abs(),
                (p.y - 3.0).abs(),
                (p.y + 3.0).abs(),
                (p.x + 2.0).abs(),
                (p.x - 10.0).abs(),
            ]
            .into_iter()
            .fold(f64::INFINITY, f64::min);
            assert!(residual < 1e-9, "point {p:?} off every plane by {residual}");
        }
    }

    #[test]
    fn different_seeds_give_different_scenes() {
        let a = generate_world(&tiny_config(1));
        let b = generate_world(&tiny_config(2));
        assert_ne!(a.dataset.raw_cloud.positions, b.dataset.raw_cloud.positions);
        assert_ne!(a.scene.attrs.colors, b.scene.attrs.colors);
    }

    #[test]
    fn perturbation_identities() {
        let world = generate_world(&tiny_config(3));
        let zero = perturb_calibration(&world.true_calib, 0.0, 0.0, 0.0, 9);
        let e = score(&world.true_calib.cameras[0], &zero.cameras[0]);
        assert_eq!(e.rotation_deg, 0.0);
        assert_eq!(e.translation_cm, 0.0);
        assert_eq!(e.temporal_ms, 0.0);

        let a = perturb_calibration(&world.true_calib, 5.0, 50.0, 100.0, 42);
        let b = perturb_calibration(&world.true_calib, 5.0, 50.0, 100.0, 42);
        let (ca, cb) = (&a.cameras[0], &b.cameras[0]);
        assert_eq!(ca.extrinsic.rotation, cb.extrinsic.rotation);
        assert_eq!(ca.extrinsic.translation, cb.extrinsic.translation);
        assert_eq!(ca.time_offset, cb.time_offset);
    }

    /// The scored error must equal the composed perturbation magnitudes
    /// recomputed directly.
    #[test]
    fn perturbation_error_recomputes() {
        let world = generate_world(&tiny_config(4));
        let noisy = perturb_calibration(&world.true_calib, 5.0, 50.0, 100.0, 17);
        let truth = &world.true_calib.cameras[0];
        let est = &noisy.cameras[0];
        let e = score(truth, est);
        // Translation: +/-50 cm on all three axes.
        assert!((e.translation_cm - (3.0f64).sqrt() * 50.0).abs() < 1e-9);
        assert!((e.temporal_ms - 100.0).abs() < 1e-9);
        // Rotation: geodesic angle of the composed axis perturbations.
        let rel = truth.extrinsic.rotation.inverse() * est.extrinsic.rotation;
        assert!((e.rotation_deg - rel.angle().to_degrees()).abs() < 1e-9);
        assert!(e.rotation_deg > 5.0 && e.rotation_deg < 10.0);
    }

    #[test]
    fn score_identities_and_symmetry() {
        let pose = Pose::from_parts(1.0, 0.0, 0.0, 0.0, 0.5, -0.2, 0.1);
        let a = CameraCalibration::new(pose, 0.01);
        assert_eq!(
            score(&a, &a),
            CalibrationError { rotation_deg: 0.0, translation_cm: 0.0, temporal_ms: 0.0 }
        );

        let yawed = CameraCalibration::new(
            Pose::new(
                pose.rotation * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 10f64.to_radians()),
                pose.translation,
            ),
            0.01,
        );
        let e = score(&a, &yawed);
        assert!((e.rotation_deg - 10.0).abs() < 1e-9);
        assert_eq!(e.translation_cm, 0.0);
        assert_eq!(e.temporal_ms, 0.0);

        // Rotation error is symmetric.
        let e_ab = score(&a, &yawed);
        let e_ba = score(&yawed, &a);
        assert!((e_ab.rotation_deg - e_ba.rotation_deg).abs() < 1e-12);
    }

    /// Independent matrix-log implementation of the geodesic angle.
    #[test]
    fn score_matches_rotation_log_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..50 {
            let q1 = UnitQuaternion::new_normalize(Quaternion::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ));
            let q2 = UnitQuaternion::new_normalize(Quaternion::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ));
            let a = CameraCalibration::new(Pose::new(q1, Vec3::zeros()), 0.0);
            let b = CameraCalibration::new(Pose::new(q2, Vec3::zeros()), 0.0);
            let rel = (q1.inverse() * q2).to_rotation_matrix().into_inner();
            let oracle = (((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0)).acos().to_degrees();
            let got = score(&a, &b).rotation_deg;
            assert!((got - oracle).abs() < 1e-7, "{got} vs {oracle}");
        }
    }

    #[test]
    fn scan_budget_is_respected() {
        let cfg = tiny_config(5);
        let world = generate_world(&cfg);
        assert_eq!(world.scans.scans.len(), cfg.scan_count);
        for s in &world.scans.scans {
            assert!(!s.points.is_empty());
            assert!(s.points.len() <= cfg.points_per_scan);
        }
    }
}
