//! Finite-difference verification of every analytic gradient path: Gaussian
//! attributes, field parameters, the extrinsic tangent, and the time offset,
//! each against central differences of the full rendering loss.
//!
//! Scenes are sampled away from the compositing thresholds (opacity clamp,
//! transmittance stop, near-plane cull, trajectory knots) so the loss is
//! smooth inside every finite-difference bracket; the thresholds themselves
//! are covered by dedicated deterministic tests.

use nalgebra::{Quaternion, UnitQuaternion};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloud::{cull_behind_camera, Aabb};
use crate::field::{
    field_backward, field_forward, AttributeGradients, FieldConfig, FieldParams,
    GaussianAttributes,
};
use crate::geometry::{
    retract_calibration, rotate_gaussian_orientations, transform_points_to_camera,
    CalibrationState, CameraCalibration, CameraModel, FrameGeometry, Pose, Quat, Trajectory, Vec3,
};
use crate::loss::{total_loss, LossConfig};
use crate::raster::{project, render, render_backward, RenderConfig};

/// One verified gradient path: the worst relative error across the checked
/// components and the tolerance it must meet.
#[derive(Debug, Clone)]
pub struct PathReport {
    pub path: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl PathReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub paths: Vec<PathReport>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.paths.iter().all(PathReport::passed)
    }

    fn merge(&mut self, path: &'static str, tolerance: f64, rel: f64) {
        match self.paths.iter_mut().find(|p| p.path == path) {
            Some(p) => p.max_rel_error = p.max_rel_error.max(rel),
            None => self.paths.push(PathReport {
                path,
                max_rel_error: rel,
                tolerance,
            }),
        }
    }
}

/// Accumulates (analytic, finite-difference) pairs of one gradient group and
/// compares them norm-wise, so components at the finite-difference noise
/// floor cannot mask or fake a mismatch.
#[derive(Default)]
struct PathAccum {
    diff_sq: f64,
    analytic_sq: f64,
    fd_sq: f64,
}

impl PathAccum {
    fn push(&mut self, analytic: f64, fd: f64) {
        self.diff_sq += (analytic - fd) * (analytic - fd);
        self.analytic_sq += analytic * analytic;
        self.fd_sq += fd * fd;
    }

    fn rel(&self) -> f64 {
        self.diff_sq.sqrt() / self.analytic_sq.sqrt().max(self.fd_sq.sqrt()).max(1e-10)
    }
}

fn rel_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8)
}

fn fd_step(value: f64) -> f64 {
    1e-6 * value.abs().max(1.0)
}

/// A miniature end-to-end scene: trajectory, calibration, camera, world-frame
/// Gaussians, and a random ground-truth image.
pub struct CheckScene {
    pub trajectory: Trajectory,
    pub calibration: CalibrationState,
    pub camera: CameraModel,
    pub t_frame: f64,
    pub positions: Vec<Vec3>,
    pub attrs: GaussianAttributes,
    pub ground_truth: Vec<f64>,
    pub loss_cfg: LossConfig,
    pub render_cfg: RenderConfig,
}

fn random_quat(rng: &mut ChaCha8Rng) -> Quat {
    UnitQuaternion::new_normalize(Quaternion::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    ))
}

/// Sample a random scene of up to `max_gaussians` splats on a `size`^2 image.
pub fn random_scene(seed: u64, max_gaussians: usize, size: usize) -> CheckScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));
    let camera = CameraModel {
        fx: 1.2 * size as f64,
        fy: 1.2 * size as f64,
        cx: size as f64 / 2.0,
        cy: size as f64 / 2.0,
        width: size,
        height: size,
        near: 0.2,
    };
    // A gently moving trajectory; the frame time sits mid-segment so the
    // time-offset derivative never straddles a knot.
    let knots: Vec<(f64, Pose)> = (0..6)
        .map(|i| {
            let t = i as f64 * 0.4;
            let q = UnitQuaternion::from_euler_angles(
                0.05 * (t + 0.3).sin(),
                0.06 * (t * 1.3).cos(),
                0.08 * t,
            );
            let p = Vec3::new(0.8 * t, 0.15 * (t * 1.1).sin(), 0.1 * (t * 0.7).cos());
            (t, Pose::new(q, p))
        })
        .collect();
    let trajectory = Trajectory::new(knots).unwrap();
    let t_frame = 0.9;
    let extrinsic = Pose::new(
        UnitQuaternion::from_euler_angles(
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
        ),
        Vec3::new(
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
        ),
    );
    let calibration = CalibrationState::new(vec![CameraCalibration::new(
        extrinsic,
        rng.gen_range(-0.05..0.05),
    )]);

    // Gaussians placed in front of this frame's camera, comfortably away from
    // the near plane and the image border drop test.
    let n = rng.gen_range(max_gaussians / 2..=max_gaussians);
    let world_pose = crate::geometry::camera_world_pose(&trajectory, &calibration, 0, t_frame).unwrap();
    let mut positions = Vec::with_capacity(n);
    let mut attrs = GaussianAttributes::default();
    for _ in 0..n {
        let z = rng.gen_range(2.0..7.0);
        let px = rng.gen_range(0.25..0.75) * size as f64;
        let py = rng.gen_range(0.25..0.75) * size as f64;
        let cam_pt = Vec3::new(
            (px - camera.cx) * z / camera.fx,
            (py - camera.cy) * z / camera.fy,
            z,
        );
        positions.push(world_pose.transform_point(&cam_pt));
        attrs.colors.push([rng.gen(), rng.gen(), rng.gen()]);
        // Moderate opacities keep the clamp and the stop threshold inactive.
        attrs.opacities.push(rng.gen_range(0.15..0.75));
        attrs.scales.push(Vec3::new(
            rng.gen_range(0.03..0.3),
            rng.gen_range(0.03..0.3),
            rng.gen_range(0.03..0.3),
        ));
        attrs.rotations.push(random_quat(&mut rng));
    }
    let ground_truth: Vec<f64> = (0..size * size * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    CheckScene {
        trajectory,
        calibration,
        camera,
        t_frame,
        positions,
        attrs,
        ground_truth,
        loss_cfg: LossConfig::default(),
        render_cfg: RenderConfig::default(),
    }
}

/// Full pipeline loss for explicit attributes under a given calibration.
fn scene_loss(scene: &CheckScene, calib: &CalibrationState, attrs: &GaussianAttributes) -> f64 {
    let geo = FrameGeometry::compute(&scene.trajectory, calib, 0, scene.t_frame).unwrap();
    let points_cam_all = transform_points_to_camera(&geo.world_pose, &scene.positions);
    let (points_cam, index_map) = cull_behind_camera(&points_cam_all, scene.camera.near);
    let sub = |v: &GaussianAttributes| -> GaussianAttributes {
        GaussianAttributes {
            colors: index_map.iter().map(|&i| v.colors[i]).collect(),
            opacities: index_map.iter().map(|&i| v.opacities[i]).collect(),
            scales: index_map.iter().map(|&i| v.scales[i]).collect(),
            rotations: index_map.iter().map(|&i| v.rotations[i]).collect(),
        }
    };
    let kept = sub(attrs);
    let rotations_cam = rotate_gaussian_orientations(&geo.world_pose, &kept.rotations);
    let projected = project(
        &points_cam,
        &rotations_cam,
        &kept.scales,
        &kept.opacities,
        &kept.colors,
        &scene.camera,
        &scene.render_cfg,
    );
    let buffer = render(&projected, &scene.camera, &scene.render_cfg);
    let (breakdown, _, _) = total_loss(
        &buffer.color,
        &scene.ground_truth,
        scene.camera.width,
        scene.camera.height,
        &kept.scales,
        &scene.loss_cfg,
    )
    .unwrap();
    breakdown.total
}

/// Analytic gradients of the scene loss for every path at once.
struct SceneGradients {
    attrs: AttributeGradients,
    rotation_tangent: Vec3,
    translation_tangent: Vec3,
    time_offset: f64,
}

fn scene_gradients(scene: &CheckScene, attrs_in: &GaussianAttributes) -> SceneGradients {
    let geo = FrameGeometry::compute(&scene.trajectory, &scene.calibration, 0, scene.t_frame).unwrap();
    let points_cam_all = transform_points_to_camera(&geo.world_pose, &scene.positions);
    let (points_cam, index_map) = cull_behind_camera(&points_cam_all, scene.camera.near);
    let kept_world: Vec<Vec3> = index_map.iter().map(|&i| scene.positions[i]).collect();
    let kept = GaussianAttributes {
        colors: index_map.iter().map(|&i| attrs_in.colors[i]).collect(),
        opacities: index_map.iter().map(|&i| attrs_in.opacities[i]).collect(),
        scales: index_map.iter().map(|&i| attrs_in.scales[i]).collect(),
        rotations: index_map.iter().map(|&i| attrs_in.rotations[i]).collect(),
    };
    let rotations_cam = rotate_gaussian_orientations(&geo.world_pose, &kept.rotations);
    let projected = project(
        &points_cam,
        &rotations_cam,
        &kept.scales,
        &kept.opacities,
        &kept.colors,
        &scene.camera,
        &scene.render_cfg,
    );
    let buffer = render(&projected, &scene.camera, &scene.render_cfg);
    let (_, grad_image, grad_scales_reg) = total_loss(
        &buffer.color,
        &scene.ground_truth,
        scene.camera.width,
        scene.camera.height,
        &kept.scales,
        &scene.loss_cfg,
    )
    .unwrap();
    let mut raster = render_backward(
        &projected,
        &points_cam,
        &rotations_cam,
        &kept.scales,
        &scene.camera,
        &scene.render_cfg,
        &buffer,
        &grad_image,
    );
    for (g, reg) in raster.scales.iter_mut().zip(&grad_scales_reg) {
        *g += reg;
    }
    let q_w = geo.world_pose.rotation.into_inner();
    let world_rot_grads: Vec<Quaternion<f64>> = raster.rotations.iter().map(|g| q_w * g).collect();
    let pose = geo.pose_gradients(&kept_world, &kept.rotations, &raster.positions, &raster.rotations);

    // Scatter attribute gradients back to the original index space.
    let n = scene.positions.len();
    let mut attrs = AttributeGradients::zeros(n);
    for (k, &i) in index_map.iter().enumerate() {
        attrs.colors[i] = raster.colors[k];
        attrs.opacities[i] = raster.opacities[k];
        attrs.scales[i] = raster.scales[k];
        attrs.rotations[i] = world_rot_grads[k];
    }
    SceneGradients {
        attrs,
        rotation_tangent: pose.rotation,
        translation_tangent: pose.translation,
        time_offset: pose.time_offset,
    }
}

/// Gradients of the full loss with respect to every Gaussian attribute.
pub fn check_attributes(scene: &CheckScene, report: &mut GradcheckReport) {
    let grads = scene_gradients(scene, &scene.attrs);
    let tol = 1e-3;
    let loss = |attrs: &GaussianAttributes| scene_loss(scene, &scene.calibration, attrs);
    let clone_attrs = |a: &GaussianAttributes| GaussianAttributes {
        colors: a.colors.clone(),
        opacities: a.opacities.clone(),
        scales: a.scales.clone(),
        rotations: a.rotations.clone(),
    };
    let mut color = PathAccum::default();
    let mut scale = PathAccum::default();
    let mut opacity = PathAccum::default();
    let mut rotation = PathAccum::default();
    for i in 0..scene.positions.len() {
        for k in 0..3 {
            let h = fd_step(scene.attrs.colors[i][k]);
            let mut plus = clone_attrs(&scene.attrs);
            plus.colors[i][k] += h;
            let mut minus = clone_attrs(&scene.attrs);
            minus.colors[i][k] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            color.push(grads.attrs.colors[i][k], fd);

            let h = fd_step(scene.attrs.scales[i][k]);
            let mut plus = clone_attrs(&scene.attrs);
            plus.scales[i][k] += h;
            let mut minus = clone_attrs(&scene.attrs);
            minus.scales[i][k] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            scale.push(grads.attrs.scales[i][k], fd);
        }
        {
            let h = fd_step(scene.attrs.opacities[i]);
            let mut plus = clone_attrs(&scene.attrs);
            plus.opacities[i] += h;
            let mut minus = clone_attrs(&scene.attrs);
            minus.opacities[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            opacity.push(grads.attrs.opacities[i], fd);
        }
        for k in 0..4 {
            let h = 1e-6;
            let perturbed = |sign: f64| {
                let mut a = clone_attrs(&scene.attrs);
                let q = a.rotations[i].into_inner();
                let mut v = [q.w, q.i, q.j, q.k];
                v[k] += sign * h;
                a.rotations[i] =
                    UnitQuaternion::new_unchecked(Quaternion::new(v[0], v[1], v[2], v[3]));
                loss(&a)
            };
            let fd = (perturbed(1.0) - perturbed(-1.0)) / (2.0 * h);
            let gq = grads.attrs.rotations[i];
            rotation.push([gq.w, gq.i, gq.j, gq.k][k], fd);
        }
    }
    report.merge("attr/color", tol, color.rel());
    report.merge("attr/scale", tol, scale.rel());
    report.merge("attr/opacity", tol, opacity.rel());
    report.merge("attr/rotation", tol, rotation.rel());
}

/// Gradients with respect to the extrinsic tangent (c) and time offset (d).
pub fn check_calibration(scene: &CheckScene, report: &mut GradcheckReport) {
    let grads = scene_gradients(scene, &scene.attrs);
    let tol = 1e-3;
    let loss_at = |calib: &CalibrationState| scene_loss(scene, calib, &scene.attrs);
    let mut rot = PathAccum::default();
    let mut trans = PathAccum::default();
    for k in 0..3 {
        let mut axis = Vec3::zeros();
        axis[k] = 1.0;
        let h = 1e-6;
        let perturbed = |sign: f64, rotate: bool| {
            let mut c = scene.calibration.clone();
            if rotate {
                retract_calibration(&mut c.cameras[0], -sign * h * axis, Vec3::zeros(), 0.0);
            } else {
                retract_calibration(&mut c.cameras[0], Vec3::zeros(), -sign * h * axis, 0.0);
            }
            loss_at(&c)
        };
        let fd_rot = (perturbed(1.0, true) - perturbed(-1.0, true)) / (2.0 * h);
        rot.push(grads.rotation_tangent[k], fd_rot);
        let fd_trans = (perturbed(1.0, false) - perturbed(-1.0, false)) / (2.0 * h);
        trans.push(grads.translation_tangent[k], fd_trans);
    }
    report.merge("calib/rotation", tol, rot.rel());
    report.merge("calib/translation", tol, trans.rel());
    let h = 1e-6;
    let perturbed = |sign: f64| {
        let mut c = scene.calibration.clone();
        retract_calibration(&mut c.cameras[0], Vec3::zeros(), Vec3::zeros(), -sign * h);
        loss_at(&c)
    };
    let fd = (perturbed(1.0) - perturbed(-1.0)) / (2.0 * h);
    report.merge("calib/time_offset", tol, rel_error(grads.time_offset, fd));
}

/// Gradients with respect to every field parameter on a small batch driven
/// through the full render loss.
pub fn check_field(seed: u64, batch: usize, report: &mut GradcheckReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(77));
    let mut scene = random_scene(seed, batch, 32);
    scene.positions.truncate(batch);
    scene.attrs.colors.truncate(batch);
    scene.attrs.opacities.truncate(batch);
    scene.attrs.scales.truncate(batch);
    scene.attrs.rotations.truncate(batch);
    let cfg = FieldConfig {
        levels: 3,
        table_size_log2: 6,
        features_per_level: 2,
        base_resolution: 3,
        growth_factor: 1.6,
        hidden_layers: 1,
        hidden_width: 12,
    };
    let aabb = Aabb::from_points(&scene.positions).unwrap().padded(0.5);
    let mut params = FieldParams::init(cfg, aabb, 0.25, seed);
    // Generic parameter magnitudes keep ReLU kinks and sigmoid saturation
    // away from the finite-difference brackets.
    for v in &mut params.hash_tables {
        *v = rng.gen_range(-0.5..0.5);
    }
    let mut flat = params.mlp.flatten();
    for v in &mut flat {
        *v += rng.gen_range(-0.08..0.08);
    }
    params.mlp.set_from_flat(&flat);

    let loss_of = |p: &FieldParams| {
        let (attrs, _) = field_forward(&scene.positions, p).unwrap();
        scene_loss(&scene, &scene.calibration, &attrs)
    };

    let (attrs, cache) = field_forward(&scene.positions, &params).unwrap();
    // Upstream attribute gradients from the render loss.
    let grads_scene = scene_gradients(&scene, &attrs);
    let field_grads = field_backward(&params, &cache, &attrs, &grads_scene.attrs);

    let tol = 1e-3;
    let analytic_mlp = field_grads.mlp.flatten();
    let flat = params.mlp.flatten();
    let mut mlp = PathAccum::default();
    for i in 0..flat.len() {
        let h = fd_step(flat[i]);
        let mut fp = flat.clone();
        fp[i] += h;
        let mut plus = params.clone();
        plus.mlp.set_from_flat(&fp);
        fp[i] -= 2.0 * h;
        let mut minus = params.clone();
        minus.mlp.set_from_flat(&fp);
        let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
        mlp.push(analytic_mlp[i], fd);
    }
    report.merge("field/mlp", tol, mlp.rel());
    let mut hash = PathAccum::default();
    for i in 0..params.hash_tables.len() {
        let h = fd_step(params.hash_tables[i]);
        let mut plus = params.clone();
        plus.hash_tables[i] += h;
        let mut minus = params.clone();
        minus.hash_tables[i] -= h;
        let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
        hash.push(field_grads.hash_tables[i], fd);
    }
    report.merge("field/hash", tol, hash.rel());
}

/// Loss-only paths: photometric image gradient and the scale regularizer,
/// held to the tighter tolerance.
pub fn check_loss_paths(seed: u64, report: &mut GradcheckReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1234));
    let (w, h) = (32, 32);
    let cfg = LossConfig::default();
    let gt: Vec<f64> = (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    let img: Vec<f64> = (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    let loss = |x: &[f64]| {
        let (l1, dssim, _) = crate::loss::photometric_loss(x, &gt, w, h, &cfg).unwrap();
        (1.0 - cfg.lambda_dssim) * l1 + cfg.lambda_dssim * dssim
    };
    let (_, _, grad) = crate::loss::photometric_loss(&img, &gt, w, h, &cfg).unwrap();
    let tol = 1e-4;
    let mut photo = PathAccum::default();
    for _ in 0..24 {
        let i = rng.gen_range(w * (h / 2) * 3..w * h * 3);
        let step = 1e-6;
        let mut plus = img.clone();
        plus[i] += step;
        let mut minus = img.clone();
        minus[i] -= step;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * step);
        photo.push(grad[i], fd);
    }
    report.merge("loss/photometric", tol, photo.rel());

    let scales: Vec<Vec3> = (0..16)
        .map(|_| {
            Vec3::new(
                rng.gen_range(0.05..0.4),
                rng.gen_range(0.05..0.4),
                rng.gen_range(0.05..0.4),
            )
        })
        .collect();
    let (_, grads) = crate::loss::scale_regularization(&scales);
    let mut reg = PathAccum::default();
    for i in 0..scales.len() {
        for k in 0..3 {
            let step = 1e-7;
            let mut plus = scales.clone();
            plus[i][k] += step;
            let mut minus = scales.clone();
            minus[i][k] -= step;
            let fd = (crate::loss::scale_regularization(&plus).0
                - crate::loss::scale_regularization(&minus).0)
                / (2.0 * step);
            reg.push(grads[i][k], fd);
        }
    }
    report.merge("loss/scale_reg", tol, reg.rel());
}

/// Run every finite-difference suite over `seeds` seeded scenes.
pub fn run_all(base_seed: u64, seeds: usize, max_gaussians: usize, image_size: usize) -> GradcheckReport {
    let mut report = GradcheckReport::default();
    for s in 0..seeds as u64 {
        let scene = random_scene(base_seed + s, max_gaussians, image_size);
        check_attributes(&scene, &mut report);
        check_calibration(&scene, &mut report);
        if s % 4 == 0 {
            check_field(base_seed + s, 5, &mut report);
        }
        if s % 8 == 0 {
            check_loss_paths(base_seed + s, &mut report);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_gradcheck_sweep_passes() {
        let report = run_all(1000, 3, 12, 32);
        for p in &report.paths {
            assert!(
                p.passed(),
                "{}: max rel error {} over tolerance {}",
                p.path,
                p.max_rel_error,
                p.tolerance
            );
        }
    }
}
