use nalgebra::Quaternion;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splatcal::cloud::{cull_behind_camera, voxel_downsample};
use splatcal::field::*;
use splatcal::geometry::*;
use splatcal::loss::{total_loss, LossConfig};
use splatcal::raster::{project_attributes, render, render_backward, RenderConfig};
use splatcal::synth::*;
use splatcal::train::*;

fn main() {
    let world = generate_world(&SynthConfig {
        seed: 1, scene: SceneKind::Corridor, trajectory: TrajectoryKind::Straight,
        points_per_scan: 150, finest_voxel_m: 0.04, ..SynthConfig::default()
    });
    let noisy = perturb_calibration(&world.true_calib, 5.0, 50.0, 100.0, 7);

    // Phase 1: field-only training at the WRONG calibration (warm-up style).
    let schedule = Schedule {
        stages: vec![Stage { voxel_size: 0.10, steps: 800 }],
        warmup_steps: 799, // calibration frozen almost the whole time
        mode: ScheduleMode::Spatiotemporal,
    };
    let cfg = TrainConfig {
        field: FieldConfig {
            levels: 6, table_size_log2: 13, features_per_level: 2,
            base_resolution: 16, growth_factor: 1.6, hidden_layers: 2, hidden_width: 16,
        },
        ..TrainConfig::default()
    };
    let r = run_calibration(&world.dataset, &noisy, &schedule, &cfg, 42).unwrap();
    let field = r.field; // trained at wrong calib
    println!("field trained at wrong calib; loss {:.4}", r.metrics.last().unwrap().total_loss);

    // Phase 2: frozen field, calibration-only Adam.
    let cam = &world.dataset.cameras[0];
    let rcfg = RenderConfig::default();
    let lcfg = LossConfig::default();
    let stage_pts = voxel_downsample(&world.dataset.raw_cloud, 0.10).positions;
    let mut calib = noisy.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut t_opt, mut r_opt, mut d_opt) = (AdamState::new(3), AdamState::new(3), AdamState::new(1));
    let total = 2500;
    for step in 0..total {
        let fi = rng.gen_range(0..world.dataset.frames[0].len());
        let frame = &world.dataset.frames[0][fi];
        let geo = FrameGeometry::compute(&world.dataset.trajectory, &calib, 0, frame.timestamp).unwrap();
        let all = transform_points_to_camera(&geo.world_pose, &stage_pts);
        let (pts_cam, idx) = cull_behind_camera(&all, cam.near);
        let wpts: Vec<Vec3> = idx.iter().map(|&i| stage_pts[i]).collect();
        let (attrs, _) = field_forward(&wpts, &field).unwrap();
        let rots_cam = rotate_gaussian_orientations(&geo.world_pose, &attrs.rotations);
        let projected = project_attributes(&pts_cam, &rots_cam, &attrs, cam, &rcfg);
        let buf = render(&projected, cam, &rcfg);
        let (_, gi, _) = total_loss(&buf.color, &frame.image, cam.width, cam.height, &attrs.scales, &lcfg).unwrap();
        let rg = render_backward(&projected, &pts_cam, &rots_cam, &attrs.scales, cam, &rcfg, &buf, &gi);
        let pg = geo.pose_gradients(&wpts, &attrs.rotations, &rg.positions, &rg.rotations);
        let decay = 1.0 - 0.9 * step as f64 / (total - 1) as f64;
        let ut = t_opt.update(pg.translation.as_slice(), 5e-3 * decay);
        let ur = r_opt.update(pg.rotation.as_slice(), 1e-4 * decay);
        let ud = d_opt.update(&[pg.time_offset], 1e-3 * decay);
        retract_calibration(&mut calib.cameras[0], Vec3::new(ur[0], ur[1], ur[2]), Vec3::new(ut[0], ut[1], ut[2]), ud[0]);
        if step % 500 == 0 {
            let e = score(&world.true_calib.cameras[0], &calib.cameras[0]);
            println!("step {step:4}: {:.3} deg {:.2} cm {:.2} ms", e.rotation_deg, e.translation_cm, e.temporal_ms);
        }
    }
    let e = score(&world.true_calib.cameras[0], &calib.cameras[0]);
    println!("frozen-field final: {:.3} deg {:.2} cm {:.2} ms", e.rotation_deg, e.translation_cm, e.temporal_ms);
}
