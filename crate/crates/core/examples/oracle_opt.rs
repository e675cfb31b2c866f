use nalgebra::Quaternion;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splatcal::cloud::cull_behind_camera;
use splatcal::field::GaussianAttributes;
use splatcal::geometry::*;
use splatcal::loss::{total_loss, LossConfig};
use splatcal::raster::{project, render, render_backward, RenderConfig};
use splatcal::synth::*;
use splatcal::train::AdamState;

fn main() {
    let cfg = SynthConfig {
        seed: 1, scene: SceneKind::Corridor, trajectory: TrajectoryKind::Straight,
        points_per_scan: 150, finest_voxel_m: 0.04, ..SynthConfig::default()
    };
    let world = generate_world(&cfg);
    let cam = &world.dataset.cameras[0];
    let rcfg = RenderConfig::default();
    let lcfg = LossConfig::default();

    let calib0 = perturb_calibration(&world.true_calib, 5.0, 50.0, 100.0, 7);
    let mut calib = calib0.clone();
    let e0 = score(&world.true_calib.cameras[0], &calib.cameras[0]);
    println!("initial: {:.3} deg {:.2} cm {:.2} ms", e0.rotation_deg, e0.translation_cm, e0.temporal_ms);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut trans_opt = AdamState::new(3);
    let mut rot_opt = AdamState::new(3);
    let mut dt_opt = AdamState::new(1);
    let total = 4000usize;
    let mut sign_hist = [0i32; 3];

    for step in 0..total {
        let fi = rng.gen_range(0..world.dataset.frames[0].len());
        let frame = &world.dataset.frames[0][fi];
        let geo = FrameGeometry::compute(&world.dataset.trajectory, &calib, 0, frame.timestamp).unwrap();
        let pts_cam_all = transform_points_to_camera(&geo.world_pose, &world.scene.positions);
        let (pts_cam, idx) = cull_behind_camera(&pts_cam_all, cam.near);
        let kept = GaussianAttributes {
            colors: idx.iter().map(|&i| world.scene.attrs.colors[i]).collect(),
            opacities: idx.iter().map(|&i| world.scene.attrs.opacities[i]).collect(),
            scales: idx.iter().map(|&i| world.scene.attrs.scales[i]).collect(),
            rotations: idx.iter().map(|&i| world.scene.attrs.rotations[i]).collect(),
        };
        let world_pts: Vec<Vec3> = idx.iter().map(|&i| world.scene.positions[i]).collect();
        let rots_cam = rotate_gaussian_orientations(&geo.world_pose, &kept.rotations);
        let projected = project(&pts_cam, &rots_cam, &kept.scales, &kept.opacities, &kept.colors, cam, &rcfg);
        let buf = render(&projected, cam, &rcfg);
        let (_, gi, _) = total_loss(&buf.color, &frame.image, cam.width, cam.height, &kept.scales, &lcfg).unwrap();
        let rg = render_backward(&projected, &pts_cam, &rots_cam, &kept.scales, cam, &rcfg, &buf, &gi);
        let pg = geo.pose_gradients(&world_pts, &kept.rotations, &rg.positions, &rg.rotations);
        for k in 0..3 { sign_hist[k] += pg.translation[k].signum() as i32; }
        let decay = 1.0 - 0.9 * step as f64 / (total - 1) as f64;
        let ut = trans_opt.update(pg.translation.as_slice(), 5e-3 * decay);
        let ur = rot_opt.update(pg.rotation.as_slice(), 1e-4 * decay);
        let ud = dt_opt.update(&[pg.time_offset], 1e-3 * decay);
        retract_calibration(&mut calib.cameras[0],
            Vec3::new(ur[0], ur[1], ur[2]), Vec3::new(ut[0], ut[1], ut[2]), ud[0]);
        if step % 400 == 0 {
            let e = score(&world.true_calib.cameras[0], &calib.cameras[0]);
            println!("step {step:4}: {:.3} deg {:.2} cm {:.2} ms", e.rotation_deg, e.translation_cm, e.temporal_ms);
        }
    }
    let e = score(&world.true_calib.cameras[0], &calib.cameras[0]);
    println!("final: {:.3} deg {:.2} cm {:.2} ms; sign sums {:?}", e.rotation_deg, e.translation_cm, e.temporal_ms, sign_hist);
}
