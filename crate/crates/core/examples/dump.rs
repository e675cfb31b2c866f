use splatcal::field::*;
use splatcal::geometry::*;
use splatcal::cloud::{cull_behind_camera, voxel_downsample};
use splatcal::raster::{project_attributes, render, RenderConfig};
use splatcal::synth::*;
use splatcal::train::*;

fn save(path: &str, img: &[f64], w: usize, h: usize) {
    let bytes: Vec<u8> = img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(path, &bytes, w as u32, h as u32, image::ColorType::Rgb8).unwrap();
}

fn main() {
    let world = generate_world(&SynthConfig {
        seed: 1, scene: SceneKind::Corridor, trajectory: TrajectoryKind::Straight,
        points_per_scan: 150, finest_voxel_m: 0.04, ..SynthConfig::default()
    });
    let cam = &world.dataset.cameras[0];
    let (w, h) = (cam.width, cam.height);
    save("/tmp/gt_f05.png", &world.dataset.frames[0][5].image, w, h);
    save("/tmp/gt_f20.png", &world.dataset.frames[0][20].image, w, h);
    save("/tmp/gt_f35.png", &world.dataset.frames[0][35].image, w, h);

    // render the TRUE scene at the NOISY calib for frame 20 (what training must undo)
    let noisy = perturb_calibration(&world.true_calib, 5.0, 50.0, 100.0, 7);
    let rcfg = RenderConfig::default();
    let f = &world.dataset.frames[0][20];
    let wp = world.dataset.trajectory.sample(f.timestamp + noisy.cameras[0].time_offset).unwrap()
        .compose(&noisy.cameras[0].extrinsic);
    let img = render_scene_image(&world.scene.positions, &world.scene.attrs, &wp, cam, &rcfg);
    save("/tmp/noisy_true_attrs_f20.png", &img, w, h);

    // warm-up the field at the noisy calib, then render frame 20
    let schedule = Schedule {
        stages: vec![Stage { voxel_size: 0.10, steps: 800 }],
        warmup_steps: 799, mode: ScheduleMode::Spatiotemporal,
    };
    let cfg = TrainConfig {
        field: FieldConfig { levels: 6, table_size_log2: 13, features_per_level: 2,
            base_resolution: 16, growth_factor: 1.6, hidden_layers: 2, hidden_width: 16 },
        ..TrainConfig::default()
    };
    let r = run_calibration(&world.dataset, &noisy, &schedule, &cfg, 42).unwrap();
    let stage_pts = voxel_downsample(&world.dataset.raw_cloud, 0.10).positions;
    let geo = FrameGeometry::compute(&world.dataset.trajectory, &noisy, 0, f.timestamp).unwrap();
    let all = transform_points_to_camera(&geo.world_pose, &stage_pts);
    let (pts_cam, idx) = cull_behind_camera(&all, cam.near);
    let wpts: Vec<Vec3> = idx.iter().map(|&i| stage_pts[i]).collect();
    let (attrs, _) = field_forward(&wpts, &r.field).unwrap();
    let rots_cam = rotate_gaussian_orientations(&geo.world_pose, &attrs.rotations);
    let projected = project_attributes(&pts_cam, &rots_cam, &attrs, cam, &rcfg);
    let buf = render(&projected, cam, &rcfg);
    save("/tmp/warmup_field_f20.png", &buf.color, w, h);
    println!("saved; mean opacity {:.3}, mean scale {:.3}",
        attrs.opacities.iter().sum::<f64>() / attrs.len() as f64,
        attrs.scales.iter().map(|s| s.x).sum::<f64>() / attrs.len() as f64);
}
