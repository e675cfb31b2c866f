use splatcal::geometry::{Vec3, CalibrationState};
use splatcal::loss::{photometric_loss, LossConfig};
use splatcal::synth::{generate_world, render_scene_image, SynthConfig, SceneKind, TrajectoryKind};
use splatcal::raster::RenderConfig;

fn main() {
    let cfg = SynthConfig {
        seed: 1,
        scene: SceneKind::Corridor,
        trajectory: TrajectoryKind::Straight,
        points_per_scan: 150,
        finest_voxel_m: 0.04,
        ..SynthConfig::default()
    };
    let world = generate_world(&cfg);
    let rcfg = RenderConfig::default();
    let lcfg = LossConfig::default();
    let cam = &world.dataset.cameras[0];

    // Photometric loss at a translation offset along one lidar axis, averaged
    // over several frames, rendering the TRUE scene attributes.
    let loss_at = |axis: usize, offset: f64| -> f64 {
        let mut calib: CalibrationState = world.true_calib.clone();
        calib.cameras[0].extrinsic.translation[axis] += offset;
        let mut total = 0.0;
        let mut n = 0;
        for fi in (0..world.dataset.frames[0].len()).step_by(8) {
            let frame = &world.dataset.frames[0][fi];
            let w = world.dataset.trajectory
                .sample(frame.timestamp + calib.cameras[0].time_offset).unwrap()
                .compose(&calib.cameras[0].extrinsic);
            let img = render_scene_image(&world.scene.positions, &world.scene.attrs, &w, cam, &rcfg);
            let (l1, dssim, _) = photometric_loss(&img, &frame.image, cam.width, cam.height, &lcfg).unwrap();
            total += 0.8 * l1 + 0.2 * dssim;
            n += 1;
        }
        total / n as f64
    };

    for axis in 0..3 {
        print!("axis {axis}: ");
        for off in [-0.2, -0.1, -0.05, -0.02, 0.0, 0.02, 0.05, 0.1, 0.2] {
            print!("{:.5} ", loss_at(axis, off));
        }
        println!();
    }
}
