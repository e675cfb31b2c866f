use splatcal::field::FieldConfig;
use splatcal::synth::{generate_world, perturb_calibration, score, SynthConfig, SceneKind, TrajectoryKind};
use splatcal::train::{run_calibration, Schedule, ScheduleMode, Stage, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1000);
    let noise_seed: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(7);
    let cfg = SynthConfig {
        seed: 1,
        scene: SceneKind::Corridor,
        trajectory: TrajectoryKind::Straight,
        points_per_scan: 150,
        finest_voxel_m: 0.04,
        ..SynthConfig::default()
    };
    let t0 = Instant::now();
    let world = generate_world(&cfg);
    print!("gen {:.1?}; raw {}; stages", t0.elapsed(), world.dataset.raw_cloud.len());
    for v in [0.10, 0.05, 0.02] {
        print!(" {}", splatcal::cloud::voxel_downsample(&world.dataset.raw_cloud, v).len());
    }
    println!();

    let s1 = steps * 4 / 6;
    let s2 = steps / 6;
    let schedule = Schedule {
        stages: vec![
            Stage { voxel_size: 0.10, steps: s1 },
            Stage { voxel_size: 0.05, steps: s2 },
            Stage { voxel_size: 0.02, steps: steps - s1 - s2 },
        ],
        warmup_steps: steps / 12,
        mode: ScheduleMode::Spatiotemporal,
    };
    let train_cfg = TrainConfig {
        field: FieldConfig {
            levels: 6,
            table_size_log2: 13,
            features_per_level: 2,
            base_resolution: 16,
            growth_factor: 1.6,
            hidden_layers: 2,
            hidden_width: 16,
        },
        ..TrainConfig::default()
    };
    let noisy = perturb_calibration(&world.true_calib, 5.0, 50.0, 100.0, noise_seed);
    let e0 = score(&world.true_calib.cameras[0], &noisy.cameras[0]);
    println!("initial: {:.3} deg, {:.2} cm, {:.2} ms", e0.rotation_deg, e0.translation_cm, e0.temporal_ms);

    let t1 = Instant::now();
    let result = run_calibration(&world.dataset, &noisy, &schedule, &train_cfg, 99).unwrap();
    let per_step = t1.elapsed().as_secs_f64() / steps as f64 * 1e3;
    let e = score(&world.true_calib.cameras[0], &result.calibration.cameras[0]);
    println!("final ({} steps, {:.1?}, {:.1} ms/step): {:.3} deg, {:.2} cm, {:.2} ms",
        steps, t1.elapsed(), per_step, e.rotation_deg, e.translation_cm, e.temporal_ms);
    // error trace every ~steps/10
    for row in result.metrics.iter().step_by((steps/10).max(1)) {
        println!("  step {:5}: rot {:.3} trans {:.2} dt {:.2} loss {:.4} voxel {}",
            row.step, row.rot_err_deg.unwrap(), row.trans_err_cm.unwrap(), row.dt_err_ms.unwrap(),
            row.total_loss, row.voxel_cm);
    }
}
