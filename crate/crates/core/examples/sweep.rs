use splatcal::field::FieldConfig;
use splatcal::synth::{generate_world, perturb_calibration, score, SynthConfig, SceneKind, TrajectoryKind};
use splatcal::train::{run_calibration, Schedule, ScheduleMode, Stage, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1500);
    let world = generate_world(&SynthConfig {
        seed: 1, scene: SceneKind::Corridor, trajectory: TrajectoryKind::Straight,
        points_per_scan: 150, finest_voxel_m: 0.04, ..SynthConfig::default()
    });
    let noisy = perturb_calibration(&world.true_calib, 5.0, 50.0, 100.0, 7);
    let e0 = score(&world.true_calib.cameras[0], &noisy.cameras[0]);
    println!("initial: {:.2} deg {:.1} cm {:.1} ms; steps {steps}", e0.rotation_deg, e0.translation_cm, e0.temporal_ms);

    for (name, lr_hash, lr_mlp) in [
        ("hash 1e-2 mlp 1e-3", 1e-2, 1e-3),
        ("hash 3e-3 mlp 3e-4", 3e-3, 3e-4),
        ("hash 1e-3 mlp 1e-4", 1e-3, 1e-4),
        ("hash 3e-4 mlp 3e-5", 3e-4, 3e-5),
    ] {
        let schedule = Schedule {
            stages: vec![
                Stage { voxel_size: 0.10, steps: steps * 4 / 6 },
                Stage { voxel_size: 0.05, steps: steps / 6 },
                Stage { voxel_size: 0.02, steps: steps - steps * 4 / 6 - steps / 6 },
            ],
            warmup_steps: (steps / 12).max(50),
            mode: ScheduleMode::Spatiotemporal,
        };
        let cfg = TrainConfig {
            lr_hash, lr_mlp,
            field: FieldConfig {
                levels: 6, table_size_log2: 13, features_per_level: 2,
                base_resolution: 16, growth_factor: 1.6, hidden_layers: 2, hidden_width: 16,
            },
            ..TrainConfig::default()
        };
        let r = run_calibration(&world.dataset, &noisy, &schedule, &cfg, 99).unwrap();
        let e = score(&world.true_calib.cameras[0], &r.calibration.cameras[0]);
        let mid = &r.metrics[steps/2];
        println!("{name}: mid({}) {:.2}deg {:.1}cm {:.1}ms | final {:.3} deg {:.2} cm {:.2} ms | loss {:.4}",
            mid.step, mid.rot_err_deg.unwrap(), mid.trans_err_cm.unwrap(), mid.dt_err_ms.unwrap(),
            e.rotation_deg, e.translation_cm, e.temporal_ms, r.metrics.last().unwrap().total_loss);
    }
}
