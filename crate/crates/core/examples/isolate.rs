use nalgebra::{UnitQuaternion, Vector3};
use splatcal::field::FieldConfig;
use splatcal::geometry::{Pose, Vec3};
use splatcal::synth::{generate_world, score, SynthConfig, SceneKind, TrajectoryKind};
use splatcal::train::{run_calibration, Schedule, ScheduleMode, Stage, TrainConfig};

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
    let steps = 500;
    let schedule = Schedule {
        stages: vec![Stage { voxel_size: 0.10, steps }],
        warmup_steps: 100,
        mode: ScheduleMode::Spatiotemporal,
    };
    let train_cfg = TrainConfig {
        field: FieldConfig {
            levels: 6, table_size_log2: 13, features_per_level: 2,
            base_resolution: 16, growth_factor: 1.6, hidden_layers: 2, hidden_width: 16,
        },
        ..TrainConfig::default()
    };

    // Perturb exactly one parameter, train, report.
    let cases: Vec<(&str, Box<dyn Fn(&mut splatcal::geometry::CameraCalibration)>)> = vec![
        ("trans +20cm x", Box::new(|c| c.extrinsic.translation += Vec3::new(0.2, 0.0, 0.0))),
        ("trans +20cm y", Box::new(|c| c.extrinsic.translation += Vec3::new(0.0, 0.2, 0.0))),
        ("trans +20cm z", Box::new(|c| c.extrinsic.translation += Vec3::new(0.0, 0.0, 0.2))),
        ("rot +3deg yaw", Box::new(|c| {
            c.extrinsic = Pose::new(
                c.extrinsic.rotation * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 3f64.to_radians()),
                c.extrinsic.translation);
        })),
        ("dt +50ms", Box::new(|c| c.time_offset += 0.05)),
    ];
    for (name, f) in cases {
        let mut calib = world.true_calib.clone();
        f(&mut calib.cameras[0]);
        let e0 = score(&world.true_calib.cameras[0], &calib.cameras[0]);
        let r = run_calibration(&world.dataset, &calib, &schedule, &train_cfg, 3).unwrap();
        let e = score(&world.true_calib.cameras[0], &r.calibration.cameras[0]);
        println!("{name:14}: rot {:.3}->{:.3}  trans {:.2}->{:.2}  dt {:.2}->{:.2}",
            e0.rotation_deg, e.rotation_deg, e0.translation_cm, e.translation_cm, e0.temporal_ms, e.temporal_ms);
    }
}
