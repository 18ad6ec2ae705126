//! End-to-end estimator runs on simulated logs.

use vdio_core::config::{Config, SegmentConfig};
use vdio_core::estimator::{run_estimator, EstimatorError, RunOptions};
use vdio_core::eval::evaluate;
use vdio_core::logio::TrajectoryRecord;
use vdio_core::sim::{simulate, TruthTrajectory};

fn zero_noise(mut config: Config) -> Config {
    config.imu_noise.gyro_noise_density = 0.0;
    config.imu_noise.accel_noise_density = 0.0;
    config.imu_noise.gyro_bias_walk = 0.0;
    config.imu_noise.accel_bias_walk = 0.0;
    config.dvl.velocity_noise_sd = 0.0;
    config.dvl.cloud_range_sd = 0.0;
    config.pressure.noise_sd = 0.0;
    config.camera.visual_noise_sd = 0.0;
    config.camera.survival_prob = 1.0;
    config
}

fn short_mission() -> Config {
    let mut config = Config::default();
    config.trajectory.segments = vec![
        SegmentConfig { kind: "hover".into(), duration: 8.0, speed: 0.0 },
        SegmentConfig { kind: "transect".into(), duration: 25.0, speed: 0.4 },
        SegmentConfig { kind: "hover".into(), duration: 4.0, speed: 0.0 },
    ];
    config
}

fn final_error(truth: &TruthTrajectory, traj: &TrajectoryRecord) -> f64 {
    let last = traj.poses.last().expect("non-empty trajectory");
    let gt = truth.sample_at(last.t);
    (last.position - gt.position).norm()
}

#[test]
fn zero_noise_short_mission_tracks_truth() {
    let config = zero_noise(short_mission());
    let (truth, log) = simulate(&config, 1).unwrap();
    let (traj, diag) = run_estimator(&log, &config, &RunOptions::default()).unwrap();
    assert!(!diag.nan_detected);
    assert!(diag.keyframes > 10, "keyframes: {}", diag.keyframes);
    assert!(diag.dvl_updates_accepted > 50, "dvl accepted: {}", diag.dvl_updates_accepted);
    let err = final_error(&truth, &traj);
    assert!(err < 0.01, "final error {err:.4} m (diagnostics: {diag:?})");
}

#[test]
fn deterministic_trajectory_for_same_log() {
    let config = short_mission();
    let (_, log) = simulate(&config, 17).unwrap();
    let (a, _) = run_estimator(&log, &config, &RunOptions::default()).unwrap();
    let (b, _) = run_estimator(&log, &config, &RunOptions::default()).unwrap();
    assert_eq!(a.to_jsonl(), b.to_jsonl());
}

#[test]
fn dvl_removed_still_produces_full_trajectory() {
    let config = short_mission();
    let (truth, mut log) = simulate(&config, 5).unwrap();
    log.dvl.clear();
    let opts = RunOptions { use_dvl: false, ..Default::default() };
    let (traj, diag) = run_estimator(&log, &config, &opts).unwrap();
    assert!(!diag.nan_detected);
    let last_t = traj.poses.last().unwrap().t;
    assert!(
        last_t > truth.duration() - 2.0,
        "trajectory ends early at {last_t} of {}",
        truth.duration()
    );
}

#[test]
fn camera_removed_drifts_more_than_full_fusion() {
    // Hover-heavy mission: velocity-only dead reckoning random-walks while
    // the keyframed visual update holds position. Median over seeds.
    let mut config = Config::default();
    config.trajectory.segments = vec![
        SegmentConfig { kind: "hover".into(), duration: 8.0, speed: 0.0 },
        SegmentConfig { kind: "transect".into(), duration: 25.0, speed: 0.4 },
        SegmentConfig { kind: "hover".into(), duration: 90.0, speed: 0.0 },
        SegmentConfig { kind: "transect".into(), duration: 15.0, speed: 0.4 },
    ];

    let mut full_errs = Vec::new();
    let mut dr_errs = Vec::new();
    for seed in [9, 10, 11] {
        let (truth, log) = simulate(&config, seed).unwrap();
        let gt = truth.to_trajectory_record(5);
        let (full, _) = run_estimator(&log, &config, &RunOptions::default()).unwrap();
        let opts = RunOptions { use_visual: false, ..Default::default() };
        let (dead_reckoning, _) = run_estimator(&log, &config, &opts).unwrap();
        full_errs.push(evaluate(&full, &gt, 10.0).unwrap().rmse_xy);
        dr_errs.push(evaluate(&dead_reckoning, &gt, 10.0).unwrap().rmse_xy);
    }
    full_errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dr_errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert!(
        dr_errs[1] >= full_errs[1],
        "expected dead-reckoning (median {:.3}) to drift at least as much as fusion (median {:.3})",
        dr_errs[1],
        full_errs[1]
    );
}

#[test]
fn non_static_initialization_window_fails() {
    let mut config = short_mission();
    config.trajectory.segments[0] =
        SegmentConfig { kind: "transect".into(), duration: 8.0, speed: 0.8 };
    // aggressive yawing makes the accel window non-static
    config.trajectory.segments[1] =
        SegmentConfig { kind: "turn".into(), duration: 10.0, speed: 0.8 };
    let (_, log) = simulate(&config, 2).unwrap();
    match run_estimator(&log, &config, &RunOptions::default()) {
        Err(EstimatorError::InitializationNotStatic { .. }) => {}
        other => panic!("expected non-static init failure, got {other:?}"),
    }
}
