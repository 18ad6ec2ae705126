//! Estimator orchestration: static initialization, timestamp-ordered
//! measurement processing, keyframe-driven cloning with the retaining
//! marginalization, and the visual update pipeline (triangulation,
//! DVL-cloud enhancement, nullspace projection, gating).

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::config::Config;
use crate::features::{
    recover_feature_position, DvlPointCloud, EnhancementParams, FeatureMeasurement, FeatureTrack,
};
use crate::geom::UnitQuat;
use crate::logio::{PoseRecord, SensorLog, TrajectoryRecord};
use crate::propagation::{propagate_state, ImuNoiseParams, ImuSample, MAX_IMU_DT};
use crate::state::{
    select_keyframe, FilterState, ImuState, KeyframeCriteria, BA, BG, IMU_DIM, ORI, POS, VEL,
};
use crate::updates::{
    chi2_gate, compress_measurements, dvl_velocity_residual, ekf_update, nullspace_project,
    pressure_residual, visual_feature_residual, DvlVelocity, Extrinsics, PressureSample,
    UpdateOutcome,
};

#[derive(Debug)]
pub enum EstimatorError {
    NoImuData,
    /// The initialization window is not static enough to trust gravity.
    InitializationNotStatic { accel_var: f64, threshold: f64 },
    /// Not enough IMU data inside the initialization window.
    InitializationWindowTooShort { have: usize },
    Config(String),
}

impl fmt::Display for EstimatorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorError::NoImuData => write!(f, "log contains no IMU data"),
            EstimatorError::InitializationNotStatic { accel_var, threshold } => write!(
                f,
                "initialization window not static: accel variance {accel_var:.4} > {threshold}"
            ),
            EstimatorError::InitializationWindowTooShort { have } => {
                write!(f, "initialization window holds only {have} IMU samples")
            }
            EstimatorError::Config(msg) => write!(f, "estimator config: {msg}"),
        }
    }
}

impl std::error::Error for EstimatorError {}

/// Sensor/feature toggles mirroring the CLI ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub use_dvl: bool,
    pub use_visual: bool,
    pub use_pressure: bool,
    pub use_enhancement: bool,
    pub use_keyframes: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            use_dvl: true,
            use_visual: true,
            use_pressure: true,
            use_enhancement: true,
            use_keyframes: true,
        }
    }
}

/// Run counters and covariance traces for evaluation and debugging.
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    pub keyframes: usize,
    pub marginalizations: usize,
    pub dvl_updates_accepted: usize,
    pub dvl_updates_gated: usize,
    pub pressure_updates_accepted: usize,
    pub pressure_updates_gated: usize,
    pub visual_tracks_used: usize,
    pub visual_tracks_gated: usize,
    pub visual_tracks_failed: usize,
    pub features_enhanced: usize,
    pub features_unenhanced: usize,
    pub stale_measurements_dropped: usize,
    pub imu_gap_warnings: usize,
    pub updates_skipped_singular: usize,
    pub max_position_cov_trace: f64,
    pub nan_detected: bool,
    /// Position covariance block at every emitted pose.
    pub position_cov_series: Vec<(f64, Matrix3<f64>)>,
}

struct Estimator<'a> {
    config: &'a Config,
    opts: RunOptions,
    ext: Extrinsics,
    noise: ImuNoiseParams,
    criteria: KeyframeCriteria,
    enhancement: EnhancementParams,
    state: FilterState,
    tracks: BTreeMap<u64, FeatureTrack>,
    clouds: VecDeque<DvlPointCloud>,
    held: ImuSample,
    filter_time: f64,
    initial_pressure: Option<PressureSample>,
    initial_z: f64,
    last_kf_position: Vector3<f64>,
    last_kf_ids: BTreeSet<u64>,
    poses: Vec<PoseRecord>,
    next_plain_emit: f64,
    diag: Diagnostics,
}

const MAX_CLOUD_BUFFER: usize = 2048;

/// Runs the full estimator over a sensor log. Returns one pose per keyframe
/// (or a 1 Hz dead-reckoning cadence when the visual pipeline is off) plus
/// the final IMU state, along with run diagnostics.
pub fn run_estimator(
    log: &SensorLog,
    config: &Config,
    opts: &RunOptions,
) -> Result<(TrajectoryRecord, Diagnostics), EstimatorError> {
    if log.imu.is_empty() {
        return Err(EstimatorError::NoImuData);
    }
    let ext = log
        .header
        .extrinsics
        .to_extrinsics()
        .map_err(|e| EstimatorError::Config(e.to_string()))?;
    let noise = ImuNoiseParams {
        gyro_noise_density: log.header.imu_noise.gyro_noise_density.max(1e-8),
        accel_noise_density: log.header.imu_noise.accel_noise_density.max(1e-7),
        gyro_bias_walk: log.header.imu_noise.gyro_bias_walk.max(1e-9),
        accel_bias_walk: log.header.imu_noise.accel_bias_walk.max(1e-8),
        gravity_magnitude: log.header.imu_noise.gravity,
    };

    // --- static initialization over the first init_window seconds ---
    let t0 = log.imu[0].t;
    let t_init_end = t0 + config.filter.init_window;
    let init_samples: Vec<&crate::logio::ImuRecord> =
        log.imu.iter().take_while(|s| s.t <= t_init_end).collect();
    if init_samples.len() < 20 {
        return Err(EstimatorError::InitializationWindowTooShort { have: init_samples.len() });
    }
    let n = init_samples.len() as f64;
    let mean_gyro: Vector3<f64> = init_samples.iter().map(|s| s.gyro).sum::<Vector3<f64>>() / n;
    let mean_accel: Vector3<f64> = init_samples.iter().map(|s| s.accel).sum::<Vector3<f64>>() / n;
    let accel_var = init_samples
        .iter()
        .map(|s| (s.accel - mean_accel).norm_squared())
        .sum::<f64>()
        / n;
    if accel_var > config.filter.init_accel_var_threshold {
        return Err(EstimatorError::InitializationNotStatic {
            accel_var,
            threshold: config.filter.init_accel_var_threshold,
        });
    }

    // Gravity direction fixes roll/pitch; yaw starts at zero by definition of
    // the odometry frame.
    let orientation = UnitQuat::from_two_vectors(&Vector3::z(), &mean_accel);
    let imu0 = ImuState {
        orientation,
        position: Vector3::zeros(),
        velocity: Vector3::zeros(),
        gyro_bias: mean_gyro,
        accel_bias: Vector3::zeros(),
    };

    let imu_dt = 1.0 / log.header.rates.imu_hz.max(1.0);
    let g = noise.gravity_magnitude.max(1.0);
    let sd_a_disc = noise.accel_noise_density / imu_dt.sqrt();
    let sd_g_disc = noise.gyro_noise_density / imu_dt.sqrt();
    let tilt_var = sd_a_disc * sd_a_disc / n / (g * g)
        + (config.filter.init_accel_bias_sd / g).powi(2);
    let yaw_var = config.filter.init_yaw_sd.powi(2);
    let bg_var = sd_g_disc * sd_g_disc / n
        + noise.gyro_bias_walk.powi(2) * config.filter.init_window;
    let ba_var = config.filter.init_accel_bias_sd.powi(2);

    let mut cov = DMatrix::zeros(IMU_DIM, IMU_DIM);
    for k in 0..3 {
        cov[(ORI + k, ORI + k)] = if k == 2 { yaw_var } else { tilt_var };
        cov[(POS + k, POS + k)] = 1e-10;
        cov[(VEL + k, VEL + k)] = 1e-6;
        cov[(BG + k, BG + k)] = bg_var.max(1e-14);
        cov[(BA + k, BA + k)] = ba_var;
    }
    let state = FilterState::new(imu0, cov, config.filter.max_clones);

    // Pressure datum: mean over the initialization window, else first seen.
    let init_pressure: Vec<&crate::logio::PressureRecord> =
        log.pressure.iter().take_while(|p| p.t <= t_init_end).collect();
    let initial_pressure = if init_pressure.is_empty() {
        None
    } else {
        let mean = init_pressure.iter().map(|p| p.depth_equivalent).sum::<f64>()
            / init_pressure.len() as f64;
        Some(PressureSample {
            timestamp: t_init_end,
            depth_equivalent: mean,
            noise_sd: init_pressure[0].noise_sd,
        })
    };

    let held = ImuSample {
        timestamp: t_init_end,
        accel: init_samples.last().unwrap().accel,
        gyro: init_samples.last().unwrap().gyro,
    };

    let mut est = Estimator {
        config,
        opts: *opts,
        ext,
        noise,
        criteria: config.keyframe_criteria(),
        enhancement: config.enhancement_params(),
        state,
        tracks: BTreeMap::new(),
        clouds: VecDeque::new(),
        held,
        filter_time: t_init_end,
        initial_pressure,
        initial_z: 0.0,
        last_kf_position: Vector3::zeros(),
        last_kf_ids: BTreeSet::new(),
        poses: Vec::new(),
        next_plain_emit: t_init_end,
        diag: Diagnostics::default(),
    };

    est.process(log);
    est.emit_pose(true);

    let diag = est.diag;
    Ok((TrajectoryRecord { poses: est.poses }, diag))
}

impl<'a> Estimator<'a> {
    fn process(&mut self, log: &SensorLog) {
        let mut i_imu = log.imu.partition_point(|r| r.t <= self.filter_time);
        let mut i_dvl = log.dvl.partition_point(|r| r.t <= self.filter_time);
        let mut i_pre = log.pressure.partition_point(|r| r.t <= self.filter_time);
        let mut i_cam = log.camera.partition_point(|r| r.t <= self.filter_time);

        loop {
            // next event = (time, priority); imu wins ties so measurements see
            // the freshest inertial data
            let mut best: Option<(f64, u8)> = None;
            let mut consider = |t: Option<f64>, prio: u8| {
                if let Some(t) = t {
                    if best.map_or(true, |(bt, bp)| t < bt || (t == bt && prio < bp)) {
                        best = Some((t, prio));
                    }
                }
            };
            consider(log.imu.get(i_imu).map(|r| r.t), 0);
            consider(log.dvl.get(i_dvl).map(|r| r.t), 1);
            consider(log.pressure.get(i_pre).map(|r| r.t), 2);
            consider(log.camera.get(i_cam).map(|r| r.t), 3);

            let (_, prio) = match best {
                Some(b) => b,
                None => break,
            };
            match prio {
                0 => {
                    let r = &log.imu[i_imu];
                    i_imu += 1;
                    self.on_imu(&ImuSample { timestamp: r.t, accel: r.accel, gyro: r.gyro });
                }
                1 => {
                    let r = &log.dvl[i_dvl];
                    i_dvl += 1;
                    self.on_dvl(r);
                }
                2 => {
                    let r = &log.pressure[i_pre];
                    i_pre += 1;
                    self.on_pressure(r);
                }
                _ => {
                    let r = &log.camera[i_cam];
                    i_cam += 1;
                    self.on_camera(r);
                }
            }
        }
    }

    /// Propagates to `t`, sub-stepping at the held sample when the gap
    /// exceeds the integrator limit. `incoming` supplies the second sample of
    /// the final pair when an actual IMU sample ends the interval.
    fn advance_to(&mut self, t: f64, incoming: Option<&ImuSample>) {
        while self.filter_time < t - 1e-12 {
            let step_end = (self.filter_time + MAX_IMU_DT).min(t);
            let s1 = ImuSample { timestamp: self.filter_time, ..self.held };
            let s2 = match incoming {
                Some(s) if (s.timestamp - step_end).abs() < 1e-12 => *s,
                _ => ImuSample { timestamp: step_end, ..self.held },
            };
            if propagate_state(&mut self.state, &s1, &s2, &self.noise).is_ok() {
                self.filter_time = step_end;
            } else {
                break;
            }
        }
    }

    fn on_imu(&mut self, s: &ImuSample) {
        if s.timestamp < self.filter_time - 1e-9 {
            self.diag.stale_measurements_dropped += 1;
            return;
        }
        if s.timestamp - self.filter_time > MAX_IMU_DT + 1e-9 {
            self.diag.imu_gap_warnings += 1;
        }
        self.advance_to(s.timestamp, Some(s));
        self.held = *s;
    }

    fn on_dvl(&mut self, r: &crate::logio::DvlRecord) {
        if r.t < self.filter_time - 1e-9 {
            self.diag.stale_measurements_dropped += 1;
            return;
        }
        if !self.opts.use_dvl {
            return;
        }
        self.advance_to(r.t, None);

        if let Some(points) = r.cloud {
            if let Ok(cloud) = DvlPointCloud::new(r.t, points) {
                if self.clouds.len() == MAX_CLOUD_BUFFER {
                    self.clouds.pop_front();
                }
                self.clouds.push_back(cloud);
            }
        }

        let z = DvlVelocity {
            timestamp: r.t,
            velocity: r.velocity,
            noise_sd: r.noise_sd.max(self.config.filter.dvl_noise_floor),
        };
        let omega = self.held.gyro - self.state.imu.gyro_bias;
        let (residual, h) = dvl_velocity_residual(&self.state, &z, &self.ext, &omega);
        let r_meas = DMatrix::identity(3, 3) * (z.noise_sd * z.noise_sd);
        let res = DVector::from_column_slice(residual.as_slice());
        if chi2_gate(&res, &h, &self.state.covariance, &r_meas, self.config.filter.chi2_confidence)
        {
            self.apply_update(&res, &h, &r_meas);
            self.diag.dvl_updates_accepted += 1;
        } else {
            self.diag.dvl_updates_gated += 1;
        }
    }

    fn on_pressure(&mut self, r: &crate::logio::PressureRecord) {
        if r.t < self.filter_time - 1e-9 {
            self.diag.stale_measurements_dropped += 1;
            return;
        }
        if !self.opts.use_pressure {
            return;
        }
        self.advance_to(r.t, None);

        let sample = PressureSample {
            timestamp: r.t,
            depth_equivalent: r.depth_equivalent,
            noise_sd: r.noise_sd.max(self.config.filter.pressure_noise_floor),
        };
        let initial = match self.initial_pressure {
            Some(p) => p,
            None => {
                // no datum yet (no pressure inside the init window): capture
                self.initial_pressure = Some(sample);
                self.initial_z = self.state.imu.position.z;
                return;
            }
        };
        let (residual, h) = pressure_residual(&self.state, &sample, &initial, self.initial_z, &self.ext);
        let r_meas = DMatrix::identity(1, 1) * (sample.noise_sd * sample.noise_sd);
        let res = DVector::from_element(1, residual);
        if chi2_gate(&res, &h, &self.state.covariance, &r_meas, self.config.filter.chi2_confidence)
        {
            self.apply_update(&res, &h, &r_meas);
            self.diag.pressure_updates_accepted += 1;
        } else {
            self.diag.pressure_updates_gated += 1;
        }
    }

    fn on_camera(&mut self, r: &crate::logio::CameraRecord) {
        if r.t < self.filter_time - 1e-9 {
            self.diag.stale_measurements_dropped += 1;
            return;
        }
        self.advance_to(r.t, None);

        if !self.opts.use_visual {
            // dead-reckoning cadence: one pose per second
            if r.t >= self.next_plain_emit {
                self.emit_pose(false);
                self.next_plain_emit = r.t + 1.0;
            }
            return;
        }

        let current: BTreeSet<u64> = r.observations.iter().map(|(id, _, _)| *id).collect();

        // Tracks the front-end lost since the previous frame are spent now.
        let ended: Vec<u64> = self
            .tracks
            .iter()
            .filter(|(id, tr)| tr.alive && !current.contains(id))
            .map(|(id, _)| *id)
            .collect();
        let mut batch = Vec::new();
        for id in ended {
            let mut track = self.tracks.remove(&id).unwrap();
            track.alive = false;
            if track.measurements.len() >= 3 {
                batch.push(track);
            }
        }
        if !batch.is_empty() {
            let Self { state, ext, clouds, opts, config, enhancement, diag, .. } = self;
            visual_batch_update(
                state,
                &batch,
                ext,
                clouds,
                opts,
                config,
                enhancement,
                diag,
            );
        }

        // Keyframe decision.
        let n_features = r.observations.len();
        let is_keyframe = if !self.opts.use_keyframes {
            true
        } else if self.state.clones.is_empty() {
            n_features > self.criteria.min_features
        } else {
            let translation = (self.state.imu.position - self.last_kf_position).norm();
            let lost_fraction = if self.last_kf_ids.is_empty() {
                0.0
            } else {
                let lost = self.last_kf_ids.iter().filter(|id| !current.contains(id)).count();
                lost as f64 / self.last_kf_ids.len() as f64
            };
            select_keyframe(n_features, translation, lost_fraction, &self.criteria)
        };

        if is_keyframe {
            if self.state.clones.len() == self.state.max_clones {
                let mut track_vec: Vec<FeatureTrack> =
                    std::mem::take(&mut self.tracks).into_values().collect();
                let Self { state, ext, clouds, opts, config, enhancement, diag, .. } = self;
                let result = state.marginalize(&mut track_vec, |state, batch| {
                    if !batch.is_empty() {
                        visual_batch_update(
                            state,
                            batch,
                            ext,
                            clouds,
                            opts,
                            config,
                            enhancement,
                            diag,
                        );
                    }
                });
                self.tracks = track_vec.into_iter().map(|t| (t.feature_id, t)).collect();
                if result.is_ok() {
                    self.diag.marginalizations += 1;
                }
            }
            if self.state.augment_clone(r.t, true).is_ok() {
                for (id, u, v) in &r.observations {
                    let track = self.tracks.entry(*id).or_insert_with(|| FeatureTrack {
                        feature_id: *id,
                        measurements: Vec::new(),
                        alive: true,
                    });
                    track.alive = true;
                    track.measurements.push(FeatureMeasurement {
                        timestamp: r.t,
                        point: nalgebra::Vector2::new(*u, *v),
                    });
                }
                self.last_kf_position = self.state.imu.position;
                self.last_kf_ids = current;
                self.diag.keyframes += 1;
                self.emit_pose(false);
            }
        } else {
            // bookkeeping only: new ids start empty tracks so their later
            // disappearance is observed
            for (id, _, _) in &r.observations {
                self.tracks.entry(*id).or_insert_with(|| FeatureTrack {
                    feature_id: *id,
                    measurements: Vec::new(),
                    alive: true,
                });
            }
        }
    }

    fn apply_update(&mut self, residual: &DVector<f64>, h: &DMatrix<f64>, r: &DMatrix<f64>) {
        match ekf_update(&mut self.state, residual, h, r) {
            Ok(UpdateOutcome::Applied) => {}
            Ok(UpdateOutcome::SkippedSingular) => self.diag.updates_skipped_singular += 1,
            Err(_) => self.diag.updates_skipped_singular += 1,
        }
    }

    fn emit_pose(&mut self, final_pose: bool) {
        if let Some(last) = self.poses.last() {
            if self.filter_time <= last.t {
                if !final_pose {
                    return;
                }
                // final state at an already-emitted time: skip
                if self.filter_time <= last.t {
                    return;
                }
            }
        }
        let p = self.state.imu.position;
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            self.diag.nan_detected = true;
            return;
        }
        let block = self.state.covariance.view((POS, POS), (3, 3));
        let mut cov = Matrix3::zeros();
        cov.copy_from(&block);
        let trace = cov.trace();
        if !trace.is_finite() {
            self.diag.nan_detected = true;
        }
        self.diag.max_position_cov_trace = self.diag.max_position_cov_trace.max(trace);
        self.diag.position_cov_series.push((self.filter_time, cov));
        self.poses.push(PoseRecord {
            t: self.filter_time,
            position: p,
            orientation: Some(self.state.imu.orientation),
        });
    }
}

/// Recovers every track's position, builds projected residual blocks, gates
/// them and applies one stacked EKF update.
#[allow(clippy::too_many_arguments)]
fn visual_batch_update(
    state: &mut FilterState,
    batch: &[FeatureTrack],
    ext: &Extrinsics,
    clouds: &VecDeque<DvlPointCloud>,
    opts: &RunOptions,
    config: &Config,
    enhancement: &EnhancementParams,
    diag: &mut Diagnostics,
) {
    let sigma = config.filter.visual_noise_sd.max(config.filter.visual_noise_floor);
    let sigma2 = sigma * sigma;

    let cloud_slice: Vec<DvlPointCloud> = if opts.use_enhancement && opts.use_dvl {
        clouds.iter().copied().collect()
    } else {
        Vec::new()
    };

    let mut rows = 0usize;
    let mut blocks: Vec<(DVector<f64>, DMatrix<f64>)> = Vec::new();
    for track in batch {
        if track.measurements.len() < 3 {
            continue;
        }
        let feature = match recover_feature_position(
            track,
            &state.clones,
            ext,
            &cloud_slice,
            enhancement,
        ) {
            Ok(f) => f,
            Err(_) => {
                diag.visual_tracks_failed += 1;
                continue;
            }
        };

        let block = match visual_feature_residual(state, ext, track, &feature.position) {
            Ok(b) => b,
            Err(_) => {
                diag.visual_tracks_failed += 1;
                continue;
            }
        };
        let projected = match nullspace_project(&block) {
            Ok(p) => p,
            Err(_) => {
                diag.visual_tracks_failed += 1;
                continue;
            }
        };
        let r_meas = DMatrix::identity(projected.residual.len(), projected.residual.len()) * sigma2;
        if !chi2_gate(
            &projected.residual,
            &projected.h_x,
            &state.covariance,
            &r_meas,
            config.filter.chi2_confidence,
        ) {
            diag.visual_tracks_gated += 1;
            continue;
        }
        if feature.enhanced {
            diag.features_enhanced += 1;
        } else {
            diag.features_unenhanced += 1;
        }
        diag.visual_tracks_used += 1;
        rows += projected.residual.len();
        blocks.push((projected.residual, projected.h_x));
    }

    if rows == 0 {
        return;
    }
    let dim = state.dim();
    let mut h = DMatrix::zeros(rows, dim);
    let mut res = DVector::zeros(rows);
    let mut at = 0;
    for (r, hx) in blocks {
        let n = r.len();
        res.rows_mut(at, n).copy_from(&r);
        h.view_mut((at, 0), (n, dim)).copy_from(&hx);
        at += n;
    }
    let (h, res) = if rows > dim { compress_measurements(&h, &res) } else { (h, res) };
    let r_meas = DMatrix::identity(res.len(), res.len()) * sigma2;
    match ekf_update(state, &res, &h, &r_meas) {
        Ok(UpdateOutcome::Applied) => {}
        _ => diag.updates_skipped_singular += 1,
    }
}
