//! Deterministic under-ice world: an analytic ice underside with circular
//! openings, smooth vehicle trajectories built from transect/hover/turn
//! segments, and simulation of all four sensor streams (IMU, DVL velocity +
//! beam point clouds, pressure and camera feature tracks).

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::Config;
use crate::geom::{RigidTransform, Rotation3, UnitQuat};
use crate::logio::{
    CameraRecord, DvlRecord, ImuRecord, LogHeader, PressureRecord, SensorLog, SensorNoiseLevels,
    LOG_FORMAT_VERSION,
};

/// Circular hole in the ice (drilled or natural).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Opening {
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
}

/// Analytic ice underside: a base plane plus two sinusoids, with openings
/// where there is no surface at all.
#[derive(Debug, Clone, PartialEq)]
pub struct IceSurface {
    pub base_depth: f64,
    pub amplitude: f64,
    pub freq_x: f64,
    pub freq_y: f64,
    pub openings: Vec<Opening>,
}

impl IceSurface {
    pub fn in_opening(&self, x: f64, y: f64) -> bool {
        self.openings.iter().any(|o| {
            let dx = x - o.center_x;
            let dy = y - o.center_y;
            dx * dx + dy * dy <= o.radius * o.radius
        })
    }

    /// Surface height ignoring openings (smooth everywhere).
    pub fn height_unmasked(&self, x: f64, y: f64) -> f64 {
        self.base_depth
            + 0.5 * self.amplitude * ((TAU * self.freq_x * x + 0.7).sin()
                + (TAU * self.freq_y * y + 1.3).sin())
    }

    /// Global z of the ice underside at `(x, y)`, or `None` inside an opening.
    pub fn height(&self, x: f64, y: f64) -> Option<f64> {
        if self.in_opening(x, y) {
            None
        } else {
            Some(self.height_unmasked(x, y))
        }
    }

    /// Analytic gradient `(dz/dx, dz/dy)` of the unmasked surface.
    pub fn gradient(&self, x: f64, y: f64) -> Vector2<f64> {
        Vector2::new(
            0.5 * self.amplitude * TAU * self.freq_x * (TAU * self.freq_x * x + 0.7).cos(),
            0.5 * self.amplitude * TAU * self.freq_y * (TAU * self.freq_y * y + 1.3).cos(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Transect,
    Hover,
    Turn,
}

/// One mission segment. `speed` is forward speed (m/s) for transects and yaw
/// rate (rad/s) for turns; hovers ignore it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub duration: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    pub segments: Vec<Segment>,
    /// Vertical clearance below the mean ice underside.
    pub standoff: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorRates {
    pub imu_hz: f64,
    pub dvl_hz: f64,
    pub pressure_hz: f64,
    pub camera_hz: f64,
}

/// One fully-specified kinematic sample of the true vehicle state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSample {
    pub t: f64,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub accel_world: Vector3<f64>,
    /// Unwrapped heading.
    pub yaw: f64,
    pub yaw_rate: f64,
}

impl TruthSample {
    /// Rotation taking global vectors into the IMU frame.
    pub fn orientation(&self) -> UnitQuat {
        UnitQuat::exp(&Vector3::new(0.0, 0.0, -self.yaw))
    }

    /// Body-to-global pose.
    pub fn pose(&self) -> RigidTransform {
        RigidTransform::new(Rotation3::from_yaw(self.yaw), self.position)
    }

    pub fn omega_body(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.yaw_rate)
    }
}

/// Dense ground truth with helpers to sample at arbitrary times.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthTrajectory {
    pub dt: f64,
    pub samples: Vec<TruthSample>,
}

impl TruthTrajectory {
    pub fn duration(&self) -> f64 {
        self.samples.last().map(|s| s.t).unwrap_or(0.0)
    }

    /// Linear interpolation between dense samples (dt <= 0.01 keeps the
    /// interpolation error negligible for sensor synthesis).
    pub fn sample_at(&self, t: f64) -> TruthSample {
        let t = t.clamp(0.0, self.duration());
        let idx = ((t / self.dt).floor() as usize).min(self.samples.len() - 2);
        let a = &self.samples[idx];
        let b = &self.samples[idx + 1];
        let lam = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
        TruthSample {
            t,
            position: a.position.lerp(&b.position, lam),
            velocity: a.velocity.lerp(&b.velocity, lam),
            accel_world: a.accel_world.lerp(&b.accel_world, lam),
            yaw: a.yaw + lam * (b.yaw - a.yaw),
            yaw_rate: a.yaw_rate + lam * (b.yaw_rate - a.yaw_rate),
        }
    }

    /// Poses as a trajectory record (for ground-truth export).
    pub fn to_trajectory_record(&self, stride: usize) -> crate::logio::TrajectoryRecord {
        let poses = self
            .samples
            .iter()
            .step_by(stride.max(1))
            .map(|s| crate::logio::PoseRecord {
                t: s.t,
                position: s.position,
                orientation: Some(s.orientation()),
            })
            .collect();
        crate::logio::TrajectoryRecord { poses }
    }
}

/// Quintic smoothstep: C2, with zero first and second derivatives at 0 and 1.
fn smoothstep(tau: f64) -> f64 {
    let t = tau.clamp(0.0, 1.0);
    t * t * t * (t * (6.0 * t - 15.0) + 10.0)
}

fn smoothstep_deriv(tau: f64) -> f64 {
    if !(0.0..=1.0).contains(&tau) {
        return 0.0;
    }
    let t = tau;
    30.0 * t * t * (t - 1.0) * (t - 1.0)
}

/// Piecewise forward-speed / yaw-rate profile with quintic ramps at segment
/// starts so positions are C2-continuous.
struct MotionProfile {
    /// (start time, ramp length, previous value, target value)
    pieces: Vec<(f64, f64, f64, f64)>,
    total: f64,
}

impl MotionProfile {
    fn new(targets: &[(f64, f64)]) -> Self {
        // targets: (duration, value) per segment
        let mut pieces = Vec::with_capacity(targets.len());
        let mut t = 0.0;
        let mut prev = 0.0;
        for &(duration, value) in targets {
            let ramp = (duration / 3.0).min(1.5);
            pieces.push((t, ramp, prev, value));
            prev = value;
            t += duration;
        }
        MotionProfile { pieces, total: t }
    }

    fn piece_at(&self, t: f64) -> (f64, f64, f64, f64) {
        let mut current = self.pieces[0];
        for &p in &self.pieces {
            if p.0 <= t {
                current = p;
            } else {
                break;
            }
        }
        current
    }

    fn value(&self, t: f64) -> f64 {
        if self.pieces.is_empty() {
            return 0.0;
        }
        let t = t.clamp(0.0, self.total);
        let (start, ramp, prev, target) = self.piece_at(t);
        let tau = (t - start) / ramp;
        prev + (target - prev) * smoothstep(tau)
    }

    fn derivative(&self, t: f64) -> f64 {
        if self.pieces.is_empty() {
            return 0.0;
        }
        let t = t.clamp(0.0, self.total);
        let (start, ramp, prev, target) = self.piece_at(t);
        let tau = (t - start) / ramp;
        (target - prev) * smoothstep_deriv(tau) / ramp
    }
}

/// Generates C2-continuous ground truth at a fixed step (`dt <= 0.01`).
/// Motion is planar at constant depth `base_depth - standoff` starting at the
/// origin with zero heading.
pub fn generate_ground_truth(
    spec: &TrajectorySpec,
    ice: &IceSurface,
    dt: f64,
) -> TruthTrajectory {
    assert!(dt > 0.0 && dt <= 0.01, "ground-truth step must be in (0, 0.01] s");
    let speed_targets: Vec<(f64, f64)> = spec
        .segments
        .iter()
        .map(|s| (s.duration, if s.kind == SegmentKind::Transect { s.speed } else { 0.0 }))
        .collect();
    let yaw_targets: Vec<(f64, f64)> = spec
        .segments
        .iter()
        .map(|s| (s.duration, if s.kind == SegmentKind::Turn { s.speed } else { 0.0 }))
        .collect();
    let speed = MotionProfile::new(&speed_targets);
    let yaw_rate = MotionProfile::new(&yaw_targets);
    let total: f64 = spec.segments.iter().map(|s| s.duration).sum();
    let z = ice.base_depth - spec.standoff;

    let steps = (total / dt).round() as usize;
    let mut samples = Vec::with_capacity(steps + 1);
    let mut x: f64 = 0.0;
    let mut y: f64 = 0.0;
    let mut yaw: f64 = 0.0;

    for k in 0..=steps {
        let t = k as f64 * dt;
        let u = speed.value(t);
        let w = yaw_rate.value(t);
        let u_dot = speed.derivative(t);
        samples.push(TruthSample {
            t,
            position: Vector3::new(x, y, z),
            velocity: Vector3::new(u * yaw.cos(), u * yaw.sin(), 0.0),
            accel_world: Vector3::new(
                u_dot * yaw.cos() - u * w * yaw.sin(),
                u_dot * yaw.sin() + u * w * yaw.cos(),
                0.0,
            ),
            yaw,
            yaw_rate: w,
        });

        // RK4 on (x, y, yaw) with the analytic profile.
        if k < steps {
            let f = |ti: f64, yawi: f64| {
                let ui = speed.value(ti);
                (ui * yawi.cos(), ui * yawi.sin(), yaw_rate.value(ti))
            };
            let (k1x, k1y, k1w) = f(t, yaw);
            let (k2x, k2y, k2w) = f(t + 0.5 * dt, yaw + 0.5 * dt * k1w);
            let (k3x, k3y, k3w) = f(t + 0.5 * dt, yaw + 0.5 * dt * k2w);
            let (k4x, k4y, k4w) = f(t + dt, yaw + dt * k3w);
            x += dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
            y += dt / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
            yaw += dt / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w);
        }
    }
    TruthTrajectory { dt, samples }
}

/// A surface-attached landmark.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Landmark {
    id: u64,
    position: Vector3<f64>,
}

/// Deterministic jittered-grid landmark field over the mission's footprint.
fn generate_landmarks(
    truth: &TruthTrajectory,
    ice: &IceSurface,
    spacing: f64,
    margin: f64,
    rng: &mut ChaCha12Rng,
) -> Vec<Landmark> {
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for s in &truth.samples {
        min_x = min_x.min(s.position.x);
        max_x = max_x.max(s.position.x);
        min_y = min_y.min(s.position.y);
        max_y = max_y.max(s.position.y);
    }
    min_x -= margin;
    max_x += margin;
    min_y -= margin;
    max_y += margin;

    let nx = ((max_x - min_x) / spacing).ceil() as i64;
    let ny = ((max_y - min_y) / spacing).ceil() as i64;
    let mut landmarks = Vec::new();
    let mut id = 0;
    for i in 0..=nx {
        for j in 0..=ny {
            let jitter = 0.35 * spacing;
            let x = min_x + i as f64 * spacing + rng.gen_range(-jitter..jitter);
            let y = min_y + j as f64 * spacing + rng.gen_range(-jitter..jitter);
            if let Some(z) = ice.height(x, y) {
                landmarks.push(Landmark { id, position: Vector3::new(x, y, z) });
            }
            id += 1;
        }
    }
    landmarks
}

fn gaussian(rng: &mut ChaCha12Rng, sd: f64) -> f64 {
    if sd == 0.0 {
        return 0.0;
    }
    let n: f64 = StandardNormal.sample(rng);
    n * sd
}

/// Newton search for the beam/surface intersection along `o + s*d`, using the
/// unmasked surface; openings are checked at the converged point.
fn beam_intersection(
    ice: &IceSurface,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
) -> Option<(f64, Vector3<f64>)> {
    if dir.z <= 1e-6 {
        return None;
    }
    let mut s = (ice.base_depth - origin.z) / dir.z;
    for _ in 0..20 {
        let p = origin + dir * s;
        let f = origin.z + s * dir.z - ice.height_unmasked(p.x, p.y);
        let grad = ice.gradient(p.x, p.y);
        let df = dir.z - grad.x * dir.x - grad.y * dir.y;
        if df.abs() < 1e-9 {
            return None;
        }
        let step = f / df;
        s -= step;
        if step.abs() < 1e-12 {
            break;
        }
    }
    if !(0.3..100.0).contains(&s) {
        return None;
    }
    let p = origin + dir * s;
    if ice.in_opening(p.x, p.y) {
        return None;
    }
    Some((s, p))
}

/// Per-landmark track bookkeeping for the simulated front-end.
struct TrackState {
    track_id: u64,
}

/// Simulates all four sensor streams from dense ground truth. Every draw
/// comes from one of four per-sensor ChaCha streams derived from `seed`, so
/// identical inputs are bit-identical.
pub fn simulate_sensors(
    truth: &TruthTrajectory,
    config: &Config,
    seed: u64,
) -> SensorLog {
    let ice = config.ice_surface();
    let rates = config.sensor_rates();
    let ext = config.extrinsics().expect("valid extrinsics");
    let noise = config.imu_noise_params();
    let gravity = noise.gravity_vector();
    let duration = truth.duration();

    let mut imu_rng = ChaCha12Rng::seed_from_u64(seed ^ 0x1111_1111);
    let mut dvl_rng = ChaCha12Rng::seed_from_u64(seed ^ 0x2222_2222);
    let mut pressure_rng = ChaCha12Rng::seed_from_u64(seed ^ 0x3333_3333);
    let mut cam_rng = ChaCha12Rng::seed_from_u64(seed ^ 0x4444_4444);
    let mut landmark_rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5555_5555);

    // IMU with bias random walk.
    let imu_dt = 1.0 / rates.imu_hz;
    let n_imu = (duration * rates.imu_hz).floor() as usize;
    let mut gyro_bias = Vector3::zeros();
    let mut accel_bias = Vector3::zeros();
    let sd_g = noise.gyro_noise_density / imu_dt.sqrt();
    let sd_a = noise.accel_noise_density / imu_dt.sqrt();
    let walk_g = noise.gyro_bias_walk * imu_dt.sqrt();
    let walk_a = noise.accel_bias_walk * imu_dt.sqrt();
    let mut imu = Vec::with_capacity(n_imu + 1);
    for k in 0..=n_imu {
        let t = k as f64 * imu_dt;
        let s = truth.sample_at(t);
        let rot_ig = s.orientation().to_rotation();
        let specific_force = rot_ig * (s.accel_world - gravity);
        let gyro = s.omega_body()
            + gyro_bias
            + Vector3::new(
                gaussian(&mut imu_rng, sd_g),
                gaussian(&mut imu_rng, sd_g),
                gaussian(&mut imu_rng, sd_g),
            );
        let accel = specific_force
            + accel_bias
            + Vector3::new(
                gaussian(&mut imu_rng, sd_a),
                gaussian(&mut imu_rng, sd_a),
                gaussian(&mut imu_rng, sd_a),
            );
        imu.push(ImuRecord { t, gyro, accel });
        gyro_bias += Vector3::new(
            gaussian(&mut imu_rng, walk_g),
            gaussian(&mut imu_rng, walk_g),
            gaussian(&mut imu_rng, walk_g),
        );
        accel_bias += Vector3::new(
            gaussian(&mut imu_rng, walk_a),
            gaussian(&mut imu_rng, walk_a),
            gaussian(&mut imu_rng, walk_a),
        );
    }

    // DVL velocity + beam clouds (Janus geometry about the sensor +z axis).
    let beam_angle = config.dvl.beam_angle_deg.to_radians();
    let beams: Vec<Vector3<f64>> = (0..4)
        .map(|k| {
            let az = std::f64::consts::FRAC_PI_4 + k as f64 * std::f64::consts::FRAC_PI_2;
            Vector3::new(
                beam_angle.sin() * az.cos(),
                beam_angle.sin() * az.sin(),
                beam_angle.cos(),
            )
        })
        .collect();
    let dvl_dt = 1.0 / rates.dvl_hz;
    let n_dvl = (duration * rates.dvl_hz).floor() as usize;
    let mut dvl = Vec::with_capacity(n_dvl);
    for k in 1..=n_dvl {
        let t = k as f64 * dvl_dt;
        let s = truth.sample_at(t);
        let rot_ig = s.orientation().to_rotation();
        let v_imu = rot_ig * s.velocity;
        let lever = ext.dvl_to_imu.translation;
        let v_dvl = ext.dvl_to_imu.rotation.transpose()
            * (v_imu + s.omega_body().cross(&lever));
        let velocity = v_dvl
            + Vector3::new(
                gaussian(&mut dvl_rng, config.dvl.velocity_noise_sd),
                gaussian(&mut dvl_rng, config.dvl.velocity_noise_sd),
                gaussian(&mut dvl_rng, config.dvl.velocity_noise_sd),
            );

        let body_to_global = s.pose();
        let dvl_origin = body_to_global.transform_point(&ext.dvl_to_imu.translation);
        let mut points = [Vector3::zeros(); 4];
        let mut valid = true;
        for (bi, beam) in beams.iter().enumerate() {
            let dir_global = body_to_global.rotation * (ext.dvl_to_imu.rotation * beam);
            match beam_intersection(&ice, &dvl_origin, &dir_global) {
                Some((range, _)) => {
                    let noisy = range + gaussian(&mut dvl_rng, config.dvl.cloud_range_sd);
                    points[bi] = beam * noisy;
                }
                None => {
                    valid = false;
                }
            }
        }
        dvl.push(DvlRecord {
            t,
            velocity,
            noise_sd: config.dvl.velocity_noise_sd,
            cloud: if valid { Some(points) } else { None },
        });
    }

    // Pressure: depth-equivalent reading referenced to the configured datum.
    let pressure_dt = 1.0 / rates.pressure_hz;
    let n_pressure = (duration * rates.pressure_hz).floor() as usize;
    let mut pressure = Vec::with_capacity(n_pressure);
    for k in 0..=n_pressure {
        let t = k as f64 * pressure_dt;
        let s = truth.sample_at(t);
        pressure.push(PressureRecord {
            t,
            depth_equivalent: config.pressure.datum - s.position.z
                + gaussian(&mut pressure_rng, config.pressure.noise_sd),
            noise_sd: config.pressure.noise_sd,
        });
    }

    // Camera: project landmarks, manage per-landmark track instances with a
    // per-frame survival draw.
    let landmarks = generate_landmarks(
        truth,
        &ice,
        config.camera.landmark_spacing,
        1.8 * config.trajectory.standoff,
        &mut landmark_rng,
    );
    let half_tan = (0.5 * config.camera.fov_deg.to_radians()).tan();
    let cam_dt = 1.0 / rates.camera_hz;
    let n_cam = (duration * rates.camera_hz).floor() as usize;
    let mut camera = Vec::with_capacity(n_cam);
    let mut active: BTreeMap<u64, TrackState> = BTreeMap::new();
    let mut next_track_id: u64 = 0;
    for k in 0..=n_cam {
        let t = k as f64 * cam_dt;
        let s = truth.sample_at(t);
        let cam_from_global = ext.imu_to_cam.compose(&s.pose().inverse());

        let mut observations: Vec<(u64, f64, f64)> = Vec::new();
        let mut seen: Vec<u64> = Vec::new();
        for lm in &landmarks {
            let p_cam = cam_from_global.transform_point(&lm.position);
            if p_cam.z < 0.2 {
                continue;
            }
            let u = p_cam.x / p_cam.z;
            let v = p_cam.y / p_cam.z;
            if u.abs() > half_tan || v.abs() > half_tan {
                continue;
            }
            let track_id = match active.get(&lm.id) {
                Some(ts) => {
                    // survival draw for continuing tracks
                    if rng_survival(&mut cam_rng, config.camera.survival_prob) {
                        ts.track_id
                    } else {
                        active.remove(&lm.id);
                        continue;
                    }
                }
                None => {
                    let id = next_track_id;
                    next_track_id += 1;
                    active.insert(lm.id, TrackState { track_id: id });
                    id
                }
            };
            seen.push(lm.id);
            observations.push((
                track_id,
                u + gaussian(&mut cam_rng, config.camera.visual_noise_sd),
                v + gaussian(&mut cam_rng, config.camera.visual_noise_sd),
            ));
        }
        // Landmarks that left the field of view end their track instance.
        let seen_set: std::collections::BTreeSet<u64> = seen.into_iter().collect();
        active.retain(|lm_id, _| seen_set.contains(lm_id));

        camera.push(CameraRecord { t, observations });
    }

    SensorLog {
        header: LogHeader {
            version: LOG_FORMAT_VERSION,
            seed,
            rates: config.rates.clone(),
            imu_noise: config.imu_noise.clone(),
            sensor_noise: SensorNoiseLevels {
                dvl_velocity_sd: config.dvl.velocity_noise_sd,
                dvl_cloud_range_sd: config.dvl.cloud_range_sd,
                pressure_sd: config.pressure.noise_sd,
                visual_sd: config.camera.visual_noise_sd,
            },
            extrinsics: config.extrinsics.clone(),
        },
        imu,
        dvl,
        pressure,
        camera,
    }
}

fn rng_survival(rng: &mut ChaCha12Rng, prob: f64) -> bool {
    if prob >= 1.0 {
        return true;
    }
    rng.gen::<f64>() < prob
}

/// Convenience: ground truth + sensors from one config.
pub fn simulate(config: &Config, seed: u64) -> Result<(TruthTrajectory, SensorLog), String> {
    let spec = config.trajectory_spec().map_err(|e| e.to_string())?;
    let ice = config.ice_surface();
    let truth = generate_ground_truth(&spec, &ice, 0.002);
    let log = simulate_sensors(&truth, config, seed);
    Ok((truth, log))
}
