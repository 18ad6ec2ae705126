//! Sensor-log and trajectory serialization.
//!
//! Both formats are line-delimited JSON with a `type` tag per line and a
//! header line first. Field order is canonical (struct order) and floats
//! print in shortest round-trip form, so `write(read(x))` is byte-identical
//! for files this module produced. Sensor records are written merged in
//! timestamp order (ties break imu, dvl, pressure, camera); each stream's
//! timestamps must be strictly increasing.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::config::{ExtrinsicsConfig, ImuNoiseConfig, RatesConfig};
use crate::geom::UnitQuat;

pub const LOG_FORMAT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum LogError {
    Io(std::io::Error),
    /// Malformed content; `line` is 1-based.
    Parse { line: usize, message: String },
}

impl fmt::Display for LogError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogError::Io(e) => write!(f, "log io error: {e}"),
            LogError::Parse { line, message } => write!(f, "line {line}: {message}"),
        }
    }
}

impl std::error::Error for LogError {}

fn parse_err(line: usize, message: impl Into<String>) -> LogError {
    LogError::Parse { line, message: message.into() }
}

/// Injected sensor noise levels, recorded so a consumer knows what the data
/// contains.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct SensorNoiseLevels {
    pub dvl_velocity_sd: f64,
    pub dvl_cloud_range_sd: f64,
    pub pressure_sd: f64,
    pub visual_sd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LogHeader {
    pub version: u32,
    pub seed: u64,
    pub rates: RatesConfig,
    pub imu_noise: ImuNoiseConfig,
    pub sensor_noise: SensorNoiseLevels,
    pub extrinsics: ExtrinsicsConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImuRecord {
    pub t: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DvlRecord {
    pub t: f64,
    pub velocity: Vector3<f64>,
    pub noise_sd: f64,
    /// Beam intersection points in the DVL frame; `None` when any beam missed
    /// the surface (e.g. through an ice opening).
    pub cloud: Option<[Vector3<f64>; 4]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PressureRecord {
    pub t: f64,
    pub depth_equivalent: f64,
    pub noise_sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraRecord {
    pub t: f64,
    /// `(track id, normalized u, normalized v)` per visible feature.
    pub observations: Vec<(u64, f64, f64)>,
}

/// Time-ordered sensor streams plus the describing header.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorLog {
    pub header: LogHeader,
    pub imu: Vec<ImuRecord>,
    pub dvl: Vec<DvlRecord>,
    pub pressure: Vec<PressureRecord>,
    pub camera: Vec<CameraRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine {
    Header(LogHeader),
    Imu { t: f64, gyro: [f64; 3], accel: [f64; 3] },
    Dvl { t: f64, vel: [f64; 3], sd: f64, cloud: Option<[[f64; 3]; 4]> },
    Pressure { t: f64, depth: f64, sd: f64 },
    Camera { t: f64, obs: Vec<(u64, f64, f64)> },
}

fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

impl SensorLog {
    pub fn to_jsonl(&self) -> String {
        let mut lines: Vec<(f64, u8, String)> = Vec::new();
        for r in &self.imu {
            let line = LogLine::Imu { t: r.t, gyro: r.gyro.into(), accel: r.accel.into() };
            lines.push((r.t, 0, serde_json::to_string(&line).unwrap()));
        }
        for r in &self.dvl {
            let cloud = r.cloud.map(|c| [c[0].into(), c[1].into(), c[2].into(), c[3].into()]);
            let line = LogLine::Dvl { t: r.t, vel: r.velocity.into(), sd: r.noise_sd, cloud };
            lines.push((r.t, 1, serde_json::to_string(&line).unwrap()));
        }
        for r in &self.pressure {
            let line = LogLine::Pressure { t: r.t, depth: r.depth_equivalent, sd: r.noise_sd };
            lines.push((r.t, 2, serde_json::to_string(&line).unwrap()));
        }
        for r in &self.camera {
            let line = LogLine::Camera { t: r.t, obs: r.observations.clone() };
            lines.push((r.t, 3, serde_json::to_string(&line).unwrap()));
        }
        lines.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

        let mut out = serde_json::to_string(&LogLine::Header(self.header.clone())).unwrap();
        out.push('\n');
        for (_, _, line) in lines {
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, LogError> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty log: missing header"))?;
        let header = match serde_json::from_str::<LogLine>(first) {
            Ok(LogLine::Header(h)) => h,
            Ok(_) => return Err(parse_err(1, "first line must be the header")),
            Err(e) => return Err(parse_err(1, format!("bad header: {e}"))),
        };
        if header.version != LOG_FORMAT_VERSION {
            return Err(parse_err(
                1,
                format!("unknown log version {} (expected {LOG_FORMAT_VERSION})", header.version),
            ));
        }

        let mut log = SensorLog {
            header,
            imu: Vec::new(),
            dvl: Vec::new(),
            pressure: Vec::new(),
            camera: Vec::new(),
        };

        for (idx, raw) in lines {
            let line_no = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let parsed: LogLine = serde_json::from_str(raw)
                .map_err(|e| parse_err(line_no, format!("malformed record: {e}")))?;
            match parsed {
                LogLine::Header(_) => {
                    return Err(parse_err(line_no, "duplicate header"));
                }
                LogLine::Imu { t, gyro, accel } => {
                    if !t.is_finite() || !all_finite(&gyro) || !all_finite(&accel) {
                        return Err(parse_err(line_no, "non-finite imu record"));
                    }
                    if let Some(last) = log.imu.last() {
                        if t <= last.t {
                            return Err(parse_err(
                                line_no,
                                format!("imu timestamps not increasing: {} after {}", t, last.t),
                            ));
                        }
                    }
                    log.imu.push(ImuRecord { t, gyro: gyro.into(), accel: accel.into() });
                }
                LogLine::Dvl { t, vel, sd, cloud } => {
                    if !t.is_finite() || !all_finite(&vel) || !sd.is_finite() || sd < 0.0 {
                        return Err(parse_err(line_no, "non-finite dvl record"));
                    }
                    let cloud = match cloud {
                        None => None,
                        Some(points) => {
                            let mut out = [Vector3::zeros(); 4];
                            for (k, p) in points.iter().enumerate() {
                                if !all_finite(p) {
                                    return Err(parse_err(line_no, "non-finite cloud point"));
                                }
                                let v = Vector3::from(*p);
                                let range = v.norm();
                                if range <= 0.3 || range >= 100.0 {
                                    return Err(parse_err(
                                        line_no,
                                        format!("cloud point range {range:.3} outside (0.3, 100)"),
                                    ));
                                }
                                out[k] = v;
                            }
                            Some(out)
                        }
                    };
                    if let Some(last) = log.dvl.last() {
                        if t <= last.t {
                            return Err(parse_err(line_no, "dvl timestamps not increasing"));
                        }
                    }
                    log.dvl.push(DvlRecord { t, velocity: vel.into(), noise_sd: sd, cloud });
                }
                LogLine::Pressure { t, depth, sd } => {
                    if !t.is_finite() || !depth.is_finite() || !sd.is_finite() || sd < 0.0 {
                        return Err(parse_err(line_no, "non-finite pressure record"));
                    }
                    if let Some(last) = log.pressure.last() {
                        if t <= last.t {
                            return Err(parse_err(line_no, "pressure timestamps not increasing"));
                        }
                    }
                    log.pressure.push(PressureRecord { t, depth_equivalent: depth, noise_sd: sd });
                }
                LogLine::Camera { t, obs } => {
                    if !t.is_finite()
                        || obs.iter().any(|(_, u, v)| !u.is_finite() || !v.is_finite())
                    {
                        return Err(parse_err(line_no, "non-finite camera record"));
                    }
                    if let Some(last) = log.camera.last() {
                        if t <= last.t {
                            return Err(parse_err(line_no, "camera timestamps not increasing"));
                        }
                    }
                    log.camera.push(CameraRecord { t, observations: obs });
                }
            }
        }
        Ok(log)
    }
}

pub fn write_log(log: &SensorLog, path: &Path) -> Result<(), LogError> {
    let file = std::fs::File::create(path).map_err(LogError::Io)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(log.to_jsonl().as_bytes()).map_err(LogError::Io)?;
    w.flush().map_err(LogError::Io)
}

pub fn read_log(path: &Path) -> Result<SensorLog, LogError> {
    let file = std::fs::File::open(path).map_err(LogError::Io)?;
    let reader = std::io::BufReader::new(file);
    let mut text = String::new();
    for line in reader.lines() {
        text.push_str(&line.map_err(LogError::Io)?);
        text.push('\n');
    }
    SensorLog::from_jsonl(&text)
}

/// One timestamped pose; orientation is optional so position-only ground
/// truth can be represented.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseRecord {
    pub t: f64,
    pub position: Vector3<f64>,
    pub orientation: Option<UnitQuat>,
}

/// A time-ordered pose sequence (estimated or ground truth).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryRecord {
    pub poses: Vec<PoseRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum TrajLine {
    TrajHeader { version: u32 },
    Pose { t: f64, p: [f64; 3], q: Option<[f64; 4]> },
}

impl TrajectoryRecord {
    pub fn to_jsonl(&self) -> String {
        let mut out =
            serde_json::to_string(&TrajLine::TrajHeader { version: LOG_FORMAT_VERSION }).unwrap();
        out.push('\n');
        for pose in &self.poses {
            let line = TrajLine::Pose {
                t: pose.t,
                p: pose.position.into(),
                q: pose.orientation.map(|q| q.to_array()),
            };
            out.push_str(&serde_json::to_string(&line).unwrap());
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, LogError> {
        let mut lines = text.lines().enumerate();
        let (_, first) =
            lines.next().ok_or_else(|| parse_err(1, "empty trajectory: missing header"))?;
        match serde_json::from_str::<TrajLine>(first) {
            Ok(TrajLine::TrajHeader { version }) if version == LOG_FORMAT_VERSION => {}
            Ok(TrajLine::TrajHeader { version }) => {
                return Err(parse_err(1, format!("unknown trajectory version {version}")));
            }
            Ok(_) => return Err(parse_err(1, "first line must be the trajectory header")),
            Err(e) => return Err(parse_err(1, format!("bad trajectory header: {e}"))),
        }

        let mut poses = Vec::new();
        for (idx, raw) in lines {
            let line_no = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let parsed: TrajLine = serde_json::from_str(raw)
                .map_err(|e| parse_err(line_no, format!("malformed pose: {e}")))?;
            match parsed {
                TrajLine::TrajHeader { .. } => return Err(parse_err(line_no, "duplicate header")),
                TrajLine::Pose { t, p, q } => {
                    if !t.is_finite() || !all_finite(&p) {
                        return Err(parse_err(line_no, "non-finite pose"));
                    }
                    if let Some(last) = poses.last() {
                        let last: &PoseRecord = last;
                        if t <= last.t {
                            return Err(parse_err(line_no, "pose timestamps not increasing"));
                        }
                    }
                    let orientation = match q {
                        None => None,
                        Some(arr) => Some(UnitQuat::from_array(arr).map_err(|e| {
                            parse_err(line_no, format!("bad orientation quaternion: {e}"))
                        })?),
                    };
                    poses.push(PoseRecord { t, position: p.into(), orientation });
                }
            }
        }
        Ok(TrajectoryRecord { poses })
    }

    /// Nearest-timestamp pose positions for association in evaluation.
    pub fn positions(&self) -> impl Iterator<Item = (f64, &Vector3<f64>)> {
        self.poses.iter().map(|p| (p.t, &p.position))
    }
}

pub fn write_trajectory(traj: &TrajectoryRecord, path: &Path) -> Result<(), LogError> {
    let file = std::fs::File::create(path).map_err(LogError::Io)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(traj.to_jsonl().as_bytes()).map_err(LogError::Io)?;
    w.flush().map_err(LogError::Io)
}

pub fn read_trajectory(path: &Path) -> Result<TrajectoryRecord, LogError> {
    let text = std::fs::read_to_string(path).map_err(LogError::Io)?;
    TrajectoryRecord::from_jsonl(&text)
}

impl CameraRecord {
    pub fn points(&self) -> impl Iterator<Item = (u64, Vector2<f64>)> + '_ {
        self.observations.iter().map(|&(id, u, v)| (id, Vector2::new(u, v)))
    }
}
