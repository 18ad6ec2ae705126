//! TOML configuration covering the simulator, the sensor suite and the filter.
//! Every field has a default, so an empty file (or any subset of keys) is a
//! valid config.

use std::fmt;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::features::EnhancementParams;
use crate::geom::{RigidTransform, UnitQuat};
use crate::propagation::ImuNoiseParams;
use crate::sim::{IceSurface, Opening, Segment, SegmentKind, SensorRates, TrajectorySpec};
use crate::state::KeyframeCriteria;
use crate::updates::Extrinsics;

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    Parse(String),
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "config io error: {e}"),
            ConfigError::Parse(e) => write!(f, "config parse error: {e}"),
            ConfigError::Invalid(e) => write!(f, "invalid config: {e}"),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RatesConfig {
    pub imu_hz: f64,
    pub dvl_hz: f64,
    pub pressure_hz: f64,
    pub camera_hz: f64,
}

impl Default for RatesConfig {
    fn default() -> Self {
        RatesConfig { imu_hz: 100.0, dvl_hz: 4.0, pressure_hz: 2.0, camera_hz: 15.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ImuNoiseConfig {
    pub gyro_noise_density: f64,
    pub accel_noise_density: f64,
    pub gyro_bias_walk: f64,
    pub accel_bias_walk: f64,
    pub gravity: f64,
}

impl Default for ImuNoiseConfig {
    fn default() -> Self {
        ImuNoiseConfig {
            gyro_noise_density: 1.7e-4,
            accel_noise_density: 2.0e-3,
            gyro_bias_walk: 1.9e-5,
            accel_bias_walk: 3.0e-3,
            gravity: 9.81,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DvlConfig {
    pub velocity_noise_sd: f64,
    pub cloud_range_sd: f64,
    /// Janus beam tilt from the sensor axis, degrees.
    pub beam_angle_deg: f64,
}

impl Default for DvlConfig {
    fn default() -> Self {
        DvlConfig { velocity_noise_sd: 0.05, cloud_range_sd: 0.02, beam_angle_deg: 25.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PressureConfig {
    pub noise_sd: f64,
    /// Arbitrary depth-equivalent reading at global z = 0, meters.
    pub datum: f64,
}

impl Default for PressureConfig {
    fn default() -> Self {
        PressureConfig { noise_sd: 0.02, datum: 10.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CameraConfig {
    /// Full field-of-view angle of the square normalized plane, degrees.
    pub fov_deg: f64,
    pub visual_noise_sd: f64,
    /// Per-frame probability that a tracked feature survives.
    pub survival_prob: f64,
    /// Grid spacing of simulated surface landmarks, meters.
    pub landmark_spacing: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            fov_deg: 60.0,
            visual_noise_sd: 0.09,
            survival_prob: 0.98,
            landmark_spacing: 0.28,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct IceConfig {
    /// Global z of the mean ice underside; the vehicle starts at z = 0.
    pub base_depth: f64,
    pub amplitude: f64,
    pub freq_x: f64,
    pub freq_y: f64,
    /// Circular openings as `[center_x, center_y, radius]`.
    pub openings: Vec<[f64; 3]>,
}

impl Default for IceConfig {
    fn default() -> Self {
        IceConfig {
            base_depth: 2.0,
            amplitude: 0.08,
            freq_x: 0.12,
            freq_y: 0.07,
            openings: vec![[10.0, 0.0, 0.5], [20.0, 0.0, 0.5], [30.0, 0.0, 0.5]],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SegmentConfig {
    /// "transect", "hover" or "turn".
    pub kind: String,
    pub duration: f64,
    /// m/s for transects, yaw rate in rad/s for turns, ignored for hovers.
    #[serde(default)]
    pub speed: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrajectoryConfig {
    /// Vertical clearance kept below the mean ice underside, meters.
    pub standoff: f64,
    pub segments: Vec<SegmentConfig>,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            standoff: 2.0,
            segments: vec![
                SegmentConfig { kind: "hover".into(), duration: 10.0, speed: 0.0 },
                SegmentConfig { kind: "transect".into(), duration: 100.0, speed: 0.4 },
                SegmentConfig { kind: "turn".into(), duration: 15.0, speed: 0.2094 },
                SegmentConfig { kind: "transect".into(), duration: 100.0, speed: 0.4 },
                SegmentConfig { kind: "hover".into(), duration: 10.0, speed: 0.0 },
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ExtrinsicsConfig {
    /// Quaternions as `[x, y, z, w]`.
    pub dvl_to_imu_rotation: [f64; 4],
    pub dvl_to_imu_translation: [f64; 3],
    pub pressure_to_dvl_rotation: [f64; 4],
    pub imu_to_cam_rotation: [f64; 4],
    pub imu_to_cam_translation: [f64; 3],
}

impl Default for ExtrinsicsConfig {
    fn default() -> Self {
        ExtrinsicsConfig {
            dvl_to_imu_rotation: [0.0, 0.0, 0.0, 1.0],
            dvl_to_imu_translation: [0.1, 0.0, -0.05],
            pressure_to_dvl_rotation: [0.0, 0.0, 0.0, 1.0],
            imu_to_cam_rotation: [0.0, 0.0, 0.0, 1.0],
            imu_to_cam_translation: [0.05, 0.0, 0.02],
        }
    }
}

impl ExtrinsicsConfig {
    fn quat(a: [f64; 4]) -> Result<UnitQuat, ConfigError> {
        UnitQuat::from_array(a).map_err(|e| ConfigError::Invalid(format!("bad quaternion: {e}")))
    }

    pub fn to_extrinsics(&self) -> Result<Extrinsics, ConfigError> {
        Ok(Extrinsics {
            dvl_to_imu: RigidTransform::new(
                Self::quat(self.dvl_to_imu_rotation)?.to_rotation(),
                Vector3::from(self.dvl_to_imu_translation),
            ),
            pressure_to_dvl: Self::quat(self.pressure_to_dvl_rotation)?.to_rotation(),
            imu_to_cam: RigidTransform::new(
                Self::quat(self.imu_to_cam_rotation)?.to_rotation(),
                Vector3::from(self.imu_to_cam_translation),
            ),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct KeyframeConfig {
    pub min_features: usize,
    pub min_translation: f64,
    pub min_loss_fraction: f64,
}

impl Default for KeyframeConfig {
    fn default() -> Self {
        KeyframeConfig { min_features: 50, min_translation: 0.1, min_loss_fraction: 0.10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EnhancementConfig {
    pub sigma_z: f64,
    pub max_candidate_clouds: usize,
}

impl Default for EnhancementConfig {
    fn default() -> Self {
        EnhancementConfig { sigma_z: 0.2, max_candidate_clouds: 4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FilterConfig {
    /// Maximum clone window size.
    pub max_clones: usize,
    pub chi2_confidence: f64,
    /// Static initialization window, seconds.
    pub init_window: f64,
    /// Per-axis accel variance above which initialization refuses to run.
    pub init_accel_var_threshold: f64,
    pub init_yaw_sd: f64,
    pub init_accel_bias_sd: f64,
    /// Filter-side visual measurement noise, normalized-plane units.
    pub visual_noise_sd: f64,
    /// Lower bounds applied to measurement noise so zero-noise logs stay
    /// invertible.
    pub dvl_noise_floor: f64,
    pub pressure_noise_floor: f64,
    pub visual_noise_floor: f64,
    pub keyframe: KeyframeConfig,
    pub enhancement: EnhancementConfig,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            max_clones: 11,
            chi2_confidence: 0.95,
            init_window: 5.0,
            init_accel_var_threshold: 0.05,
            init_yaw_sd: 0.002,
            init_accel_bias_sd: 0.02,
            visual_noise_sd: 0.09,
            dvl_noise_floor: 1e-3,
            pressure_noise_floor: 1e-3,
            visual_noise_floor: 1e-4,
            keyframe: KeyframeConfig::default(),
            enhancement: EnhancementConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct Config {
    pub rates: RatesConfig,
    pub imu_noise: ImuNoiseConfig,
    pub dvl: DvlConfig,
    pub pressure: PressureConfig,
    pub camera: CameraConfig,
    pub ice: IceConfig,
    pub trajectory: TrajectoryConfig,
    pub extrinsics: ExtrinsicsConfig,
    pub filter: FilterConfig,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let config: Config = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(ConfigError::Io)?;
        Config::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError::Invalid(m));
        for (name, v) in [
            ("rates.imu_hz", self.rates.imu_hz),
            ("rates.dvl_hz", self.rates.dvl_hz),
            ("rates.pressure_hz", self.rates.pressure_hz),
            ("rates.camera_hz", self.rates.camera_hz),
        ] {
            if !(v > 0.0) {
                return err(format!("{name} must be positive, got {v}"));
            }
        }
        for seg in &self.trajectory.segments {
            match seg.kind.as_str() {
                "transect" | "hover" | "turn" => {}
                other => return err(format!("unknown segment kind '{other}'")),
            }
            if seg.duration <= 0.0 {
                return err(format!("segment duration must be positive, got {}", seg.duration));
            }
            if seg.kind == "transect" && seg.speed.abs() > 1.0 {
                return err(format!("transect speed {} exceeds 1 m/s", seg.speed));
            }
        }
        if !self.trajectory.segments.is_empty()
            && self.ice.amplitude >= self.trajectory.standoff
        {
            return err(format!(
                "ice roughness amplitude {} must stay below the standoff {}",
                self.ice.amplitude, self.trajectory.standoff
            ));
        }
        if self.filter.max_clones < 3 {
            return err(format!("filter.max_clones must be >= 3, got {}", self.filter.max_clones));
        }
        if !(0.0 < self.filter.chi2_confidence && self.filter.chi2_confidence < 1.0) {
            return err(format!(
                "chi2_confidence must be in (0,1), got {}",
                self.filter.chi2_confidence
            ));
        }
        if self.dvl.velocity_noise_sd < 0.0 || self.pressure.noise_sd < 0.0 {
            return err("noise standard deviations must be non-negative".into());
        }
        Ok(())
    }

    pub fn extrinsics(&self) -> Result<Extrinsics, ConfigError> {
        self.extrinsics.to_extrinsics()
    }

    pub fn imu_noise_params(&self) -> ImuNoiseParams {
        ImuNoiseParams {
            gyro_noise_density: self.imu_noise.gyro_noise_density,
            accel_noise_density: self.imu_noise.accel_noise_density,
            gyro_bias_walk: self.imu_noise.gyro_bias_walk,
            accel_bias_walk: self.imu_noise.accel_bias_walk,
            gravity_magnitude: self.imu_noise.gravity,
        }
    }

    pub fn sensor_rates(&self) -> SensorRates {
        SensorRates {
            imu_hz: self.rates.imu_hz,
            dvl_hz: self.rates.dvl_hz,
            pressure_hz: self.rates.pressure_hz,
            camera_hz: self.rates.camera_hz,
        }
    }

    pub fn ice_surface(&self) -> IceSurface {
        IceSurface {
            base_depth: self.ice.base_depth,
            amplitude: self.ice.amplitude,
            freq_x: self.ice.freq_x,
            freq_y: self.ice.freq_y,
            openings: self
                .ice
                .openings
                .iter()
                .map(|o| Opening { center_x: o[0], center_y: o[1], radius: o[2] })
                .collect(),
        }
    }

    pub fn trajectory_spec(&self) -> Result<TrajectorySpec, ConfigError> {
        let mut segments = Vec::with_capacity(self.trajectory.segments.len());
        for seg in &self.trajectory.segments {
            let kind = match seg.kind.as_str() {
                "transect" => SegmentKind::Transect,
                "hover" => SegmentKind::Hover,
                "turn" => SegmentKind::Turn,
                other => return Err(ConfigError::Invalid(format!("segment kind '{other}'"))),
            };
            segments.push(Segment { kind, duration: seg.duration, speed: seg.speed });
        }
        Ok(TrajectorySpec { segments, standoff: self.trajectory.standoff })
    }

    pub fn keyframe_criteria(&self) -> KeyframeCriteria {
        KeyframeCriteria {
            min_features: self.filter.keyframe.min_features,
            min_translation: self.filter.keyframe.min_translation,
            min_feature_loss_fraction: self.filter.keyframe.min_loss_fraction,
        }
    }

    pub fn enhancement_params(&self) -> EnhancementParams {
        EnhancementParams {
            sigma_z: self.filter.enhancement.sigma_z,
            max_candidate_clouds: self.filter.enhancement.max_candidate_clouds,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_gives_defaults() {
        let config = Config::from_toml_str("").unwrap();
        assert_eq!(config, Config::default());
        assert_eq!(config.filter.max_clones, 11);
        assert_eq!(config.filter.keyframe.min_features, 50);
        assert_eq!(config.camera.visual_noise_sd, 0.09);
        assert_eq!(config.dvl.beam_angle_deg, 25.0);
    }

    #[test]
    fn round_trips_through_toml() {
        let config = Config::default();
        let text = config.to_toml_string();
        let back = Config::from_toml_str(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn partial_override() {
        let config = Config::from_toml_str("[filter]\nmax_clones = 7\n").unwrap();
        assert_eq!(config.filter.max_clones, 7);
        assert_eq!(config.filter.chi2_confidence, 0.95);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::from_toml_str("[rates]\nimu_hz = 0.0\n").is_err());
        assert!(Config::from_toml_str(
            "[[trajectory.segments]]\nkind = \"warp\"\nduration = 5.0\n"
        )
        .is_err());
        assert!(Config::from_toml_str(
            "[[trajectory.segments]]\nkind = \"transect\"\nduration = 5.0\nspeed = 2.0\n"
        )
        .is_err());
    }
}
