//! Filter state: current IMU state, the sliding window of cloned poses, the
//! error-state covariance, keyframe selection and the keyframe-retaining
//! marginalization policy.
//!
//! Error-state layout (row/column indices into the covariance):
//!
//! ```text
//! [ 0.. 3)  orientation   (left error, IMU frame)
//! [ 3.. 6)  position
//! [ 6.. 9)  velocity
//! [ 9..12)  gyro bias
//! [12..15)  accel bias
//! [15+6i..15+6i+3)  clone i orientation
//! [15+6i+3..15+6i+6) clone i position
//! ```

use std::fmt;

use nalgebra::{DMatrix, Vector3};

use crate::features::FeatureTrack;
use crate::geom::{RigidTransform, UnitQuat};

/// Rows/cols of the IMU block of the error state.
pub const IMU_DIM: usize = 15;
/// Rows/cols per clone.
pub const CLONE_DIM: usize = 6;

pub const ORI: usize = 0;
pub const POS: usize = 3;
pub const VEL: usize = 6;
pub const BG: usize = 9;
pub const BA: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub enum StateError {
    /// Clone timestamp does not advance past the newest clone.
    NonMonotoneClone { t: f64, last: f64 },
    /// The clone window is already at its maximum size.
    WindowFull { max: usize },
    /// Marginalization called with a non-full window (no-op).
    WindowNotFull { len: usize, max: usize },
}

impl fmt::Display for StateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateError::NonMonotoneClone { t, last } => {
                write!(f, "clone timestamp {t} not after last clone {last}")
            }
            StateError::WindowFull { max } => write!(f, "clone window full ({max})"),
            StateError::WindowNotFull { len, max } => {
                write!(f, "marginalize on non-full window ({len}/{max})")
            }
        }
    }
}

impl std::error::Error for StateError {}

/// Current IMU state. `orientation` rotates global-frame vectors into the IMU
/// frame; `position`/`velocity` are the IMU origin expressed in the global frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuState {
    pub orientation: UnitQuat,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
}

impl ImuState {
    pub fn identity() -> Self {
        ImuState {
            orientation: UnitQuat::identity(),
            position: Vector3::zeros(),
            velocity: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
        }
    }

    /// Pose of the IMU in the global frame (body-to-global transform).
    pub fn pose(&self) -> RigidTransform {
        RigidTransform::new(self.orientation.to_rotation().transpose(), self.position)
    }
}

/// A historical IMU pose kept in the sliding window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClonePose {
    pub timestamp: f64,
    pub orientation: UnitQuat,
    pub position: Vector3<f64>,
    pub is_keyframe: bool,
}

impl ClonePose {
    /// Body-to-global transform of this clone.
    pub fn pose(&self) -> RigidTransform {
        RigidTransform::new(self.orientation.to_rotation().transpose(), self.position)
    }
}

/// Keyframe promotion thresholds. All three criteria are conjunctive and use
/// strict inequality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeCriteria {
    pub min_features: usize,
    pub min_translation: f64,
    pub min_feature_loss_fraction: f64,
}

impl Default for KeyframeCriteria {
    fn default() -> Self {
        KeyframeCriteria {
            min_features: 50,
            min_translation: 0.1,
            min_feature_loss_fraction: 0.10,
        }
    }
}

/// True iff the frame clears every keyframe criterion (strictly).
pub fn select_keyframe(
    n_features: usize,
    translation_since_last_kf: f64,
    lost_fraction: f64,
    criteria: &KeyframeCriteria,
) -> bool {
    n_features > criteria.min_features
        && translation_since_last_kf > criteria.min_translation
        && lost_fraction > criteria.min_feature_loss_fraction
}

/// What a full-window marginalization hands back to the caller: the tracks to
/// spend on an MSCKF update before the oldest clone's columns disappear, and
/// the timestamp of the removed clone.
#[derive(Debug, Clone)]
pub struct MarginalizationBatch {
    pub update_tracks: Vec<FeatureTrack>,
    pub removed_timestamp: f64,
}

/// The full filter state: IMU state, clone window and error-state covariance.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub imu: ImuState,
    pub clones: Vec<ClonePose>,
    pub covariance: DMatrix<f64>,
    pub max_clones: usize,
}

impl FilterState {
    pub fn new(imu: ImuState, covariance: DMatrix<f64>, max_clones: usize) -> Self {
        assert_eq!(covariance.nrows(), IMU_DIM);
        assert_eq!(covariance.ncols(), IMU_DIM);
        FilterState { imu, clones: Vec::new(), covariance, max_clones }
    }

    /// Error-state dimension, `15 + 6 * clone count`.
    pub fn dim(&self) -> usize {
        IMU_DIM + CLONE_DIM * self.clones.len()
    }

    /// Start column of clone `i` in the error state.
    pub fn clone_offset(&self, i: usize) -> usize {
        IMU_DIM + CLONE_DIM * i
    }

    /// Index of the clone with the given timestamp, if present.
    pub fn clone_index_at(&self, t: f64) -> Option<usize> {
        self.clones.iter().position(|c| c.timestamp == t)
    }

    /// Copies the current IMU pose into the window with exact cross-covariance
    /// (the clone Jacobian w.r.t. the IMU pose is the identity on the
    /// orientation/position rows).
    pub fn augment_clone(&mut self, t: f64, is_keyframe: bool) -> Result<(), StateError> {
        if let Some(last) = self.clones.last() {
            if t <= last.timestamp {
                return Err(StateError::NonMonotoneClone { t, last: last.timestamp });
            }
        }
        if self.clones.len() >= self.max_clones {
            return Err(StateError::WindowFull { max: self.max_clones });
        }

        let old = self.dim();
        let new = old + CLONE_DIM;
        let mut cov = DMatrix::zeros(new, new);
        cov.view_mut((0, 0), (old, old)).copy_from(&self.covariance);
        // New rows = orientation/position rows of the existing covariance.
        let pose_rows = self.covariance.rows(0, CLONE_DIM).clone_owned();
        cov.view_mut((old, 0), (CLONE_DIM, old)).copy_from(&pose_rows);
        cov.view_mut((0, old), (old, CLONE_DIM)).copy_from(&pose_rows.transpose());
        cov.view_mut((old, old), (CLONE_DIM, CLONE_DIM))
            .copy_from(&self.covariance.view((0, 0), (CLONE_DIM, CLONE_DIM)).clone_owned());
        self.covariance = cov;

        self.clones.push(ClonePose {
            timestamp: t,
            orientation: self.imu.orientation,
            position: self.imu.position,
            is_keyframe,
        });
        Ok(())
    }

    /// Keyframe-retaining marginalization. Requires a full window.
    ///
    /// Max-tracked features, the ones measured in both the oldest and the
    /// second-latest keyframes, are removed from `tracks` and handed to
    /// `update` for an MSCKF update while the oldest clone's covariance
    /// columns still exist; only then is the oldest clone deleted. The
    /// remaining tracks lose their measurement at the oldest timestamp (young
    /// tracks with a single measurement at the second-latest pose survive
    /// untouched); tracks left without measurements and no longer tracked are
    /// dropped. The second-latest clone itself stays in the window so those
    /// young tracks can mature.
    pub fn marginalize(
        &mut self,
        tracks: &mut Vec<FeatureTrack>,
        update: impl FnOnce(&mut FilterState, &[FeatureTrack]),
    ) -> Result<MarginalizationBatch, StateError> {
        if self.clones.len() < self.max_clones {
            return Err(StateError::WindowNotFull { len: self.clones.len(), max: self.max_clones });
        }
        let oldest_t = self.clones[0].timestamp;
        let second_latest_t = self.clones[self.clones.len() - 2].timestamp;

        let mut update_tracks = Vec::new();
        let mut kept = Vec::with_capacity(tracks.len());
        for mut track in tracks.drain(..) {
            let spans_window =
                track.has_measurement_at(oldest_t) && track.has_measurement_at(second_latest_t);
            if spans_window && track.measurements.len() >= 3 {
                update_tracks.push(track);
                continue;
            }
            track.measurements.retain(|m| m.timestamp != oldest_t);
            if !track.measurements.is_empty() || track.alive {
                kept.push(track);
            }
        }
        *tracks = kept;

        update(self, &update_tracks);

        self.remove_clone(0);
        Ok(MarginalizationBatch { update_tracks, removed_timestamp: oldest_t })
    }

    /// Deletes clone `i` and its covariance rows/columns.
    fn remove_clone(&mut self, i: usize) {
        let off = self.clone_offset(i);
        let dim = self.dim();
        let mut cov = DMatrix::zeros(dim - CLONE_DIM, dim - CLONE_DIM);
        let keep: Vec<usize> =
            (0..dim).filter(|&k| k < off || k >= off + CLONE_DIM).collect();
        for (r_new, &r_old) in keep.iter().enumerate() {
            for (c_new, &c_old) in keep.iter().enumerate() {
                cov[(r_new, c_new)] = self.covariance[(r_old, c_old)];
            }
        }
        self.covariance = cov;
        self.clones.remove(i);
    }

    /// Forces `P = (P + P^T) / 2`.
    pub fn symmetrize(&mut self) {
        let t = self.covariance.transpose();
        self.covariance += t;
        self.covariance *= 0.5;
    }

    /// Largest absolute asymmetry of the covariance, for diagnostics/tests.
    pub fn asymmetry(&self) -> f64 {
        (&self.covariance - self.covariance.transpose()).abs().max()
    }
}
