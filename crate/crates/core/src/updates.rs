//! EKF measurement updates: DVL body velocity, pressure depth and the
//! structureless visual update with left-nullspace projection and
//! Mahalanobis gating.
//!
//! Jacobian convention: every residual satisfies `r ≈ H * dx + noise` where
//! `dx` is the boxplus error of the true state against the estimate, i.e.
//! perturbing the estimate by `d` changes the residual by `-H * d`. All H
//! blocks here are validated against central finite differences of exactly
//! that perturbation.

use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix2x3, Vector2, Vector3};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::features::FeatureTrack;
use crate::geom::{skew, RigidTransform, Rotation3};
use crate::state::{FilterState, CLONE_DIM, IMU_DIM, ORI, POS, VEL};

/// Perspective projection onto the normalized image plane.
pub fn project_normalized(p: &Vector3<f64>) -> Vector2<f64> {
    Vector2::new(p.x / p.z, p.y / p.z)
}

#[derive(Debug, Clone, PartialEq)]
pub enum UpdateError {
    /// Innovation covariance failed its Cholesky factorization.
    SingularInnovation,
    /// Feature Jacobian rank-deficient; nullspace projection impossible.
    DegenerateGeometry,
    /// Nullspace projection needs at least three measurements.
    TooFewRows { rows: usize },
    /// A feature fell behind (or too close to) one of its cameras.
    BehindCamera { depth: f64 },
    /// A measurement references a clone timestamp not in the window.
    MissingClone { t: f64 },
    /// Dimension mismatch between residual, Jacobian and state.
    DimensionMismatch,
}

impl fmt::Display for UpdateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UpdateError::SingularInnovation => write!(f, "innovation covariance not invertible"),
            UpdateError::DegenerateGeometry => write!(f, "feature Jacobian rank-deficient"),
            UpdateError::TooFewRows { rows } => {
                write!(f, "nullspace projection needs >= 5 rows, got {rows}")
            }
            UpdateError::BehindCamera { depth } => {
                write!(f, "feature depth {depth:.3} m behind/too close to camera")
            }
            UpdateError::MissingClone { t } => write!(f, "no clone at timestamp {t}"),
            UpdateError::DimensionMismatch => write!(f, "residual/Jacobian dimension mismatch"),
        }
    }
}

impl std::error::Error for UpdateError {}

/// Fixed sensor mounting. Each transform maps points from the frame named
/// first into the frame named second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    /// DVL frame into IMU frame.
    pub dvl_to_imu: RigidTransform,
    /// Pressure-sensor frame into DVL frame (rotation only).
    pub pressure_to_dvl: Rotation3,
    /// IMU frame into camera frame.
    pub imu_to_cam: RigidTransform,
}

impl Extrinsics {
    pub fn identity() -> Self {
        Extrinsics {
            dvl_to_imu: RigidTransform::identity(),
            pressure_to_dvl: Rotation3::identity(),
            imu_to_cam: RigidTransform::identity(),
        }
    }
}

/// One DVL bottom/ice-track velocity measurement in the DVL frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DvlVelocity {
    pub timestamp: f64,
    pub velocity: Vector3<f64>,
    /// Per-axis standard deviation, m/s.
    pub noise_sd: f64,
}

/// One pressure reading already converted to depth-equivalent meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PressureSample {
    pub timestamp: f64,
    pub depth_equivalent: f64,
    pub noise_sd: f64,
}

/// Stacked visual residual with Jacobians w.r.t. the error state and the
/// feature position, prior to nullspace projection.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualResidualBlock {
    pub residual: DVector<f64>,
    pub h_x: DMatrix<f64>,
    pub h_f: DMatrix<f64>,
}

/// Residual and Jacobian block after the feature dependence was projected out.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedBlock {
    pub residual: DVector<f64>,
    pub h_x: DMatrix<f64>,
}

/// DVL velocity measurement model: the predicted DVL-frame velocity is
/// `R_di^T (R_ig v_g + skew(omega) p_d)` with `omega` the bias-corrected body
/// rate at measurement time (treated as a known input). Returns the residual
/// and the H row block over the current error-state dimension.
pub fn dvl_velocity_residual(
    state: &FilterState,
    z: &DvlVelocity,
    ext: &Extrinsics,
    omega: &Vector3<f64>,
) -> (Vector3<f64>, DMatrix<f64>) {
    let r_ig = state.imu.orientation.to_rotation();
    let r_di_t = ext.dvl_to_imu.rotation.transpose();
    let lever = ext.dvl_to_imu.translation;

    let v_imu = r_ig * state.imu.velocity;
    let predicted = r_di_t * (v_imu + omega.cross(&lever));
    let residual = z.velocity - predicted;

    let mut h = DMatrix::zeros(3, state.dim());
    // d(R_ig v)/d(dtheta) = -skew(R_ig v)
    let d_ori = -r_di_t.matrix() * skew(&v_imu);
    let d_vel = r_di_t.matrix() * r_ig.matrix();
    h.view_mut((0, ORI), (3, 3)).copy_from(&d_ori);
    h.view_mut((0, VEL), (3, 3)).copy_from(&d_vel);
    (residual, h)
}

/// Pressure measurement model: the depth displacement observed through the
/// rotation chain, `e3^T R_gi R_id R_dp (P_in - P_k)`, compared against the
/// state's global-z displacement since initialization. The pressure-to-IMU
/// lever arm is deliberately omitted (rotation-only chain).
pub fn pressure_residual(
    state: &FilterState,
    z: &PressureSample,
    initial_pressure: &PressureSample,
    initial_z: f64,
    ext: &Extrinsics,
) -> (f64, DMatrix<f64>) {
    let r_gi = state.imu.orientation.to_rotation().transpose();
    // Pressure difference vector in the IMU frame.
    let diff = Vector3::new(0.0, 0.0, initial_pressure.depth_equivalent - z.depth_equivalent);
    let u_imu = ext.dvl_to_imu.rotation * (ext.pressure_to_dvl * diff);
    let measured_dz = (r_gi * u_imu).z;
    let predicted_dz = state.imu.position.z - initial_z;
    let residual = measured_dz - predicted_dz;

    let mut h = DMatrix::zeros(1, state.dim());
    // measured part moves with orientation error: -e3^T R_gi skew(u)
    let d_ori = -(r_gi.matrix() * skew(&u_imu)).row(2).clone_owned();
    h.view_mut((0, ORI), (1, 3)).copy_from(&d_ori);
    h[(0, POS + 2)] = 1.0;
    (residual, h)
}

/// Stacked projection residuals of one feature over its track, with Jacobians
/// chained through the camera extrinsics. Rejects the track if the feature is
/// closer than 5 cm to (or behind) any involved camera.
pub fn visual_feature_residual(
    state: &FilterState,
    ext: &Extrinsics,
    track: &FeatureTrack,
    p_f_global: &Vector3<f64>,
) -> Result<VisualResidualBlock, UpdateError> {
    let m = track.measurements.len();
    let dim = state.dim();
    let mut residual = DVector::zeros(2 * m);
    let mut h_x = DMatrix::zeros(2 * m, dim);
    let mut h_f = DMatrix::zeros(2 * m, 3);

    let r_ci = ext.imu_to_cam.rotation;

    for (i, meas) in track.measurements.iter().enumerate() {
        let idx = state
            .clone_index_at(meas.timestamp)
            .ok_or(UpdateError::MissingClone { t: meas.timestamp })?;
        let clone = &state.clones[idx];
        let r_ig = clone.orientation.to_rotation();

        let w = r_ig * (p_f_global - clone.position);
        let p_cam = ext.imu_to_cam.transform_point(&w);
        if p_cam.z <= crate::features::MIN_FEATURE_DEPTH {
            return Err(UpdateError::BehindCamera { depth: p_cam.z });
        }

        let inv_z = 1.0 / p_cam.z;
        let dpi = Matrix2x3::new(
            inv_z,
            0.0,
            -p_cam.x * inv_z * inv_z,
            0.0,
            inv_z,
            -p_cam.y * inv_z * inv_z,
        );

        let d_ori = -(r_ci.matrix() * skew(&w));
        let d_pos = -(r_ci.matrix() * r_ig.matrix());
        let d_feat = r_ci.matrix() * r_ig.matrix();

        let row = 2 * i;
        let off = state.clone_offset(idx);
        h_x.view_mut((row, off), (2, 3)).copy_from(&(dpi * d_ori));
        h_x.view_mut((row, off + 3), (2, 3)).copy_from(&(dpi * d_pos));
        h_f.view_mut((row, 0), (2, 3)).copy_from(&(dpi * d_feat));

        let predicted = project_normalized(&p_cam);
        residual[row] = meas.point.x - predicted.x;
        residual[row + 1] = meas.point.y - predicted.y;
    }

    Ok(VisualResidualBlock { residual, h_x, h_f })
}

/// Projects the block onto the left nullspace of `H_f` by applying the
/// Householder reflections of its QR factorization; the bottom `2m - 3` rows
/// of the transformed system are returned. Requires at least three
/// measurements and full-rank `H_f`.
pub fn nullspace_project(block: &VisualResidualBlock) -> Result<ProjectedBlock, UpdateError> {
    let rows = block.residual.len();
    if rows < 5 || block.h_f.ncols() != 3 {
        return Err(UpdateError::TooFewRows { rows });
    }
    if block.h_x.nrows() != rows || block.h_f.nrows() != rows {
        return Err(UpdateError::DimensionMismatch);
    }

    // Stack [H_f | r | H_x] and apply Q^T of H_f's QR to everything at once.
    let cols = 1 + block.h_x.ncols();
    let mut stacked = DMatrix::zeros(rows, 3 + cols);
    stacked.view_mut((0, 0), (rows, 3)).copy_from(&block.h_f);
    stacked.view_mut((0, 3), (rows, 1)).copy_from(&block.residual);
    stacked.view_mut((0, 4), (rows, block.h_x.ncols())).copy_from(&block.h_x);

    for k in 0..3 {
        // Householder vector annihilating column k below the diagonal.
        let mut v = DVector::zeros(rows - k);
        for i in k..rows {
            v[i - k] = stacked[(i, k)];
        }
        let alpha = -v[0].signum() * v.norm();
        v[0] -= alpha;
        let vn = v.norm();
        if vn < 1e-300 {
            continue;
        }
        v /= vn;
        // stacked[k.., :] -= 2 v (v^T stacked[k.., :])
        let lower = stacked.rows(k, rows - k).clone_owned();
        let vt_m = v.transpose() * &lower;
        let update = &v * vt_m;
        let mut target = stacked.rows_mut(k, rows - k);
        target -= 2.0 * update;
    }

    // Rank check: the third diagonal entry of R must be meaningful.
    let diag_min = stacked[(2, 2)].abs();
    let scale = block.h_f.amax().max(1e-300);
    if diag_min < 1e-10 * scale {
        return Err(UpdateError::DegenerateGeometry);
    }
    // The bottom rows of the transformed H_f must vanish.
    let leakage = stacked.view((3, 0), (rows - 3, 3)).amax();
    if leakage > 1e-9 * scale.max(1.0) {
        return Err(UpdateError::DegenerateGeometry);
    }

    let residual = stacked.view((3, 3), (rows - 3, 1)).column(0).clone_owned();
    let h_x = stacked.view((3, 4), (rows - 3, block.h_x.ncols())).clone_owned();
    Ok(ProjectedBlock { residual, h_x })
}

/// Thin-QR row compression of a stacked system whose noise is isotropic
/// (`sigma^2 I`): applies Householder reflections of `[H | r]` and keeps the
/// top `ncols(H)` rows. The transformed noise is still `sigma^2 I`, so the
/// EKF update with the compressed system is equivalent.
pub fn compress_measurements(h: &DMatrix<f64>, r: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let rows = h.nrows();
    let cols = h.ncols();
    if rows <= cols {
        return (h.clone(), r.clone());
    }
    let mut stacked = DMatrix::zeros(rows, cols + 1);
    stacked.view_mut((0, 0), (rows, cols)).copy_from(h);
    stacked.view_mut((0, cols), (rows, 1)).copy_from(r);

    for k in 0..cols.min(rows - 1) {
        let mut v = DVector::zeros(rows - k);
        for i in k..rows {
            v[i - k] = stacked[(i, k)];
        }
        let norm = v.norm();
        if norm < 1e-300 {
            continue;
        }
        let alpha = -v[0].signum() * norm;
        v[0] -= alpha;
        let vn = v.norm();
        if vn < 1e-300 {
            continue;
        }
        v /= vn;
        let lower = stacked.rows(k, rows - k).clone_owned();
        let vt_m = v.transpose() * &lower;
        let update = &v * vt_m;
        let mut target = stacked.rows_mut(k, rows - k);
        target -= 2.0 * update;
    }

    let h_out = stacked.view((0, 0), (cols, cols)).clone_owned();
    let r_out = stacked.view((0, cols), (cols, 1)).column(0).clone_owned();
    (h_out, r_out)
}

/// Chi-square quantile for the given confidence and degrees of freedom.
pub fn chi2_threshold(confidence: f64, dof: usize) -> f64 {
    ChiSquared::new(dof as f64).expect("dof > 0").inverse_cdf(confidence)
}

/// Mahalanobis gate: accepts iff `r^T (H P H^T + R)^{-1} r` is below the
/// chi-square quantile at `confidence` for `dim(r)` degrees of freedom.
/// A singular innovation covariance rejects.
pub fn chi2_gate(
    residual: &DVector<f64>,
    h: &DMatrix<f64>,
    p: &DMatrix<f64>,
    r_meas: &DMatrix<f64>,
    confidence: f64,
) -> bool {
    let s = h * p * h.transpose() + r_meas;
    let chol = match s.cholesky() {
        Some(c) => c,
        None => return false,
    };
    let w = chol.solve(residual);
    let mahal = residual.dot(&w);
    mahal < chi2_threshold(confidence, residual.len())
}

/// Outcome of an EKF update attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOutcome {
    Applied,
    /// Innovation covariance not invertible; state untouched.
    SkippedSingular,
}

/// Standard EKF update with Joseph-form covariance. The correction is applied
/// through boxplus on every orientation block; the covariance is
/// re-symmetrized afterwards.
pub fn ekf_update(
    state: &mut FilterState,
    residual: &DVector<f64>,
    h: &DMatrix<f64>,
    r_meas: &DMatrix<f64>,
) -> Result<UpdateOutcome, UpdateError> {
    let dim = state.dim();
    if h.ncols() != dim || h.nrows() != residual.len() || r_meas.nrows() != residual.len() {
        return Err(UpdateError::DimensionMismatch);
    }

    let ph_t = &state.covariance * h.transpose();
    let s = h * &ph_t + r_meas;
    let chol = match s.cholesky() {
        Some(c) => c,
        None => return Ok(UpdateOutcome::SkippedSingular),
    };
    // K = P H^T S^{-1}  via  K^T = S^{-1} (P H^T)^T
    let k = chol.solve(&ph_t.transpose()).transpose();
    let dx = &k * residual;

    apply_correction(state, &dx);

    let i_kh = DMatrix::identity(dim, dim) - &k * h;
    let joseph = &i_kh * &state.covariance * i_kh.transpose() + &k * r_meas * k.transpose();
    state.covariance = joseph;
    state.symmetrize();
    Ok(UpdateOutcome::Applied)
}

fn apply_correction(state: &mut FilterState, dx: &DVector<f64>) {
    let seg = |off: usize| Vector3::new(dx[off], dx[off + 1], dx[off + 2]);

    state.imu.orientation = state
        .imu
        .orientation
        .boxplus(&seg(ORI))
        .expect("finite correction");
    state.imu.position += seg(POS);
    state.imu.velocity += seg(VEL);
    state.imu.gyro_bias += seg(crate::state::BG);
    state.imu.accel_bias += seg(crate::state::BA);

    for i in 0..state.clones.len() {
        let off = IMU_DIM + CLONE_DIM * i;
        state.clones[i].orientation = state.clones[i]
            .orientation
            .boxplus(&seg(off))
            .expect("finite correction");
        let dp = seg(off + 3);
        state.clones[i].position += dp;
    }
}
