//! IMU error-state propagation: midpoint mean integration with exact
//! quaternion attitude, first-order state transition and noise Jacobians, and
//! full-window covariance propagation.
//!
//! The attitude error follows the crate's boxplus convention
//! (`R_ig_true = exp(dtheta) * R_ig_est`), under which the orientation /
//! gyro-bias coupling block is `+A Jr dt` (`A = exp(-omega dt)`); every block
//! is pinned by the finite-difference tests below rather than by convention
//! lore.

use std::fmt;

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector3};

use crate::geom::{skew, so3_exp, so3_right_jacobian, UnitQuat};
use crate::state::{FilterState, ImuState, BA, BG, IMU_DIM, ORI, POS, VEL};

pub type Phi = SMatrix<f64, 15, 15>;
pub type NoiseJacobian = SMatrix<f64, 15, 12>;

/// Largest IMU step the integrator accepts; the caller splits longer gaps.
pub const MAX_IMU_DT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub enum PropagationError {
    /// Sample pair out of order (dt <= 0).
    NonPositiveDt { dt: f64 },
    /// Gap above [`MAX_IMU_DT`]; the caller must sub-step.
    ExcessiveDt { dt: f64 },
}

impl fmt::Display for PropagationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PropagationError::NonPositiveDt { dt } => write!(f, "non-positive IMU dt {dt}"),
            PropagationError::ExcessiveDt { dt } => {
                write!(f, "IMU dt {dt} exceeds {MAX_IMU_DT} s")
            }
        }
    }
}

impl std::error::Error for PropagationError {}

/// One IMU sample: specific force and angular rate in the IMU frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

/// Continuous-time IMU noise densities plus the gravity magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuNoiseParams {
    pub gyro_noise_density: f64,
    pub accel_noise_density: f64,
    pub gyro_bias_walk: f64,
    pub accel_bias_walk: f64,
    pub gravity_magnitude: f64,
}

impl Default for ImuNoiseParams {
    fn default() -> Self {
        ImuNoiseParams {
            gyro_noise_density: 1.7e-4,
            accel_noise_density: 2.0e-3,
            gyro_bias_walk: 1.9e-5,
            accel_bias_walk: 3.0e-3,
            gravity_magnitude: 9.81,
        }
    }
}

impl ImuNoiseParams {
    /// Gravity in the global frame (z up).
    pub fn gravity_vector(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -self.gravity_magnitude)
    }
}

fn step_inputs(
    x: &ImuState,
    s1: &ImuSample,
    s2: &ImuSample,
) -> Result<(f64, Vector3<f64>, Vector3<f64>), PropagationError> {
    let dt = s2.timestamp - s1.timestamp;
    if dt <= 0.0 {
        return Err(PropagationError::NonPositiveDt { dt });
    }
    if dt > MAX_IMU_DT {
        return Err(PropagationError::ExcessiveDt { dt });
    }
    let gyro = 0.5 * (s1.gyro + s2.gyro) - x.gyro_bias;
    let accel = 0.5 * (s1.accel + s2.accel) - x.accel_bias;
    Ok((dt, gyro, accel))
}

/// Integrates the mean over one sample pair: exact quaternion attitude for the
/// midpoint rate, first-order velocity/position with the start-of-step
/// attitude, constant biases.
pub fn propagate_mean(
    x: &ImuState,
    s1: &ImuSample,
    s2: &ImuSample,
    gravity_magnitude: f64,
) -> Result<ImuState, PropagationError> {
    let (dt, gyro, accel) = step_inputs(x, s1, s2)?;
    let gravity = Vector3::new(0.0, 0.0, -gravity_magnitude);

    let rot_body_to_global = x.orientation.to_rotation().transpose();
    let acc_world = rot_body_to_global * accel + gravity;

    Ok(ImuState {
        orientation: UnitQuat::exp(&(-gyro * dt)).mul(x.orientation),
        position: x.position + x.velocity * dt + 0.5 * acc_world * dt * dt,
        velocity: x.velocity + acc_world * dt,
        gyro_bias: x.gyro_bias,
        accel_bias: x.accel_bias,
    })
}

/// Folds [`propagate_mean`] over consecutive sample pairs.
pub fn propagate_mean_batch(
    x: &ImuState,
    samples: &[ImuSample],
    gravity_magnitude: f64,
) -> Result<ImuState, PropagationError> {
    let mut state = *x;
    for pair in samples.windows(2) {
        state = propagate_mean(&state, &pair[0], &pair[1], gravity_magnitude)?;
    }
    Ok(state)
}

/// First-order state-transition and noise Jacobians of the discrete step.
/// Noise column order: gyro white, accel white, gyro-bias walk, accel-bias walk.
pub fn propagation_jacobians(
    x: &ImuState,
    s1: &ImuSample,
    s2: &ImuSample,
) -> Result<(Phi, NoiseJacobian), PropagationError> {
    let (dt, gyro, accel) = step_inputs(x, s1, s2)?;

    let a_mat = so3_exp(&(-gyro * dt));
    let jr = so3_right_jacobian(&(-gyro * dt));
    let rot_body_to_global = x.orientation.to_rotation().transpose();
    let r_gi = rot_body_to_global.matrix();

    let mut phi = Phi::identity();
    set_block(&mut phi, ORI, ORI, a_mat.matrix());
    set_block(&mut phi, ORI, BG, &(a_mat.matrix() * jr * dt));
    set_block(&mut phi, POS, ORI, &(0.5 * dt * dt * r_gi * skew(&accel)));
    set_block(&mut phi, POS, VEL, &(Matrix3::identity() * dt));
    set_block(&mut phi, POS, BA, &(-0.5 * dt * dt * r_gi));
    set_block(&mut phi, VEL, ORI, &(dt * r_gi * skew(&accel)));
    set_block(&mut phi, VEL, BA, &(-dt * r_gi));

    let mut g = NoiseJacobian::zeros();
    set_block(&mut g, ORI, 0, &(a_mat.matrix() * jr));
    set_block(&mut g, POS, 3, &(-0.5 * dt * r_gi));
    set_block(&mut g, VEL, 3, &(-r_gi));
    set_block(&mut g, BG, 6, &Matrix3::identity());
    set_block(&mut g, BA, 9, &Matrix3::identity());

    Ok((phi, g))
}

fn set_block<const R: usize, const C: usize>(
    m: &mut SMatrix<f64, R, C>,
    row: usize,
    col: usize,
    block: &Matrix3<f64>,
) {
    m.fixed_view_mut::<3, 3>(row, col).copy_from(block);
}

/// Discrete process noise `G Qc G^T dt` for the IMU block.
pub fn discrete_process_noise(g: &NoiseJacobian, noise: &ImuNoiseParams, dt: f64) -> Phi {
    let mut qc = SMatrix::<f64, 12, 12>::zeros();
    let densities = [
        noise.gyro_noise_density,
        noise.accel_noise_density,
        noise.gyro_bias_walk,
        noise.accel_bias_walk,
    ];
    for (i, sd) in densities.iter().enumerate() {
        for k in 0..3 {
            qc[(3 * i + k, 3 * i + k)] = sd * sd;
        }
    }
    g * qc * g.transpose() * dt
}

/// Propagates the full-window covariance: the IMU block with `Phi` plus the
/// discrete noise, IMU/clone cross terms with `Phi`, clone blocks untouched.
/// Re-symmetrizes.
pub fn propagate_covariance(
    cov: &mut DMatrix<f64>,
    phi: &Phi,
    g: &NoiseJacobian,
    noise: &ImuNoiseParams,
    dt: f64,
) {
    let dim = cov.nrows();
    let qd = discrete_process_noise(g, noise, dt);

    let p_ii = cov.view((0, 0), (IMU_DIM, IMU_DIM)).clone_owned();
    let new_ii = phi * &p_ii * phi.transpose() + qd;
    cov.view_mut((0, 0), (IMU_DIM, IMU_DIM)).copy_from(&new_ii);

    if dim > IMU_DIM {
        let n = dim - IMU_DIM;
        let p_ic = cov.view((0, IMU_DIM), (IMU_DIM, n)).clone_owned();
        let new_ic = phi * p_ic;
        cov.view_mut((0, IMU_DIM), (IMU_DIM, n)).copy_from(&new_ic);
        cov.view_mut((IMU_DIM, 0), (n, IMU_DIM)).copy_from(&new_ic.transpose());
    }

    let t = cov.transpose();
    *cov += t;
    *cov *= 0.5;
}

/// Mean + covariance propagation of a filter state over one sample pair.
pub fn propagate_state(
    state: &mut FilterState,
    s1: &ImuSample,
    s2: &ImuSample,
    noise: &ImuNoiseParams,
) -> Result<(), PropagationError> {
    let (phi, g) = propagation_jacobians(&state.imu, s1, s2)?;
    state.imu = propagate_mean(&state.imu, s1, s2, noise.gravity_magnitude)?;
    let dt = s2.timestamp - s1.timestamp;
    propagate_covariance(&mut state.covariance, &phi, &g, noise, dt);
    Ok(())
}
