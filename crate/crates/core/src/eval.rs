//! Trajectory evaluation: windowed least-squares similarity alignment and
//! absolute trajectory error (per-axis and horizontal-plane RMSE).

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::logio::TrajectoryRecord;

/// Association tolerance between estimated and ground-truth timestamps.
pub const ASSOCIATION_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    /// Fewer than three associated pose pairs inside the alignment window.
    InsufficientOverlap { pairs: usize },
    /// No associated pose pairs at all.
    EmptyAssociation,
    Io(String),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::InsufficientOverlap { pairs } => {
                write!(f, "alignment window holds only {pairs} associated pairs (need >= 3)")
            }
            EvalError::EmptyAssociation => write!(f, "no temporally associated poses"),
            EvalError::Io(e) => write!(f, "evaluation io error: {e}"),
        }
    }
}

impl std::error::Error for EvalError {}

/// Similarity transform `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

/// ATE summary: per-axis and horizontal RMSE plus the per-timestamp error
/// series. The X-Y RMSE is `sqrt((rmse_x^2 + rmse_y^2) / 2)`, the RMS over
/// the two horizontal per-axis error populations.
#[derive(Debug, Clone, PartialEq)]
pub struct AteReport {
    pub rmse_x: f64,
    pub rmse_y: f64,
    pub rmse_xy: f64,
    pub rmse_z: f64,
    /// `(t, ex, ey, ez)` per associated pose.
    pub errors: Vec<(f64, f64, f64, f64)>,
    pub alignment: SimilarityTransform,
}

/// Nearest-timestamp association within [`ASSOCIATION_TOLERANCE`]. Both
/// trajectories must be time-ordered.
fn associate<'a>(
    est: &'a TrajectoryRecord,
    gt: &'a TrajectoryRecord,
) -> Vec<(f64, &'a Vector3<f64>, &'a Vector3<f64>)> {
    let mut pairs = Vec::new();
    let mut j = 0usize;
    for pose in &est.poses {
        while j + 1 < gt.poses.len()
            && (gt.poses[j + 1].t - pose.t).abs() <= (gt.poses[j].t - pose.t).abs()
        {
            j += 1;
        }
        if gt.poses.is_empty() {
            break;
        }
        if (gt.poses[j].t - pose.t).abs() <= ASSOCIATION_TOLERANCE {
            pairs.push((pose.t, &pose.position, &gt.poses[j].position));
        }
    }
    pairs
}

/// Closed-form least-squares similarity (rotation, translation, scale) fitted
/// over associated pairs within the first `window` seconds of the estimate,
/// mapping estimated positions onto ground truth.
pub fn align_umeyama(
    est: &TrajectoryRecord,
    gt: &TrajectoryRecord,
    window: f64,
) -> Result<SimilarityTransform, EvalError> {
    let pairs = associate(est, gt);
    if pairs.is_empty() {
        return Err(EvalError::EmptyAssociation);
    }
    let t_start = pairs[0].0;
    let windowed: Vec<_> = pairs.iter().filter(|(t, _, _)| *t - t_start <= window).collect();
    let n = windowed.len();
    if n < 3 {
        return Err(EvalError::InsufficientOverlap { pairs: n });
    }

    let nf = n as f64;
    let mean_est: Vector3<f64> = windowed.iter().map(|(_, e, _)| **e).sum::<Vector3<f64>>() / nf;
    let mean_gt: Vector3<f64> = windowed.iter().map(|(_, _, g)| **g).sum::<Vector3<f64>>() / nf;

    let mut cross = Matrix3::zeros();
    let mut var_est = 0.0;
    for (_, e, g) in &windowed {
        let de = **e - mean_est;
        let dg = **g - mean_gt;
        cross += dg * de.transpose();
        var_est += de.norm_squared();
    }
    cross /= nf;
    var_est /= nf;

    let svd = cross.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let scale = if var_est > 1e-30 {
        (svd.singular_values[0] * s[(0, 0)]
            + svd.singular_values[1] * s[(1, 1)]
            + svd.singular_values[2] * s[(2, 2)])
            / var_est
    } else {
        1.0
    };
    let translation = mean_gt - scale * (rotation * mean_est);
    Ok(SimilarityTransform { rotation, translation, scale })
}

/// Applies a similarity transform to every pose position.
pub fn transform_trajectory(
    traj: &TrajectoryRecord,
    transform: &SimilarityTransform,
) -> TrajectoryRecord {
    TrajectoryRecord {
        poses: traj
            .poses
            .iter()
            .map(|p| crate::logio::PoseRecord {
                t: p.t,
                position: transform.apply(&p.position),
                orientation: p.orientation,
            })
            .collect(),
    }
}

/// RMSE of the aligned estimate against ground truth.
pub fn compute_ate(
    est_aligned: &TrajectoryRecord,
    gt: &TrajectoryRecord,
    alignment: SimilarityTransform,
) -> Result<AteReport, EvalError> {
    let pairs = associate(est_aligned, gt);
    if pairs.is_empty() {
        return Err(EvalError::EmptyAssociation);
    }
    let mut sum_x = 0.0;
    let mut sum_y = 0.0;
    let mut sum_z = 0.0;
    let mut errors = Vec::with_capacity(pairs.len());
    for (t, e, g) in &pairs {
        let d = **e - **g;
        sum_x += d.x * d.x;
        sum_y += d.y * d.y;
        sum_z += d.z * d.z;
        errors.push((*t, d.x, d.y, d.z));
    }
    let n = pairs.len() as f64;
    let rmse_x = (sum_x / n).sqrt();
    let rmse_y = (sum_y / n).sqrt();
    let rmse_z = (sum_z / n).sqrt();
    let rmse_xy = (0.5 * (rmse_x * rmse_x + rmse_y * rmse_y)).sqrt();
    Ok(AteReport { rmse_x, rmse_y, rmse_xy, rmse_z, errors, alignment })
}

/// Align over the window, apply to the whole estimate, compute ATE.
pub fn evaluate(
    est: &TrajectoryRecord,
    gt: &TrajectoryRecord,
    align_window: f64,
) -> Result<AteReport, EvalError> {
    let transform = align_umeyama(est, gt, align_window)?;
    let aligned = transform_trajectory(est, &transform);
    compute_ate(&aligned, gt, transform)
}

impl AteReport {
    /// Structured plain-text report.
    pub fn to_text(&self, align_window: f64) -> String {
        let t = &self.alignment;
        let mut out = String::new();
        out.push_str("trajectory evaluation report\n");
        out.push_str("============================\n");
        out.push_str(&format!("associated poses:   {}\n", self.errors.len()));
        out.push_str(&format!("alignment window:   {align_window} s\n"));
        out.push_str(&format!("alignment scale:    {:.9}\n", t.scale));
        out.push_str(&format!(
            "alignment trans:    [{:.6}, {:.6}, {:.6}] m\n",
            t.translation.x, t.translation.y, t.translation.z
        ));
        out.push_str(&format!(
            "alignment rot rows: [{:.6}, {:.6}, {:.6}; {:.6}, {:.6}, {:.6}; {:.6}, {:.6}, {:.6}]\n",
            t.rotation[(0, 0)],
            t.rotation[(0, 1)],
            t.rotation[(0, 2)],
            t.rotation[(1, 0)],
            t.rotation[(1, 1)],
            t.rotation[(1, 2)],
            t.rotation[(2, 0)],
            t.rotation[(2, 1)],
            t.rotation[(2, 2)],
        ));
        out.push_str(&format!("RMSE(X):            {:.4} m\n", self.rmse_x));
        out.push_str(&format!("RMSE(Y):            {:.4} m\n", self.rmse_y));
        out.push_str(&format!("RMSE(X-Y):          {:.4} m\n", self.rmse_xy));
        out.push_str(&format!("RMSE(Z):            {:.4} m\n", self.rmse_z));
        out
    }

    /// Per-timestamp error series as CSV (`t,err_x,err_y,err_z,err_plane`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,err_x,err_y,err_z,err_plane\n");
        for (t, ex, ey, ez) in &self.errors {
            let plane = (ex * ex + ey * ey).sqrt();
            out.push_str(&format!("{t},{ex},{ey},{ez},{plane}\n"));
        }
        out
    }

    pub fn write_files(&self, report_path: &Path, align_window: f64) -> Result<(), EvalError> {
        std::fs::write(report_path, self.to_text(align_window))
            .map_err(|e| EvalError::Io(e.to_string()))?;
        let csv_path = report_path.with_extension("csv");
        std::fs::write(csv_path, self.to_csv()).map_err(|e| EvalError::Io(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{so3_exp, UnitQuat};
    use crate::logio::PoseRecord;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn traj_from(points: &[(f64, Vector3<f64>)]) -> TrajectoryRecord {
        TrajectoryRecord {
            poses: points
                .iter()
                .map(|(t, p)| PoseRecord { t: *t, position: *p, orientation: None })
                .collect(),
        }
    }

    fn wiggly(n: usize) -> TrajectoryRecord {
        traj_from(
            &(0..n)
                .map(|k| {
                    let t = k as f64 * 0.5;
                    (
                        t,
                        Vector3::new(
                            0.4 * t + (0.1 * t).sin(),
                            0.2 * t - (0.07 * t).cos(),
                            -0.01 * t + 0.2 * (0.3 * t).sin(),
                        ),
                    )
                })
                .collect::<Vec<_>>(),
        )
    }

    #[test]
    fn identity_alignment_for_identical_trajectories() {
        let traj = wiggly(100);
        let transform = align_umeyama(&traj, &traj, 20.0).unwrap();
        assert_relative_eq!(transform.scale, 1.0, epsilon = 1e-12);
        assert_relative_eq!(transform.rotation, Matrix3::identity(), epsilon = 1e-10);
        assert_relative_eq!(transform.translation, Vector3::zeros(), epsilon = 1e-10);
    }

    #[test]
    fn recovers_known_similarity() {
        let gt = wiggly(200);
        let scale = 1.2;
        let rot = so3_exp(&Vector3::new(0.0, 0.0, 30f64.to_radians()));
        let trans = Vector3::new(5.0, -3.0, 1.0);
        // est = inverse-mapped gt, so aligning est onto gt must recover the
        // forward transform
        let est = TrajectoryRecord {
            poses: gt
                .poses
                .iter()
                .map(|p| PoseRecord {
                    t: p.t,
                    position: rot.transpose() * ((p.position - trans) / scale),
                    orientation: None,
                })
                .collect(),
        };
        let transform = align_umeyama(&est, &gt, 1e9).unwrap();
        assert_relative_eq!(transform.scale, scale, epsilon = 1e-9);
        assert_relative_eq!(transform.rotation, *rot.matrix(), epsilon = 1e-9);
        assert_relative_eq!(transform.translation, trans, epsilon = 1e-9);

        let report = evaluate(&est, &gt, 1e9).unwrap();
        assert!(report.rmse_xy < 1e-9);
    }

    #[test]
    fn alignment_uses_only_the_window() {
        let gt = wiggly(2400); // 20 minutes at 0.5 s cadence
        // corrupt the estimate after 90 s with a growing drift
        let est = TrajectoryRecord {
            poses: gt
                .poses
                .iter()
                .map(|p| {
                    let drift = if p.t > 90.0 { (p.t - 90.0) * 0.05 } else { 0.0 };
                    PoseRecord {
                        t: p.t,
                        position: p.position + Vector3::new(drift, 0.0, 0.0),
                        orientation: None,
                    }
                })
                .collect(),
        };
        let transform = align_umeyama(&est, &gt, 90.0).unwrap();
        // the pre-drift segment matches identically, so the transform is
        // near-identity rather than splitting the drift
        assert_relative_eq!(transform.scale, 1.0, epsilon = 1e-6);
        assert_relative_eq!(transform.translation.norm(), 0.0, epsilon = 1e-6);
    }

    #[test]
    fn insufficient_overlap_is_an_error() {
        let est = traj_from(&[(0.0, Vector3::zeros()), (0.5, Vector3::x())]);
        let gt = traj_from(&[(0.0, Vector3::zeros()), (0.5, Vector3::x())]);
        assert!(matches!(
            align_umeyama(&est, &gt, 10.0),
            Err(EvalError::InsufficientOverlap { pairs: 2 })
        ));
        let far = traj_from(&[(100.0, Vector3::zeros()), (100.5, Vector3::x())]);
        assert!(matches!(align_umeyama(&est, &far, 10.0), Err(EvalError::EmptyAssociation)));
    }

    #[test]
    fn ate_zero_for_identical_and_exact_for_constant_offset() {
        let gt = wiggly(100);
        let report = compute_ate(&gt, &gt, SimilarityTransform::identity()).unwrap();
        assert_relative_eq!(report.rmse_x, 0.0);
        assert_relative_eq!(report.rmse_y, 0.0);
        assert_relative_eq!(report.rmse_xy, 0.0);

        // constant offset (3, 4, 0): rmse_x = 3, rmse_y = 4 and the pinned
        // X-Y formula gives sqrt((9 + 16)/2)
        let offset = TrajectoryRecord {
            poses: gt
                .poses
                .iter()
                .map(|p| PoseRecord {
                    t: p.t,
                    position: p.position + Vector3::new(3.0, 4.0, 0.0),
                    orientation: None,
                })
                .collect(),
        };
        let report = compute_ate(&offset, &gt, SimilarityTransform::identity()).unwrap();
        assert_relative_eq!(report.rmse_x, 3.0, epsilon = 1e-12);
        assert_relative_eq!(report.rmse_y, 4.0, epsilon = 1e-12);
        assert_relative_eq!(report.rmse_xy, (12.5f64).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn ate_invariant_under_common_rigid_transform() {
        let mut rng = StdRng::seed_from_u64(3);
        let gt = wiggly(300);
        let est = TrajectoryRecord {
            poses: gt
                .poses
                .iter()
                .map(|p| PoseRecord {
                    t: p.t,
                    position: p.position
                        + Vector3::new(
                            rng.gen_range(-0.3..0.3),
                            rng.gen_range(-0.3..0.3),
                            rng.gen_range(-0.1..0.1),
                        ),
                    orientation: None,
                })
                .collect(),
        };
        let base = evaluate(&est, &gt, 30.0).unwrap();

        // pure translation: the whole report is unchanged
        let shift = Vector3::new(10.0, -4.0, 2.0);
        let translate = |t: &TrajectoryRecord| TrajectoryRecord {
            poses: t
                .poses
                .iter()
                .map(|p| PoseRecord { t: p.t, position: p.position + shift, orientation: None })
                .collect(),
        };
        let moved = evaluate(&translate(&est), &translate(&gt), 30.0).unwrap();
        assert_relative_eq!(base.rmse_x, moved.rmse_x, epsilon = 1e-9);
        assert_relative_eq!(base.rmse_y, moved.rmse_y, epsilon = 1e-9);
        assert_relative_eq!(base.rmse_xy, moved.rmse_xy, epsilon = 1e-9);
        assert_relative_eq!(base.rmse_z, moved.rmse_z, epsilon = 1e-9);

        // yaw + translation: the errors rotate within the plane, so the
        // planar and vertical metrics are unchanged
        let rot = UnitQuat::exp(&Vector3::new(0.0, 0.0, 1.1)).to_rotation();
        let move_traj = |t: &TrajectoryRecord| TrajectoryRecord {
            poses: t
                .poses
                .iter()
                .map(|p| PoseRecord {
                    t: p.t,
                    position: rot * p.position + shift,
                    orientation: None,
                })
                .collect(),
        };
        let yawed = evaluate(&move_traj(&est), &move_traj(&gt), 30.0).unwrap();
        assert_relative_eq!(base.rmse_xy, yawed.rmse_xy, epsilon = 1e-9);
        assert_relative_eq!(base.rmse_z, yawed.rmse_z, epsilon = 1e-9);
    }

    #[test]
    fn report_text_and_csv_shape() {
        let gt = wiggly(50);
        let report = evaluate(&gt, &gt, 10.0).unwrap();
        let text = report.to_text(10.0);
        assert!(text.contains("RMSE(X-Y)"));
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), report.errors.len() + 1);
        assert!(csv.starts_with("t,err_x,err_y,err_z,err_plane"));
    }
}
