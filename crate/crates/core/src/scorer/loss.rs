use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::pose::Pose;

/// Default weighting of the confidence term in the score loss.
pub const DEFAULT_ALPHA: f64 = 0.1;

/// One patch-graph edge as seen by the score loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeTerm {
    /// Score of the edge's source patch, in (0, 1).
    pub score: f64,
    /// Flow residual magnitude in pixels.
    pub residual: f64,
    /// Bundle-adjustment confidence in (0, 1].
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeLossInputs {
    pub edges: Vec<EdgeTerm>,
    pub alpha: f64,
}

/// Score loss: mean of `s * r * (1 - alpha ln w)` over edges minus the mean log
/// of the sampled score values.
pub fn score_loss(inputs: &EdgeLossInputs, sampled_scores: &[f64]) -> Result<f64> {
    if inputs.edges.is_empty() {
        return Err(Error::InvalidArgument("score loss needs at least one edge".into()));
    }
    if sampled_scores.is_empty() {
        return Err(Error::InvalidArgument(
            "score loss needs at least one sampled score".into(),
        ));
    }
    let alpha = inputs.alpha;
    let mut tracking = 0.0;
    for (i, e) in inputs.edges.iter().enumerate() {
        if !(e.score > 0.0 && e.score < 1.0) {
            return Err(Error::Domain(format!("edge {i}: score {} not in (0, 1)", e.score)));
        }
        if !(e.weight > 0.0 && e.weight <= 1.0) {
            return Err(Error::Domain(format!("edge {i}: weight {} not in (0, 1]", e.weight)));
        }
        if !(e.residual >= 0.0) || !e.residual.is_finite() {
            return Err(Error::Domain(format!("edge {i}: residual {} is negative", e.residual)));
        }
        let inverted = 1.0 - alpha * e.weight.ln();
        if !(inverted > 0.0) {
            return Err(Error::Domain(format!(
                "edge {i}: inverted weight {inverted} must be positive"
            )));
        }
        tracking += e.score * e.residual * inverted;
    }
    tracking /= inputs.edges.len() as f64;
    let mut log_mean = 0.0;
    for (i, s) in sampled_scores.iter().enumerate() {
        if !(*s > 0.0 && *s <= 1.0) {
            return Err(Error::Domain(format!("sampled score {i} = {s} not in (0, 1]")));
        }
        log_mean += s.ln();
    }
    log_mean /= sampled_scores.len() as f64;
    Ok(tracking - log_mean)
}

/// Mean Euclidean distance between predicted and ground-truth flows.
pub fn flow_loss(predicted: &[Vector2<f64>], truth: &[Vector2<f64>]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "flow counts differ: {} predicted vs {} ground truth",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::InvalidArgument("flow loss needs at least one edge".into()));
    }
    let total: f64 = predicted.iter().zip(truth).map(|(a, b)| (a - b).norm()).sum();
    Ok(total / predicted.len() as f64)
}

/// Mean geodesic error of consecutive relative poses.
pub fn pose_loss(estimated: &[Pose], truth: &[Pose]) -> Result<f64> {
    if estimated.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "window sizes differ: {} vs {}",
            estimated.len(),
            truth.len()
        )));
    }
    if estimated.len() < 2 {
        return Err(Error::InvalidArgument("pose loss needs at least 2 poses".into()));
    }
    let mut total = 0.0;
    for i in 0..estimated.len() - 1 {
        let rel_est = estimated[i].inverse() * estimated[i + 1];
        let rel_gt = truth[i].inverse() * truth[i + 1];
        total += (rel_est.inverse() * rel_gt).log().norm();
    }
    Ok(total / (estimated.len() - 1) as f64)
}

/// `0.05 score + 0.1 flow + 10 pose`.
pub fn total_loss(score: f64, flow: f64, pose: f64) -> f64 {
    // one rounding of exact integer-weighted sums keeps the coefficients exact
    (score + 2.0 * flow + 200.0 * pose) / 20.0
}

/// Per-iteration flow and pose losses plus the final-iteration score loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IterationLosses {
    pub flow: Vec<f64>,
    pub pose: Vec<f64>,
    pub final_score: f64,
}

impl IterationLosses {
    /// Flow and pose terms accumulate over every iteration; the score term
    /// enters once.
    pub fn total(&self) -> f64 {
        let flow: f64 = self.flow.iter().sum();
        let pose: f64 = self.pose.iter().sum();
        total_loss(self.final_score, flow, pose)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3, Vector6};

    fn edge(score: f64, residual: f64, weight: f64) -> EdgeTerm {
        EdgeTerm { score, residual, weight }
    }

    #[test]
    fn vanishing_terms_give_zero() {
        let inputs = EdgeLossInputs { edges: vec![edge(0.3, 0.0, 0.5), edge(0.9, 0.0, 1.0)], alpha: 0.1 };
        assert_eq!(score_loss(&inputs, &[1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn single_edge_closed_form() {
        let inputs = EdgeLossInputs { edges: vec![edge(0.5, 2.0, 1.0)], alpha: 7.0 };
        let l = score_loss(&inputs, &[(-1.0f64).exp()]).unwrap();
        assert!((l - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_alpha_is_mean_of_products() {
        let inputs = EdgeLossInputs { edges: vec![edge(0.5, 2.0, 0.01), edge(0.25, 4.0, 0.3)], alpha: 0.0 };
        let l = score_loss(&inputs, &[1.0]).unwrap();
        assert!((l - 1.0).abs() < 1e-15);
    }

    #[test]
    fn domain_errors() {
        let bad_w = EdgeLossInputs { edges: vec![edge(0.5, 1.0, 0.0)], alpha: 0.1 };
        assert!(matches!(score_loss(&bad_w, &[0.5]), Err(Error::Domain(_))));
        let bad_s = EdgeLossInputs { edges: vec![edge(1.0, 1.0, 0.5)], alpha: 0.1 };
        assert!(matches!(score_loss(&bad_s, &[0.5]), Err(Error::Domain(_))));
        let ok = EdgeLossInputs { edges: vec![edge(0.5, 1.0, 0.5)], alpha: 0.1 };
        assert!(matches!(score_loss(&ok, &[0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn flow_loss_cases() {
        let a = vec![Vector2::new(1.0, 2.0), Vector2::new(-3.0, 0.5)];
        assert_eq!(flow_loss(&a, &a).unwrap(), 0.0);
        let l = flow_loss(&[Vector2::new(3.0, 4.0)], &[Vector2::zeros()]).unwrap();
        assert!((l - 5.0).abs() < 1e-15);
        assert!(flow_loss(&a, &a[..1]).is_err());
    }

    fn window() -> Vec<Pose> {
        (0..5)
            .map(|i| {
                let f = i as f64;
                Pose::exp(&Vector6::new(0.1 * f, 0.02 * f * f, -0.05 * f, 0.01 * f, -0.03 * f, 0.02))
            })
            .collect()
    }

    #[test]
    fn pose_loss_is_left_invariant() {
        let gt = window();
        assert!(pose_loss(&gt, &gt).unwrap() < 1e-15);
        let g = Pose::exp(&Vector6::new(1.0, -2.0, 0.5, 0.3, 0.4, -1.0));
        let moved: Vec<Pose> = gt.iter().map(|p| g * *p).collect();
        assert!(pose_loss(&moved, &gt).unwrap() < 1e-9);
        assert!(pose_loss(&gt[..1], &gt[..1]).is_err());
    }

    #[test]
    fn rotated_relative_pose_contributes_its_angle() {
        let gt = vec![Pose::identity(), Pose::identity()];
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 10f64.to_radians());
        let est = vec![Pose::identity(), Pose::new(rot, Vector3::zeros())];
        let l = pose_loss(&est, &gt).unwrap();
        assert!((l - 10.0 * std::f64::consts::PI / 180.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_coefficients() {
        assert_eq!(total_loss(0.0, 0.0, 0.0), 0.0);
        assert_eq!(total_loss(1.0, 1.0, 1.0), 10.15);
        assert!((total_loss(2.0, 0.0, 0.0) - 0.1).abs() < 1e-16);
        let it = IterationLosses { flow: vec![1.0, 1.0], pose: vec![0.0, 0.5], final_score: 1.0 };
        assert!((it.total() - (0.05 + 0.2 + 5.0)).abs() < 1e-12);
    }
}
