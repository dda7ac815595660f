//! Weighted sliding-window bundle adjustment over keyframe poses and patch
//! inverse depths.
//!
//! Residuals are predicted reprojection minus flow target. The solver runs
//! Levenberg-Marquardt damped Gauss-Newton with a Huber kernel, eliminating
//! the scalar depths by Schur complement before a dense Cholesky solve of the
//! reduced pose system.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix2x6, Matrix3, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::pose::{skew, Pose};
use crate::tracker::reproject_homogeneous;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaConfig {
    pub max_iters: usize,
    /// Huber threshold on the residual norm in pixels.
    pub huber_delta: f64,
    pub initial_lambda: f64,
    pub lambda_factor: f64,
    pub max_escalations: usize,
    pub min_inv_depth: f64,
    /// Stop once the largest update component falls below this.
    pub tolerance: f64,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            max_iters: 2,
            huber_delta: 2.0,
            initial_lambda: 1e-4,
            lambda_factor: 10.0,
            max_escalations: 10,
            min_inv_depth: 1e-4,
            tolerance: 1e-8,
        }
    }
}

impl BaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
        }
        if !(self.huber_delta > 0.0) || !(self.initial_lambda > 0.0) || !(self.lambda_factor > 1.0)
        {
            return Err(Error::InvalidArgument(
                "huber_delta and initial_lambda must be positive, lambda_factor > 1".into(),
            ));
        }
        if !(self.min_inv_depth > 0.0) {
            return Err(Error::InvalidArgument("min_inv_depth must be positive".into()));
        }
        Ok(())
    }
}

/// A patch as seen by the solver: its source pose index and pixel center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaPatch {
    pub frame: usize,
    pub center: Vector2<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub patch: usize,
    /// Index of the target pose.
    pub frame: usize,
    pub target: Vector2<f64>,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaProblem {
    pub poses: Vec<Pose>,
    pub inv_depths: Vec<f64>,
    pub patches: Vec<BaPatch>,
    pub observations: Vec<Observation>,
    pub intrinsics: CameraIntrinsics,
    pub fixed_poses: Vec<usize>,
    pub fixed_depths: Vec<usize>,
}

impl BaProblem {
    pub fn validate(&self) -> Result<()> {
        if self.inv_depths.len() != self.patches.len() {
            return Err(Error::InvalidArgument(format!(
                "{} depths for {} patches",
                self.inv_depths.len(),
                self.patches.len()
            )));
        }
        if self.fixed_poses.is_empty() {
            return Err(Error::InvalidArgument("gauge needs at least one fixed pose".into()));
        }
        if let Some(i) = self.fixed_poses.iter().find(|&&i| i >= self.poses.len()) {
            return Err(Error::InvalidArgument(format!("fixed pose {i} out of range")));
        }
        if let Some(i) = self.fixed_depths.iter().find(|&&i| i >= self.patches.len()) {
            return Err(Error::InvalidArgument(format!("fixed depth {i} out of range")));
        }
        if let Some((i, d)) = self.inv_depths.iter().enumerate().find(|(_, d)| !(**d > 0.0)) {
            return Err(Error::InvalidArgument(format!("inverse depth {i} = {d} must be positive")));
        }
        for p in &self.patches {
            if p.frame >= self.poses.len() {
                return Err(Error::InvalidArgument(format!("patch frame {} out of range", p.frame)));
            }
        }
        for (i, o) in self.observations.iter().enumerate() {
            let Some(p) = self.patches.get(o.patch) else {
                return Err(Error::InvalidArgument(format!("observation {i}: no patch {}", o.patch)));
            };
            if o.frame >= self.poses.len() || o.frame == p.frame {
                return Err(Error::InvalidArgument(format!(
                    "observation {i}: bad target frame {}",
                    o.frame
                )));
            }
            if !(o.weight >= 0.0 && o.weight.is_finite()) {
                return Err(Error::InvalidArgument(format!("observation {i}: bad weight {}", o.weight)));
            }
        }
        if !self.observations.iter().any(|o| o.weight > 0.0) {
            return Err(Error::InvalidArgument("no weighted observation".into()));
        }
        Ok(())
    }
}

fn project(intrinsics: &CameraIntrinsics, p: &Vector3<f64>) -> Vector2<f64> {
    Vector2::new(
        intrinsics.fx * p.x / p.z + intrinsics.cx,
        intrinsics.fy * p.y / p.z + intrinsics.cy,
    )
}

/// Predicted reprojection minus target, `None` behind the camera.
pub fn residual(
    obs: &Observation,
    patches: &[BaPatch],
    poses: &[Pose],
    inv_depths: &[f64],
    intrinsics: &CameraIntrinsics,
) -> Option<Vector2<f64>> {
    let patch = &patches[obs.patch];
    let p = reproject_homogeneous(
        patch.center,
        &poses[patch.frame],
        &poses[obs.frame],
        intrinsics,
        inv_depths[obs.patch],
    );
    (p.z > 0.0).then(|| project(intrinsics, &p) - obs.target)
}

/// Residual derivatives with respect to right-multiplied tangent
/// perturbations `[rho, phi]` of the source and target poses and the
/// patch inverse depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObservationJacobian {
    pub residual: Vector2<f64>,
    pub source: Matrix2x6<f64>,
    pub target: Matrix2x6<f64>,
    pub inv_depth: Vector2<f64>,
}

pub fn jacobians(
    obs: &Observation,
    patches: &[BaPatch],
    poses: &[Pose],
    inv_depths: &[f64],
    intrinsics: &CameraIntrinsics,
) -> Option<ObservationJacobian> {
    let patch = &patches[obs.patch];
    let (ts, tj) = (&poses[patch.frame], &poses[obs.frame]);
    let d = inv_depths[obs.patch];
    let rel = tj.inverse() * *ts;
    let r = rel.rotation_matrix();
    let b = intrinsics.bearing(patch.center);
    let p = r * b + rel.translation * d;
    if p.z <= 0.0 {
        return None;
    }
    let iz = 1.0 / p.z;
    let jp = Matrix2x3::new(
        intrinsics.fx * iz,
        0.0,
        -intrinsics.fx * p.x * iz * iz,
        0.0,
        intrinsics.fy * iz,
        -intrinsics.fy * p.y * iz * iz,
    );
    let mut dj = Matrix2x6::zeros();
    dj.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp * (-d * Matrix3::identity())));
    dj.fixed_view_mut::<2, 3>(0, 3).copy_from(&(jp * skew(&p)));
    let mut ds = Matrix2x6::zeros();
    ds.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp * (r * d)));
    ds.fixed_view_mut::<2, 3>(0, 3).copy_from(&(jp * (-r * skew(&b))));
    Some(ObservationJacobian {
        residual: project(intrinsics, &p) - obs.target,
        source: ds,
        target: dj,
        inv_depth: jp * rel.translation,
    })
}

/// Gauss-Newton system `H dx = b` split into pose and depth blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalEquations {
    pub h_pp: DMatrix<f64>,
    pub h_pd: DMatrix<f64>,
    /// Diagonal of the depth block: depths couple only through poses.
    pub h_dd: DVector<f64>,
    pub b_p: DVector<f64>,
    pub b_d: DVector<f64>,
}

impl NormalEquations {
    pub fn zeros(pose_dim: usize, depth_dim: usize) -> Self {
        Self {
            h_pp: DMatrix::zeros(pose_dim, pose_dim),
            h_pd: DMatrix::zeros(pose_dim, depth_dim),
            h_dd: DVector::zeros(depth_dim),
            b_p: DVector::zeros(pose_dim),
            b_d: DVector::zeros(depth_dim),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.b_p.len(), self.b_d.len())
    }

    /// Full matrix and right-hand side, poses first.
    pub fn dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let (np, nd) = self.dims();
        let mut h = DMatrix::zeros(np + nd, np + nd);
        h.view_mut((0, 0), (np, np)).copy_from(&self.h_pp);
        h.view_mut((0, np), (np, nd)).copy_from(&self.h_pd);
        h.view_mut((np, 0), (nd, np)).copy_from(&self.h_pd.transpose());
        for i in 0..nd {
            h[(np + i, np + i)] = self.h_dd[i];
        }
        let mut b = DVector::zeros(np + nd);
        b.rows_mut(0, np).copy_from(&self.b_p);
        b.rows_mut(np, nd).copy_from(&self.b_d);
        (h, b)
    }

    /// Adds `lambda * (H_ii + 1e-9 * mean(diag H))` to every diagonal entry.
    ///
    /// Both terms scale with `H`, so the damped step is invariant to a
    /// uniform rescaling of the observation weights.
    pub fn damped(&self, lambda: f64) -> Self {
        let (np, nd) = self.dims();
        let n = (np + nd).max(1) as f64;
        let mean = (self.h_pp.diagonal().sum() + self.h_dd.sum()) / n;
        let mut out = self.clone();
        for i in 0..np {
            out.h_pp[(i, i)] += lambda * (self.h_pp[(i, i)] + 1e-9 * mean);
        }
        for i in 0..nd {
            out.h_dd[i] += lambda * (self.h_dd[i] + 1e-9 * mean);
        }
        out
    }
}

/// Solves the system by eliminating depths, returning `(dx_pose, dx_depth)`.
///
/// Depths with a zero row are unobserved and receive a zero update. Any
/// other non-positive pivot, or a reduced system that is not positive
/// definite, is an error so the caller can escalate damping.
pub fn schur_solve(ne: &NormalEquations) -> Result<(DVector<f64>, DVector<f64>)> {
    let (np, nd) = ne.dims();
    let mut inv = DVector::zeros(nd);
    for i in 0..nd {
        let pivot = ne.h_dd[i];
        if pivot > 0.0 {
            inv[i] = 1.0 / pivot;
        } else if pivot == 0.0 && ne.b_d[i] == 0.0 && ne.h_pd.column(i).iter().all(|v| *v == 0.0) {
            inv[i] = 0.0;
        } else {
            return Err(Error::SolverFailure(format!("non-positive depth pivot {pivot} at {i}")));
        }
    }
    let dp = if np > 0 {
        let mut scaled = ne.h_pd.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= inv[j];
        }
        let s = &ne.h_pp - &scaled * ne.h_pd.transpose();
        let rhs = &ne.b_p - &scaled * &ne.b_d;
        let s = DMatrix::from_fn(np, np, |i, j| 0.5 * (s[(i, j)] + s[(j, i)]));
        let chol = s
            .cholesky()
            .ok_or_else(|| Error::SolverFailure("reduced pose system not positive definite".into()))?;
        chol.solve(&rhs)
    } else {
        DVector::zeros(0)
    };
    let dd = DVector::from_fn(nd, |i, _| {
        inv[i] * (ne.b_d[i] - ne.h_pd.column(i).dot(&dp))
    });
    Ok((dp, dd))
}

/// Per-iteration solver summary.
#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub max_pose_update: f64,
    pub converged: bool,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

impl SolveReport {
    /// One log line with a fixed field order.
    pub fn log_line(&self) -> String {
        format!(
            "ba iterations={} initial_cost={:.9e} final_cost={:.9e} max_pose_update={:.9e} converged={}",
            self.iterations, self.initial_cost, self.final_cost, self.max_pose_update, self.converged
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaSolution {
    pub poses: Vec<Pose>,
    pub inv_depths: Vec<f64>,
    pub report: SolveReport,
    /// Residual norm per observation at the solution, `None` behind camera.
    pub residual_norms: Vec<Option<f64>>,
}

fn huber_cost(sq: f64, delta: f64) -> f64 {
    if sq <= delta * delta {
        sq
    } else {
        2.0 * delta * sq.sqrt() - delta * delta
    }
}

struct Layout {
    pose_slot: Vec<Option<usize>>,
    depth_slot: Vec<Option<usize>>,
    pose_dim: usize,
    depth_dim: usize,
}

impl Layout {
    fn new(problem: &BaProblem) -> Self {
        let mut pose_slot = vec![None; problem.poses.len()];
        let mut next = 0;
        for (i, slot) in pose_slot.iter_mut().enumerate() {
            if !problem.fixed_poses.contains(&i) {
                *slot = Some(next);
                next += 6;
            }
        }
        let mut depth_slot = vec![None; problem.patches.len()];
        let mut nd = 0;
        for (i, slot) in depth_slot.iter_mut().enumerate() {
            if !problem.fixed_depths.contains(&i) {
                *slot = Some(nd);
                nd += 1;
            }
        }
        Self {
            pose_slot,
            depth_slot,
            pose_dim: next,
            depth_dim: nd,
        }
    }
}

/// Weighted robust cost and the number of observations behind a camera.
fn evaluate(problem: &BaProblem, poses: &[Pose], depths: &[f64], delta: f64) -> (f64, usize) {
    let mut cost = 0.0;
    let mut invalid = 0;
    for o in &problem.observations {
        if o.weight == 0.0 {
            continue;
        }
        match residual(o, &problem.patches, poses, depths, &problem.intrinsics) {
            Some(r) => cost += o.weight * huber_cost(r.norm_squared(), delta),
            None => invalid += 1,
        }
    }
    (cost, invalid)
}

/// Assembles the IRLS-weighted normal equations at the given state.
pub fn assemble(
    problem: &BaProblem,
    poses: &[Pose],
    depths: &[f64],
    huber_delta: f64,
) -> NormalEquations {
    let layout = Layout::new(problem);
    assemble_with(problem, &layout, poses, depths, huber_delta)
}

fn assemble_with(
    problem: &BaProblem,
    layout: &Layout,
    poses: &[Pose],
    depths: &[f64],
    delta: f64,
) -> NormalEquations {
    let mut ne = NormalEquations::zeros(layout.pose_dim, layout.depth_dim);
    for o in &problem.observations {
        if o.weight == 0.0 {
            continue;
        }
        let Some(jac) = jacobians(o, &problem.patches, poses, depths, &problem.intrinsics) else {
            continue;
        };
        let norm = jac.residual.norm();
        let robust = if norm <= delta { 1.0 } else { delta / norm };
        let w = o.weight * robust;
        let r = jac.residual;
        let blocks = [
            (layout.pose_slot[problem.patches[o.patch].frame], jac.source),
            (layout.pose_slot[o.frame], jac.target),
        ];
        for (sa, ja) in blocks.iter() {
            let Some(a) = sa else { continue };
            let g = ja.transpose() * r * w;
            for i in 0..6 {
                ne.b_p[a + i] -= g[i];
            }
            for (sb, jb) in blocks.iter() {
                let Some(b) = sb else { continue };
                let h = ja.transpose() * jb * w;
                for i in 0..6 {
                    for j in 0..6 {
                        ne.h_pp[(a + i, b + j)] += h[(i, j)];
                    }
                }
            }
        }
        if let Some(k) = layout.depth_slot[o.patch] {
            let jd = jac.inv_depth;
            ne.h_dd[k] += w * jd.norm_squared();
            ne.b_d[k] -= w * jd.dot(&r);
            for (sa, ja) in blocks.iter() {
                let Some(a) = sa else { continue };
                let c: Vector6<f64> = ja.transpose() * jd * w;
                for i in 0..6 {
                    ne.h_pd[(a + i, k)] += c[i];
                }
            }
        }
    }
    ne
}

fn apply(
    layout: &Layout,
    poses: &[Pose],
    depths: &[f64],
    dp: &DVector<f64>,
    dd: &DVector<f64>,
    min_depth: f64,
) -> (Vec<Pose>, Vec<f64>) {
    let new_poses = poses
        .iter()
        .zip(&layout.pose_slot)
        .map(|(p, slot)| match slot {
            Some(s) => p.retract(&Vector6::from_fn(|i, _| dp[s + i])),
            None => *p,
        })
        .collect();
    let new_depths = depths
        .iter()
        .zip(&layout.depth_slot)
        .map(|(d, slot)| match slot {
            Some(k) => (d + dd[*k]).max(min_depth),
            None => *d,
        })
        .collect();
    (new_poses, new_depths)
}

/// Minimizes `sum w * huber(|r|^2)` over free poses and depths.
///
/// Gauge poses and depths are never touched. If damping escalation cannot
/// produce a solvable system a solver failure is returned and the inputs are
/// left as they were.
pub fn solve(problem: &BaProblem, cfg: &BaConfig) -> Result<BaSolution> {
    cfg.validate()?;
    problem.validate()?;
    let layout = Layout::new(problem);
    let mut poses = problem.poses.clone();
    let mut depths = problem.inv_depths.clone();
    let (initial_cost, _) = evaluate(problem, &poses, &depths, cfg.huber_delta);
    let mut cost = initial_cost;
    let mut history = vec![cost];
    let mut lambda = cfg.initial_lambda;
    let mut converged = false;
    let mut max_pose_update: f64 = 0.0;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let ne = assemble_with(problem, &layout, &poses, &depths, cfg.huber_delta);
        let (_, invalid_now) = evaluate(problem, &poses, &depths, cfg.huber_delta);
        let mut escalations = 0;
        let mut step = None;
        let mut solved_once = false;
        loop {
            if let Ok((dp, dd)) = schur_solve(&ne.damped(lambda)) {
                {
                    solved_once = true;
                    let size = dp.amax().max(dd.amax());
                    if size < cfg.tolerance {
                        converged = true;
                        break;
                    }
                    let (cand_p, cand_d) =
                        apply(&layout, &poses, &depths, &dp, &dd, cfg.min_inv_depth);
                    let (cand_cost, invalid) = evaluate(problem, &cand_p, &cand_d, cfg.huber_delta);
                    if invalid <= invalid_now && cand_cost <= cost {
                        step = Some((cand_p, cand_d, cand_cost, dp.amax()));
                        lambda = (lambda / cfg.lambda_factor).max(1e-12);
                        break;
                    }
                }
            }
            escalations += 1;
            if escalations > cfg.max_escalations {
                break;
            }
            lambda *= cfg.lambda_factor;
        }
        if converged {
            break;
        }
        match step {
            Some((p, d, c, upd)) => {
                poses = p;
                depths = d;
                cost = c;
                history.push(c);
                max_pose_update = max_pose_update.max(upd);
            }
            None if !solved_once => {
                return Err(Error::SolverFailure(
                    "normal equations singular after damping escalation".into(),
                ));
            }
            // no descent direction left at this damping range
            None => {
                converged = true;
                break;
            }
        }
    }
    let residual_norms = problem
        .observations
        .iter()
        .map(|o| {
            residual(o, &problem.patches, &poses, &depths, &problem.intrinsics).map(|r| r.norm())
        })
        .collect();
    Ok(BaSolution {
        poses,
        inv_depths: depths,
        report: SolveReport {
            iterations,
            initial_cost,
            final_cost: cost,
            max_pose_update,
            converged,
            cost_history: history,
        },
        residual_norms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(60.0, 55.0, 31.5, 30.0, 64, 64).unwrap()
    }

    fn small_pose(rng: &mut ChaCha8Rng, s: f64) -> Pose {
        Pose::exp(&Vector6::from_fn(|_, _| rng.random_range(-s..s)))
    }

    /// Window looking at a cloud about 2 m ahead with exact targets.
    fn exact_problem(seed: u64, n_poses: usize, n_patches: usize) -> BaProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = intrinsics();
        let poses: Vec<Pose> = (0..n_poses)
            .map(|i| {
                let f = i as f64;
                Pose::new(
                    UnitQuaternion::from_euler_angles(0.01 * f, -0.02 * f, 0.015 * f),
                    Vector3::new(0.05 * f, -0.02 * f, 0.01 * f),
                )
            })
            .collect();
        let mut patches = Vec::new();
        let mut depths = Vec::new();
        for i in 0..n_patches {
            patches.push(BaPatch {
                frame: i % n_poses,
                center: Vector2::new(rng.random_range(8.0..56.0), rng.random_range(8.0..56.0)),
            });
            depths.push(1.0 / rng.random_range(1.5..3.0));
        }
        let mut observations = Vec::new();
        for (pi, p) in patches.iter().enumerate() {
            for j in 0..n_poses {
                if j == p.frame {
                    continue;
                }
                let q = crate::tracker::reproject(p.center, &poses[p.frame], &poses[j], &k, depths[pi])
                    .unwrap();
                observations.push(Observation { patch: pi, frame: j, target: q, weight: 1.0 });
            }
        }
        BaProblem {
            poses,
            inv_depths: depths,
            patches,
            observations,
            intrinsics: k,
            fixed_poses: vec![0],
            fixed_depths: vec![0],
        }
    }

    #[test]
    fn residual_sign_convention() {
        let k = intrinsics();
        let patches = [BaPatch { frame: 0, center: Vector2::new(31.5, 30.0) }];
        let poses = [Pose::identity(), Pose::identity()];
        let pred = Vector2::new(31.5, 30.0);
        let o = Observation { patch: 0, frame: 1, target: pred, weight: 1.0 };
        assert_eq!(residual(&o, &patches, &poses, &[0.5], &k).unwrap(), Vector2::zeros());
        let o = Observation { target: pred + Vector2::new(1.0, -2.0), ..o };
        let r = residual(&o, &patches, &poses, &[0.5], &k).unwrap();
        assert!((r - Vector2::new(-1.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn residual_matches_projection_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = intrinsics();
        for _ in 0..100 {
            let poses = [small_pose(&mut rng, 0.3), small_pose(&mut rng, 0.3)];
            let c = Vector2::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
            let d = rng.random_range(0.2..1.0);
            let target = Vector2::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
            // oracle: back-project to a world point, then world -> target camera
            let xs = Vector3::new((c.x - k.cx) / k.fx, (c.y - k.cy) / k.fy, 1.0) / d;
            let world = poses[0].rotation * xs + poses[0].translation;
            let xt = poses[1].rotation.inverse() * (world - poses[1].translation);
            if xt.z <= 0.0 {
                continue;
            }
            let expect = Vector2::new(k.fx * xt.x / xt.z + k.cx, k.fy * xt.y / xt.z + k.cy) - target;
            let o = Observation { patch: 0, frame: 1, target, weight: 1.0 };
            let r = residual(&o, &[BaPatch { frame: 0, center: c }], &poses, &[d], &k).unwrap();
            assert!((r - expect).norm() < 1e-10 * (1.0 + expect.norm()));
        }
    }

    #[test]
    fn behind_camera_residual_is_invalid() {
        let k = intrinsics();
        let poses = [Pose::identity(), Pose::from_translation(Vector3::new(0.0, 0.0, 5.0))];
        let o = Observation { patch: 0, frame: 1, target: Vector2::zeros(), weight: 1.0 };
        let patches = [BaPatch { frame: 0, center: Vector2::new(31.5, 30.0) }];
        assert!(residual(&o, &patches, &poses, &[0.5], &k).is_none());
    }

    #[test]
    fn zero_parallax_depth_jacobian_vanishes() {
        let k = intrinsics();
        let patches = [BaPatch { frame: 0, center: Vector2::new(20.0, 40.0) }];
        let rot = UnitQuaternion::from_euler_angles(0.05, 0.02, -0.03);
        let poses = [Pose::identity(), Pose::new(rot, Vector3::zeros())];
        let o = Observation { patch: 0, frame: 1, target: Vector2::zeros(), weight: 1.0 };
        let j = jacobians(&o, &patches, &poses, &[0.7], &k).unwrap();
        assert!(j.inv_depth.norm() < 1e-12);
        let poses = [Pose::identity(), Pose::new(rot, Vector3::new(1e-3, 0.0, 0.0))];
        let shrink = |d: f64| jacobians(&o, &patches, &poses, &[d], &k).unwrap().inv_depth.norm();
        assert!(shrink(1e-6) <= shrink(1e-3));
    }

    #[test]
    fn gauge_columns_are_absent() {
        let p = exact_problem(1, 3, 6);
        let ne = assemble(&p, &p.poses, &p.inv_depths, 2.0);
        assert_eq!(ne.dims(), (12, 5));
    }

    #[test]
    fn ground_truth_is_a_fixed_point() {
        let p = exact_problem(2, 4, 20);
        let sol = solve(&p, &BaConfig { max_iters: 5, ..Default::default() }).unwrap();
        assert!(sol.report.converged);
        assert_eq!(sol.report.iterations, 1);
        assert_eq!(sol.poses, p.poses);
        assert_eq!(sol.inv_depths, p.inv_depths);
    }

    #[test]
    fn single_pose_single_depth_matches_direct_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = DMatrix::from_fn(7, 7, |_, _| rng.random_range(-1.0..1.0));
        let h = &a * a.transpose() + DMatrix::identity(7, 7);
        // keep the depth block diagonal as in the solver's systems
        let ne = NormalEquations {
            h_pp: h.view((0, 0), (6, 6)).into_owned(),
            h_pd: h.view((0, 6), (6, 1)).into_owned(),
            h_dd: DVector::from_element(1, h[(6, 6)]),
            b_p: DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0)),
            b_d: DVector::from_element(1, 0.3),
        };
        let (hd, bd) = ne.dense();
        let direct = hd.lu().solve(&bd).unwrap();
        let (dp, dd) = schur_solve(&ne).unwrap();
        for i in 0..6 {
            assert!((dp[i] - direct[i]).abs() < 1e-10);
        }
        assert!((dd[0] - direct[6]).abs() < 1e-10);
    }

    #[test]
    fn decoupled_depths_have_closed_form() {
        let ne = NormalEquations {
            h_pp: DMatrix::identity(6, 6) * 2.0,
            h_pd: DMatrix::zeros(6, 3),
            h_dd: DVector::from_vec(vec![4.0, 0.5, 2.0]),
            b_p: DVector::from_element(6, 1.0),
            b_d: DVector::from_vec(vec![2.0, 1.0, -3.0]),
        };
        let (dp, dd) = schur_solve(&ne).unwrap();
        assert!(dp.iter().all(|v| (*v - 0.5).abs() < 1e-15));
        assert_eq!(dd.as_slice(), &[0.5, 2.0, -1.5]);
    }

    #[test]
    fn random_system_back_substitutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = exact_problem(5, 5, 30);
        let mut perturbed = p.poses.clone();
        for q in perturbed.iter_mut().skip(1) {
            *q = q.retract(&Vector6::from_fn(|_, _| rng.random_range(-0.01..0.01)));
        }
        let ne = assemble(&p, &perturbed, &p.inv_depths, 2.0);
        let (dp, dd) = schur_solve(&ne).unwrap();
        let (h, b) = ne.dense();
        let mut x = DVector::zeros(dp.len() + dd.len());
        x.rows_mut(0, dp.len()).copy_from(&dp);
        x.rows_mut(dp.len(), dd.len()).copy_from(&dd);
        let res = (&h * &x - &b).norm();
        assert!(res < 1e-10 * b.norm().max(1.0), "{res}");
    }

    #[test]
    fn zero_weight_observation_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = exact_problem(7, 4, 24);
        for q in p.poses.iter_mut().skip(1) {
            *q = q.retract(&Vector6::from_fn(|_, _| rng.random_range(-0.005..0.005)));
        }
        let cfg = BaConfig { max_iters: 5, ..Default::default() };
        let base = solve(&p, &cfg).unwrap();
        let mut with = p.clone();
        let mut extra = with.observations[3];
        extra.target += Vector2::new(25.0, -14.0);
        extra.weight = 0.0;
        with.observations.push(extra);
        let other = solve(&with, &cfg).unwrap();
        for (a, b) in base.poses.iter().zip(&other.poses) {
            assert!((a.translation - b.translation).norm() < 1e-9);
            assert!(a.rotation.angle_to(&b.rotation) < 1e-9);
        }
    }

    #[test]
    fn weight_scaling_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = exact_problem(9, 4, 24);
        for q in p.poses.iter_mut().skip(1) {
            *q = q.retract(&Vector6::from_fn(|_, _| rng.random_range(-0.01..0.01)));
        }
        for o in p.observations.iter_mut() {
            o.target += Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            o.weight = rng.random_range(0.1..1.0);
        }
        let cfg = BaConfig { max_iters: 4, ..Default::default() };
        let a = solve(&p, &cfg).unwrap();
        let mut scaled = p.clone();
        for o in scaled.observations.iter_mut() {
            o.weight *= 37.5;
        }
        let b = solve(&scaled, &cfg).unwrap();
        for (x, y) in a.poses.iter().zip(&b.poses) {
            assert!((x.translation - y.translation).norm() < 1e-9);
        }
        for (x, y) in a.inv_depths.iter().zip(&b.inv_depths) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn gauge_is_bit_identical_and_depths_clamped() {
        let mut p = exact_problem(10, 3, 12);
        for o in p.observations.iter_mut() {
            o.target += Vector2::new(3.0, -1.0);
        }
        let sol = solve(&p, &BaConfig { max_iters: 6, ..Default::default() }).unwrap();
        assert_eq!(sol.poses[0], p.poses[0]);
        assert_eq!(sol.inv_depths[0], p.inv_depths[0]);
        assert!(sol.inv_depths.iter().all(|d| *d >= 1e-4));
        let h = &sol.report.cost_history;
        assert!(h.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn report_line_has_fixed_fields() {
        let p = exact_problem(12, 3, 9);
        let line = solve(&p, &BaConfig::default()).unwrap().report.log_line();
        let keys: Vec<&str> = line
            .split_whitespace()
            .skip(1)
            .map(|kv| kv.split('=').next().unwrap())
            .collect();
        assert_eq!(keys, ["iterations", "initial_cost", "final_cost", "max_pose_update", "converged"]);
    }

    #[test]
    fn missing_gauge_is_rejected() {
        let mut p = exact_problem(13, 3, 6);
        p.fixed_poses.clear();
        assert!(matches!(solve(&p, &BaConfig::default()), Err(Error::InvalidArgument(_))));
    }
}
