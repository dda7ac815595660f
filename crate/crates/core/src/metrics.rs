//! Trajectory association, similarity alignment and error metrics.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

pub const DEFAULT_MAX_DT: f64 = 0.01;
/// Sub-trajectory lengths as fractions of the total path length.
pub const MPE_FRACTIONS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
/// Shortest path for which the drift metric is reported, in meters.
pub const MPE_MIN_PATH: f64 = 1.0;

/// Greedy nearest-timestamp matching; pairs are `(est_index, gt_index)` in
/// increasing estimate order. Candidate pairs are taken by increasing time
/// gap, ties by index, and each pose is used at most once.
pub fn associate(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> Result<Vec<(usize, usize)>> {
    if est.is_empty() || gt.is_empty() {
        return Err(Error::Association("empty trajectory".into()));
    }
    let ts_gt = gt.timestamps();
    let mut candidates = Vec::new();
    for (i, (t, _)) in est.samples.iter().enumerate() {
        // gt timestamps are sorted, so only a window around t can match
        let lo = ts_gt.partition_point(|g| *g < t - max_dt);
        let hi = ts_gt.partition_point(|g| *g <= t + max_dt);
        for (j, g) in ts_gt.iter().enumerate().take(hi).skip(lo) {
            candidates.push(((t - g).abs(), i, j));
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_e = vec![false; est.len()];
    let mut used_g = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_e[i] && !used_g[j] {
            used_e[i] = true;
            used_g[j] = true;
            pairs.push((i, j));
        }
    }
    if pairs.len() < 2 {
        return Err(Error::Association(format!(
            "only {} pose pairs within {max_dt} s",
            pairs.len()
        )));
    }
    pairs.sort();
    Ok(pairs)
}

/// Similarity `x -> s R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Sim3 {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }
}

/// Closed-form least-squares similarity mapping `est` onto `gt`.
pub fn umeyama_sim3(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<Sim3> {
    if est.len() != gt.len() {
        return Err(Error::Alignment(format!("{} vs {} points", est.len(), gt.len())));
    }
    let n = est.len();
    if n < 3 {
        return Err(Error::Alignment(format!("{n} point pairs, need at least 3")));
    }
    let nf = n as f64;
    let mu_e = est.iter().sum::<Vector3<f64>>() / nf;
    let mu_g = gt.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut var_e = 0.0;
    for (e, g) in est.iter().zip(gt) {
        let (de, dg) = (e - mu_e, g - mu_g);
        cov += dg * de.transpose();
        var_e += de.norm_squared();
    }
    cov /= nf;
    var_e /= nf;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sv: Vec<(f64, usize)> = svd.singular_values.iter().copied().zip(0..3).collect();
    sv.sort_by(|a, b| b.0.total_cmp(&a.0));
    if !(var_e > 0.0) || sv[1].0 <= 1e-12 * sv[0].0.max(f64::MIN_POSITIVE) {
        return Err(Error::Alignment("degenerate or collinear point configuration".into()));
    }
    let mut s = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        // flip the axis with the smallest singular value
        s[(sv[2].1, sv[2].1)] = -1.0;
    }
    let r = u * s * vt;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * s[(i, i)]).sum();
    let scale = trace / var_e;
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let translation = mu_g - rotation * mu_e * scale;
    Ok(Sim3 {
        scale,
        rotation,
        translation,
    })
}

/// RMSE of aligned position errors, in centimeters.
pub fn ate_cm(est: &[Vector3<f64>], gt: &[Vector3<f64>], align: &Sim3) -> f64 {
    let sq: f64 = est
        .iter()
        .zip(gt)
        .map(|(e, g)| (g - align.apply(e)).norm_squared())
        .sum();
    100.0 * (sq / est.len() as f64).sqrt()
}

/// RMSE of geodesic angles between aligned and reference orientations, in
/// degrees.
pub fn r_rmse_deg(est: &[UnitQuaternion<f64>], gt: &[UnitQuaternion<f64>], align: &Sim3) -> f64 {
    let sq: f64 = est
        .iter()
        .zip(gt)
        .map(|(e, g)| (align.rotation * e).angle_to(g).powi(2))
        .sum();
    (sq / est.len() as f64).sqrt().to_degrees()
}

/// Mean sub-trajectory drift in percent per meter over aligned positions.
///
/// For every start sample and every length `L` in [`MPE_FRACTIONS`] of the
/// reference path, the segment ends at the first sample whose reference arc
/// length from the start reaches `L`; the endpoint displacement error divided
/// by `L` contributes one term. `None` when the path is shorter than
/// [`MPE_MIN_PATH`] or no segment fits.
pub fn mpe_pct(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Option<f64> {
    let mut arc = vec![0.0; gt.len()];
    for i in 1..gt.len() {
        arc[i] = arc[i - 1] + (gt[i] - gt[i - 1]).norm();
    }
    let total = *arc.last()?;
    if total < MPE_MIN_PATH {
        return None;
    }
    let slack = 1e-9 * total;
    let mut sum = 0.0;
    let mut count = 0usize;
    for frac in MPE_FRACTIONS {
        let len = frac * total;
        for i in 0..gt.len() {
            let j = i + arc[i..].partition_point(|a| a - arc[i] < len - slack);
            if j >= gt.len() {
                break;
            }
            let err = ((est[j] - est[i]) - (gt[j] - gt[i])).norm();
            sum += err / len;
            count += 1;
        }
    }
    (count > 0).then(|| 100.0 * sum / count as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub ate_cm: f64,
    pub r_rmse_deg: f64,
    /// `None` when the reference path is too short.
    pub mpe_pct_per_m: Option<f64>,
    pub matched_pairs: usize,
    pub alignment: Sim3,
    pub path_length_m: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str =
        "ate_cm,r_rmse_deg,mpe_pct_per_m,matched_pairs,scale,path_length_m";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{},{},{:.9},{:.6}",
            self.ate_cm,
            self.r_rmse_deg,
            self.mpe_pct_per_m.map_or("nan".to_string(), |v| format!("{v:.6}")),
            self.matched_pairs,
            self.alignment.scale,
            self.path_length_m
        )
    }

    /// Two-column aligned text table.
    pub fn table(&self) -> String {
        let mpe = self.mpe_pct_per_m.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let rows = [
            ("ATE [cm]", format!("{:.4}", self.ate_cm)),
            ("R_rmse [deg]", format!("{:.4}", self.r_rmse_deg)),
            ("MPE [%/m]", mpe),
            ("matched pairs", self.matched_pairs.to_string()),
            ("scale", format!("{:.6}", self.alignment.scale)),
            ("path length [m]", format!("{:.4}", self.path_length_m)),
        ];
        rows.iter()
            .map(|(k, v)| format!("{k:<16} {v:>12}\n"))
            .collect()
    }
}

/// Associates, aligns once by similarity and evaluates all metrics.
pub fn evaluate(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> Result<MetricReport> {
    let pairs = associate(est, gt, max_dt)?;
    let e: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| est.samples[i].1.translation).collect();
    let g: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| gt.samples[j].1.translation).collect();
    let align = umeyama_sim3(&e, &g)?;
    let qe: Vec<_> = pairs.iter().map(|&(i, _)| est.samples[i].1.rotation).collect();
    let qg: Vec<_> = pairs.iter().map(|&(_, j)| gt.samples[j].1.rotation).collect();
    let aligned: Vec<Vector3<f64>> = e.iter().map(|p| align.apply(p)).collect();
    let path_length_m = g.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    Ok(MetricReport {
        ate_cm: ate_cm(&e, &g, &align),
        r_rmse_deg: r_rmse_deg(&qe, &qg, &align),
        mpe_pct_per_m: mpe_pct(&aligned, &g),
        matched_pairs: pairs.len(),
        alignment: align,
        path_length_m,
    })
}

/// Median of finite values; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::Pose;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn traj(ts: &[f64]) -> Trajectory {
        Trajectory::new(
            ts.iter()
                .map(|&t| (t, Pose::from_translation(Vector3::new(t, t * t, 0.0))))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn association_cases() {
        let ts = [0.0, 0.1, 0.2, 0.3];
        let pairs = associate(&traj(&ts), &traj(&ts), 0.01).unwrap();
        assert_eq!(pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        let shifted: Vec<f64> = ts.iter().map(|t| t + 0.002).collect();
        assert_eq!(associate(&traj(&shifted), &traj(&ts), 0.01).unwrap().len(), 4);
        let far: Vec<f64> = ts.iter().map(|t| t + 10.0).collect();
        assert!(matches!(
            associate(&traj(&far), &traj(&ts), 0.01),
            Err(Error::Association(_))
        ));
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)))
            .collect()
    }

    #[test]
    fn identical_points_align_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = cloud(&mut rng, 10);
        let s = umeyama_sim3(&p, &p).unwrap();
        assert!((s.scale - 1.0).abs() < 1e-12);
        assert!(s.rotation.angle() < 1e-9);
        assert!(s.translation.norm() < 1e-12);
    }

    #[test]
    fn half_scaled_rotated_estimate_gives_scale_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = cloud(&mut rng, 12);
        let rz = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
        let e: Vec<_> = g.iter().map(|p| rz * p * 0.5).collect();
        let s = umeyama_sim3(&e, &g).unwrap();
        assert!((s.scale - 2.0).abs() < 1e-12);
        assert!(s.rotation.angle_to(&rz.inverse()) < 1e-9);
    }

    #[test]
    fn random_similarity_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let e = cloud(&mut rng, 30);
            let truth = Sim3 {
                scale: rng.random_range(0.2..5.0),
                rotation: UnitQuaternion::from_scaled_axis(Vector3::from_fn(|_, _| {
                    rng.random_range(-2.0..2.0)
                })),
                translation: Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)),
            };
            let g: Vec<_> = e
                .iter()
                .map(|p| truth.apply(p) + Vector3::from_fn(|_, _| rng.random_range(-1e-9..1e-9)))
                .collect();
            let s = umeyama_sim3(&e, &g).unwrap();
            assert!((s.scale - truth.scale).abs() < 1e-6);
            assert!(s.rotation.angle_to(&truth.rotation) < 1e-6);
            assert!((s.translation - truth.translation).norm() < 1e-6);
        }
    }

    #[test]
    fn collinear_points_fail() {
        let e: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(umeyama_sim3(&e, &e), Err(Error::Alignment(_))));
    }

    #[test]
    fn two_point_ate_construction() {
        let g = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)];
        let e = [Vector3::new(0.0, 0.01, 0.0), Vector3::new(1.0, -0.01, 0.0)];
        assert!((ate_cm(&e, &g, &Sim3::identity()) - 1.0).abs() < 1e-12);
        assert_eq!(ate_cm(&g, &g, &Sim3::identity()), 0.0);
    }

    #[test]
    fn two_sample_rotation_construction() {
        let a = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 0.3);
        let d = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 10f64.to_radians());
        let gt = [a, a];
        let est = [a * d, a * d.inverse()];
        assert!((r_rmse_deg(&est, &gt, &Sim3::identity()) - 10.0).abs() < 1e-9);
        assert_eq!(r_rmse_deg(&gt, &gt, &Sim3::identity()), 0.0);
    }

    #[test]
    fn uniform_drift_of_one_percent() {
        let gt: Vec<_> = (0..=40).map(|i| Vector3::new(0.05 * i as f64, 0.0, 0.0)).collect();
        let est: Vec<_> = gt.iter().map(|p| p + Vector3::new(0.0, 0.01 * p.x, 0.0)).collect();
        assert!((mpe_pct(&est, &gt).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(mpe_pct(&gt, &gt).unwrap(), 0.0);
        let short: Vec<_> = gt.iter().map(|p| p * 0.1).collect();
        assert!(mpe_pct(&short, &short).is_none());
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[7.0]), Some(7.0));
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0, 100.0]), Some(3.0));
        assert_eq!(median(&[]), None);
    }
}
