//! Exact synthetic bundle-adjustment windows shared by the integration tests.
#![allow(dead_code)]

use eventvo::ba::{BaPatch, BaProblem, Observation};
use eventvo::tracker::reproject;
use eventvo::{CameraIntrinsics, Pose};
use nalgebra::{UnitQuaternion, Vector2, Vector3, Vector6};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FX: f64 = 48.0;
pub fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(FX, FX, 31.5, 31.5, 64, 64).unwrap()
}

/// Camera looking down at the z = 0 plane from height `h`.
pub fn down(x: f64, y: f64, h: f64, yaw: f64) -> Pose {
    let r = UnitQuaternion::from_euler_angles(std::f64::consts::PI, 0.0, yaw);
    Pose::new(r, Vector3::new(x, y, h))
}

/// Exact window: `n` poses on an arc, patches spread over the source frames,
/// one observation per in-image reprojection.
pub fn window(n: usize, patches: usize, rng: &mut ChaCha8Rng) -> (Vec<Pose>, Vec<f64>, BaProblem) {
    let k = intrinsics();
    let poses: Vec<Pose> = (0..n)
        .map(|i| {
            let s = i as f64;
            down(0.04 * s, 0.01 * s * s, 1.0 + 0.02 * s, 0.02 * s)
        })
        .collect();
    let mut bps = Vec::new();
    let mut depths = Vec::new();
    for p in 0..patches {
        let frame = p % n;
        let c = Vector2::new(rng.random_range(8.0..56.0), rng.random_range(8.0..56.0));
        // ray hits the plane z = 0
        let pose = poses[frame];
        let dir = pose.rotation * k.bearing(c);
        let lambda = -pose.translation.z / dir.z;
        bps.push(BaPatch { frame, center: c });
        depths.push(1.0 / lambda);
    }
    let mut obs = Vec::new();
    for (i, bp) in bps.iter().enumerate() {
        for (j, tgt) in poses.iter().enumerate() {
            if j == bp.frame {
                continue;
            }
            if let Some(t) = reproject(bp.center, &poses[bp.frame], tgt, &k, depths[i]) {
                if k.contains(t, 0.0) {
                    obs.push(Observation { patch: i, frame: j, target: t, weight: 1.0 });
                }
            }
        }
    }
    let problem = BaProblem {
        poses: poses.clone(),
        inv_depths: depths.clone(),
        patches: bps,
        observations: obs,
        intrinsics: k,
        fixed_poses: vec![0],
        fixed_depths: vec![0],
    };
    (poses, depths, problem)
}

pub fn perturb(p: &Pose, rng: &mut ChaCha8Rng, deg: f64, meters: f64) -> Pose {
    let unit = |rng: &mut ChaCha8Rng| {
        Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            .normalize()
    };
    let w = unit(rng) * deg.to_radians();
    let t = unit(rng) * meters;
    let mut xi = Vector6::zeros();
    xi.fixed_rows_mut::<3>(3).copy_from(&w);
    let rotated = p.retract(&xi);
    Pose::new(rotated.rotation, rotated.translation + t)
}

pub fn pose_errors(a: &Pose, b: &Pose) -> (f64, f64) {
    let d = a.inverse() * *b;
    (d.angle().to_degrees(), (a.translation - b.translation).norm())
}

