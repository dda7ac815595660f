use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{FrameSequence, Image};
use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::pose::Pose;
use crate::trajectory::Trajectory;

/// Tileable grayscale texture mapped onto a plane, `texel` meters per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub image: Image,
    pub texel: f64,
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Periodic value noise on a `cells x cells` lattice, sampled at `size x size`.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f64> {
    let lattice: Vec<f64> = (0..cells * cells).map(|_| rng.random::<f64>()).collect();
    let mut out = vec![0.0; size * size];
    let step = cells as f64 / size as f64;
    for y in 0..size {
        let gy = y as f64 * step;
        let (y0, fy) = (gy.floor() as usize % cells, smoothstep(gy.fract()));
        let y1 = (y0 + 1) % cells;
        for x in 0..size {
            let gx = x as f64 * step;
            let (x0, fx) = (gx.floor() as usize % cells, smoothstep(gx.fract()));
            let x1 = (x0 + 1) % cells;
            let a = lattice[y0 * cells + x0] * (1.0 - fx) + lattice[y0 * cells + x1] * fx;
            let b = lattice[y1 * cells + x0] * (1.0 - fx) + lattice[y1 * cells + x1] * fx;
            out[y * size + x] = a * (1.0 - fy) + b * fy;
        }
    }
    out
}

impl Texture {
    pub fn new(image: Image, texel: f64) -> Result<Self> {
        if !(texel > 0.0) || image.width < 2 || image.height < 2 {
            return Err(Error::InvalidArgument(
                "texture needs a positive texel size and at least 2x2 samples".into(),
            ));
        }
        Ok(Self { image, texel })
    }

    /// Seeded multi-octave value-noise texture.
    ///
    /// `coverage` in (0, 1] controls how much of the plane carries texture; the
    /// rest is flat mid-gray and produces no events. `sharpness` > 1 steepens
    /// the detail layer towards a two-tone pattern with crisp edges.
    pub fn procedural(
        seed: u64,
        size: usize,
        texel: f64,
        contrast: f64,
        coverage: f64,
        sharpness: f64,
    ) -> Result<Self> {
        if size < 16 || !size.is_multiple_of(16) {
            return Err(Error::InvalidArgument(
                "procedural texture size must be a positive multiple of 16".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // fine octaves dominate so edges stay sharp enough to track
        let octaves = [(size / 16, 0.15), (size / 8, 0.3), (size / 4, 0.55)];
        let mut detail = vec![0.0; size * size];
        for (cells, amp) in octaves {
            for (d, n) in detail.iter_mut().zip(value_noise(&mut rng, size, cells.max(2))) {
                *d += amp * n;
            }
        }
        // contrast-stretch the detail layer to [0, 1]
        let (lo, hi) = detail
            .iter()
            .fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        let span = (hi - lo).max(1e-12);
        let mask = value_noise(&mut rng, size, (size / 64).max(2));
        let coverage = coverage.clamp(0.0, 1.0);
        let data = detail
            .iter()
            .zip(&mask)
            .map(|(d, m)| {
                let d = (0.5 + sharpness * ((d - lo) / span - 0.5)).clamp(0.0, 1.0);
                let weight = if coverage >= 1.0 {
                    1.0
                } else {
                    smoothstep(((m - (1.0 - coverage)) * 6.0 + 0.5).clamp(0.0, 1.0))
                };
                (0.5 + contrast * weight * (d - 0.5)).clamp(0.0, 1.0)
            })
            .collect();
        Texture::new(Image::new(size, size, data)?, texel)
    }

    /// Bilinear lookup at plane coordinates (meters), wrapping at the borders.
    pub fn sample(&self, p: Vector2<f64>) -> f64 {
        let (w, h) = (self.image.width, self.image.height);
        let u = (p.x / self.texel).rem_euclid(w as f64);
        let v = (p.y / self.texel).rem_euclid(h as f64);
        let (x0, y0) = (u.floor() as usize % w, v.floor() as usize % h);
        let (x1, y1) = ((x0 + 1) % w, (y0 + 1) % h);
        let (fx, fy) = (u.fract(), v.fract());
        let a = self.image.get(x0, y0) * (1.0 - fx) + self.image.get(x1, y0) * fx;
        let b = self.image.get(x0, y1) * (1.0 - fx) + self.image.get(x1, y1) * fx;
        a * (1.0 - fy) + b * fy
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaneGeometry {
    /// Plane-to-world pose; the plane is the local `z = 0` surface.
    pub pose: Pose,
    pub texture: Texture,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Landmark {
    pub position: Vector3<f64>,
    pub albedo: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SceneGeometry {
    Plane(PlaneGeometry),
    Landmarks {
        points: Vec<Landmark>,
        splat_radius: f64,
        background: f64,
    },
}

/// Smooth camera path through timestamped control poses.
///
/// Translation follows a Catmull-Rom spline and rotation is slerped per
/// segment, so control poses are reproduced exactly at their timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineTrajectory {
    pub controls: Vec<(i64, Pose)>,
}

impl SplineTrajectory {
    pub fn new(controls: Vec<(i64, Pose)>) -> Result<Self> {
        if controls.len() < 2 {
            return Err(Error::InvalidArgument(
                "trajectory needs at least 2 control poses".into(),
            ));
        }
        if controls.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidArgument(
                "control timestamps must be strictly increasing".into(),
            ));
        }
        Ok(Self { controls })
    }

    pub fn start(&self) -> i64 {
        self.controls[0].0
    }

    pub fn end(&self) -> i64 {
        self.controls[self.controls.len() - 1].0
    }

    pub fn pose_at(&self, t: i64) -> Result<Pose> {
        if t < self.start() || t > self.end() {
            return Err(Error::InvalidArgument(format!(
                "t={t} outside trajectory span [{}, {}]",
                self.start(),
                self.end()
            )));
        }
        let n = self.controls.len();
        let i = self
            .controls
            .partition_point(|c| c.0 <= t)
            .saturating_sub(1)
            .min(n - 2);
        let (ta, a) = self.controls[i];
        let (tb, b) = self.controls[i + 1];
        if t == ta {
            return Ok(a);
        }
        if t == tb {
            return Ok(b);
        }
        let s = (t - ta) as f64 / (tb - ta) as f64;
        let p0 = self.controls[i.saturating_sub(1)].1.translation;
        let p3 = self.controls[(i + 2).min(n - 1)].1.translation;
        let (p1, p2) = (a.translation, b.translation);
        let (s2, s3) = (s * s, s * s * s);
        let translation = 0.5
            * ((2.0 * p1)
                + (-p0 + p2) * s
                + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * s2
                + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * s3);
        let rotation = a
            .rotation
            .try_slerp(&b.rotation, s, 1e-12)
            .unwrap_or(a.rotation);
        Ok(Pose::new(rotation, translation))
    }
}

/// Camera-to-world pose at `eye` looking at `target`, image y-axis along `-up`.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Pose {
    let z = (target - eye).normalize();
    let x = z.cross(&up).normalize();
    let y = z.cross(&x);
    let m = Matrix3::from_columns(&[x, y, z]);
    Pose::new(
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m)),
        eye,
    )
}

/// Control poses for a circular orbit above the `z = 0` plane.
///
/// The camera circles at `height` with `radius`, looking at the point on the
/// plane at `radius * inward` from the center so the optical axis tilts inward.
pub fn orbit_controls(
    radius: f64,
    height: f64,
    revolutions: f64,
    start_us: i64,
    duration_us: i64,
    count: usize,
    inward: f64,
) -> Vec<(i64, Pose)> {
    let count = count.max(2);
    (0..count)
        .map(|k| {
            let s = k as f64 / (count - 1) as f64;
            let theta = 2.0 * std::f64::consts::PI * revolutions * s;
            let (c, sn) = (theta.cos(), theta.sin());
            let eye = Vector3::new(radius * c, radius * sn, height);
            let target = Vector3::new(radius * inward * c, radius * inward * sn, 0.0);
            let tangent = Vector3::new(-sn, c, 0.0);
            let t = start_us + (duration_us as f64 * s).round() as i64;
            (t, look_at(eye, target, tangent))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub geometry: SceneGeometry,
    pub trajectory: SplineTrajectory,
    pub intrinsics: CameraIntrinsics,
}

/// Frames, per-frame inverse depth maps (0 where undefined) and poses.
#[derive(Clone, Debug)]
pub struct GroundTruthBundle {
    pub poses: Trajectory,
    pub inverse_depth_maps: Vec<Image>,
    pub frames: FrameSequence,
}

impl SyntheticScene {
    /// Renders one frame: intensity image, inverse depth map and camera pose.
    pub fn render_frame(&self, t: i64) -> Result<(Image, Image, Pose)> {
        let pose = self.trajectory.pose_at(t)?;
        let k = &self.intrinsics;
        let (w, h) = (k.width, k.height);
        let mut intensity = vec![0.0; w * h];
        let mut inv_depth = vec![0.0; w * h];
        match &self.geometry {
            SceneGeometry::Plane(plane) => {
                let normal = plane.pose.rotation * Vector3::z();
                let origin = plane.pose.translation;
                let to_plane = plane.pose.inverse();
                let rot = pose.rotation;
                for y in 0..h {
                    for x in 0..w {
                        let ray = k.bearing(Vector2::new(x as f64, y as f64));
                        let dir = rot * ray;
                        let denom = normal.dot(&dir);
                        let lambda = if denom.abs() > 1e-12 {
                            normal.dot(&(origin - pose.translation)) / denom
                        } else {
                            -1.0
                        };
                        if !(lambda > 0.0) {
                            return Err(Error::SceneValidity(format!(
                                "plane not in front of camera at pixel ({x}, {y}), t={t}"
                            )));
                        }
                        let hit = to_plane.transform_point(&(pose.translation + dir * lambda));
                        intensity[y * w + x] = plane.texture.sample(Vector2::new(hit.x, hit.y));
                        // bearing has unit z, so lambda is the camera-frame depth
                        inv_depth[y * w + x] = 1.0 / lambda;
                    }
                }
            }
            SceneGeometry::Landmarks {
                points,
                splat_radius,
                background,
            } => {
                intensity.fill(*background);
                let mut zbuf = vec![f64::INFINITY; w * h];
                let world_to_cam = pose.inverse();
                let r = splat_radius.max(0.5);
                for (i, lm) in points.iter().enumerate() {
                    let pc = world_to_cam.transform_point(&lm.position);
                    if pc.z <= 0.0 {
                        return Err(Error::SceneValidity(format!(
                            "landmark {i} behind camera at t={t}"
                        )));
                    }
                    let Some(px) = k.project(&pc) else { continue };
                    let (x0, x1) = ((px.x - r).ceil().max(0.0), (px.x + r).floor());
                    let (y0, y1) = ((px.y - r).ceil().max(0.0), (px.y + r).floor());
                    if x1 < 0.0 || y1 < 0.0 {
                        continue;
                    }
                    for yy in y0 as usize..=(y1 as usize).min(h.saturating_sub(1)) {
                        for xx in x0 as usize..=(x1 as usize).min(w.saturating_sub(1)) {
                            let d2 = (xx as f64 - px.x).powi(2) + (yy as f64 - px.y).powi(2);
                            let idx = yy * w + xx;
                            if d2 <= r * r && pc.z < zbuf[idx] {
                                zbuf[idx] = pc.z;
                                intensity[idx] = lm.albedo.clamp(0.0, 1.0);
                                inv_depth[idx] = 1.0 / pc.z;
                            }
                        }
                    }
                }
            }
        }
        Ok((
            Image::new(w, h, intensity)?,
            Image::new(w, h, inv_depth)?,
            pose,
        ))
    }
}

/// Renders frames, inverse depth maps and poses at the given timestamps.
pub fn render_scene(scene: &SyntheticScene, timestamps: &[i64]) -> Result<GroundTruthBundle> {
    scene.intrinsics.validate()?;
    let rendered: Vec<(Image, Image, Pose)> = timestamps
        .par_iter()
        .map(|&t| scene.render_frame(t))
        .collect::<Result<_>>()?;
    let mut frames = Vec::with_capacity(rendered.len());
    let mut depths = Vec::with_capacity(rendered.len());
    let mut poses = Vec::with_capacity(rendered.len());
    for (&t, (img, depth, pose)) in timestamps.iter().zip(rendered) {
        frames.push(img);
        depths.push(depth);
        poses.push((t as f64 * 1e-6, pose));
    }
    Ok(GroundTruthBundle {
        poses: Trajectory::new(poses)?,
        inverse_depth_maps: depths,
        frames: FrameSequence {
            frames,
            timestamps: timestamps.to_vec(),
        },
    })
}
