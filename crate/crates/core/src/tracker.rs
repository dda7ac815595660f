//! Patch lifecycle, the patch graph and the deterministic flow engine.
//!
//! Frames are identified by their grid index. Patches are 3x3 lattices around
//! an input-resolution center with one scalar inverse depth. Edges connect a
//! patch to the in-window frames it is tracked in and carry the current flow
//! target together with a confidence in `(0, 1]`.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::event::{VoxelGrid, NUM_BINS};
use crate::pose::Pose;
use crate::sampler::PatchCoordinates;
use crate::sim::Image;

/// Inverse depth given to patches spawned into an empty window.
pub const DEFAULT_INV_DEPTH: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// Spacing of the 3x3 patch lattice in input pixels.
    pub patch_stride: f64,
    /// Gaussian blur applied to voxel channels before alignment.
    pub blur_sigma: f64,
    /// Blur of an optional coarse level aligned before the fine one; 0 disables.
    pub coarse_blur_sigma: f64,
    pub max_inner_iters: usize,
    pub min_step: f64,
    /// Ridge added to the 2x2 alignment Hessian as a fraction of its mean
    /// eigenvalue; keeps steps along edges from running off.
    pub lk_damping: f64,
    /// Per-sample noise scale in the confidence `exp(-SSD / (45 sigma^2))`.
    pub sigma: f64,
    pub omega_floor: f64,
    /// Maximum window-position distance between a patch's frame and a target.
    pub edge_radius: usize,
    pub window_capacity: usize,
    pub refine_rounds: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            patch_stride: 2.0,
            blur_sigma: 1.5,
            coarse_blur_sigma: 0.0,
            max_inner_iters: 8,
            min_step: 0.01,
            lk_damping: 0.0,
            sigma: 0.5,
            omega_floor: 1e-4,
            edge_radius: 10,
            window_capacity: 10,
            refine_rounds: 12,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_stride", self.patch_stride),
            ("sigma", self.sigma),
            ("min_step", self.min_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.blur_sigma >= 0.0 && self.coarse_blur_sigma >= 0.0 && self.lk_damping >= 0.0) {
            return Err(Error::InvalidArgument(
                "blur sigmas and lk_damping must be non-negative".into(),
            ));
        }
        if !(self.omega_floor > 0.0 && self.omega_floor < 1.0) {
            return Err(Error::InvalidArgument("omega_floor must lie in (0, 1)".into()));
        }
        if self.window_capacity < 2 {
            return Err(Error::InvalidArgument("window_capacity must be at least 2".into()));
        }
        Ok(())
    }
}

/// Blurred five-channel voxel features at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub width: usize,
    pub height: usize,
    /// Channel-major, like [`VoxelGrid::data`].
    pub data: Vec<f64>,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

impl FeatureGrid {
    pub fn from_voxel(grid: &VoxelGrid, blur_sigma: f64) -> Self {
        let (w, h) = (grid.width, grid.height);
        let kernel = gaussian_kernel(blur_sigma);
        let r = (kernel.len() / 2) as isize;
        let mut data = vec![0.0; grid.data.len()];
        let mut tmp = vec![0.0; w * h];
        for b in 0..grid.bins() {
            let src = grid.channel(b);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (i, k) in kernel.iter().enumerate() {
                        let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                        acc += k * src[y * w + xx];
                    }
                    tmp[y * w + x] = acc;
                }
            }
            let dst = &mut data[b * w * h..(b + 1) * w * h];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (i, k) in kernel.iter().enumerate() {
                        let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                        acc += k * tmp[yy * w + x];
                    }
                    dst[y * w + x] = acc;
                }
            }
        }
        Self {
            width: w,
            height: h,
            data,
        }
    }

    /// Bilinear lookup with edge clamping.
    pub fn sample(&self, c: usize, x: f64, y: f64) -> f64 {
        let (w, h) = (self.width, self.height);
        let x = x.clamp(0.0, (w - 1) as f64);
        let y = y.clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let ch = &self.data[c * w * h..(c + 1) * w * h];
        let top = ch[y0 * w + x0] * (1.0 - fx) + ch[y0 * w + x1] * fx;
        let bottom = ch[y1 * w + x0] * (1.0 - fx) + ch[y1 * w + x1] * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Whether a patch centered at `p` can be aligned. The lattice may
    /// overhang the border; lookups there clamp to the edge.
    pub fn supports(&self, p: Vector2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= (self.width - 1) as f64 && p.y <= (self.height - 1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Patch {
    pub id: usize,
    /// Grid index of the frame the patch was spawned in.
    pub source: usize,
    pub center: Vector2<f64>,
    pub inv_depth: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub patch: usize,
    /// Grid index of the target frame.
    pub target: usize,
    /// Current flow target: the patch center's matched position in the target.
    pub target_coord: Vector2<f64>,
    pub weight: f64,
    pub valid: bool,
}

impl Edge {
    pub fn flow(&self, patch: &Patch) -> Vector2<f64> {
        self.target_coord - patch.center
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PatchGraph {
    pub patches: Vec<Patch>,
    pub edges: Vec<Edge>,
    next_id: usize,
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Input-resolution center of a score-map coordinate's 4x4 block.
pub fn patch_center(x_sc: usize, y_sc: usize) -> Vector2<f64> {
    Vector2::new((4 * x_sc + 2) as f64, (4 * y_sc + 2) as f64)
}

impl PatchGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn patch(&self, id: usize) -> Option<&Patch> {
        self.patch_index(id).map(|i| &self.patches[i])
    }

    /// Patches are stored in increasing id order.
    pub fn patch_index(&self, id: usize) -> Option<usize> {
        self.patches.binary_search_by_key(&id, |p| p.id).ok()
    }

    /// Spawns one patch per coordinate in frame `t`. New inverse depths are
    /// the median over live patches, or [`DEFAULT_INV_DEPTH`] when none exist.
    pub fn spawn_patches(&mut self, t: usize, coords: &PatchCoordinates) -> Vec<usize> {
        let mut depths: Vec<f64> = self.patches.iter().map(|p| p.inv_depth).collect();
        let d = median(&mut depths).unwrap_or(DEFAULT_INV_DEPTH);
        coords
            .coords
            .iter()
            .map(|c| {
                let id = self.next_id;
                self.next_id += 1;
                self.patches.push(Patch {
                    id,
                    source: t,
                    center: patch_center(c.x, c.y),
                    inv_depth: d,
                });
                id
            })
            .collect()
    }

    /// Connects every patch to each window frame within `radius` window
    /// positions of its source. Existing edges keep their state; edges to
    /// frames outside the window or radius are removed.
    pub fn build_edges(&mut self, window: &[usize], radius: usize) {
        let pos: HashMap<usize, usize> = window.iter().enumerate().map(|(i, &f)| (f, i)).collect();
        let by_patch: HashMap<usize, usize> =
            self.patches.iter().map(|p| (p.id, p.source)).collect();
        let in_range = |patch: usize, target: usize| -> bool {
            let (Some(&src), Some(&tj)) = (by_patch.get(&patch), pos.get(&target)) else {
                return false;
            };
            match pos.get(&src) {
                Some(&si) => si != tj && si.abs_diff(tj) <= radius,
                None => false,
            }
        };
        self.edges.retain(|e| in_range(e.patch, e.target));
        let existing: std::collections::HashSet<(usize, usize)> =
            self.edges.iter().map(|e| (e.patch, e.target)).collect();
        for p in &self.patches {
            for &f in window {
                if in_range(p.id, f) && !existing.contains(&(p.id, f)) {
                    self.edges.push(Edge {
                        patch: p.id,
                        target: f,
                        target_coord: p.center,
                        weight: 1.0,
                        valid: false,
                    });
                }
            }
        }
        self.edges.sort_by_key(|e| (e.patch, e.target));
    }

    /// Removes a frame's patches and every edge touching it.
    pub fn remove_frame(&mut self, frame: usize) {
        self.patches.retain(|p| p.source != frame);
        let live: std::collections::HashSet<usize> = self.patches.iter().map(|p| p.id).collect();
        self.edges
            .retain(|e| e.target != frame && live.contains(&e.patch));
    }

    /// Checks that no edge dangles and every edge target is in the window.
    pub fn check_consistency(&self, window: &[usize]) -> Result<()> {
        for e in &self.edges {
            let p = self.patch(e.patch).ok_or_else(|| {
                Error::InvalidState(format!("edge references missing patch {}", e.patch))
            })?;
            if !window.contains(&e.target) || !window.contains(&p.source) {
                return Err(Error::InvalidState(format!(
                    "edge ({}, {}) leaves the window",
                    e.patch, e.target
                )));
            }
            if e.target == p.source {
                return Err(Error::InvalidState(format!("patch {} has a self edge", p.id)));
            }
            if !(e.weight > 0.0 && e.weight <= 1.0) {
                return Err(Error::InvalidState(format!("edge weight {} out of range", e.weight)));
            }
        }
        let cap = self.patches.len() * window.len().saturating_sub(1);
        if self.edges.len() > cap {
            return Err(Error::InvalidState(format!(
                "{} edges exceed patches x (window - 1) = {cap}",
                self.edges.len()
            )));
        }
        Ok(())
    }

    /// Writes `patch_id,grid_j,x,y,omega` rows.
    pub fn write_csv<W: Write>(&self, w: &mut W, header: bool) -> Result<()> {
        if header {
            writeln!(w, "patch_id,grid_j,x,y,omega")?;
        }
        for e in &self.edges {
            writeln!(
                w,
                "{},{},{},{},{}",
                e.patch, e.target, e.target_coord.x, e.target_coord.y, e.weight
            )?;
        }
        Ok(())
    }
}

/// Source-camera point `R_js b + t_js d` in the target camera, up to the
/// positive factor `1/d`.
pub fn reproject_homogeneous(
    center: Vector2<f64>,
    source: &Pose,
    target: &Pose,
    intrinsics: &CameraIntrinsics,
    inv_depth: f64,
) -> Vector3<f64> {
    let rel = target.inverse() * *source;
    let b = intrinsics.bearing(center);
    rel.rotation * b + rel.translation * inv_depth
}

/// Warps a source-frame pixel with inverse depth into the target frame.
///
/// Returns `None` when the point lands behind the target camera. Points
/// outside the sensor are returned as is.
pub fn reproject(
    center: Vector2<f64>,
    source: &Pose,
    target: &Pose,
    intrinsics: &CameraIntrinsics,
    inv_depth: f64,
) -> Option<Vector2<f64>> {
    let p = reproject_homogeneous(center, source, target, intrinsics, inv_depth);
    if p.z <= 0.0 {
        return None;
    }
    Some(Vector2::new(
        intrinsics.fx * p.x / p.z + intrinsics.cx,
        intrinsics.fy * p.y / p.z + intrinsics.cy,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowUpdate {
    /// Correction applied to the initial target coordinate.
    pub delta: Vector2<f64>,
    pub weight: f64,
    pub valid: bool,
    pub ssd: f64,
    pub iterations: usize,
}

const LATTICE: [(f64, f64); 9] = [
    (-1.0, -1.0),
    (0.0, -1.0),
    (1.0, -1.0),
    (-1.0, 0.0),
    (0.0, 0.0),
    (1.0, 0.0),
    (-1.0, 1.0),
    (0.0, 1.0),
    (1.0, 1.0),
];

fn patch_ssd(src_vals: &[f64], tgt: &FeatureGrid, p: Vector2<f64>, stride: f64) -> f64 {
    let mut ssd = 0.0;
    for c in 0..NUM_BINS {
        for (i, (ox, oy)) in LATTICE.iter().enumerate() {
            let e = tgt.sample(c, p.x + ox * stride, p.y + oy * stride) - src_vals[c * 9 + i];
            ssd += e * e;
        }
    }
    ssd
}

/// Translation-only inverse-compositional alignment of the source patch at
/// `center` against `target`, starting from `init`.
///
/// Accepted steps never increase the SSD: a step that would is halved up to
/// four times before the iteration stops.
pub fn flow_refine(
    source: &FeatureGrid,
    center: Vector2<f64>,
    target: &FeatureGrid,
    init: Vector2<f64>,
    cfg: &TrackerConfig,
) -> FlowUpdate {
    let s = cfg.patch_stride;
    let invalid = |ssd: f64| FlowUpdate {
        delta: Vector2::zeros(),
        weight: cfg.omega_floor,
        valid: false,
        ssd,
        iterations: 0,
    };
    if !source.supports(center) || !target.supports(init) {
        return invalid(f64::INFINITY);
    }
    let mut vals = [0.0; NUM_BINS * 9];
    let mut grads = [Vector2::zeros(); NUM_BINS * 9];
    let mut hess = Matrix2::zeros();
    for c in 0..NUM_BINS {
        for (i, (ox, oy)) in LATTICE.iter().enumerate() {
            let (x, y) = (center.x + ox * s, center.y + oy * s);
            vals[c * 9 + i] = source.sample(c, x, y);
            let g = Vector2::new(
                0.5 * (source.sample(c, x + 1.0, y) - source.sample(c, x - 1.0, y)),
                0.5 * (source.sample(c, x, y + 1.0) - source.sample(c, x, y - 1.0)),
            );
            grads[c * 9 + i] = g;
            hess += g * g.transpose();
        }
    }
    let mut p = init;
    let mut ssd = patch_ssd(&vals, target, p, s);
    let trace = hess.trace();
    let degenerate = !(trace > 1e-12) || hess.determinant() <= 1e-12 * trace * trace;
    let damped = hess + Matrix2::identity() * (0.5 * trace * cfg.lk_damping);
    let Some(hinv) = (!degenerate).then(|| damped.try_inverse()).flatten() else {
        return FlowUpdate {
            delta: Vector2::zeros(),
            weight: cfg.omega_floor,
            valid: true,
            ssd,
            iterations: 0,
        };
    };
    let mut iterations = 0;
    while iterations < cfg.max_inner_iters {
        iterations += 1;
        let mut rhs = Vector2::zeros();
        for c in 0..NUM_BINS {
            for (i, (ox, oy)) in LATTICE.iter().enumerate() {
                let e = target.sample(c, p.x + ox * s, p.y + oy * s) - vals[c * 9 + i];
                rhs += grads[c * 9 + i] * e;
            }
        }
        let mut step = hinv * rhs;
        let mut accepted = false;
        for _ in 0..5 {
            let cand = p - step;
            if !target.supports(cand) {
                return invalid(ssd);
            }
            let cand_ssd = patch_ssd(&vals, target, cand, s);
            if cand_ssd <= ssd {
                p = cand;
                ssd = cand_ssd;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted || step.norm() < cfg.min_step {
            break;
        }
    }
    let weight = (-ssd / (9.0 * NUM_BINS as f64 * cfg.sigma * cfg.sigma))
        .exp()
        .max(cfg.omega_floor);
    FlowUpdate {
        delta: p - init,
        weight,
        valid: true,
        ssd,
        iterations,
    }
}

/// Ground-truth flow per edge from poses and inverse depth maps keyed by grid
/// index. Edges whose patch sits on an undefined-depth pixel, or whose warp
/// lands behind the camera, yield `None`.
pub fn compute_gt_flow(
    graph: &PatchGraph,
    poses: &HashMap<usize, Pose>,
    inv_depth_maps: &HashMap<usize, Image>,
    intrinsics: &CameraIntrinsics,
) -> Result<Vec<Option<Vector2<f64>>>> {
    graph
        .edges
        .iter()
        .map(|e| {
            let p = graph
                .patch(e.patch)
                .ok_or_else(|| Error::InvalidState(format!("missing patch {}", e.patch)))?;
            let missing = |f: usize| Error::InvalidArgument(format!("no ground truth for grid {f}"));
            let src = poses.get(&p.source).ok_or_else(|| missing(p.source))?;
            let tgt = poses.get(&e.target).ok_or_else(|| missing(e.target))?;
            let map = inv_depth_maps.get(&p.source).ok_or_else(|| missing(p.source))?;
            let (x, y) = (p.center.x.round(), p.center.y.round());
            if x < 0.0 || y < 0.0 || x >= map.width as f64 || y >= map.height as f64 {
                return Ok(None);
            }
            let d = map.get(x as usize, y as usize);
            if !(d > 0.0) {
                return Ok(None);
            }
            Ok(reproject(p.center, src, tgt, intrinsics, d).map(|q| q - p.center))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyframeDecision {
    Keep,
    Drop,
}

/// Drops the newer keyframe when the mean flow magnitude is below the
/// threshold; a flow equal to the threshold is kept. No measurements keep.
pub fn keyframe_decision(flows: &[f64], threshold: f64) -> KeyframeDecision {
    if flows.is_empty() {
        return KeyframeDecision::Keep;
    }
    let mean = flows.iter().sum::<f64>() / flows.len() as f64;
    if mean < threshold {
        KeyframeDecision::Drop
    } else {
        KeyframeDecision::Keep
    }
}

/// Source of per-edge flow corrections. The pipeline calls `refine` once per
/// edge and round, starting from the current reprojection `init`.
pub trait FlowEngine: Sync {
    fn refine(&self, patch: &Patch, source: &Keyframe, target: &Keyframe, init: Vector2<f64>) -> FlowUpdate;
}

/// The default engine: translation-only patch alignment on blurred voxels.
#[derive(Clone, Copy, Debug)]
pub struct PatchAlignment(pub TrackerConfig);

impl FlowEngine for PatchAlignment {
    fn refine(&self, patch: &Patch, source: &Keyframe, target: &Keyframe, init: Vector2<f64>) -> FlowUpdate {
        let start = match (&source.coarse, &target.coarse) {
            (Some(s), Some(t)) => {
                let c = flow_refine(s, patch.center, t, init, &self.0);
                if c.valid { init + c.delta } else { init }
            }
            _ => init,
        };
        let mut u = flow_refine(&source.features, patch.center, &target.features, start, &self.0);
        u.delta += start - init;
        u
    }
}

/// One in-window frame.
#[derive(Clone, Debug)]
pub struct Keyframe {
    pub id: usize,
    pub pose: Pose,
    pub features: FeatureGrid,
    pub coarse: Option<FeatureGrid>,
}

impl Keyframe {
    /// Builds both feature levels from a normalized grid.
    pub fn new(id: usize, pose: Pose, grid: &VoxelGrid, cfg: &TrackerConfig) -> Self {
        let coarse = (cfg.coarse_blur_sigma > 0.0).then(|| FeatureGrid::from_voxel(grid, cfg.coarse_blur_sigma));
        Self {
            id,
            pose,
            features: FeatureGrid::from_voxel(grid, cfg.blur_sigma),
            coarse,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WindowState {
    /// Oldest first.
    pub frames: Vec<Keyframe>,
    pub capacity: usize,
    pub keyframe_threshold: f64,
}

impl WindowState {
    pub fn new(capacity: usize, keyframe_threshold: f64) -> Self {
        Self {
            frames: Vec::new(),
            capacity,
            keyframe_threshold,
        }
    }

    pub fn ids(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.id).collect()
    }

    pub fn position(&self, id: usize) -> Option<usize> {
        self.frames.iter().position(|f| f.id == id)
    }

    pub fn pose(&self, id: usize) -> Option<&Pose> {
        self.frames.iter().find(|f| f.id == id).map(|f| &f.pose)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() > self.capacity {
            return Err(Error::InvalidState(format!(
                "{} frames exceed capacity {}",
                self.frames.len(),
                self.capacity
            )));
        }
        for f in &self.frames {
            if (f.pose.rotation.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidState(format!("frame {} pose not normalized", f.id)));
            }
        }
        Ok(())
    }
}

/// Flow magnitudes induced by the current estimate between frames `a` and
/// `b`, over the patches of either frame that warp in front of the other.
pub fn mutual_flow(
    graph: &PatchGraph,
    window: &WindowState,
    a: usize,
    b: usize,
    intrinsics: &CameraIntrinsics,
) -> Vec<f64> {
    let (Some(pa), Some(pb)) = (window.pose(a), window.pose(b)) else {
        return Vec::new();
    };
    graph
        .patches
        .iter()
        .filter_map(|p| {
            let (src, tgt) = if p.source == a {
                (pa, pb)
            } else if p.source == b {
                (pb, pa)
            } else {
                return None;
            };
            reproject(p.center, src, tgt, intrinsics, p.inv_depth).map(|q| (q - p.center).norm())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::TimeWindow;
    use crate::sampler::{Cell, PatchCoord};
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(50.0, 50.0, 32.0, 32.0, 64, 64).unwrap()
    }

    fn coords(pts: &[(usize, usize)]) -> PatchCoordinates {
        PatchCoordinates {
            coords: pts.iter().map(|&(x, y)| PatchCoord { x, y, cell: 0 }).collect(),
            cells: vec![Cell { x0: 0, y0: 0, width: 16, height: 16 }],
        }
    }

    #[test]
    fn empty_window_spawns_default_depth() {
        let mut g = PatchGraph::new();
        let ids = g.spawn_patches(0, &coords(&[(1, 1), (5, 7)]));
        assert_eq!(ids, vec![0, 1]);
        assert!(g.patches.iter().all(|p| p.inv_depth == 0.5));
        assert_eq!(g.patches[1].center, Vector2::new(22.0, 30.0));
    }

    #[test]
    fn spawn_uses_window_median() {
        let mut g = PatchGraph::new();
        g.spawn_patches(0, &coords(&[(1, 1), (4, 4), (8, 8)]));
        for (p, d) in g.patches.iter_mut().zip([0.2, 0.8, 3.0]) {
            p.inv_depth = d;
        }
        g.spawn_patches(1, &coords(&[(2, 2)]));
        assert_eq!(g.patches[3].inv_depth, 0.8);
    }

    #[test]
    fn eighty_coordinates_give_eighty_distinct_patches() {
        let pts: Vec<(usize, usize)> = (0..80).map(|i| ((i % 10) * 3, (i / 10) * 3)).collect();
        let mut g = PatchGraph::new();
        g.spawn_patches(0, &coords(&pts));
        let mut centers: Vec<(i64, i64)> =
            g.patches.iter().map(|p| (p.center.x as i64, p.center.y as i64)).collect();
        centers.sort();
        centers.dedup();
        assert_eq!(centers.len(), 80);
    }

    #[test]
    fn identity_warp_is_identity() {
        let k = intrinsics();
        let t = Pose::exp(&nalgebra::Vector6::new(0.3, -0.2, 0.1, 0.05, 0.02, -0.1));
        let c = Vector2::new(10.5, 40.25);
        let q = reproject(c, &t, &t, &k, 0.7).unwrap();
        assert!((q - c).norm() < 1e-12);
    }

    #[test]
    fn forward_motion_scales_about_principal_point() {
        let k = intrinsics();
        let c = Vector2::new(42.0, 27.0);
        let (depth, dz) = (2.0, 0.5);
        let target = Pose::from_translation(Vector3::new(0.0, 0.0, dz));
        let q = reproject(c, &Pose::identity(), &target, &k, 1.0 / depth).unwrap();
        let factor = depth / (depth - dz);
        let expect = Vector2::new(32.0, 32.0) + (c - Vector2::new(32.0, 32.0)) * factor;
        assert!((q - expect).norm() < 1e-12);
    }

    #[test]
    fn roll_by_quarter_turn_rotates_pixels() {
        let k = intrinsics();
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
        let target = Pose::new(rot, Vector3::zeros());
        let q = reproject(Vector2::new(42.0, 32.0), &Pose::identity(), &target, &k, 1.0).unwrap();
        // the camera rolls +90 deg, so scene points rotate -90 deg in the image
        assert!((q - Vector2::new(32.0, 22.0)).norm() < 1e-9);
    }

    #[test]
    fn swapped_warp_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = intrinsics();
        for _ in 0..50 {
            let xi = |rng: &mut ChaCha8Rng| {
                nalgebra::Vector6::from_fn(|_, _| rng.random_range(-0.05..0.05))
            };
            let (a, b) = (Pose::exp(&xi(&mut rng)), Pose::exp(&xi(&mut rng)));
            let c = Vector2::new(rng.random_range(5.0..59.0), rng.random_range(5.0..59.0));
            let d = rng.random_range(0.2..2.0);
            let pb = reproject_homogeneous(c, &a, &b, &k, d);
            let q = reproject(c, &a, &b, &k, d).unwrap();
            // inverse depth in b is d / z_b for the homogeneous point (pb, d)
            let back = reproject(q, &b, &a, &k, d / pb.z).unwrap();
            assert!((back - c).norm() < 1e-9);
        }
    }

    #[test]
    fn behind_camera_is_signalled() {
        let k = intrinsics();
        let target = Pose::from_translation(Vector3::new(0.0, 0.0, 3.0));
        assert!(reproject(Vector2::new(32.0, 32.0), &Pose::identity(), &target, &k, 0.5).is_none());
    }

    fn graph_with(frames: &[usize]) -> PatchGraph {
        let mut g = PatchGraph::new();
        for &f in frames {
            g.spawn_patches(f, &coords(&[(3, 3)]));
        }
        g
    }

    #[test]
    fn edge_counts() {
        let mut g = graph_with(&[0]);
        g.build_edges(&[0], usize::MAX);
        assert!(g.edges.is_empty());

        let mut g = graph_with(&[0, 1, 2, 3]);
        g.build_edges(&[0, 1, 2, 3], usize::MAX);
        assert_eq!(g.edges.len(), 12);

        let mut g = graph_with(&[0, 1, 2, 3, 4]);
        g.build_edges(&[0, 1, 2, 3, 4], 1);
        // oracle: ordered pairs of positions at distance exactly one
        let oracle = (0..5usize)
            .flat_map(|i| (0..5usize).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && i.abs_diff(j) <= 1)
            .count();
        assert_eq!(g.edges.len(), oracle);
        g.check_consistency(&[0, 1, 2, 3, 4]).unwrap();
    }

    #[test]
    fn rebuild_preserves_state_and_prunes() {
        let mut g = graph_with(&[0, 1, 2]);
        g.build_edges(&[0, 1, 2], usize::MAX);
        g.edges[0].weight = 0.25;
        let kept = g.edges[0];
        g.remove_frame(0);
        g.build_edges(&[1, 2], usize::MAX);
        assert_eq!(g.edges.len(), 2);
        g.check_consistency(&[1, 2]).unwrap();
        if kept.patch != 0 && kept.target != 0 {
            assert!(g.edges.contains(&kept));
        }
        let mut g = graph_with(&[0, 1, 2]);
        g.build_edges(&[0, 1, 2], usize::MAX);
        let e = g.edges.iter().position(|e| e.patch == 1 && e.target == 2).unwrap();
        g.edges[e].weight = 0.5;
        g.build_edges(&[0, 1, 2], usize::MAX);
        let e = g.edges.iter().find(|e| e.patch == 1 && e.target == 2).unwrap();
        assert_eq!(e.weight, 0.5);
    }

    fn textured_grid(seed: u64, w: usize, h: usize) -> VoxelGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = VoxelGrid::zeros(w, h, TimeWindow::new(0, 1));
        for v in g.data.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        g
    }

    fn shifted(g: &VoxelGrid, dx: usize, dy: usize) -> VoxelGrid {
        let mut out = VoxelGrid::zeros(g.width, g.height, g.window);
        for b in 0..g.bins() {
            for y in 0..g.height {
                for x in 0..g.width {
                    let (sx, sy) = (x.saturating_sub(dx), y.saturating_sub(dy));
                    *out.get_mut(x, y, b) = g.get(sx, sy, b);
                }
            }
        }
        out
    }

    #[test]
    fn self_alignment_is_exact() {
        let cfg = TrackerConfig::default();
        let f = FeatureGrid::from_voxel(&textured_grid(1, 32, 32), cfg.blur_sigma);
        let c = Vector2::new(14.0, 18.0);
        let u = flow_refine(&f, c, &f, c, &cfg);
        assert!(u.valid);
        assert_eq!(u.delta, Vector2::zeros());
        assert!((u.weight - 1.0).abs() < 1e-12);
    }

    #[test]
    fn integer_shift_is_recovered() {
        let cfg = TrackerConfig::default();
        let src = textured_grid(2, 40, 40);
        let tgt = shifted(&src, 2, 1);
        let (fs, ft) = (
            FeatureGrid::from_voxel(&src, cfg.blur_sigma),
            FeatureGrid::from_voxel(&tgt, cfg.blur_sigma),
        );
        let c = Vector2::new(18.0, 20.0);
        let u = flow_refine(&fs, c, &ft, c, &cfg);
        assert!(u.valid);
        assert!((u.delta - Vector2::new(2.0, 1.0)).norm() < 0.1, "{:?}", u.delta);
    }

    #[test]
    fn structureless_patch_is_degenerate() {
        let cfg = TrackerConfig::default();
        let f = FeatureGrid::from_voxel(&VoxelGrid::zeros(16, 16, TimeWindow::new(0, 1)), 1.0);
        let c = Vector2::new(8.0, 8.0);
        let u = flow_refine(&f, c, &f, c + Vector2::new(1.0, 0.0), &cfg);
        assert_eq!(u.delta, Vector2::zeros());
        assert_eq!(u.weight, cfg.omega_floor);
    }

    #[test]
    fn leaving_bounds_invalidates() {
        let cfg = TrackerConfig::default();
        let f = FeatureGrid::from_voxel(&textured_grid(5, 16, 16), 1.0);
        let u = flow_refine(&f, Vector2::new(8.0, 8.0), &f, Vector2::new(15.5, 8.0), &cfg);
        assert!(!u.valid);
        assert_eq!(u.weight, cfg.omega_floor);
        // a center on the last pixel is still aligned with clamped lookups
        assert!(f.supports(Vector2::new(15.0, 15.0)));
        assert!(flow_refine(&f, Vector2::new(15.0, 8.0), &f, Vector2::new(15.0, 8.0), &cfg).valid);
    }

    #[test]
    fn ssd_never_increases() {
        let cfg = TrackerConfig { max_inner_iters: 1, ..Default::default() };
        let src = textured_grid(8, 40, 40);
        let tgt = shifted(&src, 1, 2);
        let (fs, ft) = (
            FeatureGrid::from_voxel(&src, 1.5),
            FeatureGrid::from_voxel(&tgt, 1.5),
        );
        let c = Vector2::new(20.0, 20.0);
        let mut p = c;
        let mut prev = f64::INFINITY;
        for _ in 0..10 {
            let u = flow_refine(&fs, c, &ft, p, &cfg);
            assert!(u.ssd <= prev + 1e-12);
            prev = u.ssd;
            p += u.delta;
        }
    }

    #[test]
    fn confidence_decreases_with_ssd() {
        let cfg = TrackerConfig::default();
        let src = textured_grid(9, 32, 32);
        let fs = FeatureGrid::from_voxel(&src, 1.5);
        let c = Vector2::new(16.0, 16.0);
        let mut last = (0.0, 1.0);
        for k in 1..6 {
            let mut noisy = src.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(k);
            for v in noisy.data.iter_mut() {
                *v += rng.random_range(-1.0..1.0) * 0.2 * k as f64;
            }
            let u = flow_refine(&fs, c, &FeatureGrid::from_voxel(&noisy, 1.5), c, &cfg);
            if u.ssd > last.0 {
                assert!(u.weight <= last.1);
            }
            last = (u.ssd, u.weight);
        }
    }

    #[test]
    fn static_camera_has_zero_gt_flow() {
        let k = intrinsics();
        let mut g = graph_with(&[0, 1]);
        g.build_edges(&[0, 1], usize::MAX);
        let poses = HashMap::from([(0, Pose::identity()), (1, Pose::identity())]);
        let maps = HashMap::from([(0, Image::filled(64, 64, 0.5)), (1, Image::filled(64, 64, 0.5))]);
        let flows = compute_gt_flow(&g, &poses, &maps, &k).unwrap();
        assert!(flows.iter().all(|f| f.unwrap().norm() == 0.0));
    }

    #[test]
    fn gt_flow_matches_plane_homography() {
        let k = intrinsics();
        let kmat = nalgebra::Matrix3::new(k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0);
        // plane n.X = dist in the source camera frame
        let n = Vector3::new(0.1, -0.2, 1.0).normalize();
        let dist = 2.0;
        let target = Pose::exp(&nalgebra::Vector6::new(0.1, 0.05, -0.08, 0.02, -0.03, 0.04));
        let rel = target.inverse();
        let hmat = kmat
            * (rel.rotation_matrix() + rel.translation * n.transpose() / dist)
            * kmat.try_inverse().unwrap();
        let mut g = PatchGraph::new();
        g.spawn_patches(0, &coords(&[(2, 3), (8, 8), (12, 5), (4, 13)]));
        g.spawn_patches(1, &coords(&[(0, 0)]));
        g.build_edges(&[0, 1], usize::MAX);
        let mut depth = vec![0.0; 64 * 64];
        for y in 0..64 {
            for x in 0..64 {
                let b = k.bearing(Vector2::new(x as f64, y as f64));
                depth[y * 64 + x] = n.dot(&b) / dist;
            }
        }
        let maps = HashMap::from([
            (0, Image::new(64, 64, depth).unwrap()),
            (1, Image::filled(64, 64, 0.5)),
        ]);
        let poses = HashMap::from([(0, Pose::identity()), (1, target)]);
        let flows = compute_gt_flow(&g, &poses, &maps, &k).unwrap();
        for (e, f) in g.edges.iter().zip(&flows) {
            if e.target != 1 {
                continue;
            }
            let c = g.patch(e.patch).unwrap().center;
            let h = hmat * Vector3::new(c.x, c.y, 1.0);
            let expect = Vector2::new(h.x / h.z, h.y / h.z) - c;
            assert!((f.unwrap() - expect).norm() < 1e-6);
        }
    }

    #[test]
    fn parallax_scales_with_inverse_depth() {
        let k = intrinsics();
        let mut g = PatchGraph::new();
        g.spawn_patches(0, &coords(&[(3, 3), (10, 10)]));
        g.spawn_patches(1, &coords(&[(0, 0)]));
        g.build_edges(&[0, 1], usize::MAX);
        let mut depth = vec![0.25; 64 * 64];
        depth[42 * 64 + 42] = 1.0;
        let maps = HashMap::from([
            (0, Image::new(64, 64, depth).unwrap()),
            (1, Image::filled(64, 64, 1.0)),
        ]);
        let poses = HashMap::from([
            (0, Pose::identity()),
            (1, Pose::from_translation(Vector3::new(0.1, 0.0, 0.0))),
        ]);
        let flows = compute_gt_flow(&g, &poses, &maps, &k).unwrap();
        let near = flows[g.edges.iter().position(|e| e.patch == 1).unwrap()].unwrap();
        let far = flows[g.edges.iter().position(|e| e.patch == 0).unwrap()].unwrap();
        assert!((near.norm() / far.norm() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn undefined_depth_is_excluded() {
        let k = intrinsics();
        let mut g = graph_with(&[0, 1]);
        g.build_edges(&[0, 1], usize::MAX);
        let poses = HashMap::from([(0, Pose::identity()), (1, Pose::identity())]);
        let maps = HashMap::from([(0, Image::filled(64, 64, 0.0)), (1, Image::filled(64, 64, 0.5))]);
        let flows = compute_gt_flow(&g, &poses, &maps, &k).unwrap();
        let src0 = g.edges.iter().position(|e| e.patch == 0).unwrap();
        assert!(flows[src0].is_none());
    }

    #[test]
    fn keyframe_boundaries() {
        assert_eq!(keyframe_decision(&[0.0, 0.0], 5.0), KeyframeDecision::Drop);
        assert_eq!(keyframe_decision(&[30.0], 25.0), KeyframeDecision::Keep);
        assert_eq!(keyframe_decision(&[10.0, 20.0], 15.0), KeyframeDecision::Keep);
    }
}
