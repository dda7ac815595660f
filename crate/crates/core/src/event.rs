//! Event stream types, voxel grids, normalization and photometric augmentation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};

/// Number of temporal bins in every voxel grid.
pub const NUM_BINS: usize = 5;

/// A single brightness-change event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    /// Timestamp in microseconds.
    pub t: i64,
    pub x: u16,
    pub y: u16,
    /// Polarity, either +1 or -1.
    pub p: i8,
}

impl Event {
    pub fn new(t: i64, x: u16, y: u16, p: i8) -> Self {
        Self { t, x, y, p }
    }
}

/// Checks pixel bounds, polarity values and timestamp ordering.
pub fn validate_stream(events: &[Event], width: usize, height: usize) -> Result<()> {
    for (i, e) in events.iter().enumerate() {
        if e.x as usize >= width || e.y as usize >= height {
            return Err(Error::Validation(format!(
                "event {i} at ({}, {}) outside {width}x{height} sensor",
                e.x, e.y
            )));
        }
        if e.p != 1 && e.p != -1 {
            return Err(Error::Validation(format!(
                "event {i} has polarity {}",
                e.p
            )));
        }
        if i > 0 && events[i - 1].t > e.t {
            return Err(Error::Validation(format!(
                "event {i} timestamp {} precedes {}",
                e.t,
                events[i - 1].t
            )));
        }
    }
    Ok(())
}

/// Half-open time interval `[start, end)` in microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: i64,
    pub end: i64,
}

impl TimeWindow {
    pub fn new(start: i64, end: i64) -> Self {
        Self { start, end }
    }

    pub fn duration(&self) -> i64 {
        self.end - self.start
    }

    pub fn contains(&self, t: i64) -> bool {
        t >= self.start && t < self.end
    }

    /// Sub-slice of a time-sorted stream that falls inside the window.
    pub fn slice<'a>(&self, events: &'a [Event]) -> &'a [Event] {
        let lo = events.partition_point(|e| e.t < self.start);
        let hi = events.partition_point(|e| e.t < self.end);
        &events[lo..hi]
    }
}

/// Dense `B x H x W` signed event tensor for one time window.
///
/// Storage is bin-major: index `(b * H + y) * W + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub data: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub window: TimeWindow,
    pub normalized: bool,
}

impl VoxelGrid {
    pub fn zeros(width: usize, height: usize, window: TimeWindow) -> Self {
        Self {
            data: vec![0.0; NUM_BINS * width * height],
            width,
            height,
            window,
            normalized: false,
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, b: usize) -> usize {
        (b * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, b: usize) -> f64 {
        self.data[self.index(x, y, b)]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize, b: usize) -> &mut f64 {
        let i = self.index(x, y, b);
        &mut self.data[i]
    }

    pub fn bins(&self) -> usize {
        NUM_BINS
    }

    pub fn channel(&self, b: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn nonzero_count(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Per-pixel sum over the temporal bins, row-major `H x W`.
    pub fn pixel_sums(&self) -> Vec<f64> {
        let n = self.width * self.height;
        (0..n)
            .map(|i| (0..NUM_BINS).map(|b| self.data[b * n + i]).sum())
            .collect()
    }

    /// Mean and population standard deviation over nonzero entries.
    pub fn nonzero_stats(&self) -> Option<(f64, f64)> {
        let (mut n, mut sum) = (0usize, 0.0);
        for v in self.data.iter().filter(|v| **v != 0.0) {
            n += 1;
            sum += v;
        }
        if n == 0 {
            return None;
        }
        let mean = sum / n as f64;
        let var = self
            .data
            .iter()
            .filter(|v| **v != 0.0)
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        Some((mean, var.sqrt()))
    }
}

/// Accumulates events into a voxel grid with bilinear weighting in time.
///
/// Each event's normalized time `tau = (t - start) / duration * (B - 1)` splits
/// its polarity between bins `floor(tau)` and `floor(tau) + 1`.
pub fn build_voxel_grid(
    events: &[Event],
    window: TimeWindow,
    intrinsics: &CameraIntrinsics,
) -> Result<VoxelGrid> {
    if window.duration() <= 0 {
        return Err(Error::InvalidArgument(format!(
            "window [{}, {}) has non-positive duration",
            window.start, window.end
        )));
    }
    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut grid = VoxelGrid::zeros(w, h, window);
    let scale = (NUM_BINS - 1) as f64 / window.duration() as f64;
    for (i, e) in events.iter().enumerate() {
        if !window.contains(e.t) {
            return Err(Error::Validation(format!(
                "event {i} at t={} outside window [{}, {})",
                e.t, window.start, window.end
            )));
        }
        let (x, y) = (e.x as usize, e.y as usize);
        if x >= w || y >= h {
            return Err(Error::Validation(format!(
                "event {i} at ({x}, {y}) outside {w}x{h} sensor"
            )));
        }
        let p = f64::from(e.p);
        let tau = (e.t - window.start) as f64 * scale;
        let lo = tau.floor();
        let frac = tau - lo;
        let lo = lo as usize;
        *grid.get_mut(x, y, lo) += p * (1.0 - frac);
        if frac > 0.0 && lo + 1 < NUM_BINS {
            *grid.get_mut(x, y, lo + 1) += p * frac;
        }
    }
    Ok(grid)
}

/// Standardizes nonzero entries to zero mean and unit variance; zeros stay zero.
pub fn normalize(grid: &VoxelGrid) -> VoxelGrid {
    let mut out = grid.clone();
    out.normalized = true;
    let Some((mean, std)) = grid.nonzero_stats() else {
        return out;
    };
    for v in out.data.iter_mut().filter(|v| **v != 0.0) {
        *v = if std < 1e-12 { 0.0 } else { (*v - mean) / std };
    }
    out
}

/// Closed real interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if !(self.lo <= self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "{what}: empty interval [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

/// Parameters of the density-reducing voxel augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    pub gain_range: Interval,
    pub drop_fraction_range: Interval,
    /// Expected number of hot pixels added per grid.
    pub hot_pixel_rate: f64,
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            gain_range: Interval::point(1.0),
            drop_fraction_range: Interval::point(0.0),
            hot_pixel_rate: 0.0,
            seed: 0,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        self.gain_range.validate("gain_range")?;
        self.drop_fraction_range.validate("drop_fraction_range")?;
        if self.drop_fraction_range.lo < 0.0 || self.drop_fraction_range.hi > 1.0 {
            return Err(Error::InvalidArgument(
                "drop fractions must lie in [0, 1]".into(),
            ));
        }
        if !(self.hot_pixel_rate >= 0.0) {
            return Err(Error::InvalidArgument(
                "hot_pixel_rate must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Applies gain, magnitude-ordered dropout and hot pixels, in that order.
pub fn photometric_augment<R: Rng + ?Sized>(
    grid: &VoxelGrid,
    params: &AugmentParams,
    rng: &mut R,
) -> VoxelGrid {
    let mut out = grid.clone();
    let gain = params.gain_range.sample(rng);
    let drop_fraction = params.drop_fraction_range.sample(rng).clamp(0.0, 1.0);

    for v in out.data.iter_mut() {
        *v *= gain;
    }

    let mut nonzero: Vec<usize> = (0..out.data.len())
        .filter(|&i| out.data[i] != 0.0)
        .collect();
    let n_drop = ((drop_fraction * nonzero.len() as f64).round() as usize).min(nonzero.len());
    // stable sort: equal magnitudes drop in storage order
    nonzero.sort_by(|&a, &b| out.data[a].abs().total_cmp(&out.data[b].abs()));
    for &i in &nonzero[..n_drop] {
        out.data[i] = 0.0;
    }

    if params.hot_pixel_rate > 0.0 {
        let count = Poisson::new(params.hot_pixel_rate)
            .map(|d| d.sample(rng) as usize)
            .unwrap_or(0);
        for _ in 0..count {
            let x = rng.random_range(0..out.width);
            let y = rng.random_range(0..out.height);
            let b = rng.random_range(0..NUM_BINS);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            *out.get_mut(x, y, b) += sign;
        }
    }
    out
}
