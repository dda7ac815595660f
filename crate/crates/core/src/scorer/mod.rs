//! Trackability scoring: the patch-selection network, its losses, and the
//! gradient-map baseline.

mod loss;
mod network;

pub use loss::{
    flow_loss, pose_loss, score_loss, total_loss, EdgeLossInputs, EdgeTerm, IterationLosses,
    DEFAULT_ALPHA,
};
pub use network::{
    scorer_backward, scorer_forward, ActivationCache, ConvLayer, ScorerGradients, ScorerWeights,
    CHANNELS,
};

use crate::error::{Error, Result};
use crate::event::VoxelGrid;

/// Row-major `(H/4) x (W/4)` trackability map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ScoreMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "score map {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

const GRADIENT_EPS: f64 = 1e-6;
/// Lower bound of gradient scores so every location keeps some sampling mass.
pub const GRADIENT_FLOOR: f64 = 1e-9;

/// Event-density gradient baseline scorer.
///
/// Bins are collapsed by absolute sum, the central-difference gradient
/// magnitude is average-pooled 4x4 and divided by `max + 1e-6`. Borders use
/// replicated neighbours.
pub fn gradient_scorer(grid: &VoxelGrid) -> Result<ScoreMap> {
    let (w, h) = (grid.width, grid.height);
    if w % 4 != 0 || h % 4 != 0 || w == 0 || h == 0 {
        return Err(Error::InvalidArgument(format!(
            "grid {w}x{h} must have sides divisible by 4"
        )));
    }
    let mut density = vec![0.0; w * h];
    for b in 0..grid.bins() {
        for (d, v) in density.iter_mut().zip(grid.channel(b)) {
            *d += v.abs();
        }
    }
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        density[y * w + x]
    };
    let (pw, ph) = (w / 4, h / 4);
    let mut pooled = vec![0.0; pw * ph];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = 0.5 * (at(x + 1, y) - at(x - 1, y));
            let gy = 0.5 * (at(x, y + 1) - at(x, y - 1));
            pooled[(y as usize / 4) * pw + x as usize / 4] += (gx * gx + gy * gy).sqrt() / 16.0;
        }
    }
    let max = pooled.iter().copied().fold(0.0, f64::max);
    let data = pooled
        .iter()
        .map(|v| (v / (max + GRADIENT_EPS)).max(GRADIENT_FLOOR))
        .collect();
    ScoreMap::new(pw, ph, data)
}
