//! Patch-selection network: four 3x3 convolutions, 4x4 max-pool, sigmoid.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ScoreMap;
use crate::error::{Error, Result};
use crate::event::{VoxelGrid, NUM_BINS};
use crate::io::Tensor;

/// Output channels of each convolution.
pub const CHANNELS: [usize; 4] = [8, 16, 32, 1];
const POOL: usize = 4;

/// One 3x3 convolution, weights laid out `[out][in][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub out_ch: usize,
    pub in_ch: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(out_ch: usize, in_ch: usize) -> Self {
        Self {
            out_ch,
            in_ch,
            weight: vec![0.0; out_ch * in_ch * 9],
            bias: vec![0.0; out_ch],
        }
    }

    #[inline]
    pub fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.in_ch + i) * 3 + ky) * 3 + kx]
    }

    /// Same-size convolution with zero padding 1 and stride 1.
    fn forward(&self, input: &[f64], w: usize, h: usize) -> Vec<f64> {
        let plane = w * h;
        let mut out = vec![0.0; self.out_ch * plane];
        for o in 0..self.out_ch {
            let dst = &mut out[o * plane..(o + 1) * plane];
            dst.fill(self.bias[o]);
            for i in 0..self.in_ch {
                let src = &input[i * plane..(i + 1) * plane];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let k = self.w(o, i, ky, kx);
                        if k == 0.0 {
                            continue;
                        }
                        let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                        let (y0, y1) = (dy.min(0).unsigned_abs(), h - dy.max(0) as usize);
                        let (x0, x1) = (dx.min(0).unsigned_abs(), w - dx.max(0) as usize);
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let srow = &src[sy * w..(sy + 1) * w];
                            let drow = &mut dst[y * w..(y + 1) * w];
                            for x in x0..x1 {
                                drow[x] += k * srow[(x as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns `(dweight, dbias, dinput)` for upstream gradient `dout`.
    fn backward(&self, input: &[f64], dout: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let plane = w * h;
        let mut dweight = vec![0.0; self.weight.len()];
        let mut dbias = vec![0.0; self.out_ch];
        let mut dinput = vec![0.0; self.in_ch * plane];
        for o in 0..self.out_ch {
            let g = &dout[o * plane..(o + 1) * plane];
            dbias[o] = g.iter().sum();
            for i in 0..self.in_ch {
                let src = &input[i * plane..(i + 1) * plane];
                let dsrc = &mut dinput[i * plane..(i + 1) * plane];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                        let (y0, y1) = (dy.min(0).unsigned_abs(), h - dy.max(0) as usize);
                        let (x0, x1) = (dx.min(0).unsigned_abs(), w - dx.max(0) as usize);
                        let k = self.w(o, i, ky, kx);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            for x in x0..x1 {
                                let sx = (x as isize + dx) as usize;
                                let gv = g[y * w + x];
                                acc += gv * src[sy * w + sx];
                                dsrc[sy * w + sx] += gv * k;
                            }
                        }
                        dweight[((o * self.in_ch + i) * 3 + ky) * 3 + kx] = acc;
                    }
                }
            }
        }
        (dweight, dbias, dinput)
    }
}

/// Weights of the four convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorerWeights {
    pub layers: [ConvLayer; 4],
}

impl ScorerWeights {
    pub fn zeros() -> Self {
        Self {
            layers: [
                ConvLayer::zeros(CHANNELS[0], NUM_BINS),
                ConvLayer::zeros(CHANNELS[1], CHANNELS[0]),
                ConvLayer::zeros(CHANNELS[2], CHANNELS[1]),
                ConvLayer::zeros(CHANNELS[3], CHANNELS[2]),
            ],
        }
    }

    /// Uniform init in `[-a, a]`, `a = sqrt(1 / fan_in)`, for weights and biases.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros();
        for layer in w.layers.iter_mut() {
            let a = (1.0 / (layer.in_ch * 9) as f64).sqrt();
            for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *v = rng.random_range(-a..=a);
            }
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        let expect_in = [NUM_BINS, CHANNELS[0], CHANNELS[1], CHANNELS[2]];
        for (k, layer) in self.layers.iter().enumerate() {
            if layer.out_ch != CHANNELS[k]
                || layer.in_ch != expect_in[k]
                || layer.weight.len() != layer.out_ch * layer.in_ch * 9
                || layer.bias.len() != layer.out_ch
            {
                return Err(Error::InvalidArgument(format!(
                    "conv{} has shape {}x{}x3x3, expected {}x{}x3x3",
                    k + 1,
                    layer.out_ch,
                    layer.in_ch,
                    CHANNELS[k],
                    expect_in[k]
                )));
            }
            if layer.weight.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "conv{} holds non-finite values",
                    k + 1
                )));
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Records named `conv{k}.w` / `conv{k}.b` for the tensor archive.
    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            out.push((
                format!("conv{}.w", k + 1),
                Tensor::from_f64(vec![l.out_ch, l.in_ch, 3, 3], &l.weight).expect("shape"),
            ));
            out.push((
                format!("conv{}.b", k + 1),
                Tensor::from_f64(vec![l.out_ch], &l.bias).expect("shape"),
            ));
        }
        out
    }

    pub fn from_records(records: &[(String, Tensor)]) -> Result<Self> {
        let mut w = Self::zeros();
        for (k, layer) in w.layers.iter_mut().enumerate() {
            let find = |name: String| {
                records
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, t)| t)
                    .ok_or_else(|| Error::Validation(format!("missing record {name}")))
            };
            let wt = find(format!("conv{}.w", k + 1))?;
            let bt = find(format!("conv{}.b", k + 1))?;
            if wt.data.len() != layer.weight.len() || bt.data.len() != layer.bias.len() {
                return Err(Error::Validation(format!("conv{} has wrong size", k + 1)));
            }
            layer.weight = wt.to_f64();
            layer.bias = bt.to_f64();
        }
        w.validate()?;
        Ok(w)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smallest distance kept between a score and the ends of (0, 1).
const SCORE_MARGIN: f64 = 1e-15;

/// Activations retained by [`scorer_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ActivationCache {
    width: usize,
    height: usize,
    input: Vec<f64>,
    pre: [Vec<f64>; 4],
    /// Flat index into the conv4 map of each pooled maximum.
    argmax: Vec<usize>,
    pooled: Vec<f64>,
}

impl ActivationCache {
    pub fn output_shape(&self) -> (usize, usize) {
        (self.width / POOL, self.height / POOL)
    }
}

/// Gradients for every weight tensor and the input grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorerGradients {
    pub weights: ScorerWeights,
    /// Same layout as [`VoxelGrid::data`].
    pub input: Vec<f64>,
}

pub fn scorer_forward(grid: &VoxelGrid, weights: &ScorerWeights) -> Result<(ScoreMap, ActivationCache)> {
    weights.validate()?;
    let (w, h) = (grid.width, grid.height);
    if w == 0 || h == 0 || w % POOL != 0 || h % POOL != 0 {
        return Err(Error::InvalidArgument(format!(
            "grid {w}x{h} must have sides divisible by {POOL}"
        )));
    }
    if grid.data.len() != NUM_BINS * w * h {
        return Err(Error::InvalidArgument("grid data has wrong length".into()));
    }
    let input = grid.data.clone();
    let mut pre: [Vec<f64>; 4] = Default::default();
    let mut act = input.clone();
    for (k, layer) in weights.layers.iter().enumerate() {
        let z = layer.forward(&act, w, h);
        act = if k < 3 { z.iter().map(|v| v.max(0.0)).collect() } else { z.clone() };
        pre[k] = z;
    }
    let (pw, ph) = (w / POOL, h / POOL);
    let map = &pre[3];
    let mut argmax = Vec::with_capacity(pw * ph);
    let mut pooled = Vec::with_capacity(pw * ph);
    for py in 0..ph {
        for px in 0..pw {
            let mut best = (f64::NEG_INFINITY, 0usize);
            for dy in 0..POOL {
                for dx in 0..POOL {
                    let idx = (py * POOL + dy) * w + px * POOL + dx;
                    // first maximum in row-major order wins ties
                    if map[idx] > best.0 {
                        best = (map[idx], idx);
                    }
                }
            }
            argmax.push(best.1);
            pooled.push(best.0);
        }
    }
    let scores = pooled
        .iter()
        .map(|m| sigmoid(*m).clamp(SCORE_MARGIN, 1.0 - SCORE_MARGIN))
        .collect();
    let cache = ActivationCache {
        width: w,
        height: h,
        input,
        pre,
        argmax,
        pooled,
    };
    Ok((ScoreMap::new(pw, ph, scores)?, cache))
}

/// Back-propagates `upstream = dL/dS` through the cached forward pass.
pub fn scorer_backward(
    cache: &ActivationCache,
    weights: &ScorerWeights,
    upstream: &ScoreMap,
) -> Result<ScorerGradients> {
    let (pw, ph) = cache.output_shape();
    if upstream.width != pw || upstream.height != ph || cache.argmax.len() != pw * ph {
        return Err(Error::InvalidState(format!(
            "upstream gradient {}x{} does not match cached forward pass {pw}x{ph}",
            upstream.width, upstream.height
        )));
    }
    let (w, h) = (cache.width, cache.height);
    let plane = w * h;
    let mut grad = vec![0.0; plane];
    for (i, &idx) in cache.argmax.iter().enumerate() {
        let m = cache.pooled[i];
        let ds = sigmoid(m) * sigmoid(-m);
        grad[idx] += upstream.data[i] * ds;
    }
    let mut out = ScorerWeights::zeros();
    for k in (0..4).rev() {
        let input: Vec<f64> = if k == 0 {
            cache.input.clone()
        } else {
            cache.pre[k - 1].iter().map(|v| v.max(0.0)).collect()
        };
        if input.len() != weights.layers[k].in_ch * plane {
            return Err(Error::InvalidState(
                "cached activations do not match weight shapes".into(),
            ));
        }
        let (dw, db, dinput) = weights.layers[k].backward(&input, &grad, w, h);
        out.layers[k].weight = dw;
        out.layers[k].bias = db;
        grad = if k == 0 {
            dinput
        } else {
            dinput
                .iter()
                .zip(&cache.pre[k - 1])
                .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
                .collect()
        };
    }
    Ok(ScorerGradients {
        weights: out,
        input: grad,
    })
}
