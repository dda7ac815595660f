//! Event generation from intensity frames.
//!
//! Each pixel keeps a reference log intensity. Between two frames the log
//! intensity is interpolated linearly in time; whenever it crosses the reference
//! plus the positive threshold (or minus the negative one) an event is emitted at
//! the interpolated crossing time and the reference moves by one threshold.

pub mod scene;

pub use scene::{
    orbit_controls, render_scene, GroundTruthBundle, Landmark, PlaneGeometry, SceneGeometry,
    SplineTrajectory, SyntheticScene, Texture,
};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{Event, Interval};

/// Default range for per-sequence contrast threshold randomization.
pub const DEFAULT_THRESHOLD_RANGE: Interval = Interval { lo: 0.16, hi: 0.34 };

/// Row-major single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "image {width}x{height} needs {} values, got {}",
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

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Intensity frames with strictly increasing microsecond timestamps.
#[derive(Clone, Debug)]
pub struct FrameSequence {
    pub frames: Vec<Image>,
    pub timestamps: Vec<i64>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Image>, timestamps: Vec<i64>) -> Result<Self> {
        let s = Self { frames, timestamps };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 frames, got {}",
                self.frames.len()
            )));
        }
        if self.frames.len() != self.timestamps.len() {
            return Err(Error::InvalidArgument(
                "frame and timestamp counts differ".into(),
            ));
        }
        let (w, h) = (self.frames[0].width, self.frames[0].height);
        for f in &self.frames {
            if f.width != w || f.height != h {
                return Err(Error::InvalidArgument("frames differ in shape".into()));
            }
            if f.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument(
                    "intensities must lie in [0, 1]".into(),
                ));
            }
        }
        if self.timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "frame timestamps must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

/// Contrast thresholds and simulator options.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub c_pos: f64,
    pub c_neg: f64,
    pub log_eps: f64,
    pub threshold_range: Interval,
    /// Minimum spacing between events of one pixel; 0 disables.
    pub refractory_us: i64,
    /// Relative per-pixel threshold jitter (standard deviation); 0 disables.
    pub threshold_jitter: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            c_pos: 0.25,
            c_neg: 0.25,
            log_eps: 1e-3,
            threshold_range: DEFAULT_THRESHOLD_RANGE,
            refractory_us: 0,
            threshold_jitter: 0.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_pos > 0.0 && self.c_neg > 0.0) {
            return Err(Error::InvalidArgument(
                "contrast thresholds must be positive".into(),
            ));
        }
        if !(self.log_eps > 0.0) {
            return Err(Error::InvalidArgument("log_eps must be positive".into()));
        }
        self.threshold_range.validate("threshold_range")?;
        if self.threshold_range.lo <= 0.0 {
            return Err(Error::InvalidArgument(
                "threshold_range must be strictly positive".into(),
            ));
        }
        if self.refractory_us < 0 || !(self.threshold_jitter >= 0.0) {
            return Err(Error::InvalidArgument(
                "refractory period and jitter must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Elementwise `ln(I + log_eps)`.
pub fn log_intensity(image: &Image, log_eps: f64) -> Image {
    Image {
        width: image.width,
        height: image.height,
        data: image.data.iter().map(|v| (v + log_eps).ln()).collect(),
    }
}

/// Draws independent positive and negative thresholds from `range`.
pub fn randomize_thresholds<R: Rng + ?Sized>(rng: &mut R, range: Interval) -> Result<(f64, f64)> {
    range.validate("threshold range")?;
    if range.lo <= 0.0 {
        return Err(Error::InvalidArgument(
            "threshold range must be strictly positive".into(),
        ));
    }
    let c_pos = range.sample(rng);
    let c_neg = range.sample(rng);
    Ok((c_pos, c_neg))
}

#[derive(Clone, Copy, Debug)]
struct PixelState {
    reference: f64,
    last_log: f64,
    last_event: i64,
    c_pos: f64,
    c_neg: f64,
}

/// Incremental event generator fed one frame at a time.
pub struct EventGenerator {
    cfg: SimConfig,
    width: usize,
    height: usize,
    state: Vec<PixelState>,
    last_t: i64,
}

impl EventGenerator {
    /// Starts from the first frame; its log intensity becomes every reference level.
    pub fn new(first: &Image, t0: i64, cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let log = log_intensity(first, cfg.log_eps);
        let mut jitter_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, cfg.threshold_jitter.max(0.0)).map_err(|e| {
            Error::InvalidArgument(format!("threshold jitter: {e}"))
        })?;
        let state = log
            .data
            .iter()
            .map(|&l| {
                let (jp, jn) = if cfg.threshold_jitter > 0.0 {
                    (normal.sample(&mut jitter_rng), normal.sample(&mut jitter_rng))
                } else {
                    (0.0, 0.0)
                };
                PixelState {
                    reference: l,
                    last_log: l,
                    last_event: i64::MIN / 2,
                    c_pos: (cfg.c_pos * (1.0 + jp)).max(1e-3),
                    c_neg: (cfg.c_neg * (1.0 + jn)).max(1e-3),
                }
            })
            .collect();
        Ok(Self {
            cfg,
            width: first.width,
            height: first.height,
            state,
            last_t: t0,
        })
    }

    /// Consumes the next frame and returns the canonically sorted events of the interval.
    pub fn push_frame(&mut self, frame: &Image, t: i64) -> Result<Vec<Event>> {
        if frame.width != self.width || frame.height != self.height {
            return Err(Error::InvalidArgument("frame shape changed".into()));
        }
        if t <= self.last_t {
            return Err(Error::InvalidArgument(
                "frame timestamps must be strictly increasing".into(),
            ));
        }
        let t0 = self.last_t;
        let dt = (t - t0) as f64;
        let log = log_intensity(frame, self.cfg.log_eps);
        let refractory = self.cfg.refractory_us;
        let width = self.width;
        let mut events: Vec<Event> = self
            .state
            .par_chunks_mut(width)
            .zip(log.data.par_chunks(width))
            .enumerate()
            .flat_map_iter(|(y, (row, logs))| {
                let mut out = Vec::new();
                for (x, (st, &target)) in row.iter_mut().zip(logs).enumerate() {
                    let start = st.last_log;
                    let delta = target - start;
                    if delta != 0.0 {
                        let mut emit = |level: f64, p: i8, st: &mut PixelState| {
                            let frac = (level - start) / delta;
                            let te = t0 + (frac * dt).round() as i64;
                            if refractory == 0 || te - st.last_event >= refractory {
                                out.push(Event::new(te, x as u16, y as u16, p));
                                st.last_event = te;
                            }
                        };
                        if delta > 0.0 {
                            while st.reference + st.c_pos <= target + 1e-12 {
                                st.reference += st.c_pos;
                                let level = st.reference;
                                emit(level, 1, st);
                            }
                        } else {
                            while st.reference - st.c_neg >= target - 1e-12 {
                                st.reference -= st.c_neg;
                                let level = st.reference;
                                emit(level, -1, st);
                            }
                        }
                    }
                    st.last_log = target;
                }
                out
            })
            .collect();
        self.last_t = t;
        sort_canonical(&mut events);
        Ok(events)
    }

    /// Current per-pixel reference levels, row-major.
    pub fn reference_levels(&self) -> Vec<f64> {
        self.state.iter().map(|s| s.reference).collect()
    }
}

/// Orders events by timestamp, then row, column and polarity.
pub fn sort_canonical(events: &mut [Event]) {
    events.sort_by_key(|e| (e.t, e.y, e.x, e.p));
}

/// Runs the generator over a whole sequence.
pub fn generate_events(seq: &FrameSequence, cfg: &SimConfig) -> Result<Vec<Event>> {
    seq.validate()?;
    let mut gen = EventGenerator::new(&seq.frames[0], seq.timestamps[0], *cfg)?;
    let mut all = Vec::new();
    for (frame, &t) in seq.frames.iter().zip(&seq.timestamps).skip(1) {
        all.extend(gen.push_frame(frame, t)?);
    }
    sort_canonical(&mut all);
    Ok(all)
}
