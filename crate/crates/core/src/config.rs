//! Run and scene configuration, stored as TOML.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ba::BaConfig;
use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::event::AugmentParams;
use crate::sampler::SamplerConfig;
use crate::sim::SimConfig;
use crate::tracker::TrackerConfig;

/// Synthetic orbit over a textured ground plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub texture_seed: u64,
    pub texture_size: usize,
    /// Meters per texture sample.
    pub texel: f64,
    pub contrast: f64,
    /// Fraction of the plane carrying texture; the rest is flat.
    pub coverage: f64,
    /// Gain on the detail layer before clamping; 1 keeps smooth noise.
    pub sharpness: f64,
    pub orbit_radius: f64,
    pub orbit_height: f64,
    pub revolutions: f64,
    /// Look-at point as a fraction of the orbit radius; 1 looks straight down.
    pub inward: f64,
    pub control_points: usize,
    /// Rendered frames per voxel window fed to the event simulator.
    pub frames_per_window: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            fx: 48.0,
            fy: 48.0,
            cx: 31.5,
            cy: 31.5,
            texture_seed: 7,
            texture_size: 256,
            texel: 0.02,
            contrast: 0.8,
            coverage: 0.85,
            sharpness: 1.0,
            orbit_radius: 1.0,
            orbit_height: 1.2,
            revolutions: 1.0,
            inward: 0.6,
            control_points: 64,
            frames_per_window: 4,
        }
    }
}

impl SceneConfig {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics()?;
        if self.frames_per_window == 0 || self.control_points < 2 {
            return Err(Error::Config(
                "frames_per_window must be >= 1 and control_points >= 2".into(),
            ));
        }
        if !(self.texel > 0.0
            && self.sharpness > 0.0
            && self.orbit_height > 0.0
            && self.orbit_radius >= 0.0)
        {
            return Err(Error::Config(
                "texel, sharpness and orbit_height must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Fixed-length voxel windows starting at `start_us`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub duration_us: i64,
    pub count: usize,
    /// Simulated lead-in before the first window. Every pixel's reference
    /// level starts at the first frame, so early events are atypically
    /// sparse; a lead-in lets the references decorrelate first.
    pub start_us: i64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            duration_us: 10_000,
            count: 200,
            start_us: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// Event-density gradient baseline.
    Gradient,
    /// Randomly initialized scoring network.
    Network,
}

/// Everything a run needs. Seeds inside the module configs are ignored by
/// the pipeline: sampler, augmentation, simulator and scorer initialization
/// draw from named sub-streams of the root `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub trials: usize,
    /// Mean flow in pixels below which a new keyframe is dropped.
    pub keyframe_threshold: f64,
    pub scorer: ScorerKind,
    /// Runs abort when more than this fraction of windows fail.
    pub max_failure_fraction: f64,
    pub windows: WindowConfig,
    pub scene: SceneConfig,
    pub sim: SimConfig,
    pub augment: AugmentParams,
    pub sampler: SamplerConfig,
    pub tracker: TrackerConfig,
    pub ba: BaConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 5,
            keyframe_threshold: 15.0,
            scorer: ScorerKind::Gradient,
            max_failure_fraction: 0.5,
            windows: WindowConfig::default(),
            scene: SceneConfig::default(),
            sim: SimConfig::default(),
            augment: AugmentParams::default(),
            // 16 patches in 4 cells fit a 16x16 score map under the spacing rule
            sampler: SamplerConfig {
                patches: 16,
                ..SamplerConfig::default()
            },
            tracker: TrackerConfig::default(),
            ba: BaConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if !(self.keyframe_threshold >= 0.0) {
            return Err(Error::Config("keyframe_threshold must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return Err(Error::Config("max_failure_fraction must lie in [0, 1]".into()));
        }
        if self.windows.duration_us <= 0 || self.windows.count == 0 || self.windows.start_us < 0 {
            return Err(Error::Config(
                "windows need a positive duration and count and a non-negative start".into(),
            ));
        }
        self.scene.validate().map_err(wrap)?;
        self.sim.validate().map_err(wrap)?;
        self.augment.validate().map_err(wrap)?;
        self.sampler.validate().map_err(wrap)?;
        self.tracker.validate().map_err(wrap)?;
        self.ba.validate().map_err(wrap)?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Named random stream derived from a root seed.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // FNV-1a of the name selects an independent ChaCha stream
    let id = name
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    rng.set_stream(id);
    rng
}
