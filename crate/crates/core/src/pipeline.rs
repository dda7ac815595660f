//! End-to-end orchestration: simulate, voxelize, score, sample, track, solve.

use std::collections::HashMap;

use nalgebra::Vector2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::ba::{self, BaPatch, BaProblem, Observation};
use crate::camera::CameraIntrinsics;
use crate::config::{substream, RunConfig, SceneConfig, ScorerKind, WindowConfig};
use crate::error::{Error, Result};
use crate::event::{build_voxel_grid, normalize, photometric_augment, Event, TimeWindow, VoxelGrid};
use crate::metrics::{self, MetricReport};
use crate::pose::Pose;
use crate::sampler::{self, SamplerConfig, Strategy};
use crate::scorer::{gradient_scorer, scorer_forward, ScoreMap, ScorerWeights};
use crate::sim::scene::{
    orbit_controls, render_scene, PlaneGeometry, SceneGeometry, SplineTrajectory, SyntheticScene,
    Texture,
};
use crate::sim::{generate_events, Image};
use crate::tracker::{
    keyframe_decision, mutual_flow, reproject, Keyframe,
    FlowEngine, KeyframeDecision, PatchAlignment, PatchGraph, WindowState,
};
use crate::trajectory::Trajectory;

/// Half-open windows `[s + k d, s + (k + 1) d)` for `k < count`.
pub fn windows(cfg: &WindowConfig) -> Vec<TimeWindow> {
    let (s, d) = (cfg.start_us, cfg.duration_us);
    (0..cfg.count as i64)
        .map(|k| TimeWindow::new(s + k * d, s + (k + 1) * d))
        .collect()
}

/// Representative time of a window in seconds: its midpoint.
pub fn window_time(w: &TimeWindow) -> f64 {
    (w.start + w.end) as f64 * 0.5e-6
}

pub fn build_scene(scene: &SceneConfig, total_us: i64) -> Result<SyntheticScene> {
    scene.validate()?;
    let texture = Texture::procedural(
        scene.texture_seed,
        scene.texture_size,
        scene.texel,
        scene.contrast,
        scene.coverage,
        scene.sharpness,
    )?;
    let controls = orbit_controls(
        scene.orbit_radius,
        scene.orbit_height,
        scene.revolutions,
        0,
        total_us,
        scene.control_points,
        scene.inward,
    );
    Ok(SyntheticScene {
        geometry: SceneGeometry::Plane(PlaneGeometry {
            pose: Pose::identity(),
            texture,
        }),
        trajectory: SplineTrajectory::new(controls)?,
        intrinsics: scene.intrinsics()?,
    })
}

/// Simulated events with ground truth sampled at window midpoints.
#[derive(Clone, Debug)]
pub struct SimulatedSequence {
    pub events: Vec<Event>,
    pub intrinsics: CameraIntrinsics,
    pub windows: Vec<TimeWindow>,
    pub ground_truth: Trajectory,
    /// Inverse depth at each window midpoint, 0 where undefined.
    pub inverse_depth_maps: Vec<Image>,
}

pub fn simulate(cfg: &RunConfig) -> Result<SimulatedSequence> {
    let wins = windows(&cfg.windows);
    let w = &cfg.windows;
    let total = w.start_us + w.duration_us * w.count as i64;
    let scene = build_scene(&cfg.scene, total)?;
    let fpw = cfg.scene.frames_per_window as i64;
    let n_frames = ((total * fpw + w.duration_us - 1) / w.duration_us) as usize;
    let frame_times: Vec<i64> = (0..=n_frames)
        .map(|i| (i as i64 * total) / n_frames as i64)
        .collect();
    let rendered = render_scene(&scene, &frame_times)?;
    let mut sim = cfg.sim;
    sim.seed = substream(cfg.seed, "sim").random();
    let events = generate_events(&rendered.frames, &sim)?;
    let mids: Vec<i64> = wins.iter().map(|w| (w.start + w.end) / 2).collect();
    let at_mid = render_scene(&scene, &mids)?;
    let ground_truth = Trajectory::new(
        wins.iter()
            .zip(at_mid.poses.samples.iter())
            .map(|(w, (_, p))| (window_time(w), *p))
            .collect(),
    )?;
    Ok(SimulatedSequence {
        events,
        intrinsics: scene.intrinsics,
        windows: wins,
        ground_truth,
        inverse_depth_maps: at_mid.inverse_depth_maps,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum WindowStatus {
    Tracked,
    /// No events in the window; the pose is extrapolated.
    Degenerate,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowLog {
    pub index: usize,
    pub time: f64,
    pub events: usize,
    pub patches: usize,
    pub edges: usize,
    pub keyframe: bool,
    pub status: WindowStatus,
    pub ba: Option<String>,
}

impl WindowLog {
    pub fn line(&self) -> String {
        let status = match &self.status {
            WindowStatus::Tracked => "tracked".to_string(),
            WindowStatus::Degenerate => "degenerate".to_string(),
            WindowStatus::Failed(why) => format!("failed({why})"),
        };
        let mut s = format!(
            "window={} t={:.6} events={} patches={} edges={} keyframe={} status={}",
            self.index, self.time, self.events, self.patches, self.edges, self.keyframe, status
        );
        if let Some(b) = &self.ba {
            s.push_str(" | ");
            s.push_str(b);
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub windows: Vec<WindowLog>,
    pub failures: usize,
    pub degenerate: usize,
    /// Patch graph of the final sliding window.
    pub graph: PatchGraph,
}

impl RunOutput {
    pub fn log(&self) -> String {
        let mut out: String = self.windows.iter().map(|w| w.line() + "\n").collect();
        out.push_str(&format!(
            "summary windows={} failures={} degenerate={}\n",
            self.windows.len(),
            self.failures,
            self.degenerate
        ));
        out
    }
}

/// How a window's output pose is derived from the keyframe estimates.
#[derive(Clone, Copy, Debug)]
enum Anchor {
    Keyframe,
    Relative { keyframe: usize, offset: Pose },
    Fixed(Pose),
}

struct PoseBook {
    anchors: Vec<Anchor>,
    keyframe_poses: HashMap<usize, Pose>,
}

impl PoseBook {
    fn pose(&self, k: usize) -> Pose {
        match self.anchors[k] {
            Anchor::Keyframe => self.keyframe_poses[&k],
            Anchor::Relative { keyframe, offset } => self.keyframe_poses[&keyframe] * offset,
            Anchor::Fixed(p) => p,
        }
    }

    fn extrapolate(&self) -> Pose {
        let n = self.anchors.len();
        match n {
            0 => Pose::identity(),
            1 => self.pose(0),
            _ => {
                let (a, b) = (self.pose(n - 2), self.pose(n - 1));
                let mut p = b * (a.inverse() * b);
                p.renormalize();
                p
            }
        }
    }

    /// Stores `pose` relative to the newest in-window keyframe.
    fn relative(&self, window: &WindowState, pose: Pose) -> Anchor {
        match window.frames.last() {
            Some(kf) => Anchor::Relative {
                keyframe: kf.id,
                offset: kf.pose.inverse() * pose,
            },
            None => Anchor::Fixed(pose),
        }
    }
}

fn scorer_weights(cfg: &RunConfig) -> Option<ScorerWeights> {
    match cfg.scorer {
        ScorerKind::Network => Some(ScorerWeights::random(substream(cfg.seed, "scorer-init").random())),
        ScorerKind::Gradient => None,
    }
}

/// Score map of a normalized grid under the configured scorer, with network
/// weights initialized exactly as [`run_vo`] does.
pub fn score_map(grid: &VoxelGrid, cfg: &RunConfig) -> Result<ScoreMap> {
    score(grid, cfg.scorer, scorer_weights(cfg).as_ref())
}

fn score(grid: &VoxelGrid, kind: ScorerKind, weights: Option<&ScorerWeights>) -> Result<ScoreMap> {
    match (kind, weights) {
        (ScorerKind::Network, Some(w)) => Ok(scorer_forward(grid, w)?.0),
        _ => gradient_scorer(grid),
    }
}

/// Refines every edge once from the current reprojection.
fn refine_edges(
    graph: &mut PatchGraph,
    window: &WindowState,
    intrinsics: &CameraIntrinsics,
    cfg: &RunConfig,
    engine: &dyn FlowEngine,
) {
    let frames: HashMap<usize, &Keyframe> = window.frames.iter().map(|f| (f.id, f)).collect();
    let tcfg = &cfg.tracker;
    let patches = &graph.patches;
    let lookup: HashMap<usize, usize> = patches.iter().enumerate().map(|(i, p)| (p.id, i)).collect();
    let updates: Vec<(Vector2<f64>, f64, bool)> = graph
        .edges
        .par_iter()
        .map(|e| {
            let p = &patches[lookup[&e.patch]];
            let (src, tgt) = (frames[&p.source], frames[&e.target]);
            match reproject(p.center, &src.pose, &tgt.pose, intrinsics, p.inv_depth) {
                Some(pred) => {
                    let u = engine.refine(p, src, tgt, pred);
                    (pred + u.delta, u.weight, u.valid)
                }
                None => (e.target_coord, tcfg.omega_floor, false),
            }
        })
        .collect();
    for (e, (coord, w, valid)) in graph.edges.iter_mut().zip(updates) {
        e.target_coord = coord;
        e.weight = w;
        e.valid = valid;
    }
}

/// One bundle-adjustment pass over the window. Returns the solver log line,
/// or `None` when no edge carries a usable observation.
fn solve_window(
    graph: &mut PatchGraph,
    window: &mut WindowState,
    intrinsics: &CameraIntrinsics,
    cfg: &RunConfig,
) -> Result<Option<String>> {
    let pos: HashMap<usize, usize> = window.frames.iter().enumerate().map(|(i, f)| (f.id, i)).collect();
    let lookup: HashMap<usize, usize> =
        graph.patches.iter().enumerate().map(|(i, p)| (p.id, i)).collect();
    let observations: Vec<Observation> = graph
        .edges
        .iter()
        .filter(|e| e.valid)
        .map(|e| Observation {
            patch: lookup[&e.patch],
            frame: pos[&e.target],
            target: e.target_coord,
            weight: e.weight,
        })
        .collect();
    if observations.is_empty() {
        return Ok(None);
    }
    let problem = BaProblem {
        poses: window.frames.iter().map(|f| f.pose).collect(),
        inv_depths: graph.patches.iter().map(|p| p.inv_depth).collect(),
        patches: graph
            .patches
            .iter()
            .map(|p| BaPatch {
                frame: pos[&p.source],
                center: p.center,
            })
            .collect(),
        observations,
        intrinsics: *intrinsics,
        fixed_poses: vec![0],
        // patches are kept in id order, so index 0 is the oldest
        fixed_depths: vec![0],
    };
    let sol = ba::solve(&problem, &cfg.ba)?;
    for (f, p) in window.frames.iter_mut().zip(&sol.poses) {
        f.pose = *p;
    }
    for (p, d) in graph.patches.iter_mut().zip(&sol.inv_depths) {
        p.inv_depth = *d;
    }
    Ok(Some(sol.report.log_line()))
}

/// Streams for one run, all derived from the root seed.
struct RunRngs {
    sampler: ChaCha8Rng,
    augment: ChaCha8Rng,
}

pub fn run_vo(
    events: &[Event],
    wins: &[TimeWindow],
    intrinsics: &CameraIntrinsics,
    cfg: &RunConfig,
) -> Result<RunOutput> {
    run_vo_with(events, wins, intrinsics, cfg, &PatchAlignment(cfg.tracker))
}

/// [`run_vo`] with a caller-supplied flow engine.
pub fn run_vo_with(
    events: &[Event],
    wins: &[TimeWindow],
    intrinsics: &CameraIntrinsics,
    cfg: &RunConfig,
    engine: &dyn FlowEngine,
) -> Result<RunOutput> {
    cfg.validate()?;
    intrinsics.validate()?;
    let mut rngs = RunRngs {
        sampler: substream(cfg.seed, "sampler"),
        augment: substream(cfg.seed, "augment"),
    };
    let weights = scorer_weights(cfg);
    let augment = cfg.augment.drop_fraction_range.hi > 0.0
        || cfg.augment.hot_pixel_rate > 0.0
        || cfg.augment.gain_range != crate::event::Interval::point(1.0);

    let mut graph = PatchGraph::new();
    let mut window = WindowState::new(cfg.tracker.window_capacity, cfg.keyframe_threshold);
    let mut book = PoseBook {
        anchors: Vec::new(),
        keyframe_poses: HashMap::new(),
    };
    let mut logs = Vec::with_capacity(wins.len());
    let window_ids = |w: &WindowState| w.ids();

    for (k, win) in wins.iter().enumerate() {
        let slice = win.slice(events);
        let mut log = WindowLog {
            index: k,
            time: window_time(win),
            events: slice.len(),
            patches: 0,
            edges: 0,
            keyframe: false,
            status: WindowStatus::Tracked,
            ba: None,
        };
        let init = book.extrapolate();
        if slice.is_empty() {
            log.status = WindowStatus::Degenerate;
            book.anchors.push(book.relative(&window, init));
            logs.push(log);
            continue;
        }
        let mut grid = build_voxel_grid(slice, *win, intrinsics)?;
        if augment {
            grid = photometric_augment(&grid, &cfg.augment, &mut rngs.augment);
        }
        let grid = normalize(&grid);
        let sampled = score(&grid, cfg.scorer, weights.as_ref())
            .and_then(|s| sampler::sample(&s, &cfg.sampler, &mut rngs.sampler));
        let coords = match sampled {
            Ok(c) => c,
            Err(e) => {
                log.status = WindowStatus::Failed(e.to_string());
                book.anchors.push(book.relative(&window, init));
                logs.push(log);
                continue;
            }
        };
        window.frames.push(Keyframe::new(k, init, &grid, &cfg.tracker));
        graph.spawn_patches(k, &coords);
        graph.build_edges(&window_ids(&window), cfg.tracker.edge_radius);

        if window.frames.len() >= 2 {
            for _ in 0..cfg.tracker.refine_rounds {
                refine_edges(&mut graph, &window, intrinsics, cfg, engine);
                match solve_window(&mut graph, &mut window, intrinsics, cfg) {
                    Ok(line) => log.ba = line.or(log.ba.take()),
                    Err(e) => {
                        log.status = WindowStatus::Failed(e.to_string());
                        break;
                    }
                }
            }
        }
        log.patches = graph.patches.len();
        log.edges = graph.edges.len();

        let n = window.frames.len();
        let decision = if n >= 2 {
            let (a, b) = (window.frames[n - 2].id, window.frames[n - 1].id);
            keyframe_decision(&mutual_flow(&graph, &window, a, b, intrinsics), window.keyframe_threshold)
        } else {
            KeyframeDecision::Keep
        };
        let failed = matches!(log.status, WindowStatus::Failed(_));
        if failed || decision == KeyframeDecision::Drop {
            let newest = window.frames.pop().expect("frame pushed above");
            graph.remove_frame(newest.id);
            let pose = if failed { init } else { newest.pose };
            book.anchors.push(book.relative(&window, pose));
        } else {
            log.keyframe = true;
            book.anchors.push(Anchor::Keyframe);
        }
        if window.frames.len() > window.capacity {
            let oldest = window.frames.remove(0);
            graph.remove_frame(oldest.id);
        }
        graph.build_edges(&window_ids(&window), cfg.tracker.edge_radius);
        for f in &window.frames {
            book.keyframe_poses.insert(f.id, f.pose);
        }
        logs.push(log);
    }

    let failures = logs
        .iter()
        .filter(|l| matches!(l.status, WindowStatus::Failed(_)))
        .count();
    let degenerate = logs
        .iter()
        .filter(|l| l.status == WindowStatus::Degenerate)
        .count();
    if failures as f64 > cfg.max_failure_fraction * wins.len() as f64 {
        return Err(Error::Pipeline(format!(
            "{failures} of {} windows failed",
            wins.len()
        )));
    }
    let trajectory = Trajectory::new(
        wins.iter()
            .enumerate()
            .map(|(k, w)| (window_time(w), book.pose(k)))
            .collect(),
    )?;
    Ok(RunOutput {
        trajectory,
        windows: logs,
        failures,
        degenerate,
        graph,
    })
}

/// Per-trial outcome and per-metric medians over successful trials.
#[derive(Clone, Debug)]
pub struct TrialSummary {
    pub seeds: Vec<u64>,
    pub reports: Vec<std::result::Result<MetricReport, String>>,
    pub window_failures: Vec<usize>,
    pub median_ate_cm: Option<f64>,
    pub median_r_rmse_deg: Option<f64>,
    pub median_mpe_pct_per_m: Option<f64>,
    pub mean_ate_cm: Option<f64>,
    pub failed_trials: usize,
}

pub fn run_trials(
    seq: &SimulatedSequence,
    cfg: &RunConfig,
    n: usize,
) -> Result<TrialSummary> {
    if n == 0 {
        return Err(Error::InvalidArgument("at least one trial is required".into()));
    }
    let seeds: Vec<u64> = (0..n as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let outcomes: Vec<(std::result::Result<MetricReport, String>, usize)> = seeds
        .par_iter()
        .map(|&seed| {
            let trial = RunConfig { seed, ..cfg.clone() };
            match run_vo(&seq.events, &seq.windows, &seq.intrinsics, &trial) {
                Ok(out) => (
                    metrics::evaluate(&out.trajectory, &seq.ground_truth, metrics::DEFAULT_MAX_DT)
                        .map_err(|e| e.to_string()),
                    out.failures,
                ),
                Err(e) => (Err(e.to_string()), 0),
            }
        })
        .collect();
    let ok: Vec<&MetricReport> = outcomes.iter().filter_map(|(r, _)| r.as_ref().ok()).collect();
    let ates: Vec<f64> = ok.iter().map(|r| r.ate_cm).collect();
    let mpes: Vec<f64> = ok.iter().filter_map(|r| r.mpe_pct_per_m).collect();
    Ok(TrialSummary {
        seeds,
        failed_trials: outcomes.len() - ok.len(),
        median_ate_cm: metrics::median(&ates),
        median_r_rmse_deg: metrics::median(&ok.iter().map(|r| r.r_rmse_deg).collect::<Vec<_>>()),
        median_mpe_pct_per_m: metrics::median(&mpes),
        mean_ate_cm: (!ates.is_empty()).then(|| ates.iter().sum::<f64>() / ates.len() as f64),
        window_failures: outcomes.iter().map(|(_, f)| *f).collect(),
        reports: outcomes.into_iter().map(|(r, _)| r).collect(),
    })
}

/// One row of the sampling-strategy sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationVariant {
    Random,
    Gradient,
    ThreePRandom,
    TopP,
    Multinomial,
    PooledMultinomial,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::Random,
        AblationVariant::Gradient,
        AblationVariant::ThreePRandom,
        AblationVariant::TopP,
        AblationVariant::Multinomial,
        AblationVariant::PooledMultinomial,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::Random => "random",
            AblationVariant::Gradient => "gradient",
            AblationVariant::ThreePRandom => "three_p_random",
            AblationVariant::TopP => "top_p",
            AblationVariant::Multinomial => "multinomial",
            AblationVariant::PooledMultinomial => "pooled_multinomial",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|v| v.name() == s)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation variant '{s}'")))
    }

    /// The configuration this variant runs with.
    ///
    /// `gradient` forces the gradient scorer with top-P selection; plain
    /// `multinomial` samples without a grid (one cell).
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        let with = |s: Strategy, cells: usize| SamplerConfig {
            strategy: s,
            grid_cells: cells,
            ..base.sampler
        };
        let g = base.sampler.grid_cells;
        cfg.sampler = match self {
            AblationVariant::Random => with(Strategy::Random, g),
            AblationVariant::Gradient => {
                cfg.scorer = ScorerKind::Gradient;
                with(Strategy::TopP, g)
            }
            AblationVariant::ThreePRandom => with(Strategy::ThreePRandom, g),
            AblationVariant::TopP => with(Strategy::TopP, g),
            AblationVariant::Multinomial => with(Strategy::Multinomial, 1),
            AblationVariant::PooledMultinomial => with(Strategy::PooledMultinomial, g),
        };
        cfg
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub summary: TrialSummary,
}

pub const ABLATION_CSV_HEADER: &str =
    "variant,ate_cm_mean,ate_cm_median,r_rmse_deg_median,mpe_pct_per_m_median,failed_trials";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.6}"));
        format!(
            "{},{},{},{},{},{}",
            self.variant.name(),
            f(self.summary.mean_ate_cm),
            f(self.summary.median_ate_cm),
            f(self.summary.median_r_rmse_deg),
            f(self.summary.median_mpe_pct_per_m),
            self.summary.failed_trials
        )
    }
}

pub fn ablation(
    seq: &SimulatedSequence,
    base: &RunConfig,
    variants: &[AblationVariant],
    trials: usize,
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|v| {
            Ok(AblationRow {
                variant: *v,
                summary: run_trials(seq, &v.apply(base), trials)?,
            })
        })
        .collect()
}
