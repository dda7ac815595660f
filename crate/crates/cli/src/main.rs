//! `eventvo` command-line front end.
//!
//! Exit codes: 0 success, 2 validation error, 3 pipeline failure.

mod plot;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};
use eventvo::config::RunConfig;
use eventvo::event::{build_voxel_grid, normalize};
use eventvo::io::{self, Tensor};
use eventvo::metrics::{self, MetricReport};
use eventvo::pipeline::{self, AblationVariant, ABLATION_CSV_HEADER};
use eventvo::sampler::Strategy;
use eventvo::{Error, Result, Trajectory};

#[derive(Parser)]
#[command(name = "eventvo", version, about = "Sparse event-based visual odometry toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand that builds a run configuration.
#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Keyframe mean-flow threshold in pixels overriding the config.
    #[arg(long = "keyframe-thresh")]
    keyframe_thresh: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the configured scene and write events and ground truth.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Accumulate events into normalized voxel grids, one record per window.
    Voxelize {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Event text file.
        #[arg(long)]
        events: PathBuf,
        /// Also store the score map of every window.
        #[arg(long)]
        scores: bool,
        /// Output tensor archive.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run visual odometry and write the estimated trajectory and log.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Event text file; the configured scene is simulated when omitted.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Sampling strategy overriding the config.
        #[arg(long)]
        strategy: Option<String>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare an estimated trajectory against ground truth.
    Eval {
        /// Estimated trajectory, TUM format.
        #[arg(long)]
        est: PathBuf,
        /// Reference trajectory, TUM format.
        #[arg(long)]
        gt: PathBuf,
        /// CSV output; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep sampling strategies over repeated trials on the simulated scene.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Trials per strategy overriding the config.
        #[arg(long)]
        trials: Option<usize>,
        /// Restrict the sweep to one variant.
        #[arg(long)]
        strategy: Option<String>,
        /// CSV output; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a trajectory, score map or flow file as SVG.
    Plot {
        #[arg(long, value_enum)]
        kind: PlotKind,
        /// TUM trajectory, tensor container or flow CSV.
        #[arg(long)]
        input: PathBuf,
        /// Reference trajectory drawn next to a trajectory plot.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Archive record to draw; the first score record when omitted.
        #[arg(long)]
        record: Option<String>,
        /// SVG output file.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Trajectory,
    Scores,
    Flow,
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(k) = args.keyframe_thresh {
        cfg.keyframe_threshold = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn read_tum(path: &Path) -> Result<Trajectory> {
    Trajectory::read_tum(BufReader::new(File::open(path)?))
}

fn read_events(path: &Path) -> Result<Vec<eventvo::Event>> {
    io::read_events(BufReader::new(File::open(path)?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let seq = pipeline::simulate(cfg)?;
    fs::create_dir_all(out)?;
    let mut w = create(&out.join("events.txt"))?;
    io::write_events(&mut w, &seq.events)?;
    w.flush()?;
    write_text(&out.join("groundtruth.tum"), &seq.ground_truth.to_tum_string())?;
    let depths: Vec<(String, Tensor)> = seq
        .inverse_depth_maps
        .iter()
        .enumerate()
        .map(|(k, m)| Ok((format!("inv_depth_{k:04}"), Tensor::from_f64(vec![m.height, m.width], &m.data)?)))
        .collect::<Result<_>>()?;
    let mut w = create(&out.join("inverse_depth.evtk"))?;
    io::write_archive(&mut w, &depths)?;
    w.flush()?;
    write_text(&out.join("config.toml"), &cfg.to_toml()?)?;
    println!(
        "{} events over {} windows, checksum {:016x}",
        seq.events.len(),
        seq.windows.len(),
        io::event_checksum(&seq.events)
    );
    Ok(())
}

fn voxelize(cfg: &RunConfig, events: &Path, scores: bool, out: &Path) -> Result<()> {
    let events = read_events(events)?;
    let intrinsics = cfg.scene.intrinsics()?;
    eventvo::event::validate_stream(&events, intrinsics.width, intrinsics.height)?;
    let mut records = Vec::new();
    for (k, win) in pipeline::windows(&cfg.windows).iter().enumerate() {
        let grid = normalize(&build_voxel_grid(win.slice(&events), *win, &intrinsics)?);
        let dims = vec![grid.bins(), grid.height, grid.width];
        records.push((format!("grid_{k:04}"), Tensor::from_f64(dims, &grid.data)?));
        if scores {
            let s = pipeline::score_map(&grid, cfg)?;
            records.push((format!("score_{k:04}"), Tensor::from_f64(vec![s.height, s.width], &s.data)?));
        }
    }
    let mut w = create(out)?;
    io::write_archive(&mut w, &records)?;
    w.flush()?;
    println!("{} records", records.len());
    Ok(())
}

fn run(cfg: &RunConfig, events: Option<&Path>, out: &Path) -> Result<()> {
    let (events, windows, intrinsics, gt) = match events {
        Some(p) => {
            let ev = read_events(p)?;
            let k = cfg.scene.intrinsics()?;
            eventvo::event::validate_stream(&ev, k.width, k.height)?;
            (ev, pipeline::windows(&cfg.windows), k, None)
        }
        None => {
            let seq = pipeline::simulate(cfg)?;
            (seq.events, seq.windows, seq.intrinsics, Some(seq.ground_truth))
        }
    };
    let output = pipeline::run_vo(&events, &windows, &intrinsics, cfg)?;
    fs::create_dir_all(out)?;
    write_text(&out.join("trajectory.tum"), &output.trajectory.to_tum_string())?;
    write_text(&out.join("run.log"), &output.log())?;
    let mut w = create(&out.join("flow.csv"))?;
    output.graph.write_csv(&mut w, true)?;
    w.flush()?;
    println!(
        "{} windows, {} failures, {} degenerate",
        output.windows.len(),
        output.failures,
        output.degenerate
    );
    if let Some(gt) = gt {
        write_text(&out.join("groundtruth.tum"), &gt.to_tum_string())?;
        let report = metrics::evaluate(&output.trajectory, &gt, metrics::DEFAULT_MAX_DT)?;
        print!("{}", report.table());
    }
    Ok(())
}

fn emit_csv(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn eval(est: &Path, gt: &Path, out: Option<&Path>) -> Result<()> {
    let report = metrics::evaluate(&read_tum(est)?, &read_tum(gt)?, metrics::DEFAULT_MAX_DT)?;
    print!("{}", report.table());
    emit_csv(out, &format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row()))
}

fn ablate(cfg: &RunConfig, trials: usize, only: Option<&str>, out: Option<&Path>) -> Result<()> {
    let variants = match only {
        Some(name) => vec![AblationVariant::parse(name)?],
        None => AblationVariant::ALL.to_vec(),
    };
    let seq = pipeline::simulate(cfg)?;
    let rows = pipeline::ablation(&seq, cfg, &variants, trials)?;
    let mut text = format!("{ABLATION_CSV_HEADER}\n");
    for row in &rows {
        for (seed, r) in row.summary.seeds.iter().zip(&row.summary.reports) {
            match r {
                Ok(m) => eprintln!("{} seed={seed} ate_cm={:.4}", row.variant.name(), m.ate_cm),
                Err(e) => eprintln!("{} seed={seed} failed: {e}", row.variant.name()),
            }
        }
        text.push_str(&row.csv_row());
        text.push('\n');
    }
    emit_csv(out, &text)
}

fn plot(kind: PlotKind, input: &Path, gt: Option<&Path>, record: Option<&str>, out: &Path) -> Result<()> {
    let svg = match kind {
        PlotKind::Trajectory => {
            let top = |t: &Trajectory| t.positions().iter().map(|p| (p.x, p.y)).collect::<Vec<_>>();
            let est = read_tum(input)?;
            let mut series = vec![("estimate", top(&est))];
            if let Some(g) = gt {
                let gt = read_tum(g)?;
                // draw the estimate in the reference frame when both are given
                if let Ok(report) = metrics::evaluate(&est, &gt, metrics::DEFAULT_MAX_DT) {
                    series[0].1 = est.positions().iter().map(|p| {
                        let a = report.alignment.apply(p);
                        (a.x, a.y)
                    }).collect();
                }
                series.push(("ground truth", top(&gt)));
            }
            plot::lines("trajectory (x-y)", &series)
        }
        PlotKind::Scores => {
            let records = io::read_archive(&mut BufReader::new(File::open(input)?))?;
            let (name, t) = match record {
                Some(r) => records.iter().find(|(n, _)| n == r),
                None => records.iter().find(|(n, _)| n.starts_with("score")),
            }
            .ok_or_else(|| Error::Validation("no matching score record in archive".into()))?;
            if t.dims.len() != 2 {
                return Err(Error::Validation(format!("record {name} has rank {}, expected 2", t.dims.len())));
            }
            plot::heat(name, t.dims[1], t.dims[0], &t.to_f64())
        }
        PlotKind::Flow => {
            let mut reader = csv::Reader::from_path(input).map_err(|e| Error::Validation(e.to_string()))?;
            let mut points = Vec::new();
            for row in reader.records() {
                let row = row.map_err(|e| Error::Validation(e.to_string()))?;
                let field = |i: usize| -> Result<f64> {
                    row.get(i)
                        .and_then(|v| f64::from_str(v.trim()).ok())
                        .ok_or_else(|| Error::Validation(format!("bad flow row {row:?}")))
                };
                points.push(((field(2)?, field(3)?), field(4)?));
            }
            plot::scatter("patch targets colored by confidence", &points)
        }
    };
    write_text(out, &svg)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { cfg, out } => simulate(&load_config(&cfg)?, &out),
        Command::Voxelize { cfg, events, scores, out } => voxelize(&load_config(&cfg)?, &events, scores, &out),
        Command::Run { cfg, events, strategy, out } => {
            let mut c = load_config(&cfg)?;
            if let Some(s) = strategy {
                c.sampler.strategy = Strategy::from_str(&s)?;
            }
            run(&c, events.as_deref(), &out)
        }
        Command::Eval { est, gt, out } => eval(&est, &gt, out.as_deref()),
        Command::Ablate { cfg, trials, strategy, out } => {
            let c = load_config(&cfg)?;
            let n = trials.unwrap_or(c.trials);
            ablate(&c, n, strategy.as_deref(), out.as_deref())
        }
        Command::Plot { kind, input, gt, record, out } => {
            plot(kind, &input, gt.as_deref(), record.as_deref(), &out)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            // unreadable inputs are the caller's problem, like malformed ones
            if e.is_validation() || matches!(e, Error::Io(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
