use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use lidarmono::pipeline::{
    depth_diagnostics, generate_scene, kitti_metric, load_kitti_sequence, read_trajectory, write_depth_csv,
    write_report, write_sequence, write_trajectory, SceneSpec,
};
use lidarmono::{run_pipeline, Mode, PipelineConfig};

/// LIDAR-aided monocular visual odometry.
#[derive(Debug, Parser)]
#[command(name = "lidarmono", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct ConfigArgs {
    /// TOML configuration file; missing keys keep their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set window.w0=1.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        for o in &self.overrides {
            cfg.set(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the trajectory of a KITTI-layout sequence.
    Run {
        /// Sequence directory (calib.txt, times.txt, velodyne/, image_0/ or tracks.txt).
        sequence: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// `full` (keyframe bundle adjustment) or `prior_only` (chained frame-to-frame motion).
        #[arg(short, long, default_value = "full")]
        mode: Mode,
        /// Trajectory output in KITTI pose format.
        #[arg(short, long, default_value = "trajectory.txt")]
        output: PathBuf,
        /// Error report CSV, written when the sequence has poses.txt.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score a trajectory against ground truth with the KITTI metric.
    Eval {
        estimate: PathBuf,
        truth: PathBuf,
        /// Report CSV; the summary always goes to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate a synthetic sequence with ground truth.
    Synth {
        /// Output directory.
        output: PathBuf,
        /// Scene description in TOML; defaults to a corridor with one turn.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Frame count; defaults to the time needed to drive the path.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Per-feature depth extraction diagnostics for one frame, as CSV.
    DepthDebug {
        sequence: PathBuf,
        #[arg(short, long)]
        frame: usize,
        #[command(flatten)]
        config: ConfigArgs,
        /// CSV output; stdout when absent.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run {
            sequence,
            config,
            mode,
            output,
            report,
        } => run(&sequence, &config.load()?, mode, &output, report.as_deref()),
        Command::Eval { estimate, truth, report } => eval(&estimate, &truth, report.as_deref()),
        Command::Synth {
            output,
            spec,
            seed,
            frames,
        } => synth(&output, spec.as_deref(), seed, frames),
        Command::DepthDebug {
            sequence,
            frame,
            config,
            output,
        } => depth_debug(&sequence, frame, &config.load()?, output.as_deref()),
    }
}

fn run(dir: &Path, cfg: &PipelineConfig, mode: Mode, output: &Path, report: Option<&Path>) -> Result<()> {
    let seq = load_kitti_sequence(dir).with_context(|| format!("loading {}", dir.display()))?;
    log::info!("{}: {} frames, mode {mode}", dir.display(), seq.len());
    let start = Instant::now();
    let out = run_pipeline(&seq, cfg, mode)?;
    log::info!(
        "{} frames in {:.1} s, {} keyframes",
        out.poses.len(),
        start.elapsed().as_secs_f64(),
        out.keyframes().len()
    );
    write_trajectory(output, &out.poses).with_context(|| format!("writing {}", output.display()))?;
    match (&out.report, report) {
        (Some(r), path) => {
            print!("{r}");
            if let Some(path) = path {
                write_report(path, r).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        (None, Some(_)) => log::warn!("no error report: the sequence has no usable ground truth"),
        (None, None) => {}
    }
    Ok(())
}

fn eval(estimate: &Path, truth: &Path, report: Option<&Path>) -> Result<()> {
    let est = read_trajectory(estimate)?;
    let gt = read_trajectory(truth)?;
    let r = kitti_metric(&est, &gt)?;
    print!("{r}");
    if let Some(path) = report {
        write_report(path, &r).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn synth(output: &Path, spec: Option<&Path>, seed: u64, frames: Option<usize>) -> Result<()> {
    let spec: SceneSpec = match spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => SceneSpec::default(),
    };
    let frames = frames.unwrap_or_else(|| spec.duration_frames());
    if frames == 0 {
        bail!("a sequence needs at least one frame");
    }
    let scene = generate_scene(&spec, frames, seed)?;
    write_sequence(&scene.sequence, output).with_context(|| format!("writing {}", output.display()))?;
    log::info!("{}: {frames} frames, {} landmarks", output.display(), scene.landmark_count());
    Ok(())
}

fn depth_debug(dir: &Path, frame: usize, cfg: &PipelineConfig, output: Option<&Path>) -> Result<()> {
    let seq = load_kitti_sequence(dir).with_context(|| format!("loading {}", dir.display()))?;
    let rows = depth_diagnostics(&seq, cfg, frame)?;
    match output {
        Some(path) => write_depth_csv(BufWriter::new(fs::File::create(path)?), &rows)?,
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_depth_csv(&mut lock, &rows)?;
            lock.flush()?;
        }
    }
    let valid = rows.iter().filter(|r| r.estimate.is_some_and(|e| e.is_valid())).count();
    log::info!("frame {frame}: {valid} of {} features with depth", rows.len());
    Ok(())
}
