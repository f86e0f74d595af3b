mod args;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use primex_core::io::{read_depth_png, read_label_png, write_depth_png, write_label_png};
use primex_core::odometry::estimate_frame_pose;
use primex_core::pipeline::timing_report;
use primex_core::records::{format_pose, format_records, frame_from_records, load_records};
use primex_core::scene::{format_scene, load_scene, render_scene, NoiseModel};
use primex_core::{backproject, backproject_units, extract, Error, Intrinsics, OrganizedCloud, SegmentLabelImage, StageTimings};

use args::{OdometryArgs, PipelineArgs};

#[derive(Debug, Parser)]
#[command(name = "primex", version, about = "Plane and cylinder extraction from organized depth images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Segment one depth image into planes and cylinders.
    Extract {
        /// 16-bit depth PNG.
        #[arg(long, env = "PRIMEX_DEPTH")]
        depth: PathBuf,
        #[arg(long, env = "PRIMEX_INTRINSICS")]
        intrinsics: PathBuf,
        /// 8-bit label PNG; 0 is unlabeled, k is record id k.
        #[arg(long, env = "PRIMEX_OUT_LABELS")]
        out_labels: Option<PathBuf>,
        /// Primitive records; printed to stdout when omitted.
        #[arg(long, env = "PRIMEX_OUT_MODELS")]
        out_models: Option<PathBuf>,
        /// Per-stage timing report of this run.
        #[arg(long, env = "PRIMEX_TIMINGS")]
        timings: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Render a scene description to a depth PNG.
    Synth {
        #[arg(long, env = "PRIMEX_SCENE")]
        scene: PathBuf,
        #[arg(long, env = "PRIMEX_INTRINSICS")]
        intrinsics: PathBuf,
        /// Standard deviation of additive depth noise (meters).
        #[arg(long, env = "PRIMEX_SIGMA", default_value_t = 0.0)]
        sigma: f64,
        /// Scale the noise as `sigma · z²` instead of keeping it constant.
        #[arg(long, env = "PRIMEX_QUADRATIC_NOISE")]
        quadratic_noise: bool,
        #[arg(long, env = "PRIMEX_NOISE_SEED", default_value_t = 0)]
        noise_seed: u64,
        #[arg(long, env = "PRIMEX_WIDTH", default_value_t = 640)]
        width: usize,
        #[arg(long, env = "PRIMEX_HEIGHT", default_value_t = 480)]
        height: usize,
        #[arg(long, env = "PRIMEX_OUT")]
        out: PathBuf,
        /// Ground-truth primitives in the scene format.
        #[arg(long, env = "PRIMEX_OUT_TRUTH")]
        out_truth: Option<PathBuf>,
    },
    /// Time the pipeline stages; the first run of each input is a warm-up.
    Bench {
        /// Scene description rendered noise-free in memory.
        #[arg(long, env = "PRIMEX_SCENE", conflicts_with = "depth_dir", required_unless_present = "depth_dir")]
        scene: Option<PathBuf>,
        /// Directory of depth PNGs, processed in file-name order.
        #[arg(long, env = "PRIMEX_DEPTH_DIR")]
        depth_dir: Option<PathBuf>,
        /// Camera model; VGA defaults when omitted.
        #[arg(long, env = "PRIMEX_INTRINSICS")]
        intrinsics: Option<PathBuf>,
        #[arg(long, env = "PRIMEX_REPS", default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
        reps: u64,
        #[arg(long, env = "PRIMEX_WIDTH", default_value_t = 640)]
        width: usize,
        #[arg(long, env = "PRIMEX_HEIGHT", default_value_t = 480)]
        height: usize,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Relative pose between two extracted frames, `p_prev = R·p_curr + t`.
    Pose {
        #[arg(long, env = "PRIMEX_PREV_MODELS")]
        prev_models: PathBuf,
        #[arg(long, env = "PRIMEX_PREV_LABELS")]
        prev_labels: PathBuf,
        #[arg(long, env = "PRIMEX_CURR_MODELS")]
        curr_models: PathBuf,
        #[arg(long, env = "PRIMEX_CURR_LABELS")]
        curr_labels: PathBuf,
        #[command(flatten)]
        odometry: OdometryArgs,
    },
}

fn load_intrinsics(path: Option<&Path>) -> Result<Intrinsics> {
    match path {
        Some(p) => Intrinsics::load(p).with_context(|| format!("reading intrinsics {}", p.display())),
        None => Ok(Intrinsics::vga()),
    }
}

fn load_cloud(depth: &Path, intr: &Intrinsics) -> Result<OrganizedCloud> {
    let image = read_depth_png(depth).with_context(|| format!("reading depth {}", depth.display()))?;
    Ok(backproject_units(&image, intr)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run_extract(
    depth: &Path,
    intrinsics: &Path,
    out_labels: Option<&Path>,
    out_models: Option<&Path>,
    timings: Option<&Path>,
    pipeline: &PipelineArgs,
) -> Result<()> {
    let cfg = pipeline.config();
    let intr = load_intrinsics(Some(intrinsics))?;
    let cloud = load_cloud(depth, &intr)?;
    let ex = extract(&cloud, &cfg)?;
    let records = format_records(&ex.records(&cfg));
    match out_models {
        Some(p) => write(p, &records)?,
        None => print!("{records}"),
    }
    if let Some(p) = out_labels {
        write_label_png(p, &ex.labels.to_u8()?)?;
    }
    if let Some(p) = timings {
        write(p, &timing_report(&[ex.timings]))?;
    }
    eprintln!(
        "{} primitives, {} of {} valid pixels labeled",
        ex.primitives.len(),
        ex.labels.labeled_count(),
        cloud.valid_count()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_synth(
    scene: &Path,
    intrinsics: &Path,
    sigma: f64,
    quadratic: bool,
    seed: u64,
    size: (usize, usize),
    out: &Path,
    out_truth: Option<&Path>,
) -> Result<()> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        bail!("sigma must be a non-negative number, got {sigma}");
    }
    let prims = load_scene(scene).with_context(|| format!("reading scene {}", scene.display()))?;
    let intr = load_intrinsics(Some(intrinsics))?;
    let noise = match (sigma > 0.0, quadratic) {
        (false, _) => NoiseModel::None,
        (true, false) => NoiseModel::Constant(sigma),
        (true, true) => NoiseModel::Quadratic(sigma),
    };
    let rendered = render_scene(&prims, &intr, size, noise, seed)?;
    write_depth_png(out, &rendered.depth.to_units(intr.depth_scale))?;
    if let Some(p) = out_truth {
        write(p, &format_scene(&rendered.primitives))?;
    }
    Ok(())
}

fn bench_inputs(scene: Option<&Path>, depth_dir: Option<&Path>, intr: &Intrinsics, size: (usize, usize)) -> Result<Vec<OrganizedCloud>> {
    if let Some(s) = scene {
        let prims = load_scene(s).with_context(|| format!("reading scene {}", s.display()))?;
        let rendered = render_scene(&prims, intr, size, NoiseModel::None, 0)?;
        return Ok(vec![backproject(&rendered.depth, intr)?]);
    }
    let dir = depth_dir.expect("clap requires --scene or --depth-dir");
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no PNG files in {}", dir.display());
    }
    files.iter().map(|f| load_cloud(f, intr)).collect()
}

fn run_bench(
    scene: Option<&Path>,
    depth_dir: Option<&Path>,
    intrinsics: Option<&Path>,
    reps: u64,
    size: (usize, usize),
    pipeline: &PipelineArgs,
) -> Result<()> {
    let cfg = pipeline.config();
    let intr = load_intrinsics(intrinsics)?;
    let clouds = bench_inputs(scene, depth_dir, &intr, size)?;
    for c in &clouds {
        extract(c, &cfg)?;
    }
    let mut runs: Vec<StageTimings> = Vec::with_capacity(reps as usize * clouds.len());
    for _ in 0..reps {
        for c in &clouds {
            runs.push(extract(c, &cfg)?.timings);
        }
    }
    print!("{}", timing_report(&runs));
    Ok(())
}

fn load_frame(models: &Path, labels: &Path) -> Result<primex_core::Frame> {
    let records = load_records(models).with_context(|| format!("reading records {}", models.display()))?;
    let image = read_label_png(labels).with_context(|| format!("reading labels {}", labels.display()))?;
    Ok(frame_from_records(&records, SegmentLabelImage::from_u8(&image)))
}

/// `Ok(false)` signals an under-constrained pose.
fn run_pose(prev: (&Path, &Path), curr: (&Path, &Path), odometry: &OdometryArgs) -> Result<bool> {
    let (match_cfg, pose_cfg) = odometry.configs();
    let prev = load_frame(prev.0, prev.1)?;
    let curr = load_frame(curr.0, curr.1)?;
    match estimate_frame_pose(&prev, &curr, &match_cfg, &pose_cfg) {
        Ok((est, matches)) => {
            println!("{}", format_pose(&est.pose));
            eprintln!(
                "{} plane and {} cylinder matches, {} iterations, converged={}",
                matches.planes.len(),
                matches.cylinders.len(),
                est.iterations.len(),
                est.converged
            );
            Ok(true)
        }
        Err(e @ Error::UnderConstrained { .. }) => {
            eprintln!("{e}");
            Ok(false)
        }
        Err(e) => Err(e.into()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Extract {
            depth,
            intrinsics,
            out_labels,
            out_models,
            timings,
            pipeline,
        } => run_extract(depth, intrinsics, out_labels.as_deref(), out_models.as_deref(), timings.as_deref(), pipeline).map(|_| true),
        Command::Synth {
            scene,
            intrinsics,
            sigma,
            quadratic_noise,
            noise_seed,
            width,
            height,
            out,
            out_truth,
        } => run_synth(scene, intrinsics, *sigma, *quadratic_noise, *noise_seed, (*width, *height), out, out_truth.as_deref()).map(|_| true),
        Command::Bench {
            scene,
            depth_dir,
            intrinsics,
            reps,
            width,
            height,
            pipeline,
        } => run_bench(scene.as_deref(), depth_dir.as_deref(), intrinsics.as_deref(), *reps, (*width, *height), pipeline).map(|_| true),
        Command::Pose {
            prev_models,
            prev_labels,
            curr_models,
            curr_labels,
            odometry,
        } => run_pose((prev_models, prev_labels), (curr_models, curr_labels), odometry),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
