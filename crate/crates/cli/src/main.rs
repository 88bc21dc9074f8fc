//! Command-line front end: synthesize oracle scenes, perturb them into window
//! predictions, align, evaluate and export.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mmalign::aligner::{align, AlignConfig, Reconstruction};
use mmalign::io::{
    export_ply, export_trajectory, read_bundle, write_bundle, Bundle, CameraRecord,
    GroupTruthRecord, Provenance,
};
use mmalign::metrics::{evaluate_depth, traj_metrics};
use mmalign::oracle::{generate_scene, make_predictions, PerturbSpec, Scene, SceneSpec, Trajectory};
use mmalign::windowing::{build_window_index, WindowGroup};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "mmalign", version, about = "Align windowed point, disparity and ray-map predictions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render an oracle scene into a ground-truth bundle.
    Synth(SynthArgs),
    /// Turn a scene bundle into per-window predictions with injected ambiguity.
    Perturb(PerturbArgs),
    /// Align a prediction bundle into a result bundle.
    Align(AlignArgs),
    /// Depth metrics of a result bundle against ground truth.
    EvalDepth(EvalArgs),
    /// Trajectory metrics of a result bundle against ground truth.
    EvalPose(EvalPoseArgs),
    /// Write the fused point cloud of a result bundle as PLY.
    ExportPly(ExportPlyArgs),
    /// Write the cameras of a bundle as a TUM trajectory.
    ExportTraj(ExportTrajArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TrajectoryArg {
    Static,
    Orbit,
    Dolly,
    Sinusoid,
}

impl From<TrajectoryArg> for Trajectory {
    fn from(t: TrajectoryArg) -> Self {
        match t {
            TrajectoryArg::Static => Trajectory::Static,
            TrajectoryArg::Orbit => Trajectory::Orbit,
            TrajectoryArg::Dolly => Trajectory::Dolly,
            TrajectoryArg::Sinusoid => Trajectory::Sinusoid,
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output bundle directory.
    #[arg(long, short)]
    out: PathBuf,
    /// JSON scene spec; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, value_enum)]
    trajectory: Option<TrajectoryArg>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PerturbArgs {
    /// Scene bundle directory.
    #[arg(long, short)]
    input: PathBuf,
    /// Output prediction bundle directory.
    #[arg(long, short)]
    out: PathBuf,
    /// JSON perturbation spec; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    window: usize,
    /// Stride of the emitted windows; 1 emits every start so `align` can pick any stride.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Relative Gaussian noise on points, disparity and rays.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    no_rays: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct AlignArgs {
    /// Prediction bundle directory.
    #[arg(long, short)]
    input: PathBuf,
    /// Output result bundle directory.
    #[arg(long, short)]
    out: PathBuf,
    /// JSON alignment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    window: usize,
    #[arg(long, default_value_t = 4)]
    stride: usize,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    align_start: Option<usize>,
    #[arg(long)]
    alpha1: Option<f64>,
    #[arg(long)]
    alpha2: Option<f64>,
    #[arg(long)]
    alpha3: Option<f64>,
    #[arg(long)]
    alpha4: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write one loss-trace line per iteration to this file.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Result bundle directory.
    #[arg(long)]
    result: PathBuf,
    /// Ground-truth scene bundle directory.
    #[arg(long)]
    gt: PathBuf,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalPoseArgs {
    #[command(flatten)]
    common: EvalArgs,
    /// Frame interval of the relative pose errors.
    #[arg(long, default_value_t = 1)]
    rpe_delta: usize,
}

#[derive(Args, Debug)]
struct ExportPlyArgs {
    /// Result bundle directory.
    #[arg(long)]
    result: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    /// Keep every `stride`-th row and column.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Smallest exported disparity.
    #[arg(long, default_value_t = AlignConfig::default().d_min)]
    d_min: f64,
}

#[derive(Args, Debug)]
struct ExportTrajArgs {
    /// Any bundle with cameras.
    #[arg(long)]
    result: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut spec: SceneSpec = match &args.spec {
        Some(p) => read_json(p)?,
        None => SceneSpec::default(),
    };
    spec.frames = args.frames.unwrap_or(spec.frames);
    spec.height = args.height.unwrap_or(spec.height);
    spec.width = args.width.unwrap_or(spec.width);
    spec.trajectory = args.trajectory.map(Into::into).unwrap_or(spec.trajectory);
    spec.seed = args.seed.unwrap_or(spec.seed);
    let scene = generate_scene(&spec)?;
    write_bundle(&Bundle::from_scene(&scene), &args.out)?;
    log::info!("wrote {} frames of {}x{} to {}", spec.frames, spec.height, spec.width, args.out.display());
    Ok(())
}

fn scene_from_bundle(b: &Bundle) -> Result<Scene> {
    let (Some(cameras), Some(disparity), Some(points), Some(rays)) = (&b.cameras, &b.disparity, &b.points, &b.rays) else {
        bail!("scene bundle needs cameras, disparity, points and rays");
    };
    if [cameras.len(), disparity.len(), points.len(), rays.len()].iter().any(|&n| n != b.frames) {
        bail!("scene bundle has inconsistent per-frame counts");
    }
    let spec = match &b.provenance {
        Provenance::Oracle { scene, .. } => scene.clone(),
        _ => SceneSpec {
            frames: b.frames,
            height: b.height,
            width: b.width,
            ..SceneSpec::default()
        },
    };
    Ok(Scene {
        spec,
        intrinsics: cameras.iter().map(|c| c.intrinsics).collect(),
        poses: cameras.iter().map(CameraRecord::pose).collect(),
        disparity: disparity.clone(),
        points: points.clone(),
        rays: rays.clone(),
    })
}

fn perturb(args: PerturbArgs) -> Result<()> {
    let input = read_bundle(&args.input)?;
    let scene = scene_from_bundle(&input)?;
    let mut spec: PerturbSpec = match &args.spec {
        Some(p) => read_json(p)?,
        None => PerturbSpec::default(),
    };
    if let Some(level) = args.noise {
        spec.point_noise = level;
        spec.disparity_noise = level;
        spec.ray_noise = level;
    }
    spec.drop_rays |= args.no_rays;
    spec.seed = args.seed.unwrap_or(spec.seed);
    let index = build_window_index(scene.frames(), args.window, args.stride)?;
    let (groups, truths) = make_predictions(&scene, &index, &spec);
    let provenance = match input.provenance {
        Provenance::Oracle { scene, .. } => Provenance::Oracle {
            scene,
            perturb: Some(spec),
        },
        other => other,
    };
    let mut out = Bundle::empty(input.frames, input.height, input.width, provenance);
    out.window = Some(args.window);
    out.stride = Some(args.stride);
    out.groups = groups;
    out.group_truth = Some(truths.iter().map(GroupTruthRecord::from).collect());
    write_bundle(&out, &args.out)?;
    log::info!("wrote {} window groups to {}", index.starts.len(), args.out.display());
    Ok(())
}

fn select_groups(bundle: &Bundle, starts: &[usize]) -> Result<Vec<WindowGroup>> {
    let by_start: BTreeMap<usize, &WindowGroup> = bundle.groups.iter().map(|g| (g.start, g)).collect();
    starts
        .iter()
        .map(|s| {
            by_start
                .get(s)
                .map(|g| (*g).clone())
                .with_context(|| format!("prediction bundle has no window group starting at frame {s}"))
        })
        .collect()
}

fn align_cmd(args: AlignArgs) -> Result<()> {
    let input = read_bundle(&args.input)?;
    let mut config: AlignConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => AlignConfig::default(),
    };
    config.iters_total = args.iters.unwrap_or(config.iters_total);
    config.align_start = args.align_start.unwrap_or(config.align_start.min(config.iters_total));
    for (k, a) in [args.alpha1, args.alpha2, args.alpha3, args.alpha4].into_iter().enumerate() {
        if let Some(a) = a {
            config.alpha[k] = a;
        }
    }
    config.seed = args.seed.unwrap_or(config.seed);
    config.validate()?;

    let index = build_window_index(input.frames, args.window, args.stride)?;
    if let Some(v) = input.window.filter(|&v| v != args.window) {
        bail!("prediction bundle holds windows of {v} frames, --window is {}", args.window);
    }
    let groups = select_groups(&input, &index.starts)?;
    log::info!("aligning {} frames with window starts {:?}", input.frames, index.starts);
    let out = align(&groups, &index, &config)?;
    if out.ray_failures > 0 {
        log::warn!("{} ray maps could not be solved", out.ray_failures);
    }
    if let Some(last) = out.trace.last() {
        log::info!("final {last}");
    }

    let rec = out.reconstruction();
    let mut parameters = BTreeMap::new();
    parameters.insert("config".to_string(), serde_json::to_value(&config)?);
    parameters.insert("window".to_string(), args.window.into());
    parameters.insert("stride".to_string(), args.stride.into());
    parameters.insert("starts".to_string(), serde_json::to_value(&index.starts)?);
    let mut result = Bundle::empty(rec.frames(), rec.height, rec.width, Provenance::Aligned { parameters });
    result.window = Some(args.window);
    result.stride = Some(args.stride);
    result.cameras = Some(
        rec.intrinsics
            .iter()
            .zip(&rec.poses)
            .map(|(k, p)| CameraRecord::new(*k, p))
            .collect(),
    );
    result.disparity = Some(rec.disparity);
    write_bundle(&result, &args.out)?;
    if let Some(path) = &args.trace {
        let text: String = out.trace.iter().map(|r| format!("{r}\n")).collect();
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn reconstruction(b: &Bundle) -> Result<Reconstruction> {
    let (Some(cameras), Some(disparity)) = (&b.cameras, &b.disparity) else {
        bail!("bundle needs cameras and disparity");
    };
    if cameras.len() != disparity.len() {
        bail!("bundle has {} cameras but {} disparity maps", cameras.len(), disparity.len());
    }
    Ok(Reconstruction {
        height: b.height,
        width: b.width,
        intrinsics: cameras.iter().map(|c| c.intrinsics).collect(),
        poses: cameras.iter().map(CameraRecord::pose).collect(),
        disparity: disparity.clone(),
    })
}

fn emit(report: &str, out: Option<&Path>) -> Result<()> {
    print!("{report}");
    if let Some(path) = out {
        fs::write(path, report).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn eval_depth(args: EvalArgs) -> Result<()> {
    let pred = reconstruction(&read_bundle(&args.result)?)?;
    let gt = reconstruction(&read_bundle(&args.gt)?)?;
    let report = evaluate_depth(&pred.disparity, &gt.disparity, None)?;
    emit(&report.to_kv(), args.out.as_deref())
}

fn eval_pose(args: EvalPoseArgs) -> Result<()> {
    let pred = reconstruction(&read_bundle(&args.common.result)?)?;
    let gt = reconstruction(&read_bundle(&args.common.gt)?)?;
    let report = traj_metrics(&pred.poses, &gt.poses, args.rpe_delta)?;
    emit(&report.to_kv(), args.common.out.as_deref())
}

fn export_ply_cmd(args: ExportPlyArgs) -> Result<()> {
    let rec = reconstruction(&read_bundle(&args.result)?)?;
    let n = export_ply(&rec, &args.out, args.stride, args.d_min)?;
    log::info!("wrote {n} vertices to {}", args.out.display());
    Ok(())
}

fn export_traj_cmd(args: ExportTrajArgs) -> Result<()> {
    let bundle = read_bundle(&args.result)?;
    let poses = bundle.poses().context("bundle has no cameras")?;
    export_trajectory(&poses, &args.out)?;
    Ok(())
}

fn init_logging() {
    let level = match std::env::var("GEO4D_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Perturb(a) => perturb(a),
        Command::Align(a) => align_cmd(a),
        Command::EvalDepth(a) => eval_depth(a),
        Command::EvalPose(a) => eval_pose(a),
        Command::ExportPly(a) => export_ply_cmd(a),
        Command::ExportTraj(a) => export_traj_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
