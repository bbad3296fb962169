//! Operator surface for the pose-regression GAN pipeline: dataset
//! preparation, training, inference, trajectory evaluation, and plot
//! table emission.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use wganvo::dataset::{
    build_pairs, load_kitti_sequence, load_preprocessed, mirror_image, write_preprocessed,
    DatasetError, Frame, TrainingSample,
};
use wganvo::evaluation::{
    export_trajectory, import_trajectory, kitti_metric, plot_data, umeyama_align, EvalError,
    Trajectory,
};
use wganvo::geometry::compose_trajectory;
use wganvo::training::{
    infer_from_checkpoint, predictions_to_labels, synthetic_dataset, train, Regime, TrainConfig,
    TrainError,
};

#[derive(Parser)]
#[command(name = "wganvo", about = "Monocular visual odometry via an adversarially trained pose-regression critic", version)]
struct Cli {
    /// Seed for all randomness in the invoked subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Crop, downscale, and pair KITTI sequences into a training directory.
    Preprocess(PreprocessArgs),
    /// Generate the synthetic desk-scale dataset with a learnable motion cue.
    Synth(SynthArgs),
    /// Run one of the three training regimes.
    Train(TrainArgs),
    /// Predict relative motion over a preprocessed dataset.
    Infer(InferArgs),
    /// Score an estimated trajectory against ground truth.
    Eval(EvalArgs),
    /// Emit plot-ready CSV tables for paths and timings.
    Plot(PlotArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// KITTI odometry root containing sequences/ and poses/.
    #[arg(long)]
    kitti_root: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sequence ids, e.g. --sequences 00,01,02
    #[arg(long, value_delimiter = ',', required = true)]
    sequences: Vec<String>,
    /// Also emit mirrored twins with conjugated labels.
    #[arg(long)]
    mirror: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pairs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file mirroring the training config schema.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preprocessed dataset directory (index.jsonl + frames/).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config-file regime.
    #[arg(long)]
    regime: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    total_iters: Option<usize>,
    #[arg(long)]
    adversarial_iters: Option<usize>,
    #[arg(long)]
    pose_iters: Option<usize>,
    #[arg(long)]
    test_sequence: Option<String>,
    /// Critic/generator width; smaller is faster.
    #[arg(long)]
    base_channels: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory: trajectory.txt + timings.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimated trajectory, KITTI pose format.
    #[arg(long)]
    est: PathBuf,
    /// Ground-truth trajectory, KITTI pose format.
    #[arg(long)]
    gt: PathBuf,
    /// Alignment before scoring: none | se3 | sim3.
    #[arg(long, default_value = "none")]
    align: String,
}

#[derive(Args)]
struct PlotArgs {
    /// Trajectory files (KITTI pose format); repeatable.
    #[arg(long = "traj", required = true)]
    trajectories: Vec<PathBuf>,
    /// Timing CSV with one milliseconds value per line.
    #[arg(long)]
    timings: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// User errors exit 1, internal errors exit 2; both emit one JSON line on
/// stderr.
struct CliError {
    user: bool,
    message: String,
}

impl CliError {
    fn user(message: impl Into<String>) -> Self {
        CliError {
            user: true,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        CliError {
            user: false,
            message: message.into(),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io(_) | DatasetError::Image { .. } => CliError::internal(e.to_string()),
            _ => CliError::user(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Holdout { .. } => CliError::user(e.to_string()),
            TrainError::Dataset(d) => d.into(),
            _ => CliError::internal(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(_) => CliError::internal(e.to_string()),
            _ => CliError::user(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::internal(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::init();
    // Usage problems are user errors (exit 1); clap's default exit 2 is
    // reserved for internal failures here.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = if e.user { "user" } else { "internal" };
            eprintln!(
                "{}",
                serde_json::json!({"error": e.message, "kind": kind})
            );
            ExitCode::from(if e.user { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Synth(a) => cmd_synth(a, seed),
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Plot(a) => cmd_plot(a),
    }
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<(), CliError> {
    if a.sequences.is_empty() {
        return Err(CliError::user("at least one sequence is required"));
    }
    let mut samples: Vec<TrainingSample> = Vec::new();
    for seq in &a.sequences {
        let loaded = load_kitti_sequence(&a.kitti_root, seq).map_err(|e| {
            CliError::user(format!("sequence {seq}: {e}"))
        })?;
        samples.extend(build_pairs(&loaded.frames, &loaded.poses)?);
        if a.mirror {
            let mirrored: Vec<Frame> = loaded.frames.iter().map(mirror_image).collect();
            samples.extend(build_pairs(&mirrored, &loaded.poses)?);
        }
    }
    // Clean partial output on failure so reruns start fresh.
    if let Err(e) = write_preprocessed(&a.out, &samples) {
        let _ = std::fs::remove_dir_all(&a.out);
        return Err(e.into());
    }
    println!("wrote {} pairs to {}", samples.len(), a.out.display());
    Ok(())
}

fn cmd_synth(a: SynthArgs, seed: u64) -> Result<(), CliError> {
    if a.pairs == 0 {
        return Err(CliError::user("--pairs must be at least 1"));
    }
    let samples = synthetic_dataset(a.pairs, seed);
    write_preprocessed(&a.out, &samples)?;
    println!("wrote {} synthetic pairs to {}", samples.len(), a.out.display());
    Ok(())
}

fn parse_regime(s: &str) -> Result<Regime, CliError> {
    match s {
        "semi_supervised" => Ok(Regime::SemiSupervised),
        "only_vo" => Ok(Regime::OnlyVo),
        "simultaneous" => Ok(Regime::Simultaneous),
        other => Err(CliError::user(format!(
            "unknown regime {other:?}; expected semi_supervised, only_vo, or simultaneous"
        ))),
    }
}

/// Precedence: flags > config file > defaults.
fn resolve_train_config(a: &TrainArgs, seed: Option<u64>) -> Result<TrainConfig, CliError> {
    let mut config = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::user(format!("config {}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(r) = &a.regime {
        config.regime = parse_regime(r)?;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = a.beta {
        config.beta = v;
    }
    if let Some(v) = a.total_iters {
        config.total_iters = v;
    }
    if let Some(v) = a.adversarial_iters {
        config.adversarial_iters = v;
    }
    if let Some(v) = a.pose_iters {
        config.pose_iters = v;
    }
    if let Some(v) = &a.test_sequence {
        config.test_sequence = Some(v.clone());
    }
    if let Some(v) = a.base_channels {
        config.model.base_channels = v;
    }
    if let Some(v) = seed {
        config.seed = v;
    }
    Ok(config)
}

fn cmd_train(a: TrainArgs, seed: Option<u64>) -> Result<(), CliError> {
    let config = resolve_train_config(&a, seed)?;
    config.validate()?;
    println!(
        "resolved config: {}",
        serde_json::to_string(&config).map_err(|e| CliError::internal(e.to_string()))?
    );
    let samples = load_preprocessed(&a.data)?;
    let outcome = train(&config, &samples, &a.out)?;
    println!(
        "trained {} iterations; checkpoint at {}",
        outcome.log.len(),
        outcome.checkpoint_path.display()
    );
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<(), CliError> {
    let samples = load_preprocessed(&a.data)?;
    let preds = infer_from_checkpoint(&a.checkpoint, &samples)?;
    std::fs::create_dir_all(&a.out)?;

    let labels = predictions_to_labels(&preds);
    let traj = Trajectory::new(compose_trajectory(&labels));
    export_trajectory(&traj, &a.out.join("trajectory.txt"))?;

    let timings: Vec<String> = preds.iter().map(|p| p.wall_ms.to_string()).collect();
    std::fs::write(a.out.join("timings.csv"), timings.join("\n") + "\n")?;
    let mean = preds.iter().map(|p| p.wall_ms).sum::<f64>() / preds.len().max(1) as f64;
    println!(
        "inferred {} pairs; mean {:.2} ms/frame; wrote {}",
        preds.len(),
        mean,
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let est = import_trajectory(&a.est)?;
    let gt = import_trajectory(&a.gt)?;
    let est = match a.align.as_str() {
        "none" => est,
        "se3" => umeyama_align(&est, &gt, false)?.aligned,
        "sim3" => umeyama_align(&est, &gt, true)?.aligned,
        other => {
            return Err(CliError::user(format!(
                "unknown alignment {other:?}; expected none, se3, or sim3"
            )))
        }
    };
    match kitti_metric(&est, &gt)? {
        Some(report) => println!("{:.2} {:.2}", report.t_rel, report.r_rel),
        None => {
            return Err(CliError::user(
                "trajectory shorter than the smallest 100 m subsequence",
            ))
        }
    }
    Ok(())
}

fn read_timings(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<f64>()
                .map_err(|e| CliError::user(format!("timing value {l:?}: {e}")))
        })
        .collect()
}

fn cmd_plot(a: PlotArgs) -> Result<(), CliError> {
    let mut loaded = Vec::new();
    for path in &a.trajectories {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("trajectory")
            .to_string();
        loaded.push((name, import_trajectory(path)?));
    }
    let refs: Vec<(String, &Trajectory)> =
        loaded.iter().map(|(n, t)| (n.clone(), t)).collect();
    let timings = match &a.timings {
        Some(p) => Some(read_timings(p)?),
        None => None,
    };
    let data = plot_data(&refs, timings.as_deref())?;
    std::fs::create_dir_all(&a.out)?;
    for path_table in &data.paths {
        std::fs::write(
            a.out.join(format!("path_{}.csv", path_table.name)),
            path_table.to_csv(),
        )?;
    }
    if let Some(t) = &data.timing {
        std::fs::write(a.out.join("timing_summary.csv"), t.to_csv())?;
    }
    println!("wrote plot tables to {}", a.out.display());
    Ok(())
}
