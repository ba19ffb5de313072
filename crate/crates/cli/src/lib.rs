//! `tavo` command-line surface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error. Every
//! subcommand validates its inputs before writing anything.

pub mod plot;

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use tavo_core::io::{read_dataset, read_trajectory, write_dataset, write_trajectory};
use tavo_core::metrics::{evaluate, AlignMode, EvalOptions, ScaleErrorMode, DESK_LENGTHS};
use tavo_core::synth::{generate_sequence, resample_frequency, SceneSpec};
use tavo_core::Trajectory;
use tavo_model::ablation::{run_ablation, AblationGrid, AblationName, DataSpec};
use tavo_model::checkpoint::{checkpoint_bytes, load_checkpoint};
use tavo_model::infer::{ground_truth_trajectory, infer_trajectory};
use tavo_model::{train, TrainConfig, TrainingData};

/// Default output directory when `--out` is omitted.
pub const OUT_DIR_ENV: &str = "TAVO_OUT_DIR";

pub const RUN_CONFIG_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.tavo";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

/// Timestamps closer than this are the same frame.
const TIME_MATCH_TOL: f64 = 1e-6;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "error: {m}"),
        }
    }
}

fn data(e: impl fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "tavo", version, about = "Time-conditioned two-frame visual odometry at desk scale")]
pub struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthetic data generation.
    Synth {
        #[command(subcommand)]
        command: SynthCommand,
    },
    /// Train a model; writes checkpoint, log and config into a directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two-frame inference over a dataset, accumulated into a trajectory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Inference rate in Hz.
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a predicted trajectory with ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Segment lengths in meters.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        lengths: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value_t = SErrArg::Rel)]
        s_err_mode: SErrArg,
        #[arg(long, value_enum, default_value_t = AlignArg::Rigid)]
        align: AlignArg,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Frame-skip a dataset by an integer factor.
    Resample {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation grid.
    Ablate {
        /// token_size, freq_set, inference_rate or no_time_layers.
        #[arg(long)]
        name: String,
        #[arg(long)]
        grid: PathBuf,
        /// Also write the table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// X-Z projection of one or more trajectories to a PNG file.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        traj: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Image side in pixels.
        #[arg(long, default_value_t = 512)]
        size: u32,
    },
}

#[derive(Subcommand, Debug)]
enum SynthCommand {
    /// Render a sequence into a dataset directory.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Frame skip of the stored pairs.
        #[arg(long, default_value_t = 1)]
        skip: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SErrArg {
    Rel,
    Abs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AlignArg {
    Rigid,
    Sim3,
}

/// Configuration file of `train`: training options plus the synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let c: RunConfig = toml::from_str(text).map_err(data)?;
        if c.version != RUN_CONFIG_VERSION {
            return Err(CliError::Data(format!(
                "config version {} unsupported (expected {RUN_CONFIG_VERSION})",
                c.version
            )));
        }
        c.train.validate().map_err(data)?;
        if c.data.train_sequences == 0 {
            return Err(CliError::Data("data.train_sequences must be positive".into()));
        }
        Ok(c)
    }
}

/// `--out`, else `$TAVO_OUT_DIR/<default_name>`.
fn output_path(out: Option<PathBuf>, default_name: &str) -> CliResult<PathBuf> {
    match out {
        Some(p) => Ok(p),
        None => match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => Ok(PathBuf::from(dir).join(default_name)),
            _ => Err(CliError::Usage(format!("--out is required when {OUT_DIR_ENV} is not set"))),
        },
    }
}

fn ensure_absent(path: &Path) -> CliResult<()> {
    if path.exists() {
        return Err(CliError::Data(format!("{} already exists", path.display())));
    }
    Ok(())
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn create_parent(path: &Path) -> CliResult<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).map_err(data)?;
    }
    Ok(())
}

/// Writes `bytes` through a sibling temporary file and a rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    create_parent(path)?;
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(data)?;
    fs::rename(&tmp, path).map_err(data)
}

fn cmd_synth_gen(spec: &Path, out: Option<PathBuf>, skip: usize) -> CliResult<()> {
    let spec = SceneSpec::from_toml(&read_text(spec)?).map_err(data)?;
    let out = output_path(out, "dataset")?;
    ensure_absent(&out)?;
    if skip == 0 || skip >= spec.frame_count() {
        return Err(CliError::Data(format!("skip {skip} invalid for {} frames", spec.frame_count())));
    }
    let (pairs, _) = generate_sequence(&spec).map_err(data)?;
    let pairs = resample_frequency(&pairs, skip).map_err(data)?;
    let traj = ground_truth_trajectory(&pairs).map_err(data)?;
    write_dataset(&out, &spec, skip, &pairs, &traj).map_err(data)?;
    println!("wrote {} pairs to {}", pairs.len(), out.display());
    Ok(())
}

fn cmd_train(config: &Path, out: Option<PathBuf>) -> CliResult<()> {
    let text = read_text(config)?;
    let run = RunConfig::from_toml(&text)?;
    let out = output_path(out, "run")?;
    ensure_absent(&out)?;
    let sequences = run.data.train_set().map_err(data)?;
    let kmax = run.train.skips().map_err(data)?.into_iter().max().unwrap_or(1);
    if sequences.iter().any(|s| s.len() <= kmax) {
        return Err(CliError::Data(format!("training sequences are too short for frame skip {kmax}")));
    }
    let mut log = Vec::new();
    let outcome = train(&run.train, &TrainingData { sequences: &sequences }, Some(&mut log)).map_err(data)?;
    let ckpt = checkpoint_bytes(&outcome.net, Some(&run.train)).map_err(data)?;

    create_parent(&out)?;
    let name = out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = out.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    let _ = fs::remove_dir_all(&tmp);
    let write = || -> std::io::Result<()> {
        fs::create_dir_all(&tmp)?;
        fs::write(tmp.join(CHECKPOINT_FILE), &ckpt)?;
        fs::write(tmp.join(LOG_FILE), &log)?;
        fs::write(tmp.join(CONFIG_FILE), toml::to_string(&run).expect("run config serializes"))?;
        fs::rename(&tmp, &out)
    };
    if let Err(e) = write() {
        let _ = fs::remove_dir_all(&tmp);
        return Err(data(e));
    }
    if let Some(last) = outcome.log.last() {
        println!("trained {} iterations, final loss {:.4}", outcome.log.len(), last.loss);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_infer(ckpt: &Path, dir: &Path, rate: f64, out: Option<PathBuf>) -> CliResult<()> {
    let (net, _) = load_checkpoint(ckpt).map_err(|e| CliError::Data(format!("{}: {e}", ckpt.display())))?;
    let ds = read_dataset(dir).map_err(data)?;
    let out = output_path(out, "traj.txt")?;
    let stored = ds.manifest.base_rate / ds.manifest.skip as f64;
    let k = stored / rate;
    if !(rate > 0.0) || (k - k.round()).abs() > 1e-9 || k.round() < 1.0 {
        return Err(CliError::Data(format!("rate {rate} Hz is not the stored {stored} Hz divided by an integer")));
    }
    let k = k.round() as usize;
    let cfg = &net.config;
    let first = &ds.pairs[0].intrinsics;
    if (first.width, first.height) != (cfg.width, cfg.height) {
        return Err(CliError::Data(format!(
            "dataset is {}x{}, checkpoint expects {}x{}",
            first.width, first.height, cfg.width, cfg.height
        )));
    }
    let pairs = resample_frequency(&ds.pairs, k).map_err(data)?;
    let traj = infer_trajectory(&net, &pairs).map_err(data)?;
    create_parent(&out)?;
    write_trajectory(&traj, &out).map_err(data)?;
    println!("wrote {} poses at {rate} Hz to {}", traj.len(), out.display());
    Ok(())
}

/// Ground truth restricted to the prediction's timestamps and re-anchored,
/// so a base-rate pose file can score a lower-rate prediction.
pub fn match_timestamps(pred: &Trajectory, gt: &Trajectory) -> CliResult<Trajectory> {
    if pred.len() == gt.len() {
        return Ok(gt.clone());
    }
    let mut poses = Vec::with_capacity(pred.len());
    let mut j = 0;
    for t in pred.timestamps() {
        while j < gt.len() && gt.timestamps()[j] < t - TIME_MATCH_TOL {
            j += 1;
        }
        if j == gt.len() || (gt.timestamps()[j] - t).abs() > TIME_MATCH_TOL {
            return Err(CliError::Data(format!("ground truth has no pose at t = {t}")));
        }
        poses.push(gt.poses()[j]);
    }
    Ok(Trajectory::new(poses, pred.timestamps().to_vec()).map_err(data)?.anchored())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    pred: &Path,
    gt: &Path,
    lengths: Option<Vec<f64>>,
    s_err: SErrArg,
    align: AlignArg,
    out: Option<PathBuf>,
    json: bool,
) -> CliResult<()> {
    let lengths = lengths.unwrap_or_else(|| DESK_LENGTHS.to_vec());
    if lengths.is_empty() || lengths.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
        return Err(CliError::Usage("--lengths must be positive".into()));
    }
    let p = read_trajectory(pred, 1.0).map_err(data)?;
    let g = read_trajectory(gt, 1.0).map_err(data)?;
    let g = match_timestamps(&p, &g)?;
    let opts = EvalOptions {
        lengths,
        s_err_mode: match s_err {
            SErrArg::Rel => ScaleErrorMode::Rel,
            SErrArg::Abs => ScaleErrorMode::Abs,
        },
        align: match align {
            AlignArg::Rigid => AlignMode::Rigid,
            AlignArg::Sim3 => AlignMode::Sim3,
        },
    };
    let report = evaluate(&p, &g, &opts).map_err(data)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(out) = out {
        write_atomic(&out, text.as_bytes())?;
    }
    if json {
        println!("{text}");
    } else {
        print!("{report}");
    }
    Ok(())
}

fn cmd_resample(input: &Path, k: usize, out: Option<PathBuf>) -> CliResult<()> {
    let ds = read_dataset(input).map_err(data)?;
    let out = output_path(out, "resampled")?;
    ensure_absent(&out)?;
    if k == 0 || k > ds.pairs.len() {
        return Err(CliError::Data(format!("k = {k} invalid for {} pairs", ds.pairs.len())));
    }
    let pairs = resample_frequency(&ds.pairs, k).map_err(data)?;
    let traj = if k == 1 {
        ds.trajectory.clone()
    } else {
        ground_truth_trajectory(&pairs).map_err(data)?
    };
    write_dataset(&out, &ds.manifest.spec, ds.manifest.skip * k, &pairs, &traj).map_err(data)?;
    println!("wrote {} pairs to {}", pairs.len(), out.display());
    Ok(())
}

fn cmd_ablate(name: &str, grid: &Path, out: Option<PathBuf>) -> CliResult<()> {
    let name: AblationName = name.parse().map_err(|e: tavo_model::Error| CliError::Usage(e.to_string()))?;
    let grid = AblationGrid::from_toml(&read_text(grid)?).map_err(data)?;
    if let Some(o) = &out {
        ensure_absent(o)?;
    }
    let table = run_ablation(name, &grid).map_err(data)?;
    if let Some(o) = out {
        write_atomic(&o, serde_json::to_string_pretty(&table).expect("table serializes").as_bytes())?;
    }
    print!("{table}");
    Ok(())
}

fn cmd_plot(trajs: &[PathBuf], out: Option<PathBuf>, size: u32) -> CliResult<()> {
    if !(64..=8192).contains(&size) {
        return Err(CliError::Usage("--size must be in 64..=8192".into()));
    }
    let loaded = trajs
        .iter()
        .map(|p| read_trajectory(p, 1.0).map_err(|e| CliError::Data(format!("{}: {e}", p.display()))))
        .collect::<CliResult<Vec<_>>>()?;
    let out = output_path(out, "trajectories.png")?;
    let img = plot::plot_xz(&loaded, size);
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png).map_err(data)?;
    write_atomic(&out, &bytes)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth {
            command: SynthCommand::Gen { spec, out, skip },
        } => cmd_synth_gen(&spec, out, skip),
        Command::Train { config, out } => cmd_train(&config, out),
        Command::Infer { ckpt, data, rate, out } => cmd_infer(&ckpt, &data, rate, out),
        Command::Eval {
            pred,
            gt,
            lengths,
            s_err_mode,
            align,
            out,
            json,
        } => cmd_eval(&pred, &gt, lengths, s_err_mode, align, out, json),
        Command::Resample { input, k, out } => cmd_resample(&input, k, out),
        Command::Ablate { name, grid, out } => cmd_ablate(&name, &grid, out),
        Command::Plot { traj, out, size } => cmd_plot(&traj, out, size),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
