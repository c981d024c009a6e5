//! `densecount`: train, evaluate, prune and run crowd-counting networks.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (including partial
//! evaluations), 3 numeric abort.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use densecount::evaluator::{evaluate, export_density, EvalError};
use densecount::groundtruth::{generate_density_map, AnnotationSet, DensityMap, GroundTruthError};
use densecount::pruner::{apply_plan, PruneError, PruningPlan};
use densecount::trainer::{
    infer_count, load_dataset, load_image, pad_to_multiple, split_validation, train, LoadReport, TrainConfig,
    TrainError, OUTPUT_STRIDE,
};
use densecount::zoo::{self, Checkpoint, CheckpointError, TrainingMetadata, ZooError};

#[derive(Parser, Debug)]
#[command(
    name = "densecount",
    version,
    about = "Crowd-density training, pruning and evaluation"
)]
struct Cli {
    /// Seed for initialization, data order and augmentation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network on a dataset directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Architecture to initialize when no checkpoint is given.
        #[arg(long, default_value = zoo::presets::CCNN)]
        arch: String,
        /// Resume from (or fine-tune) these weights.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Count every image of a dataset and write a CSV report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Apply a channel-pruning plan to a checkpoint.
    Prune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count the people in one image.
    Count {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Write the predicted map as `<base>.dmap` and `<base>.pgm`.
        #[arg(long)]
        export_density: Option<PathBuf>,
    },
    /// Render a ground-truth density map from point annotations.
    Gt {
        #[arg(long)]
        ann: PathBuf,
        #[arg(long, default_value_t = 15.0)]
        sigma: f64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the trainable parameter count.
    Params(ParamsArgs),
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct ParamsArgs {
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric abort: {m}"),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            TrainError::Zoo(z) => z.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ZooError> for CliError {
    fn from(e: ZooError) -> Self {
        match e {
            ZooError::UnknownArchitecture(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PruneError> for CliError {
    fn from(e: PruneError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<GroundTruthError> for CliError {
    fn from(e: GroundTruthError) -> Self {
        match e {
            GroundTruthError::InvalidArgument(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

/// Reads a control file (training config or pruning plan). These are part of
/// the invocation, so a missing or malformed one is a usage error.
fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("DENSECOUNT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| {
        CliError::Usage(format!(
            "DENSECOUNT_THREADS must be a non-negative integer, got '{raw}'"
        ))
    })?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn cmd_train(
    config: &Path,
    data: &Path,
    out: &Path,
    arch: &str,
    init: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut config: TrainConfig = read_json(config)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.checkpoint_dir = Some(out.to_path_buf());
    config.validate()?;
    let dataset = load_dataset(data)?;
    for (id, reason) in &dataset.failures {
        log::warn!("skipping {id}: {reason}");
    }
    if dataset.samples.is_empty() {
        return Err(CliError::Data(format!("no usable images under {}", data.display())));
    }
    let network = match init {
        Some(path) => Checkpoint::read(path)?.to_network()?,
        None => {
            let mut n = zoo::build(arch)?;
            n.kaiming_init(config.seed);
            n
        }
    };
    let (train_idx, val_idx) = split_validation(dataset.samples.len(), config.val_count, config.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset.samples[i].clone()).collect::<Vec<_>>();
    let outcome = train(network, &pick(&train_idx), &pick(&val_idx), &config)?;
    let TrainingMetadata {
        epoch, best_val_mae, ..
    } = outcome.best.metadata;
    match best_val_mae {
        Some(mae) => println!("best validation MAE {mae} at epoch {epoch}"),
        None => println!("finished {} steps without validation", outcome.steps),
    }
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &Path, report: &Path) -> Result<(), CliError> {
    let network = Checkpoint::read(ckpt)?.to_network()?;
    let dataset: LoadReport = load_dataset(data)?;
    let result = evaluate(&network, &dataset)?;
    result.write_csv(report)?;
    println!(
        "MAE {} MSE {} over {} images",
        result.mae,
        result.mse,
        result.rows.len()
    );
    if result.is_partial() {
        return Err(CliError::Data(format!(
            "{} item(s) could not be evaluated; see {}",
            result.failures.len(),
            report.display()
        )));
    }
    Ok(())
}

fn cmd_prune(ckpt: &Path, plan: &Path, out: &Path) -> Result<(), CliError> {
    let source = Checkpoint::read(ckpt)?;
    let plan: PruningPlan = read_json(plan)?;
    let pruned = apply_plan(&source.to_network()?, &plan)?;
    Checkpoint::from_network(&pruned, source.metadata).write(out)?;
    println!("{} -> {} parameters", source.weights.len(), pruned.param_count());
    Ok(())
}

fn cmd_count(ckpt: &Path, image: &Path, export: Option<&Path>) -> Result<(), CliError> {
    let network = Checkpoint::read(ckpt)?.to_network()?;
    let image = load_image(image)?;
    println!("{}", infer_count(&network, &image)?);
    if let Some(base) = export {
        let padded = pad_to_multiple(&image, OUTPUT_STRIDE);
        let output = network.predict(&padded).map_err(TrainError::from)?;
        let scale = output.shape()[2] as f64 / padded.shape()[2] as f64;
        let map = DensityMap::from_tensor(&output, scale)?;
        export_density(&map, base)?;
    }
    Ok(())
}

fn cmd_gt(ann: &Path, sigma: f64, scale: f64, out: &Path) -> Result<(), CliError> {
    let annotations = AnnotationSet::from_json_file(ann)?;
    let map = generate_density_map(&annotations, sigma, scale)?;
    export_density(&map, out)?;
    println!("{}", map.sum());
    Ok(())
}

fn cmd_params(args: &ParamsArgs) -> Result<(), CliError> {
    let count = match (&args.arch, &args.ckpt) {
        (Some(arch), _) => zoo::presets::by_name(arch)?.param_count(),
        (_, Some(ckpt)) => Checkpoint::read(ckpt)?.spec.param_count(),
        (None, None) => unreachable!("clap requires one of --arch or --ckpt"),
    };
    println!("{count}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match &cli.command {
        Command::Train {
            config,
            data,
            out,
            arch,
            init,
        } => cmd_train(config, data, out, arch, init.as_deref(), cli.seed),
        Command::Eval { ckpt, data, report } => cmd_eval(ckpt, data, report),
        Command::Prune { ckpt, plan, out } => cmd_prune(ckpt, plan, out),
        Command::Count {
            ckpt,
            image,
            export_density,
        } => cmd_count(ckpt, image, export_density.as_deref()),
        Command::Gt { ann, sigma, scale, out } => cmd_gt(ann, *sigma, *scale, out),
        Command::Params(args) => cmd_params(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("densecount: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
