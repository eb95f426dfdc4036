mod commands;
mod setup;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Common, GradCheckArgs};
use setup::Failure;

const FORMATS: &str = "\
File formats:
  images           8-bit RGB PNG (grayscale is replicated to three channels)
  masks            8-bit grayscale PNG, foreground where value >= 128; written as 0/255
  saliency maps    8-bit grayscale PNG, value = round(255 * p)
  instances/*.png  16-bit grayscale PNG of instance ids; id >= 1000 is an object of
                   category id / 1000, smaller ids are ignored
  fixations.csv    header image_id,x,y,duration_ms; x, y in pixels (column, row)
  scores.csv       image_id,instance_id,category,pixel_count,score,selected
  metrics.csv      n_images,skipped,mae,f_w_beta,f_beta,s_m
  stats.csv        histogram,bin_lo,bin_hi,count (object counts, then area fractions)
  train_*.csv      iteration,loss,loss_m0,loss_mb,loss_mi (appended per iteration)
  *.ckpt           little-endian binary: magic TSODCKPT, u32 version, model config
                   echo, u64 seed, u64 iteration, named f64 tensors
  config files     one key=value per line, '#' starts a comment; --set lines are
                   applied after the file
  manifest.txt     key=value lines: command, inputs, resolved config, seed

Exit status: 0 success, 2 usage or configuration error, 3 data error,
4 divergence or failed numerical check. Errors are printed as one line:
  error: code=<n> kind=<usage|data|numerical> message=<text>";

#[derive(Parser)]
#[command(name = "tasksod", version, about = "Driving-task-aware salient object detection", after_help = FORMATS)]
struct Cli {
    /// Run single-threaded with a fixed evaluation order (recorded in the manifest).
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// Directory receiving every output of the run, including manifest.txt.
    #[arg(long)]
    out: PathBuf,

    /// Configuration file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Configuration override, repeatable; applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Shared {
    fn common(&self, deterministic: bool) -> Common<'_> {
        Common {
            config: self.config.as_deref(),
            overrides: &self.overrides,
            out: &self.out,
            deterministic,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build ground-truth masks from fixations and instance maps (keys: sigma, ratio).
    BuildDataset {
        /// Directory holding fixations.csv and instances/<image_id>.png.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Object-count and area histograms plus the average annotation map of a mask set.
    Stats {
        #[arg(long)]
        masks: PathBuf,
        /// Size of the average annotation map; defaults to the first mask's size.
        #[arg(long, num_args = 2, value_names = ["HEIGHT", "WIDTH"])]
        aam_size: Option<Vec<usize>>,
        #[command(flatten)]
        shared: Shared,
    },
    /// Train the general subnetwork on conventional saliency data.
    TrainGeneral {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Train the task network with the general subnetwork frozen.
    TrainTask {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        /// Checkpoint written by train-general (needed unless AKT and PT are off).
        #[arg(long)]
        general: Option<PathBuf>,
        #[command(flatten)]
        shared: Shared,
    },
    /// Write a saliency map for every image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// MAE, F-measure, weighted F-measure and S-measure of predictions against masks.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Print a published reference row, and the difference to a metrics.csv if given.
    Benchmark {
        #[arg(long)]
        method: String,
        /// before or after fine-tuning on task data.
        #[arg(long)]
        phase: String,
        /// metrics.csv written by evaluate.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Alternative registry CSV (method,phase,mae,f_w_beta,f_beta,s_m).
        #[arg(long)]
        registry: Option<PathBuf>,
        #[command(flatten)]
        shared: Shared,
    },
    /// Compare analytic gradients of the training objective with finite differences.
    GradCheck {
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        per_group: usize,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        /// Comma-separated subset of general, akt, task, decoder.
        #[arg(long)]
        groups: Option<String>,
        #[command(flatten)]
        shared: Shared,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    let d = cli.deterministic;
    match &cli.command {
        Command::BuildDataset { input, shared } => commands::build_dataset(&shared.common(d), input),
        Command::Stats { masks, aam_size, shared } => {
            let size = aam_size.as_ref().map(|v| (v[0], v[1]));
            commands::stats(&shared.common(d), masks, size)
        }
        Command::TrainGeneral { images, masks, shared } => {
            commands::train_general_cmd(&shared.common(d), images, masks)
        }
        Command::TrainTask {
            images,
            masks,
            general,
            shared,
        } => commands::train_task_cmd(&shared.common(d), images, masks, general.as_deref()),
        Command::Infer {
            checkpoint,
            images,
            shared,
        } => commands::infer_cmd(&shared.common(d), checkpoint, images),
        Command::Evaluate { pred, gt, shared } => commands::evaluate_cmd(&shared.common(d), pred, gt),
        Command::Benchmark {
            method,
            phase,
            report,
            registry,
            shared,
        } => commands::benchmark_cmd(
            &shared.common(d),
            method,
            phase,
            report.as_deref(),
            registry.as_deref(),
        ),
        Command::GradCheck {
            images,
            masks,
            per_group,
            epsilon,
            groups,
            shared,
        } => commands::grad_check_cmd(
            &shared.common(d),
            &GradCheckArgs {
                images: images.as_deref(),
                masks: masks.as_deref(),
                per_group: *per_group,
                epsilon: *epsilon,
                groups: groups.as_deref(),
            },
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let detail: Vec<&str> = text
                .lines()
                .map(|l| l.trim().trim_start_matches("error: "))
                .filter(|l| !l.is_empty() && !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .collect();
            let failure = Failure::Usage(format!("{} (see --help)", detail.join(" ")));
            eprintln!("{}", failure.line());
            return ExitCode::from(failure.code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("{}", failure.line());
            ExitCode::from(failure.code() as u8)
        }
    }
}
