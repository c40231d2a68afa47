//! `dmfn` command line: train, evaluate, inpaint, inspect, ablate,
//! synth-data.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dmfn::cli;
use dmfn::config::RunConfig;
use dmfn::generator::AblationVariant;
use dmfn::masking::MaskProtocol;

#[derive(Parser)]
#[command(name = "dmfn", version, about = "Dense multi-scale fusion inpainting")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model.
    Train {
        /// JSON run configuration (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted-path overrides, e.g. `loss.metric.kind=gaussian`.
        #[arg(short = 's', long = "set")]
        set: Vec<String>,
        /// Structural ablation: full_dmfb, rate_<k>, no_combination, no_ki.
        #[arg(long)]
        ablation: Option<String>,
        /// Emit guidance / average-feature debug maps with the sample grids.
        #[arg(long)]
        debug_maps: bool,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short = 's', long = "set")]
        set: Vec<String>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Mask protocol: center, random, irregular.
        #[arg(long)]
        protocol: Option<String>,
        /// Report/grid output directory (defaults to paths.output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fill the holes of a single image.
    Inpaint {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// 8-bit grayscale mask PNG, white = hole, same size as the image.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit guidance maps and average feature maps for one image.
    Inspect {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short = 's', long = "set")]
        set: Vec<String>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value = "inspect_out")]
        out_dir: PathBuf,
    },
    /// Print the structural-variant parameter-count table.
    Ablate {
        /// Use the narrow (64-channel) wiring for the rate variants.
        #[arg(long)]
        narrow_rate: bool,
    },
    /// Generate a procedural PNG corpus for smoke training.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run() -> dmfn::Result<()> {
    let args = Args::parse();
    match args.cmd {
        Cmd::Train {
            config,
            mut set,
            ablation,
            debug_maps,
            resume,
        } => {
            if let Some(ab) = ablation {
                let variant = AblationVariant::parse(&ab)?;
                set.push(format!("ablation={}", serde_json::to_string(&variant)?));
            }
            if debug_maps {
                set.push("logging.debug_maps=true".into());
            }
            let cfg = RunConfig::load(config.as_deref(), &set)?;
            cli::cmd_train(&cfg, resume.as_deref())
        }
        Cmd::Eval {
            config,
            set,
            checkpoint,
            protocol,
            out,
        } => {
            let cfg = RunConfig::load(config.as_deref(), &set)?;
            let protocol = protocol.map(|p| MaskProtocol::parse(&p)).transpose()?;
            cli::cmd_eval(&cfg, &checkpoint, protocol, out.as_deref())
        }
        Cmd::Inpaint {
            checkpoint,
            image,
            mask,
            out,
        } => cli::cmd_inpaint(&checkpoint, &image, &mask, &out),
        Cmd::Inspect {
            config,
            set,
            checkpoint,
            image,
            mask,
            out_dir,
        } => {
            let cfg = RunConfig::load(config.as_deref(), &set)?;
            cli::cmd_inspect(&cfg, &checkpoint, &image, &mask, &out_dir)
        }
        Cmd::Ablate { narrow_rate } => cli::cmd_ablate(narrow_rate),
        Cmd::SynthData {
            out,
            count,
            size,
            seed,
        } => cli::cmd_synth_data(&out, count, size, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
