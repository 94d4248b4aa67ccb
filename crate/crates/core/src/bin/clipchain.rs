use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use clipchain::commands::{
    cmd_finetune_decoder, cmd_gen_data, cmd_generate, cmd_metrics, cmd_replay_data, cmd_train, cmd_train_ae,
    GenerateRequest,
};
use clipchain::config::Config;
use clipchain::manifest::verify;
use clipchain::{Error, ErrorClass};

/// Relative paths are resolved against this directory when it is set.
const HOME_VAR: &str = "CLIPCHAIN_HOME";

#[derive(Parser)]
#[command(name = "clipchain", version, about = "Clip-by-clip long-video generation with a toy latent diffusion model")]
struct Cli {
    /// Log progress to stderr (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset (moving shapes or a pseudo-video from one image).
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Rebuild the dataset described by an existing dataset.json instead.
        #[arg(long, conflicts_with = "config")]
        replay: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the autoencoder on a dataset.
    TrainAe {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add temporal layers to the decoder and fine-tune only those.
    FinetuneDecoder {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        autoencoder: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser (on latents, or on a Gaussian world).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        autoencoder: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a long video clip by clip.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Denoiser checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Decode latents to frames with this autoencoder.
        #[arg(long)]
        autoencoder: Option<PathBuf>,
        /// Conditioning label; defaults to the model's first label.
        #[arg(long)]
        label: Option<String>,
        /// Number of clips.
        #[arg(long)]
        clips: Option<usize>,
        /// Frames per clip.
        #[arg(long)]
        frames: Option<usize>,
        /// Frames carried over from the previous clip.
        #[arg(long)]
        prompt_frames: Option<usize>,
        /// Noise strength of the carried-over frames (larger keeps more signal).
        #[arg(long)]
        alpha: Option<f64>,
        /// Share of the sampling steps in which prompt frames follow the previous trajectory.
        #[arg(long)]
        beta: Option<f64>,
        /// Classifier-free guidance scale.
        #[arg(long)]
        guidance: Option<f64>,
        /// Sampling steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Noise seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; results do not depend on it.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute metrics of a generated run.
    Metrics {
        #[arg(long)]
        run: PathBuf,
    },
    /// Re-derive every digest recorded in a run manifest.
    Verify {
        #[arg(long)]
        run: PathBuf,
    },
    /// Print the default configuration as TOML.
    PrintConfig,
}

fn resolve(p: &Path) -> PathBuf {
    match std::env::var_os(HOME_VAR) {
        Some(home) if p.is_relative() => Path::new(&home).join(p),
        _ => p.to_path_buf(),
    }
}

fn load_config(p: &Option<PathBuf>) -> clipchain::Result<Config> {
    let mut cfg = match p {
        Some(p) => Config::load(&resolve(p))?,
        None => Config::default(),
    };
    if let Some(img) = &cfg.data.image {
        cfg.data.image = Some(resolve(img));
    }
    if let Some(c) = &cfg.data.captioner {
        cfg.data.captioner = Some(resolve(c));
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) -> clipchain::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> clipchain::Result<()> {
    match cli.command {
        Command::GenData { config, replay, out } => {
            let m = match replay {
                Some(r) => cmd_replay_data(&resolve(&r), &resolve(&out))?,
                None => cmd_gen_data(&load_config(&config)?, &resolve(&out))?,
            };
            print_json(&m)
        }
        Command::TrainAe { config, data, out } => {
            print_json(&cmd_train_ae(&load_config(&config)?, &resolve(&data), &resolve(&out))?)
        }
        Command::FinetuneDecoder {
            config,
            data,
            autoencoder,
            out,
        } => {
            let (m, _) =
                cmd_finetune_decoder(&load_config(&config)?, &resolve(&data), &resolve(&autoencoder), &resolve(&out))?;
            print_json(&m)
        }
        Command::Train {
            config,
            data,
            autoencoder,
            out,
        } => print_json(&cmd_train(
            &load_config(&config)?,
            data.map(|p| resolve(&p)).as_deref(),
            autoencoder.map(|p| resolve(&p)).as_deref(),
            &resolve(&out),
        )?),
        Command::Generate {
            config,
            checkpoint,
            autoencoder,
            label,
            clips,
            frames,
            prompt_frames,
            alpha,
            beta,
            guidance,
            steps,
            seed,
            workers,
            out,
        } => {
            let mut g = load_config(&config)?.generate;
            g.label = label.or(g.label);
            g.clips = clips.unwrap_or(g.clips);
            g.frames = frames.unwrap_or(g.frames);
            g.prompt_frames = prompt_frames.unwrap_or(g.prompt_frames);
            g.alpha = alpha.unwrap_or(g.alpha);
            g.beta = beta.unwrap_or(g.beta);
            g.guidance = guidance.unwrap_or(g.guidance);
            g.steps = steps.unwrap_or(g.steps);
            g.seed = seed.unwrap_or(g.seed);
            let req = GenerateRequest {
                checkpoint: resolve(&checkpoint),
                autoencoder: autoencoder.map(|p| resolve(&p)),
                generate: g,
                workers,
            };
            let (_, metrics) = cmd_generate(&req, &resolve(&out))?;
            print_json(&metrics)
        }
        Command::Metrics { run } => print_json(&cmd_metrics(&resolve(&run))?),
        Command::Verify { run } => {
            let report = verify(&resolve(&run))?;
            print_json(&report)?;
            if report.ok() {
                Ok(())
            } else {
                Err(Error::DigestMismatch(format!(
                    "{} mismatched, {} missing",
                    report.mismatched.len(),
                    report.missing.len()
                )))
            }
        }
        Command::PrintConfig => {
            print!("{}", Config::default().to_toml());
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
        ErrorClass::Transport => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
