//! Command line front end: argument parsing and the subcommands.

pub mod commands;
pub mod error;
pub mod pca;
pub mod render;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::{Context, InferInput};
use error::{CliError, CliResult};
use ksdiff::config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "ksdiff", version, about = "Kernel-space latent diffusion for pansharpening")]
pub struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a config key, e.g. `--set train.stage1.iterations=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// Output directory; overrides `output_dir` and the environment root.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train and test splits.
    Synth {
        #[arg(long)]
        overwrite: bool,
    },
    /// Stage 1: prior encoder, kernel generators and backbone.
    Pretrain {
        /// Continue from the stage-1 checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Stage 2: latent diffusion from a stage-1 checkpoint.
    Traindiff {
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
    /// Fuse a dataset split or a single input container.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "input")]
        split: Option<String>,
        #[arg(long, value_delimiter = ',')]
        indices: Vec<usize>,
        /// Container with `pan` (H, W, 1) and `lrms` (h, w, C) arrays.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Score fused images against a dataset split.
    Eval {
        #[arg(long)]
        fused: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Time the sampler at several input sizes.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "64,256")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Scatter plots of sampled latent tokens, one per scene.
    VizLatent {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long, value_delimiter = ',')]
        indices: Vec<usize>,
    },
}

pub fn context(cli: &Cli) -> CliResult<Context> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let env_root = std::env::var_os(commands::OUTPUT_ROOT_ENV).map(PathBuf::from);
    let out = commands::resolve_output(cli.output.clone(), &cfg.output_dir, env_root);
    Ok(Context::new(cfg, out))
}

/// Runs a parsed command and returns the text printed on success.
pub fn run(cli: Cli) -> CliResult<String> {
    let ctx = context(&cli)?;
    let test_split = ctx.cfg.data.test_split.clone();
    let json = match cli.command {
        Command::Synth { overwrite } => serde_json::to_string_pretty(&commands::synth(&ctx, overwrite)?)?,
        Command::Pretrain { resume } => serde_json::to_string_pretty(&commands::pretrain(&ctx, resume)?)?,
        Command::Traindiff { stage1, resume } => {
            serde_json::to_string_pretty(&commands::traindiff(&ctx, stage1, resume)?)?
        }
        Command::Infer {
            checkpoint,
            split,
            indices,
            input,
        } => {
            let input = match input {
                Some(p) => InferInput::File(p),
                None => InferInput::Split {
                    split: split.unwrap_or(test_split),
                    indices,
                },
            };
            serde_json::to_string_pretty(&commands::infer(&ctx, checkpoint, input)?)?
        }
        Command::Eval { fused, split } => {
            let report = commands::eval(&ctx, fused, &split.unwrap_or(test_split))?;
            return Ok(report.to_table());
        }
        Command::Bench {
            checkpoint,
            sizes,
            repeats,
        } => serde_json::to_string_pretty(&commands::bench(&ctx, checkpoint, &sizes, repeats)?)?,
        Command::VizLatent {
            checkpoint,
            split,
            indices,
        } => {
            let scenes = commands::viz_latent(&ctx, checkpoint, &split.unwrap_or(test_split), &indices)?;
            scenes
                .iter()
                .map(|s| s.image.display().to_string())
                .collect::<Vec<_>>()
                .join("\n")
        }
    };
    Ok(json)
}

/// Parses arguments, mapping parse failures to a one-line usage error.
/// Help and version requests come back as `Ok(Err(text))`.
pub fn parse<I, T>(args: I) -> CliResult<Result<Cli, String>>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    use clap::error::ErrorKind;
    match Cli::try_parse_from(args) {
        Ok(c) => Ok(Ok(c)),
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) => {
            Ok(Err(e.to_string()))
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            Err(CliError::Usage(first.trim_start_matches("error: ").to_string()))
        }
    }
}
