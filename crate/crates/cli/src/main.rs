use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fewshot_cli::commands::{self, Outcome, ToySettings};
use fewshot_cli::config::{cache_dir, preset_names, CACHE_ENV};
use fewshot_cli::{CliError, CliResult, Overrides, RunConfig, Stage};
use fewshot_core::toy::ToyDomain;

#[derive(Parser)]
#[command(name = "fewshot", version, about = "Few-shot artistic portrait generation: adapt, encode, stylize, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Shared {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    resolution: Option<usize>,
    /// Named starting configuration, e.g. paper-cartoon.
    #[arg(long)]
    preset: Option<String>,
    /// Input image directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Decoder checkpoint.
    #[arg(long)]
    decoder: Option<PathBuf>,
    /// Encoder checkpoint.
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the Z+ encoder against a frozen source decoder.
    TrainEncoder(Shared),
    /// Adapt a source decoder to 1 to 10 target images.
    Adapt {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        iterations: Option<usize>,
        /// Accept more than ten target images.
        #[arg(long)]
        allow_many_shots: bool,
    },
    /// Encode photos and decode them with an adapted decoder.
    Stylize(Shared),
    /// Synthesize images from random codes.
    Sample {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Compute FID and LPIPS metrics for a directory of generated images.
    Evaluate(Shared),
    /// Encode photos and reconstruct them with the source decoder.
    Invert(Shared),
    /// Write a toy decoder checkpoint, optionally pretrained on toy photos.
    InitDecoder {
        #[command(flatten)]
        toy: ToyArgs,
        #[arg(long, default_value_t = 0)]
        pretrain_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint path; defaults to decoder.safetensors in the cache directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render procedural toy images.
    MakeToyData {
        #[command(flatten)]
        toy: ToyArgs,
        #[arg(long, value_enum, default_value_t = DomainArg::Photo)]
        domain: DomainArg,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the named presets.
    Presets,
}

#[derive(Args, Clone)]
struct ToyArgs {
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    #[arg(long, default_value_t = 32)]
    latent_dim: usize,
    /// Seed of the toy world's shape parameterization.
    #[arg(long, default_value_t = 0)]
    world_seed: u64,
}

impl From<ToyArgs> for ToySettings {
    fn from(a: ToyArgs) -> Self {
        Self { resolution: a.resolution, latent_dim: a.latent_dim, world_seed: a.world_seed }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Photo,
    Cartoon,
}

fn pipeline(stage: Stage, shared: Shared, extra: impl FnOnce(&mut Overrides)) -> CliResult<Option<Outcome>> {
    let mut flags = Overrides {
        stage: Some(stage),
        preset: shared.preset,
        seed: shared.seed,
        resolution: shared.resolution,
        out: shared.out,
        dataset: shared.data,
        decoder: shared.decoder,
        encoder: shared.encoder,
        ..Default::default()
    };
    extra(&mut flags);
    let cfg = RunConfig::resolve(shared.config.as_deref(), &flags)?;
    if shared.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(None);
    }
    commands::run(&cfg).map(Some)
}

fn dispatch(command: Command) -> CliResult<Option<Outcome>> {
    match command {
        Command::TrainEncoder(s) => pipeline(Stage::TrainEncoder, s, |_| {}),
        Command::Adapt { shared, iterations, allow_many_shots } => pipeline(Stage::Adapt, shared, |f| {
            f.iterations = iterations;
            f.allow_many_shots = allow_many_shots;
        }),
        Command::Stylize(s) => pipeline(Stage::Stylize, s, |_| {}),
        Command::Sample { shared, count } => pipeline(Stage::Sample, shared, |f| f.count = count),
        Command::Evaluate(s) => pipeline(Stage::Evaluate, s, |_| {}),
        Command::Invert(s) => pipeline(Stage::Invert, s, |_| {}),
        Command::InitDecoder { toy, pretrain_steps, seed, out } => {
            let out = match (out, cache_dir()) {
                (Some(p), _) => p,
                (None, Some(c)) => c.join("decoder.safetensors"),
                (None, None) => {
                    return Err(CliError::Config(format!("pass --out or set {CACHE_ENV}")));
                }
            };
            commands::init_decoder(&toy.into(), pretrain_steps, seed, &out).map(Some)
        }
        Command::MakeToyData { toy, domain, count, seed, out } => {
            let domain = match domain {
                DomainArg::Photo => ToyDomain::Photo,
                DomainArg::Cartoon => ToyDomain::Cartoon,
            };
            commands::make_toy_data(&toy.into(), domain, count, seed, &out).map(Some)
        }
        Command::Presets => {
            for name in preset_names() {
                println!("{name}");
            }
            Ok(None)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(Some(outcome)) => {
            println!("{}", outcome.summary);
            for p in &outcome.outputs {
                println!("  {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
