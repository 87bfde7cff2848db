use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cpclab_cli::commands::{cmd_experiment, cmd_featurespace, cmd_locality, cmd_sample, cmd_verify, ALL_VARIANTS};
use cpclab_cli::config::ExperimentConfig;
use cpclab_cli::experiments::Variant;
use cpclab_cli::features::MapSpec;
use cpclab_cli::verify::{Hooks, Suite};
use cpclab_core::Error;

#[derive(Parser)]
#[command(name = "cpclab", version, about = "Compositional diffusion laboratory")]
struct Cli {
    /// JSON config; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a verification suite.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
        #[arg(long, hide = true)]
        corrupt_subset_map: bool,
    },
    /// Length-generalization experiments; all variants when none is given.
    Experiment {
        #[arg(long, value_enum)]
        variant: Option<Variant>,
    },
    /// Gradient maps and conditioner influence.
    Locality {
        #[arg(long, value_enum)]
        variant: Option<Variant>,
    },
    /// Cosine matrices and commutation gap under a feature map.
    Featurespace {
        #[arg(long = "map", value_enum)]
        map: Option<MapSpec>,
    },
    /// Draw samples from one variant's generator.
    Sample {
        #[arg(long, value_enum)]
        variant: Variant,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 4)]
        n: usize,
    },
}

fn run(cli: Cli) -> cpclab_core::Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let variants = |v: Option<Variant>| v.map_or(ALL_VARIANTS.to_vec(), |v| vec![v]);
    match cli.command {
        Command::Verify { suite, corrupt_subset_map } => {
            let passed = cmd_verify(&cfg, suite, Hooks { corrupt_subset_map }, &cli.out)?;
            println!("verify {}: {}", suite.name(), if passed { "pass" } else { "FAIL" });
            Ok(passed)
        }
        Command::Experiment { variant } => cmd_experiment(&cfg, &variants(variant), &cli.out).map(|_| true),
        Command::Locality { variant } => cmd_locality(&cfg, &variants(variant), &cli.out),
        Command::Featurespace { map } => {
            let maps = map.map_or(
                vec![MapSpec::Identity, MapSpec::OrthogonalSeeded, MapSpec::ShearSeeded, MapSpec::DenseSeeded],
                |m| vec![m],
            );
            cmd_featurespace(&cfg, &maps, &cli.out)
        }
        Command::Sample { variant, k, n } => cmd_sample(&cfg, variant, k, n, &cli.out).map(|_| true),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::Config(_)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
