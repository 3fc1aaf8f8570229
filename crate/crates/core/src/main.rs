use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use eit_core::config::RunConfig;
use eit_core::pipeline::{Options, Pipeline};

/// Bayesian EIT inversion under the complete electrode model.
#[derive(Parser)]
#[command(name = "eit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the data and inversion meshes.
    Mesh(Common),
    /// Build the reference conductivity on both meshes.
    MakeTruth(Common),
    /// Simulate noisy measurements on the data mesh.
    MakeData(Common),
    /// Run the MCMC chains on the inversion mesh.
    Run(Common),
    /// ESS, density estimates and misfit table.
    Diagnose(Common),
    /// Heatmaps and a text summary.
    Report(Common),
    /// Every stage in order.
    All(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the chain seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    replicas: usize,
    #[arg(long)]
    allow_inverse_crime: bool,
    /// Start over when the output directory holds another configuration.
    #[arg(long)]
    force: bool,
}

fn pipeline(common: &Common) -> eit_core::Result<Pipeline> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.chain.seed = seed;
    }
    let out = match (&common.out, &config.output_dir) {
        (Some(out), _) => out.clone(),
        (None, Some(dir)) => dir.clone(),
        (None, None) => {
            let stem = common.config.file_stem().unwrap_or_default();
            PathBuf::from("runs").join(stem)
        }
    };
    Pipeline::new(
        config,
        Options {
            out,
            replicas: common.replicas,
            allow_inverse_crime: common.allow_inverse_crime,
            force: common.force,
        },
    )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Mesh(c) => pipeline(c).and_then(|p| p.mesh()),
        Command::MakeTruth(c) => pipeline(c).and_then(|p| p.make_truth()),
        Command::MakeData(c) => pipeline(c).and_then(|p| p.make_data()),
        Command::Run(c) => pipeline(c).and_then(|p| p.run()),
        Command::Diagnose(c) => pipeline(c).and_then(|p| p.diagnose()),
        Command::Report(c) => pipeline(c).and_then(|p| p.report()),
        Command::All(c) => pipeline(c).and_then(|p| p.run_all()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
