use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ledits_cli::{
    cmd_edit, cmd_invert, cmd_stats, cmd_sweep, cmd_train, Overrides, Result, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "ledits",
    version,
    about = "Toy-domain diffusion inversion and semantic editing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an MLP denoiser; writes model.bin and train_log.csv.
    Train(Common),
    /// Invert a source; writes inversion.bin.
    Invert(Common),
    /// Edit a source (or a stored inversion); writes the edit and metrics.csv.
    Edit {
        #[command(flatten)]
        common: Common,
        /// Stored inversion artifact to edit instead of inverting inline.
        #[arg(long)]
        inversion: Option<PathBuf>,
    },
    /// Run a skip x target-scale (x concept-scale) grid; writes sweep.csv.
    Sweep(Common),
    /// Noise-map statistics over many inversions; writes noise_stats.csv.
    Stats(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn overrides(&self, inversion: Option<PathBuf>) -> Overrides {
        Overrides {
            input: self.input.clone(),
            out: self.out.clone(),
            seed: self.seed,
            inversion,
            threads: self.threads,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let (common, inversion) = match &cli.command {
        Command::Train(c) | Command::Invert(c) | Command::Sweep(c) | Command::Stats(c) => (c, None),
        Command::Edit { common, inversion } => (common, inversion.clone()),
    };
    let overrides = common.overrides(inversion);
    let mut config = RunConfig::load(&common.config)?;
    overrides.apply(&mut config);

    match cli.command {
        Command::Train(_) => {
            let out = cmd_train(&config)?;
            let last = out.log.epochs.last().map_or(f64::NAN, |e| e.1);
            println!("wrote {} (final loss {last:.6})", out.checkpoint.display());
        }
        Command::Invert(_) => {
            println!("wrote {}", cmd_invert(&config)?.display());
        }
        Command::Edit { .. } => {
            let s = cmd_edit(&config)?;
            println!(
                "wrote {} (mse to source {:.6})",
                s.output.display(),
                s.mse_to_source
            );
        }
        Command::Sweep(_) => {
            let cells = cmd_sweep(&config, overrides.threads)?;
            println!(
                "wrote {} cells to {}",
                cells.len(),
                config.output_dir.display()
            );
        }
        Command::Stats(_) => {
            println!(
                "wrote {}",
                cmd_stats(&config, overrides.threads)?.path.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
