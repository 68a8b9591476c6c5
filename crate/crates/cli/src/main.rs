use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cldm_cli::commands;
use cldm_cli::config::{parse_label, ExperimentConfig};
use cldm_cli::CliError;
use cldm_core::sampler::Method;

#[derive(Parser)]
#[command(name = "cldm", version, about = "Long-tail diffusion experiments")]
struct Cli {
    /// Flat `section.key = value` config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset (CSV plus metadata sidecar).
    GenData,
    /// Train on a dataset file.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset whose normalization maps samples back to data space.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Class index or `null`.
        #[arg(long)]
        class: Option<String>,
        #[arg(long)]
        omega: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        ddim_steps: Option<usize>,
        /// Also write each 8x8 sample as a greymap here.
        #[arg(long)]
        pgm_dir: Option<PathBuf>,
    },
    /// Score sample files against a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        samples: Vec<PathBuf>,
        /// Adds the latent spectrum of the samples.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate the baseline and CLDM arms over the seed list.
    Compare,
    /// Grid-search the guidance strength for a checkpoint.
    GridOmega {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    let out = |default: &str| cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    match cli.command {
        Command::GenData => {
            let path = out("data.csv");
            let ds = commands::gen_data(&cfg, &path)?;
            println!("wrote {} samples to {}", ds.len(), path.display());
        }
        Command::Train { data } => {
            let dir = out("run");
            let run = commands::train(&cfg, &data, &dir)?;
            if let Some(last) = run.history.last() {
                println!(
                    "step {}: l_ddpm {:.6} l_nce {:.6} l_mse {:.6}",
                    last.step, last.losses.ddpm, last.losses.nce, last.losses.mse
                );
            }
            println!("wrote {}", dir.join(commands::FINAL_CHECKPOINT).display());
        }
        Command::Sample {
            checkpoint,
            data,
            class,
            omega,
            n,
            method,
            ddim_steps,
            pgm_dir,
        } => {
            if let Some(c) = class {
                cfg.sample.class_label = parse_label("--class", &c)?;
            }
            if let Some(w) = omega {
                cfg.sample.omega = w;
            }
            if let Some(n) = n {
                cfg.sample.n_samples = n;
            }
            if let Some(m) = method {
                cfg.sample.method = m;
            }
            if let Some(s) = ddim_steps {
                cfg.sample.ddim_steps = s;
            }
            cfg.validate()?;
            let path = out("samples.csv");
            let x = commands::sample_cmd(&cfg, &checkpoint, data.as_deref(), &path, pgm_dir.as_deref())?;
            println!("wrote {} samples to {}", x.nrows(), path.display());
        }
        Command::Eval {
            data,
            samples,
            checkpoint,
        } => {
            let dir = out("eval");
            let report = commands::eval_cmd(&cfg, &samples, &data, checkpoint.as_deref(), &dir)?;
            print!("{}", report.to_csv());
        }
        Command::Compare => {
            let dir = out("compare");
            let result = commands::compare(&cfg, &dir)?;
            print!("{}", result.summary_csv());
            print!("{}", result.timing_text());
        }
        Command::GridOmega { checkpoint, data } => {
            let dir = out("grid");
            let result = commands::grid_omega_cmd(&cfg, &checkpoint, &data, &dir)?;
            for (omega, score) in &result.table {
                println!("omega {omega}: {score}");
            }
            println!("best omega {}", result.best);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cldm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
