use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use msrf::config::RunConfig;
use msrf::data::{save_dataset, synth_dataset};
use msrf::error::{Error, Result};
use msrf::network::param_count_report;
use msrf::runtime::max_threads;
use msrf::trainer;

#[derive(Parser)]
#[command(name = "msrf", about = "Multi-scale residual fusion segmentation network", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape-segmentation dataset.
    Synth {
        /// Number of samples.
        #[arg(long)]
        n: usize,
        /// Square image size in pixels.
        #[arg(long)]
        size: usize,
        /// RNG seed.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output dataset directory (images/ and masks/ are created).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a config file; writes train.log and best.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory with images/ and masks/.
        #[arg(long)]
        data: PathBuf,
        /// CSV report path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict masks for PGM image(s).
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input PGM file or a directory of them.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory for mask (and edge) PGMs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Number of sampled parameter coordinates.
        #[arg(long, default_value_t = 25)]
        samples: usize,
        /// Relative tolerance.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { n, size, seed, out } => {
            if n == 0 || size == 0 {
                return Err(Error::config("synth needs n >= 1 and size >= 1".to_string()));
            }
            let samples = synth_dataset(n, size, seed);
            save_dataset(&samples, &out)?;
            println!("wrote {} samples of size {}x{} to {}", n, size, size, out.display());
        }
        Command::Train { config } => {
            let cfg = RunConfig::from_file(&config)?;
            let out = trainer::train_command(&cfg, false)?;
            println!("best epoch {} val_dsc {:.6}", out.best_epoch, out.best_val_dsc);
        }
        Command::Eval { config, checkpoint, data, out } => {
            let cfg = RunConfig::from_file(&config)?;
            let report = trainer::eval_command(&cfg, &checkpoint, &data)?;
            std::fs::write(&out, report.to_csv())?;
            print!("{}", report.to_table());
            println!("report written to {}", out.display());
        }
        Command::Predict { config, checkpoint, input, out } => {
            let cfg = RunConfig::from_file(&config)?;
            let inputs: Vec<PathBuf> = if input.is_dir() {
                let mut v: Vec<PathBuf> = std::fs::read_dir(&input)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().map(|e| e == "pgm").unwrap_or(false))
                    .collect();
                v.sort();
                v
            } else {
                vec![input]
            };
            if inputs.is_empty() {
                return Err(Error::config("no .pgm inputs found".to_string()));
            }
            let written = trainer::predict_command(&cfg, &checkpoint, &inputs, &out)?;
            for p in written {
                println!("wrote {}", p.display());
            }
        }
        Command::Gradcheck { config, samples, tol } => {
            let cfg = RunConfig::from_file(&config)?;
            print!("{}", param_count_report(&cfg.net));
            let report = trainer::gradcheck(&cfg, samples, tol)?;
            println!("{}", report.summary());
            if !report.passed() {
                return Err(Error::usage(format!(
                    "gradient check failed: {} of {} coordinates above tolerance",
                    report.failures, report.checked
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let threads = max_threads();
    if threads > 1 {
        // MSRF_THREADS=1 is handled by running serially; higher caps bound
        // the rayon pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e);
            ExitCode::FAILURE
        }
    }
}
