use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mfsolve::experiment::{self, ExperimentConfig};

/// Particle-based neural solvers for mean-field control and McKean-Vlasov
/// FBSDEs, with Riccati and HJB-FP benchmark oracles.
#[derive(Parser)]
#[command(name = "mfsolve", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config file.
    Run {
        /// Path to the experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Output root directory (default: config's output_dir, then
        /// $MFSOLVE_OUT, then ./out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's seed list, e.g. --seeds 1,2,3.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Maximum number of seeds run concurrently.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Compare two aligned CSV files and print per-column L2/sup gaps.
    Compare {
        file_a: PathBuf,
        file_b: PathBuf,
        /// Write the gap table to this CSV instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the bundled test-case presets.
    ListPresets,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Run {
            config,
            out,
            seeds,
            threads,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seeds) = seeds {
                cfg.seeds = seeds;
                cfg.validate()?;
            }
            let out_root = out
                .or_else(|| cfg.output_dir.clone())
                .or_else(|| std::env::var_os("MFSOLVE_OUT").map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("out"));
            let report = experiment::run_experiment(&cfg, &out_root, threads)?;
            println!(
                "{}: {} seed(s) done, report at {}",
                report.name,
                report.per_seed.len(),
                out_root.join(&report.name).join("report.json").display()
            );
            for (metric, stat) in &report.aggregate {
                println!("  {metric}: mean {:.6e} std {:.6e}", stat.mean, stat.std);
            }
            if report.breaches.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                for b in &report.breaches {
                    eprintln!("threshold breach: {b}");
                }
                Ok(ExitCode::from(2))
            }
        }
        Command::Compare { file_a, file_b, out } => {
            let rows = experiment::compare_csvs(&file_a, &file_b)?;
            match out {
                Some(path) => {
                    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
                    experiment::write_gap_summary(&mut w, &rows)?;
                }
                None => {
                    let mut stdout = std::io::stdout().lock();
                    experiment::write_gap_summary(&mut stdout, &rows)?;
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ListPresets => {
            println!("available presets (set parameters under [preset.<name>]):");
            println!("  lq             linear-quadratic mean field control (methods: mfc, bench-riccati, bench-pde)");
            println!("  minlqg         two-target min-distance terminal cost (methods: mfc, bench-pde)");
            println!("  cn-lq          two-target control with jump common noise (methods: mfc, bench-pde)");
            println!("  sincos         scalar FBSDE with cosine drift coupling (methods: fbsde)");
            println!("  atan-mfg       arctan mean field game FBSDE (methods: fbsde, bench-pde)");
            println!("  systemic-risk  interbank lending game with common noise (methods: fbsde, bench-riccati)");
            Ok(ExitCode::SUCCESS)
        }
    }
}
