use clap::{Parser, Subcommand};
use flute_cli::config::parse_config;
use flute_cli::run::run_experiment;
use std::path::PathBuf;
use std::process::ExitCode;

/// Deterministic simulator for federated representation learning with a
/// shared low-rank representation and personalized heads.
#[derive(Parser)]
#[command(name = "flute-sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config file.
    Run {
        config: PathBuf,
        /// Output directory (overrides `output_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker thread count (also settable via RAYON_NUM_THREADS).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Parse and validate a config file without running anything.
    Validate { config: PathBuf },
}

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn load_experiment(path: &PathBuf) -> Result<flute_cli::config::Experiment, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    parse_config(&text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => match load_experiment(&config) {
            Ok(exp) => {
                if exp.overparameterized {
                    eprintln!(
                        "warning: k exceeds min(d, clients); the rank target is over-parameterized"
                    );
                }
                println!("ok");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_CONFIG)
            }
        },
        Command::Run {
            config,
            out,
            threads,
        } => {
            let exp = match load_experiment(&config) {
                Ok(exp) => exp,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            if let Some(n) = threads {
                if let Err(e) = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                {
                    eprintln!("error: thread pool setup failed: {e}");
                    return ExitCode::from(EXIT_RUNTIME);
                }
            }
            if exp.overparameterized {
                eprintln!(
                    "warning: k exceeds min(d, clients); the rank target is over-parameterized"
                );
            }
            let out_dir = out
                .or_else(|| exp.output_dir.clone().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("out"));
            match run_experiment(&exp, &out_dir) {
                Ok(outcome) => {
                    if !outcome.nonfinite_seeds.is_empty() {
                        eprintln!(
                            "error: non-finite values in seeds {:?}; traces truncated",
                            outcome.nonfinite_seeds
                        );
                        return ExitCode::from(EXIT_RUNTIME);
                    }
                    println!("wrote {}", out_dir.join("summary.json").display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(EXIT_RUNTIME)
                }
            }
        }
    }
}
