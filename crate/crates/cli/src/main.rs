use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sharebft::dpml::Mode;
use sharebft_cli::{collect, run_scenario, RunOptions, ScenarioFile};

/// Exit status for scenario files that fail to parse or validate.
const SCHEMA_EXIT: u8 = 2;

#[derive(Parser)]
#[command(name = "sharebft", version, about = "Run consensus and secure-aggregation scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (seed, mode) entry of a scenario and write result files.
    Run {
        scenario: PathBuf,
        /// Run only this seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run only this mode (training scenarios).
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long, env = sharebft_cli::OUT_DIR_ENV, default_value = "results")]
        out_dir: PathBuf,
        /// Also write the simulator event trace as JSON lines.
        #[arg(long)]
        trace: bool,
    },
    /// Summarize training result files matching a glob.
    Report {
        pattern: String,
        /// Also write the table as CSV to this file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Check a scenario file without running it.
    Validate { scenario: PathBuf },
}

fn load(path: &Path) -> Result<ScenarioFile, ExitCode> {
    ScenarioFile::load(path).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(SCHEMA_EXIT)
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenario,
            seed,
            mode,
            out_dir,
            trace,
        } => {
            let sc = match load(&scenario) {
                Ok(s) => s,
                Err(code) => return code,
            };
            let sc = match sc.with_overrides(seed, mode) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(SCHEMA_EXIT);
                }
            };
            run_scenario(&sc, &RunOptions { out_dir, trace }).map(|r| {
                for s in &r.summaries {
                    print!("{s}");
                }
                println!("wrote {} result files", r.files.len());
                if r.failed.is_empty() {
                    ExitCode::SUCCESS
                } else {
                    eprintln!("assertions failed in: {}", r.failed.join(", "));
                    ExitCode::FAILURE
                }
            })
        }
        Command::Report { pattern, csv } => collect(&pattern).and_then(|r| {
            print!("{}", r.to_text());
            let table = r.to_csv()?;
            if let Some(path) = csv {
                std::fs::write(&path, table)?;
            }
            Ok(ExitCode::SUCCESS)
        }),
        Command::Validate { scenario } => {
            let sc = match load(&scenario) {
                Ok(s) => s,
                Err(code) => return code,
            };
            let runs = sc.seeds.len() * sc.modes().len().max(1);
            println!("{}: ok ({runs} runs)", scenario.display());
            Ok(ExitCode::SUCCESS)
        }
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
