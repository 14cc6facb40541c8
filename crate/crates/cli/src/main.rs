use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use llqrsam_cli::checks::{self, CheckContext};
use llqrsam_cli::{run_experiment, ExperimentConfig, ExperimentTag, Predictors, RunError};

const EXIT_CONFIG: u8 = 1;
const EXIT_ABORTED: u8 = 2;
const EXIT_VERIFY_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "llqrsam", version, about = "Geometry-aware SAM laboratory: experiments and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Output directory (overrides the config's `output`)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Base seed (overrides the config's `seed`)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for independent runs
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a TOML config
    Run { config: PathBuf },
    /// Run the acceptance checks and write report.json
    Verify {
        /// Comma-separated criterion ids (default: all)
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
    },
    /// List experiment tags and the criteria they exercise
    List,
    /// Print the preset config for an experiment tag
    Preset { tag: ExperimentTag },
}

fn run(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<PathBuf, RunError> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = out.or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("out").join(cfg.experiment.as_str()));
    let set = run_experiment(&cfg, &Predictors::default())?;
    set.write_to(&dir)?;
    Ok(dir)
}

fn verify(only: &[u8], out: Option<PathBuf>, seed: Option<u64>) -> Result<bool, std::io::Error> {
    let ids: Vec<u8> = if only.is_empty() { checks::CRITERIA.iter().map(|c| c.0).collect() } else { only.to_vec() };
    if let Some(bad) = ids.iter().find(|&&i| !(1..=12).contains(&i)) {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("unknown criterion {bad}")));
    }
    let ctx = CheckContext { predictors: Predictors::default(), seed };
    let (results, timings) = checks::run_checks(&ids, &ctx);
    for r in &results {
        println!("criterion {:>2} {:<34} {}", r.id, r.name, if r.passed { "PASS" } else { "FAIL" });
    }
    let dir = out.unwrap_or_else(|| PathBuf::from("out").join("verify"));
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("report.json"), checks::report_bytes(&results))?;
    std::fs::write(dir.join("timings.json"), checks::timings_bytes(&timings))?;
    Ok(results.iter().all(|r| r.passed))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.max(1)).build_global() {
        log::warn!("thread pool already initialized: {e}");
    }
    match cli.command {
        Command::List => {
            for tag in ExperimentTag::ALL {
                let crit: Vec<String> = tag.criteria().iter().map(u8::to_string).collect();
                println!("{:<20} criteria {:<8} {}", tag.as_str(), crit.join(","), tag.description());
            }
            ExitCode::SUCCESS
        }
        Command::Preset { tag } => {
            print!("{}", ExperimentConfig::preset(tag).to_toml());
            ExitCode::SUCCESS
        }
        Command::Run { config } => match run(&config, cli.out, cli.seed) {
            Ok(dir) => {
                println!("artifacts written to {}", dir.display());
                ExitCode::SUCCESS
            }
            Err(RunError::Config(e)) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_CONFIG)
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_ABORTED)
            }
        },
        Command::Verify { only } => match verify(&only, cli.out, cli.seed) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => ExitCode::from(EXIT_VERIFY_FAILED),
            Err(e) if e.kind() == std::io::ErrorKind::InvalidInput => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_CONFIG)
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_ABORTED)
            }
        },
    }
}
