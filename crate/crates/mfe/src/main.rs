use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mfe::bench_cli::{
    criteria, emit_csv, format_comparison, run_experiment, table_config, write_csv,
    ExperimentConfig,
};

#[derive(Parser)]
#[command(
    name = "mfe",
    version,
    about = "Modulated Fourier expansion experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep ω and R for one example and write the error table as CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// overrides `output` from the config; stdout when neither is set
        #[arg(long)]
        out: Option<PathBuf>,
        /// worker threads (overrides `threads` from the config)
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run the verification suite, one line per criterion.
    Verify,
    /// Regenerate one published table (CSV on stdout, comparison on stderr).
    Table { example_id: u8 },
}

fn set_threads(n: Option<usize>) -> mfe::Result<()> {
    let Some(n) = n else { return Ok(()) };
    if n == 0 {
        return Err(mfe::MfeError::Invalid("threads must be at least 1".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| mfe::MfeError::Invalid(format!("thread pool: {e}")))?;
    Ok(())
}

fn run(cli: Cli) -> mfe::Result<bool> {
    match cli.command {
        Command::Run {
            config,
            out,
            threads,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            set_threads(threads.or(cfg.threads))?;
            let records = run_experiment(&cfg)?;
            match out.or(cfg.output.clone()) {
                Some(path) => emit_csv(&records, &path)?,
                None => write_csv(&records, std::io::stdout().lock())?,
            }
            Ok(true)
        }
        Command::Verify => {
            let mut all = true;
            for (id, ..) in criteria::CRITERIA {
                let outcome = criteria::run(id).expect("registered criterion");
                println!("{outcome}");
                std::io::stdout().flush()?;
                all &= outcome.passed;
            }
            Ok(all)
        }
        Command::Table { example_id } => {
            let cfg = table_config(example_id)?;
            let records = run_experiment(&cfg)?;
            write_csv(&records, std::io::stdout().lock())?;
            eprint!("{}", format_comparison(example_id, &records));
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
