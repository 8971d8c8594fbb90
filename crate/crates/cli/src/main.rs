use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use silab::clipstats::Convention;
use silab::harness::{self, run::report_json, ExperimentConfig};

/// Scale-invariant training laboratory.
#[derive(Parser)]
#[command(name = "silab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the property suites and print one line per check. Exits 0 iff all pass.
    Verify {
        /// Modules to check (comma separated), or `all`.
        #[arg(long, value_delimiter = ',', default_value = "all")]
        scope: Vec<String>,
    },
    /// Train once at the config's first init scale; writes trajectory.csv and summary.json.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train every scale under SGD+WD, SGD+WD+clip and SGD without WD.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Init scales, e.g. `0.1,1,10`. Defaults to the config's `init_scales`.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
    },
    /// Clipped-mean statistics of a `value,weight` CSV distribution.
    Clipstats {
        #[arg(long)]
        dist: PathBuf,
        /// Clip factor, > 1.
        #[arg(long)]
        c: f64,
        #[arg(long, value_enum, default_value_t = ConventionArg::CMu)]
        convention: ConventionArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ConventionArg {
    /// Clip level `C·μ`.
    CMu,
    /// Clip level `C²·μ`.
    CSquaredMu,
}

impl From<ConventionArg> for Convention {
    fn from(c: ConventionArg) -> Self {
        match c {
            ConventionArg::CMu => Convention::ClipAtCMu,
            ConventionArg::CSquaredMu => Convention::ClipAtCSquaredMu,
        }
    }
}

fn read_config(path: &PathBuf) -> silab::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| silab::Error::Io(format!("{}: {e}", path.display())))?;
    ExperimentConfig::parse(&text)
}

fn run(cli: Cli) -> silab::Result<ExitCode> {
    match cli.command {
        Command::Verify { scope } => {
            let report = harness::cmd_verify(&scope, &mut std::io::stdout())?;
            let failed = report.lines.iter().filter(|l| !l.ok()).count();
            println!("{} checks, {failed} failed", report.lines.len());
            Ok(ExitCode::from(report.exit_code() as u8))
        }
        Command::Train { config } => {
            let cfg = read_config(&config)?;
            let (summary, dir) = harness::cmd_train(&cfg)?;
            print!("{}", report_json(&summary)?);
            eprintln!("wrote {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { config, scales } => {
            let cfg = read_config(&config)?;
            let scales = scales.unwrap_or_else(|| cfg.init_scales.clone());
            let (report, dir) = harness::cmd_sweep(&cfg, &scales)?;
            print!("{}", report_json(&report)?);
            eprintln!("wrote {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Clipstats { dist, c, convention } => {
            let text = std::fs::read_to_string(&dist).map_err(|e| silab::Error::Io(format!("{}: {e}", dist.display())))?;
            let report = harness::cmd_clipstats(&text, c, convention.into())?;
            print!("{}", report_json(&report)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
