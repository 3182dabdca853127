use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bosesub::config::{parse_config, Format, RunConfig};
use bosesub::error::{Error, Result};
use bosesub::runner;

#[derive(Parser)]
#[command(name = "bosesub", version, about = "Budgeted checks of c-number substitution bounds on finite Bose systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a configuration.
    Validate(Common),
    /// Run the configured checks and write reports.
    Run(Common),
    /// Tabulate pressures over the parameter grid without verdicts.
    Sweep(Common),
    /// Write coherent-state weight tables for plotting.
    Weights(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Rows,
    Document,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; the configured one when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Report formats; the configured ones when omitted.
    #[arg(long, value_enum)]
    format: Vec<FormatArg>,
    /// Restrict the suite to these checks.
    #[arg(long, num_args = 1..)]
    check: Vec<String>,
}

fn load(c: &Common) -> Result<RunConfig> {
    let text = std::fs::read_to_string(&c.config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", c.config.display())))?;
    parse_config(&text)?.with_checks(&c.check)
}

fn out_dir(c: &Common, cfg: &RunConfig) -> PathBuf {
    c.out.clone().unwrap_or_else(|| cfg.output.dir.clone())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Validate(c) => {
            let cfg = load(&c)?;
            let family = cfg.family()?;
            println!(
                "ok: {} model(s), {} parameter point(s), checks: {}",
                family.len(),
                cfg.points()?.len(),
                cfg.suite.checks.join(", ")
            );
            Ok(true)
        }
        Command::Run(c) => {
            let cfg = load(&c)?;
            let out = out_dir(&c, &cfg);
            let formats: Vec<Format> = if c.format.is_empty() {
                cfg.output.formats.clone()
            } else {
                c.format
                    .iter()
                    .map(|f| match f {
                        FormatArg::Rows => Format::Rows,
                        FormatArg::Document => Format::Document,
                    })
                    .collect()
            };
            let m = runner::run_suite(&cfg, &out, c.jobs, &formats)?;
            let counts: Vec<String> = m.verdicts.iter().map(|(k, v)| format!("{k} {v}")).collect();
            println!("{} -> {}", counts.join(", "), out.display());
            Ok(!m.failed())
        }
        Command::Sweep(c) => {
            let cfg = load(&c)?;
            let out = out_dir(&c, &cfg);
            let rows = runner::sweep(&cfg, &out, c.jobs)?;
            println!("{} sweep rows -> {}", rows.len(), out.join("sweep.csv").display());
            Ok(true)
        }
        Command::Weights(c) => {
            let cfg = load(&c)?;
            let out = out_dir(&c, &cfg);
            let n = runner::weights(&cfg, &out, c.jobs)?;
            println!("{n} weight nodes -> {}", out.join("weights.csv").display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
