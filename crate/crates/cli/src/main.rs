//! `vcsec`: run scenario files, sweep parameter grids and run the self-test suites.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use vcsec_core::selftest::{gateway_suite, hsm_suite};
use vcsec_core::sim::{run, sweep, to_csv_string, GridAxis, ScenarioConfig};

#[derive(Parser)]
#[command(name = "vcsec", version, about = "Secure vehicular beaconing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write a single CSV row.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Run the scenario once per point of a parameter grid.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        output: OutputArgs,
        /// Grid axis as `dotted.key=v1,v2,...`; repeat for more axes. The first axis varies slowest.
        #[arg(long, value_name = "KEY=V1,V2,...", required = true)]
        grid: Vec<GridAxis>,
        /// Worker threads.
        #[arg(long, default_value_t = default_jobs())]
        jobs: usize,
    },
    /// Parse and check a scenario file without running it.
    Validate {
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// Run the HSM and gateway property suites.
    Selftest {
        /// Random cases per check.
        #[arg(long, default_value_t = 1000)]
        cases: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long, value_name = "PATH")]
    scenario: PathBuf,
    /// Replaces the seed given in the file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct OutputArgs {
    /// CSV destination; standard output when omitted.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl ScenarioArgs {
    fn load(&self) -> Result<ScenarioConfig> {
        let path = self.scenario.display();
        let mut cfg = ScenarioConfig::load(&self.scenario).with_context(|| format!("{path}"))?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.validate().context("--seed")?;
        }
        Ok(cfg)
    }
}

/// Replaces `path` only once the whole content is on disk.
fn write_atomic(path: &Path, content: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("{}", dir.display()))?;
    tmp.write_all(content)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("{}", path.display()))?;
    Ok(())
}

fn emit(output: &OutputArgs, csv: &str) -> Result<()> {
    match &output.out {
        Some(path) => write_atomic(path, csv.as_bytes()),
        None => {
            std::io::stdout().write_all(csv.as_bytes())?;
            Ok(())
        }
    }
}

fn selftest(cases: usize, seed: u64) -> bool {
    let mut ok = true;
    let mut skipped = 0;
    for (suite, results) in [("hsm", hsm_suite(cases, seed)), ("gateway", gateway_suite(cases, seed))] {
        println!("{suite}:");
        for r in &results {
            println!("  {r}");
            ok &= r.failures == 0;
            skipped += r.skipped.is_some() as usize;
        }
    }
    if skipped > 0 {
        println!("{skipped} check(s) skipped; rebuild with `--features audit` to run them");
    }
    ok
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { scenario, output } => {
            let cfg = scenario.load()?;
            let m = run(&cfg).context("run")?;
            emit(&output, &to_csv_string(std::slice::from_ref(&m)))?;
            eprintln!("{}", m.summary());
        }
        Command::Sweep { scenario, output, grid, jobs } => {
            if jobs == 0 {
                bail!("--jobs must be at least 1");
            }
            let cfg = scenario.load()?;
            let rows = sweep(&cfg, &grid, jobs)?;
            emit(&output, &to_csv_string(&rows))?;
            eprintln!("{} runs", rows.len());
        }
        Command::Validate { scenario } => {
            scenario.load()?;
        }
        Command::Selftest { cases, seed } => return Ok(selftest(cases, seed)),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
