use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dagmix_cli::commands::{self, EvalArgs, SweepSpec, TrainArgs};
use dagmix_cli::config::parse_override;
use dagmix_cli::{report, CliError};

#[derive(Parser)]
#[command(name = "dagmix", version, about = "Train and evaluate cooperative multi-agent value factorization")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Overrides {
    /// Mixer: vdn, qmix, dagmix, dagvdn or fcgmix.
    #[arg(long)]
    algo: Option<String>,
    /// Scenario: matrix, spread5, spread8, spread25 or spread27.
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Any config key, repeatable. Named flags win over these.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    set: Vec<(String, String)>,
}

impl Overrides {
    fn into_pairs(self, extra: Vec<(&str, Option<String>)>) -> Vec<(String, String)> {
        let mut out = self.set;
        let named = [("algo", self.algo), ("env", self.env), ("seed", self.seed)];
        for (k, v) in named.into_iter().chain(extra) {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        }
        out
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run; writes config.txt, metrics.jsonl, timing.jsonl and checkpoints/.
    Train {
        /// key = value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        /// Total environment steps.
        #[arg(long)]
        steps: Option<String>,
        /// Output directory (default: $DAGMIX_OUT or ./runs, plus <algo>-<env>-seed<seed>).
        #[arg(long)]
        out: Option<String>,
        /// Continue from a checkpoint with a matching config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Do not print progress rows.
        #[arg(long)]
        quiet: bool,
    },
    /// Greedy evaluation of a checkpoint; prints a JSON summary.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        /// Config the checkpoint must match; defaults to the one stored inside it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run every (algo, env, seed) tuple of a sweep spec as its own process.
    Sweep {
        spec: PathBuf,
        /// Concurrent runs; overrides `jobs` in the spec.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Median and 25-75% bands across seeds for every eval step, as CSV.
    Report {
        dir: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Cmd::Train { config, overrides, steps, out, resume, quiet } => {
            let overrides = overrides.into_pairs(vec![("total_env_steps", steps), ("out", out)]);
            let dir = commands::train(&TrainArgs { config, overrides, resume, quiet })?;
            println!("{}", dir.display());
        }
        Cmd::Eval { checkpoint, episodes, config, overrides } => {
            let args = EvalArgs { checkpoint, episodes, config, overrides: overrides.into_pairs(vec![]) };
            let summary = commands::eval(&args)?;
            println!("{}", commands::summary_json(&args.checkpoint, &summary));
        }
        Cmd::Sweep { spec, jobs } => {
            let mut spec = SweepSpec::load(&spec)?;
            if let Some(j) = jobs {
                spec.jobs = j.max(1);
            }
            let results = commands::sweep(&spec, &std::env::current_exe()?)?;
            let failed: Vec<_> = results.iter().filter(|r| !r.success).collect();
            for r in &results {
                println!("{} {}", if r.success { "ok    " } else { "FAILED" }, r.dir.display());
            }
            if !failed.is_empty() {
                return Err(CliError::Usage(format!("{} of {} runs failed", failed.len(), results.len())));
            }
        }
        Cmd::Report { dir, output } => {
            let csv = report::report(&dir)?;
            match output {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
