//! `nandscope`: run monitored flash scenarios and analyze their traces.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nandscope::analysis::{emit_plot_data, TraceStats};
use nandscope::mtd::PartitionId;
use nandscope::scenario::{load_outputs, run_scenario, scenario_overhead, scenario_overhead_baseline, ScenarioError, ScenarioSpec, PLOT_FILES};

#[derive(Parser, Debug)]
#[command(name = "nandscope", version, about = "Simulated raw NAND stack with a flash operation monitor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario with the monitor attached and dump both views.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Directory for spatial.txt, temporal.log, stats.txt and plot data.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print trace statistics of a fresh run or of a previous run's output.
    Stats {
        #[command(flatten)]
        source: Source,
    },
    /// Write per-kind plot series (time address kind) of a run.
    Plotdata {
        #[command(flatten)]
        source: Source,
        /// Directory for plot_R.dat, plot_W.dat and plot_E.dat.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare workload CPU time with and without the monitor.
    Overhead {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Paired runs to average over.
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
        runs: u32,
        /// Measure unmonitored against unmonitored, as a noise floor.
        #[arg(long)]
        baseline: bool,
    },
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Trace only this partition.
    #[arg(long)]
    partition: Option<usize>,
    /// Temporal log capacity in events.
    #[arg(long)]
    log_size: Option<usize>,
    /// Do not record task names.
    #[arg(long)]
    no_tasknames: bool,
    /// Seed for randomized workloads.
    #[arg(long)]
    seed: Option<u64>,
}

impl ScenarioArgs {
    fn load(&self) -> Result<ScenarioSpec, ScenarioError> {
        let mut spec = ScenarioSpec::from_file(&self.config)?;
        if let Some(p) = self.partition {
            spec.monitor.traced_partition = Some(PartitionId(p));
        }
        if let Some(n) = self.log_size {
            spec.monitor.log_capacity = n;
        }
        if self.no_tasknames {
            spec.monitor.record_task_names = false;
        }
        if let Some(seed) = self.seed {
            spec.set_seed(seed);
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct SourceChoice {
    /// Scenario file (TOML) to run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory of an earlier `run --out`.
    #[arg(long)]
    from: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Source {
    #[command(flatten)]
    choice: SourceChoice,
    /// With --config: trace only this partition.
    #[arg(long, conflicts_with = "from")]
    partition: Option<usize>,
    /// With --config: temporal log capacity in events.
    #[arg(long, conflicts_with = "from")]
    log_size: Option<usize>,
    /// With --config: do not record task names.
    #[arg(long, conflicts_with = "from")]
    no_tasknames: bool,
    /// With --config: seed for randomized workloads.
    #[arg(long, conflicts_with = "from")]
    seed: Option<u64>,
    /// With --from: chip index of the first block of the spatial view.
    #[arg(long, conflicts_with = "config", default_value_t = 0)]
    first_block: u32,
}

impl Source {
    fn stats(&self) -> Result<(String, Vec<nandscope::TraceEvent>), ScenarioError> {
        match (&self.choice.config, &self.choice.from) {
            (Some(config), _) => {
                let args = ScenarioArgs {
                    config: config.clone(),
                    partition: self.partition,
                    log_size: self.log_size,
                    no_tasknames: self.no_tasknames,
                    seed: self.seed,
                };
                let spec = args.load()?;
                let outcome = run_scenario(&spec, None)?;
                Ok((outcome.stats_text(spec.scenario.kind()), outcome.events))
            }
            (None, Some(dir)) => {
                let (events, counters) = load_outputs(dir, self.first_block)?;
                let stats = TraceStats::compute(&events, &counters, false);
                Ok((stats.render(), events))
            }
            (None, None) => unreachable!("clap requires one source"),
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), ScenarioError> {
    fs::write(path, text).map_err(|e| ScenarioError::Runtime(format!("{}: {e}", path.display())))
}

fn execute(command: Command) -> Result<(), ScenarioError> {
    match command {
        Command::Run { scenario, out } => {
            let spec = scenario.load()?;
            let outcome = run_scenario(&spec, out.as_deref())?;
            print!("{}", outcome.stats_text(spec.scenario.kind()));
            if let Some(dir) = out {
                println!("outputs written to {}", dir.display());
            }
        }
        Command::Stats { source } => print!("{}", source.stats()?.0),
        Command::Plotdata { source, out } => {
            let (_, events) = source.stats()?;
            fs::create_dir_all(&out).map_err(|e| ScenarioError::Runtime(format!("{}: {e}", out.display())))?;
            for (name, text) in PLOT_FILES.into_iter().zip(emit_plot_data(&events)) {
                write_file(&out.join(name), &text)?;
            }
            println!("{} events written to {}", events.len(), out.display());
        }
        Command::Overhead { scenario, runs, baseline } => {
            let spec = scenario.load()?;
            let report = if baseline {
                scenario_overhead_baseline(&spec, runs as usize)?
            } else {
                scenario_overhead(&spec, runs as usize)?
            };
            print!("{}", report.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nandscope: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
