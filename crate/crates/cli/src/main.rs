use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fewtrans::dataset::{generate_synthetic_dataset, SyntheticSpec};
use fewtrans::exec::{with_threads, Execution};
use fewtrans::harness::{emit_report, read_store, run_benchmark, run_sweep, ReportMode, RunConfig, SweepRequest};
use fewtrans::hpe::HyperParam;
use fewtrans::sampler::{task_stream, TaskStreamSpec};

/// Few-shot transfer benchmark driver.
#[derive(Debug, Parser)]
#[command(name = "fewtrans", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run (or resume) the benchmark described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `run_seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        threads: Threads,
    },
    /// Render a CSV report from a result store.
    Report {
        #[arg(long)]
        store: PathBuf,
        /// ci-table, grid-metrics, significance, heatmap, cka-profile or rarity-correlation.
        #[arg(long)]
        mode: ReportMode,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print sampled tasks, one JSON object per line.
    SampleDump {
        /// Dataset name; `demo` is a built-in synthetic set.
        #[arg(long, default_value = "demo")]
        dataset: String,
        #[arg(long, default_value_t = 10)]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Take the dataset and sampling settings from this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Accuracy surface over two hyperparameters on one task.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value_t = 0)]
        task: u64,
        /// Row axis as `param=v1,v2,...` (lr_backbone, lr_head or epochs).
        #[arg(long)]
        rows: String,
        /// Column axis, same form as --rows.
        #[arg(long)]
        cols: String,
        #[command(flatten)]
        threads: Threads,
    },
}

#[derive(Debug, Args)]
struct Threads {
    /// Worker threads; 1 runs sequentially.
    #[arg(long = "parallel", default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
}

impl Threads {
    fn run<R: Send>(&self, f: impl FnOnce(Execution) -> R + Send) -> R {
        let exec = if self.n > 1 { Execution::Parallel } else { Execution::Sequential };
        with_threads(self.n as usize, || f(exec))
    }
}

fn parse_axis(s: &str) -> fewtrans::Result<(HyperParam, Vec<f64>)> {
    let bad = || fewtrans::Error::InvalidArgument(format!("axis `{s}` is not of the form param=v1,v2"));
    let (p, vals) = s.split_once('=').ok_or_else(bad)?;
    let values = vals.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>, _>>()?;
    Ok((p.trim().parse()?, values))
}

fn write_out(out: Option<&Path>, text: &str) -> fewtrans::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn demo_dataset() -> fewtrans::Result<fewtrans::dataset::DatasetHandle> {
    generate_synthetic_dataset(&SyntheticSpec::new("demo", 20, 30, 16, 3.0), 0)
}

fn execute(cmd: Command) -> fewtrans::Result<()> {
    match cmd {
        Command::Run { config, seed, threads } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.run_seed = s;
            }
            let summary = threads.run(|exec| run_benchmark(&cfg, exec))?;
            if summary.repaired {
                eprintln!("warning: dropped a corrupted trailing line from {}", cfg.output.display());
            }
            println!("{} records written, {} already present, store {}", summary.written, summary.skipped, cfg.output.display());
        }
        Command::Report { store, mode, out } => {
            let contents = read_store(&store)?;
            if contents.corrupted_tail.is_some() {
                eprintln!("warning: {} ends in a corrupted line, which is ignored", store.display());
            }
            write_out(out.as_deref(), &emit_report(&contents.records, mode)?)?;
        }
        Command::SampleDump { dataset, n, seed, config } => {
            let (handle, split, mut spec) = match config {
                Some(path) => {
                    let cfg = RunConfig::load(&path)?;
                    let (h, s) = cfg.load_for_sampling(&dataset)?;
                    (h, s, cfg.stream_spec(&dataset))
                }
                None if dataset == "demo" => (demo_dataset()?, None, TaskStreamSpec::new("demo", seed)),
                None => return Err(fewtrans::Error::UnknownDataset(format!("{dataset} (pass --config to load it)"))),
            };
            spec.run_seed = seed;
            spec.n_tasks = n;
            let stream = task_stream(&handle, split.as_ref(), &spec);
            let mut stdout = std::io::stdout().lock();
            for i in 0..n {
                writeln!(stdout, "{}", stream.task_at(i)?.to_line())?;
            }
        }
        Command::Sweep { config, dataset, task, rows, cols, threads } => {
            let cfg = RunConfig::load(&config)?;
            let req = SweepRequest { dataset, task_index: task, rows: parse_axis(&rows)?, cols: parse_axis(&cols)? };
            let records = threads.run(|exec| run_sweep(&cfg, &req, exec))?;
            println!("{} sweep records appended to {}", records.len(), cfg.output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Keep the diagnostic on one line even for multi-line parse errors.
            let msg = e.to_string();
            let msg: Vec<&str> = msg.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
            eprintln!("error: {}", msg.join(" "));
            ExitCode::from(2)
        }
    }
}
