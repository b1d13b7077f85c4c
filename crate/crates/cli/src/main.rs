use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use asyncdrop::config::RunConfig;
use asyncdrop::experiment::{
    format_checks, parse_vary, run_checks, run_experiment, sweep, write_checks, ExperimentOutput, METRICS_FILE,
};
use asyncdrop::metrics::{compare_runs, default_target, format_comparison, read_metrics, MetricsRecord, TargetMetric};
use clap::{Args, Parser, Subcommand};

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "asyncdrop", version, about = "Asynchronous federated dropout simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `KEY=VALUE` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run(Common),
    /// Run the cartesian product of the varied keys, one output directory per point.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `KEY=V1,V2,...`; repeat for more keys.
        #[arg(long, required = true)]
        vary: Vec<String>,
    },
    /// Kernel and convergence checks on the theory settings.
    Check(Common),
    /// Time and communication to a target metric across finished runs.
    Compare {
        /// Metrics files or run directories, optionally as `NAME=PATH`.
        #[arg(required = true)]
        runs: Vec<String>,
        /// test_accuracy, test_loss or train_loss.
        #[arg(long, default_value = "test_accuracy")]
        metric: String,
        /// Defaults to the second worst of the runs' best values.
        #[arg(long)]
        threshold: Option<f64>,
    },
}

/// Error tagged with the exit status it should produce.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn config_err(err: anyhow::Error) -> Failure {
    Failure { code: EXIT_CONFIG, err }
}

fn classify(err: asyncdrop::Error) -> Failure {
    let code = if err.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME };
    Failure { code, err: err.into() }
}

fn load_config(c: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))
                .map_err(config_err)?;
            RunConfig::parse(&text).map_err(|e| config_err(anyhow!(e).context(p.display().to_string())))?
        }
        None => RunConfig::default(),
    };
    for o in &c.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| config_err(anyhow!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v).map_err(|m| config_err(anyhow!("--set {}: {m}", k.trim())))?;
    }
    if let Some(s) = c.seed {
        cfg.sim.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate().map_err(classify)?;
    Ok(cfg)
}

fn summarize(label: &str, out: &ExperimentOutput) {
    let last = out.trace.iter().rev().find(|r| r.is_evaluation());
    let mut line = format!("{label}: {} rows -> {}", out.trace.len(), out.out_dir.join(METRICS_FILE).display());
    if let Some(r) = last {
        line.push_str(&format!("; final train_loss {:.6}", r.train_loss));
        if let Some(a) = r.test_accuracy {
            line.push_str(&format!(", test_accuracy {a:.4}"));
        }
        line.push_str(&format!(", params down/up {}/{}", r.cum_params_down, r.cum_params_up));
    }
    println!("{line}");
}

fn read_run(arg: &str) -> Result<(String, Vec<MetricsRecord>), Failure> {
    let (name, path) = match arg.split_once('=') {
        Some((n, p)) => (n.to_string(), PathBuf::from(p)),
        None => {
            let p = PathBuf::from(arg);
            let name = if p.is_dir() { p.clone() } else { p.parent().map(Path::to_path_buf).unwrap_or_default() };
            let name = name.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| arg.to_string());
            (name, p)
        }
    };
    let file = if path.is_dir() { path.join(METRICS_FILE) } else { path };
    let f = std::fs::File::open(&file)
        .with_context(|| format!("opening {}", file.display()))
        .map_err(config_err)?;
    let trace = read_metrics(std::io::BufReader::new(f)).map_err(classify)?;
    Ok((name, trace))
}

fn execute(cmd: Command) -> Result<u8, Failure> {
    match cmd {
        Command::Run(c) => {
            let cfg = load_config(&c)?;
            let out = run_experiment(&cfg).map_err(classify)?;
            summarize("run", &out);
            if let Some(r) = &out.report {
                print!("{r}");
            }
        }
        Command::Sweep { common, vary } => {
            let cfg = load_config(&common)?;
            let vary: Vec<_> = vary.iter().map(|v| parse_vary(v)).collect::<Result<_, _>>().map_err(classify)?;
            for (label, out) in sweep(&cfg, &vary).map_err(classify)? {
                summarize(&label, &out);
            }
        }
        Command::Check(c) => {
            let cfg = load_config(&c)?;
            let results = run_checks(&cfg).map_err(classify)?;
            print!("{}", format_checks(&results));
            if c.out.is_some() {
                write_checks(&cfg.out_dir, &results).map_err(classify)?;
            }
            if results.iter().any(|r| !r.passed) {
                return Ok(EXIT_CHECK);
            }
        }
        Command::Compare { runs, metric, threshold } => {
            let metric: TargetMetric = metric.parse().map_err(classify)?;
            let traces = runs.iter().map(|r| read_run(r)).collect::<Result<Vec<_>, _>>()?;
            let threshold = match threshold {
                Some(t) => t,
                None => default_target(&traces, metric)
                    .ok_or_else(|| config_err(anyhow!("no run reports the chosen metric; pass --threshold")))?,
            };
            println!("target {threshold}");
            let rows = compare_runs(&traces, metric, threshold).map_err(classify)?;
            print!("{}", format_comparison(&rows));
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(Failure { code, err }) => {
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
