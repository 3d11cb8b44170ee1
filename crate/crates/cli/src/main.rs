use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use epical::calibrate::PosteriorLog;
use epical::io::{self, Method, RunConfig};
use epical::mcmc::McmcTrace;
use epical::posterior::{hellinger, Density1D};
use epical::{Error, Result};
use serde_json::{json, Value};

/// Calibrate compartmental epidemic models and quantify their uncertainty.
#[derive(Parser)]
#[command(name = "epical", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured synthetic dataset and write it with its
    /// ground truth.
    Generate(RunArgs),
    /// Run the configured calibration method and write all artifacts.
    Calibrate(RunArgs),
    /// Evaluate the likelihood on a grid over the init box.
    GridSearch(RunArgs),
    /// Rebuild prediction ensembles and residuals from a saved log.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        /// Log written by an earlier run.
        #[arg(long)]
        log: PathBuf,
    },
    /// Convergence diagnostics of a saved MCMC trace or training log.
    Diagnose {
        #[arg(long, conflicts_with = "log", required_unless_present = "log")]
        trace: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Retained samples between successive Gelman-Rubin evaluations.
        #[arg(long, default_value_t = 100)]
        stride: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Hellinger distance between two density files on the same grid.
    Compare { first: PathBuf, second: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
            if let Some(s) = config.data.synthetic.as_mut() {
                s.noise_seed = seed;
            }
        }
        if let Some(chains) = self.chains {
            config.neural.chains = chains;
            config.mala.chains = chains;
        }
        if let Some(epochs) = self.epochs {
            config.neural.epochs = epochs;
        }
        if let Some(out) = &self.out {
            config.out = out.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

/// What a subcommand reports: a JSON document for stdout and whether the
/// run only partly succeeded.
struct Report {
    value: Value,
    partial: bool,
}

impl From<Value> for Report {
    fn from(value: Value) -> Self {
        Report { value, partial: false }
    }
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
        Ok(report) => {
            // A closed pipe (`epical ... | head`) is not an error of the run.
            let _ = writeln!(
                std::io::stdout().lock(),
                "{}",
                serde_json::to_string_pretty(&report.value).unwrap_or_default()
            );
            if report.partial {
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command) -> Result<Report> {
    match command {
        Command::Generate(args) => generate(&args.load()?),
        Command::Calibrate(args) => calibrate(args.load()?),
        Command::GridSearch(args) => {
            let mut config = args.load()?;
            config.calibration.method = Method::Grid;
            calibrate(config)
        }
        Command::Predict { run, log } => {
            let config = run.load()?;
            let log = PosteriorLog::read_csv(&log)?;
            let metrics = io::predict_from_log(&config, &log, &config.out)?;
            Ok(json!(metrics).into())
        }
        Command::Diagnose {
            trace,
            log,
            stride,
            out,
        } => match (trace, log) {
            (Some(trace), _) => diagnose_trace(&trace, stride, out.as_deref()),
            (None, Some(log)) => diagnose_log(&log),
            (None, None) => Err(Error::Config("need --trace or --log".into())),
        },
        Command::Compare { first, second } => {
            let h = hellinger(&Density1D::read_csv(&first)?, &Density1D::read_csv(&second)?)?;
            Ok(json!({ "hellinger": h }).into())
        }
    }
}

fn generate(config: &RunConfig) -> Result<Report> {
    let spec = config
        .data
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::Config("generate needs a [data.synthetic] section".into()))?;
    let model = config.model()?;
    let params = io::flat_parameters(&model, &config.model.parameters)?
        .into_iter()
        .zip(&model.parameters)
        .map(|(v, n)| v.ok_or_else(|| Error::Config(format!("no value for {n}"))))
        .collect::<Result<Vec<f64>>>()?;
    let (dataset, truth) = io::synth_generate(&model, &params, spec)?;
    std::fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    let path = config.out.join("data.csv");
    io::write_synthetic(&dataset, &truth, &path)?;
    Ok(json!({
        "data": path,
        "truth": io::truth_path(&path),
        "rows": dataset.len(),
        "compartments": dataset.compartments,
    })
    .into())
}

fn calibrate(config: RunConfig) -> Result<Report> {
    let outcome = io::run(&config)?;
    let mut value = json!(outcome.summary);
    value["artifacts"] = json!(outcome.dir);
    Ok(Report {
        value,
        partial: outcome.partial,
    })
}

fn diagnose_trace(path: &Path, stride: usize, out: Option<&Path>) -> Result<Report> {
    let trace = McmcTrace::read_csv(path)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| path.with_file_name(""));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let curves = dir.join("gelman_rubin.csv");
    let last = io::write_rhat_curves(&trace, stride, &curves)?;
    let rhat: BTreeMap<&String, f64> = trace.names.iter().zip(last).collect();
    let acceptance: Vec<f64> = trace.chains.iter().map(|c| c.acceptance_rate()).collect();
    Ok(json!({
        "chains": trace.chains.len(),
        "rhat": rhat,
        "converged": rhat.values().all(|r| *r < 1.2),
        "acceptance_rate": acceptance,
        "curves": curves,
    })
    .into())
}

fn diagnose_log(path: &Path) -> Result<Report> {
    let log = PosteriorLog::read_csv(path)?;
    let mut per_chain: BTreeMap<usize, (usize, f64, f64)> = BTreeMap::new();
    for r in &log.records {
        let e = per_chain.entry(r.chain).or_insert((0, f64::INFINITY, f64::NAN));
        e.0 += 1;
        e.1 = e.1.min(r.loss);
        e.2 = r.loss;
    }
    let chains: Vec<Value> = per_chain
        .iter()
        .map(|(c, (n, best, last))| json!({ "chain": c, "epochs": n, "best_loss": best, "final_loss": last }))
        .collect();
    Ok(json!({
        "records": log.len(),
        "best_loss": log.best().map(|r| r.loss),
        "chains": chains,
    })
    .into())
}
