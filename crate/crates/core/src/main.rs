use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ctrecon::pipeline::{self, ExperimentConfig, SynthConfig};
use ctrecon::Error;

#[derive(Parser)]
#[command(
    name = "ctrecon",
    version,
    about = "Cross-temporal reconciliation of hierarchical wind-power forecasts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Aggregate the input panel to every temporal level.
    Aggregate(Common),
    /// Fit base models, forecast the test span and collect error panels.
    Forecast(Common),
    /// Reconcile stored base forecasts.
    Reconcile(Common),
    /// Score stored forecasts.
    Evaluate(Common),
    /// Full pipeline into a fresh artifact directory.
    Run(Common),
    /// Write a synthetic panel in the input schema.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ErrorsArg {
    InSample,
    Validation,
}

#[derive(Clone, Copy, ValueEnum)]
enum HierarchyArg {
    Statistical,
    Decision,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of base,pbu,ct_str,ct_wlsv,ct_bdshr,ct_acov,ite,ct_bu.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long, value_enum)]
    errors: Option<ErrorsArg>,
    #[arg(long, value_enum)]
    hierarchy: Option<HierarchyArg>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::load(&self.config).map_err(|e| e.at_stage("config"))?;
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = &self.methods {
            cfg.methods = m.clone();
        }
        if let Some(e) = self.errors {
            cfg.errors = match e {
                ErrorsArg::InSample => "in_sample",
                ErrorsArg::Validation => "validation",
            }
            .into();
        }
        if let Some(h) = self.hierarchy {
            cfg.temporal.factors = None;
            cfg.temporal.m = None;
            cfg.temporal.preset = Some(
                match h {
                    HierarchyArg::Statistical => "statistical",
                    HierarchyArg::Decision => "decision",
                }
                .into(),
            );
        }
        cfg.validate().map_err(|e| e.at_stage("config"))?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Optional TOML file holding a synthetic-panel section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n_bottom: Option<usize>,
    #[arg(long)]
    days: Option<usize>,
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Aggregate(c) => {
            let p = pipeline::aggregate_stage(&c.load()?)?;
            println!("{}", p.display());
        }
        Command::Forecast(c) => {
            for p in pipeline::forecast_stage(&c.load()?)? {
                println!("{}", p.display());
            }
        }
        Command::Reconcile(c) => {
            for p in pipeline::reconcile_stage(&c.load()?)? {
                println!("{}", p.display());
            }
        }
        Command::Evaluate(c) => {
            for p in pipeline::evaluate_stage(&c.load()?)? {
                println!("{}", p.display());
            }
        }
        Command::Run(c) => {
            let s = pipeline::run_experiment(&c.load()?)?;
            println!("{} (config sha256 {})", s.out_dir.display(), s.config_sha256);
        }
        Command::Synth(a) => {
            let mut cfg = match &a.config {
                Some(p) => ExperimentConfig::load(p)
                    .map_err(|e| e.at_stage("config"))?
                    .data
                    .synth
                    .unwrap_or_default(),
                None => SynthConfig::default(),
            };
            if let Some(n) = a.n_bottom {
                cfg.n_bottom = n;
            }
            if let Some(d) = a.days {
                cfg.days = d;
            }
            pipeline::synth_stage(&cfg, a.seed, &a.out).map_err(|e| e.at_stage("synth"))?;
            println!("{}", a.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
