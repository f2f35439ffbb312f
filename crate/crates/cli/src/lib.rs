//! `acfr` command-line driver.

pub mod commands;
pub mod config;
pub mod error;
pub mod gradsuite;

use acfr_core::datagen::Split;
use acfr_core::theory::VerifyConfig;
use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use error::{CliError, CliResult};
use std::path::{Path, PathBuf};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "ACFR_OUT";
pub const DEFAULT_OUT: &str = "acfr-out";

#[derive(Debug, Parser)]
#[command(name = "acfr", version, about = "Adversarial counterfactual regression experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run only this seed instead of the config's seed list.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root; falls back to the config's out_dir, then $ACFR_OUT.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write one dataset directory per seed.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train the configured method on each seed's dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory, or a root holding seed-N directories.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint's response curves and append to a metrics report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// train (within-sample), val or test (out-of-sample); repeatable.
        #[arg(long)]
        split: Vec<String>,
        /// Score the ground-truth curves instead of a model.
        #[arg(long)]
        oracle: bool,
        /// Report file; defaults to OUT/eval/metrics.csv.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate, train and evaluate over a grid of selection-bias levels.
    SweepBias {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        alphas: Vec<f64>,
        #[arg(long)]
        realizations: Option<usize>,
        /// Worker threads for independent cells.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Check the error bounds on random discrete instances.
    VerifyBounds {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 8)]
        max_z: usize,
        #[arg(long, default_value_t = 8)]
        max_t: usize,
        /// Use product-form joints (treatment independent of z).
        #[arg(long)]
        independent: bool,
    },
    /// Compare analytic gradients with central finite differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 10)]
        seeds: usize,
    },
}

impl Common {
    fn load(&self) -> CliResult<RunConfig> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| CliError::Usage("--config is required".into()))?;
        let mut cfg = RunConfig::load(path)?;
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg: Option<&RunConfig>) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.and_then(|c| c.out_dir.clone()))
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

fn parse_splits(raw: &[String], cfg: Option<&RunConfig>) -> CliResult<Vec<Split>> {
    if raw.is_empty() {
        return Ok(cfg.map(|c| c.eval.splits.clone()).unwrap_or(vec![Split::Test, Split::Train]));
    }
    raw.iter()
        .map(|s| s.parse::<Split>().map_err(|e| CliError::Usage(e.to_string())))
        .collect()
}

fn warn(cfg: &RunConfig) {
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
}

/// Runs one parsed command, printing a human-readable summary to stdout.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate { common } => {
            let cfg = common.load()?;
            for s in commands::generate(&cfg, &common.out_dir(Some(&cfg)))? {
                println!("{s}");
            }
        }
        Command::Train { common, data } => {
            let cfg = common.load()?;
            warn(&cfg);
            for s in commands::train(&cfg, data.as_deref(), &common.out_dir(Some(&cfg)))? {
                println!("{s}");
            }
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
            oracle,
            report,
        } => {
            let cfg = match &common.config {
                Some(_) => Some(common.load()?),
                None => None,
            };
            let splits = parse_splits(&split, cfg.as_ref())?;
            let report = report.unwrap_or_else(|| common.out_dir(cfg.as_ref()).join("eval").join("metrics.csv"));
            let ckpt = if oracle { None } else { checkpoint.as_deref() };
            for r in commands::eval(ckpt, &data, &splits, &report)? {
                println!("{} seed={} alpha={} {}: mise={:.6} pe={:.6}", r.method, r.seed, r.alpha, r.split, r.mise, r.pe);
            }
        }
        Command::SweepBias {
            common,
            alphas,
            realizations,
            jobs,
        } => {
            let cfg = common.load()?;
            warn(&cfg);
            let alphas = if alphas.is_empty() { cfg.sweep.alphas.clone() } else { alphas };
            let realizations = realizations.unwrap_or(cfg.sweep.realizations);
            let out = common.out_dir(Some(&cfg));
            let res = commands::sweep_bias(&cfg, &alphas, realizations, jobs, &out)?;
            print!("{}", res.summary_csv());
            for f in &res.failures {
                eprintln!("cell failed: alpha={} seed={} method={}: {}", f.alpha, f.seed, f.method, f.error);
            }
        }
        Command::VerifyBounds {
            common,
            instances,
            max_z,
            max_t,
            independent,
        } => {
            let vc = VerifyConfig {
                instances,
                max_z,
                max_t,
                seed: common.seed.unwrap_or(7),
                independent,
            };
            let report = commands::verify(&vc, &common.out_dir(None))?;
            println!("instances: {}", report.instances);
            println!("max eps_cf - eps_f: {:e}", report.max_counterfactual_gap);
            for c in &report.checks {
                println!("{:20} checked={:6} violations={:5} min_slack={:e}", c.name, c.checked, c.violations, c.min_slack);
            }
            if let Some(e) = commands::violation_error(&report) {
                return Err(e);
            }
        }
        Command::GradCheck { common, seeds } => {
            let results = commands::grad_check(common.seed.unwrap_or(0), seeds, &common.out_dir(None))?;
            print!("{}", gradsuite::render(&results));
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(CliError::Numerical(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs, and maps the outcome to a process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Resolves the output root the way the binary does, for callers that
/// build configs programmatically.
pub fn default_out(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}
