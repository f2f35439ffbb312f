//! One function per subcommand. Each takes fully resolved inputs and writes
//! its outputs under an output directory.

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::gradsuite;
use acfr_core::datagen::{make_dataset, treatment_grid, Dataset, Split};
use acfr_core::model::{Method, ModelConfig, ModelParams};
use acfr_core::theory::{mise, policy_error, verify_bounds, MetricsReport, MetricsRow, VerifyConfig, VerifyReport};
use acfr_core::trainer::{Checkpoint, Trainer};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

fn write(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn data_dir(out: &Path, seed: u64) -> PathBuf {
    out.join("data").join(format!("seed-{seed}"))
}

pub fn run_dir(out: &Path, method: Method, seed: u64) -> PathBuf {
    out.join("train").join(method.as_str()).join(format!("seed-{seed}"))
}

/// Report label of a split.
pub fn split_label(split: Split) -> &'static str {
    match split {
        Split::Test => "out-of-sample",
        Split::Train => "within-sample",
        Split::Val => "validation",
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va * vb).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateSummary {
    pub seed: u64,
    pub dir: PathBuf,
    pub n: usize,
    pub d: usize,
    pub alpha: f64,
    pub split_sizes: [usize; 3],
    pub mean_t: f64,
    /// Correlation between assigned and optimal treatment.
    pub corr_t_opt: f64,
}

impl fmt::Display for GenerateSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [tr, va, te] = self.split_sizes;
        write!(
            f,
            "seed {}: N={} d={} alpha={} splits={tr}/{va}/{te} mean_t={:.4} corr(t,t*)={:.4} -> {}",
            self.seed,
            self.n,
            self.d,
            self.alpha,
            self.mean_t,
            self.corr_t_opt,
            self.dir.display()
        )
    }
}

pub fn summarize(ds: &Dataset, dir: PathBuf) -> GenerateSummary {
    let t_opt: Vec<f64> = (0..ds.len()).map(|i| ds.optimal_treatment(i)).collect();
    GenerateSummary {
        seed: ds.spec.seed,
        dir,
        n: ds.len(),
        d: ds.x.cols(),
        alpha: ds.spec.alpha,
        split_sizes: [ds.splits.train.len(), ds.splits.val.len(), ds.splits.test.len()],
        mean_t: mean(&ds.t),
        corr_t_opt: correlation(&ds.t, &t_opt),
    }
}

pub fn generate(cfg: &RunConfig, out: &Path) -> CliResult<Vec<GenerateSummary>> {
    cfg.seeds
        .iter()
        .map(|&seed| {
            let ds = make_dataset(&cfg.dataset_for(seed, None))?;
            let dir = data_dir(out, seed);
            ds.save(&dir)?;
            Ok(summarize(&ds, dir))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub seed: u64,
    pub dir: PathBuf,
    pub final_l_pred: f64,
    pub final_val_l_pred: f64,
}

impl fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "seed {}: l_pred={:.5} val_l_pred={:.5} -> {}",
            self.seed,
            self.final_l_pred,
            self.final_val_l_pred,
            self.dir.display()
        )
    }
}

/// `data` may be a dataset directory (used for every seed) or a root with
/// `seed-N` subdirectories; it defaults to `out/data`.
fn dataset_path(data: Option<&Path>, out: &Path, seed: u64) -> PathBuf {
    match data {
        Some(d) if d.join("metadata.toml").is_file() => d.to_path_buf(),
        Some(d) => d.join(format!("seed-{seed}")),
        None => data_dir(out, seed),
    }
}

/// Trains one model and writes `checkpoint.json` and `history.csv`. On
/// divergence the partial history is still written.
pub fn train_one(ds: &Dataset, cfg: &RunConfig, model: &ModelConfig, seed: u64, dir: &Path) -> CliResult<TrainSummary> {
    let train_cfg = cfg.train_for(seed);
    let mut trainer = Trainer::new(ds, model, &train_cfg)?;
    let result = trainer.run();
    write(&dir.join("history.csv"), &trainer.history().to_csv())?;
    result?;
    write(&dir.join("checkpoint.json"), &trainer.checkpoint().to_json()?)?;
    let h = trainer.history();
    Ok(TrainSummary {
        seed,
        dir: dir.to_path_buf(),
        final_l_pred: *h.l_pred.last().unwrap_or(&f64::NAN),
        final_val_l_pred: trainer.validation_loss()?,
    })
}

pub fn train(cfg: &RunConfig, data: Option<&Path>, out: &Path) -> CliResult<Vec<TrainSummary>> {
    let mut done = Vec::new();
    for &seed in &cfg.seeds {
        let ds = Dataset::load(&dataset_path(data, out, seed))?;
        let dir = run_dir(out, cfg.model.method, seed);
        done.push(train_one(&ds, cfg, &cfg.model, seed, &dir)?);
    }
    Ok(done)
}

/// Scores response curves on the 65-point grid for one split.
pub fn score(params: Option<&ModelParams>, ds: &Dataset, split: Split) -> CliResult<(f64, f64)> {
    let grid = treatment_grid();
    let idx = ds.splits.get(split);
    let truth = ds.response_grid(idx, &grid)?;
    let pred = match params {
        Some(p) => {
            if p.config.input_dim != ds.x.cols() {
                return Err(CliError::Usage(format!(
                    "checkpoint expects {} covariates but the dataset has {}",
                    p.config.input_dim,
                    ds.x.cols()
                )));
            }
            p.predict_grid(&ds.x.select_rows(idx), &grid)?
        }
        None => truth.clone(),
    };
    Ok((mise(&pred, &truth, &grid)?, policy_error(&pred, &truth, &grid)?))
}

/// Scores `checkpoint` (or the ground truth with `checkpoint = None`) and
/// appends one row per split to the report at `report`.
pub fn eval(checkpoint: Option<&Path>, data: &Path, splits: &[Split], report: &Path) -> CliResult<Vec<MetricsRow>> {
    let ds = Dataset::load(data)?;
    let (params, method) = match checkpoint {
        Some(path) => {
            let p = Checkpoint::load(path)?.params()?;
            let m = p.config.method.as_str().to_string();
            (Some(p), m)
        }
        None => (None, "oracle".to_string()),
    };
    let mut rows = Vec::new();
    for &split in splits {
        let (m, pe) = score(params.as_ref(), &ds, split)?;
        rows.push(MetricsRow {
            method: method.clone(),
            seed: ds.spec.seed,
            alpha: ds.spec.alpha,
            split: split_label(split).to_string(),
            mise: m,
            pe,
        });
    }
    let mut all = if report.is_file() {
        let text = fs::read_to_string(report).map_err(|e| CliError::io(report, e))?;
        MetricsReport::parse_csv(&text)?
    } else {
        MetricsReport::default()
    };
    for r in &rows {
        all.push(r.clone());
    }
    write(report, &all.to_csv())?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepFailure {
    pub alpha: f64,
    pub seed: u64,
    pub method: Method,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepOutput {
    pub report: MetricsReport,
    pub failures: Vec<SweepFailure>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl SweepOutput {
    /// Median MISE and PE per (method, alpha), in first-seen order.
    pub fn medians(&self) -> Vec<(String, f64, f64, f64)> {
        let mut keys: Vec<(String, u64)> = Vec::new();
        for r in &self.report.rows {
            let k = (r.method.clone(), r.alpha.to_bits());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.into_iter()
            .map(|(m, a)| {
                let rows: Vec<&MetricsRow> = self
                    .report
                    .rows
                    .iter()
                    .filter(|r| r.method == m && r.alpha.to_bits() == a)
                    .collect();
                let mises = rows.iter().map(|r| r.mise).collect();
                let pes = rows.iter().map(|r| r.pe).collect();
                (m, f64::from_bits(a), median(mises), median(pes))
            })
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("method,alpha,median_mise,median_pe\n");
        for (m, a, mi, pe) in self.medians() {
            s.push_str(&format!("{m},{a:?},{mi:?},{pe:?}\n"));
        }
        s
    }

    pub fn failures_csv(&self) -> String {
        let mut s = String::from("alpha,seed,method,error\n");
        for f in &self.failures {
            s.push_str(&format!("{:?},{},{},\"{}\"\n", f.alpha, f.seed, f.method, f.error.replace('"', "'")));
        }
        s
    }
}

type CellResult = Vec<Result<MetricsRow, SweepFailure>>;

fn sweep_cell(cfg: &RunConfig, alpha: f64, seed: u64, out: &Path) -> CellResult {
    let fail = |method, error: String| SweepFailure {
        alpha,
        seed,
        method,
        error,
    };
    let ds = match make_dataset(&cfg.dataset_for(seed, Some(alpha))) {
        Ok(ds) => ds,
        Err(e) => return cfg.sweep.methods.iter().map(|&m| Err(fail(m, e.to_string()))).collect(),
    };
    cfg.sweep
        .methods
        .iter()
        .map(|&method| {
            let model = ModelConfig {
                method,
                ..cfg.model.clone()
            };
            let dir = out
                .join("sweep")
                .join(format!("alpha-{alpha}"))
                .join(method.as_str())
                .join(format!("seed-{seed}"));
            let run = || -> CliResult<MetricsRow> {
                train_one(&ds, cfg, &model, seed, &dir)?;
                let params = Checkpoint::load(&dir.join("checkpoint.json"))?.params()?;
                let (m, pe) = score(Some(&params), &ds, Split::Test)?;
                Ok(MetricsRow {
                    method: method.as_str().to_string(),
                    seed,
                    alpha,
                    split: split_label(Split::Test).to_string(),
                    mise: m,
                    pe,
                })
            };
            run().map_err(|e| fail(method, e.to_string()))
        })
        .collect()
}

/// Generates, trains every method and scores the test split for each
/// `(alpha, seed)` cell. Failed cells are recorded and skipped. Cells run on
/// up to `jobs` threads; the report order does not depend on `jobs`.
pub fn sweep_bias(cfg: &RunConfig, alphas: &[f64], realizations: usize, jobs: usize, out: &Path) -> CliResult<SweepOutput> {
    if alphas.is_empty() {
        return Err(CliError::Usage("--alphas must not be empty".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a >= 1.0 && a.is_finite())) {
        return Err(CliError::Usage(format!("alphas must be >= 1, got {a}")));
    }
    if realizations == 0 {
        return Err(CliError::Usage("--realizations must be at least 1".into()));
    }
    let cells: Vec<(f64, u64)> = alphas
        .iter()
        .flat_map(|&a| (0..realizations as u64).map(move |s| (a, s)))
        .collect();
    let mut results: Vec<Option<CellResult>> = vec![None; cells.len()];
    let jobs = jobs.max(1);
    for (chunk_cells, chunk_out) in cells.chunks(jobs).zip(results.chunks_mut(jobs)) {
        std::thread::scope(|s| {
            for (&(alpha, seed), slot) in chunk_cells.iter().zip(chunk_out.iter_mut()) {
                s.spawn(move || *slot = Some(sweep_cell(cfg, alpha, seed, out)));
            }
        });
    }
    let mut output = SweepOutput::default();
    for r in results.into_iter().flatten().flatten() {
        match r {
            Ok(row) => output.report.push(row),
            Err(f) => output.failures.push(f),
        }
    }
    write(&out.join("sweep").join("report.csv"), &output.report.to_csv())?;
    write(&out.join("sweep").join("summary.csv"), &output.summary_csv())?;
    write(&out.join("sweep").join("failures.csv"), &output.failures_csv())?;
    Ok(output)
}

/// Runs the bound sweep and writes `verify/report.toml`. Any violation is a
/// numerical failure carrying the serialized counterexamples.
pub fn verify(cfg: &VerifyConfig, out: &Path) -> CliResult<VerifyReport> {
    let report = verify_bounds(cfg)?;
    let text = report.to_toml()?;
    write(&out.join("verify").join("report.toml"), &text)?;
    Ok(report)
}

pub fn violation_error(report: &VerifyReport) -> Option<CliError> {
    if report.total_violations() == 0 {
        return None;
    }
    let counts: Vec<String> = report
        .checks
        .iter()
        .filter(|c| c.violations > 0)
        .map(|c| format!("{}: {} of {}", c.name, c.violations, c.checked))
        .collect();
    let first = report
        .counterexamples
        .first()
        .map(|c| toml::to_string(c).unwrap_or_default())
        .unwrap_or_default();
    Some(CliError::Numerical(format!(
        "bound violations ({})\nfirst counterexample:\n{first}",
        counts.join(", ")
    )))
}

pub fn grad_check(seed: u64, count: usize, out: &Path) -> CliResult<Vec<gradsuite::ComponentResult>> {
    if count == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (seed..seed + count as u64).collect();
    let results = gradsuite::run(&seeds)?;
    write(&out.join("gradcheck").join("report.csv"), &gradsuite::render(&results))?;
    Ok(results)
}
