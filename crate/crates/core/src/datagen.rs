//! Semi-synthetic observational data with controllable selection bias.
//!
//! Each unit gets a unit-norm covariate vector `x`, an assigned dose
//! `t ~ Beta(alpha, beta(x))` whose mode sits at the unit's optimal dose,
//! and a factual outcome `y = mu(x, t) + noise`. `alpha = 1` removes the
//! dependence of `t` on `x`; larger `alpha` concentrates treatments near the
//! optimum and widens the gap between factual and counterfactual
//! distributions.

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Lower clamp for the optimal dose.
pub const MIN_OPTIMAL_TREATMENT: f64 = 0.05;
/// Lower clamp for the second Beta shape.
pub const MIN_BETA: f64 = 0.05;
/// Number of points on the evaluation grid.
pub const GRID_SIZE: usize = 65;

const DATASET_FORMAT: &str = "acfr-dataset-1";

// Independent RNG streams derived from one seed.
const STREAM_COVARIATES: u64 = 0;
const STREAM_WEIGHTS: u64 = 1;
const STREAM_TREATMENT: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_SPLIT: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// The uniform treatment grid `{j / 64 : j = 0..=64}`.
pub fn treatment_grid() -> Vec<f64> {
    (0..GRID_SIZE).map(|j| j as f64 / (GRID_SIZE - 1) as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    /// Quadratic dose response `10 (v1.x + 12 v2.x t - 12 v3.x t^2)`.
    #[serde(rename = "tcga-like")]
    TcgaLike,
    /// Oscillating dose response `10 (v1.x + sin(pi t v2.x / v3.x))`.
    #[serde(rename = "news-like")]
    NewsLike,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n: usize,
    pub d: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
    /// Delimiter-separated covariate matrix to use instead of synthetic
    /// covariates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariates: Option<PathBuf>,
}

fn default_alpha() -> f64 {
    2.0
}

fn default_noise() -> f64 {
    0.2
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind, n: usize, d: usize, alpha: f64, seed: u64) -> Self {
        Self {
            kind,
            n,
            d,
            alpha,
            noise_std: default_noise(),
            seed,
            covariates: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 1.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("dataset.alpha must be >= 1, got {}", self.alpha)));
        }
        if self.n < 10 {
            return Err(Error::Config(format!("dataset.n must be >= 10, got {}", self.n)));
        }
        if self.d < 2 {
            return Err(Error::Config(format!("dataset.d must be >= 2, got {}", self.d)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "dataset.noise_std must be >= 0, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVectors {
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    pub v3: Vec<f64>,
}

/// The three projections `(v1.x, v2.x, v3.x)` that fully determine a unit's
/// response curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projections {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

impl WeightVectors {
    pub fn project(&self, x: &[f64]) -> Projections {
        Projections {
            a: dot(&self.v1, x),
            b: dot(&self.v2, x),
            c: dot(&self.v3, x),
        }
    }
}

/// Three independent standard-normal vectors, each scaled to unit length.
pub fn sample_weight_vectors(d: usize, seed: u64) -> Result<WeightVectors> {
    if d < 2 {
        return Err(Error::Config(format!("weight vectors need d >= 2, got {d}")));
    }
    let mut rng = stream(seed, STREAM_WEIGHTS);
    let mut draw = || -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.into_iter().map(|a| a / norm).collect()
    };
    Ok(WeightVectors {
        v1: draw(),
        v2: draw(),
        v3: draw(),
    })
}

/// Half-normal `|N(0, 1)|` covariates, `[n, d]`.
pub fn generate_covariates(spec: &DatasetSpec) -> Tensor {
    let mut rng = stream(spec.seed, STREAM_COVARIATES);
    let data = (0..spec.n * spec.d)
        .map(|_| rng.sample::<f64, _>(StandardNormal).abs())
        .collect();
    Tensor::matrix(spec.n, spec.d, data).expect("covariate shape")
}

/// Standardizes each column (population standard deviation) and then scales
/// each row to unit Euclidean norm.
pub fn preprocess(raw: &Tensor) -> Result<Tensor> {
    if raw.rank() != 2 || raw.rows() == 0 {
        return Err(Error::invalid("preprocess", format!("expected a non-empty matrix, got {:?}", raw.shape())));
    }
    let (n, d) = (raw.rows(), raw.cols());
    let mut x = raw.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| raw.get(i, j)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (raw.get(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(Error::invalid("preprocess", format!("column {j} has zero variance")));
        }
        for i in 0..n {
            x.set(i, j, (raw.get(i, j) - mean) / std);
        }
    }
    normalize_rows(&mut x)?;
    Ok(x)
}

/// Scales every row to unit norm in place.
pub fn normalize_rows(x: &mut Tensor) -> Result<()> {
    let d = x.cols();
    for (i, row) in x.data_mut().chunks_mut(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::invalid("preprocess", format!("row {i} has zero norm")));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(())
}

/// Dose maximizing (tcga-like) or first maximizing (news-like) the response
/// curve, clamped to `[MIN_OPTIMAL_TREATMENT, 1]`.
pub fn optimal_treatment(p: Projections, kind: DatasetKind) -> f64 {
    let (num, den) = match kind {
        DatasetKind::TcgaLike => (p.b, p.c),
        DatasetKind::NewsLike => (p.c, p.b),
    };
    if den == 0.0 {
        return if num > 0.0 { 1.0 } else { MIN_OPTIMAL_TREATMENT };
    }
    let ratio = num / (2.0 * den);
    if ratio.is_nan() {
        return MIN_OPTIMAL_TREATMENT;
    }
    ratio.clamp(MIN_OPTIMAL_TREATMENT, 1.0)
}

/// Second Beta shape placing the mode of `Beta(alpha, beta)` at `t_star`.
pub fn beta_shape(alpha: f64, t_star: f64) -> f64 {
    ((alpha - 1.0) / t_star + 2.0 - alpha).max(MIN_BETA)
}

/// `Beta(a, b)` via the ratio of two unit-scale Gamma draws.
pub fn sample_beta(rng: &mut impl Rng, a: f64, b: f64) -> f64 {
    let ga = Gamma::new(a, 1.0).expect("positive Beta shape");
    let gb = Gamma::new(b, 1.0).expect("positive Beta shape");
    loop {
        let x: f64 = ga.sample(rng);
        let y: f64 = gb.sample(rng);
        let s = x + y;
        if s > 0.0 {
            return x / s;
        }
    }
}

pub fn assign_treatment(
    p: Projections,
    alpha: f64,
    kind: DatasetKind,
    rng: &mut impl Rng,
) -> Result<f64> {
    if !(alpha >= 1.0) {
        return Err(Error::Domain {
            what: "Beta shape alpha (must be >= 1)",
            value: alpha,
        });
    }
    let beta = beta_shape(alpha, optimal_treatment(p, kind));
    Ok(sample_beta(rng, alpha, beta))
}

/// Noiseless response `mu(x, t)`.
pub fn outcome(p: Projections, t: f64, kind: DatasetKind) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain {
            what: "treatment (must be in [0, 1])",
            value: t,
        });
    }
    let y = match kind {
        DatasetKind::TcgaLike => 10.0 * (p.a + 12.0 * p.b * t - 12.0 * p.c * t * t),
        DatasetKind::NewsLike => 10.0 * (p.a + (p.b / p.c * PI * t).sin()),
    };
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("outcome at t={t} with projections {p:?}")));
    }
    Ok(y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split '{s}' (expected train, val or test)"))),
        }
    }
}

impl Splits {
    /// Shuffled 68/12/20 partition of `0..n`.
    pub fn shuffled(n: usize, rng: &mut impl Rng) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let n_train = n * 68 / 100;
        let n_val = n * 12 / 100;
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        Self {
            train: idx,
            val,
            test,
        }
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    /// Preprocessed covariates `[n, d]`, rows of unit norm.
    pub x: Tensor,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    pub splits: Splits,
    pub weights: WeightVectors,
}

pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let raw = match &spec.covariates {
        Some(path) => {
            let m = load_covariates(path)?;
            if m.rows() != spec.n || m.cols() != spec.d {
                return Err(Error::Config(format!(
                    "covariate file {} is {}x{} but the dataset spec asks for {}x{}",
                    path.display(),
                    m.rows(),
                    m.cols(),
                    spec.n,
                    spec.d
                )));
            }
            m
        }
        None => generate_covariates(spec),
    };
    let x = preprocess(&raw)?;
    let weights = sample_weight_vectors(spec.d, spec.seed)?;

    let mut t_rng = stream(spec.seed, STREAM_TREATMENT);
    let mut noise_rng = stream(spec.seed, STREAM_NOISE);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut t = Vec::with_capacity(spec.n);
    let mut y = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let p = weights.project(x.row(i));
        let ti = assign_treatment(p, spec.alpha, spec.kind, &mut t_rng)?;
        let eps = if spec.noise_std > 0.0 {
            noise.sample(&mut noise_rng)
        } else {
            0.0
        };
        y.push(outcome(p, ti, spec.kind)? + eps);
        t.push(ti);
    }
    let splits = Splits::shuffled(spec.n, &mut stream(spec.seed, STREAM_SPLIT));
    Ok(Dataset {
        spec: spec.clone(),
        x,
        t,
        y,
        splits,
        weights,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn projections(&self, i: usize) -> Projections {
        self.weights.project(self.x.row(i))
    }

    pub fn optimal_treatment(&self, i: usize) -> f64 {
        optimal_treatment(self.projections(i), self.spec.kind)
    }

    /// Ground-truth outcomes of the selected units at each grid point,
    /// `[indices.len(), grid.len()]`.
    pub fn response_grid(&self, indices: &[usize], grid: &[f64]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * grid.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(
                    "response_grid",
                    format!("unit index {i} out of range for {} units", self.len()),
                ));
            }
            let p = self.projections(i);
            for &t in grid {
                data.push(outcome(p, t, self.spec.kind)?);
            }
        }
        Tensor::matrix(indices.len(), grid.len(), data)
    }

    /// Writes the dataset directory: `covariates.csv`, `factual.csv`,
    /// `splits.txt` and `metadata.toml`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        let mut cov = String::new();
        for i in 0..self.len() {
            write_row(&mut cov, self.x.row(i));
        }
        write_file(&dir.join("covariates.csv"), &cov)?;

        let mut fact = String::new();
        for (i, (t, y)) in self.t.iter().zip(&self.y).enumerate() {
            let _ = writeln!(fact, "{i},{t:?},{y:?}");
        }
        write_file(&dir.join("factual.csv"), &fact)?;

        let mut splits = String::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            let list: Vec<String> = self.splits.get(split).iter().map(usize::to_string).collect();
            let _ = writeln!(splits, "{},{}", split.as_str(), list.join(","));
        }
        write_file(&dir.join("splits.txt"), &splits)?;

        let meta = Metadata {
            format: DATASET_FORMAT.into(),
            spec: self.spec.clone(),
            weights: self.weights.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| Error::parse("dataset metadata", e))?;
        write_file(&dir.join("metadata.toml"), &text)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_text = read_file(&dir.join("metadata.toml"))?;
        let meta: Metadata = toml::from_str(&meta_text).map_err(|e| Error::parse("metadata.toml", e))?;
        if meta.format != DATASET_FORMAT {
            return Err(Error::Version {
                expected: DATASET_FORMAT.into(),
                found: meta.format,
            });
        }
        let x = load_covariates(&dir.join("covariates.csv"))?;

        let fact = read_file(&dir.join("factual.csv"))?;
        let mut t = Vec::new();
        let mut y = Vec::new();
        for (line_no, line) in fact.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::parse("factual.csv", format!("line {}: expected 'index,t,y'", line_no + 1));
            if fields.len() != 3 || fields[0].parse::<usize>().ok() != Some(t.len()) {
                return Err(bad());
            }
            t.push(fields[1].parse::<f64>().map_err(|_| bad())?);
            y.push(fields[2].parse::<f64>().map_err(|_| bad())?);
        }

        let split_text = read_file(&dir.join("splits.txt"))?;
        let mut lists: [Option<Vec<usize>>; 3] = [None, None, None];
        for line in split_text.lines().filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split(',').map(str::trim);
            let name: Split = parts.next().unwrap_or_default().parse()?;
            let idx = parts
                .filter(|p| !p.is_empty())
                .map(|p| p.parse::<usize>().map_err(|e| Error::parse("splits.txt", e)))
                .collect::<Result<Vec<_>>>()?;
            lists[name as usize] = Some(idx);
        }
        let [Some(train), Some(val), Some(test)] = lists else {
            return Err(Error::parse("splits.txt", "expected train, val and test lines"));
        };

        let n = t.len();
        if x.rows() != n || x.cols() != meta.spec.d || n != meta.spec.n {
            return Err(Error::parse(
                dir.display().to_string(),
                format!(
                    "inconsistent sizes: covariates {:?}, {} factual rows, spec n={} d={}",
                    x.shape(),
                    n,
                    meta.spec.n,
                    meta.spec.d
                ),
            ));
        }
        let mut seen = vec![false; n];
        for &i in train.iter().chain(&val).chain(&test) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::parse("splits.txt", format!("index {i} repeated or out of range")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::parse("splits.txt", "splits do not cover every unit"));
        }

        Ok(Self {
            spec: meta.spec,
            x,
            t,
            y,
            splits: Splits { train, val, test },
            weights: meta.weights,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    format: String,
    spec: DatasetSpec,
    weights: WeightVectors,
}

fn write_row(out: &mut String, row: &[f64]) {
    for (j, v) in row.iter().enumerate() {
        if j > 0 {
            out.push(',');
        }
        let _ = write!(out, "{v:?}");
    }
    out.push('\n');
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads a numeric matrix separated by commas, tabs, semicolons or spaces.
/// A first line that does not parse as numbers is treated as a header.
pub fn load_covariates(path: &Path) -> Result<Tensor> {
    let text = read_file(path)?;
    let what = path.display().to_string();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line
            .split(|c: char| c == ',' || c == ';' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .map(str::parse::<f64>)
            .collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if rows.is_empty() && line_no == 0 => continue,
            Err(e) => return Err(Error::parse(what, format!("line {}: {e}", line_no + 1))),
        }
    }
    if rows.is_empty() {
        return Err(Error::parse(what, "no numeric rows"));
    }
    Tensor::from_rows(&rows).map_err(|e| Error::parse(what, e))
}
