use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

fn check_shapes(op: &'static str, pred: &Tensor, truth: &Tensor, grid: &[f64]) -> Result<()> {
    if pred.shape() != truth.shape() || pred.rank() != 2 || pred.cols() != grid.len() {
        return Err(Error::Shape {
            op,
            lhs: pred.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        });
    }
    if grid.len() < 2 {
        return Err(Error::invalid(op, "grid needs at least two points"));
    }
    Ok(())
}

/// Trapezoid rule for samples `f` on the (possibly non-uniform) `grid`.
pub fn trapezoid(f: &[f64], grid: &[f64]) -> f64 {
    grid.windows(2)
        .zip(f.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

/// Mean integrated squared error over units. Rows of `pred` and `truth` are
/// response curves sampled on `grid`.
pub fn mise(pred: &Tensor, truth: &Tensor, grid: &[f64]) -> Result<f64> {
    check_shapes("mise", pred, truth, grid)?;
    let n = pred.rows();
    if n == 0 {
        return Err(Error::invalid("mise", "no units"));
    }
    let mut sq = vec![0.0; grid.len()];
    let mut total = 0.0;
    for i in 0..n {
        for (s, (p, t)) in sq.iter_mut().zip(pred.row(i).iter().zip(truth.row(i))) {
            *s = (t - p) * (t - p);
        }
        total += trapezoid(&sq, grid);
    }
    Ok(total / n as f64)
}

/// Index of the first maximum.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Policy error: mean squared gap between the true best outcome and the
/// true outcome at the dose the model believes is best.
pub fn policy_error(pred: &Tensor, truth: &Tensor, grid: &[f64]) -> Result<f64> {
    check_shapes("policy_error", pred, truth, grid)?;
    let n = pred.rows();
    if n == 0 {
        return Err(Error::invalid("policy_error", "no units"));
    }
    let total: f64 = (0..n)
        .map(|i| {
            let t_row = truth.row(i);
            let gap = t_row[argmax(t_row)] - t_row[argmax(pred.row(i))];
            gap * gap
        })
        .sum();
    Ok(total / n as f64)
}

/// One scored (method, seed, alpha, split) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub seed: u64,
    pub alpha: f64,
    pub split: String,
    pub mise: f64,
    pub pe: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub const HEADER: &'static str = "method,seed,alpha,split,mise,pe";

    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    /// Rows without the header line.
    pub fn body(&self) -> String {
        self.rows
            .iter()
            .map(|r| format!("{},{},{:?},{},{:?},{:?}\n", r.method, r.seed, r.alpha, r.split, r.mise, r.pe))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}", Self::HEADER, self.body())
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == Self::HEADER => {}
            other => {
                return Err(Error::parse(
                    "metrics report",
                    format!("expected header '{}', found {other:?}", Self::HEADER),
                ))
            }
        }
        let mut rows = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 6 {
                return Err(Error::parse("metrics report", format!("bad row '{line}'")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::parse("metrics report", e));
            rows.push(MetricsRow {
                method: f[0].to_string(),
                seed: f[1].parse().map_err(|e| Error::parse("metrics report", e))?,
                alpha: num(f[2])?,
                split: f[3].to_string(),
                mise: num(f[4])?,
                pe: num(f[5])?,
            });
        }
        Ok(Self { rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::treatment_grid;

    fn curves(fs: &[&dyn Fn(f64) -> f64], grid: &[f64]) -> Tensor {
        let rows: Vec<Vec<f64>> = fs.iter().map(|f| grid.iter().map(|&t| f(t)).collect()).collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let grid = treatment_grid();
        let truth = curves(&[&|t| t.sin(), &|t| 1.0 - t * t], &grid);
        assert_eq!(mise(&truth, &truth, &grid).unwrap(), 0.0);
        assert_eq!(policy_error(&truth, &truth, &grid).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_gives_offset_squared() {
        let grid = treatment_grid();
        let truth = curves(&[&|t| 3.0 * t, &|t| t.cos()], &grid);
        let pred = truth.map(|v| v + 0.1);
        let m = mise(&pred, &truth, &grid).unwrap();
        assert!((m - 0.01).abs() < 1e-12, "{m}");
    }

    #[test]
    fn linear_truth_against_zero_prediction() {
        let grid = treatment_grid();
        let truth = curves(&[&|t| t], &grid);
        let pred = Tensor::zeros(&[1, 65]);
        let m = mise(&pred, &truth, &grid).unwrap();
        assert!((m - 1.0 / 3.0).abs() < 1e-4, "{m}");
    }

    #[test]
    fn parabola_pair_policy_error() {
        let grid = treatment_grid();
        let truth = curves(&[&|t| 1.0 - (t - 0.5) * (t - 0.5)], &grid);
        let pred = curves(&[&|t| 1.0 - (t - 0.25) * (t - 0.25)], &grid);
        let pe = policy_error(&pred, &truth, &grid).unwrap();
        assert!((pe - 0.00390625).abs() < 1e-12, "{pe}");
    }

    #[test]
    fn increasing_truth_has_optimum_at_one() {
        let grid = treatment_grid();
        let truth = curves(&[&|t| t], &grid);
        assert_eq!(argmax(truth.row(0)), 64);
        // Flat prediction ties everywhere and resolves to t = 0.
        let flat = Tensor::zeros(&[1, 65]);
        assert_eq!(policy_error(&flat, &truth, &grid).unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let grid = treatment_grid();
        let a = Tensor::zeros(&[2, 65]);
        let b = Tensor::zeros(&[3, 65]);
        assert!(mise(&a, &b, &grid).is_err());
        assert!(policy_error(&a, &b, &grid).is_err());
    }

    #[test]
    fn report_csv_round_trip() {
        let mut r = MetricsReport::default();
        r.push(MetricsRow {
            method: "acfr".into(),
            seed: 3,
            alpha: 2.0,
            split: "out-of-sample".into(),
            mise: 0.1 + 0.2,
            pe: 1e-9,
        });
        let text = r.to_csv();
        assert!(text.starts_with("method,seed,alpha,split,mise,pe\n"));
        assert_eq!(MetricsReport::parse_csv(&text).unwrap(), r);
    }
}
