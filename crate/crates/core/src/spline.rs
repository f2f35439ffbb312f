//! Truncated power basis used to embed a scalar treatment.
//!
//! For degree `p` and interior knots `k_1 < ... < k_q` in `(0, 1)` the basis
//! is `[1, t, ..., t^p, (t - k_1)_+^p, ..., (t - k_q)_+^p]`.

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplineConfig {
    pub degree: usize,
    pub knots: Vec<f64>,
}

impl Default for SplineConfig {
    fn default() -> Self {
        Self {
            degree: 2,
            knots: vec![1.0 / 3.0, 2.0 / 3.0],
        }
    }
}

impl SplineConfig {
    pub fn new(degree: usize, knots: Vec<f64>) -> Result<Self> {
        let cfg = Self { degree, knots };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Evenly spaced interior knots `1/(q+1), ..., q/(q+1)`.
    pub fn uniform(degree: usize, knot_count: usize) -> Result<Self> {
        let knots = (1..=knot_count)
            .map(|i| i as f64 / (knot_count + 1) as f64)
            .collect();
        Self::new(degree, knots)
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree == 0 {
            return Err(Error::Config("spline degree must be at least 1".into()));
        }
        if self.knots.iter().any(|&k| !(k > 0.0 && k < 1.0)) {
            return Err(Error::Config(format!(
                "spline knots must lie in (0, 1), got {:?}",
                self.knots
            )));
        }
        if self.knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "spline knots must be strictly increasing, got {:?}",
                self.knots
            )));
        }
        Ok(())
    }

    /// Basis dimension `p + 1 + q`.
    pub fn dim(&self) -> usize {
        self.degree + 1 + self.knots.len()
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }

    fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain {
                what: "spline basis (treatment must be in [0, 1])",
                value: t,
            });
        }
        let p = self.degree as i32;
        for (j, o) in out.iter_mut().take(self.degree + 1).enumerate() {
            *o = t.powi(j as i32);
        }
        for (o, &k) in out[self.degree + 1..].iter_mut().zip(&self.knots) {
            *o = if t > k { (t - k).powi(p) } else { 0.0 };
        }
        Ok(())
    }

    /// One basis row per treatment, as an `[N, m]` tensor.
    pub fn matrix(&self, ts: &[f64]) -> Result<Tensor> {
        let m = self.dim();
        let mut data = vec![0.0; ts.len() * m];
        for (i, (&t, row)) in ts.iter().zip(data.chunks_mut(m)).enumerate() {
            self.eval_into(t, row).map_err(|e| {
                Error::invalid("spline basis matrix", format!("row {i}: {e}"))
            })?;
        }
        Tensor::matrix(ts.len(), m, data)
    }
}
