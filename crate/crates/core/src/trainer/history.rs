use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

/// Per-iteration training record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub l_pred: Vec<f64>,
    pub l_adv: Vec<f64>,
    /// Milliseconds since the start of training, after each iteration.
    pub wall_ms: Vec<f64>,
    /// `(iteration, validation l_pred)` at every evaluation point.
    pub validation: Vec<(usize, f64)>,
}

impl TrainHistory {
    pub const HEADER: &'static str = "iteration,l_pred,l_adv,val_l_pred,wall_ms";

    pub fn len(&self) -> usize {
        self.l_pred.len()
    }

    pub fn is_empty(&self) -> bool {
        self.l_pred.is_empty()
    }

    /// Everything except wall-clock timings.
    pub fn same_losses(&self, other: &Self) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        bits(&self.l_pred) == bits(&other.l_pred)
            && bits(&self.l_adv) == bits(&other.l_adv)
            && self.validation.len() == other.validation.len()
            && self
                .validation
                .iter()
                .zip(&other.validation)
                .all(|(a, b)| a.0 == b.0 && a.1.to_bits() == b.1.to_bits())
    }

    /// One row per iteration; `val_l_pred` is empty where no evaluation ran.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        let mut val = self.validation.iter().peekable();
        for i in 0..self.len() {
            let v = match val.peek() {
                Some(&&(it, v)) if it == i => {
                    val.next();
                    format!("{v:?}")
                }
                _ => String::new(),
            };
            let _ = writeln!(out, "{i},{:?},{:?},{v},{:.3}", self.l_pred[i], self.l_adv[i], self.wall_ms[i]);
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(Self::HEADER) {
            return Err(Error::parse("train history", format!("expected header '{}'", Self::HEADER)));
        }
        let mut h = Self::default();
        for (row, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::parse("train history", format!("row {row}: {e}")));
            if f.len() != 5 || f[0].trim() != row.to_string() {
                return Err(Error::parse("train history", format!("bad row {row}: '{line}'")));
            }
            h.l_pred.push(num(f[1])?);
            h.l_adv.push(num(f[2])?);
            if !f[3].trim().is_empty() {
                h.validation.push((row, num(f[3])?));
            }
            h.wall_ms.push(num(f[4])?);
        }
        Ok(h)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let h = TrainHistory {
            l_pred: vec![1.5, 0.25, 0.1],
            l_adv: vec![0.1, 0.2, 0.3],
            wall_ms: vec![1.0, 2.5, 3.125],
            validation: vec![(0, 2.0), (2, 0.5)],
        };
        let text = h.to_csv();
        assert!(text.starts_with("iteration,l_pred,l_adv,val_l_pred,wall_ms\n0,1.5,0.1,2.0,1.000\n1,0.25,0.2,,2.500\n"));
        assert_eq!(TrainHistory::parse_csv(&text).unwrap(), h);
    }
}
