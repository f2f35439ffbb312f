use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::trainer::{adv_loss, fit_adversary_to_convergence, AdversaryConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const MIN_PROBE_SAMPLES: usize = 50;

/// How well `t` can be recovered from `z`: `1 - MSE_holdout / Var(t)` for a
/// fresh treatment predictor fit on a random 70% of the rows and scored on
/// the remaining 30%. A linear `cfg` (see [`AdversaryConfig::linear`]) keeps
/// the score from going far below zero through overfitting.
pub fn balance_probe(z: &Tensor, t: &[f64], cfg: &AdversaryConfig) -> Result<f64> {
    if z.rank() != 2 || z.rows() != t.len() {
        return Err(Error::Shape {
            op: "balance_probe",
            lhs: z.shape().to_vec(),
            rhs: vec![t.len()],
        });
    }
    let n = t.len();
    if n < MIN_PROBE_SAMPLES {
        return Err(Error::invalid(
            "balance_probe",
            format!("need at least {MIN_PROBE_SAMPLES} samples, got {n}"),
        ));
    }
    let mean = t.iter().sum::<f64>() / n as f64;
    let var = t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return Err(Error::invalid("balance_probe", "treatment has zero variance"));
    }

    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    idx.shuffle(&mut rng);
    let (fit_idx, hold_idx) = idx.split_at(n * 7 / 10);

    let pick = |ids: &[usize]| ids.iter().map(|&i| t[i]).collect::<Vec<f64>>();
    let fit = fit_adversary_to_convergence(&z.select_rows(fit_idx), &pick(fit_idx), cfg)?;
    let pred = fit.adversary.predict(&z.select_rows(hold_idx))?;
    Ok(1.0 - adv_loss(&pick(hold_idx), &pred)? / var)
}
