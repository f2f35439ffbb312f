use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// `w -= lr * g`.
    #[default]
    Sgd,
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Update rule for one parameter group.
#[derive(Clone, Debug)]
pub struct GroupOptimizer {
    kind: Optimizer,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: i32,
}

impl GroupOptimizer {
    pub fn new(kind: Optimizer) -> Self {
        Self {
            kind,
            m: Vec::new(),
            v: Vec::new(),
            steps: 0,
        }
    }

    /// Applies one step. `grads` line up with `params`.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(
                "optimizer step",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    p.axpy(-lr, g)?;
                }
            }
            Optimizer::Adam => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
                    self.v = self.m.clone();
                }
                self.steps += 1;
                let c1 = 1.0 - BETA1.powi(self.steps);
                let c2 = 1.0 - BETA2.powi(self.steps);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    if p.shape() != g.shape() || m.shape() != g.shape() {
                        return Err(Error::Shape {
                            op: "adam",
                            lhs: p.shape().to_vec(),
                            rhs: g.shape().to_vec(),
                        });
                    }
                    for (((w, &gi), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                        *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut w = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.5, 0.25]).unwrap();
        GroupOptimizer::new(Optimizer::Sgd).step(vec![&mut w], &[g], 0.1).unwrap();
        assert_eq!(w.data(), &[1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut w = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let g = Tensor::new(vec![2], vec![3.0, -0.01]).unwrap();
        GroupOptimizer::new(Optimizer::Adam).step(vec![&mut w], &[g], 0.1).unwrap();
        assert!((w.data()[0] + 0.1).abs() < 1e-8);
        assert!((w.data()[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_weights_untouched() {
        for kind in [Optimizer::Sgd, Optimizer::Adam] {
            let mut w = Tensor::new(vec![3], vec![0.3, -1.5, 2.0]).unwrap();
            let before = w.clone();
            let mut opt = GroupOptimizer::new(kind);
            for _ in 0..3 {
                opt.step(vec![&mut w], &[Tensor::zeros(&[3])], 0.5).unwrap();
            }
            assert_eq!(w, before);
        }
    }
}
