//! Finite stand-ins for the counterfactual error bounds.
//!
//! A [`DiscreteInstance`] replaces the integrals over representations and
//! treatments with sums over a `|Z| x |T|` table, so every quantity in the
//! bounds can be computed exactly and each inequality checked by brute force.

use super::info::{kl_or_inf, marginals, product_of_marginals, validate_joint};
use super::SLACK_TOLERANCE;
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiscreteInstance {
    /// `p(z, t)`, rows indexed by `z`.
    pub joint: Tensor,
    /// Unit loss `l(z, t) >= 0`.
    pub loss: Tensor,
    /// Bound constant with `l / C <= 1`.
    pub bound: f64,
    /// Ground-truth responses `mu(z, t)`.
    pub response: Option<Tensor>,
    /// Model responses `h(z, t)`.
    pub hypothesis: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExpectedErrors {
    pub factual: f64,
    pub counterfactual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Prop1Check {
    /// Counterfactual error.
    pub lhs: f64,
    pub factual: f64,
    /// `KL(p(z,t) || p(z)p(t))`.
    pub kl_joint_first: f64,
    /// `KL(p(z)p(t) || p(z,t))`, `+inf` if the joint has holes.
    pub kl_product_first: f64,
    pub rhs_joint_first: f64,
    pub rhs_product_first: f64,
    pub holds: bool,
}

impl Prop1Check {
    pub fn slack(&self) -> f64 {
        (self.rhs_joint_first - self.lhs).min(self.rhs_product_first - self.lhs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl BoundCheck {
    fn new(lhs: f64, rhs: f64) -> Self {
        Self {
            lhs,
            rhs,
            holds: lhs <= rhs + SLACK_TOLERANCE,
        }
    }

    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Prop2Check {
    pub pehe: f64,
    /// Right-hand side exactly as stated.
    pub rhs: f64,
    pub holds: bool,
    /// Twice the stated right-hand side, which is what the triangle-inequality
    /// step actually supports: `(a - b)^2 <= 2a^2 + 2b^2`.
    pub rhs_doubled: f64,
    pub holds_doubled: bool,
}

impl DiscreteInstance {
    pub fn new(joint: Tensor, loss: Tensor, bound: f64) -> Result<Self> {
        let inst = Self {
            joint,
            loss,
            bound,
            response: None,
            hypothesis: None,
        };
        inst.validate()?;
        Ok(inst)
    }

    /// Instance whose loss is the squared gap between `response` and
    /// `hypothesis`.
    pub fn with_responses(joint: Tensor, response: Tensor, hypothesis: Tensor, bound: f64) -> Result<Self> {
        if response.shape() != hypothesis.shape() {
            return Err(Error::Shape {
                op: "discrete instance",
                lhs: response.shape().to_vec(),
                rhs: hypothesis.shape().to_vec(),
            });
        }
        let data = response
            .data()
            .iter()
            .zip(hypothesis.data())
            .map(|(m, h)| (m - h) * (m - h))
            .collect();
        let loss = Tensor::new(response.shape().to_vec(), data)?;
        let inst = Self {
            joint,
            loss,
            bound,
            response: Some(response),
            hypothesis: Some(hypothesis),
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        validate_joint(&self.joint)?;
        if self.loss.shape() != self.joint.shape() {
            return Err(Error::Shape {
                op: "discrete instance",
                lhs: self.joint.shape().to_vec(),
                rhs: self.loss.shape().to_vec(),
            });
        }
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            return Err(Error::invalid("discrete instance", format!("bound constant C must be positive, got {}", self.bound)));
        }
        for (i, &l) in self.loss.data().iter().enumerate() {
            if !(l >= 0.0 && l / self.bound <= 1.0) {
                return Err(Error::invalid(
                    "discrete instance",
                    format!("loss cell {i} = {l} violates 0 <= l / C <= 1 with C = {}", self.bound),
                ));
            }
        }
        match (&self.response, &self.hypothesis) {
            (None, None) => {}
            (Some(mu), Some(h)) => {
                for (i, ((m, hv), l)) in mu.data().iter().zip(h.data()).zip(self.loss.data()).enumerate() {
                    let sq = (m - hv) * (m - hv);
                    if (sq - l).abs() > 1e-12 * sq.abs().max(1.0) {
                        return Err(Error::invalid(
                            "discrete instance",
                            format!("loss cell {i} = {l} is not (mu - h)^2 = {sq}"),
                        ));
                    }
                }
            }
            _ => {
                return Err(Error::invalid("discrete instance", "response and hypothesis tables must be given together"));
            }
        }
        Ok(())
    }

    pub fn z_count(&self) -> usize {
        self.joint.rows()
    }

    pub fn t_count(&self) -> usize {
        self.joint.cols()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.t_count() {
            return Err(Error::invalid(
                "discrete instance",
                format!("treatment index {t} out of range for {} treatments", self.t_count()),
            ));
        }
        Ok(())
    }

    /// `p(z | t)`.
    pub fn conditional(&self, t: usize) -> Result<Vec<f64>> {
        self.check_t(t)?;
        let (_, pt) = marginals(&self.joint);
        if pt[t] == 0.0 {
            return Err(Error::invalid("factual_error", format!("treatment {t} has zero probability")));
        }
        Ok((0..self.z_count()).map(|z| self.joint.get(z, t) / pt[t]).collect())
    }

    /// `sum_z l(z, t) p(z | t)`.
    pub fn factual_error(&self, t: usize) -> Result<f64> {
        let cond = self.conditional(t)?;
        Ok(cond.iter().enumerate().map(|(z, p)| self.loss.get(z, t) * p).sum())
    }

    /// `sum_z l(z, t) p(z)`.
    pub fn counterfactual_error(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        let (pz, _) = marginals(&self.joint);
        Ok(pz.iter().enumerate().map(|(z, p)| self.loss.get(z, t) * p).sum())
    }

    pub fn expected_errors(&self) -> ExpectedErrors {
        let product = product_of_marginals(&self.joint);
        let weigh = |w: &Tensor| w.data().iter().zip(self.loss.data()).map(|(p, l)| p * l).sum();
        ExpectedErrors {
            factual: weigh(&self.joint),
            counterfactual: weigh(&product),
        }
    }

    /// Counterfactual error against factual error plus `C sqrt(2 KL)`, with
    /// the KL evaluated in both argument orders.
    pub fn check_prop1(&self) -> Result<Prop1Check> {
        self.validate()?;
        let errors = self.expected_errors();
        let product = product_of_marginals(&self.joint);
        let kl_joint_first = kl_or_inf(self.joint.data(), product.data());
        let kl_product_first = kl_or_inf(product.data(), self.joint.data());
        let rhs = |kl: f64| errors.factual + self.bound * (2.0 * kl).sqrt();
        let (rj, rp) = (rhs(kl_joint_first), rhs(kl_product_first));
        let lhs = errors.counterfactual;
        Ok(Prop1Check {
            lhs,
            factual: errors.factual,
            kl_joint_first,
            kl_product_first,
            rhs_joint_first: rj,
            rhs_product_first: rp,
            holds: lhs <= rj + SLACK_TOLERANCE && lhs <= rp + SLACK_TOLERANCE,
        })
    }

    /// `C sqrt(2 KL(p(z) || p(z|t)))`.
    fn shift_penalty(&self, t: usize) -> Result<f64> {
        let (pz, _) = marginals(&self.joint);
        let cond = self.conditional(t)?;
        Ok(self.bound * (2.0 * kl_or_inf(&pz, &cond)).sqrt())
    }

    /// Per-treatment bound `eps_cf(t) <= eps_f(t) + C sqrt(2 KL(p(z) || p(z|t)))`.
    pub fn check_lemma1(&self, t: usize) -> Result<BoundCheck> {
        self.validate()?;
        let rhs = self.factual_error(t)? + self.shift_penalty(t)?;
        Ok(BoundCheck::new(self.counterfactual_error(t)?, rhs))
    }

    fn tables(&self) -> Result<(&Tensor, &Tensor)> {
        match (&self.response, &self.hypothesis) {
            (Some(mu), Some(h)) => Ok((mu, h)),
            _ => Err(Error::invalid("pehe", "instance has no response/hypothesis tables")),
        }
    }

    /// Expected squared error of the estimated effect of moving from `t1`
    /// to `t2`.
    pub fn pehe(&self, t1: usize, t2: usize) -> Result<f64> {
        self.check_t(t1)?;
        self.check_t(t2)?;
        let (mu, h) = self.tables()?;
        let (pz, _) = marginals(&self.joint);
        Ok(pz
            .iter()
            .enumerate()
            .map(|(z, p)| {
                let d = (mu.get(z, t1) - mu.get(z, t2)) - (h.get(z, t1) - h.get(z, t2));
                d * d * p
            })
            .sum())
    }

    pub fn check_prop2(&self, t1: usize, t2: usize) -> Result<Prop2Check> {
        self.validate()?;
        let pehe = self.pehe(t1, t2)?;
        let rhs = self.factual_error(t1)?
            + self.factual_error(t2)?
            + self.shift_penalty(t1)?
            + self.shift_penalty(t2)?;
        Ok(Prop2Check {
            pehe,
            rhs,
            holds: pehe <= rhs + SLACK_TOLERANCE,
            rhs_doubled: 2.0 * rhs,
            holds_doubled: pehe <= 2.0 * rhs + SLACK_TOLERANCE,
        })
    }
}

/// Random instance: a Dirichlet(1, ..., 1) joint and either uniform losses on
/// `[0, C]` or losses from random response tables with `C = max l`.
pub fn random_instance(nz: usize, nt: usize, seed: u64, with_responses: bool) -> Result<DiscreteInstance> {
    if nz < 2 || nt < 2 {
        return Err(Error::invalid("random_instance", format!("sizes must be >= 2, got {nz}x{nt}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: Vec<f64> = (0..nz * nt).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = cells.iter().sum();
    cells.iter_mut().for_each(|v| *v /= total);
    let joint = Tensor::matrix(nz, nt, cells)?;

    if with_responses {
        let mut table = || {
            let data = (0..nz * nt).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::matrix(nz, nt, data)
        };
        let mu = table()?;
        let h = table()?;
        let max_loss = mu
            .data()
            .iter()
            .zip(h.data())
            .map(|(m, h)| (m - h) * (m - h))
            .fold(0.0, f64::max);
        DiscreteInstance::with_responses(joint, mu, h, max_loss.max(f64::MIN_POSITIVE))
    } else {
        let bound = rng.random_range(0.5..5.0);
        let loss = (0..nz * nt).map(|_| rng.random_range(0.0..=bound)).collect();
        DiscreteInstance::new(joint, Tensor::matrix(nz, nt, loss)?, bound)
    }
}
