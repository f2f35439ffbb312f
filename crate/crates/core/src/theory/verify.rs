//! Seeded sweep of the bound checks over random discrete instances.

use super::bounds::{random_instance, DiscreteInstance};
use super::info::{marginals, pinsker_check, product_of_marginals};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Counterexamples kept per check.
const MAX_COUNTEREXAMPLES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyConfig {
    pub instances: usize,
    /// Inclusive upper bound on `|Z|` (lower bound is 2).
    pub max_z: usize,
    /// Inclusive upper bound on `|T|` (lower bound is 2).
    pub max_t: usize,
    pub seed: u64,
    /// Replace each joint by the product of its marginals.
    pub independent: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            instances: 1000,
            max_z: 8,
            max_t: 8,
            seed: 7,
            independent: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckSummary {
    pub name: String,
    pub checked: usize,
    pub violations: usize,
    /// Smallest `rhs - lhs` seen.
    pub min_slack: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Counterexample {
    pub check: String,
    pub instance: usize,
    pub instance_seed: u64,
    pub t1: Option<usize>,
    pub t2: Option<usize>,
    pub lhs: f64,
    pub rhs: f64,
    pub data: DiscreteInstance,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub instances: usize,
    pub seed: u64,
    pub max_z: usize,
    pub max_t: usize,
    pub independent: bool,
    /// Largest `eps_cf - eps_f` over all instances.
    pub max_counterfactual_gap: f64,
    pub checks: Vec<CheckSummary>,
    pub counterexamples: Vec<Counterexample>,
}

impl VerifyReport {
    pub fn total_violations(&self) -> usize {
        self.checks.iter().map(|c| c.violations).sum()
    }

    pub fn check(&self, name: &str) -> Option<&CheckSummary> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::parse("verifier report", e))
    }
}

pub const CHECK_NAMES: [&str; 7] = [
    "prop1_joint_first",
    "prop1_product_first",
    "lemma1",
    "prop2",
    "prop2_doubled",
    "pinsker_joint",
    "pinsker_conditional",
];

struct Tally {
    checks: Vec<CheckSummary>,
    counterexamples: Vec<Counterexample>,
}

impl Tally {
    fn new() -> Self {
        Self {
            checks: CHECK_NAMES
                .iter()
                .map(|n| CheckSummary {
                    name: (*n).to_string(),
                    checked: 0,
                    violations: 0,
                    min_slack: f64::INFINITY,
                })
                .collect(),
            counterexamples: Vec::new(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        check: &str,
        holds: bool,
        lhs: f64,
        rhs: f64,
        instance: usize,
        instance_seed: u64,
        ts: (Option<usize>, Option<usize>),
        data: &DiscreteInstance,
    ) {
        let s = self.checks.iter_mut().find(|c| c.name == check).expect("known check");
        s.checked += 1;
        s.min_slack = s.min_slack.min(rhs - lhs);
        if !holds {
            s.violations += 1;
            let kept = self.counterexamples.iter().filter(|c| c.check == check).count();
            if kept < MAX_COUNTEREXAMPLES {
                self.counterexamples.push(Counterexample {
                    check: check.to_string(),
                    instance,
                    instance_seed,
                    t1: ts.0,
                    t2: ts.1,
                    lhs,
                    rhs,
                    data: data.clone(),
                });
            }
        }
    }
}

fn make_independent(inst: DiscreteInstance) -> Result<DiscreteInstance> {
    let joint = product_of_marginals(&inst.joint);
    // Renormalize so the product still sums to one within the tolerance.
    let total: f64 = joint.data().iter().sum();
    let joint = joint.map(|v| v / total);
    match (inst.response, inst.hypothesis) {
        (Some(mu), Some(h)) => DiscreteInstance::with_responses(joint, mu, h, inst.bound),
        _ => DiscreteInstance::new(joint, inst.loss, inst.bound),
    }
}

/// Runs every bound check over `cfg.instances` seeded random instances.
pub fn verify_bounds(cfg: &VerifyConfig) -> Result<VerifyReport> {
    if cfg.instances == 0 {
        return Err(Error::invalid("verify_bounds", "need at least one instance"));
    }
    if cfg.max_z < 2 || cfg.max_t < 2 {
        return Err(Error::invalid("verify_bounds", "instance sizes must allow at least 2x2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tally = Tally::new();
    let mut max_gap = f64::NEG_INFINITY;

    for i in 0..cfg.instances {
        let nz = rng.random_range(2..=cfg.max_z);
        let nt = rng.random_range(2..=cfg.max_t);
        let loss_seed: u64 = rng.random();
        let resp_seed: u64 = rng.random();

        let mut inst = random_instance(nz, nt, loss_seed, false)?;
        let mut resp = random_instance(nz, nt, resp_seed, true)?;
        if cfg.independent {
            inst = make_independent(inst)?;
            resp = make_independent(resp)?;
        }

        let p1 = inst.check_prop1()?;
        max_gap = max_gap.max(p1.lhs - p1.factual);
        let rec = |tally: &mut Tally, name, holds, lhs, rhs, ts, data: &DiscreteInstance, seed| {
            tally.record(name, holds, lhs, rhs, i, seed, ts, data)
        };
        rec(
            &mut tally,
            "prop1_joint_first",
            p1.lhs <= p1.rhs_joint_first + super::SLACK_TOLERANCE,
            p1.lhs,
            p1.rhs_joint_first,
            (None, None),
            &inst,
            loss_seed,
        );
        rec(
            &mut tally,
            "prop1_product_first",
            p1.lhs <= p1.rhs_product_first + super::SLACK_TOLERANCE,
            p1.lhs,
            p1.rhs_product_first,
            (None, None),
            &inst,
            loss_seed,
        );

        let product = product_of_marginals(&inst.joint);
        if let Ok(pc) = pinsker_check(inst.joint.data(), &normalized(&product)) {
            rec(&mut tally, "pinsker_joint", pc.holds, pc.tv_sum, pc.kl_bound, (None, None), &inst, loss_seed);
        }
        let (pz, _) = marginals(&inst.joint);
        for t in 0..nt {
            let l1 = inst.check_lemma1(t)?;
            rec(&mut tally, "lemma1", l1.holds, l1.lhs, l1.rhs, (Some(t), None), &inst, loss_seed);
            let cond = inst.conditional(t)?;
            if let Ok(pc) = pinsker_check(&normalized_vec(&pz), &normalized_vec(&cond)) {
                rec(&mut tally, "pinsker_conditional", pc.holds, pc.tv_sum, pc.kl_bound, (Some(t), None), &inst, loss_seed);
            }
        }

        for t1 in 0..nt {
            for t2 in t1 + 1..nt {
                let c = resp.check_prop2(t1, t2)?;
                rec(&mut tally, "prop2", c.holds, c.pehe, c.rhs, (Some(t1), Some(t2)), &resp, resp_seed);
                rec(
                    &mut tally,
                    "prop2_doubled",
                    c.holds_doubled,
                    c.pehe,
                    c.rhs_doubled,
                    (Some(t1), Some(t2)),
                    &resp,
                    resp_seed,
                );
            }
        }
    }

    Ok(VerifyReport {
        instances: cfg.instances,
        seed: cfg.seed,
        max_z: cfg.max_z,
        max_t: cfg.max_t,
        independent: cfg.independent,
        max_counterfactual_gap: max_gap,
        checks: tally.checks,
        counterexamples: tally.counterexamples,
    })
}

// Marginals can drift from summing to one by a few ulps.
fn normalized(t: &Tensor) -> Vec<f64> {
    normalized_vec(t.data())
}

fn normalized_vec(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_sweep_is_deterministic() {
        let cfg = VerifyConfig {
            instances: 20,
            ..VerifyConfig::default()
        };
        let a = verify_bounds(&cfg).unwrap();
        let b = verify_bounds(&cfg).unwrap();
        assert_eq!(a.to_toml().unwrap(), b.to_toml().unwrap());
        for name in CHECK_NAMES {
            assert!(a.check(name).unwrap().checked > 0, "{name}");
        }
    }

    #[test]
    fn independent_instances_have_no_counterfactual_gap() {
        let cfg = VerifyConfig {
            instances: 1,
            independent: true,
            ..VerifyConfig::default()
        };
        let r = verify_bounds(&cfg).unwrap();
        assert!(r.max_counterfactual_gap.abs() < 1e-15, "{}", r.max_counterfactual_gap);
    }

    #[test]
    fn zero_instances_rejected() {
        let cfg = VerifyConfig {
            instances: 0,
            ..VerifyConfig::default()
        };
        assert!(verify_bounds(&cfg).is_err());
    }
}
