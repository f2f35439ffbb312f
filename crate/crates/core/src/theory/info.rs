use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use serde::Serialize;

/// `KL(p || q)` in nats, with `0 log(0 / q) = 0`.
///
/// Fails if some cell has `q = 0 < p`.
pub fn discrete_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            op: "discrete_kl",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::invalid(
                "discrete_kl",
                format!("cell {i} has q = 0 but p = {pi}; p is not absolutely continuous w.r.t. q"),
            ));
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl)
}

/// KL divergence, or `+inf` when absolute continuity fails.
pub(crate) fn kl_or_inf(p: &[f64], q: &[f64]) -> f64 {
    discrete_kl(p, q).unwrap_or(f64::INFINITY)
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Row (`z`) and column (`t`) marginals of a joint table.
pub fn marginals(joint: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (nz, nt) = (joint.rows(), joint.cols());
    let mut pz = vec![0.0; nz];
    let mut pt = vec![0.0; nt];
    for i in 0..nz {
        for (j, v) in joint.row(i).iter().enumerate() {
            pz[i] += v;
            pt[j] += v;
        }
    }
    (pz, pt)
}

/// `p(z) p(t)` laid out like the joint.
pub fn product_of_marginals(joint: &Tensor) -> Tensor {
    let (pz, pt) = marginals(joint);
    let data = pz.iter().flat_map(|a| pt.iter().map(move |b| a * b)).collect();
    Tensor::matrix(pz.len(), pt.len(), data).expect("marginal product shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MutualInfo {
    /// `I(T; Z)` in nats.
    pub mi: f64,
    pub h_t: f64,
    pub h_t_given_z: f64,
}

/// Mutual information of a joint `p(z, t)` table (rows `z`, columns `t`).
pub fn mutual_info(joint: &Tensor) -> Result<MutualInfo> {
    validate_joint(joint)?;
    let mi = discrete_kl(joint.data(), product_of_marginals(joint).data())?;
    let (_, pt) = marginals(joint);
    let h_t = entropy(&pt);
    Ok(MutualInfo {
        mi,
        h_t,
        h_t_given_z: h_t - mi,
    })
}

pub(crate) fn validate_joint(joint: &Tensor) -> Result<()> {
    if joint.rank() != 2 || joint.is_empty() {
        return Err(Error::invalid("joint table", format!("expected a non-empty matrix, got {:?}", joint.shape())));
    }
    validate_distribution("joint table", joint.data())
}

pub(crate) fn validate_distribution(what: &'static str, p: &[f64]) -> Result<()> {
    if let Some(i) = p.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid(what, format!("cell {i} is {} (must be a finite non-negative number)", p[i])));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::invalid(what, format!("probabilities sum to {total}, not 1")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PinskerCheck {
    /// `sum |p - q|`, twice the total variation distance.
    pub tv_sum: f64,
    /// `sqrt(2 KL(p || q))`.
    pub kl_bound: f64,
    pub holds: bool,
}

pub fn pinsker_check(p: &[f64], q: &[f64]) -> Result<PinskerCheck> {
    validate_distribution("pinsker p", p)?;
    validate_distribution("pinsker q", q)?;
    let kl = discrete_kl(p, q)?;
    let tv_sum: f64 = p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum();
    let kl_bound = (2.0 * kl).sqrt();
    Ok(PinskerCheck {
        tv_sum,
        kl_bound,
        holds: tv_sum <= kl_bound + super::SLACK_TOLERANCE,
    })
}
