use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative gap between one-sided slopes treated as a kink.
pub const KINK_GAP: f64 = 1e-3;

/// Worst relative disagreement between the graph's gradient of `f` at `x`
/// and central finite differences with the given step.
///
/// The error for each coordinate is `|analytic - numeric| / max(1, |analytic|)`.
/// When the forward and backward one-sided slopes disagree by more than
/// `KINK_GAP`, a kink (e.g. a ReLU switching) lies within one step and the
/// coordinate is scored against whichever of the three estimates is closest.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    grad_check_many(|g, ids| f(g, ids[0]), std::slice::from_ref(x), step)
}

/// [`grad_check`] over several inputs at once; every coordinate of every
/// input is probed.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid("grad_check", format!("step must be positive, got {step}")));
    }

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = f(&mut g, &ids)?;
        let v = g.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check probe".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&mut g, &ids)?;
    if !g.value(out).item()?.is_finite() {
        return Err(Error::NonFinite("grad_check base point".into()));
    }
    let base = g.value(out).item()?;
    let grads = g.backward(out)?;

    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0_f64;
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.wrt(*id);
        for j in 0..inputs[k].len() {
            let orig = inputs[k].data()[j];
            probe[k].data_mut()[j] = orig + step;
            let plus = eval(&probe)?;
            probe[k].data_mut()[j] = orig - step;
            let minus = eval(&probe)?;
            probe[k].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[j];
            let scale = a.abs().max(1.0);
            let mut err = (a - numeric).abs();
            let (fwd, bwd) = ((plus - base) / step, (base - minus) / step);
            if (fwd - bwd).abs() > KINK_GAP * numeric.abs().max(1.0) {
                err = err.min((a - fwd).abs()).min((a - bwd).abs());
            }
            worst = worst.max(err / scale);
        }
    }
    Ok(worst)
}
