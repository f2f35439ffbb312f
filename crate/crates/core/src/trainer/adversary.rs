use super::optim::{GroupOptimizer, Optimizer};
use crate::diffmath::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{Activation, FeedForward};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Settings for fitting a treatment predictor on a frozen representation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversaryConfig {
    pub hidden: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    /// Adam step size.
    pub lr: f64,
    /// Stop once the loss improved by less than `min_improvement` over this
    /// many steps.
    pub window: usize,
    pub min_improvement: f64,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            hidden_layers: 1,
            activation: Activation::Relu,
            lr: 1e-2,
            window: 100,
            min_improvement: 1e-7,
            max_steps: 20_000,
            seed: 0,
        }
    }
}

impl AdversaryConfig {
    /// `sigmoid(z w + b)` with no hidden layer.
    pub fn linear() -> Self {
        Self {
            hidden_layers: 0,
            ..Self::default()
        }
    }
}

/// Stand-alone treatment predictor `sigmoid(net(z))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adversary {
    pub net: FeedForward,
    pub activation: Activation,
}

impl Adversary {
    pub fn init(input_dim: usize, cfg: &AdversaryConfig) -> Result<Self> {
        if input_dim == 0 || cfg.hidden == 0 {
            return Err(Error::invalid("adversary", "widths must be positive"));
        }
        let mut widths = vec![input_dim];
        widths.extend(std::iter::repeat_n(cfg.hidden, cfg.hidden_layers));
        widths.push(1);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            net: FeedForward::init(&mut rng, &widths),
            activation: cfg.activation,
        })
    }

    pub fn predict(&self, z: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.net.bind(&mut g);
        let zn = g.leaf(z.clone());
        let logits = bound.forward(&mut g, zn, self.activation)?;
        let out = g.sigmoid(logits);
        Ok(g.value(out).data().to_vec())
    }

    /// Mean squared treatment error on `(z, t)`.
    pub fn loss(&self, z: &Tensor, t: &[f64]) -> Result<f64> {
        adv_loss(t, &self.predict(z)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversaryFit {
    pub adversary: Adversary,
    /// Training loss at the returned parameters.
    pub l_adv: f64,
    pub steps: usize,
}

pub(crate) fn mean_squared(op: &'static str, a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op,
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    if a.is_empty() {
        return Err(Error::invalid(op, "empty batch"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Factual outcome loss: mean of `(y - y_hat)^2`.
pub fn pred_loss(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    mean_squared("pred_loss", y, y_hat)
}

/// Treatment prediction loss: mean of `(t - t_hat)^2`.
pub fn adv_loss(t: &[f64], t_hat: &[f64]) -> Result<f64> {
    mean_squared("adv_loss", t, t_hat)
}

/// Trains a fresh treatment predictor on frozen `z` with full-batch Adam
/// until the loss plateaus.
pub fn fit_adversary_to_convergence(z: &Tensor, t: &[f64], cfg: &AdversaryConfig) -> Result<AdversaryFit> {
    if z.rank() != 2 || z.rows() != t.len() {
        return Err(Error::Shape {
            op: "fit_adversary",
            lhs: z.shape().to_vec(),
            rhs: vec![t.len()],
        });
    }
    if t.is_empty() {
        return Err(Error::invalid("fit_adversary", "empty batch"));
    }
    if cfg.window == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("adversary window and lr must be positive".into()));
    }
    let mut adv = Adversary::init(z.cols(), cfg)?;
    let mut opt = GroupOptimizer::new(Optimizer::Adam);
    let target = Tensor::column(t);
    let mut losses: Vec<f64> = Vec::new();

    for step in 0..=cfg.max_steps {
        let mut g = Graph::new();
        let bound = adv.net.bind(&mut g);
        let zn = g.leaf(z.clone());
        let logits = bound.forward(&mut g, zn, adv.activation)?;
        let pred = g.sigmoid(logits);
        let tn = g.leaf(target.clone());
        let loss = g.squared_error(pred, tn)?;
        let l = g.value(loss).item()?;
        if !l.is_finite() {
            return Err(Error::Divergence {
                iteration: step,
                l_pred: f64::NAN,
                l_adv: l,
            });
        }
        losses.push(l);
        let plateau = step >= cfg.window && losses[step - cfg.window] - l < cfg.min_improvement;
        if plateau || step == cfg.max_steps {
            return Ok(AdversaryFit {
                adversary: adv,
                l_adv: l,
                steps: step,
            });
        }
        let grads = g.backward(loss)?;
        let gs: Vec<Tensor> = bound.ids().into_iter().map(|id| grads.wrt(id)).collect();
        opt.step(adv.net.tensors_mut(), &gs, cfg.lr)?;
    }
    unreachable!("loop returns at max_steps")
}
