//! Encoder, treatment predictor and outcome heads.
//!
//! Three model families share one parameter container:
//!
//! * `acfr` encodes covariates into `z`, and predicts the outcome by letting
//!   the spline embedding of the treatment attend over `n` tokens cut from `z`.
//! * `acfr-no-attn` replaces the attention head with a feedforward network
//!   on `concat(z, S(t))`.
//! * `mlp` has no encoder and no adversary; it regresses `y` on
//!   `concat(x, t)` directly.
//!
//! All forward passes are built on [`Graph`] so the same code serves
//! evaluation and training.

use crate::diffmath::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::spline::SplineConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Acfr,
    AcfrNoAttn,
    Mlp,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Acfr, Method::AcfrNoAttn, Method::Mlp];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Acfr => "acfr",
            Method::AcfrNoAttn => "acfr-no-attn",
            Method::Mlp => "mlp",
        }
    }

    /// Whether the method has an encoder and an adversarial treatment
    /// predictor.
    pub fn is_balanced(self) -> bool {
        !matches!(self, Method::Mlp)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}' (expected acfr, acfr-no-attn or mlp)")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub method: Method,
    /// Covariate dimension `d`.
    pub input_dim: usize,
    pub hidden: usize,
    /// Hidden layers in the encoder and treatment predictor.
    pub hidden_layers: usize,
    /// Representation width `r`.
    pub repr_dim: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    /// Number of tokens `z` is split into; must divide `repr_dim`.
    pub tokens: usize,
    /// Width of the hidden layer after the attention context.
    pub head_dim: usize,
    pub spline: SplineConfig,
    pub activation: Activation,
    /// Pin the query projection to an identity-like matrix and never train it.
    pub fixed_query: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            method: Method::Acfr,
            input_dim: 100,
            hidden: 100,
            hidden_layers: 1,
            repr_dim: 64,
            key_dim: 32,
            value_dim: 32,
            tokens: 8,
            head_dim: 16,
            spline: SplineConfig::default(),
            activation: Activation::Relu,
            fixed_query: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("hidden", self.hidden),
            ("repr_dim", self.repr_dim),
            ("key_dim", self.key_dim),
            ("value_dim", self.value_dim),
            ("tokens", self.tokens),
            ("head_dim", self.head_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.repr_dim % self.tokens != 0 {
            return Err(Error::Config(format!(
                "model.repr_dim ({}) must be divisible by model.tokens ({})",
                self.repr_dim, self.tokens
            )));
        }
        self.spline.validate()
    }

    pub fn token_dim(&self) -> usize {
        self.repr_dim / self.tokens
    }
}

/// Dense layer `x W + b` with `W: [in, out]` and `b: [1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: glorot(rng, fan_in, fan_out),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("glorot shape")
}

/// Stack of dense layers with an activation between them and none after the
/// last one.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FeedForward {
    pub layers: Vec<Linear>,
}

impl FeedForward {
    /// Glorot-initialized stack with the given layer widths.
    pub fn init(rng: &mut ChaCha8Rng, widths: &[usize]) -> Self {
        Self {
            layers: widths
                .windows(2)
                .map(|w| Linear::glorot(rng, w[0], w[1]))
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundFeedForward {
        let ids: Vec<NodeId> = self.tensors().into_iter().map(|t| g.leaf(t.clone())).collect();
        bind_ff(self, &mut ids.into_iter())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    /// `W_q: [m, d_k]`, applied to the spline embedding.
    pub query: Tensor,
    /// `W_k: [r/n, d_k]`, shared across representation tokens.
    pub key: Tensor,
    /// `W_v: [r/n, d_v]`.
    pub value: Tensor,
    pub output: FeedForward,
}

#[derive(Clone, Debug, PartialEq)]
pub enum OutcomeHead {
    Attention(AttentionHead),
    Concat(FeedForward),
    Mlp(FeedForward),
}

/// Parameter group, following the encoder / adversary / hypothesis split of
/// the training loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Treatment,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Empty for the `mlp` baseline.
    pub encoder: FeedForward,
    /// Empty for the `mlp` baseline.
    pub treatment: FeedForward,
    pub head: OutcomeHead,
}

pub fn identity_like(rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows, cols]);
    for i in 0..rows.min(cols) {
        t.set(i, i, 1.0);
    }
    t
}

fn bind_ff(ff: &FeedForward, next: &mut impl Iterator<Item = NodeId>) -> BoundFeedForward {
    BoundFeedForward {
        layers: ff
            .layers
            .iter()
            .map(|_| (next.next().unwrap(), next.next().unwrap()))
            .collect(),
    }
}

impl ModelParams {
    /// Glorot-uniform weights and zero biases, deterministic in `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = |input: usize, output: usize| {
            let mut w = vec![input];
            w.extend(std::iter::repeat_n(cfg.hidden, cfg.hidden_layers));
            w.push(output);
            w
        };
        let m = cfg.spline.dim();

        let (encoder, treatment, head) = match cfg.method {
            Method::Mlp => {
                let head = FeedForward::init(&mut rng, &[cfg.input_dim + 1, cfg.hidden, cfg.hidden, 1]);
                (FeedForward::default(), FeedForward::default(), OutcomeHead::Mlp(head))
            }
            method => {
                let encoder = FeedForward::init(&mut rng, &trunk(cfg.input_dim, cfg.repr_dim));
                let treatment = FeedForward::init(&mut rng, &trunk(cfg.repr_dim, 1));
                let head = if method == Method::Acfr {
                    let query = if cfg.fixed_query {
                        identity_like(m, cfg.key_dim)
                    } else {
                        glorot(&mut rng, m, cfg.key_dim)
                    };
                    OutcomeHead::Attention(AttentionHead {
                        query,
                        key: glorot(&mut rng, cfg.token_dim(), cfg.key_dim),
                        value: glorot(&mut rng, cfg.token_dim(), cfg.value_dim),
                        output: FeedForward::init(&mut rng, &[cfg.value_dim, cfg.head_dim, 1]),
                    })
                } else {
                    OutcomeHead::Concat(FeedForward::init(&mut rng, &[cfg.repr_dim + m, cfg.hidden, 1]))
                };
                (encoder, treatment, head)
            }
        };
        Ok(Self {
            config: cfg.clone(),
            encoder,
            treatment,
            head,
        })
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, ff) in [("encoder", &self.encoder), ("treatment", &self.treatment)] {
            for (i, l) in ff.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &l.weight));
                out.push((format!("{prefix}.{i}.bias"), &l.bias));
            }
        }
        let (prefix, ff) = match &self.head {
            OutcomeHead::Attention(a) => {
                out.push(("head.query".into(), &a.query));
                out.push(("head.key".into(), &a.key));
                out.push(("head.value".into(), &a.value));
                ("head.output", &a.output)
            }
            OutcomeHead::Concat(ff) => ("head.concat", ff),
            OutcomeHead::Mlp(ff) => ("head.mlp", ff),
        };
        for (i, l) in ff.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &l.weight));
            out.push((format!("{prefix}.{i}.bias"), &l.bias));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        // Same order as `named_tensors`.
        let mut tensors = self.encoder.tensors_mut();
        tensors.extend(self.treatment.tensors_mut());
        match &mut self.head {
            OutcomeHead::Attention(a) => {
                tensors.push(&mut a.query);
                tensors.push(&mut a.key);
                tensors.push(&mut a.value);
                tensors.extend(a.output.tensors_mut());
            }
            OutcomeHead::Concat(ff) | OutcomeHead::Mlp(ff) => tensors.extend(ff.tensors_mut()),
        }
        tensors
    }

    /// Replaces the named tensor, checking its shape.
    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        let pos = self
            .named_tensors()
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::invalid("set_tensor", format!("no parameter named '{name}'")))?;
        let slot = self.tensors_mut().swap_remove(pos);
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_tensor",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Trainable tensors of one group, in binding order. A fixed query
    /// projection is excluded.
    pub fn group_mut(&mut self, group: Group) -> Vec<&mut Tensor> {
        let fixed_query = self.config.fixed_query;
        match group {
            Group::Encoder => self.encoder.tensors_mut(),
            Group::Treatment => self.treatment.tensors_mut(),
            Group::Head => match &mut self.head {
                OutcomeHead::Attention(a) => {
                    let mut v = Vec::new();
                    if !fixed_query {
                        v.push(&mut a.query);
                    }
                    v.push(&mut a.key);
                    v.push(&mut a.value);
                    v.extend(a.output.tensors_mut());
                    v
                }
                OutcomeHead::Concat(ff) | OutcomeHead::Mlp(ff) => ff.tensors_mut(),
            },
        }
    }


    pub fn group(&self, group: Group) -> Vec<&Tensor> {
        match group {
            Group::Encoder => self.encoder.tensors(),
            Group::Treatment => self.treatment.tensors(),
            Group::Head => match &self.head {
                OutcomeHead::Attention(a) => {
                    let mut v = Vec::new();
                    if !self.config.fixed_query {
                        v.push(&a.query);
                    }
                    v.push(&a.key);
                    v.push(&a.value);
                    v.extend(a.output.tensors());
                    v
                }
                OutcomeHead::Concat(ff) | OutcomeHead::Mlp(ff) => ff.tensors(),
            },
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Leaves for every parameter on `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        let ids: Vec<NodeId> = self
            .named_tensors()
            .into_iter()
            .map(|(_, t)| g.leaf(t.clone()))
            .collect();
        self.bind_existing(&ids).expect("one leaf per named tensor")
    }

    /// Interprets `ids` as leaves holding this model's tensors, in
    /// [`ModelParams::named_tensors`] order.
    pub fn bind_existing(&self, ids: &[NodeId]) -> Result<BoundModel> {
        let expected = self.named_tensors().len();
        if ids.len() != expected {
            return Err(Error::invalid(
                "bind",
                format!("expected {expected} parameter nodes, got {}", ids.len()),
            ));
        }
        let mut next = ids.iter().copied();
        let encoder = bind_ff(&self.encoder, &mut next);
        let treatment = bind_ff(&self.treatment, &mut next);
        let head = match &self.head {
            OutcomeHead::Attention(a) => BoundHead::Attention {
                query: next.next().unwrap(),
                key: next.next().unwrap(),
                value: next.next().unwrap(),
                output: bind_ff(&a.output, &mut next),
            },
            OutcomeHead::Concat(f) => BoundHead::Concat(bind_ff(f, &mut next)),
            OutcomeHead::Mlp(f) => BoundHead::Mlp(bind_ff(f, &mut next)),
        };
        Ok(BoundModel {
            config: self.config.clone(),
            encoder,
            treatment,
            head,
        })
    }

    /// Representation `z = phi(x)`; the identity for the `mlp` baseline.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bm = self.bind(&mut g);
        let xn = g.leaf(x.clone());
        let z = bm.encode(&mut g, xn)?;
        Ok(g.value(z).clone())
    }

    /// Mean of `q(t | z)`, one value per row of `z`.
    pub fn predict_treatment(&self, z: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bm = self.bind(&mut g);
        let zn = g.leaf(z.clone());
        let t = bm.predict_treatment(&mut g, zn)?;
        Ok(g.value(t).data().to_vec())
    }

    /// Outcome head applied to a representation (or, for `mlp`, to raw
    /// covariates).
    pub fn predict_outcome_from_repr(&self, z: &Tensor, t: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bm = self.bind(&mut g);
        let zn = g.leaf(z.clone());
        let y = bm.predict_outcome(&mut g, zn, t)?;
        Ok(g.value(y).data().to_vec())
    }

    /// End-to-end outcome prediction `h(phi(x), t)`.
    pub fn predict(&self, x: &Tensor, t: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bm = self.bind(&mut g);
        let xn = g.leaf(x.clone());
        let z = bm.encode(&mut g, xn)?;
        let y = bm.predict_outcome(&mut g, z, t)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Predicted response curves `[units, grid]`: row `i` holds
    /// `h(phi(x_i), t)` for every `t` in `grid`.
    pub fn predict_grid(&self, x: &Tensor, grid: &[f64]) -> Result<Tensor> {
        let n = x.rows();
        let z = self.encode(x)?;
        let mut out = Tensor::zeros(&[n, grid.len()]);
        for (j, &t) in grid.iter().enumerate() {
            let y = self.predict_outcome_from_repr(&z, &vec![t; n])?;
            for (i, v) in y.into_iter().enumerate() {
                out.set(i, j, v);
            }
        }
        Ok(out)
    }

    /// Softmax weights `[batch, n]` of the attention head.
    pub fn attention_weights(&self, z: &Tensor, t: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let bm = self.bind(&mut g);
        let zn = g.leaf(z.clone());
        let (_, weights) = bm.attention(&mut g, zn, t)?;
        let rows = t.len();
        g.value(weights).clone().reshaped(&[rows, self.config.tokens])
    }
}

#[derive(Clone, Debug)]
pub struct BoundFeedForward {
    layers: Vec<(NodeId, NodeId)>,
}

impl BoundFeedForward {
    pub fn ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn forward(&self, g: &mut Graph, mut x: NodeId, act: Activation) -> Result<NodeId> {
        let last = self.layers.len().saturating_sub(1);
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let xw = g.matmul(x, w)?;
            x = g.add(xw, b)?;
            if i < last {
                x = match act {
                    Activation::Relu => g.relu(x),
                    Activation::Tanh => g.tanh(x),
                };
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub enum BoundHead {
    Attention {
        query: NodeId,
        key: NodeId,
        value: NodeId,
        output: BoundFeedForward,
    },
    Concat(BoundFeedForward),
    Mlp(BoundFeedForward),
}

/// Parameters of a [`ModelParams`] placed on a graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    config: ModelConfig,
    pub encoder: BoundFeedForward,
    pub treatment: BoundFeedForward,
    pub head: BoundHead,
}

impl BoundModel {
    /// Node ids in the same order as [`ModelParams::group_mut`].
    pub fn group_ids(&self, group: Group) -> Vec<NodeId> {
        match group {
            Group::Encoder => self.encoder.ids(),
            Group::Treatment => self.treatment.ids(),
            Group::Head => match &self.head {
                BoundHead::Attention {
                    query,
                    key,
                    value,
                    output,
                } => {
                    let mut v = Vec::new();
                    if !self.config.fixed_query {
                        v.push(*query);
                    }
                    v.push(*key);
                    v.push(*value);
                    v.extend(output.ids());
                    v
                }
                BoundHead::Concat(ff) | BoundHead::Mlp(ff) => ff.ids(),
            },
        }
    }

    fn check_cols(&self, g: &Graph, x: NodeId, expected: usize, op: &'static str) -> Result<()> {
        let v = g.value(x);
        if v.rank() != 2 || v.cols() != expected {
            return Err(Error::Shape {
                op,
                lhs: v.shape().to_vec(),
                rhs: vec![v.rows(), expected],
            });
        }
        Ok(())
    }

    pub fn encode(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.check_cols(g, x, self.config.input_dim, "encode")?;
        if self.encoder.layers.is_empty() {
            return Ok(x);
        }
        self.encoder.forward(g, x, self.config.activation)
    }

    /// Sigmoid-squashed treatment prediction, shape `[batch, 1]`.
    pub fn predict_treatment(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        if self.treatment.layers.is_empty() {
            return Err(Error::invalid("predict_treatment", "model has no treatment predictor"));
        }
        self.check_cols(g, z, self.config.repr_dim, "predict_treatment")?;
        let logits = self.treatment.forward(g, z, self.config.activation)?;
        Ok(g.sigmoid(logits))
    }

    /// Outcome prediction, shape `[batch, 1]`.
    pub fn predict_outcome(&self, g: &mut Graph, z: NodeId, t: &[f64]) -> Result<NodeId> {
        let rows = g.value(z).rows();
        if rows != t.len() {
            return Err(Error::invalid(
                "predict_outcome",
                format!("{rows} representation rows but {} treatments", t.len()),
            ));
        }
        match &self.head {
            BoundHead::Attention { .. } => Ok(self.attention(g, z, t)?.0),
            BoundHead::Concat(ff) => {
                self.check_cols(g, z, self.config.repr_dim, "outcome_no_attention")?;
                let e = g.leaf(self.config.spline.matrix(t)?);
                let input = g.concat(z, e)?;
                ff.forward(g, input, Activation::Relu)
            }
            BoundHead::Mlp(ff) => {
                self.check_cols(g, z, self.config.input_dim, "mlp_baseline")?;
                for &v in t {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::Domain {
                            what: "treatment (must be in [0, 1])",
                            value: v,
                        });
                    }
                }
                let tn = g.leaf(Tensor::column(t));
                let input = g.concat(z, tn)?;
                ff.forward(g, input, Activation::Relu)
            }
        }
    }

    /// Cross-attention head. Returns the prediction and the `[batch, 1, n]`
    /// attention weights.
    fn attention(&self, g: &mut Graph, z: NodeId, t: &[f64]) -> Result<(NodeId, NodeId)> {
        let BoundHead::Attention {
            query,
            key,
            value,
            output,
        } = &self.head
        else {
            return Err(Error::invalid("outcome_attention", "model has no attention head"));
        };
        self.check_cols(g, z, self.config.repr_dim, "outcome_attention")?;
        let cfg = &self.config;
        let b = t.len();
        let (n, dk, dv) = (cfg.tokens, cfg.key_dim, cfg.value_dim);

        let e = g.leaf(cfg.spline.matrix(t)?);
        let q = g.matmul(e, *query)?;
        let q = g.reshape(q, &[b, 1, dk])?;

        let tokens = g.reshape(z, &[b * n, cfg.token_dim()])?;
        let k = g.matmul(tokens, *key)?;
        let k = g.reshape(k, &[b, n, dk])?;
        let kt = g.transpose(k)?;
        let v = g.matmul(tokens, *value)?;
        let v = g.reshape(v, &[b, n, dv])?;

        let logits = g.batch_matmul(q, kt)?;
        let logits = g.scale(logits, 1.0 / (dk as f64).sqrt());
        let weights = g.softmax(logits)?;
        let context = g.batch_matmul(weights, v)?;
        let context = g.reshape(context, &[b, dv])?;
        let y = output.forward(g, context, Activation::Relu)?;
        Ok((y, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::grad_check_many;
    use rand::Rng;

    fn small(method: Method) -> ModelConfig {
        ModelConfig {
            method,
            input_dim: 5,
            hidden: 6,
            hidden_layers: 1,
            repr_dim: 8,
            key_dim: 3,
            value_dim: 3,
            tokens: 4,
            head_dim: 4,
            ..ModelConfig::default()
        }
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    fn zero_all(p: &mut ModelParams) {
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        for n in names {
            let shape = p.named_tensors().into_iter().find(|(m, _)| *m == n).unwrap().1.shape().to_vec();
            p.set_tensor(&n, Tensor::zeros(&shape)).unwrap();
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = small(Method::Acfr);
        assert_eq!(ModelParams::init(&cfg, 3).unwrap(), ModelParams::init(&cfg, 3).unwrap());
        assert_ne!(ModelParams::init(&cfg, 3).unwrap(), ModelParams::init(&cfg, 4).unwrap());
    }

    #[test]
    fn default_key_projection_has_one_row_per_token_feature() {
        let p = ModelParams::init(&ModelConfig::default(), 0).unwrap();
        let OutcomeHead::Attention(a) = &p.head else { panic!() };
        assert_eq!(a.key.shape(), &[8, 32]);
        assert_eq!(a.query.shape(), &[5, 32]);
    }

    #[test]
    fn glorot_bounds_and_zero_biases() {
        let p = ModelParams::init(&small(Method::Acfr), 1).unwrap();
        let l = &p.encoder.layers[0];
        let limit = (6.0f64 / 11.0).sqrt();
        assert!(l.weight.data().iter().all(|w| w.abs() <= limit));
        assert!(l.bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn indivisible_tokens_rejected() {
        let cfg = ModelConfig {
            repr_dim: 10,
            tokens: 4,
            ..small(Method::Acfr)
        };
        assert!(ModelParams::init(&cfg, 0).is_err());
    }

    #[test]
    fn zero_encoder_gives_zero_representation() {
        let mut p = ModelParams::init(&small(Method::Acfr), 0).unwrap();
        zero_all(&mut p);
        let z = p.encode(&random_matrix(3, 5, 9)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let t = p.predict_treatment(&z).unwrap();
        assert!(t.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let p = ModelParams::init(&small(Method::Acfr), 0).unwrap();
        assert!(p.encode(&random_matrix(3, 4, 1)).is_err());
    }

    #[test]
    fn batch_independence() {
        for method in Method::ALL {
            let p = ModelParams::init(&small(method), 2).unwrap();
            let x = random_matrix(2, 5, 11);
            let both = p.predict(&x, &[0.3, 0.8]).unwrap();
            let first = p.predict(&x.select_rows(&[0]), &[0.3]).unwrap();
            assert_eq!(both[0], first[0], "{method}");
        }
    }

    #[test]
    fn treatment_prediction_in_unit_interval() {
        let p = ModelParams::init(&small(Method::Acfr), 5).unwrap();
        let z = random_matrix(20, 8, 6).map(|v| v * 50.0);
        for v in p.predict_treatment(&z).unwrap() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn zero_query_attends_uniformly() {
        let mut p = ModelParams::init(&small(Method::Acfr), 4).unwrap();
        p.set_tensor("head.query", Tensor::zeros(&[5, 3])).unwrap();
        let z = random_matrix(3, 8, 3);
        let w = p.attention_weights(&z, &[0.0, 0.4, 1.0]).unwrap();
        for &v in w.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_weights_form_a_distribution() {
        let p = ModelParams::init(&small(Method::Acfr), 8).unwrap();
        let z = random_matrix(6, 8, 12);
        let w = p.attention_weights(&z, &[0.0, 0.1, 0.3, 0.5, 0.9, 1.0]).unwrap();
        for i in 0..6 {
            let row = w.row(i);
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn token_permutation_leaves_outcome_unchanged() {
        let p = ModelParams::init(&small(Method::Acfr), 8).unwrap();
        let z = random_matrix(3, 8, 13);
        let perm = [2usize, 0, 3, 1];
        let mut zp = z.clone();
        for i in 0..3 {
            for (dst, &src) in perm.iter().enumerate() {
                for c in 0..2 {
                    zp.set(i, dst * 2 + c, z.get(i, src * 2 + c));
                }
            }
        }
        let t = [0.2, 0.5, 0.7];
        let a = p.predict_outcome_from_repr(&z, &t).unwrap();
        let b = p.predict_outcome_from_repr(&zp, &t).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_out_of_range_treatment() {
        let p = ModelParams::init(&small(Method::Acfr), 0).unwrap();
        assert!(p.predict_outcome_from_repr(&random_matrix(1, 8, 0), &[1.5]).is_err());
    }

    #[test]
    fn no_attention_head_with_zero_output_layer_predicts_zero() {
        let mut p = ModelParams::init(&small(Method::AcfrNoAttn), 0).unwrap();
        p.set_tensor("head.concat.1.weight", Tensor::zeros(&[6, 1])).unwrap();
        let y = p.predict(&random_matrix(4, 5, 1), &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn no_attention_head_depends_on_treatment() {
        let p = ModelParams::init(&small(Method::AcfrNoAttn), 21).unwrap();
        let z = random_matrix(1, 8, 2);
        let y0 = p.predict_outcome_from_repr(&z, &[0.0]).unwrap()[0];
        let y1 = p.predict_outcome_from_repr(&z, &[1.0]).unwrap()[0];
        assert_ne!(y0, y1);
    }

    #[test]
    fn mlp_zero_params_predict_zero() {
        let mut p = ModelParams::init(&small(Method::Mlp), 0).unwrap();
        zero_all(&mut p);
        let y = p.predict(&random_matrix(2, 5, 1), &[0.1, 0.9]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
        assert!(p.encoder.layers.is_empty() && p.treatment.layers.is_empty());
    }

    #[test]
    fn fixed_query_is_identity_like_and_not_trainable() {
        let cfg = ModelConfig {
            fixed_query: true,
            ..small(Method::Acfr)
        };
        let mut p = ModelParams::init(&cfg, 0).unwrap();
        let OutcomeHead::Attention(a) = &p.head else { panic!() };
        assert_eq!(a.query, identity_like(5, 3));
        let trainable = p.group_mut(Group::Head).len();
        let all = ModelParams::init(&small(Method::Acfr), 0).unwrap().group(Group::Head).len();
        assert_eq!(trainable + 1, all);
    }

    /// Checks the gradient of `mean(head(phi(x), t)^2)` with respect to every
    /// parameter of the model.
    fn model_grad_error(method: Method, seed: u64) -> f64 {
        let cfg = small(method);
        let p = ModelParams::init(&cfg, seed).unwrap();
        let x = random_matrix(4, 5, seed + 100);
        let t = [0.1, 0.45, 0.7, 0.95];
        let params: Vec<Tensor> = p.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
        grad_check_many(
            |g, ids| {
                let bm = p.bind_existing(ids)?;
                let xn = g.leaf(x.clone());
                let z = bm.encode(g, xn)?;
                let y = bm.predict_outcome(g, z, &t)?;
                let zero = g.leaf(Tensor::zeros(&[4, 1]));
                g.squared_error(y, zero)
            },
            &params,
            1e-5,
        )
        .unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for method in Method::ALL {
            for seed in 0..3 {
                let err = model_grad_error(method, seed);
                assert!(err < 1e-4, "{method} seed {seed}: {err}");
            }
        }
    }
}
