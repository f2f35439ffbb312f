//! Finite-difference checks over every primitive and model path.

use acfr_core::diffmath::{grad_check_many, Graph, NodeId, Tensor};
use acfr_core::model::{Method, ModelConfig, ModelParams};
use acfr_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const THRESHOLD: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentResult {
    pub name: String,
    /// Worst relative error over all seeds.
    pub worst: f64,
}

impl ComponentResult {
    pub fn passed(&self) -> bool {
        self.worst < THRESHOLD
    }
}

type Case = fn(&mut ChaCha8Rng) -> Result<f64>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Reduces any node to a scalar with a fixed random weighting so every
/// output coordinate matters.
fn weighted_sum(g: &mut Graph, x: NodeId, w: &Tensor) -> Result<NodeId> {
    let wn = g.leaf(w.clone());
    let p = g.mul(x, wn)?;
    Ok(g.sum(p))
}

fn check_op(rng: &mut ChaCha8Rng, shapes: &[&[usize]], out: &[usize], op: fn(&mut Graph, &[NodeId]) -> Result<NodeId>) -> Result<f64> {
    let inputs: Vec<Tensor> = shapes.iter().map(|s| random(rng, s)).collect();
    let w = random(rng, out);
    grad_check_many(
        |g, ids| {
            let y = op(g, ids)?;
            weighted_sum(g, y, &w)
        },
        &inputs,
        STEP,
    )
}

const PRIMITIVES: [(&str, Case); 16] = [
    ("matmul", |r| check_op(r, &[&[3, 4], &[4, 2]], &[3, 2], |g, x| g.matmul(x[0], x[1]))),
    ("batch_matmul", |r| check_op(r, &[&[2, 3, 4], &[2, 4, 2]], &[2, 3, 2], |g, x| g.batch_matmul(x[0], x[1]))),
    ("add", |r| check_op(r, &[&[3, 4], &[1, 4]], &[3, 4], |g, x| g.add(x[0], x[1]))),
    ("sub", |r| check_op(r, &[&[3, 4], &[3, 4]], &[3, 4], |g, x| g.sub(x[0], x[1]))),
    ("mul", |r| check_op(r, &[&[3, 4], &[3, 4]], &[3, 4], |g, x| g.mul(x[0], x[1]))),
    ("scale", |r| check_op(r, &[&[3, 4]], &[3, 4], |g, x| Ok(g.scale(x[0], -1.7)))),
    ("relu", |r| check_op(r, &[&[3, 4]], &[3, 4], |g, x| Ok(g.relu(x[0])))),
    ("tanh", |r| check_op(r, &[&[3, 4]], &[3, 4], |g, x| Ok(g.tanh(x[0])))),
    ("sigmoid", |r| check_op(r, &[&[3, 4]], &[3, 4], |g, x| Ok(g.sigmoid(x[0])))),
    ("softmax", |r| check_op(r, &[&[2, 3, 4]], &[2, 3, 4], |g, x| g.softmax(x[0]))),
    ("concat", |r| check_op(r, &[&[3, 2], &[3, 4]], &[3, 6], |g, x| g.concat(x[0], x[1]))),
    ("reshape", |r| check_op(r, &[&[3, 4]], &[2, 6], |g, x| g.reshape(x[0], &[2, 6]))),
    ("transpose", |r| check_op(r, &[&[2, 3, 4]], &[2, 4, 3], |g, x| g.transpose(x[0]))),
    ("mean", |r| check_op(r, &[&[3, 4]], &[], |g, x| g.mean(x[0]))),
    ("sum", |r| check_op(r, &[&[3, 4]], &[], |g, x| Ok(g.sum(x[0])))),
    ("squared_error", |r| check_op(r, &[&[5, 1], &[5, 1]], &[], |g, x| g.squared_error(x[0], x[1]))),
];

fn small(method: Method) -> ModelConfig {
    ModelConfig {
        method,
        input_dim: 5,
        hidden: 6,
        repr_dim: 6,
        tokens: 3,
        key_dim: 4,
        value_dim: 4,
        head_dim: 5,
        ..ModelConfig::default()
    }
}

fn treatments(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
}

/// Every parameter, jittered off the initializer. Zero biases plus a dead
/// ReLU layer can otherwise leave pre-activations exactly on the kink.
fn all_params(rng: &mut ChaCha8Rng, p: &ModelParams) -> Vec<Tensor> {
    p.named_tensors()
        .into_iter()
        .map(|(_, t)| {
            let mut t = t.clone();
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
            t
        })
        .collect()
}

/// Outcome head (or the whole model for `mlp`) against random targets,
/// differentiated with respect to every parameter.
fn outcome_path(rng: &mut ChaCha8Rng, method: Method, from_repr: bool) -> Result<f64> {
    let p = ModelParams::init(&small(method), rng.random())?;
    let width = if from_repr { p.config.repr_dim } else { p.config.input_dim };
    let input = random(rng, &[4, width]);
    let t = treatments(rng, 4);
    let y = random(rng, &[4, 1]);
    grad_check_many(
        |g, ids| {
            let bm = p.bind_existing(ids)?;
            let xn = g.leaf(input.clone());
            let z = if from_repr { xn } else { bm.encode(g, xn)? };
            let out = bm.predict_outcome(g, z, &t)?;
            let target = g.leaf(y.clone());
            g.squared_error(out, target)
        },
        &all_params(rng, &p),
        STEP,
    )
}

fn encoder_path(rng: &mut ChaCha8Rng) -> Result<f64> {
    let p = ModelParams::init(&small(Method::Acfr), rng.random())?;
    let mut inputs = all_params(rng, &p);
    inputs.push(random(rng, &[4, p.config.input_dim]));
    let w = random(rng, &[4, p.config.repr_dim]);
    grad_check_many(
        |g, ids| {
            let (params, x) = ids.split_at(ids.len() - 1);
            let bm = p.bind_existing(params)?;
            let z = bm.encode(g, x[0])?;
            weighted_sum(g, z, &w)
        },
        &inputs,
        STEP,
    )
}

/// `l_adv` through the treatment predictor and the encoder.
fn adversary_path(rng: &mut ChaCha8Rng) -> Result<f64> {
    let p = ModelParams::init(&small(Method::AcfrNoAttn), rng.random())?;
    let x = random(rng, &[4, p.config.input_dim]);
    let t = Tensor::column(&treatments(rng, 4));
    grad_check_many(
        |g, ids| {
            let bm = p.bind_existing(ids)?;
            let xn = g.leaf(x.clone());
            let z = bm.encode(g, xn)?;
            let t_hat = bm.predict_treatment(g, z)?;
            let tn = g.leaf(t.clone());
            g.squared_error(t_hat, tn)
        },
        &all_params(rng, &p),
        STEP,
    )
}

fn treatment_predictor(rng: &mut ChaCha8Rng) -> Result<f64> {
    let p = ModelParams::init(&small(Method::Acfr), rng.random())?;
    let z = random(rng, &[4, p.config.repr_dim]);
    let w = random(rng, &[4, 1]);
    grad_check_many(
        |g, ids| {
            let bm = p.bind_existing(ids)?;
            let zn = g.leaf(z.clone());
            let t_hat = bm.predict_treatment(g, zn)?;
            weighted_sum(g, t_hat, &w)
        },
        &all_params(rng, &p),
        STEP,
    )
}

fn pred_loss_path(rng: &mut ChaCha8Rng) -> Result<f64> {
    let y = random(rng, &[6, 1]);
    let y_hat = random(rng, &[6, 1]);
    grad_check_many(|g, ids| g.squared_error(ids[0], ids[1]), &[y_hat, y], STEP)
}

const MODEL_PATHS: [(&str, Case); 7] = [
    ("encoder", encoder_path),
    ("treatment-predictor", treatment_predictor),
    ("attention-head", |r| outcome_path(r, Method::Acfr, true)),
    ("no-attention-head", |r| outcome_path(r, Method::AcfrNoAttn, true)),
    ("mlp-baseline", |r| outcome_path(r, Method::Mlp, false)),
    ("acfr-end-to-end", |r| outcome_path(r, Method::Acfr, false)),
    ("pred-loss", pred_loss_path),
];

const LOSS_PATHS: [(&str, Case); 1] = [("adv-loss", adversary_path)];

/// Runs every component once per seed and keeps the worst error.
pub fn run(seeds: &[u64]) -> Result<Vec<ComponentResult>> {
    let cases = PRIMITIVES
        .iter()
        .map(|(n, c)| (format!("primitive:{n}"), *c))
        .chain(MODEL_PATHS.iter().chain(&LOSS_PATHS).map(|(n, c)| ((*n).to_string(), *c)));
    let mut out = Vec::new();
    for (name, case) in cases {
        let mut worst = 0.0_f64;
        for &seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            worst = worst.max(case(&mut rng)?);
        }
        out.push(ComponentResult { name, worst });
    }
    Ok(out)
}

pub fn render(results: &[ComponentResult]) -> String {
    let mut s = String::from("component,worst_relative_error,status\n");
    for r in results {
        s.push_str(&format!(
            "{},{:e},{}\n",
            r.name,
            r.worst,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_component_passes_and_is_deterministic() {
        let a = run(&[0, 1]).unwrap();
        assert!(a.len() >= 6);
        for r in &a {
            assert!(r.passed(), "{}: {}", r.name, r.worst);
        }
        assert_eq!(a, run(&[0, 1]).unwrap());
    }
}
