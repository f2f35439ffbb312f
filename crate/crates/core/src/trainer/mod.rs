//! Alternating adversarial training.
//!
//! Each outer iteration samples a minibatch, freezes its representation and
//! takes `M` steps on the treatment predictor `pi` against it, then updates
//! the outcome head on the factual loss and the encoder on
//! `l_pred - gamma * l_adv`.

mod adversary;
mod checkpoint;
mod history;
mod optim;

pub use adversary::{adv_loss, fit_adversary_to_convergence, pred_loss, Adversary, AdversaryConfig, AdversaryFit};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedWeight, RngState, CHECKPOINT_VERSION};
pub use history::TrainHistory;
pub use optim::{GroupOptimizer, Optimizer};

use crate::datagen::Dataset;
use crate::diffmath::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{Group, ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Outer iterations `T`.
    pub iterations: usize,
    pub batch_size: usize,
    /// Adversary steps per outer iteration `M`.
    pub inner_steps: usize,
    /// Trade-off `gamma`.
    pub gamma: f64,
    /// `eta_1`, for the encoder and outcome head.
    pub lr_pred: f64,
    /// `eta_2`, for the treatment predictor.
    pub lr_adv: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Validation loss is recorded every this many iterations.
    pub checkpoint_interval: usize,
    /// Turns the adversarial branch off entirely.
    pub adversary: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 64,
            inner_steps: 10,
            gamma: 1.0,
            lr_pred: 1e-4,
            lr_adv: 1e-4,
            seed: 0,
            optimizer: Optimizer::Sgd,
            checkpoint_interval: 100,
            adversary: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("train.iterations must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("train.gamma must be finite and >= 0, got {}", self.gamma)));
        }
        for (name, v) in [("lr_pred", self.lr_pred), ("lr_adv", self.lr_adv)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be positive, got {v}")));
            }
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("train.checkpoint_interval must be positive".into()));
        }
        Ok(())
    }

    /// Number of validation evaluations in a full run.
    pub fn eval_points(&self) -> usize {
        self.iterations.div_ceil(self.checkpoint_interval)
    }
}

/// Gradients of one parameter group, in [`ModelParams::group_mut`] order.
pub type GroupGrads = Vec<Tensor>;

/// Losses and per-group gradients of one batch.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub l_pred: f64,
    /// Zero for models without a treatment predictor.
    pub l_adv: f64,
    pub pred: [GroupGrads; 3],
    pub adv: [GroupGrads; 3],
}

const GROUPS: [Group; 3] = [Group::Encoder, Group::Treatment, Group::Head];

fn slot(group: Group) -> usize {
    match group {
        Group::Encoder => 0,
        Group::Treatment => 1,
        Group::Head => 2,
    }
}

impl StepGradients {
    pub fn pred_wrt(&self, group: Group) -> &GroupGrads {
        &self.pred[slot(group)]
    }

    pub fn adv_wrt(&self, group: Group) -> &GroupGrads {
        &self.adv[slot(group)]
    }
}

/// Builds one graph with both losses and differentiates each separately.
pub fn step_gradients(params: &ModelParams, x: &Tensor, t: &[f64], y: &[f64]) -> Result<StepGradients> {
    let mut g = Graph::new();
    let bm = params.bind(&mut g);
    let xn = g.leaf(x.clone());
    let z = bm.encode(&mut g, xn)?;
    let y_hat = bm.predict_outcome(&mut g, z, t)?;
    let yn = g.leaf(Tensor::column(y));
    let l_pred = g.squared_error(y_hat, yn)?;
    let has_adversary = !params.treatment.layers.is_empty();
    let l_adv = if has_adversary {
        let t_hat = bm.predict_treatment(&mut g, z)?;
        let tn = g.leaf(Tensor::column(t));
        Some(g.squared_error(t_hat, tn)?)
    } else {
        None
    };

    let gp = g.backward(l_pred)?;
    let pred = GROUPS.map(|grp| bm.group_ids(grp).into_iter().map(|id| gp.wrt(id)).collect());
    let adv = match l_adv {
        Some(la) => {
            let ga = g.backward(la)?;
            GROUPS.map(|grp| bm.group_ids(grp).into_iter().map(|id| ga.wrt(id)).collect())
        }
        None => GROUPS.map(|grp| params.group(grp).into_iter().map(|t| Tensor::zeros(t.shape())).collect()),
    };
    Ok(StepGradients {
        l_pred: g.value(l_pred).item()?,
        l_adv: match l_adv {
            Some(la) => g.value(la).item()?,
            None => 0.0,
        },
        pred,
        adv,
    })
}

/// Stateful training run over one dataset.
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    cfg: TrainConfig,
    params: ModelParams,
    rng: ChaCha8Rng,
    opt_encoder: GroupOptimizer,
    opt_treatment: GroupOptimizer,
    opt_head: GroupOptimizer,
    history: TrainHistory,
    iteration: usize,
    start: Instant,
}

impl<'a> Trainer<'a> {
    /// Fresh parameters initialized from `train_cfg.seed`.
    pub fn new(dataset: &'a Dataset, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<Self> {
        let params = ModelParams::init(model_cfg, train_cfg.seed)?;
        Self::with_params(dataset, params, train_cfg)
    }

    pub fn with_params(dataset: &'a Dataset, params: ModelParams, train_cfg: &TrainConfig) -> Result<Self> {
        train_cfg.validate()?;
        params.config.validate()?;
        let train_n = dataset.splits.train.len();
        if train_cfg.batch_size > train_n {
            return Err(Error::Config(format!(
                "train.batch_size ({}) exceeds the training split ({train_n})",
                train_cfg.batch_size
            )));
        }
        if dataset.splits.val.is_empty() {
            return Err(Error::invalid("train", "dataset has an empty validation split"));
        }
        if dataset.x.cols() != params.config.input_dim {
            return Err(Error::Config(format!(
                "dataset has {} covariates but model.input_dim is {}",
                dataset.x.cols(),
                params.config.input_dim
            )));
        }
        Ok(Self {
            dataset,
            cfg: train_cfg.clone(),
            params,
            rng: ChaCha8Rng::seed_from_u64(train_cfg.seed),
            opt_encoder: GroupOptimizer::new(train_cfg.optimizer),
            opt_treatment: GroupOptimizer::new(train_cfg.optimizer),
            opt_head: GroupOptimizer::new(train_cfg.optimizer),
            history: TrainHistory::default(),
            iteration: 0,
            start: Instant::now(),
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.iterations
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(self.cfg.seed, &self.rng)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(&self.params, Some(&self.cfg), self.iteration, Some(self.rng_state()))
    }

    pub fn into_parts(self) -> (ModelParams, TrainHistory) {
        (self.params, self.history)
    }

    fn adversarial(&self) -> bool {
        self.cfg.adversary && !self.params.treatment.layers.is_empty()
    }

    /// `M` steps on `pi` against the frozen representation `z`.
    fn inner_loop(&mut self, z: &Tensor, t: &[f64]) -> Result<()> {
        let target = Tensor::column(t);
        for _ in 0..self.cfg.inner_steps {
            let mut g = Graph::new();
            let bound = self.params.treatment.bind(&mut g);
            let zn = g.leaf(z.clone());
            let logits = bound.forward(&mut g, zn, self.params.config.activation)?;
            let t_hat = g.sigmoid(logits);
            let tn = g.leaf(target.clone());
            let loss = g.squared_error(t_hat, tn)?;
            let l = g.value(loss).item()?;
            if !l.is_finite() {
                return Err(Error::Divergence {
                    iteration: self.iteration,
                    l_pred: f64::NAN,
                    l_adv: l,
                });
            }
            let grads = g.backward(loss)?;
            let gamma = self.cfg.gamma;
            let scaled: Vec<Tensor> = bound.ids().into_iter().map(|id| grads.wrt(id).map(|v| gamma * v)).collect();
            self.opt_treatment
                .step(self.params.group_mut(Group::Treatment), &scaled, self.cfg.lr_adv)?;
        }
        Ok(())
    }

    /// Runs one outer iteration.
    pub fn step(&mut self) -> Result<()> {
        if self.is_done() {
            return Err(Error::invalid("train", "all iterations already ran"));
        }
        let train = &self.dataset.splits.train;
        let idx: Vec<usize> = (0..self.cfg.batch_size)
            .map(|_| train[self.rng.random_range(0..train.len())])
            .collect();
        self.step_batch(&idx)
    }

    /// Runs one outer iteration on the given dataset rows instead of a
    /// sampled minibatch.
    pub fn step_batch(&mut self, idx: &[usize]) -> Result<()> {
        if self.is_done() {
            return Err(Error::invalid("train", "all iterations already ran"));
        }
        let ds = self.dataset;
        if let Some(&bad) = idx.iter().find(|&&i| i >= ds.len()) {
            return Err(Error::invalid("train", format!("row {bad} out of range")));
        }
        if idx.is_empty() {
            return Err(Error::invalid("train", "empty batch"));
        }
        let x = ds.x.select_rows(idx);
        let t: Vec<f64> = idx.iter().map(|&i| ds.t[i]).collect();
        let y: Vec<f64> = idx.iter().map(|&i| ds.y[i]).collect();

        if self.adversarial() {
            let z = self.params.encode(&x)?;
            self.inner_loop(&z, &t)?;
        }

        let sg = step_gradients(&self.params, &x, &t, &y)?;
        if !(sg.l_pred.is_finite() && sg.l_adv.is_finite()) {
            return Err(Error::Divergence {
                iteration: self.iteration,
                l_pred: sg.l_pred,
                l_adv: sg.l_adv,
            });
        }
        let mut enc = sg.pred_wrt(Group::Encoder).clone();
        if self.adversarial() {
            for (e, a) in enc.iter_mut().zip(sg.adv_wrt(Group::Encoder)) {
                e.axpy(-self.cfg.gamma, a)?;
            }
        }
        let lr = self.cfg.lr_pred;
        self.opt_head.step(self.params.group_mut(Group::Head), sg.pred_wrt(Group::Head), lr)?;
        self.opt_encoder.step(self.params.group_mut(Group::Encoder), &enc, lr)?;

        self.history.l_pred.push(sg.l_pred);
        self.history.l_adv.push(sg.l_adv);
        if self.iteration % self.cfg.checkpoint_interval == 0 {
            let v = self.validation_loss()?;
            self.history.validation.push((self.iteration, v));
        }
        self.history.wall_ms.push(self.start.elapsed().as_secs_f64() * 1e3);
        self.iteration += 1;
        Ok(())
    }

    /// Factual loss on the full validation split.
    pub fn validation_loss(&self) -> Result<f64> {
        let ds = self.dataset;
        let val = &ds.splits.val;
        let t: Vec<f64> = val.iter().map(|&i| ds.t[i]).collect();
        let y: Vec<f64> = val.iter().map(|&i| ds.y[i]).collect();
        let pred = self.params.predict(&ds.x.select_rows(val), &t)?;
        pred_loss(&y, &pred)
    }

    /// Runs the remaining iterations.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        if !self.params.is_finite() {
            return Err(Error::Divergence {
                iteration: self.iteration,
                l_pred: f64::NAN,
                l_adv: f64::NAN,
            });
        }
        Ok(())
    }
}

/// Trains from a fresh initialization and returns the final parameters with
/// the loss history.
pub fn train(dataset: &Dataset, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    let mut trainer = Trainer::new(dataset, model_cfg, train_cfg)?;
    trainer.run()?;
    Ok(trainer.into_parts())
}
