use super::TrainConfig;
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::spline::SplineConfig;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: &str = "acfr-ckpt-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedWeight {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-major values.
    pub data: Vec<f64>,
}

/// Position of the minibatch sampler.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// 128-bit word position, as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::parse("checkpoint rng word_pos", e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: String,
    pub model: ModelConfig,
    pub spline: SplineConfig,
    pub train: Option<TrainConfig>,
    /// Completed outer iterations.
    pub iteration: usize,
    pub rng: Option<RngState>,
    pub weights: Vec<NamedWeight>,
}

impl Checkpoint {
    pub fn from_params(
        params: &ModelParams,
        train: Option<&TrainConfig>,
        iteration: usize,
        rng: Option<RngState>,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION.to_string(),
            model: params.config.clone(),
            spline: params.config.spline.clone(),
            train: train.cloned(),
            iteration,
            rng,
            weights: params
                .named_tensors()
                .into_iter()
                .map(|(name, t)| NamedWeight {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the parameters, checking every weight against the shapes the
    /// embedded config implies.
    pub fn params(&self) -> Result<ModelParams> {
        if self.spline != self.model.spline {
            return Err(Error::Config("checkpoint spline section disagrees with model.spline".into()));
        }
        let mut params = ModelParams::init(&self.model, 0)?;
        let expected: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        let found: Vec<&str> = self.weights.iter().map(|w| w.name.as_str()).collect();
        if expected != found {
            return Err(Error::invalid(
                "checkpoint",
                format!("weights {found:?} do not match the model layout {expected:?}"),
            ));
        }
        for w in &self.weights {
            let t = Tensor::new(w.shape.clone(), w.data.clone())?;
            params.set_tensor(&w.name, t)?;
        }
        Ok(params)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self).map_err(|e| Error::parse("checkpoint", e))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::parse("checkpoint", e))?;
        let found = value
            .get("version")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::parse("checkpoint", "missing version field"))?;
        if found != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION.to_string(),
                found: found.to_string(),
            });
        }
        serde_json::from_value(value).map_err(|e| Error::parse("checkpoint", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub fn save_checkpoint(params: &ModelParams, train: Option<&TrainConfig>, path: &Path) -> Result<()> {
    Checkpoint::from_params(params, train, 0, None).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
