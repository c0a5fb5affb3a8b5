use std::path::Path;

use ndarray::Array2;

use super::{Adam, TrainConfig};
use crate::container::{Container, MODEL_MAGIC};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Sketchformer};
use crate::tokenize::Tokenizer;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub optimizer: Adam<f32>,
}

/// A trained model with everything needed to use or resume it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Sketchformer<f32>,
    pub tokenizer: Tokenizer,
    pub class_names: Vec<String>,
    /// RDP tolerance the training sketches were simplified with; inference
    /// applies the same simplification.
    pub rdp_epsilon: f64,
    pub training: Option<TrainingState>,
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.set("format", "sketchformer-model")?;
        c.set_section("model", self.model.config().to_kv())?;
        c.set_section("tokenizer", self.tokenizer.to_kv())?;
        c.set("classes.count", self.class_names.len())?;
        c.set("preprocess.rdp_epsilon", self.rdp_epsilon)?;
        for (i, name) in self.class_names.iter().enumerate() {
            c.set(format!("classes.{i}"), name)?;
        }
        c.push_params("param", self.model.params())?;
        if let Tokenizer::Dict { codebook } = &self.tokenizer {
            let flat: Vec<f32> = codebook.centroids.iter().flatten().copied().collect();
            let t = Array2::from_shape_vec((codebook.k(), 2), flat).expect("k × 2");
            c.push_tensor("tokenizer.centroids", t)?;
        }
        if let Some(state) = &self.training {
            c.set_section("train", state.config.to_kv())?;
            c.set("optimizer.step", state.optimizer.step)?;
            c.push_params("adam_m", &state.optimizer.m)?;
            c.push_params("adam_v", &state.optimizer.v)?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config = ModelConfig::from_kv(&c.section("model"))?;
        let centroids = c
            .tensor("tokenizer.centroids")
            .map(|t| t.rows().into_iter().map(|r| [r[0], r[1]]).collect());
        let tokenizer = Tokenizer::from_kv(&c.section("tokenizer"), centroids)?;
        if tokenizer.input_mode() != config.mode {
            return Err(Error::Format("tokenizer does not match the model mode".into()));
        }
        let model = Sketchformer::from_params(config, c.params("param"))?;
        let n: usize = c.parse("classes.count")?;
        let class_names = (0..n)
            .map(|i| c.get(&format!("classes.{i}")).map(str::to_string))
            .collect::<Result<Vec<_>>>()?;
        let rdp_epsilon: f64 = c.parse("preprocess.rdp_epsilon")?;
        if !(rdp_epsilon >= 0.0 && rdp_epsilon.is_finite()) {
            return Err(Error::Format(format!("bad rdp_epsilon {rdp_epsilon}")));
        }
        let training = match c.get_opt("optimizer.step") {
            None => None,
            Some(_) => {
                let shape_check = |p: &crate::nn::Params<f32>| -> Result<()> {
                    let ok = p.len() == model.params().len()
                        && p.iter()
                            .zip(model.params().iter())
                            .all(|((a, x), (b, y))| a == b && x.dim() == y.dim());
                    if ok {
                        Ok(())
                    } else {
                        Err(Error::Format("optimizer moments do not mirror the parameters".into()))
                    }
                };
                let m = c.params("adam_m");
                let v = c.params("adam_v");
                shape_check(&m)?;
                shape_check(&v)?;
                Some(TrainingState {
                    config: TrainConfig::from_kv(&c.section("train"))?,
                    optimizer: Adam {
                        m,
                        v,
                        step: c.parse("optimizer.step")?,
                    },
                })
            }
        };
        Ok(Checkpoint {
            model,
            tokenizer,
            class_names,
            rdp_epsilon,
            training,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path, MODEL_MAGIC)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path, MODEL_MAGIC)?)
    }

    /// Same checkpoint without optimizer state.
    pub fn inference_only(mut self) -> Self {
        self.training = None;
        self
    }
}
