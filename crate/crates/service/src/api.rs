//! Response bodies for every endpoint.
//!
//! The command line renders its outputs through these same builders, so a
//! CLI run and an HTTP request over the same checkpoint agree bit for bit.

use serde::Serialize;
use serde_json::Value;
use sketchformer::embed::{Classification, EmbeddingIndex, Metric, RankedResult};
use sketchformer::pipeline::SketchModel;
use sketchformer::sketch::Sketch;
use sketchformer::Result;

/// Upper bound on interpolation frames per request.
pub const MAX_INTERPOLATION_STEPS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingBody {
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrokesBody {
    pub strokes: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FramesBody {
    pub frames: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassifyBody {
    pub class: usize,
    /// Category name, when the checkpoint carries one for `class`.
    pub label: Option<String>,
    pub probabilities: Vec<f64>,
}

impl ClassifyBody {
    pub fn new(c: Classification, class_names: &[String]) -> Self {
        ClassifyBody {
            class: c.class,
            label: class_names.get(c.class).cloned(),
            probabilities: c.probabilities,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrieveBody {
    pub results: RankedResult,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HealthBody {
    pub status: &'static str,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexInfo {
    pub items: usize,
    pub dim: usize,
    pub metric: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigBody {
    pub digest: String,
    pub tokenizer: &'static str,
    pub embedding_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub class_names: Vec<String>,
    pub max_points: usize,
    pub default_interpolation_steps: usize,
    pub max_interpolation_steps: usize,
    pub index: Option<IndexInfo>,
}

impl ConfigBody {
    pub fn new(model: &SketchModel, index: Option<&EmbeddingIndex>, max_points: usize) -> Self {
        let c = model.config();
        ConfigBody {
            digest: model.digest().to_string(),
            tokenizer: model.tokenizer().name(),
            embedding_dim: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            max_len: c.max_len,
            class_names: model.class_names().to_vec(),
            max_points,
            default_interpolation_steps: sketchformer::embed::DEFAULT_INTERPOLATION_STEPS,
            max_interpolation_steps: MAX_INTERPOLATION_STEPS,
            index: index.map(|i| IndexInfo {
                items: i.len(),
                dim: i.dim(),
                metric: i.metric(),
            }),
        }
    }
}

pub fn encode(model: &SketchModel, sketch: &Sketch) -> Result<EmbeddingBody> {
    Ok(EmbeddingBody {
        embedding: model.embed(sketch)?.to_vec(),
    })
}

pub fn reconstruct(model: &SketchModel, sketch: &Sketch) -> Result<StrokesBody> {
    Ok(StrokesBody {
        strokes: model.reconstruct(sketch)?.to_stroke_list(),
    })
}

pub fn interpolate(model: &SketchModel, a: &Sketch, b: &Sketch, steps: usize) -> Result<FramesBody> {
    let frames = model.interpolate(a, b, steps)?;
    Ok(FramesBody {
        frames: frames.iter().map(Sketch::to_stroke_list).collect(),
    })
}

pub fn classify(model: &SketchModel, sketch: &Sketch) -> Result<ClassifyBody> {
    Ok(ClassifyBody::new(model.classify(sketch)?, model.class_names()))
}

pub fn retrieve(model: &SketchModel, index: &EmbeddingIndex, sketch: &Sketch, k: usize) -> Result<RetrieveBody> {
    Ok(RetrieveBody {
        results: model.retrieve(sketch, index, k)?,
    })
}

pub fn perturb(model: &SketchModel, sketch: &Sketch, sigma: f64, seed: u64) -> Result<StrokesBody> {
    Ok(StrokesBody {
        strokes: model.perturb(sketch, sigma, seed)?.to_stroke_list(),
    })
}
