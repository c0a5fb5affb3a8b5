//! A loaded checkpoint with sketch-level operations. Both the command line
//! and the HTTP service go through this type, which keeps their outputs
//! identical for identical inputs.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::container::MODEL_MAGIC;
use crate::embed::{self, Classification, EmbeddingIndex, RankedResult};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelInput, Sketchformer};
use crate::rdp::simplify_sketch;
use crate::sketch::{to_stroke3, Point, Sketch};
use crate::tokenize::Tokenizer;
use crate::train::{embed_all, Checkpoint};

/// Items encoded per forward pass when embedding many sketches.
pub const EMBED_CHUNK: usize = 32;

#[derive(Debug, Clone)]
pub struct SketchModel {
    checkpoint: Checkpoint,
    digest: String,
}

fn origin(sketch: &Sketch) -> Point {
    to_stroke3(sketch).1
}

impl SketchModel {
    pub fn new(checkpoint: Checkpoint) -> Result<Self> {
        let checkpoint = checkpoint.inference_only();
        let bytes = checkpoint.to_container()?.to_bytes(MODEL_MAGIC);
        let digest = hex::encode(Sha256::digest(&bytes));
        Ok(SketchModel { checkpoint, digest })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(Checkpoint::load(path)?)
    }

    /// SHA-256 of the inference-only checkpoint bytes.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn model(&self) -> &Sketchformer<f32> {
        &self.checkpoint.model
    }

    pub fn config(&self) -> &ModelConfig {
        self.checkpoint.model.config()
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.checkpoint.tokenizer
    }

    pub fn class_names(&self) -> &[String] {
        &self.checkpoint.class_names
    }

    /// Simplifies `sketch` the way the training data was, then tokenizes it.
    pub fn input(&self, sketch: &Sketch) -> Result<ModelInput> {
        sketch.validate()?;
        let simple = simplify_sketch(sketch, self.checkpoint.rdp_epsilon);
        self.tokenizer().encode(&simple, self.config().max_len)
    }

    pub fn embed(&self, sketch: &Sketch) -> Result<Array1<f64>> {
        let (z, _) = self.model().encode(&[self.input(sketch)?])?;
        Ok(z.row(0).mapv(f64::from))
    }

    /// Embeddings of many sketches, one row each.
    pub fn embed_many(&self, sketches: &[Sketch]) -> Result<Array2<f32>> {
        let inputs = sketches
            .iter()
            .map(|s| self.input(s))
            .collect::<Result<Vec<_>>>()?;
        embed_all(self.model(), &inputs, EMBED_CHUNK)
    }

    pub fn classify_embedding(&self, z: ArrayView1<f64>) -> Result<Classification> {
        let z = self.to_model_space(z)?;
        let logits = self.model().classify_embeddings(&z);
        Ok(embed::classify_logits(logits.row(0).mapv(f64::from).view()))
    }

    pub fn classify(&self, sketch: &Sketch) -> Result<Classification> {
        self.classify_embedding(self.embed(sketch)?.view())
    }

    fn to_model_space(&self, z: ArrayView1<f64>) -> Result<Array2<f32>> {
        let d = self.config().d_model;
        if z.len() != d {
            return Err(Error::Shape(format!("embedding has {} dims, model expects {d}", z.len())));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Usage("embedding has non-finite entries".into()));
        }
        Ok(z.mapv(|v| v as f32).insert_axis(Axis(0)))
    }

    /// Greedy decode of `z`; the sketch starts at `origin`.
    pub fn decode_embedding(&self, z: ArrayView1<f64>, origin: Point) -> Result<Sketch> {
        let z = self.to_model_space(z)?;
        let generated = self.model().autoregress(z.row(0), self.config().max_len);
        self.tokenizer().decode_generated(&generated, origin)
    }

    pub fn reconstruct(&self, sketch: &Sketch) -> Result<Sketch> {
        self.decode_embedding(self.embed(sketch)?.view(), origin(sketch))
    }

    /// Decodes slerp frames between the embeddings of `a` and `b`. The start
    /// point moves linearly between the two origins.
    pub fn interpolate(&self, a: &Sketch, b: &Sketch, steps: usize) -> Result<Vec<Sketch>> {
        let grid = embed::interpolation_grid(steps)?;
        let (za, zb) = (self.embed(a)?, self.embed(b)?);
        let (oa, ob) = (origin(a), origin(b));
        grid.into_iter()
            .map(|t| {
                let z = embed::slerp(za.view(), zb.view(), t)?;
                let o = Point::new(oa.x * (1.0 - t) + ob.x * t, oa.y * (1.0 - t) + ob.y * t);
                self.decode_embedding(z.view(), o)
            })
            .collect()
    }

    /// Reconstruction from a noisy embedding; the noise stream is fixed by
    /// `seed`.
    pub fn perturb(&self, sketch: &Sketch, sigma: f64, seed: u64) -> Result<Sketch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = embed::perturb(self.embed(sketch)?.view(), sigma, &mut rng)?;
        self.decode_embedding(z.view(), origin(sketch))
    }

    pub fn retrieve(&self, sketch: &Sketch, index: &EmbeddingIndex, k: usize) -> Result<RankedResult> {
        index.knn(self.embed(sketch)?.view(), k)
    }
}
