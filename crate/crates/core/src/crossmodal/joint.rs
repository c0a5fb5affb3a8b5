use std::path::Path;

use ndarray::{concatenate, s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::heads::{Branch, HeadsConfig, JointHeads, JOINT_DIM};
use super::raster_encoder::{raster_input, RasterEncoder};
use super::triplet::{sample_triplets, triplet_batch, Phase, TripletBatch};
use crate::container::Container;
use crate::embed::{mean_average_precision, EmbeddingDump, EmbeddingIndex, Metric, RankedResult};
use crate::error::{Error, Result};
use crate::model::{ModelInput, OutputGrads, Sketchformer};
use crate::nn::Params;
use crate::pipeline::SketchModel;
use crate::sketch::Sketch;
use crate::train::{class_loss, embed_all, learning_rate, trim_batch, Adam};

pub const JOINT_MAGIC: &[u8] = b"SKJM1";

/// Weight of the auxiliary classification loss on joint vectors.
pub const CLASS_REG_WEIGHT: f64 = 0.1;

/// SHA-256 over parameter names, shapes and little-endian values.
pub fn params_digest(p: &Params<f32>) -> String {
    let mut h = Sha256::new();
    for (name, t) in p.iter() {
        h.update(name.as_bytes());
        h.update((t.nrows() as u64).to_le_bytes());
        h.update((t.ncols() as u64).to_le_bytes());
        for v in t.iter() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn labels_of(sketches: &[Sketch]) -> Result<Vec<usize>> {
    sketches
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.label
                .ok_or_else(|| Error::InsufficientData(format!("sketch {i} has no class label")))
        })
        .collect()
}

/// Every instance in both domains: frozen sketch embeddings `E(x)` and
/// frozen raster features `P(raster(x))`.
#[derive(Debug, Clone)]
pub struct JointData {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    /// Model inputs, kept for fine-tuning the sketch encoder.
    pub inputs: Vec<ModelInput>,
    pub vectors: Array2<f32>,
    pub rasters: Array2<f32>,
}

impl JointData {
    /// Precomputes both branches' features; sketches go through the same
    /// preprocessing as at query time.
    pub fn build(
        sketch_model: &SketchModel,
        raster: &RasterEncoder<f32>,
        sketches: &[Sketch],
        ids: Vec<String>,
    ) -> Result<Self> {
        if ids.len() != sketches.len() {
            return Err(Error::Shape(format!("{} ids for {} sketches", ids.len(), sketches.len())));
        }
        let labels = labels_of(sketches)?;
        let inputs = sketches
            .iter()
            .map(|s| sketch_model.input(s))
            .collect::<Result<Vec<_>>>()?;
        let vectors = embed_all(sketch_model.model(), &inputs, crate::pipeline::EMBED_CHUNK)?;
        let images = sketches.iter().map(raster_input).collect::<Result<Vec<_>>>()?;
        let rasters = raster.features(&images)?;
        Ok(JointData {
            ids,
            labels,
            inputs,
            vectors,
            rasters,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn rows(m: &Array2<f32>, idx: &[usize]) -> Array2<f32> {
        m.select(Axis(0), idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointConfig {
    pub phase1_steps: u64,
    pub phase2_steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup: u64,
    pub seed: u64,
    pub hidden: usize,
    pub joint_dim: usize,
    pub class_weight: f64,
    /// Update the sketch encoder too instead of keeping it frozen.
    pub finetune_encoder: bool,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            phase1_steps: 600,
            phase2_steps: 300,
            batch_size: 32,
            base_lr: 1e-3,
            warmup: 50,
            seed: 0,
            hidden: 128,
            joint_dim: JOINT_DIM,
            class_weight: CLASS_REG_WEIGHT,
            finetune_encoder: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointStepReport {
    pub step: u64,
    pub phase: u8,
    pub triplet_loss: f64,
    pub class_loss: f64,
    pub total: f64,
    /// Fraction of the batch with `d(a, p) < d(a, n)`.
    pub satisfied: f64,
}

#[derive(Debug, Clone)]
pub struct JointOutcome {
    pub heads: JointHeads<f32>,
    /// Snapshot taken when phase one finished.
    pub phase1_heads: JointHeads<f32>,
    pub steps: Vec<JointStepReport>,
    pub encoder_digest: (String, String),
    pub raster_digest: (String, String),
}

impl JointOutcome {
    /// Whether both branches came out bit-identical.
    pub fn branches_unchanged(&self) -> bool {
        self.encoder_digest.0 == self.encoder_digest.1 && self.raster_digest.0 == self.raster_digest.1
    }
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Trains the joint heads in two phases over frozen branch features.
///
/// With `finetune_encoder` set, `model` receives gradients through the
/// vector branch and `data.vectors` go stale; rebuild the data before
/// evaluating.
pub fn train_joint(
    data: &JointData,
    model: &mut Sketchformer<f32>,
    raster: &RasterEncoder<f32>,
    config: &JointConfig,
    mut on_step: impl FnMut(&JointStepReport),
) -> Result<JointOutcome> {
    if !raster.is_frozen() {
        return Err(Error::Usage("raster encoder must be frozen before joint training".into()));
    }
    if data.rasters.ncols() != RasterEncoder::<f32>::FEATURE_DIM || data.vectors.ncols() != model.config().d_model {
        return Err(Error::Shape("joint data does not match the branch encoders".into()));
    }
    if config.batch_size == 0 || !(config.class_weight >= 0.0) {
        return Err(Error::Config("joint batch size and class weight must be positive".into()));
    }
    let n_classes = data.labels.iter().max().map_or(0, |&m| m + 1);
    let heads_config = HeadsConfig {
        vector_dim: model.config().d_model,
        raster_dim: RasterEncoder::<f32>::FEATURE_DIM,
        hidden: config.hidden,
        joint_dim: config.joint_dim,
        n_classes,
    };
    let mut heads = JointHeads::<f32>::new(heads_config, config.seed)?;
    let mut opt = Adam::new(heads.params());
    let mut encoder_opt = config.finetune_encoder.then(|| Adam::new(model.params()));
    let before = (params_digest(model.params()), params_digest(raster.params()));

    let mut steps = Vec::new();
    let mut k = 0u64;
    let mut phase1_heads = None;
    for (phase, count) in [(Phase::One, config.phase1_steps), (Phase::Two, config.phase2_steps)] {
        if phase == Phase::Two {
            phase1_heads = Some(heads.clone());
        }
        for _ in 0..count {
            k += 1;
            let mut rng = step_rng(config.seed, k);
            let batch = sample_triplets(&data.labels, phase, config.batch_size, &mut rng)?;
            let report = joint_step(data, model, &mut heads, &mut opt, encoder_opt.as_mut(), &batch, config, k)?;
            on_step(&report);
            steps.push(report);
        }
    }
    let after = (params_digest(model.params()), params_digest(raster.params()));
    Ok(JointOutcome {
        heads,
        phase1_heads: phase1_heads.expect("phase two reached"),
        steps,
        encoder_digest: (before.0, after.0),
        raster_digest: (before.1, after.1),
    })
}

#[allow(clippy::too_many_arguments)]
fn joint_step(
    data: &JointData,
    model: &mut Sketchformer<f32>,
    heads: &mut JointHeads<f32>,
    opt: &mut Adam<f32>,
    encoder_opt: Option<&mut Adam<f32>>,
    batch: &TripletBatch,
    config: &JointConfig,
    step: u64,
) -> Result<JointStepReport> {
    let b = batch.len();
    let (xa, trace) = if encoder_opt.is_some() {
        let mut inputs: Vec<ModelInput> = batch.anchors.iter().map(|&i| data.inputs[i].clone()).collect();
        trim_batch(&mut inputs);
        let (out, trace) = model.forward(&inputs, None)?;
        (out.z, Some(trace))
    } else {
        (JointData::rows(&data.vectors, &batch.anchors), None)
    };
    let (ua, ca) = heads.forward(Branch::Vector, &xa)?;
    let (up, cp) = heads.forward(Branch::Raster, &JointData::rows(&data.rasters, &batch.positives))?;
    let (un, cn) = heads.forward(Branch::Raster, &JointData::rows(&data.rasters, &batch.negatives))?;
    let tg = triplet_batch(&ua, &up, &un, batch.phase.margin())?;

    let all = concatenate(Axis(0), &[ua.view(), up.view(), un.view()]).expect("equal widths");
    let labels: Vec<usize> = [&batch.anchors, &batch.positives, &batch.negatives]
        .iter()
        .flat_map(|ids| ids.iter().map(|&i| data.labels[i]))
        .collect();
    let cl = class_loss(&heads.class_logits(&all), &labels)?;
    let total = tg.loss + config.class_weight * cl.loss;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            batch_ids: batch.anchors.clone(),
        });
    }
    let mut g = heads.params().zeros_like();
    let dall = heads.class_backward(&mut g, &all, &(cl.grad * config.class_weight as f32));
    let da = tg.da + dall.slice(s![..b, ..]);
    let dp = tg.dp + dall.slice(s![b..2 * b, ..]);
    let dn = tg.dn + dall.slice(s![2 * b.., ..]);
    let dxa = heads.backward(&mut g, &ca, &da);
    heads.backward(&mut g, &cp, &dp);
    heads.backward(&mut g, &cn, &dn);
    let lr = learning_rate(config.base_lr, config.warmup, step);
    opt.update(heads.params_mut(), &g, lr);
    if let (Some(eopt), Some(trace)) = (encoder_opt, trace) {
        let ge = model.backward(
            &trace,
            &OutputGrads {
                z: Some(dxa),
                ..Default::default()
            },
        )?;
        eopt.update(model.params_mut(), &ge, lr);
    }
    Ok(JointStepReport {
        step,
        phase: batch.phase.number(),
        triplet_loss: tg.loss,
        class_loss: cl.loss,
        total,
        satisfied: tg.satisfied as f64 / b as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JointMetrics {
    /// Held-out phase-one triplets with `d(a, p) < d(a, n)`.
    pub triplet_satisfaction: f64,
    /// Vector queries against all rasters, relevant when the category matches.
    pub category_map: f64,
    /// Mean 1-based rank of each query's own raster.
    pub mean_instance_rank: f64,
}

pub fn evaluate_joint(
    heads: &JointHeads<f32>,
    data: &JointData,
    n_triplets: usize,
    seed: u64,
) -> Result<JointMetrics> {
    let uv = heads.embed(Branch::Vector, &data.vectors)?;
    let ur = heads.embed(Branch::Raster, &data.rasters)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = sample_triplets(&data.labels, Phase::One, n_triplets, &mut rng)?;
    let tg = triplet_batch(
        &uv.select(Axis(0), &t.anchors),
        &ur.select(Axis(0), &t.positives),
        &ur.select(Axis(0), &t.negatives),
        0.0,
    )?;
    let index = EmbeddingIndex::new(data.ids.clone(), ur, Metric::Cosine)?;
    let mut relevance = Vec::with_capacity(data.len());
    let mut rank_sum = 0.0;
    for (i, q) in uv.rows().into_iter().enumerate() {
        let ranking = index.rank_all(q.mapv(f64::from).view())?;
        relevance.push(
            ranking
                .iter()
                .map(|r| data.labels[r.index] == data.labels[i])
                .collect::<Vec<_>>(),
        );
        let own = ranking.iter().position(|r| r.index == i).expect("own raster indexed");
        rank_sum += (own + 1) as f64;
    }
    Ok(JointMetrics {
        triplet_satisfaction: tg.satisfied as f64 / n_triplets as f64,
        category_map: mean_average_precision(&relevance),
        mean_instance_rank: rank_sum / data.len() as f64,
    })
}

/// Joint heads plus the frozen raster encoder they were trained over.
#[derive(Debug, Clone)]
pub struct JointModel {
    pub heads: JointHeads<f32>,
    pub raster: RasterEncoder<f32>,
    /// Digest of the sketch model whose embeddings feed the vector branch.
    pub sketch_digest: String,
}

impl JointModel {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.set("format", "sketchformer-joint")?;
        c.set("sketch_digest", &self.sketch_digest)?;
        c.set_section("heads", self.heads.config().to_kv())?;
        c.set("raster.n_classes", self.raster.n_classes())?;
        c.set("raster.frozen", self.raster.is_frozen())?;
        c.push_params("heads", self.heads.params())?;
        c.push_params("raster", self.raster.params())?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config = HeadsConfig::from_kv(&c.section("heads"))?;
        Ok(JointModel {
            heads: JointHeads::from_params(config, c.params("heads"))?,
            raster: RasterEncoder::from_params(c.parse("raster.n_classes")?, c.params("raster"), c.parse("raster.frozen")?)?,
            sketch_digest: c.get("sketch_digest")?.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path, JOINT_MAGIC)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path, JOINT_MAGIC)?)
    }

    fn check_pair(&self, sketch_model: &SketchModel) -> Result<()> {
        if sketch_model.digest() != self.sketch_digest {
            return Err(Error::Config(
                "joint heads were trained over a different sketch model".into(),
            ));
        }
        Ok(())
    }

    /// `u_v` for each sketch.
    pub fn embed_sketches(&self, sketch_model: &SketchModel, sketches: &[Sketch]) -> Result<Array2<f32>> {
        self.check_pair(sketch_model)?;
        self.heads.embed(Branch::Vector, &sketch_model.embed_many(sketches)?)
    }

    /// `u_r` for the rasterization of each sketch.
    pub fn embed_rasters(&self, sketches: &[Sketch]) -> Result<Array2<f32>> {
        let images = sketches.iter().map(raster_input).collect::<Result<Vec<_>>>()?;
        self.heads.embed(Branch::Raster, &self.raster.features(&images)?)
    }

    /// Raster index dump over `sketches`.
    pub fn raster_dump(&self, sketches: &[Sketch], ids: Vec<String>) -> Result<EmbeddingDump> {
        let labels = labels_of(sketches)?;
        let mut dump = EmbeddingDump::new(ids, labels, self.embed_rasters(sketches)?)?;
        dump.meta.insert("space".into(), "joint-raster".into());
        dump.meta.insert("sketch_digest".into(), self.sketch_digest.clone());
        Ok(dump)
    }
}

/// Sketch-based retrieval over an index of raster joint vectors.
pub fn sbir_query(
    joint: &JointModel,
    sketch_model: &SketchModel,
    sketch: &Sketch,
    image_index: &EmbeddingIndex,
    k: usize,
) -> Result<RankedResult> {
    let u = joint.embed_sketches(sketch_model, std::slice::from_ref(sketch))?;
    image_index.knn(u.row(0).mapv(f64::from).view(), k)
}
