//! Losses, optimization, batching and checkpoints for the autoencoder plus
//! classifier objective.

mod checkpoint;
mod config;
mod loss;
mod optim;

pub use checkpoint::{Checkpoint, TrainingState};
pub use config::{parse_kv, ModelShape, RunConfig, TrainConfig};
pub use loss::{class_loss, recon_loss_continuous, recon_loss_tokens, ContinuousLoss, LossGrad};
pub use optim::{learning_rate, Adam, BETA1, BETA2, EPSILON};

use std::ops::ControlFlow;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::DatasetItem;
use crate::error::{Error, Result};
use crate::model::{ModelInput, OutputGrads, Sketchformer};
use crate::nn::Scalar;
use crate::sketch::{Point, Stroke3Point, Stroke3Seq};
use crate::tokenize::{Tokenizer, PAD};

/// Permutes whole strokes while keeping each stroke where it was on the
/// canvas. The first offset stays relative to the original starting point.
pub fn shuffle_strokes(seq: &Stroke3Seq, rng: &mut impl RngCore) -> Stroke3Seq {
    let mut strokes: Vec<Vec<(f64, f64, bool)>> = Vec::new();
    let (mut x, mut y) = (0.0, 0.0);
    let mut current = Vec::new();
    for p in &seq.points {
        x += p.dx;
        y += p.dy;
        current.push((x, y, p.lift));
        if p.lift {
            strokes.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        strokes.push(current);
    }
    if strokes.len() < 2 {
        return seq.clone();
    }
    strokes.shuffle(rng);
    let (mut px, mut py) = (0.0, 0.0);
    let mut points = Vec::with_capacity(seq.len());
    let last = strokes.len() - 1;
    for (s, stroke) in strokes.iter().enumerate() {
        let n = stroke.len();
        for (i, &(ax, ay, _)) in stroke.iter().enumerate() {
            // the final point keeps its original open/closed status
            let lift = if i + 1 == n { s != last || seq.points.last().is_some_and(|p| p.lift) } else { false };
            points.push(Stroke3Point::new(ax - px, ay - py, lift));
            (px, py) = (ax, ay);
        }
    }
    Stroke3Seq::new(points)
}

/// One labeled training sketch in absolute canvas units.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub seq: Stroke3Seq,
    pub origin: Point,
    pub label: usize,
}

impl TrainItem {
    /// Converts labeled dataset items; unlabeled items are an error.
    pub fn from_dataset<'a>(items: impl IntoIterator<Item = &'a DatasetItem>) -> Result<Vec<TrainItem>> {
        items
            .into_iter()
            .map(|i| {
                let label = i.label.ok_or_else(|| {
                    Error::InsufficientData(format!(
                        "item {} has no label",
                        i.source_id.as_deref().unwrap_or("?")
                    ))
                })?;
                Ok(TrainItem {
                    seq: i.seq.clone(),
                    origin: i.origin,
                    label,
                })
            })
            .collect()
    }
}

/// Training items plus their pre-encoded inputs at the model length.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub items: Vec<TrainItem>,
    inputs: Vec<ModelInput>,
    /// Items dropped because they did not fit in `max_len`.
    pub skipped: usize,
}

impl TrainSet {
    pub fn new(items: Vec<TrainItem>, tokenizer: &Tokenizer, max_len: usize) -> Result<Self> {
        let mut kept = Vec::with_capacity(items.len());
        let mut inputs = Vec::with_capacity(items.len());
        let mut skipped = 0;
        for item in items {
            match tokenizer.encode_seq(&item.seq, item.origin, max_len) {
                Ok(input) => {
                    inputs.push(input);
                    kept.push(item);
                }
                Err(Error::Truncation { .. }) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        if kept.is_empty() {
            return Err(Error::InsufficientData("no training item fits the model length".into()));
        }
        Ok(TrainSet {
            items: kept,
            inputs,
            skipped,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn inputs(&self) -> &[ModelInput] {
        &self.inputs
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }
}

/// Number of leading positions that carry content (through EOS or the
/// terminator row).
pub fn content_length(input: &ModelInput) -> usize {
    match input {
        ModelInput::Tokens(t) => t.iter().rposition(|&x| x != PAD).map_or(0, |i| i + 1),
        ModelInput::Rows(_) => input.valid_mask().iter().filter(|&&v| v).count(),
    }
}

/// Cuts every input to the longest content length in the batch. Only
/// trailing padding is removed, so losses are unchanged.
pub fn trim_batch(inputs: &mut [ModelInput]) {
    let len = inputs.iter().map(content_length).max().unwrap_or(0).max(1);
    for input in inputs {
        match input {
            ModelInput::Tokens(t) => t.truncate(len),
            ModelInput::Rows(r) => r.truncate(len),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub step: u64,
    pub recon_loss: f64,
    pub class_loss: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pen_accuracy: Option<f64>,
    pub class_accuracy: f64,
    pub lr: f64,
}

impl LossReport {
    /// One ndjson log record.
    pub fn to_log_line(&self, wall_time: f64) -> String {
        let mut v = serde_json::to_value(self).expect("plain numbers");
        v["wall_time"] = serde_json::json!(wall_time);
        v.to_string()
    }
}

/// Joint objective `recon + λ · class` and its output gradients.
pub fn batch_loss<T: Scalar>(
    output: &crate::model::ForwardOutput<T>,
    inputs: &[ModelInput],
    labels: &[usize],
    lambda_cls: f64,
) -> Result<(LossReport, OutputGrads<T>)> {
    let targets: Vec<ModelInput> = inputs.iter().map(ModelInput::targets).collect();
    let (recon_loss, recon_grad, token_accuracy, offset_mse, pen_accuracy) = match &targets[0] {
        ModelInput::Tokens(_) => {
            let flat: Vec<u32> = targets
                .iter()
                .flat_map(|t| match t {
                    ModelInput::Tokens(t) => t.clone(),
                    ModelInput::Rows(_) => unreachable!("batch has one kind"),
                })
                .collect();
            let r = recon_loss_tokens(&output.recon, &flat)?;
            (r.loss, r.grad, Some(r.accuracy), None, None)
        }
        ModelInput::Rows(_) => {
            let mut rows = Vec::new();
            let mut valid = Vec::new();
            for t in &targets {
                valid.extend(t.valid_mask());
                match t {
                    ModelInput::Rows(r) => rows.extend_from_slice(r),
                    ModelInput::Tokens(_) => unreachable!("batch has one kind"),
                }
            }
            let r = recon_loss_continuous(&output.recon, &rows, &valid)?;
            (r.loss, r.grad, None, Some(r.offset_mse), Some(r.pen_accuracy))
        }
    };
    let c = class_loss(&output.class_logits, labels)?;
    let class_grad = c.grad.mapv(|g| g * T::of(lambda_cls));
    let report = LossReport {
        step: 0,
        recon_loss,
        class_loss: c.loss,
        total: recon_loss + lambda_cls * c.loss,
        token_accuracy,
        offset_mse,
        pen_accuracy,
        class_accuracy: c.accuracy,
        lr: 0.0,
    };
    let grads = OutputGrads {
        recon: Some(recon_grad),
        class_logits: Some(class_grad),
        z: None,
    };
    Ok((report, grads))
}

pub struct Trainer {
    pub model: Sketchformer<f32>,
    pub optimizer: Adam<f32>,
    pub config: TrainConfig,
    pub tokenizer: Tokenizer,
    /// Recorded in checkpoints; set it to the dataset's tolerance.
    pub rdp_epsilon: f64,
}

const SHUFFLE_STREAM_BASE: u64 = 1 << 62;

impl Trainer {
    pub fn new(model: Sketchformer<f32>, tokenizer: Tokenizer, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.config().mode != tokenizer.input_mode() {
            return Err(Error::Config(format!(
                "model mode {:?} does not match the {} tokenizer",
                model.config().mode,
                tokenizer.name()
            )));
        }
        Ok(Trainer {
            optimizer: Adam::new(model.params()),
            model,
            config,
            tokenizer,
            rdp_epsilon: crate::dataset::DEFAULT_RDP_EPSILON,
        })
    }

    /// RNG for step `step` (1-based); independent of how training got there.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step);
        rng
    }

    /// Item indices for step `step`: consecutive slices of per-epoch
    /// permutations.
    pub fn batch_indices(&self, n: usize, step: u64) -> Vec<usize> {
        let bs = self.config.batch_size;
        let start = (step - 1) as usize * bs;
        let mut out = Vec::with_capacity(bs);
        let mut epoch = usize::MAX;
        let mut order: Vec<usize> = Vec::new();
        for pos in start..start + bs {
            let e = pos / n;
            if e != epoch {
                epoch = e;
                order = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                rng.set_stream(SHUFFLE_STREAM_BASE + e as u64);
                order.shuffle(&mut rng);
            }
            out.push(order[pos % n]);
        }
        out
    }

    /// One optimizer update on the next batch from `data`.
    pub fn train_step(&mut self, data: &TrainSet) -> Result<LossReport> {
        let step = self.optimizer.step + 1;
        let idx = self.batch_indices(data.len(), step);
        let mut rng = self.step_rng(step);
        let mut inputs = Vec::with_capacity(idx.len());
        for &i in &idx {
            if self.config.shuffle_strokes {
                let item = &data.items[i];
                let seq = shuffle_strokes(&item.seq, &mut rng);
                inputs.push(self.tokenizer.encode_seq(&seq, item.origin, self.model.config().max_len)?);
            } else {
                inputs.push(data.inputs[i].clone());
            }
        }
        trim_batch(&mut inputs);
        let labels: Vec<usize> = idx.iter().map(|&i| data.items[i].label).collect();
        self.update(&inputs, &labels, &mut rng, &idx)
    }

    /// Forward, backward and one Adam update on an explicit batch.
    pub fn update(
        &mut self,
        inputs: &[ModelInput],
        labels: &[usize],
        rng: &mut ChaCha8Rng,
        batch_ids: &[usize],
    ) -> Result<LossReport> {
        let step = self.optimizer.step + 1;
        let (output, trace) = self.model.forward(inputs, Some(rng as &mut dyn RngCore))?;
        let (mut report, grads) = batch_loss(&output, inputs, labels, self.config.lambda_cls)?;
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                batch_ids: batch_ids.to_vec(),
            });
        }
        let g = self.model.backward(&trace, &grads)?;
        let lr = learning_rate(self.config.base_lr, self.config.warmup, step);
        self.optimizer.update(self.model.params_mut(), &g, lr);
        report.step = step;
        report.lr = lr;
        Ok(report)
    }

    /// Runs up to `steps` updates, handing each report to `on_step`, which
    /// may stop training early.
    pub fn fit(
        &mut self,
        data: &TrainSet,
        steps: u64,
        mut on_step: impl FnMut(&Trainer, &LossReport) -> ControlFlow<()>,
    ) -> Result<Vec<LossReport>> {
        let mut reports = Vec::new();
        for _ in 0..steps {
            let r = self.train_step(data)?;
            let flow = on_step(self, &r);
            reports.push(r);
            if flow.is_break() {
                break;
            }
        }
        Ok(reports)
    }

    /// Loss without dropout or updates, over `inputs` in chunks.
    pub fn evaluate(&self, inputs: &[ModelInput], labels: &[usize], chunk: usize) -> Result<LossReport> {
        evaluate(&self.model, inputs, labels, self.config.lambda_cls, chunk)
    }

    pub fn checkpoint(&self, class_names: &[String]) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            tokenizer: self.tokenizer.clone(),
            class_names: class_names.to_vec(),
            rdp_epsilon: self.rdp_epsilon,
            training: Some(TrainingState {
                config: self.config,
                optimizer: self.optimizer.clone(),
            }),
        }
    }

    /// Resumes from a checkpoint that carries optimizer state.
    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        let state = ckpt
            .training
            .ok_or_else(|| Error::Format("checkpoint has no training state".into()))?;
        Ok(Trainer {
            model: ckpt.model,
            optimizer: state.optimizer,
            config: state.config,
            tokenizer: ckpt.tokenizer,
            rdp_epsilon: ckpt.rdp_epsilon,
        })
    }
}

/// Size-weighted average of per-chunk losses without dropout.
pub fn evaluate(
    model: &Sketchformer<f32>,
    inputs: &[ModelInput],
    labels: &[usize],
    lambda_cls: f64,
    chunk: usize,
) -> Result<LossReport> {
    let mut acc: Option<(LossReport, f64)> = None;
    for (ins, labs) in inputs.chunks(chunk.max(1)).zip(labels.chunks(chunk.max(1))) {
        let mut batch = ins.to_vec();
        trim_batch(&mut batch);
        let (out, _) = model.forward(&batch, None)?;
        let (r, _) = batch_loss(&out, &batch, labs, lambda_cls)?;
        let w = ins.len() as f64;
        acc = Some(match acc {
            None => (scale_report(&r, w), w),
            Some((sum, n)) => (add_reports(&sum, &scale_report(&r, w)), n + w),
        });
    }
    let (sum, n) = acc.ok_or_else(|| Error::InsufficientData("nothing to evaluate".into()))?;
    Ok(scale_report(&sum, 1.0 / n))
}

fn scale_report(r: &LossReport, w: f64) -> LossReport {
    LossReport {
        recon_loss: r.recon_loss * w,
        class_loss: r.class_loss * w,
        total: r.total * w,
        token_accuracy: r.token_accuracy.map(|v| v * w),
        offset_mse: r.offset_mse.map(|v| v * w),
        pen_accuracy: r.pen_accuracy.map(|v| v * w),
        class_accuracy: r.class_accuracy * w,
        ..r.clone()
    }
}

fn add_reports(a: &LossReport, b: &LossReport) -> LossReport {
    let add = |x: Option<f64>, y: Option<f64>| x.zip(y).map(|(x, y)| x + y);
    LossReport {
        recon_loss: a.recon_loss + b.recon_loss,
        class_loss: a.class_loss + b.class_loss,
        total: a.total + b.total,
        token_accuracy: add(a.token_accuracy, b.token_accuracy),
        offset_mse: add(a.offset_mse, b.offset_mse),
        pen_accuracy: add(a.pen_accuracy, b.pen_accuracy),
        class_accuracy: a.class_accuracy + b.class_accuracy,
        ..a.clone()
    }
}

/// Embeddings `n × d` for many inputs, in chunks.
pub fn embed_all(model: &Sketchformer<f32>, inputs: &[ModelInput], chunk: usize) -> Result<Array2<f32>> {
    let d = model.config().d_model;
    let mut out = Array2::zeros((inputs.len(), d));
    for (c, ins) in inputs.chunks(chunk.max(1)).enumerate() {
        let mut batch = ins.to_vec();
        trim_batch(&mut batch);
        let (z, _) = model.encode(&batch)?;
        let start = c * chunk.max(1);
        out.slice_mut(ndarray::s![start..start + ins.len(), ..]).assign(&z);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketch::to_stroke3;
    use crate::sketch::Sketch;

    fn two_strokes() -> Sketch {
        Sketch::new(vec![
            vec![Point::new(0.0, 0.0), Point::new(4.0, 0.0)],
            vec![Point::new(10.0, 10.0), Point::new(10.0, 15.0), Point::new(12.0, 15.0)],
        ])
        .unwrap()
    }

    #[test]
    fn shuffle_keeps_stroke_geometry() {
        let (seq, origin) = to_stroke3(&two_strokes());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut saw_swap = false;
        for _ in 0..20 {
            let out = shuffle_strokes(&seq, &mut rng);
            let sk = crate::sketch::from_stroke3(&out, origin).unwrap();
            let mut a = sk.strokes.clone();
            let mut b = two_strokes().strokes;
            saw_swap |= a[0] != b[0];
            a.sort_by(|x, y| x[0].x.total_cmp(&y[0].x));
            b.sort_by(|x, y| x[0].x.total_cmp(&y[0].x));
            assert_eq!(a, b);
        }
        assert!(saw_swap);
    }

    #[test]
    fn single_stroke_is_unchanged() {
        let sk = Sketch::new(vec![vec![Point::new(1.0, 2.0), Point::new(3.0, 5.0)]]).unwrap();
        let (seq, _) = to_stroke3(&sk);
        assert_eq!(shuffle_strokes(&seq, &mut ChaCha8Rng::seed_from_u64(1)), seq);
    }

    #[test]
    fn trimming_drops_only_padding() {
        let mut batch = vec![
            ModelInput::Tokens(vec![1, 5, 2, 0, 0, 0]),
            ModelInput::Tokens(vec![1, 5, 6, 2, 0, 0]),
        ];
        trim_batch(&mut batch);
        assert_eq!(batch[0], ModelInput::Tokens(vec![1, 5, 2, 0]));
        assert_eq!(batch[1].len(), 4);
    }
}
