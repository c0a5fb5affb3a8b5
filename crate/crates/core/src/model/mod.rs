//! The transformer autoencoder: encoder, attention-pooling bottleneck,
//! expansion back to a decoder memory, causal decoder, and output heads.
//!
//! Every forward pass records a [`Trace`]; [`Sketchformer::backward`] turns a
//! trace plus output gradients into exact parameter gradients.

mod config;
mod generate;
mod pool;

pub use config::{ExpandMode, InputMode, ModelConfig};
pub use generate::Generated;
pub use pool::{attention_pool, AttentionPool, PoolCache};

use ndarray::{s, Array2, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    positional_encoding, AttentionCache, AttentionMask, Dropout, Embedding, FeedForward,
    FeedForwardCache, LayerNorm, LayerNormCache, Linear, MultiHeadAttention, Params, Scalar,
};
use crate::sketch::{Pen, Stroke5Row, Stroke5Seq};
use crate::tokenize::{TokenSequence, PAD};

/// One batch item, already padded to the batch length.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelInput {
    Tokens(Vec<u32>),
    Rows(Vec<Stroke5Row>),
}

impl ModelInput {
    pub fn len(&self) -> usize {
        match self {
            ModelInput::Tokens(t) => t.len(),
            ModelInput::Rows(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Encoder padding mask: non-PAD tokens, or rows up to and including the
    /// first terminator.
    pub fn valid_mask(&self) -> Vec<bool> {
        match self {
            ModelInput::Tokens(t) => t.iter().map(|&x| x != PAD).collect(),
            ModelInput::Rows(r) => {
                let n = r.iter().position(|x| x.pen == Pen::End).map_or(r.len(), |i| i + 1);
                (0..r.len()).map(|i| i < n).collect()
            }
        }
    }

    /// Teacher-forcing decoder input. Tokens already start with SOS; rows get
    /// the start row prepended and the last row dropped.
    pub fn decoder_input(&self) -> ModelInput {
        match self {
            ModelInput::Tokens(t) => ModelInput::Tokens(t.clone()),
            ModelInput::Rows(r) => {
                let mut rows = Vec::with_capacity(r.len());
                rows.push(Stroke5Row::START);
                rows.extend_from_slice(&r[..r.len().saturating_sub(1)]);
                ModelInput::Rows(rows)
            }
        }
    }

    /// Reconstruction target aligned with the decoder output positions.
    pub fn targets(&self) -> ModelInput {
        match self {
            ModelInput::Tokens(t) => {
                let mut out = t[1.min(t.len())..].to_vec();
                out.push(PAD);
                ModelInput::Tokens(out)
            }
            ModelInput::Rows(r) => ModelInput::Rows(r.clone()),
        }
    }
}

impl From<&TokenSequence> for ModelInput {
    fn from(t: &TokenSequence) -> Self {
        ModelInput::Tokens(t.tokens.clone())
    }
}

impl From<&Stroke5Seq> for ModelInput {
    fn from(s: &Stroke5Seq) -> Self {
        ModelInput::Rows(s.rows.clone())
    }
}

#[derive(Debug, Clone, Copy)]
enum InputLayer {
    Embedding(Embedding),
    Projection(Linear),
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ffn: FeedForward,
    ln2: LayerNorm,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    ln1: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
    ln3: LayerNorm,
}

#[derive(Debug, Clone)]
struct Layout {
    input: InputLayer,
    encoder: Vec<EncoderLayer>,
    pool: AttentionPool,
    expand: Option<Linear>,
    decoder: Vec<DecoderLayer>,
    recon_head: Linear,
    class_head: Linear,
}

#[derive(Debug, Clone)]
enum Feed<T> {
    Tokens(Vec<u32>),
    Rows(Array2<T>),
}

#[derive(Debug, Clone)]
struct EncoderCache<T> {
    attn: AttentionCache<T>,
    drop1: Option<Array2<T>>,
    ln1: LayerNormCache<T>,
    ffn: FeedForwardCache<T>,
    drop2: Option<Array2<T>>,
    ln2: LayerNormCache<T>,
}

#[derive(Debug, Clone)]
struct DecoderCache<T> {
    self_attn: AttentionCache<T>,
    drop1: Option<Array2<T>>,
    ln1: LayerNormCache<T>,
    cross_attn: AttentionCache<T>,
    drop2: Option<Array2<T>>,
    ln2: LayerNormCache<T>,
    ffn: FeedForwardCache<T>,
    drop3: Option<Array2<T>>,
    ln3: LayerNormCache<T>,
}

/// Everything a backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    batch: usize,
    len: usize,
    enc_feed: Feed<T>,
    enc_drop: Option<Array2<T>>,
    enc: Vec<EncoderCache<T>>,
    h: Array2<T>,
    pool: PoolCache<T>,
    z: Array2<T>,
    dec_feed: Feed<T>,
    dec_drop: Option<Array2<T>>,
    dec: Vec<DecoderCache<T>>,
    dec_out: Array2<T>,
}

impl<T: Scalar> Trace<T> {
    /// Encoder self-attention weights of one layer, indexed `batch * heads + head`.
    pub fn encoder_attention(&self, layer: usize) -> &[Array2<T>] {
        &self.enc[layer].attn.probs
    }

    pub fn decoder_self_attention(&self, layer: usize) -> &[Array2<T>] {
        &self.dec[layer].self_attn.probs
    }

    pub fn decoder_cross_attention(&self, layer: usize) -> &[Array2<T>] {
        &self.dec[layer].cross_attn.probs
    }

    /// Encoder output `(batch · len) × d`.
    pub fn encoder_output(&self) -> &Array2<T> {
        &self.h
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `batch × d` sketch embeddings.
    pub z: Array2<T>,
    /// `batch × len` bottleneck pooling weights.
    pub pool_weights: Array2<T>,
    /// `(batch · len) × out` reconstruction logits (tokens) or
    /// `(δx, δy, pen logits)` rows (continuous).
    pub recon: Array2<T>,
    /// `batch × n_classes`
    pub class_logits: Array2<T>,
}

/// Loss gradients with respect to the forward outputs. Missing entries are
/// treated as zero.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads<T> {
    pub recon: Option<Array2<T>>,
    pub class_logits: Option<Array2<T>>,
    pub z: Option<Array2<T>>,
}

#[derive(Debug, Clone)]
pub struct Sketchformer<T> {
    config: ModelConfig,
    params: Params<T>,
    layout: Layout,
    pe: Array2<T>,
}

impl<T: Scalar> Sketchformer<T> {
    /// Fresh model with Glorot-uniform weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let d = config.d_model;
        let input = match config.mode {
            InputMode::Tokenized { vocab_size } => {
                InputLayer::Embedding(Embedding::new(&mut p, "embed", vocab_size, d, &mut rng))
            }
            InputMode::Continuous => {
                InputLayer::Projection(Linear::new(&mut p, "embed.proj", 5, d, &mut rng))
            }
        };
        let encoder = (0..config.n_layers)
            .map(|i| {
                let n = format!("enc.{i}");
                EncoderLayer {
                    attn: MultiHeadAttention::new(&mut p, &format!("{n}.attn"), d, config.n_heads, &mut rng),
                    ln1: LayerNorm::new(&mut p, &format!("{n}.ln1"), d),
                    ffn: FeedForward::new(&mut p, &format!("{n}.ffn"), d, config.d_ff, &mut rng),
                    ln2: LayerNorm::new(&mut p, &format!("{n}.ln2"), d),
                }
            })
            .collect();
        let pool = AttentionPool::new(&mut p, "bottleneck", d, &mut rng);
        let expand = match config.expand {
            ExpandMode::Affine => Some(Linear::new(&mut p, "expand", d, config.max_len * d, &mut rng)),
            ExpandMode::Tile => None,
        };
        let decoder = (0..config.n_layers)
            .map(|i| {
                let n = format!("dec.{i}");
                DecoderLayer {
                    self_attn: MultiHeadAttention::new(&mut p, &format!("{n}.self_attn"), d, config.n_heads, &mut rng),
                    ln1: LayerNorm::new(&mut p, &format!("{n}.ln1"), d),
                    cross_attn: MultiHeadAttention::new(&mut p, &format!("{n}.cross_attn"), d, config.n_heads, &mut rng),
                    ln2: LayerNorm::new(&mut p, &format!("{n}.ln2"), d),
                    ffn: FeedForward::new(&mut p, &format!("{n}.ffn"), d, config.d_ff, &mut rng),
                    ln3: LayerNorm::new(&mut p, &format!("{n}.ln3"), d),
                }
            })
            .collect();
        let recon_head = Linear::new(&mut p, "head.recon", d, config.output_dim(), &mut rng);
        let class_head = Linear::new(&mut p, "head.class", d, config.n_classes, &mut rng);
        Ok(Sketchformer {
            config,
            params: p,
            layout: Layout {
                input,
                encoder,
                pool,
                expand,
                decoder,
                recon_head,
                class_head,
            },
            pe: positional_encoding(config.max_len, d),
        })
    }

    /// Rebuilds a model around existing tensors. Names and shapes must match
    /// the layout implied by `config` exactly.
    pub fn from_params(config: ModelConfig, params: Params<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                model.params.len(),
                params.len()
            )));
        }
        for (name, tensor) in params.iter() {
            model
                .params
                .replace(name, tensor.clone())
                .map_err(Error::Shape)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Sketchformer<U> {
        Sketchformer {
            config: self.config,
            params: self.params.cast(),
            layout: self.layout.clone(),
            pe: positional_encoding(self.config.max_len, self.config.d_model),
        }
    }

    fn dropout(&self) -> Dropout {
        Dropout {
            rate: self.config.dropout,
        }
    }

    fn check_batch(&self, inputs: &[ModelInput]) -> Result<(usize, usize)> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Shape("empty batch".into()))?;
        let len = first.len();
        if len == 0 {
            return Err(Error::Shape("empty sequence".into()));
        }
        if len > self.config.max_len {
            return Err(Error::Truncation {
                required: len,
                max_len: self.config.max_len,
            });
        }
        if inputs.iter().any(|i| i.len() != len) {
            return Err(Error::Shape("batch items differ in length".into()));
        }
        Ok((inputs.len(), len))
    }

    fn feed(&self, inputs: &[ModelInput]) -> Result<Feed<T>> {
        match self.config.mode {
            InputMode::Tokenized { vocab_size } => {
                let mut tokens = Vec::with_capacity(inputs.len() * inputs[0].len());
                for input in inputs {
                    match input {
                        ModelInput::Tokens(t) => {
                            if let Some(&bad) = t.iter().find(|&&x| x as usize >= vocab_size) {
                                return Err(Error::Shape(format!(
                                    "token {bad} outside vocabulary of {vocab_size}"
                                )));
                            }
                            tokens.extend_from_slice(t);
                        }
                        ModelInput::Rows(_) => {
                            return Err(Error::Shape("tokenized model given stroke-5 rows".into()))
                        }
                    }
                }
                Ok(Feed::Tokens(tokens))
            }
            InputMode::Continuous => {
                let len = inputs[0].len();
                let mut rows = Array2::zeros((inputs.len() * len, 5));
                for (b, input) in inputs.iter().enumerate() {
                    match input {
                        ModelInput::Rows(r) => {
                            for (i, row) in r.iter().enumerate() {
                                for (j, v) in row.to_array().into_iter().enumerate() {
                                    rows[[b * len + i, j]] = T::of(v);
                                }
                            }
                        }
                        ModelInput::Tokens(_) => {
                            return Err(Error::Shape("continuous model given tokens".into()))
                        }
                    }
                }
                Ok(Feed::Rows(rows))
            }
        }
    }

    fn add_pe(&self, x: &mut Array2<T>, batch: usize, len: usize) {
        let pe = self.pe.slice(s![..len, ..]);
        for b in 0..batch {
            let mut block = x.slice_mut(s![b * len..(b + 1) * len, ..]);
            block += &pe;
        }
    }

    fn embed(
        &self,
        feed: &Feed<T>,
        batch: usize,
        len: usize,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> (Array2<T>, Option<Array2<T>>) {
        let p = &self.params;
        let mut x = match (feed, self.layout.input) {
            (Feed::Tokens(t), InputLayer::Embedding(e)) => {
                let scale = T::of((self.config.d_model as f64).sqrt());
                e.forward(p, t) * scale
            }
            (Feed::Rows(r), InputLayer::Projection(l)) => l.forward(p, r),
            _ => unreachable!("feed built from the model mode"),
        };
        self.add_pe(&mut x, batch, len);
        self.dropout().forward(x, rng.as_deref_mut())
    }

    fn embed_backward(
        &self,
        g: &mut Params<T>,
        feed: &Feed<T>,
        mask: &Option<Array2<T>>,
        dx: Array2<T>,
    ) {
        let dx = Dropout::backward(mask, dx);
        match (feed, self.layout.input) {
            (Feed::Tokens(t), InputLayer::Embedding(e)) => {
                let scale = T::of((self.config.d_model as f64).sqrt());
                e.backward(g, t, &(dx * scale));
            }
            (Feed::Rows(r), InputLayer::Projection(l)) => {
                l.backward(&self.params, g, r, &dx);
            }
            _ => unreachable!("feed built from the model mode"),
        }
    }

    fn encoder_layer(
        &self,
        layer: &EncoderLayer,
        x: &Array2<T>,
        batch: usize,
        mask: &AttentionMask,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> (Array2<T>, EncoderCache<T>) {
        let p = &self.params;
        let drop = self.dropout();
        let (m, attn) = layer.attn.forward(p, x, x, batch, mask);
        let (m, drop1) = drop.forward(m, rng.as_deref_mut());
        let (a, ln1) = layer.ln1.forward(p, &(x + &m));
        let (f, ffn) = layer.ffn.forward(p, &a);
        let (f, drop2) = drop.forward(f, rng.as_deref_mut());
        let (y, ln2) = layer.ln2.forward(p, &(&a + &f));
        (
            y,
            EncoderCache {
                attn,
                drop1,
                ln1,
                ffn,
                drop2,
                ln2,
            },
        )
    }

    fn encoder_layer_backward(
        &self,
        layer: &EncoderLayer,
        c: &EncoderCache<T>,
        g: &mut Params<T>,
        dy: &Array2<T>,
    ) -> Array2<T> {
        let p = &self.params;
        let ds2 = layer.ln2.backward(p, g, &c.ln2, dy);
        let df = Dropout::backward(&c.drop2, ds2.clone());
        let da = layer.ffn.backward(p, g, &c.ffn, &df) + &ds2;
        let ds1 = layer.ln1.backward(p, g, &c.ln1, &da);
        let dm = Dropout::backward(&c.drop1, ds1.clone());
        let (dq, dkv) = layer.attn.backward(p, g, &c.attn, &dm);
        ds1 + dq + dkv
    }

    fn decoder_layer(
        &self,
        layer: &DecoderLayer,
        x: &Array2<T>,
        memory: &Array2<T>,
        batch: usize,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> (Array2<T>, DecoderCache<T>) {
        let p = &self.params;
        let drop = self.dropout();
        let (m1, self_attn) = layer.self_attn.forward(p, x, x, batch, &AttentionMask::Causal);
        let (m1, drop1) = drop.forward(m1, rng.as_deref_mut());
        let (a, ln1) = layer.ln1.forward(p, &(x + &m1));
        let (m2, cross_attn) = layer.cross_attn.forward(p, &a, memory, batch, &AttentionMask::None);
        let (m2, drop2) = drop.forward(m2, rng.as_deref_mut());
        let (c, ln2) = layer.ln2.forward(p, &(&a + &m2));
        let (f, ffn) = layer.ffn.forward(p, &c);
        let (f, drop3) = drop.forward(f, rng.as_deref_mut());
        let (y, ln3) = layer.ln3.forward(p, &(&c + &f));
        (
            y,
            DecoderCache {
                self_attn,
                drop1,
                ln1,
                cross_attn,
                drop2,
                ln2,
                ffn,
                drop3,
                ln3,
            },
        )
    }

    /// Returns `∂L/∂x` and accumulates `∂L/∂memory` into `dmemory`.
    fn decoder_layer_backward(
        &self,
        layer: &DecoderLayer,
        c: &DecoderCache<T>,
        g: &mut Params<T>,
        dy: &Array2<T>,
        dmemory: &mut Array2<T>,
    ) -> Array2<T> {
        let p = &self.params;
        let ds3 = layer.ln3.backward(p, g, &c.ln3, dy);
        let df = Dropout::backward(&c.drop3, ds3.clone());
        let dc = layer.ffn.backward(p, g, &c.ffn, &df) + &ds3;
        let ds2 = layer.ln2.backward(p, g, &c.ln2, &dc);
        let dm2 = Dropout::backward(&c.drop2, ds2.clone());
        let (dq2, dkv2) = layer.cross_attn.backward(p, g, &c.cross_attn, &dm2);
        *dmemory += &dkv2;
        let da = ds2 + dq2;
        let ds1 = layer.ln1.backward(p, g, &c.ln1, &da);
        let dm1 = Dropout::backward(&c.drop1, ds1.clone());
        let (dq1, dkv1) = layer.self_attn.backward(p, g, &c.self_attn, &dm1);
        ds1 + dq1 + dkv1
    }

    /// Decoder memory `(batch · max_len) × d` from `batch × d` embeddings,
    /// positional encoding included.
    pub fn expand(&self, z: &Array2<T>) -> Array2<T> {
        let (batch, d) = z.dim();
        let lm = self.config.max_len;
        let mut memory = match self.layout.expand {
            Some(lin) => lin
                .forward(&self.params, z)
                .into_shape_with_order((batch * lm, d))
                .expect("standard layout"),
            None => {
                let mut m = Array2::zeros((batch * lm, d));
                for b in 0..batch {
                    m.slice_mut(s![b * lm..(b + 1) * lm, ..]).assign(&z.row(b));
                }
                m
            }
        };
        self.add_pe(&mut memory, batch, lm);
        memory
    }

    fn expand_backward(&self, g: &mut Params<T>, z: &Array2<T>, dmemory: Array2<T>) -> Array2<T> {
        let (batch, d) = z.dim();
        let lm = self.config.max_len;
        match self.layout.expand {
            Some(lin) => {
                let dflat = dmemory
                    .into_shape_with_order((batch, lm * d))
                    .expect("standard layout");
                lin.backward(&self.params, g, z, &dflat)
            }
            None => {
                let mut dz = Array2::zeros((batch, d));
                for b in 0..batch {
                    dz.row_mut(b)
                        .assign(&dmemory.slice(s![b * lm..(b + 1) * lm, ..]).sum_axis(Axis(0)));
                }
                dz
            }
        }
    }

    fn run_encoder(
        &self,
        inputs: &[ModelInput],
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<EncoderRun<T>> {
        let (batch, len) = self.check_batch(inputs)?;
        let valid: Vec<Vec<bool>> = inputs.iter().map(ModelInput::valid_mask).collect();
        let feed = self.feed(inputs)?;
        let (mut h, drop) = self.embed(&feed, batch, len, rng);
        let mask = AttentionMask::Padding(valid.clone());
        let mut caches = Vec::with_capacity(self.layout.encoder.len());
        for layer in &self.layout.encoder {
            let (y, c) = self.encoder_layer(layer, &h, batch, &mask, rng);
            caches.push(c);
            h = y;
        }
        let (z, pool) = self.layout.pool.forward(&self.params, &h, batch, &valid)?;
        Ok(EncoderRun {
            batch,
            len,
            feed,
            drop,
            caches,
            h,
            pool,
            z,
        })
    }

    fn run_decoder(
        &self,
        memory: &Array2<T>,
        inputs: &[ModelInput],
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<DecoderRun<T>> {
        let (batch, len) = self.check_batch(inputs)?;
        if memory.dim() != (batch * self.config.max_len, self.config.d_model) {
            return Err(Error::Shape(format!(
                "decoder memory has shape {:?}, expected ({}, {})",
                memory.dim(),
                batch * self.config.max_len,
                self.config.d_model
            )));
        }
        let feed = self.feed(inputs)?;
        let (mut x, drop) = self.embed(&feed, batch, len, rng);
        let mut caches = Vec::with_capacity(self.layout.decoder.len());
        for layer in &self.layout.decoder {
            let (y, c) = self.decoder_layer(layer, &x, memory, batch, rng);
            caches.push(c);
            x = y;
        }
        Ok(DecoderRun {
            feed,
            drop,
            caches,
            out: x,
        })
    }

    /// Embeddings and pooling weights without dropout.
    pub fn encode(&self, inputs: &[ModelInput]) -> Result<(Array2<T>, Array2<T>)> {
        let run = self.run_encoder(inputs, &mut None)?;
        Ok((run.z, run.pool.weights))
    }

    /// Per-position encoder output `(batch · len) × d` without dropout.
    pub fn encoder_states(&self, inputs: &[ModelInput]) -> Result<Array2<T>> {
        Ok(self.run_encoder(inputs, &mut None)?.h)
    }

    /// Runs the decoder on explicit decoder inputs (already shifted) against a
    /// memory from [`Sketchformer::expand`]; returns output-head rows.
    pub fn decode(&self, memory: &Array2<T>, inputs: &[ModelInput]) -> Result<Array2<T>> {
        let run = self.run_decoder(memory, inputs, &mut None)?;
        Ok(self.layout.recon_head.forward(&self.params, &run.out))
    }

    /// Class logits `batch × n_classes` for embeddings `batch × d`.
    pub fn classify_embeddings(&self, z: &Array2<T>) -> Array2<T> {
        self.layout.class_head.forward(&self.params, z)
    }

    /// Full teacher-forced pass. Pass an RNG to enable dropout.
    pub fn forward(
        &self,
        inputs: &[ModelInput],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(ForwardOutput<T>, Trace<T>)> {
        let mut rng = rng;
        let enc = self.run_encoder(inputs, &mut rng)?;
        let class_logits = self.layout.class_head.forward(&self.params, &enc.z);
        let memory = self.expand(&enc.z);
        let dec_inputs: Vec<ModelInput> = inputs.iter().map(ModelInput::decoder_input).collect();
        let dec = self.run_decoder(&memory, &dec_inputs, &mut rng)?;
        let recon = self.layout.recon_head.forward(&self.params, &dec.out);
        let output = ForwardOutput {
            z: enc.z.clone(),
            pool_weights: enc.pool.weights.clone(),
            recon,
            class_logits,
        };
        let trace = Trace {
            batch: enc.batch,
            len: enc.len,
            enc_feed: enc.feed,
            enc_drop: enc.drop,
            enc: enc.caches,
            h: enc.h,
            pool: enc.pool,
            z: enc.z,
            dec_feed: dec.feed,
            dec_drop: dec.drop,
            dec: dec.caches,
            dec_out: dec.out,
        };
        Ok((output, trace))
    }

    /// Parameter gradients for the pass recorded in `trace`.
    pub fn backward(&self, trace: &Trace<T>, grads: &OutputGrads<T>) -> Result<Params<T>> {
        let (batch, len) = (trace.batch, trace.len);
        let d = self.config.d_model;
        let check = |name: &str, a: &Option<Array2<T>>, shape: (usize, usize)| match a {
            Some(a) if a.dim() != shape => Err(Error::Shape(format!(
                "{name} gradient has shape {:?}, expected {shape:?}",
                a.dim()
            ))),
            _ => Ok(()),
        };
        check("recon", &grads.recon, (batch * len, self.config.output_dim()))?;
        check("class", &grads.class_logits, (batch, self.config.n_classes))?;
        check("z", &grads.z, (batch, d))?;

        let p = &self.params;
        let mut g = p.zeros_like();
        let mut dx = match &grads.recon {
            Some(dr) => self.layout.recon_head.backward(p, &mut g, &trace.dec_out, dr),
            None => Array2::zeros((batch * len, d)),
        };
        let mut dmemory = Array2::zeros((batch * self.config.max_len, d));
        for (layer, cache) in self.layout.decoder.iter().zip(&trace.dec).rev() {
            dx = self.decoder_layer_backward(layer, cache, &mut g, &dx, &mut dmemory);
        }
        self.embed_backward(&mut g, &trace.dec_feed, &trace.dec_drop, dx);

        let mut dz = self.expand_backward(&mut g, &trace.z, dmemory);
        if let Some(dc) = &grads.class_logits {
            dz += &self.layout.class_head.backward(p, &mut g, &trace.z, dc);
        }
        if let Some(ext) = &grads.z {
            dz += ext;
        }
        let mut dh = self.layout.pool.backward(p, &mut g, &trace.h, &trace.pool, &dz);
        for (layer, cache) in self.layout.encoder.iter().zip(&trace.enc).rev() {
            dh = self.encoder_layer_backward(layer, cache, &mut g, &dh);
        }
        self.embed_backward(&mut g, &trace.enc_feed, &trace.enc_drop, dh);
        Ok(g)
    }

    /// A forward/backward pairing that rejects backward without a forward.
    pub fn session(&self) -> Session<'_, T> {
        Session {
            model: self,
            trace: None,
        }
    }
}

struct EncoderRun<T> {
    batch: usize,
    len: usize,
    feed: Feed<T>,
    drop: Option<Array2<T>>,
    caches: Vec<EncoderCache<T>>,
    h: Array2<T>,
    pool: PoolCache<T>,
    z: Array2<T>,
}

struct DecoderRun<T> {
    feed: Feed<T>,
    drop: Option<Array2<T>>,
    caches: Vec<DecoderCache<T>>,
    out: Array2<T>,
}

/// Holds at most one recorded forward pass; each backward consumes it.
pub struct Session<'m, T> {
    model: &'m Sketchformer<T>,
    trace: Option<Trace<T>>,
}

impl<T: Scalar> Session<'_, T> {
    pub fn forward(
        &mut self,
        inputs: &[ModelInput],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardOutput<T>> {
        let (out, trace) = self.model.forward(inputs, rng)?;
        self.trace = Some(trace);
        Ok(out)
    }

    pub fn backward(&mut self, grads: &OutputGrads<T>) -> Result<Params<T>> {
        let trace = self
            .trace
            .take()
            .ok_or_else(|| Error::Usage("backward called without a recorded forward".into()))?;
        self.model.backward(&trace, grads)
    }
}
