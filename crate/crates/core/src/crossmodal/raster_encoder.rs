use ndarray::{Array2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward, Conv2d, Conv2dCache, Linear, Params, Scalar};
use crate::raster::{rasterize, RasterImage};
use crate::sketch::Sketch;
use crate::train::{class_loss, learning_rate, Adam};

pub const RASTER_SIDE: usize = 64;
pub const RASTER_LINE_WIDTH: usize = 2;
const CHANNELS: [usize; 5] = [1, 8, 16, 32, 64];

/// Renders a sketch the way the raster branch expects it.
pub fn raster_input(sketch: &Sketch) -> Result<RasterImage> {
    rasterize(sketch, RASTER_SIDE, RASTER_LINE_WIDTH)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup: u64,
    pub seed: u64,
}

impl Default for RasterTrainConfig {
    fn default() -> Self {
        RasterTrainConfig {
            steps: 300,
            batch_size: 16,
            base_lr: 2e-3,
            warmup: 30,
            seed: 0,
        }
    }
}

/// Small convolutional stand-in for a pretrained image network: four
/// stride-2 convolutions with ReLU, global average pooling, and a linear
/// classifier used only for pretraining.
#[derive(Debug, Clone)]
pub struct RasterEncoder<T = f32> {
    params: Params<T>,
    convs: Vec<Conv2d>,
    classifier: Linear,
    n_classes: usize,
    frozen: bool,
}

struct ImageCache<T> {
    convs: Vec<(Conv2dCache<T>, Array2<T>)>,
    positions: usize,
}

impl<T: Scalar> RasterEncoder<T> {
    pub fn new(n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::Config("raster classifier needs at least 2 classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let convs = CHANNELS
            .windows(2)
            .enumerate()
            .map(|(i, c)| Conv2d::new(&mut params, &format!("conv{i}"), c[0], c[1], 3, 2, 1, &mut rng))
            .collect();
        let classifier = Linear::new(&mut params, "classifier", Self::FEATURE_DIM, n_classes, &mut rng);
        Ok(RasterEncoder {
            params,
            convs,
            classifier,
            n_classes,
            frozen: false,
        })
    }

    pub const FEATURE_DIM: usize = CHANNELS[4];

    /// Rebuilds an encoder around stored parameters.
    pub fn from_params(n_classes: usize, params: Params<T>, frozen: bool) -> Result<Self> {
        let mut enc = Self::new(n_classes, 0)?;
        if params.len() != enc.params.len()
            || params
                .iter()
                .zip(enc.params.iter())
                .any(|((a, x), (b, y))| a != b || x.dim() != y.dim())
        {
            return Err(Error::Format("raster encoder parameters do not match the architecture".into()));
        }
        enc.params = params;
        enc.frozen = frozen;
        Ok(enc)
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn cast<U: Scalar>(&self) -> RasterEncoder<U> {
        RasterEncoder {
            params: self.params.cast(),
            convs: self.convs.clone(),
            classifier: self.classifier,
            n_classes: self.n_classes,
            frozen: self.frozen,
        }
    }

    fn check(img: &RasterImage) -> Result<()> {
        if img.width != RASTER_SIDE || img.height != RASTER_SIDE {
            return Err(Error::Shape(format!(
                "raster encoder takes {RASTER_SIDE}×{RASTER_SIDE} images, got {}×{}",
                img.width, img.height
            )));
        }
        Ok(())
    }

    fn forward_image(&self, img: &RasterImage) -> (Array2<T>, ImageCache<T>) {
        let mut x = Array2::from_shape_fn((img.pixels.len(), 1), |(i, _)| T::of(img.pixels[i] as f64));
        let (mut h, mut w) = (img.height, img.width);
        let mut convs = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (pre, cache) = conv.forward(&self.params, &x, h, w);
            x = relu(&pre);
            convs.push((cache, pre));
            (h, w) = conv.output_size(h, w);
        }
        let positions = h * w;
        let pooled = x.mean_axis(Axis(0)).expect("non-empty map").insert_axis(Axis(0));
        (pooled, ImageCache { convs, positions })
    }

    /// Pooled features, one row per image.
    pub fn features(&self, images: &[RasterImage]) -> Result<Array2<T>> {
        let mut out = Array2::zeros((images.len(), Self::FEATURE_DIM));
        for (i, img) in images.iter().enumerate() {
            Self::check(img)?;
            out.row_mut(i).assign(&self.forward_image(img).0.row(0));
        }
        Ok(out)
    }

    pub fn logits(&self, features: &Array2<T>) -> Array2<T> {
        self.classifier.forward(&self.params, features)
    }

    /// Fraction of `images` whose arg-max class equals the label.
    pub fn accuracy(&self, images: &[RasterImage], labels: &[usize]) -> Result<f64> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::Shape(format!("{} images for {} labels", images.len(), labels.len())));
        }
        let logits = self.logits(&self.features(images)?);
        let hits = logits
            .rows()
            .into_iter()
            .zip(labels)
            .filter(|(row, &l)| {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
                best == l
            })
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Mean classification loss over `images` and its parameter gradient.
    pub fn loss_and_grad(&self, images: &[RasterImage], labels: &[usize]) -> Result<(f64, Params<T>)> {
        let mut pooled = Array2::zeros((images.len(), Self::FEATURE_DIM));
        let mut caches = Vec::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            Self::check(img)?;
            let (f, cache) = self.forward_image(img);
            pooled.row_mut(i).assign(&f.row(0));
            caches.push(cache);
        }
        let logits = self.logits(&pooled);
        let lg = class_loss(&logits, labels)?;
        let mut g = self.params.zeros_like();
        let dpooled = self.classifier.backward(&self.params, &mut g, &pooled, &lg.grad);
        for (i, cache) in caches.iter().enumerate() {
            let scale = T::of(1.0 / cache.positions as f64);
            let row = dpooled.row(i).mapv(|v| v * scale);
            let mut dx = Array2::from_shape_fn((cache.positions, Self::FEATURE_DIM), |(_, c)| row[c]);
            for (conv, (cc, pre)) in self.convs.iter().zip(&cache.convs).rev() {
                let dpre = relu_backward(pre, &dx);
                dx = conv.backward(&self.params, &mut g, cc, &dpre);
            }
        }
        Ok((lg.loss, g))
    }
}

impl RasterEncoder<f32> {
    /// Supervised pretraining on labelled rasters; returns the per-step loss.
    pub fn pretrain(
        &mut self,
        images: &[RasterImage],
        labels: &[usize],
        config: &RasterTrainConfig,
    ) -> Result<Vec<f64>> {
        if self.frozen {
            return Err(Error::Usage("raster encoder is frozen".into()));
        }
        if images.len() != labels.len() || images.len() < config.batch_size || config.batch_size == 0 {
            return Err(Error::InsufficientData(format!(
                "{} images and {} labels for batch size {}",
                images.len(),
                labels.len(),
                config.batch_size
            )));
        }
        let mut opt = Adam::new(&self.params);
        let mut losses = Vec::with_capacity(config.steps as usize);
        for step in 1..=config.steps {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(step);
            let ids: Vec<usize> = sample_indices(&mut rng, images.len(), config.batch_size).into_vec();
            let batch: Vec<RasterImage> = ids.iter().map(|&i| images[i].clone()).collect();
            let batch_labels: Vec<usize> = ids.iter().map(|&i| labels[i]).collect();
            let (loss, g) = self.loss_and_grad(&batch, &batch_labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, batch_ids: ids });
            }
            opt.update(&mut self.params, &g, learning_rate(config.base_lr, config.warmup, step));
            losses.push(loss);
        }
        Ok(losses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_sketch, SynthClass};

    #[test]
    fn rejects_wrong_size() {
        let enc = RasterEncoder::<f32>::new(5, 0).unwrap();
        assert!(enc.features(&[RasterImage::blank(32, 32)]).is_err());
        let img = raster_input(&synth_sketch(SynthClass::Circle, 1)).unwrap();
        assert_eq!(enc.features(&[img]).unwrap().dim(), (1, RasterEncoder::<f32>::FEATURE_DIM));
    }

    #[test]
    fn frozen_encoder_refuses_training() {
        let mut enc = RasterEncoder::<f32>::new(2, 0).unwrap();
        enc.freeze();
        let img = RasterImage::blank(RASTER_SIDE, RASTER_SIDE);
        let cfg = RasterTrainConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(enc.pretrain(&[img], &[0], &cfg).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut enc = RasterEncoder::<f64>::new(3, 4).unwrap();
        // zero biases put blank-region pre-activations exactly on the ReLU kink
        for (name, t) in enc.params.iter_mut() {
            if name.ends_with(".b") {
                t.iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 + 0.01 * (i % 7) as f64);
            }
        }
        let images: Vec<RasterImage> = [SynthClass::Circle, SynthClass::Square]
            .iter()
            .map(|&c| raster_input(&synth_sketch(c, 3)).unwrap())
            .collect();
        let labels = [0, 2];
        let (_, g) = enc.loss_and_grad(&images, &labels).unwrap();
        let h = 1e-5;
        for name in ["conv0.w", "conv2.b", "conv3.w", "classifier.w"] {
            let id = enc.params.id(name).unwrap();
            for idx in [(0, 0), (0, 1)] {
                let mut plus = enc.clone();
                plus.params.get_mut(id)[idx] += h;
                let mut minus = enc.clone();
                minus.params.get_mut(id)[idx] -= h;
                let fd = (plus.loss_and_grad(&images, &labels).unwrap().0
                    - minus.loss_and_grad(&images, &labels).unwrap().0)
                    / (2.0 * h);
                let a = g.get(id)[idx];
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-7);
                assert!(rel < 1e-4, "{name}{idx:?}: {fd} vs {a}");
            }
        }
    }
}
