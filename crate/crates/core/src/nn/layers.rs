use ndarray::{Array2, Axis, Zip};
use rand::Rng;

use super::{ParamId, Params, Scalar};

/// Affine map `y = x W + b` with `W: in × out` and `b: 1 × out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        p: &mut Params<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            w: p.add_xavier(&format!("{name}.w"), d_in, d_out, rng),
            b: p.add_zeros(&format!("{name}.b"), 1, d_out),
        }
    }

    pub fn forward<T: Scalar>(&self, p: &Params<T>, x: &Array2<T>) -> Array2<T> {
        let mut y = x.dot(p.get(self.w));
        y += p.get(self.b);
        y
    }

    /// Accumulates weight gradients into `g` and returns `∂L/∂x`.
    pub fn backward<T: Scalar>(
        &self,
        p: &Params<T>,
        g: &mut Params<T>,
        x: &Array2<T>,
        dy: &Array2<T>,
    ) -> Array2<T> {
        *g.get_mut(self.w) += &x.t().dot(dy);
        *g.get_mut(self.b) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&p.get(self.w).t())
    }

    pub fn out_dim<T: Scalar>(&self, p: &Params<T>) -> usize {
        p.get(self.w).ncols()
    }
}

pub fn relu<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through ReLU given the pre-activation.
pub fn relu_backward<T: Scalar>(pre: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(pre).for_each(|d, &x| {
        if x <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

/// Per-row layer normalization with learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    inv_std: Vec<T>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(p: &mut Params<T>, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: p.add_filled(&format!("{name}.g"), 1, d, T::one()),
            bias: p.add_zeros(&format!("{name}.b"), 1, d),
        }
    }

    pub fn forward<T: Scalar>(&self, p: &Params<T>, x: &Array2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let d = T::of(x.ncols() as f64);
        let eps = T::of(LN_EPS);
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / d;
            let inv = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let mut y = &xhat * p.get(self.gain);
        y += p.get(self.bias);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &Params<T>,
        g: &mut Params<T>,
        cache: &LayerNormCache<T>,
        dy: &Array2<T>,
    ) -> Array2<T> {
        *g.get_mut(self.gain) += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        *g.get_mut(self.bias) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * p.get(self.gain);
        let d = T::of(dy.ncols() as f64);
        let mut dx = dxhat.clone();
        for (((mut out, dh), xh), &inv) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(cache.xhat.rows())
            .zip(&cache.inv_std)
        {
            let mean_dh = dh.sum() / d;
            let mean_dh_xh = dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
            Zip::from(&mut out)
                .and(&dh)
                .and(&xh)
                .for_each(|o, &a, &b| *o = inv * (a - mean_dh - b * mean_dh_xh));
        }
        dx
    }
}

/// Position-wise `max(0, x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache<T> {
    x: Array2<T>,
    pre: Array2<T>,
    hidden: Array2<T>,
}

impl FeedForward {
    pub fn new<T: Scalar>(p: &mut Params<T>, name: &str, d: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            inner: Linear::new(p, &format!("{name}.1"), d, d_ff, rng),
            outer: Linear::new(p, &format!("{name}.2"), d_ff, d, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, p: &Params<T>, x: &Array2<T>) -> (Array2<T>, FeedForwardCache<T>) {
        let pre = self.inner.forward(p, x);
        let hidden = relu(&pre);
        let y = self.outer.forward(p, &hidden);
        (
            y,
            FeedForwardCache {
                x: x.clone(),
                pre,
                hidden,
            },
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &Params<T>,
        g: &mut Params<T>,
        cache: &FeedForwardCache<T>,
        dy: &Array2<T>,
    ) -> Array2<T> {
        let dh = self.outer.backward(p, g, &cache.hidden, dy);
        let dpre = relu_backward(&cache.pre, &dh);
        self.inner.backward(p, g, &cache.x, &dpre)
    }
}

/// Token lookup table `vocab × d`.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<T: Scalar>(p: &mut Params<T>, name: &str, vocab: usize, d: usize, rng: &mut impl Rng) -> Self {
        Embedding {
            table: p.add_xavier(&format!("{name}.table"), vocab, d, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, p: &Params<T>, tokens: &[u32]) -> Array2<T> {
        let table = p.get(self.table);
        let mut out = Array2::zeros((tokens.len(), table.ncols()));
        for (mut row, &t) in out.rows_mut().into_iter().zip(tokens) {
            row.assign(&table.row(t as usize));
        }
        out
    }

    pub fn backward<T: Scalar>(&self, g: &mut Params<T>, tokens: &[u32], dy: &Array2<T>) {
        let table = g.get_mut(self.table);
        for (row, &t) in dy.rows().into_iter().zip(tokens) {
            let mut dst = table.row_mut(t as usize);
            dst += &row;
        }
    }
}

/// Inverted dropout. A rate of zero or a missing RNG is the identity.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn forward<T: Scalar, R: rand::RngCore + ?Sized>(
        &self,
        x: Array2<T>,
        rng: Option<&mut R>,
    ) -> (Array2<T>, Option<Array2<T>>) {
        match rng {
            Some(rng) if self.rate > 0.0 => {
                let keep = T::of(1.0 / (1.0 - self.rate));
                let mask = Array2::from_shape_fn(x.raw_dim(), |_| {
                    if rng.random::<f64>() < self.rate {
                        T::zero()
                    } else {
                        keep
                    }
                });
                (&x * &mask, Some(mask))
            }
            _ => (x, None),
        }
    }

    pub fn backward<T: Scalar>(mask: &Option<Array2<T>>, dy: Array2<T>) -> Array2<T> {
        match mask {
            Some(m) => dy * m,
            None => dy,
        }
    }
}

/// Fixed sinusoidal position table `len × d`.
pub fn positional_encoding<T: Scalar>(len: usize, d: usize) -> Array2<T> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}
