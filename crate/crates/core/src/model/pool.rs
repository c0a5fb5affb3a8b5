use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ParamId, Params, Scalar};

/// Self-attention pooling `s = softmax(tanh(h Kᵀ + b) v)`, `z = Σ sᵢ hᵢ`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionPool {
    /// `d × d`
    pub key: ParamId,
    /// `1 × d`
    pub bias: ParamId,
    /// `d × 1`
    pub value: ParamId,
}

#[derive(Debug, Clone)]
pub struct PoolCache<T> {
    tanh: Array2<T>,
    /// `batch × len` pooling weights.
    pub weights: Array2<T>,
}

/// Pools a single `len × d` sequence. Returns `(z, s)`.
///
/// Masked steps get weight zero; an input with no valid step is an error.
pub fn attention_pool<T: Scalar>(
    h: ArrayView2<T>,
    key: ArrayView2<T>,
    bias: ArrayView2<T>,
    value: ArrayView2<T>,
    valid: &[bool],
) -> Result<(Array1<T>, Array1<T>)> {
    let mut u = h.dot(&key.t());
    u += &bias;
    let t = u.mapv(T::tanh);
    let e = t.dot(&value).remove_axis(Axis(1));
    let s = masked_softmax(&e, valid)?;
    let z = s.dot(&h);
    Ok((z, s))
}

fn masked_softmax<T: Scalar>(e: &Array1<T>, valid: &[bool]) -> Result<Array1<T>> {
    let max = e
        .iter()
        .zip(valid)
        .filter(|(_, &ok)| ok)
        .map(|(&v, _)| v)
        .fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return Err(Error::Usage("pooling input has no unmasked step".into()));
    }
    let mut s = Array1::zeros(e.len());
    for ((out, &v), &ok) in s.iter_mut().zip(e).zip(valid) {
        if ok {
            *out = (v - max).exp();
        }
    }
    let total = s.sum();
    s.mapv_inplace(|v| v / total);
    Ok(s)
}

impl AttentionPool {
    pub fn new<T: Scalar>(p: &mut Params<T>, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        AttentionPool {
            key: p.add_xavier(&format!("{name}.key"), d, d, rng),
            bias: p.add_zeros(&format!("{name}.bias"), 1, d),
            value: p.add_xavier(&format!("{name}.value"), d, 1, rng),
        }
    }

    /// `h` is `(batch · len) × d`; returns `z` as `batch × d`.
    pub fn forward<T: Scalar>(
        &self,
        p: &Params<T>,
        h: &Array2<T>,
        batch: usize,
        valid: &[Vec<bool>],
    ) -> Result<(Array2<T>, PoolCache<T>)> {
        let len = h.nrows() / batch;
        let mut u = h.dot(&p.get(self.key).t());
        u += p.get(self.bias);
        let tanh = u.mapv(T::tanh);
        let e = tanh.dot(p.get(self.value)).remove_axis(Axis(1));
        let mut weights = Array2::zeros((batch, len));
        for b in 0..batch {
            let eb = e.slice(s![b * len..(b + 1) * len]).to_owned();
            weights.row_mut(b).assign(&masked_softmax(&eb, &valid[b])?);
        }
        let mut z = Array2::zeros((batch, h.ncols()));
        for b in 0..batch {
            let hb = h.slice(s![b * len..(b + 1) * len, ..]);
            z.row_mut(b).assign(&weights.row(b).dot(&hb));
        }
        Ok((z, PoolCache { tanh, weights }))
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &Params<T>,
        g: &mut Params<T>,
        h: &Array2<T>,
        cache: &PoolCache<T>,
        dz: &Array2<T>,
    ) -> Array2<T> {
        let (batch, len) = cache.weights.dim();
        let mut dh = Array2::zeros(h.raw_dim());
        // ∂L/∂e for every row of the flattened batch
        let mut de = Array2::zeros((batch * len, 1));
        for b in 0..batch {
            let rows = b * len..(b + 1) * len;
            let hb = h.slice(s![rows.clone(), ..]);
            let sb = cache.weights.row(b);
            let dzb = dz.row(b);
            let ds = hb.dot(&dzb);
            let mean = sb.dot(&ds);
            for i in 0..len {
                de[[b * len + i, 0]] = sb[i] * (ds[i] - mean);
                dh.row_mut(b * len + i).scaled_add(sb[i], &dzb);
            }
        }
        *g.get_mut(self.value) += &cache.tanh.t().dot(&de);
        let mut du = de.dot(&p.get(self.value).t());
        du.zip_mut_with(&cache.tanh, |d, &t| *d *= T::one() - t * t);
        *g.get_mut(self.key) += &du.t().dot(h);
        *g.get_mut(self.bias) += &du.sum_axis(Axis(0)).insert_axis(Axis(0));
        dh += &du.dot(p.get(self.key));
        dh
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};

    fn weights(d: usize) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let k = Array2::from_shape_fn((d, d), |(i, j)| ((i * 3 + j) % 5) as f64 * 0.2 - 0.4);
        let b = Array2::from_shape_fn((1, d), |(_, j)| j as f64 * 0.1);
        let v = Array2::from_shape_fn((d, 1), |(i, _)| 0.5 - i as f64 * 0.3);
        (k, b, v)
    }

    #[test]
    fn single_step_selects_it() {
        let (k, b, v) = weights(3);
        let h = arr2(&[[0.2, -1.0, 3.0]]);
        let (z, s) = attention_pool(h.view(), k.view(), b.view(), v.view(), &[true]).unwrap();
        assert_eq!(s.to_vec(), vec![1.0]);
        assert_eq!(z, h.row(0));
    }

    #[test]
    fn identical_rows_pool_to_the_row() {
        let (k, b, v) = weights(3);
        let h = Array2::from_shape_fn((5, 3), |(_, j)| j as f64 - 0.5);
        let (z, _) =
            attention_pool(h.view(), k.view(), b.view(), v.view(), &[true; 5]).unwrap();
        for (a, e) in z.iter().zip(h.row(0)) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_steps_get_zero_weight() {
        let (k, b, v) = weights(2);
        let h = arr2(&[[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]]);
        let (_, s) =
            attention_pool(h.view(), k.view(), b.view(), v.view(), &[true, true, false]).unwrap();
        assert_eq!(s[2], 0.0);
        assert!((s.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_is_an_error() {
        let (k, b, v) = weights(2);
        let h = arr2(&[[1.0, 0.0]]);
        assert!(attention_pool(h.view(), k.view(), b.view(), v.view(), &[false]).is_err());
    }
}
