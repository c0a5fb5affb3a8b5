use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::{ParamId, Params, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    None,
    Padding,
    Causal,
}

/// Which keys each query may attend to, per batch item.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionMask {
    None,
    /// `valid[b][j]` is false for padded key positions of item `b`.
    Padding(Vec<Vec<bool>>),
    /// Query `i` sees keys `0..=i`.
    Causal,
}

impl AttentionMask {
    pub fn kind(&self) -> MaskKind {
        match self {
            AttentionMask::None => MaskKind::None,
            AttentionMask::Padding(_) => MaskKind::Padding,
            AttentionMask::Causal => MaskKind::Causal,
        }
    }

    #[inline]
    pub fn allows(&self, batch: usize, query: usize, key: usize) -> bool {
        match self {
            AttentionMask::None => true,
            AttentionMask::Padding(valid) => valid[batch][key],
            AttentionMask::Causal => key <= query,
        }
    }

    /// Boolean keep-matrix for one batch item.
    pub fn keep_matrix(&self, batch: usize, queries: usize, keys: usize) -> Array2<bool> {
        Array2::from_shape_fn((queries, keys), |(i, j)| self.allows(batch, i, j))
    }
}

/// Row-wise softmax over allowed entries; disallowed entries get weight 0 and
/// a row with no allowed entry becomes all zeros.
pub fn masked_softmax_rows<T: Scalar>(scores: &mut Array2<T>, allowed: impl Fn(usize, usize) -> bool) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if allowed(i, j) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            row.fill(T::zero());
            continue;
        }
        let mut total = T::zero();
        for (j, v) in row.iter_mut().enumerate() {
            *v = if allowed(i, j) { (*v - max).exp() } else { T::zero() };
            total += *v;
        }
        row.mapv_inplace(|v| v / total);
    }
}

/// Single-head attention `softmax(α q kᵀ) v` for one batch item.
/// Returns the output and the attention weights.
pub fn sha<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    alpha: T,
    allowed: impl Fn(usize, usize) -> bool,
) -> (Array2<T>, Array2<T>) {
    let mut probs = q.dot(&k.t());
    probs.mapv_inplace(|x| x * alpha);
    masked_softmax_rows(&mut probs, allowed);
    let out = probs.dot(&v);
    (out, probs)
}

/// Gradients of [`sha`] with respect to `q`, `k` and `v`.
pub fn sha_backward<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    probs: &Array2<T>,
    alpha: T,
    dout: ArrayView2<T>,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let dv = probs.t().dot(&dout);
    let dp = dout.dot(&v.t());
    let mut ds = &dp * probs;
    let row_dot = ds.sum_axis(Axis(1));
    Zip::from(ds.rows_mut())
        .and(probs.rows())
        .and(&row_dot)
        .for_each(|mut d, p, &r| {
            Zip::from(&mut d).and(&p).for_each(|x, &pv| *x -= pv * r);
        });
    ds.mapv_inplace(|x| x * alpha);
    let dq = ds.dot(&k);
    let dk = ds.t().dot(&q);
    (dq, dk, dv)
}

/// `[SHA_0(q Wq_0, k Wk_0, v Wv_0), …] Wo` with heads as column blocks of
/// `d_model × d_model` projections.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub n_heads: usize,
    pub d_model: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    q_in: Array2<T>,
    kv_in: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// Attention weights, indexed `batch * n_heads + head`.
    pub probs: Vec<Array2<T>>,
    concat: Array2<T>,
    batch: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        p: &mut Params<T>,
        name: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(d_model % n_heads == 0, "d_model must be divisible by n_heads");
        MultiHeadAttention {
            wq: p.add_xavier(&format!("{name}.wq"), d_model, d_model, rng),
            wk: p.add_xavier(&format!("{name}.wk"), d_model, d_model, rng),
            wv: p.add_xavier(&format!("{name}.wv"), d_model, d_model, rng),
            wo: p.add_xavier(&format!("{name}.wo"), d_model, d_model, rng),
            n_heads,
            d_model,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn alpha<T: Scalar>(&self) -> T {
        T::of(1.0 / (self.head_dim() as f64).sqrt())
    }

    /// `q_in` is `(batch · Lq) × d`, `kv_in` is `(batch · Lk) × d`.
    pub fn forward<T: Scalar>(
        &self,
        p: &Params<T>,
        q_in: &Array2<T>,
        kv_in: &Array2<T>,
        batch: usize,
        mask: &AttentionMask,
    ) -> (Array2<T>, AttentionCache<T>) {
        let q = q_in.dot(p.get(self.wq));
        let k = kv_in.dot(p.get(self.wk));
        let v = kv_in.dot(p.get(self.wv));
        let (lq, lk) = (q.nrows() / batch, k.nrows() / batch);
        let dk = self.head_dim();
        let alpha = self.alpha::<T>();
        let mut concat = Array2::zeros(q.raw_dim());
        let mut probs = Vec::with_capacity(batch * self.n_heads);
        for b in 0..batch {
            for h in 0..self.n_heads {
                let cols = h * dk..(h + 1) * dk;
                let qs = q.slice(s![b * lq..(b + 1) * lq, cols.clone()]);
                let ks = k.slice(s![b * lk..(b + 1) * lk, cols.clone()]);
                let vs = v.slice(s![b * lk..(b + 1) * lk, cols.clone()]);
                let (out, pr) = sha(qs, ks, vs, alpha, |i, j| mask.allows(b, i, j));
                concat.slice_mut(s![b * lq..(b + 1) * lq, cols]).assign(&out);
                probs.push(pr);
            }
        }
        let y = concat.dot(p.get(self.wo));
        (
            y,
            AttentionCache {
                q_in: q_in.clone(),
                kv_in: kv_in.clone(),
                q,
                k,
                v,
                probs,
                concat,
                batch,
            },
        )
    }

    /// Returns `(∂L/∂q_in, ∂L/∂kv_in)`.
    pub fn backward<T: Scalar>(
        &self,
        p: &Params<T>,
        g: &mut Params<T>,
        cache: &AttentionCache<T>,
        dy: &Array2<T>,
    ) -> (Array2<T>, Array2<T>) {
        *g.get_mut(self.wo) += &cache.concat.t().dot(dy);
        let dconcat = dy.dot(&p.get(self.wo).t());
        let batch = cache.batch;
        let (lq, lk) = (cache.q.nrows() / batch, cache.k.nrows() / batch);
        let dk = self.head_dim();
        let alpha = self.alpha::<T>();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dkm = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for b in 0..batch {
            for h in 0..self.n_heads {
                let cols = h * dk..(h + 1) * dk;
                let qr = s![b * lq..(b + 1) * lq, cols.clone()];
                let kr = s![b * lk..(b + 1) * lk, cols.clone()];
                let (gq, gk, gv) = sha_backward(
                    cache.q.slice(qr),
                    cache.k.slice(kr),
                    cache.v.slice(kr),
                    &cache.probs[b * self.n_heads + h],
                    alpha,
                    dconcat.slice(qr),
                );
                dq.slice_mut(qr).assign(&gq);
                dkm.slice_mut(kr).assign(&gk);
                dv.slice_mut(kr).assign(&gv);
            }
        }
        *g.get_mut(self.wq) += &cache.q_in.t().dot(&dq);
        *g.get_mut(self.wk) += &cache.kv_in.t().dot(&dkm);
        *g.get_mut(self.wv) += &cache.kv_in.t().dot(&dv);
        let dq_in = dq.dot(&p.get(self.wq).t());
        let dkv_in = dkm.dot(&p.get(self.wk).t()) + dv.dot(&p.get(self.wv).t());
        (dq_in, dkv_in)
    }
}
