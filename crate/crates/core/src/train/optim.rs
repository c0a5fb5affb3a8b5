use crate::nn::{Params, Scalar};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const EPSILON: f64 = 1e-9;

/// `base · min(step / warmup, √(warmup / step))` for 1-based `step`.
pub fn learning_rate(base: f64, warmup: u64, step: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    base * (s / w).min((w / s).sqrt())
}

/// Adaptive moment estimation state mirroring the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub m: Params<T>,
    pub v: Params<T>,
    /// Updates applied so far.
    pub step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &Params<T>) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut Params<T>, grads: &Params<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let (b1, b2) = (T::of(BETA1), T::of(BETA2));
        let (o1, o2) = (T::of(1.0 - BETA1), T::of(1.0 - BETA2));
        let step_size = T::of(lr / c1);
        let inv_c2 = T::of(1.0 / c2);
        let eps = T::of(EPSILON);
        for id in params.ids().collect::<Vec<_>>() {
            let g = grads.get(id);
            let m = self.m.get_mut(id);
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| *m = b1 * *m + o1 * g);
            let v = self.v.get_mut(id);
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = b2 * *v + o2 * g * g);
            let (m, v) = (self.m.get(id), self.v.get(id));
            ndarray::Zip::from(params.get_mut(id))
                .and(m)
                .and(v)
                .for_each(|p, &m, &v| *p -= step_size * m / ((v * inv_c2).sqrt() + eps));
        }
    }
}
