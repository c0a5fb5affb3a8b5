use ndarray::{Array2, Axis};
use rand::Rng;

use super::{ParamId, Params, Scalar};

/// 2-D convolution over a single image stored as `(height · width) × channels`.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2dCache<T> {
    cols: Array2<T>,
    height: usize,
    width: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        p: &mut Params<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        // He-uniform suits the ReLU stack
        let limit = (6.0 / fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, out_channels), |_| T::of(rng.random_range(-limit..limit)));
        Conv2d {
            w: p.add(format!("{name}.w"), w),
            b: p.add_zeros(&format!("{name}.b"), 1, out_channels),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        (
            (height + 2 * self.pad - self.kernel) / self.stride + 1,
            (width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col<T: Scalar>(&self, x: &Array2<T>, height: usize, width: usize) -> Array2<T> {
        let (oh, ow) = self.output_size(height, width);
        let (k, c) = (self.kernel, self.in_channels);
        let mut cols = Array2::zeros((oh * ow, k * k * c));
        for oy in 0..oh {
            for ox in 0..ow {
                let mut row = cols.row_mut(oy * ow + ox);
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= width as isize {
                            continue;
                        }
                        let src = x.row(iy as usize * width + ix as usize);
                        let base = (ky * k + kx) * c;
                        for ch in 0..c {
                            row[base + ch] = src[ch];
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &Params<T>,
        x: &Array2<T>,
        height: usize,
        width: usize,
    ) -> (Array2<T>, Conv2dCache<T>) {
        let cols = self.im2col(x, height, width);
        let mut y = cols.dot(p.get(self.w));
        y += p.get(self.b);
        (y, Conv2dCache { cols, height, width })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &Params<T>,
        g: &mut Params<T>,
        cache: &Conv2dCache<T>,
        dy: &Array2<T>,
    ) -> Array2<T> {
        *g.get_mut(self.w) += &cache.cols.t().dot(dy);
        *g.get_mut(self.b) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dcols = dy.dot(&p.get(self.w).t());
        let (height, width) = (cache.height, cache.width);
        let (oh, ow) = self.output_size(height, width);
        let (k, c) = (self.kernel, self.in_channels);
        let mut dx = Array2::zeros((height * width, c));
        for oy in 0..oh {
            for ox in 0..ow {
                let row = dcols.row(oy * ow + ox);
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= width as isize {
                            continue;
                        }
                        let mut dst = dx.row_mut(iy as usize * width + ix as usize);
                        let base = (ky * k + kx) * c;
                        for ch in 0..c {
                            dst[ch] += row[base + ch];
                        }
                    }
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_shape() {
        let mut p = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new(&mut p, "c", 1, 4, 3, 2, 1, &mut rng);
        assert_eq!(conv.output_size(64, 64), (32, 32));
        let x = Array2::from_elem((64 * 64, 1), 0.5);
        let (y, _) = conv.forward(&p, &x, 64, 64);
        assert_eq!(y.dim(), (32 * 32, 4));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut p = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::new(&mut p, "c", 2, 3, 3, 2, 1, &mut rng);
        let x = Array2::from_shape_fn((5 * 5, 2), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.4);
        let weights = Array2::from_shape_fn((9, 3), |(i, j)| ((i + 2 * j) % 5) as f64 - 2.0);
        let loss = |x: &Array2<f64>| {
            let (y, _) = conv.forward(&p, x, 5, 5);
            (&y * &weights).sum()
        };
        let (_, cache) = conv.forward(&p, &x, 5, 5);
        let mut g = p.zeros_like();
        let dx = conv.backward(&p, &mut g, &cache, &weights);
        let h = 1e-6;
        for idx in [(0, 0), (6, 1), (12, 0), (24, 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6, "{idx:?}: {fd} vs {}", dx[idx]);
        }
    }
}
