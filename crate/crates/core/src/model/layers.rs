//! Token-wise building blocks with explicit reverse-mode passes.
//!
//! Feature maps are stored as `(H*W, C)` matrices in row-major pixel order.
//! Every `backward` accumulates parameter gradients into a gradient struct of
//! the same type as the weights and returns the input gradient.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};


/// Truncated normal at two standard deviations.
pub(crate) fn trunc_normal<R: Rng>(rng: &mut R, std: f64, shape: (usize, usize)) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn(shape, || loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    })
}

pub(crate) fn uniform<R: Rng>(rng: &mut R, bound: f64, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(in, out)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

crate::impl_parameters!(Linear { weight, bias });

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: trunc_normal(rng, 0.02, (fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

crate::impl_parameters!(LayerNorm { gamma, beta });

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(c: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(c),
            beta: Array1::zeros(c),
        }
    }

    pub fn zeros(c: usize) -> Self {
        LayerNorm {
            gamma: Array1::zeros(c),
            beta: Array1::zeros(c),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let (n, c) = x.dim();
        let mut xhat = Array2::zeros((n, c));
        let mut inv_std = Array1::zeros(n);
        for (i, row) in x.rows().into_iter().enumerate() {
            let mean = row.sum() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = r;
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row.iter()) {
                *o = (v - mean) * r;
            }
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        let (n, c) = dy.dim();
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let mut dx = Array2::zeros((n, c));
        for i in 0..n {
            let g = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let mean_g = g.sum() / c as f64;
            let mean_gx = g.dot(&xh) / c as f64;
            let r = cache.inv_std[i];
            for ((o, &gv), &xv) in dx.row_mut(i).iter_mut().zip(g.iter()).zip(xh.iter()) {
                *o = r * (gv - mean_g - xv * mean_gx);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

/// GELU, tanh form.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// 3x3 convolution with zero padding of one pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    /// `(9 * in, out)`, row index `tap * in + channel`, tap `(di + 1) * 3 + (dj + 1)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

crate::impl_parameters!(Conv3x3 { weight, bias });

impl Conv3x3 {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Conv3x3 {
            weight: Array2::zeros((9 * c_in, c_out)),
            bias: Array1::zeros(c_out),
        }
    }

    /// Uniform in `+-1/sqrt(fan_in)` for weights and bias.
    pub fn init<R: Rng>(rng: &mut R, c_in: usize, c_out: usize) -> Self {
        let bound = 1.0 / ((9 * c_in) as f64).sqrt();
        Conv3x3 {
            weight: uniform(rng, bound, (9 * c_in, c_out)),
            bias: uniform(rng, bound, (1, c_out)).into_shape_with_order(c_out).unwrap(),
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.nrows() / 9
    }

    pub fn forward(&self, x: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
        im2col(x, h, w).dot(&self.weight) + &self.bias
    }

    pub fn backward(&self, x: &Array2<f64>, h: usize, w: usize, dy: &Array2<f64>, grad: &mut Conv3x3) -> Array2<f64> {
        let cols = im2col(x, h, w);
        grad.weight += &cols.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        col2im(&dy.dot(&self.weight.t()), h, w, self.c_in())
    }
}

fn im2col(x: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let c = x.ncols();
    let mut cols = Array2::zeros((h * w, 9 * c));
    for i in 0..h {
        for j in 0..w {
            let mut row = cols.row_mut(i * w + j);
            for tap in 0..9 {
                let (ii, jj) = (i as isize + tap as isize / 3 - 1, j as isize + tap as isize % 3 - 1);
                if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                    continue;
                }
                let src = x.row(ii as usize * w + jj as usize);
                row.slice_mut(s![tap * c..(tap + 1) * c]).assign(&src);
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, h: usize, w: usize, c: usize) -> Array2<f64> {
    let mut x = Array2::zeros((h * w, c));
    for i in 0..h {
        for j in 0..w {
            let row = cols.row(i * w + j);
            for tap in 0..9 {
                let (ii, jj) = (i as isize + tap as isize / 3 - 1, j as isize + tap as isize % 3 - 1);
                if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                    continue;
                }
                let mut dst = x.row_mut(ii as usize * w + jj as usize);
                dst += &row.slice(s![tap * c..(tap + 1) * c]);
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv3x3::init(&mut rng, 2, 3);
        let (h, w) = (5, 4);
        let x = uniform(&mut rng, 1.0, (h * w, 2));
        let y = conv.forward(&x, h, w);
        for i in 0..h {
            for j in 0..w {
                for o in 0..3 {
                    let mut acc = conv.bias[o];
                    for di in -1i32..=1 {
                        for dj in -1i32..=1 {
                            let (ii, jj) = (i as i32 + di, j as i32 + dj);
                            if ii < 0 || jj < 0 || ii >= h as i32 || jj >= w as i32 {
                                continue;
                            }
                            let tap = ((di + 1) * 3 + dj + 1) as usize;
                            for c in 0..2 {
                                acc += conv.weight[[tap * 2 + c, o]] * x[[ii as usize * w + jj as usize, c]];
                            }
                        }
                    }
                    assert!((acc - y[[i * w + j, o]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_is_zero_mean_unit_var() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = uniform(&mut rng, 3.0, (6, 8));
        let (y, _) = LayerNorm::new(8).forward(&x);
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-10);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 8.0;
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
