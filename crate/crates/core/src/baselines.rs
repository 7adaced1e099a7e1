//! Classical reconstructions: zero-filling and total-variation compressed
//! sensing solved by proximal gradient descent.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{check_same_shape, Error, Result};
use crate::image::{ImageSlice, KSpaceGrid};
use crate::kspace::{fft2c_real, ifft2c_complex, mask_rows, SampleMask};

pub use crate::kspace::zero_fill_recon as zero_fill;

/// Inner iterations of the dual TV proximal solver per outer step.
pub const TV_PROX_ITERS: usize = 20;
const TV_PROX_TAU: f64 = 0.125;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsTvConfig {
    pub lambda_tv: f64,
    pub max_iters: usize,
    pub step_size: f64,
    /// Stop once the relative objective change of an accepted step drops below this.
    pub tol: f64,
}

impl Default for CsTvConfig {
    fn default() -> Self {
        CsTvConfig {
            lambda_tv: 1e-3,
            max_iters: 200,
            step_size: 1.0,
            tol: 1e-6,
        }
    }
}

impl CsTvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_tv.is_finite() && self.lambda_tv >= 0.0) {
            return Err(Error::Param(format!("lambda_tv must be >= 0, got {}", self.lambda_tv)));
        }
        if self.max_iters < 1 {
            return Err(Error::Param("max_iters must be >= 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return Err(Error::Param(format!("step_size must be in (0, 1], got {}", self.step_size)));
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return Err(Error::Param(format!("tol must be >= 0, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Forward differences with a zero last row/column (Neumann boundary).
fn gradient(x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = x.dim();
    let gv = Array2::from_shape_fn((h, w), |(i, j)| if i + 1 < h { x[[i + 1, j]] - x[[i, j]] } else { 0.0 });
    let gh = Array2::from_shape_fn((h, w), |(i, j)| if j + 1 < w { x[[i, j + 1]] - x[[i, j]] } else { 0.0 });
    (gv, gh)
}

/// Negative adjoint of [`gradient`].
fn divergence(pv: &Array2<f64>, ph: &Array2<f64>) -> Array2<f64> {
    let (h, w) = pv.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let v = if i + 1 < h { pv[[i, j]] } else { 0.0 } - if i > 0 { pv[[i - 1, j]] } else { 0.0 };
        let u = if j + 1 < w { ph[[i, j]] } else { 0.0 } - if j > 0 { ph[[i, j - 1]] } else { 0.0 };
        v + u
    })
}

/// Isotropic total variation with forward differences.
pub fn total_variation(x: &Array2<f64>) -> f64 {
    let (gv, gh) = gradient(x);
    Zip::from(&gv).and(&gh).fold(0.0, |acc, a, b| acc + (a * a + b * b).sqrt())
}

fn data_residual(x: &Array2<f64>, y: &KSpaceGrid, m: &SampleMask) -> Array2<num_complex::Complex64> {
    let mut r = fft2c_real(x);
    mask_rows(&mut r, m, true);
    r - &y.values
}

fn objective(x: &Array2<f64>, y: &KSpaceGrid, m: &SampleMask, lambda_tv: f64) -> f64 {
    let data = data_residual(x, y, m).iter().map(|z| z.norm_sqr()).sum::<f64>();
    0.5 * data + if lambda_tv > 0.0 { lambda_tv * total_variation(x) } else { 0.0 }
}

fn check_inputs(x_shape: &[usize], y: &KSpaceGrid, m: &SampleMask) -> Result<()> {
    check_same_shape("cs-tv", x_shape, y.values.shape())?;
    if m.height() != y.values.nrows() {
        return Err(Error::Shape(format!("mask has {} lines, k-space has {} rows", m.height(), y.values.nrows())));
    }
    Ok(())
}

/// `0.5 * ||m . fft2c(x) - y||^2 + lambda_tv * TV(x)`.
pub fn tv_objective(x: &ImageSlice, y: &KSpaceGrid, m: &SampleMask, lambda_tv: f64) -> Result<f64> {
    check_inputs(x.pixels.shape(), y, m)?;
    Ok(objective(&x.pixels, y, m, lambda_tv))
}

/// Approximate `argmin_u 0.5 ||u - v||^2 + weight * TV(u)` by Chambolle's
/// dual projection, warm-started from and updating `(pv, ph)`.
fn tv_prox(v: &Array2<f64>, weight: f64, pv: &mut Array2<f64>, ph: &mut Array2<f64>) -> Array2<f64> {
    if weight == 0.0 {
        return v.clone();
    }
    for _ in 0..TV_PROX_ITERS {
        let inner = divergence(pv, ph) - v / weight;
        let (gv, gh) = gradient(&inner);
        Zip::from(&mut *pv).and(&mut *ph).and(&gv).and(&gh).for_each(|p, q, &a, &b| {
            let denom = 1.0 + TV_PROX_TAU * (a * a + b * b).sqrt();
            *p = (*p + TV_PROX_TAU * a) / denom;
            *q = (*q + TV_PROX_TAU * b) / denom;
        });
    }
    v - &(divergence(pv, ph) * weight)
}

/// Result of [`cstv_reconstruct_with_history`].
#[derive(Debug, Clone)]
pub struct CsTvOutput {
    pub image: ImageSlice,
    /// Objective at the start and after every outer iteration.
    pub objective: Vec<f64>,
}

/// Proximal gradient on a real image: a gradient step on the data term
/// followed by the TV proximal step. The inner prox is inexact, so a step
/// that would raise the objective is rejected and retried from the same
/// point with the warm-started dual, which keeps the objective sequence
/// nonincreasing. The result is the magnitude of the final iterate.
pub fn cstv_reconstruct_with_history(y: &KSpaceGrid, m: &SampleMask, cfg: &CsTvConfig) -> Result<CsTvOutput> {
    cfg.validate()?;
    check_inputs(y.values.shape(), y, m)?;
    let mut x = ifft2c_complex(&y.values).mapv(|z| z.re);
    let mut f = objective(&x, y, m, cfg.lambda_tv);
    let initial = f;
    let mut history = vec![f];
    let (mut pv, mut ph) = (Array2::zeros(x.dim()), Array2::zeros(x.dim()));

    for iter in 1..=cfg.max_iters {
        if f == 0.0 {
            break;
        }
        let grad = ifft2c_complex(&data_residual(&x, y, m)).mapv(|z| z.re);
        let v = &x - &(grad * cfg.step_size);
        let candidate = tv_prox(&v, cfg.step_size * cfg.lambda_tv, &mut pv, &mut ph);
        let f_new = objective(&candidate, y, m, cfg.lambda_tv);
        if !f_new.is_finite() || f_new > 10.0 * initial.max(f64::MIN_POSITIVE) {
            return Err(Error::Numerical {
                iter,
                msg: format!("CS-TV objective diverged to {f_new} from {initial}"),
            });
        }
        if f_new <= f {
            let change = (f - f_new) / f.max(f64::MIN_POSITIVE);
            x = candidate;
            f = f_new;
            history.push(f);
            if change < cfg.tol {
                break;
            }
        } else {
            history.push(f);
        }
    }
    Ok(CsTvOutput {
        image: ImageSlice::new(x.mapv(f64::abs), y.contrast),
        objective: history,
    })
}

/// Total-variation compressed-sensing reconstruction.
pub fn cstv_reconstruct(y: &KSpaceGrid, m: &SampleMask, cfg: &CsTvConfig) -> Result<ImageSlice> {
    cstv_reconstruct_with_history(y, m, cfg).map(|out| out.image)
}
