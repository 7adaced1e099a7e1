//! Image-domain appearance consistency, k-space partition consistency and
//! their combination. Every loss has a `*_grad` twin returning the gradient
//! with respect to its image arguments.

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::TrainMode;
use crate::error::{check_same_shape, Result};
use crate::image::{ImageSlice, KSpaceGrid};
use crate::kspace::{fft2c_real, fft2c_real_backward, SampleMask};

/// Per-bin distance of the k-space consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PdcNorm {
    /// `|r|`, the complex modulus of the residual.
    #[default]
    Modulus,
    /// `|Re r| + |Im r|`, channelwise L1 on real and imaginary parts.
    RealImag,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// intensity L1
    pub lambda1: f64,
    /// gradient L1
    pub lambda2: f64,
    /// k-space term in the dual-domain total
    pub lambda3: f64,
    #[serde(default)]
    pub pdc_norm: PdcNorm,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 0.1,
            lambda3: 0.1,
            pdc_norm: PdcNorm::Modulus,
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `lambda1 * mean|x1 - x2| + lambda2 * (mean|dv| + mean|dh|)` where `dv`,
/// `dh` are forward differences of `x1 - x2` (last row/column excluded).
/// Returns the loss and its gradient with respect to `x1`; the gradient
/// with respect to `x2` is the negation.
pub fn ac_loss_grad(x1: &Array2<f64>, x2: &Array2<f64>, w: &LossWeights) -> (f64, Array2<f64>) {
    let (h, wd) = x1.dim();
    let diff = x1 - x2;
    let mut grad = Array2::zeros((h, wd));

    let n = (h * wd) as f64;
    let mut img = 0.0;
    Zip::from(&mut grad).and(&diff).for_each(|g, &d| {
        img += d.abs();
        *g = w.lambda1 * sign(d) / n;
    });
    img /= n;

    let mut grad_v = 0.0;
    if h > 1 {
        let nv = ((h - 1) * wd) as f64;
        for i in 0..h - 1 {
            for j in 0..wd {
                let d = diff[[i + 1, j]] - diff[[i, j]];
                grad_v += d.abs();
                let s = w.lambda2 * sign(d) / nv;
                grad[[i + 1, j]] += s;
                grad[[i, j]] -= s;
            }
        }
        grad_v /= nv;
    }
    let mut grad_h = 0.0;
    if wd > 1 {
        let nh = (h * (wd - 1)) as f64;
        for i in 0..h {
            for j in 0..wd - 1 {
                let d = diff[[i, j + 1]] - diff[[i, j]];
                grad_h += d.abs();
                let s = w.lambda2 * sign(d) / nh;
                grad[[i, j + 1]] += s;
                grad[[i, j]] -= s;
            }
        }
        grad_h /= nh;
    }
    (w.lambda1 * img + w.lambda2 * (grad_v + grad_h), grad)
}

/// Appearance consistency between two reconstructions.
pub fn ac_loss(x1: &ImageSlice, x2: &ImageSlice, w: &LossWeights) -> Result<f64> {
    check_same_shape("ac_loss", x1.pixels.shape(), x2.pixels.shape())?;
    Ok(ac_loss_grad(&x1.pixels, &x2.pixels, w).0)
}

/// Same functional form as [`ac_loss`], against ground truth.
pub fn supervised_loss(x_pred: &ImageSlice, x_gt: &ImageSlice, w: &LossWeights) -> Result<f64> {
    check_same_shape("supervised_loss", x_pred.pixels.shape(), x_gt.pixels.shape())?;
    Ok(ac_loss_grad(&x_pred.pixels, &x_gt.pixels, w).0)
}

/// Sum of per-bin distances of `fft2c(x) - y` over the rows sampled by `m`,
/// with the gradient of `scale * sum` with respect to `x`.
fn masked_residual_l1(
    x: &Array2<f64>,
    y: &Array2<Complex64>,
    m: &SampleMask,
    scale: f64,
    norm: PdcNorm,
) -> (f64, Array2<f64>) {
    let k = fft2c_real(x);
    let mut gk = Array2::<Complex64>::zeros(k.dim());
    let mut total = 0.0;
    for (i, &s) in m.lines().iter().enumerate() {
        if !s {
            continue;
        }
        for j in 0..k.ncols() {
            let r = k[[i, j]] - y[[i, j]];
            match norm {
                PdcNorm::Modulus => {
                    let a = r.norm();
                    total += a;
                    if a > 0.0 {
                        gk[[i, j]] = r * (scale / a);
                    }
                }
                PdcNorm::RealImag => {
                    total += r.re.abs() + r.im.abs();
                    gk[[i, j]] = Complex64::new(sign(r.re), sign(r.im)) * scale;
                }
            }
        }
    }
    (total, fft2c_real_backward(&gk))
}

/// Partition data consistency: the k-space of each reconstruction must
/// explain the other partition's measurements. Averaged over the masked bins
/// of both partitions. Returns the loss and gradients for `x1` and `x2`.
pub fn pdc_loss_grad(
    x1: &Array2<f64>,
    x2: &Array2<f64>,
    y1: &Array2<Complex64>,
    y2: &Array2<Complex64>,
    m1: &SampleMask,
    m2: &SampleMask,
    norm: PdcNorm,
) -> (f64, Array2<f64>, Array2<f64>) {
    let width = x1.ncols();
    let bins = ((m1.count() + m2.count()) * width) as f64;
    if bins == 0.0 {
        return (0.0, Array2::zeros(x1.dim()), Array2::zeros(x2.dim()));
    }
    let scale = 1.0 / bins;
    let (s21, g2) = masked_residual_l1(x2, y1, m1, scale, norm);
    let (s12, g1) = masked_residual_l1(x1, y2, m2, scale, norm);
    ((s21 + s12) * scale, g1, g2)
}

pub fn pdc_loss(
    x1: &ImageSlice,
    x2: &ImageSlice,
    y1: &KSpaceGrid,
    y2: &KSpaceGrid,
    m1: &SampleMask,
    m2: &SampleMask,
    norm: PdcNorm,
) -> Result<f64> {
    let shape = x1.pixels.shape();
    check_same_shape("pdc_loss", shape, x2.pixels.shape())?;
    check_same_shape("pdc_loss", shape, y1.values.shape())?;
    check_same_shape("pdc_loss", shape, y2.values.shape())?;
    check_same_shape("pdc_loss", &[shape[0]], &[m1.height()])?;
    check_same_shape("pdc_loss", &[shape[0]], &[m2.height()])?;
    Ok(pdc_loss_grad(&x1.pixels, &x2.pixels, &y1.values, &y2.values, m1, m2, norm).0)
}

/// Combine the two terms according to the training mode. The k-space-only
/// mode optimizes the partition term alone, without the `lambda3` scale.
pub fn total_loss(ac: f64, pdc: f64, mode: TrainMode, w: &LossWeights) -> f64 {
    match mode {
        TrainMode::SelfsupDual => ac + w.lambda3 * pdc,
        TrainMode::SelfsupImageOnly | TrainMode::Supervised => ac,
        TrainMode::SelfsupKspaceOnly => pdc,
    }
}

/// Multipliers `(d total / d ac, d total / d pdc)`.
pub(crate) fn total_loss_coefficients(mode: TrainMode, w: &LossWeights) -> (f64, f64) {
    match mode {
        TrainMode::SelfsupDual => (1.0, w.lambda3),
        TrainMode::SelfsupImageOnly | TrainMode::Supervised => (1.0, 0.0),
        TrainMode::SelfsupKspaceOnly => (0.0, 1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Contrast;
    use crate::kspace::{apply_mask, fft2c, make_mask, partition_mask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.random::<f64>())
    }

    fn img(a: Array2<f64>) -> ImageSlice {
        ImageSlice::new(a, Contrast::T2)
    }

    /// Elementwise recomputation straight from the definition.
    fn ac_oracle(x1: &Array2<f64>, x2: &Array2<f64>, w: &LossWeights) -> f64 {
        let (h, wd) = x1.dim();
        let mut l1 = 0.0;
        let mut gv = 0.0;
        let mut gh = 0.0;
        for i in 0..h {
            for j in 0..wd {
                l1 += (x1[[i, j]] - x2[[i, j]]).abs();
                if i + 1 < h {
                    gv += ((x1[[i + 1, j]] - x1[[i, j]]) - (x2[[i + 1, j]] - x2[[i, j]])).abs();
                }
                if j + 1 < wd {
                    gh += ((x1[[i, j + 1]] - x1[[i, j]]) - (x2[[i, j + 1]] - x2[[i, j]])).abs();
                }
            }
        }
        w.lambda1 * l1 / (h * wd) as f64
            + w.lambda2 * (gv / ((h - 1) * wd) as f64 + gh / (h * (wd - 1)) as f64)
    }

    #[test]
    fn ac_cases() {
        let w = LossWeights::default();
        let x = random(8, 8, 0);
        assert_eq!(ac_loss(&img(x.clone()), &img(x.clone()), &w).unwrap(), 0.0);
        let shifted = x.mapv(|v| v - 0.3);
        assert!((ac_loss(&img(x.clone()), &img(shifted), &w).unwrap() - 0.3).abs() < 1e-12);
        let y = random(8, 8, 1);
        let got = ac_loss(&img(x.clone()), &img(y.clone()), &w).unwrap();
        assert!((got - ac_oracle(&x, &y, &w)).abs() < 1e-7);
        assert!(ac_loss(&img(x), &img(random(8, 7, 0)), &w).is_err());
    }

    #[test]
    fn supervised_matches_ac() {
        let w = LossWeights::default();
        let (a, b) = (random(8, 8, 2), random(8, 8, 3));
        assert_eq!(supervised_loss(&img(a.clone()), &img(a.clone()), &w).unwrap(), 0.0);
        assert_eq!(
            supervised_loss(&img(a.clone()), &img(b.clone()), &w).unwrap(),
            ac_loss(&img(a), &img(b), &w).unwrap()
        );
    }

    #[test]
    fn pdc_cases() {
        let gt = img(random(16, 16, 4));
        let m = make_mask(16, 2.0, 0.0, 1).unwrap();
        let (m1, m2) = partition_mask(&m, 0.5, 2).unwrap();
        let k = fft2c(&gt);
        let (y1, y2) = (apply_mask(&k, &m1).unwrap(), apply_mask(&k, &m2).unwrap());
        assert!(pdc_loss(&gt, &gt, &y1, &y2, &m1, &m2, PdcNorm::Modulus).unwrap() < 1e-6);

        let other = img(random(16, 16, 5));
        let empty = SampleMask::empty(16);
        assert_eq!(pdc_loss(&other, &gt, &y1, &y2, &empty, &empty, PdcNorm::Modulus).unwrap(), 0.0);

        // direct oracle: masked bins of both partitions
        let (a, b) = (img(random(16, 16, 6)), img(random(16, 16, 7)));
        let (ka, kb) = (fft2c(&a), fft2c(&b));
        let mut sum = 0.0;
        let mut bins = 0.0;
        for i in 0..16 {
            for j in 0..16 {
                if m1.is_sampled(i) {
                    sum += (kb.values[[i, j]] - y1.values[[i, j]]).norm();
                    bins += 1.0;
                }
                if m2.is_sampled(i) {
                    sum += (ka.values[[i, j]] - y2.values[[i, j]]).norm();
                    bins += 1.0;
                }
            }
        }
        let got = pdc_loss(&a, &b, &y1, &y2, &m1, &m2, PdcNorm::Modulus).unwrap();
        assert!((got - sum / bins).abs() < 1e-7);
        let mut sum_ri = 0.0;
        for i in 0..16 {
            for j in 0..16 {
                let mut add = |r: Complex64| sum_ri += r.re.abs() + r.im.abs();
                if m1.is_sampled(i) {
                    add(kb.values[[i, j]] - y1.values[[i, j]]);
                }
                if m2.is_sampled(i) {
                    add(ka.values[[i, j]] - y2.values[[i, j]]);
                }
            }
        }
        let got_ri = pdc_loss(&a, &b, &y1, &y2, &m1, &m2, PdcNorm::RealImag).unwrap();
        assert!((got_ri - sum_ri / bins).abs() < 1e-7);
        // swapping the partitions together with their reconstructions is a no-op
        let swapped = pdc_loss(&b, &a, &y2, &y1, &m2, &m1, PdcNorm::Modulus).unwrap();
        assert!((got - swapped).abs() < 1e-12);
    }

    #[test]
    fn total_loss_modes() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 2.0, TrainMode::SelfsupDual, &w) - 1.2).abs() < 1e-15);
        assert_eq!(total_loss(1.0, 2.0, TrainMode::SelfsupImageOnly, &w), 1.0);
        assert_eq!(total_loss(1.0, 2.0, TrainMode::SelfsupKspaceOnly, &w), 2.0);
    }

    #[test]
    fn loss_gradients_match_differences() {
        let w = LossWeights::default();
        let (a, b) = (random(6, 5, 8), random(6, 5, 9));
        let (_, g) = ac_loss_grad(&a, &b, &w);
        let m = SampleMask::from_lines(vec![true, false, true, true, false, true]);
        let (m1, m2) = partition_mask(&m, 0.5, 1).unwrap();
        let y1 = fft2c_real(&random(6, 5, 10));
        let y2 = fft2c_real(&random(6, 5, 11));
        let eps = 1e-6;
        for (norm, idx) in [PdcNorm::Modulus, PdcNorm::RealImag]
            .into_iter()
            .flat_map(|n| [(0, 0), (2, 3), (5, 4)].map(|i| (n, i)))
        {
            let (_, p1, p2) = pdc_loss_grad(&a, &b, &y1, &y2, &m1, &m2, norm);
            let mut ap = a.clone();
            ap[idx] += eps;
            let mut am = a.clone();
            am[idx] -= eps;
            let fd = (ac_loss_grad(&ap, &b, &w).0 - ac_loss_grad(&am, &b, &w).0) / (2.0 * eps);
            assert!((fd - g[idx]).abs() < 1e-6, "ac {idx:?}");
            let fd = (pdc_loss_grad(&ap, &b, &y1, &y2, &m1, &m2, norm).0 - pdc_loss_grad(&am, &b, &y1, &y2, &m1, &m2, norm).0)
                / (2.0 * eps);
            assert!((fd - p1[idx]).abs() < 1e-6, "pdc x1 {idx:?}");
            let mut bp = b.clone();
            bp[idx] += eps;
            let mut bm = b.clone();
            bm[idx] -= eps;
            let fd = (pdc_loss_grad(&a, &bp, &y1, &y2, &m1, &m2, norm).0 - pdc_loss_grad(&a, &bm, &y1, &y2, &m1, &m2, norm).0)
                / (2.0 * eps);
            assert!((fd - p2[idx]).abs() < 1e-6, "pdc x2 {idx:?}");
        }
    }
}
