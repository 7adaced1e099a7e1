//! PSNR and SSIM against a ground-truth slice.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_same_shape, Error, Result};
use crate::image::ImageSlice;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// PSNR in dB with the peak taken as `max(reference)`.
/// Returns `f64::INFINITY` when the images are identical.
pub fn psnr(x: &ImageSlice, reference: &ImageSlice) -> Result<f64> {
    check_same_shape("psnr", x.pixels.shape(), reference.pixels.shape())?;
    let range = reference.pixels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    psnr_with_range(x.pixels.view(), reference.pixels.view(), range)
}

pub fn psnr_with_range(x: ArrayView2<f64>, reference: ArrayView2<f64>, range: f64) -> Result<f64> {
    check_same_shape("psnr", x.shape(), reference.shape())?;
    let n = x.len() as f64;
    let mse = x
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable "valid" correlation with the same taps on both axes.
fn filter_valid(a: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = a.dim();
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let rows = Array2::from_shape_fn((h, ow), |(i, j)| (0..k).map(|t| taps[t] * a[[i, j + t]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(i, j)| (0..k).map(|t| taps[t] * rows[[i + t, j]]).sum::<f64>())
}

/// Mean SSIM over all fully-contained 11x11 Gaussian windows, with dynamic
/// range `max(reference)`.
pub fn ssim(x: &ImageSlice, reference: &ImageSlice) -> Result<f64> {
    let range = reference.pixels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    ssim_with_range(x.pixels.view(), reference.pixels.view(), range)
}

/// SSIM with an explicit dynamic range; symmetric in its two images.
pub fn ssim_with_range(x: ArrayView2<f64>, y: ArrayView2<f64>, range: f64) -> Result<f64> {
    check_same_shape("ssim", x.shape(), y.shape())?;
    let (h, w) = x.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Param(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let x = x.to_owned();
    let y = y.to_owned();
    let mu_x = filter_valid(&x, &taps);
    let mu_y = filter_valid(&y, &taps);
    let xx = filter_valid(&(&x * &x), &taps);
    let yy = filter_valid(&(&y * &y), &taps);
    let xy = filter_valid(&(&x * &y), &taps);

    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let mut total = 0.0;
    for idx in 0..mu_x.len() {
        let (mx, my) = (mu_x.as_slice().unwrap()[idx], mu_y.as_slice().unwrap()[idx]);
        let vx = xx.as_slice().unwrap()[idx] - mx * mx;
        let vy = yy.as_slice().unwrap()[idx] - my * my;
        let cov = xy.as_slice().unwrap()[idx] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / mu_x.len() as f64)
}

/// One evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub slice_id: usize,
    pub method: String,
    pub accel: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub const METRIC_CSV_HEADER: &str = "slice_id,method,accel,psnr,ssim";

fn fmt_float(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

pub fn metrics_to_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRIC_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.slice_id,
            r.method,
            r.accel,
            fmt_float(r.psnr),
            fmt_float(r.ssim)
        );
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    std::fs::write(path, metrics_to_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRIC_CSV_HEADER) {
        return Err(Error::format(path, "missing metric header"));
    }
    let bad = |l: &str| Error::format(path, format!("bad metric row {l:?}"));
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad(l));
            }
            Ok(MetricRow {
                slice_id: f[0].parse().map_err(|_| bad(l))?,
                method: f[1].to_string(),
                accel: f[2].parse().map_err(|_| bad(l))?,
                psnr: f[3].parse().map_err(|_| bad(l))?,
                ssim: f[4].parse().map_err(|_| bad(l))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Contrast;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(a: Array2<f64>) -> ImageSlice {
        ImageSlice::new(a, Contrast::T2)
    }

    fn random(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.random::<f64>())
    }

    #[test]
    fn psnr_cases() {
        let r = random(16, 16, 0);
        let mut r1 = r.clone();
        r1[[0, 0]] = 1.0;
        assert_eq!(psnr(&img(r1.clone()), &img(r1.clone())).unwrap(), f64::INFINITY);
        let offset = r1.mapv(|v| v + 0.1);
        assert!((psnr(&img(offset), &img(r1)).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&img(random(4, 4, 0)), &img(random(4, 5, 0))).is_err());
    }

    #[test]
    fn ssim_cases() {
        let x = random(16, 16, 1);
        assert!((ssim(&img(x.clone()), &img(x.clone())).unwrap() - 1.0).abs() < 1e-9);
        let inv = x.mapv(|v| 1.0 - v);
        assert!(ssim(&img(x.clone()), &img(inv)).unwrap() < 1.0);
        assert!(ssim(&img(random(10, 16, 0)), &img(random(10, 16, 1))).is_err());
        let y = random(16, 16, 2);
        let a = ssim_with_range(x.view(), y.view(), 1.0).unwrap();
        let b = ssim_with_range(y.view(), x.view(), 1.0).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    /// Direct per-window SSIM with an explicit 2-D Gaussian weight.
    fn ssim_oracle(x: &Array2<f64>, y: &Array2<f64>, range: f64) -> f64 {
        let k = SSIM_WINDOW;
        let g = gaussian_taps(k, SSIM_SIGMA);
        let (c1, c2) = ((SSIM_K1 * range).powi(2), (SSIM_K2 * range).powi(2));
        let (h, w) = x.dim();
        let mut total = 0.0;
        let mut count = 0.0;
        for i0 in 0..=h - k {
            for j0 in 0..=w - k {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for a in 0..k {
                    for b in 0..k {
                        let wt = g[a] * g[b];
                        let (u, v) = (x[[i0 + a, j0 + b]], y[[i0 + a, j0 + b]]);
                        mx += wt * u;
                        my += wt * v;
                        sxx += wt * u * u;
                        syy += wt * v * v;
                        sxy += wt * u * v;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
        total / count
    }

    #[test]
    fn metrics_match_brute_force() {
        for seed in 0..4 {
            let x = random(16, 16, 10 + seed);
            let y = random(16, 16, 20 + seed).mapv(|v| 0.2 + 0.8 * v);
            let range = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let got = ssim(&img(x.clone()), &img(y.clone())).unwrap();
            assert!((got - ssim_oracle(&x, &y, range)).abs() < 1e-7);

            let mse = x.iter().zip(y.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 256.0;
            let want = 10.0 * (range * range / mse).log10();
            assert!((psnr(&img(x), &img(y)).unwrap() - want).abs() < 1e-7);
        }
    }

    #[test]
    fn psnr_falls_as_noise_grows() {
        let gt = random(32, 32, 3);
        let noise = random(32, 32, 4).mapv(|v| v - 0.5);
        let mut last = f64::INFINITY;
        for sigma in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let noisy = &gt + &noise.mapv(|v| v * sigma);
            let p = psnr(&img(noisy), &img(gt.clone())).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            MetricRow { slice_id: 0, method: "zero".into(), accel: 4.0, psnr: 25.5, ssim: 0.7 },
            MetricRow { slice_id: 1, method: "model".into(), accel: 4.0, psnr: f64::INFINITY, ssim: 1.0 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics_csv(&p, &rows).unwrap();
        assert_eq!(read_metrics_csv(&p).unwrap(), rows);
    }
}
