//! Window partitioning and the cyclic-shift bookkeeping for shifted windows.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// `H x W x C` feature map stored as an `(H*W, C)` matrix in pixel order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub data: Array2<f64>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, data: Array2<f64>) -> Result<Self> {
        if data.nrows() != h * w {
            return Err(Error::Shape(format!(
                "feature map {h}x{w} needs {} rows, got {}",
                h * w,
                data.nrows()
            )));
        }
        Ok(FeatureMap { h, w, data })
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }
}

fn check_divisible(h: usize, w: usize, m: usize) -> Result<()> {
    if m == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
        return Err(Error::Shape(format!("{h}x{w} not divisible into {m}x{m} windows")));
    }
    Ok(())
}

/// Source pixel index of every token in window order, after a cyclic shift
/// of `shift` pixels towards the origin (the rolled map at `(i, j)` holds the
/// original pixel `((i + shift) % H, (j + shift) % W)`).
///
/// Window `k` occupies positions `k*M^2 .. (k+1)*M^2`, windows are row-major
/// over the `H/M x W/M` grid and tokens row-major inside each window.
pub fn window_order(h: usize, w: usize, m: usize, shift: usize) -> Vec<usize> {
    let (nh, nw) = (h / m, w / m);
    let mut order = Vec::with_capacity(h * w);
    for wi in 0..nh {
        for wj in 0..nw {
            for a in 0..m {
                for b in 0..m {
                    let i = (wi * m + a + shift) % h;
                    let j = (wj * m + b + shift) % w;
                    order.push(i * w + j);
                }
            }
        }
    }
    order
}

/// Region label of every token (window order) in the rolled map. Tokens of
/// one window attend to each other only when their labels match.
pub fn shift_region_labels(h: usize, w: usize, m: usize, shift: usize) -> Vec<u8> {
    let region = |x: usize, n: usize| -> u8 {
        if x < n - m {
            0
        } else if x < n - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (h / m, w / m);
    let mut labels = Vec::with_capacity(h * w);
    for wi in 0..nh {
        for wj in 0..nw {
            for a in 0..m {
                for b in 0..m {
                    labels.push(3 * region(wi * m + a, h) + region(wj * m + b, w));
                }
            }
        }
    }
    labels
}

/// Split into `(H/M * W/M, M*M, C)` non-overlapping windows.
pub fn window_partition(f: &FeatureMap, m: usize) -> Result<Array3<f64>> {
    check_divisible(f.h, f.w, m)?;
    let c = f.channels();
    let order = window_order(f.h, f.w, m, 0);
    let n_win = (f.h / m) * (f.w / m);
    let mut out = Array3::zeros((n_win, m * m, c));
    for (t, &p) in order.iter().enumerate() {
        out.slice_mut(ndarray::s![t / (m * m), t % (m * m), ..]).assign(&f.data.row(p));
    }
    Ok(out)
}

/// Exact inverse of [`window_partition`].
pub fn window_reverse(windows: &Array3<f64>, h: usize, w: usize, m: usize) -> Result<FeatureMap> {
    check_divisible(h, w, m)?;
    let (n_win, n_tok, c) = windows.dim();
    if n_win != (h / m) * (w / m) || n_tok != m * m {
        return Err(Error::Shape(format!(
            "{n_win} windows of {n_tok} tokens do not tile {h}x{w} with window {m}"
        )));
    }
    let order = window_order(h, w, m, 0);
    let mut data = Array2::zeros((h * w, c));
    for (t, &p) in order.iter().enumerate() {
        data.row_mut(p).assign(&windows.slice(ndarray::s![t / (m * m), t % (m * m), ..]));
    }
    FeatureMap::new(h, w, data)
}

/// Gather rows of `x` into the given order.
pub(crate) fn gather_rows(x: &Array2<f64>, order: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((order.len(), x.ncols()));
    for (t, &p) in order.iter().enumerate() {
        out.row_mut(t).assign(&x.row(p));
    }
    out
}

/// Inverse of [`gather_rows`] for a permutation.
pub(crate) fn scatter_rows(x: &Array2<f64>, order: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((order.len(), x.ncols()));
    for (t, &p) in order.iter().enumerate() {
        out.row_mut(p).assign(&x.row(t));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> FeatureMap {
        FeatureMap::new(h, w, Array2::from_shape_fn((h * w, c), |(p, k)| (p * c + k) as f64)).unwrap()
    }

    #[test]
    fn single_window_is_flattened_input() {
        let f = ramp(8, 8, 3);
        let w = window_partition(&f, 8).unwrap();
        assert_eq!(w.dim(), (1, 64, 3));
        assert_eq!(w.into_shape_with_order((64, 3)).unwrap(), f.data);
    }

    #[test]
    fn shapes_and_round_trip() {
        let f = ramp(16, 16, 3);
        let w = window_partition(&f, 8).unwrap();
        assert_eq!(w.dim(), (4, 64, 3));
        assert_eq!(window_reverse(&w, 16, 16, 8).unwrap(), f);
        assert!(window_partition(&ramp(12, 16, 1), 8).is_err());
        assert!(window_reverse(&w, 16, 24, 8).is_err());
    }

    #[test]
    fn shifted_order_is_a_permutation() {
        let mut order = window_order(16, 24, 8, 4);
        order.sort_unstable();
        assert_eq!(order, (0..16 * 24).collect::<Vec<_>>());
    }

    #[test]
    fn shift_regions() {
        // top-left window lies in one region, bottom-right straddles four
        let labels = shift_region_labels(16, 16, 8, 4);
        let interior = &labels[..64];
        assert!(interior.iter().all(|&l| l == interior[0]));
        let corner = &labels[3 * 64..];
        let mut distinct: Vec<u8> = corner.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct.len(), 4);
    }
}
