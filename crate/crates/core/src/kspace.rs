//! Fourier operators, Cartesian masks and the projections built on them.
//!
//! All transforms are centered (DC at `(H/2, W/2)`) and orthonormal, so
//! `fft2c` is unitary and its adjoint is `ifft2c`.

use std::cell::RefCell;

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;

use crate::error::{check_same_shape, Error, Result};
use crate::image::{ImageSlice, KSpaceGrid};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

#[derive(Clone, Copy)]
enum Direction {
    Forward,
    Inverse,
}

/// `fftshift` along both axes: index 0 moves to `n / 2`.
fn fftshift(a: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(i, j)| a[[(i + h - h / 2) % h, (j + w - w / 2) % w]])
}

/// Inverse of [`fftshift`]: index `n / 2` moves to 0.
fn ifftshift(a: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(i, j)| a[[(i + h / 2) % h, (j + w / 2) % w]])
}

fn fft2_inplace(a: &mut Array2<Complex64>, dir: Direction) {
    let (h, w) = a.dim();
    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let (row_fft, col_fft) = match dir {
            Direction::Forward => (planner.plan_fft_forward(w), planner.plan_fft_forward(h)),
            Direction::Inverse => (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h)),
        };
        let data = a.as_slice_mut().expect("standard layout");
        row_fft.process(data);
        let mut col = vec![Complex64::new(0.0, 0.0); h];
        for j in 0..w {
            for i in 0..h {
                col[i] = data[i * w + j];
            }
            col_fft.process(&mut col);
            for i in 0..h {
                data[i * w + j] = col[i];
            }
        }
    });
    let scale = 1.0 / ((h * w) as f64).sqrt();
    a.mapv_inplace(|v| v * scale);
}

/// Centered orthonormal forward transform of a complex array.
pub fn fft2c_complex(x: &Array2<Complex64>) -> Array2<Complex64> {
    let mut a = ifftshift(x);
    fft2_inplace(&mut a, Direction::Forward);
    fftshift(&a)
}

/// Centered orthonormal inverse transform of a complex array.
pub fn ifft2c_complex(k: &Array2<Complex64>) -> Array2<Complex64> {
    let mut a = ifftshift(k);
    fft2_inplace(&mut a, Direction::Inverse);
    fftshift(&a)
}

/// Centered orthonormal forward transform of a real array.
pub fn fft2c_real(x: &Array2<f64>) -> Array2<Complex64> {
    fft2c_complex(&x.mapv(|v| Complex64::new(v, 0.0)))
}

/// Image to k-space.
pub fn fft2c(img: &ImageSlice) -> KSpaceGrid {
    KSpaceGrid::new(fft2c_real(&img.pixels), img.contrast)
}

/// k-space to the complex image. Callers take the real part or the
/// magnitude as they need.
pub fn ifft2c(k: &KSpaceGrid) -> Array2<Complex64> {
    ifft2c_complex(&k.values)
}

/// Like [`ifft2c`] but checks the grid against an expected `H x W`.
pub fn ifft2c_checked(k: &KSpaceGrid, h: usize, w: usize) -> Result<Array2<Complex64>> {
    check_same_shape("ifft2c", &[h, w], k.values.shape())?;
    Ok(ifft2c(k))
}

pub fn magnitude(z: &Array2<Complex64>) -> Array2<f64> {
    z.mapv(|c| c.norm())
}

/// Binary phase-encode line mask. A sampled line is a full row of k-space.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SampleMask {
    lines: Vec<bool>,
}

impl SampleMask {
    pub fn from_lines(lines: Vec<bool>) -> Self {
        SampleMask { lines }
    }

    pub fn full(h: usize) -> Self {
        SampleMask::from_lines(vec![true; h])
    }

    pub fn empty(h: usize) -> Self {
        SampleMask::from_lines(vec![false; h])
    }

    pub fn lines(&self) -> &[bool] {
        &self.lines
    }

    pub fn height(&self) -> usize {
        self.lines.len()
    }

    pub fn count(&self) -> usize {
        self.lines.iter().filter(|&&b| b).count()
    }

    pub fn is_sampled(&self, row: usize) -> bool {
        self.lines[row]
    }

    pub fn sampled_rows(&self) -> Vec<usize> {
        (0..self.lines.len()).filter(|&i| self.lines[i]).collect()
    }

    /// The `H x W` 0/1 array, constant along each row.
    pub fn expanded(&self, width: usize) -> Array2<f64> {
        Array2::from_shape_fn((self.lines.len(), width), |(i, _)| {
            if self.lines[i] {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn complement(&self) -> SampleMask {
        SampleMask::from_lines(self.lines.iter().map(|b| !b).collect())
    }

    fn check_rows(&self, what: &str, h: usize) -> Result<()> {
        if self.lines.len() != h {
            return Err(Error::Shape(format!(
                "{what}: mask has {} lines, grid has {h} rows",
                self.lines.len()
            )));
        }
        Ok(())
    }
}

fn round_count(x: f64) -> usize {
    x.round().max(0.0) as usize
}

/// Random Cartesian line mask at acceleration `accel`.
///
/// `round(h / accel)` lines are sampled in total; `round(center_fraction * h)`
/// contiguous lines around the DC row are always among them, and the rest are
/// drawn uniformly without replacement from the remaining rows.
pub fn make_mask(h: usize, accel: f64, center_fraction: f64, seed: u64) -> Result<SampleMask> {
    if h < 4 {
        return Err(Error::Param(format!("mask height {h} < 4")));
    }
    if !(accel >= 1.0 && accel <= h as f64) {
        return Err(Error::Param(format!("acceleration {accel} outside [1, {h}]")));
    }
    if !(center_fraction >= 0.0 && center_fraction < 1.0 / accel) {
        return Err(Error::Param(format!(
            "center fraction {center_fraction} outside [0, 1/R = {})",
            1.0 / accel
        )));
    }
    let total = round_count(h as f64 / accel);
    let n_center = round_count(center_fraction * h as f64);
    if n_center > total {
        return Err(Error::Param(format!(
            "{n_center} center lines exceed the {total} lines budget"
        )));
    }

    let mut lines = vec![false; h];
    let start = h / 2 - n_center / 2;
    for line in lines.iter_mut().skip(start).take(n_center) {
        *line = true;
    }
    let mut rest: Vec<usize> = (0..h).filter(|&i| !lines[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rest.shuffle(&mut rng);
    for &i in rest.iter().take(total - n_center) {
        lines[i] = true;
    }
    Ok(SampleMask::from_lines(lines))
}

/// Split the sampled lines of `m_tag` into two disjoint masks with
/// `|M1| = round(rho * |M_tag|)`.
pub fn partition_mask(m_tag: &SampleMask, rho: f64, seed: u64) -> Result<(SampleMask, SampleMask)> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Param(format!("partition rate {rho} outside (0, 1)")));
    }
    let mut rows = m_tag.sampled_rows();
    if rows.len() < 2 {
        return Err(Error::Param(format!(
            "cannot partition a mask with {} sampled lines",
            rows.len()
        )));
    }
    let n1 = round_count(rho * rows.len() as f64);
    if n1 == 0 || n1 == rows.len() {
        return Err(Error::Param(format!(
            "partition rate {rho} leaves one side of {} lines empty",
            rows.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rows.shuffle(&mut rng);
    let h = m_tag.height();
    let mut first = vec![false; h];
    for &i in &rows[..n1] {
        first[i] = true;
    }
    let second = (0..h).map(|i| m_tag.lines[i] && !first[i]).collect();
    Ok((SampleMask::from_lines(first), SampleMask::from_lines(second)))
}

/// Zero every row of `k` whose line flag differs from `keep`.
pub(crate) fn mask_rows(k: &mut Array2<Complex64>, m: &SampleMask, keep: bool) {
    let zero = Complex64::new(0.0, 0.0);
    for (mut row, &s) in k.rows_mut().into_iter().zip(m.lines()) {
        if s != keep {
            row.fill(zero);
        }
    }
}

pub fn apply_mask(k: &KSpaceGrid, m: &SampleMask) -> Result<KSpaceGrid> {
    m.check_rows("apply_mask", k.dim().0)?;
    let mut values = k.values.clone();
    mask_rows(&mut values, m, true);
    Ok(KSpaceGrid::new(values, k.contrast))
}

/// Magnitude of the inverse transform of the masked data.
pub fn zero_fill_recon(y: &KSpaceGrid, m: &SampleMask) -> Result<ImageSlice> {
    let masked = apply_mask(y, m)?;
    Ok(ImageSlice::new(magnitude(&ifft2c(&masked)), y.contrast))
}

/// k-space filling: acquired target lines plus the reference spectrum in
/// every unacquired line.
pub fn kf_condition(y_tag: &KSpaceGrid, m_tag: &SampleMask, x_ref: &ImageSlice) -> Result<ImageSlice> {
    check_same_shape("kf_condition", y_tag.values.shape(), x_ref.pixels.shape())?;
    m_tag.check_rows("kf_condition", y_tag.dim().0)?;
    let mut filled = y_tag.values.clone();
    let ref_k = fft2c_real(&x_ref.pixels);
    for ((mut row, ref_row), &s) in filled.rows_mut().into_iter().zip(ref_k.rows()).zip(m_tag.lines()) {
        if !s {
            row.assign(&ref_row);
        }
    }
    Ok(ImageSlice::new(magnitude(&ifft2c_complex(&filled)), y_tag.contrast))
}

/// The complex intermediate of the data-consistency projection:
/// `ifft2c((1 - m) * fft2c(x) + m * y)`.
pub fn data_consistency_complex(x: &Array2<f64>, y: &KSpaceGrid, m: &SampleMask) -> Result<Array2<Complex64>> {
    check_same_shape("data_consistency", x.shape(), y.values.shape())?;
    m.check_rows("data_consistency", x.dim().0)?;
    let mut k = fft2c_real(x);
    for ((mut row, y_row), &s) in k.rows_mut().into_iter().zip(y.values.rows()).zip(m.lines()) {
        if s {
            row.assign(&y_row);
        }
    }
    Ok(ifft2c_complex(&k))
}

/// Hard replacement of the sampled lines followed by the magnitude.
pub fn data_consistency(x: &ImageSlice, y: &KSpaceGrid, m: &SampleMask) -> Result<ImageSlice> {
    let z = data_consistency_complex(&x.pixels, y, m)?;
    Ok(ImageSlice::new(magnitude(&z), x.contrast))
}

/// Reverse-mode step through `|z|`: maps `dL/d|z|` to the complex gradient
/// `dL/dRe z + i dL/dIm z`. The gradient at `z = 0` is taken as zero.
pub fn magnitude_backward(z: &Array2<Complex64>, grad: &Array2<f64>) -> Array2<Complex64> {
    let mut out = Array2::zeros(z.dim());
    Zip::from(&mut out).and(z).and(grad).for_each(|o, &z, &g| {
        let n = z.norm();
        if n > 0.0 {
            *o = z * (g / n);
        }
    });
    out
}

/// Reverse-mode step through [`data_consistency_complex`] with respect to
/// the real input `x`. The map is `x -> A x + const` with `A` self-adjoint,
/// so the input gradient is `Re(A g)`.
pub fn data_consistency_backward(grad_z: &Array2<Complex64>, m: &SampleMask) -> Array2<f64> {
    let mut k = fft2c_complex(grad_z);
    mask_rows(&mut k, m, false);
    ifft2c_complex(&k).mapv(|c| c.re)
}

/// Reverse-mode step through `k = fft2c(x)` for real `x`.
pub fn fft2c_real_backward(grad_k: &Array2<Complex64>) -> Array2<f64> {
    ifft2c_complex(grad_k).mapv(|c| c.re)
}
