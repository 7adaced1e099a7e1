//! Image- and frequency-domain containers.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Contrast {
    T2,
    PD,
}

impl Contrast {
    pub fn name(self) -> &'static str {
        match self {
            Contrast::T2 => "T2",
            Contrast::PD => "PD",
        }
    }

    pub fn other(self) -> Contrast {
        match self {
            Contrast::T2 => Contrast::PD,
            Contrast::PD => Contrast::T2,
        }
    }
}

impl fmt::Display for Contrast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Contrast {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "T2" => Ok(Contrast::T2),
            "PD" => Ok(Contrast::PD),
            _ => Err(Error::Param(format!("unknown contrast {s:?}"))),
        }
    }
}

/// Real magnitude image of one contrast, row-major `H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSlice {
    pub pixels: Array2<f64>,
    pub contrast: Contrast,
}

impl ImageSlice {
    pub fn new(pixels: Array2<f64>, contrast: Contrast) -> Self {
        ImageSlice { pixels, contrast }
    }

    pub fn zeros(h: usize, w: usize, contrast: Contrast) -> Self {
        ImageSlice::new(Array2::zeros((h, w)), contrast)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite())
    }

    /// Divide by the slice maximum so values land in `[0, 1]`.
    /// Returns the scale that was applied (zero images are left untouched).
    pub fn normalize_max(&mut self) -> f64 {
        let max = self.pixels.iter().cloned().fold(0.0_f64, f64::max);
        if max > 0.0 {
            self.pixels.mapv_inplace(|v| v / max);
            max
        } else {
            1.0
        }
    }
}

/// Complex k-space with the DC component at index `(H/2, W/2)`.
///
/// The contrast tag follows the image the grid was synthesized from.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceGrid {
    pub values: Array2<Complex64>,
    pub contrast: Contrast,
}

impl KSpaceGrid {
    pub fn new(values: Array2<Complex64>, contrast: Contrast) -> Self {
        KSpaceGrid { values, contrast }
    }

    pub fn zeros(h: usize, w: usize, contrast: Contrast) -> Self {
        KSpaceGrid::new(Array2::zeros((h, w)), contrast)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }
}
