//! Retrospective undersampling of a paired dataset and per-slice evaluation
//! of the reconstruction methods.

use std::fmt;
use std::str::FromStr;

use crate::baselines::{cstv_reconstruct, zero_fill, CsTvConfig};
use crate::error::{Error, Result};
use crate::image::{Contrast, ImageSlice};
use crate::metrics::{psnr, ssim, MetricRow};
use crate::model::{dcct_forward, ModelConfig, ModelWeights};
use crate::phantom::DatasetSlice;
use crate::train::TrainSample;

/// Reconstruction method names as used in metric tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    ZeroFill,
    CsTv,
    Model,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::ZeroFill, Method::CsTv, Method::Model];

    pub fn name(self) -> &'static str {
        match self {
            Method::ZeroFill => "zero",
            Method::CsTv => "cstv",
            Method::Model => "model",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Param(format!("unknown method {s:?} (expected zero, cstv or model)")))
    }
}

/// Seed of the sampling mask of slice `index`: every slice gets its own
/// fixed mask, reproducible from the dataset seed alone.
pub fn mask_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// Undersample the `target` contrast of the selected slices; the other
/// contrast becomes the fully sampled reference. `slice_id` is the index
/// into `slices`.
pub fn make_samples(
    slices: &[DatasetSlice],
    indices: &[usize],
    target: Contrast,
    accel: f64,
    center_fraction: f64,
    seed: u64,
) -> Result<Vec<TrainSample>> {
    indices
        .iter()
        .map(|&i| {
            let s = slices
                .get(i)
                .ok_or_else(|| Error::Param(format!("slice index {i} out of range ({})", slices.len())))?;
            TrainSample::simulate(
                i,
                s.contrast(target),
                s.contrast(target.other()),
                accel,
                center_fraction,
                mask_seed(seed, i),
            )
        })
        .collect()
}

/// A trained model with its configuration.
#[derive(Debug, Clone, Copy)]
pub struct ModelRef<'a> {
    pub config: &'a ModelConfig,
    pub weights: &'a ModelWeights,
}

pub fn reconstruct(method: Method, sample: &TrainSample, cstv: &CsTvConfig, model: Option<ModelRef>) -> Result<ImageSlice> {
    match method {
        Method::ZeroFill => zero_fill(&sample.y_tag, &sample.m_tag),
        Method::CsTv => cstv_reconstruct(&sample.y_tag, &sample.m_tag, cstv),
        Method::Model => {
            let m = model.ok_or_else(|| Error::Config("method \"model\" needs a checkpoint".into()))?;
            Ok(dcct_forward(&sample.y_tag, &sample.m_tag, &sample.x_ref, m.config, m.weights)?.image)
        }
    }
}

/// One metric row per sample and method, ordered by sample then method.
/// Samples without ground truth are an error.
pub fn evaluate(
    samples: &[TrainSample],
    methods: &[Method],
    accel: f64,
    cstv: &CsTvConfig,
    model: Option<ModelRef>,
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::with_capacity(samples.len() * methods.len());
    for sample in samples {
        let gt = sample
            .x_gt
            .as_ref()
            .ok_or_else(|| Error::Config(format!("slice {} has no ground truth", sample.slice_id)))?;
        for &method in methods {
            let x = reconstruct(method, sample, cstv, model)?;
            rows.push(MetricRow {
                slice_id: sample.slice_id,
                method: method.name().into(),
                accel,
                psnr: psnr(&x, gt)?,
                ssim: ssim(&x, gt)?,
            });
        }
    }
    Ok(rows)
}

/// Mean PSNR and SSIM of the rows of one method.
pub fn mean_metrics(rows: &[MetricRow], method: Method) -> Option<(f64, f64)> {
    let sel: Vec<&MetricRow> = rows.iter().filter(|r| r.method == method.name()).collect();
    if sel.is_empty() {
        return None;
    }
    let n = sel.len() as f64;
    Some((
        sel.iter().map(|r| r.psnr).sum::<f64>() / n,
        sel.iter().map(|r| r.ssim).sum::<f64>() / n,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::simulate_dataset;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("nope".parse::<Method>().is_err());
    }

    #[test]
    fn evaluate_baselines() {
        let data = simulate_dataset(2, 2, 32, 32, 4).unwrap();
        let samples = make_samples(&data, &[0, 1, 3], Contrast::T2, 4.0, 0.08, 1).unwrap();
        assert_eq!(samples[2].slice_id, 3);
        assert_ne!(samples[0].m_tag, samples[1].m_tag);
        let cstv = CsTvConfig {
            max_iters: 5,
            ..CsTvConfig::default()
        };
        let rows = evaluate(&samples, &[Method::ZeroFill, Method::CsTv], 4.0, &cstv, None).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.psnr.is_finite() && r.ssim <= 1.0));
        assert!(mean_metrics(&rows, Method::CsTv).is_some());
        assert!(mean_metrics(&rows, Method::Model).is_none());
        assert!(evaluate(&samples, &[Method::Model], 4.0, &cstv, None).is_err());
        assert!(make_samples(&data, &[9], Contrast::T2, 4.0, 0.08, 1).is_err());
    }
}
