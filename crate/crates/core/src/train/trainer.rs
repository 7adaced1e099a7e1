use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use super::loss::{ac_loss_grad, pdc_loss_grad, total_loss_coefficients, LossWeights};
use super::{TrainConfig, TrainMode};
use crate::error::{Error, Result};
use crate::image::{ImageSlice, KSpaceGrid};
use crate::kspace::{apply_mask, fft2c, make_mask, partition_mask, SampleMask};
use crate::metrics::{psnr, ssim};
use crate::model::{dcct_backward, dcct_forward, dcct_forward_tape, save_checkpoint, ModelConfig, ModelWeights, Parameters};

/// One undersampled target acquisition with its fully sampled reference.
/// `x_gt` is only read by supervised training and by validation.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub slice_id: usize,
    pub y_tag: KSpaceGrid,
    pub m_tag: SampleMask,
    pub x_ref: ImageSlice,
    pub x_gt: Option<ImageSlice>,
}

impl TrainSample {
    /// Retrospectively undersample `target` with a seeded line mask.
    pub fn simulate(
        slice_id: usize,
        target: &ImageSlice,
        reference: &ImageSlice,
        accel: f64,
        center_fraction: f64,
        mask_seed: u64,
    ) -> Result<Self> {
        let m_tag = make_mask(target.dim().0, accel, center_fraction, mask_seed)?;
        let y_tag = apply_mask(&fft2c(target), &m_tag)?;
        Ok(TrainSample {
            slice_id,
            y_tag,
            m_tag,
            x_ref: reference.clone(),
            x_gt: Some(target.clone()),
        })
    }

    pub fn without_ground_truth(mut self) -> Self {
        self.x_gt = None;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub m1: SampleMask,
    pub m2: SampleMask,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ac: f64,
    pub pdc: f64,
}

fn compute(
    sample: &TrainSample,
    partition: Option<&Partition>,
    cfg: &ModelConfig,
    weights: &ModelWeights,
    mode: TrainMode,
    lw: &LossWeights,
    grad: Option<&mut ModelWeights>,
) -> Result<LossBreakdown> {
    let (c_ac, c_pdc) = total_loss_coefficients(mode, lw);
    if mode.is_supervised() {
        let gt = sample
            .x_gt
            .as_ref()
            .ok_or_else(|| Error::Config("supervised training needs ground truth".into()))?;
        let (out, tape) = dcct_forward_tape(&sample.y_tag, &sample.m_tag, &sample.x_ref, cfg, weights)?;
        let (ac, g) = ac_loss_grad(&out.image.pixels, &gt.pixels, lw);
        if let Some(grad) = grad {
            dcct_backward(weights, &tape, &g, grad);
        }
        return Ok(LossBreakdown { total: ac, ac, pdc: 0.0 });
    }

    let p = partition.ok_or_else(|| Error::Param("self-supervised loss needs a partition".into()))?;
    let y1 = apply_mask(&sample.y_tag, &p.m1)?;
    let y2 = apply_mask(&sample.y_tag, &p.m2)?;
    let (out1, tape1) = dcct_forward_tape(&y1, &p.m1, &sample.x_ref, cfg, weights)?;
    let (out2, tape2) = dcct_forward_tape(&y2, &p.m2, &sample.x_ref, cfg, weights)?;
    let (x1, x2) = (&out1.image.pixels, &out2.image.pixels);

    let (ac, g_ac) = ac_loss_grad(x1, x2, lw);
    let (pdc, g1_pdc, g2_pdc) = pdc_loss_grad(x1, x2, &y1.values, &y2.values, &p.m1, &p.m2, lw.pdc_norm);
    let total = c_ac * ac + c_pdc * pdc;
    if let Some(grad) = grad {
        let g1: Array2<f64> = &g_ac * c_ac + &g1_pdc * c_pdc;
        let g2: Array2<f64> = &g_ac * (-c_ac) + &g2_pdc * c_pdc;
        dcct_backward(weights, &tape1, &g1, grad);
        dcct_backward(weights, &tape2, &g2, grad);
    }
    Ok(LossBreakdown { total, ac, pdc })
}

/// Loss of one sample. Self-supervised modes need `partition` and never read
/// `sample.x_gt`; the supervised mode ignores `partition`.
pub fn loss_value(
    sample: &TrainSample,
    partition: Option<&Partition>,
    cfg: &ModelConfig,
    weights: &ModelWeights,
    mode: TrainMode,
    lw: &LossWeights,
) -> Result<LossBreakdown> {
    compute(sample, partition, cfg, weights, mode, lw, None)
}

/// Loss of one sample and its gradient with respect to every parameter.
pub fn loss_and_grad(
    sample: &TrainSample,
    partition: Option<&Partition>,
    cfg: &ModelConfig,
    weights: &ModelWeights,
    mode: TrainMode,
    lw: &LossWeights,
) -> Result<(LossBreakdown, ModelWeights)> {
    let mut grad = ModelWeights::zeros(cfg);
    let loss = compute(sample, partition, cfg, weights, mode, lw, Some(&mut grad))?;
    Ok((loss, grad))
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_add(1));
    rng
}

fn draw_partition(m_tag: &SampleMask, rho: f64, rng: &mut ChaCha8Rng, tcfg: &TrainConfig) -> Result<Partition> {
    let (lo, hi) = tcfg.rho_range;
    let draw = |rng: &mut ChaCha8Rng| if hi > lo { rng.random_range(lo..hi) } else { lo };
    match partition_mask(m_tag, rho, rng.random()) {
        Ok((m1, m2)) => Ok(Partition { m1, m2 }),
        Err(_) => {
            let retry = draw(rng);
            let (m1, m2) = partition_mask(m_tag, retry, rng.random())?;
            Ok(Partition { m1, m2 })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub rho: f64,
    pub loss: LossBreakdown,
}

/// One optimizer step on a batch. Self-supervised modes draw one partition
/// rate per batch, split every acquisition into two disjoint line sets and
/// reconstruct both with shared weights; the supervised mode feeds the full
/// acquisition and compares to ground truth. Deterministic in
/// `(tcfg.seed, step)`.
pub fn selfsup_train_step(
    batch: &[TrainSample],
    cfg: &ModelConfig,
    weights: &mut ModelWeights,
    adam: &mut Adam,
    tcfg: &TrainConfig,
    step: u64,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Param("empty batch".into()));
    }
    let mut rng = step_rng(tcfg.seed, step);
    let (lo, hi) = tcfg.rho_range;
    let rho = if hi > lo { rng.random_range(lo..hi) } else { lo };

    let mut grad = ModelWeights::zeros(cfg);
    let mut sum = LossBreakdown::default();
    for sample in batch {
        let partition = if tcfg.mode.is_supervised() {
            None
        } else {
            Some(draw_partition(&sample.m_tag, rho, &mut rng, tcfg)?)
        };
        let loss = compute(sample, partition.as_ref(), cfg, weights, tcfg.mode, &tcfg.loss, Some(&mut grad))?;
        sum.total += loss.total;
        sum.ac += loss.ac;
        sum.pdc += loss.pdc;
    }
    let n = batch.len() as f64;
    let mut g = grad.to_flat();
    g.iter_mut().for_each(|v| *v /= n);
    let mut p = weights.to_flat();
    adam.step(&mut p, &g);
    weights.assign_flat(&p);
    Ok(StepStats {
        rho,
        loss: LossBreakdown {
            total: sum.total / n,
            ac: sum.ac / n,
            pdc: sum.pdc / n,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub mode: TrainMode,
    pub loss_total: f64,
    pub loss_ac: f64,
    pub loss_pdc: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
}

pub const LOG_CSV_HEADER: &str = "epoch,step,mode,loss_total,loss_ac,loss_pdc,val_psnr,val_ssim";

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.step, r.mode, r.loss_total, r.loss_ac, r.loss_pdc, r.val_psnr, r.val_ssim
        );
    }
    out
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    std::fs::write(path, log_to_csv(rows)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub weights: ModelWeights,
    pub log: Vec<LogRow>,
}

/// Mean PSNR/SSIM of full-acquisition reconstructions on samples that carry
/// ground truth. `NaN` when there are none.
pub fn validate(samples: &[TrainSample], cfg: &ModelConfig, weights: &ModelWeights) -> Result<(f64, f64)> {
    let mut n = 0usize;
    let (mut p, mut s) = (0.0, 0.0);
    for sample in samples {
        let Some(gt) = &sample.x_gt else { continue };
        let out = dcct_forward(&sample.y_tag, &sample.m_tag, &sample.x_ref, cfg, weights)?;
        p += psnr(&out.image, gt)?;
        s += ssim(&out.image, gt)?;
        n += 1;
    }
    if n == 0 {
        return Ok((f64::NAN, f64::NAN));
    }
    Ok((p / n as f64, s / n as f64))
}

/// Epoch loop over shuffled training samples with one log row (and one
/// checkpoint when `checkpoint_dir` is set) per epoch.
pub fn fit(
    train: &[TrainSample],
    val: &[TrainSample],
    cfg: &ModelConfig,
    weights: ModelWeights,
    tcfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<FitResult> {
    if train.is_empty() {
        return Err(Error::Param("empty training set".into()));
    }
    cfg.validate()?;
    tcfg.validate()?;
    weights.check_config(cfg)?;
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut weights = weights;
    let mut adam = Adam::new(weights.param_count(), tcfg.lr, tcfg.beta1, tcfg.beta2);
    let mut log = Vec::with_capacity(tcfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    shuffle_rng.set_stream(u64::MAX);

    for epoch in 0..tcfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossBreakdown::default();
        let mut n_steps = 0usize;
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<TrainSample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let stats = selfsup_train_step(&batch, cfg, &mut weights, &mut adam, tcfg, step)?;
            step += 1;
            n_steps += 1;
            sum.total += stats.loss.total;
            sum.ac += stats.loss.ac;
            sum.pdc += stats.loss.pdc;
        }
        let (val_psnr, val_ssim) = validate(val, cfg, &weights)?;
        let n = n_steps as f64;
        log.push(LogRow {
            epoch: epoch + 1,
            step,
            mode: tcfg.mode,
            loss_total: sum.total / n,
            loss_ac: sum.ac / n,
            loss_pdc: sum.pdc / n,
            val_psnr,
            val_ssim,
        });
        if let Some(dir) = checkpoint_dir {
            save_checkpoint(&dir.join(format!("epoch_{:04}.json", epoch + 1)), cfg, &weights)?;
        }
    }
    Ok(FitResult { weights, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::make_samples;
    use crate::image::Contrast;
    use crate::phantom::simulate_dataset;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_cascades: 2,
            n_swintb_per_swinrn: 1,
            n_swintl_per_swintb: 2,
            embed_dim: 8,
            window_size: 8,
            n_heads: 2,
            mlp_hidden: 12,
            ..ModelConfig::default()
        }
    }

    fn samples(n_subjects: usize) -> Vec<TrainSample> {
        let data = simulate_dataset(n_subjects, 1, 32, 32, 3).unwrap();
        let idx: Vec<usize> = (0..data.len()).collect();
        make_samples(&data, &idx, Contrast::T2, 4.0, 0.08, 3).unwrap()
    }

    fn tcfg(epochs: usize, mode: TrainMode) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            lr: 1e-3,
            seed: 4,
            mode,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let cfg = ModelConfig {
            window_size: 4,
            ..tiny()
        };
        let weights = ModelWeights::init(&cfg, 1).unwrap();
        let sample = &samples(1)[0];
        let (m1, m2) = partition_mask(&sample.m_tag, 0.5, 2).unwrap();
        let part = Partition { m1, m2 };
        let lw = LossWeights::default();
        for mode in [TrainMode::SelfsupDual, TrainMode::Supervised] {
            let (_, grad) = loss_and_grad(sample, Some(&part), &cfg, &weights, mode, &lw).unwrap();
            let analytic = grad.to_flat();
            let base = weights.to_flat();
            let eps = 1e-5;
            for (name, offset, len) in weights.layout().into_iter().step_by(3) {
                let i = offset + len / 2;
                let eval = |delta: f64| {
                    let mut flat = base.clone();
                    flat[i] += delta;
                    let mut w = weights.clone();
                    w.assign_flat(&flat);
                    loss_value(sample, Some(&part), &cfg, &w, mode, &lw).unwrap().total
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic[i];
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
                assert!(rel < 1e-3, "{mode} {name}: analytic {a}, numeric {fd}");
            }
        }
    }

    #[test]
    fn self_supervised_loss_never_reads_ground_truth() {
        let cfg = tiny();
        let weights = ModelWeights::init(&cfg, 2).unwrap();
        let sample = samples(1).remove(0);
        let (m1, m2) = partition_mask(&sample.m_tag, 0.4, 1).unwrap();
        let part = Partition { m1, m2 };
        let blind = sample.clone().without_ground_truth();
        let lw = LossWeights::default();
        for mode in [TrainMode::SelfsupDual, TrainMode::SelfsupImageOnly, TrainMode::SelfsupKspaceOnly] {
            let a = loss_and_grad(&sample, Some(&part), &cfg, &weights, mode, &lw).unwrap();
            let b = loss_and_grad(&blind, Some(&part), &cfg, &weights, mode, &lw).unwrap();
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1);
        }
        assert!(loss_value(&blind, None, &cfg, &weights, TrainMode::Supervised, &lw).is_err());
        assert!(loss_value(&sample, None, &cfg, &weights, TrainMode::SelfsupDual, &lw).is_err());
    }

    #[test]
    fn swapping_the_partition_halves_leaves_the_loss_unchanged() {
        let cfg = tiny();
        let weights = ModelWeights::init(&cfg, 6).unwrap();
        let sample = samples(1).remove(0);
        let (m1, m2) = partition_mask(&sample.m_tag, 0.3, 8).unwrap();
        let a = Partition { m1: m1.clone(), m2: m2.clone() };
        let b = Partition { m1: m2, m2: m1 };
        let lw = LossWeights::default();
        for mode in [TrainMode::SelfsupDual, TrainMode::SelfsupImageOnly, TrainMode::SelfsupKspaceOnly] {
            let la = loss_value(&sample, Some(&a), &cfg, &weights, mode, &lw).unwrap();
            let lb = loss_value(&sample, Some(&b), &cfg, &weights, mode, &lw).unwrap();
            for (x, y) in [(la.total, lb.total), (la.ac, lb.ac), (la.pdc, lb.pdc)] {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{mode}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn drawn_partitions_split_the_acquisition() {
        let sample = samples(1).remove(0);
        let cfg = tcfg(1, TrainMode::SelfsupDual);
        for step in 0..20 {
            let mut rng = step_rng(cfg.seed, step);
            let rho = rng.random_range(0.2..0.8);
            let p = draw_partition(&sample.m_tag, rho, &mut rng, &cfg).unwrap();
            for r in 0..sample.m_tag.height() {
                assert!(!(p.m1.is_sampled(r) && p.m2.is_sampled(r)));
                assert_eq!(p.m1.is_sampled(r) || p.m2.is_sampled(r), sample.m_tag.is_sampled(r));
            }
        }
    }

    #[test]
    fn self_supervised_steps_lower_the_loss() {
        let cfg = tiny();
        let sample = samples(1).remove(0).without_ground_truth();
        let t = tcfg(1, TrainMode::SelfsupDual);
        let lw = LossWeights::default();
        // Score on fixed partitions so the per-step draws do not decide the outcome.
        let probes: Vec<Partition> = (0..6)
            .map(|i| {
                let (m1, m2) = partition_mask(&sample.m_tag, 0.3 + 0.08 * i as f64, 100 + i).unwrap();
                Partition { m1, m2 }
            })
            .collect();
        let score = |w: &ModelWeights| -> f64 {
            probes
                .iter()
                .map(|p| loss_value(&sample, Some(p), &cfg, w, t.mode, &lw).unwrap().total)
                .sum::<f64>()
        };
        let mut weights = ModelWeights::init(&cfg, 9).unwrap();
        let mut adam = Adam::new(weights.to_flat().len(), t.lr, t.beta1, t.beta2);
        let mut after_10 = f64::NAN;
        for step in 0..200 {
            selfsup_train_step(std::slice::from_ref(&sample), &cfg, &mut weights, &mut adam, &t, step).unwrap();
            if step == 9 {
                after_10 = score(&weights);
            }
        }
        let after_200 = score(&weights);
        assert!(after_200 < after_10, "loss after 200 steps {after_200} vs after 10 steps {after_10}");
    }

    #[test]
    fn zero_epochs_return_initial_weights() {
        let cfg = tiny();
        let init = ModelWeights::init(&cfg, 5).unwrap();
        let out = fit(&samples(2), &[], &cfg, init.clone(), &tcfg(0, TrainMode::SelfsupDual), None).unwrap();
        assert_eq!(out.weights, init);
        assert!(out.log.is_empty());
    }

    #[test]
    fn fit_is_deterministic_and_logs_every_epoch() {
        let cfg = tiny();
        let data = samples(3);
        let init = ModelWeights::init(&cfg, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let t = tcfg(2, TrainMode::SelfsupDual);
        let a = fit(&data[..2], &data[2..], &cfg, init.clone(), &t, Some(dir.path())).unwrap();
        let b = fit(&data[..2], &data[2..], &cfg, init.clone(), &t, None).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.log, b.log);
        assert_ne!(a.weights, init);
        assert_eq!(a.log.len(), 2);
        assert_eq!(a.log[1].step, 2);
        assert!(a.log.iter().all(|r| r.loss_total.is_finite() && r.val_psnr.is_finite()));
        assert!(dir.path().join("epoch_0002.json").exists());

        let csv = log_to_csv(&a.log);
        assert_eq!(csv.lines().next(), Some(LOG_CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);

        let other_seed = TrainConfig { seed: 5, ..t };
        let c = fit(&data[..2], &data[2..], &cfg, init, &other_seed, None).unwrap();
        assert_ne!(c.weights, a.weights);
    }

    #[test]
    fn supervised_mode_trains() {
        let cfg = tiny();
        let data = samples(2);
        let init = ModelWeights::init(&cfg, 7).unwrap();
        let out = fit(&data, &[], &cfg, init, &tcfg(1, TrainMode::Supervised), None).unwrap();
        assert_eq!(out.log[0].loss_pdc, 0.0);
        assert!(out.log[0].val_psnr.is_nan());
        let blind: Vec<TrainSample> = data.into_iter().map(TrainSample::without_ground_truth).collect();
        let init = ModelWeights::init(&cfg, 7).unwrap();
        assert!(fit(&blind, &[], &cfg, init, &tcfg(1, TrainMode::Supervised), None).is_err());
    }
}
