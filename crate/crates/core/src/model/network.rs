//! The reconstruction network and its cascade with data-consistency layers.

use ndarray::Array2;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::Conv3x3;
use super::params::Parameters;
use super::swin::{swintb_backward, swintb_forward, SwinBlockCache, SwinBlockWeights};
use super::window::FeatureMap;
use super::ModelConfig;
use crate::error::{check_same_shape, Error, Result};
use crate::image::{ImageSlice, KSpaceGrid};
use crate::kspace::{
    data_consistency_backward, data_consistency_complex, kf_condition, magnitude, magnitude_backward, zero_fill_recon,
    SampleMask,
};

/// Weights of one reconstruction network: feature extraction conv, the
/// transformer blocks, the deep-feature fusion conv and the output conv.
#[derive(Debug, Clone, PartialEq)]
pub struct SwinRnWeights {
    pub ife: Conv3x3,
    pub blocks: Vec<SwinBlockWeights>,
    pub dfe: Conv3x3,
    pub ir: Conv3x3,
}

crate::impl_parameters!(SwinRnWeights { ife, blocks, dfe, ir });

impl SwinRnWeights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let c = cfg.embed_dim;
        SwinRnWeights {
            ife: Conv3x3::zeros(2, c),
            blocks: (0..cfg.n_swintb_per_swinrn).map(|_| SwinBlockWeights::zeros(cfg)).collect(),
            dfe: Conv3x3::zeros(c, c),
            ir: Conv3x3::zeros(c, 1),
        }
    }

    pub fn init(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let c = cfg.embed_dim;
        let ife = Conv3x3::init(rng, 2, c);
        let blocks = (0..cfg.n_swintb_per_swinrn).map(|_| SwinBlockWeights::init(rng, cfg)).collect();
        let dfe = Conv3x3::init(rng, c, c);
        let mut ir = Conv3x3::init(rng, c, 1);
        ir.bias.fill(0.0);
        SwinRnWeights { ife, blocks, dfe, ir }
    }

    pub fn window_size(&self) -> usize {
        self.blocks
            .first()
            .and_then(|b| b.layers.first())
            .map(|l| l.attn.window_size())
            .unwrap_or(1)
    }
}

/// All learnable parameters. Holds one network when weights are shared
/// across cascades, otherwise one per cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub networks: Vec<SwinRnWeights>,
}

crate::impl_parameters!(ModelWeights { networks });

impl ModelWeights {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ModelWeights {
            networks: (0..cfg.n_weight_sets()).map(|_| SwinRnWeights::init(&mut rng, cfg)).collect(),
        })
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        ModelWeights {
            networks: (0..cfg.n_weight_sets()).map(|_| SwinRnWeights::zeros(cfg)).collect(),
        }
    }

    pub fn network(&self, cascade: usize) -> &SwinRnWeights {
        &self.networks[cascade.min(self.networks.len() - 1)]
    }

    fn network_index(&self, cascade: usize) -> usize {
        cascade.min(self.networks.len() - 1)
    }

    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        if self.networks.len() != cfg.n_weight_sets() {
            return Err(Error::Config(format!(
                "weights hold {} networks, configuration needs {}",
                self.networks.len(),
                cfg.n_weight_sets()
            )));
        }
        Ok(())
    }
}

struct Padding {
    h: usize,
    w: usize,
    hp: usize,
    wp: usize,
    top: usize,
    left: usize,
}

impl Padding {
    fn new(h: usize, w: usize, m: usize) -> Self {
        let hp = h.div_ceil(m) * m;
        let wp = w.div_ceil(m) * m;
        Padding {
            h,
            w,
            hp,
            wp,
            top: (hp - h) / 2,
            left: (wp - w) / 2,
        }
    }

    /// Stack images as channels of a padded `(Hp*Wp, k)` feature matrix.
    fn pad(&self, images: &[&Array2<f64>]) -> Array2<f64> {
        let mut out = Array2::zeros((self.hp * self.wp, images.len()));
        for (k, img) in images.iter().enumerate() {
            for i in 0..self.h {
                for j in 0..self.w {
                    out[[(i + self.top) * self.wp + j + self.left, k]] = img[[i, j]];
                }
            }
        }
        out
    }

    fn crop(&self, x: &Array2<f64>, channel: usize) -> Array2<f64> {
        Array2::from_shape_fn((self.h, self.w), |(i, j)| {
            x[[(i + self.top) * self.wp + j + self.left, channel]]
        })
    }
}

pub struct SwinRnCache {
    pad: Padding,
    input: Array2<f64>,
    blocks: Vec<SwinBlockCache>,
    deep: Array2<f64>,
    summed: Array2<f64>,
}

pub(crate) fn swinrn_forward_raw(
    x_init: &Array2<f64>,
    x_ref: &Array2<f64>,
    w: &SwinRnWeights,
) -> Result<(Array2<f64>, SwinRnCache)> {
    check_same_shape("swinrn", x_init.shape(), x_ref.shape())?;
    let (h, wd) = x_init.dim();
    let pad = Padding::new(h, wd, w.window_size());
    let (hp, wp) = (pad.hp, pad.wp);
    let input = pad.pad(&[x_init, x_ref]);
    let shallow = w.ife.forward(&input, hp, wp);

    let mut feat = FeatureMap::new(hp, wp, shallow.clone())?;
    let mut blocks = Vec::with_capacity(w.blocks.len());
    for block in &w.blocks {
        let (next, cache) = swintb_forward(&feat, block)?;
        blocks.push(cache);
        feat = next;
    }
    let deep = feat.data;
    let summed = w.dfe.forward(&deep, hp, wp) + &shallow;
    let out = w.ir.forward(&summed, hp, wp);
    let image = pad.crop(&out, 0);
    Ok((
        image,
        SwinRnCache {
            pad,
            input,
            blocks,
            deep,
            summed,
        },
    ))
}

/// Returns the gradient with respect to the first input image.
pub(crate) fn swinrn_backward_raw(
    w: &SwinRnWeights,
    cache: &SwinRnCache,
    dout: &Array2<f64>,
    grad: &mut SwinRnWeights,
) -> Array2<f64> {
    let (hp, wp) = (cache.pad.hp, cache.pad.wp);
    let dout_p = cache.pad.pad(&[dout]);
    let dsummed = w.ir.backward(&cache.summed, hp, wp, &dout_p, &mut grad.ir);
    let mut dfeat = w.dfe.backward(&cache.deep, hp, wp, &dsummed, &mut grad.dfe);
    for ((block, bc), bg) in w.blocks.iter().zip(&cache.blocks).zip(grad.blocks.iter_mut()).rev() {
        dfeat = swintb_backward(block, bc, hp, wp, &dfeat, bg);
    }
    let dshallow = dfeat + &dsummed;
    let dinput = w.ife.backward(&cache.input, hp, wp, &dshallow, &mut grad.ife);
    cache.pad.crop(&dinput, 0)
}

/// One reconstruction network over the channel-stacked `(x_init, x_ref)`.
/// Inputs whose sides are not multiples of the window size are zero-padded
/// symmetrically and the output is cropped back.
pub fn swinrn_forward(x_init: &ImageSlice, x_ref: &ImageSlice, w: &SwinRnWeights) -> Result<ImageSlice> {
    let (out, _) = swinrn_forward_raw(&x_init.pixels, &x_ref.pixels, w)?;
    Ok(ImageSlice::new(out, x_init.contrast))
}

/// Output of the cascade: the magnitude image and the complex image of the
/// last data-consistency layer it was taken from.
#[derive(Debug, Clone)]
pub struct DcctOutput {
    pub image: ImageSlice,
    pub complex: Array2<Complex64>,
}

struct CascadeStep {
    net: SwinRnCache,
    complex: Array2<Complex64>,
}

/// Everything the reverse pass of [`dcct_forward_tape`] needs.
pub struct DcctTape {
    mask: SampleMask,
    steps: Vec<CascadeStep>,
}

fn initial_estimate(y: &KSpaceGrid, m: &SampleMask, x_ref: &ImageSlice, cfg: &ModelConfig) -> Result<ImageSlice> {
    if cfg.use_kf {
        kf_condition(y, m, x_ref)
    } else {
        zero_fill_recon(y, m)
    }
}

pub fn dcct_forward_tape(
    y: &KSpaceGrid,
    m: &SampleMask,
    x_ref: &ImageSlice,
    cfg: &ModelConfig,
    weights: &ModelWeights,
) -> Result<(DcctOutput, DcctTape)> {
    weights.check_config(cfg)?;
    check_same_shape("dcct", y.values.shape(), x_ref.pixels.shape())?;
    let init = initial_estimate(y, m, x_ref, cfg)?;
    let cond = if cfg.use_cc {
        x_ref.pixels.clone()
    } else {
        Array2::zeros(x_ref.dim())
    };

    let mut x = init.pixels;
    let mut steps = Vec::with_capacity(cfg.n_cascades);
    let mut complex = Array2::zeros(x.dim());
    for c in 0..cfg.n_cascades {
        let (r, net) = swinrn_forward_raw(&x, &cond, weights.network(c))?;
        complex = data_consistency_complex(&r, y, m)?;
        x = magnitude(&complex);
        steps.push(CascadeStep {
            net,
            complex: complex.clone(),
        });
    }
    let out = DcctOutput {
        image: ImageSlice::new(x, y.contrast),
        complex,
    };
    Ok((out, DcctTape { mask: m.clone(), steps }))
}

/// Cascade of reconstruction networks with a data-consistency projection
/// after each one. The first input is the k-space-filled estimate when
/// `use_kf` is set and the zero-filled one otherwise; the reference image is
/// concatenated to every network input when `use_cc` is set.
pub fn dcct_forward(
    y: &KSpaceGrid,
    m: &SampleMask,
    x_ref: &ImageSlice,
    cfg: &ModelConfig,
    weights: &ModelWeights,
) -> Result<DcctOutput> {
    dcct_forward_tape(y, m, x_ref, cfg, weights).map(|(out, _)| out)
}

/// Accumulate parameter gradients of a scalar loss given `dL/d image`.
pub fn dcct_backward(weights: &ModelWeights, tape: &DcctTape, d_image: &Array2<f64>, grad: &mut ModelWeights) {
    let mut dx = d_image.clone();
    for (c, step) in tape.steps.iter().enumerate().rev() {
        let dz = magnitude_backward(&step.complex, &dx);
        let dr = data_consistency_backward(&dz, &tape.mask);
        let k = weights.network_index(c);
        dx = swinrn_backward_raw(&weights.networks[k], &step.net, &dr, &mut grad.networks[k]);
    }
}

/// Gradient of a scalar loss w.r.t. the network output image for a single
/// network, used by tests and tools that probe one network in isolation.
pub fn swinrn_gradients(
    x_init: &ImageSlice,
    x_ref: &ImageSlice,
    w: &SwinRnWeights,
    d_out: &Array2<f64>,
) -> Result<(SwinRnWeights, Array2<f64>)> {
    let (_, cache) = swinrn_forward_raw(&x_init.pixels, &x_ref.pixels, w)?;
    let mut grad = w.clone();
    grad.zero_();
    let dx = swinrn_backward_raw(w, &cache, d_out, &mut grad);
    Ok((grad, dx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Contrast;
    use crate::kspace::{apply_mask, fft2c, fft2c_complex, make_mask};
    use rand::Rng;

    fn tiny(n_cascades: usize, shared: bool) -> ModelConfig {
        ModelConfig {
            n_cascades,
            n_swintb_per_swinrn: 1,
            n_swintl_per_swintb: 2,
            embed_dim: 8,
            window_size: 4,
            n_heads: 2,
            mlp_hidden: 12,
            share_weights_across_cascades: shared,
            use_kf: true,
            use_cc: true,
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, contrast: Contrast) -> ImageSlice {
        ImageSlice::new(Array2::from_shape_simple_fn((h, w), || rng.random_range(0.0..1.0)), contrast)
    }

    struct Problem {
        y: KSpaceGrid,
        m: SampleMask,
        x_ref: ImageSlice,
    }

    fn problem(seed: u64, h: usize, w: usize) -> Problem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_image(&mut rng, h, w, Contrast::T2);
        let x_ref = random_image(&mut rng, h, w, Contrast::PD);
        let m = make_mask(h, 4.0, 0.125, seed).unwrap();
        Problem {
            y: apply_mask(&fft2c(&gt), &m).unwrap(),
            m,
            x_ref,
        }
    }

    /// Central differences on a few entries of every tensor.
    fn check_gradients(cfg: &ModelConfig, weights: &ModelWeights, p: &Problem) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (h, w) = p.x_ref.dim();
        let probe = Array2::from_shape_simple_fn((h, w), || rng.random_range(-1.0..1.0));
        let loss = |wts: &ModelWeights| {
            let out = dcct_forward(&p.y, &p.m, &p.x_ref, cfg, wts).unwrap();
            (&out.image.pixels * &probe).sum()
        };
        let (_, tape) = dcct_forward_tape(&p.y, &p.m, &p.x_ref, cfg, weights).unwrap();
        let mut grad = ModelWeights::zeros(cfg);
        dcct_backward(weights, &tape, &probe, &mut grad);
        let analytic = grad.to_flat();
        let base = weights.to_flat();
        let eps = 1e-5;
        for (name, offset, len) in weights.layout() {
            for _ in 0..2 {
                let i = offset + rng.random_range(0..len);
                let mut plus = base.clone();
                plus[i] += eps;
                let mut minus = base.clone();
                minus[i] -= eps;
                let mut wp = weights.clone();
                wp.assign_flat(&plus);
                let mut wm = weights.clone();
                wm.assign_flat(&minus);
                let fd = (loss(&wp) - loss(&wm)) / (2.0 * eps);
                let a = analytic[i];
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
                assert!(rel < 1e-3, "{name}[{}]: analytic {a}, numeric {fd}", i - offset);
            }
        }
    }

    #[test]
    fn cascade_gradients_match_finite_differences() {
        let cfg = tiny(2, false);
        let weights = ModelWeights::init(&cfg, 5).unwrap();
        check_gradients(&cfg, &weights, &problem(1, 16, 16));
    }

    #[test]
    fn shared_cascade_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            use_kf: false,
            ..tiny(2, true)
        };
        let weights = ModelWeights::init(&cfg, 6).unwrap();
        check_gradients(&cfg, &weights, &problem(2, 12, 16));
    }

    #[test]
    fn output_bias_gradient_of_mean_is_one() {
        let cfg = tiny(1, true);
        let weights = ModelWeights::init(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_image(&mut rng, 16, 16, Contrast::T2);
        let r = random_image(&mut rng, 16, 16, Contrast::PD);
        let d = Array2::from_elem((16, 16), 1.0 / 256.0);
        let (grad, _) = swinrn_gradients(&x, &r, &weights.networks[0], &d).unwrap();
        assert!((grad.ir.bias[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_deep_path_leaves_shallow_features_only() {
        let cfg = tiny(1, true);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut w = SwinRnWeights::init(&mut rng, &cfg);
        w.dfe = Conv3x3::zeros(8, 8);
        w.blocks = vec![SwinBlockWeights::zeros(&cfg)];
        let x = random_image(&mut rng, 16, 16, Contrast::T2);
        let r = random_image(&mut rng, 16, 16, Contrast::PD);
        let out = swinrn_forward(&x, &r, &w).unwrap();

        let mut input = Array2::zeros((256, 2));
        for (k, img) in [&x, &r].into_iter().enumerate() {
            for (dst, &src) in input.column_mut(k).iter_mut().zip(img.pixels.iter()) {
                *dst = src;
            }
        }
        let expected = w.ir.forward(&w.ife.forward(&input, 16, 16), 16, 16);
        let err = out
            .pixels
            .iter()
            .zip(expected.iter())
            .fold(0.0_f64, |a, (p, q)| a.max((p - q).abs()));
        assert!(err < 1e-12);
    }

    #[test]
    fn non_multiple_sizes_are_padded_and_cropped() {
        let cfg = tiny(1, true);
        let weights = ModelWeights::init(&cfg, 10).unwrap();
        let p = problem(3, 18, 13);
        let out = dcct_forward(&p.y, &p.m, &p.x_ref, &cfg, &weights).unwrap();
        assert_eq!(out.image.dim(), (18, 13));
        assert!(out.image.is_finite());
    }

    #[test]
    fn output_is_consistent_with_measurements() {
        let cfg = tiny(3, true);
        let weights = ModelWeights::init(&cfg, 11).unwrap();
        let p = problem(4, 16, 16);
        let out = dcct_forward(&p.y, &p.m, &p.x_ref, &cfg, &weights).unwrap();
        let k = fft2c_complex(&out.complex);
        let scale = p.y.norm();
        for i in p.m.sampled_rows() {
            for j in 0..16 {
                assert!((k[[i, j]] - p.y.values[[i, j]]).norm() <= 1e-5 * scale);
            }
        }
        assert!(out.image.pixels.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn shared_parameter_count_is_independent_of_cascades() {
        let counts: Vec<usize> = (1..=4)
            .map(|n| ModelWeights::init(&tiny(n, true), 0).unwrap().param_count())
            .collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]));
        let separate = ModelWeights::init(&tiny(3, false), 0).unwrap().param_count();
        assert_eq!(separate, 3 * counts[0]);
    }

    #[test]
    fn reference_is_ignored_without_conditioning() {
        let cfg = ModelConfig {
            use_kf: false,
            use_cc: false,
            ..tiny(2, true)
        };
        let weights = ModelWeights::init(&cfg, 12).unwrap();
        let p = problem(5, 16, 16);
        let other_ref = problem(6, 16, 16).x_ref;
        let a = dcct_forward(&p.y, &p.m, &p.x_ref, &cfg, &weights).unwrap();
        let b = dcct_forward(&p.y, &p.m, &other_ref, &cfg, &weights).unwrap();
        assert_eq!(a.image, b.image);

        let conditioned = ModelConfig { use_cc: true, ..cfg };
        let c = dcct_forward(&p.y, &p.m, &p.x_ref, &conditioned, &weights).unwrap();
        let d = dcct_forward(&p.y, &p.m, &other_ref, &conditioned, &weights).unwrap();
        assert_ne!(c.image, d.image);
    }

    #[test]
    fn mismatched_weights_are_rejected() {
        let weights = ModelWeights::init(&tiny(2, false), 0).unwrap();
        let p = problem(7, 16, 16);
        assert!(dcct_forward(&p.y, &p.m, &p.x_ref, &tiny(3, false), &weights).is_err());
    }
}
