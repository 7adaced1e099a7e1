//! Transformer layers and blocks.

use ndarray::Array2;
use rand::Rng;

use super::attention::{Geometry, WindowAttention};
use super::layers::{gelu, gelu_grad, Conv3x3, LayerNorm, LayerNormCache, Linear};
use super::window::{gather_rows, scatter_rows, shift_region_labels, window_order, FeatureMap};
use super::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SwinLayerWeights {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

crate::impl_parameters!(SwinLayerWeights { norm1, attn, norm2, fc1, fc2 });

impl SwinLayerWeights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let c = cfg.embed_dim;
        SwinLayerWeights {
            norm1: LayerNorm::zeros(c),
            attn: WindowAttention::zeros(c, cfg.window_size, cfg.n_heads),
            norm2: LayerNorm::zeros(c),
            fc1: Linear::zeros(c, cfg.mlp_hidden),
            fc2: Linear::zeros(cfg.mlp_hidden, c),
        }
    }

    pub fn init<R: Rng>(rng: &mut R, cfg: &ModelConfig) -> Self {
        let c = cfg.embed_dim;
        SwinLayerWeights {
            norm1: LayerNorm::new(c),
            attn: WindowAttention::init(rng, c, cfg.window_size, cfg.n_heads),
            norm2: LayerNorm::new(c),
            fc1: Linear::init(rng, c, cfg.mlp_hidden),
            fc2: Linear::init(rng, cfg.mlp_hidden, c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwinBlockWeights {
    pub layers: Vec<SwinLayerWeights>,
    pub fusion: Conv3x3,
}

crate::impl_parameters!(SwinBlockWeights { layers, fusion });

impl SwinBlockWeights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        SwinBlockWeights {
            layers: (0..cfg.n_swintl_per_swintb).map(|_| SwinLayerWeights::zeros(cfg)).collect(),
            fusion: Conv3x3::zeros(cfg.embed_dim, cfg.embed_dim),
        }
    }

    pub fn init<R: Rng>(rng: &mut R, cfg: &ModelConfig) -> Self {
        SwinBlockWeights {
            layers: (0..cfg.n_swintl_per_swintb).map(|_| SwinLayerWeights::init(rng, cfg)).collect(),
            fusion: Conv3x3::init(rng, cfg.embed_dim, cfg.embed_dim),
        }
    }
}

pub struct SwinLayerCache {
    shift: usize,
    order: Vec<usize>,
    labels: Option<Vec<u8>>,
    ln1: LayerNormCache,
    windowed: Array2<f64>,
    qkv: Array2<f64>,
    ctx: Array2<f64>,
    ln2: LayerNormCache,
    normed2: Array2<f64>,
    hidden: Array2<f64>,
    activated: Array2<f64>,
}

impl SwinLayerCache {
    pub fn shift(&self) -> usize {
        self.shift
    }
}

/// Half-window shift, disabled when the map fits in a single window.
pub fn shift_for(h: usize, w: usize, m: usize, shifted: bool) -> usize {
    if shifted && h > m && w > m {
        m / 2
    } else {
        0
    }
}

/// One transformer layer: `z + (S)W-MSA(LN(z))` followed by `+ MLP(LN(.))`.
pub fn swintl_forward(f: &FeatureMap, w: &SwinLayerWeights, shifted: bool) -> Result<(FeatureMap, SwinLayerCache)> {
    let m = w.attn.window_size();
    let c = f.channels();
    if !f.h.is_multiple_of(m) || !f.w.is_multiple_of(m) {
        return Err(Error::Shape(format!("{}x{} not divisible by window {m}", f.h, f.w)));
    }
    if c != w.norm1.gamma.len() {
        return Err(Error::Shape(format!("{c} channels, layer expects {}", w.norm1.gamma.len())));
    }
    if !c.is_multiple_of(w.attn.n_heads()) {
        return Err(Error::Config(format!("channels {c} not divisible by {} heads", w.attn.n_heads())));
    }
    let shift = shift_for(f.h, f.w, m, shifted);
    let order = window_order(f.h, f.w, m, shift);
    let labels = (shift > 0).then(|| shift_region_labels(f.h, f.w, m, shift));
    let geom = Geometry::new(m, w.attn.n_heads(), c);

    let (normed, ln1) = w.norm1.forward(&f.data);
    let windowed = gather_rows(&normed, &order);
    let qkv = w.attn.qkv.forward(&windowed);
    let ctx = geom.forward(&qkv, &w.attn.rel_bias, labels.as_deref());
    let attn_out = scatter_rows(&w.attn.proj.forward(&ctx), &order);
    let z_bar = &f.data + &attn_out;

    let (normed2, ln2) = w.norm2.forward(&z_bar);
    let hidden = w.fc1.forward(&normed2);
    let activated = hidden.mapv(gelu);
    let out = &z_bar + &w.fc2.forward(&activated);

    let cache = SwinLayerCache {
        shift,
        order,
        labels,
        ln1,
        windowed,
        qkv,
        ctx,
        ln2,
        normed2,
        hidden,
        activated,
    };
    Ok((FeatureMap { h: f.h, w: f.w, data: out }, cache))
}

pub fn swintl_backward(w: &SwinLayerWeights, cache: &SwinLayerCache, dout: &Array2<f64>, grad: &mut SwinLayerWeights) -> Array2<f64> {
    let m = w.attn.window_size();
    let geom = Geometry::new(m, w.attn.n_heads(), dout.ncols());

    let dact = w.fc2.backward(&cache.activated, dout, &mut grad.fc2);
    let mut dhidden = dact;
    dhidden.zip_mut_with(&cache.hidden, |g, &x| *g *= gelu_grad(x));
    let dnormed2 = w.fc1.backward(&cache.normed2, &dhidden, &mut grad.fc1);
    let dz_bar = dout + &w.norm2.backward(&cache.ln2, &dnormed2, &mut grad.norm2);

    let dproj_out = gather_rows(&dz_bar, &cache.order);
    let dctx = w.attn.proj.backward(&cache.ctx, &dproj_out, &mut grad.attn.proj);
    let (dqkv, dbias) = geom.backward(&cache.qkv, &w.attn.rel_bias, cache.labels.as_deref(), &dctx);
    grad.attn.rel_bias += &dbias;
    let dwindowed = w.attn.qkv.backward(&cache.windowed, &dqkv, &mut grad.attn.qkv);
    let dnormed = scatter_rows(&dwindowed, &cache.order);
    dz_bar + w.norm1.backward(&cache.ln1, &dnormed, &mut grad.norm1)
}

pub struct SwinBlockCache {
    layers: Vec<SwinLayerCache>,
    last: Array2<f64>,
}

impl SwinBlockCache {
    /// Shift applied by each layer, in call order.
    pub fn shifts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.shift).collect()
    }
}

/// Layers alternate regular and shifted windows (regular first), then a
/// 3x3 fusion convolution and the block residual.
pub fn swintb_forward(f: &FeatureMap, w: &SwinBlockWeights) -> Result<(FeatureMap, SwinBlockCache)> {
    let mut x = f.clone();
    let mut caches = Vec::with_capacity(w.layers.len());
    for (j, layer) in w.layers.iter().enumerate() {
        let (next, cache) = swintl_forward(&x, layer, j % 2 == 1)?;
        caches.push(cache);
        x = next;
    }
    let fused = w.fusion.forward(&x.data, f.h, f.w);
    let out = FeatureMap {
        h: f.h,
        w: f.w,
        data: &f.data + &fused,
    };
    Ok((out, SwinBlockCache { layers: caches, last: x.data }))
}

pub fn swintb_backward(
    w: &SwinBlockWeights,
    cache: &SwinBlockCache,
    h: usize,
    wd: usize,
    dout: &Array2<f64>,
    grad: &mut SwinBlockWeights,
) -> Array2<f64> {
    let mut dx = w.fusion.backward(&cache.last, h, wd, dout, &mut grad.fusion);
    for ((layer, lc), lg) in w.layers.iter().zip(&cache.layers).zip(grad.layers.iter_mut()).rev() {
        dx = swintl_backward(layer, lc, &dx, lg);
    }
    dx + dout
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            n_heads: 2,
            mlp_hidden: 16,
            window_size: 4,
            n_swintl_per_swintb: 4,
            ..ModelConfig::default()
        }
    }

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
        FeatureMap::new(h, w, Array2::from_shape_simple_fn((h * w, c), || rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn layer_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ModelConfig::default();
        let w = SwinLayerWeights::init(&mut rng, &cfg);
        let f = random_map(&mut rng, 16, 16, 32);
        for shifted in [false, true] {
            let (out, _) = swintl_forward(&f, &w, shifted).unwrap();
            assert_eq!(out.data.dim(), (256, 32));
        }
    }

    #[test]
    fn zero_branches_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = cfg();
        let mut w = SwinLayerWeights::init(&mut rng, &cfg);
        w.attn.proj = Linear::zeros(8, 8);
        w.fc2 = Linear::zeros(16, 8);
        let f = random_map(&mut rng, 8, 8, 8);
        for shifted in [false, true] {
            assert_eq!(swintl_forward(&f, &w, shifted).unwrap().0, f);
        }

        let mut block = SwinBlockWeights::init(&mut rng, &cfg);
        block.fusion = Conv3x3::zeros(8, 8);
        assert_eq!(swintb_forward(&f, &block).unwrap().0, f);
    }

    #[test]
    fn block_alternates_regular_and_shifted() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = cfg();
        let block = SwinBlockWeights::init(&mut rng, &cfg);
        let f = random_map(&mut rng, 8, 8, 8);
        let (out, cache) = swintb_forward(&f, &block).unwrap();
        assert_eq!(out.data.dim(), f.data.dim());
        assert_eq!(cache.shifts(), vec![0, 2, 0, 2]);
    }

    #[test]
    fn bad_window_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = SwinLayerWeights::init(&mut rng, &cfg());
        let f = random_map(&mut rng, 6, 8, 8);
        assert!(swintl_forward(&f, &w, false).is_err());
    }
}
