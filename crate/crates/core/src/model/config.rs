use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of the cascaded reconstructor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_cascades: usize,
    pub n_swintb_per_swinrn: usize,
    /// Transformer layers per block; consecutive layers alternate regular and
    /// shifted windows.
    pub n_swintl_per_swintb: usize,
    pub embed_dim: usize,
    pub window_size: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub share_weights_across_cascades: bool,
    pub use_kf: bool,
    pub use_cc: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_cascades: 3,
            n_swintb_per_swinrn: 4,
            n_swintl_per_swintb: 4,
            embed_dim: 32,
            window_size: 8,
            n_heads: 4,
            mlp_hidden: 64,
            share_weights_across_cascades: true,
            use_kf: true,
            use_cc: true,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration: 16 channels, one block of two layers.
    pub fn small() -> Self {
        ModelConfig {
            n_swintb_per_swinrn: 1,
            n_swintl_per_swintb: 2,
            embed_dim: 16,
            mlp_hidden: 32,
            ..ModelConfig::default()
        }
    }

    pub fn with_embed_dim(mut self, c: usize) -> Self {
        self.embed_dim = c;
        self.mlp_hidden = 2 * c;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    /// Number of distinct weight sets held by the model.
    pub fn n_weight_sets(&self) -> usize {
        if self.share_weights_across_cascades {
            1
        } else {
            self.n_cascades
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_cascades == 0 {
            return fail("n_cascades must be >= 1".into());
        }
        if self.embed_dim == 0 || self.n_heads == 0 || self.mlp_hidden == 0 {
            return fail("embed_dim, n_heads and mlp_hidden must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return fail(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.window_size == 0 {
            return fail("window_size must be positive".into());
        }
        Ok(())
    }
}
