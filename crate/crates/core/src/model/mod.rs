//! The cascaded window-attention reconstructor.
//!
//! Each network stacks a 3x3 feature-extraction conv, transformer blocks of
//! alternating regular/shifted window layers, a fusion conv with a global
//! feature residual and a one-channel output conv. Networks are chained with
//! hard data-consistency layers in between. Every stage has a hand-written
//! reverse pass so the whole cascade can be trained without an autodiff
//! framework.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod network;
pub mod params;
pub mod swin;
pub mod window;

pub use attention::{msa_window, WindowAttention};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::ModelConfig;
pub use network::{
    dcct_backward, dcct_forward, dcct_forward_tape, swinrn_forward, swinrn_gradients, DcctOutput, DcctTape,
    ModelWeights, SwinRnWeights,
};
pub use params::Parameters;
pub use swin::{swintb_forward, swintl_forward, SwinBlockWeights, SwinLayerWeights};
pub use window::{window_partition, window_reverse, FeatureMap};
