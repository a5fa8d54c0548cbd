//! The distributed Fourier neural operator: broadcast-weight affine layers,
//! sharded spectral convolutions, the block update, reverse-mode gradients
//! via per-operator adjoints, Adam, and a single-worker reference network.

pub mod adam;
pub mod autodiff;
pub mod config;
pub mod layers;
pub mod loss;
pub mod params;
pub mod reference;

pub use adam::{adam_step_complex, adam_step_real, AdamParams, ModelOptimizer};
pub use autodiff::{fno_backward, fno_forward, ModelGrads, Tape};
pub use config::{Activation, FnoConfig};
pub use layers::{affine_pointwise, fno_block, mode_ownership, spectral_conv};
pub use loss::{relative_l2_loss_grad, relative_lp_loss};
pub use params::{AffineParams, FnoBlockParams, FnoModel, ModelLayout, SpectralWeights};
pub use reference::{reference_backward, reference_forward, DenseModel, DenseTensor};
