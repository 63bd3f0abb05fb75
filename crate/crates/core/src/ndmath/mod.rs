//! Dense-network math shared by the generator, the discriminator/classifier
//! trunk and the standalone MLP: matrices, activations, losses, dropout,
//! reverse-mode gradients and the Adam optimizer.
//!
//! Arithmetic is `f64` throughout.

pub mod activation;
pub mod adam;
pub mod loss;
pub mod matrix;
pub mod net;
pub mod rng;

pub use activation::{relu, sigmoid, softmax, Activation};
pub use adam::{AdamConfig, AdamState};
pub use loss::{bce_loss, bce_output_grad, cce_logit_grad, cce_loss, PROB_CLAMP};
pub use matrix::Matrix;
pub use net::{BackwardOptions, DenseLayer, DenseNet, Gradients, LayerGrad, LayerSpec, Mode, Trace};
pub use rng::{derive_seed, seeded, Rng};
