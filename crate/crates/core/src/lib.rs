//! Identify a file's true type from the distribution of its byte values.
//!
//! The pipeline is: [`features`] turns file bytes into a normalized 256-bin
//! histogram, [`corpus`] ingests a labeled directory tree and splits it,
//! [`sgan`] trains a semi-supervised GAN whose discriminator trunk doubles as
//! the file-type classifier, [`baselines`] provides supervised comparison
//! models, [`eval`] scores them, and [`persist`] stores trained models.
//!
//! All randomness flows from a single `u64` seed through [`ndmath::rng`].

pub mod baselines;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod ndmath;
pub mod par;
pub mod persist;
pub mod sgan;
pub mod synthetic;

pub use crate::corpus::{ClassMap, DatasetSplit, LabeledSample};
pub use crate::error::{Error, Result};
pub use crate::eval::{ConfusionMatrix, Predictor};
pub use crate::features::{Histogram, RawHistogram, BINS};
pub use crate::sgan::{Classifier, SganModel, TrainConfig, TrainHistory};
