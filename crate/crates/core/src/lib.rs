//! Compact vision-language modeling laboratory.
//!
//! Builds two-tower and one-tower encoder models at desk scale from
//! composable text/vision towers and a configurable cross-attention fusion
//! encoder, pretrains them with masked language modeling and image-text
//! matching on a fully synthetic shape-world, fine-tunes three
//! discriminative task heads, and accounts for every trainable parameter
//! both in closed form and by enumeration.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod layers;
pub mod model;
pub mod params;
pub mod presets;
pub mod pretrain;
pub mod tasks;
pub mod tensor;
pub mod text;
pub mod vision;

pub use config::{Arch, FusionConfig, ModelConfig, ParameterReport, TextTowerConfig, VisionConfig};
pub use error::{EssenError, Result};
pub use model::{FusedStates, VlModel};
pub use tensor::{Scalar, Tensor};
