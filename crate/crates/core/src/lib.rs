//! Desk-scale reimplementation of a mixture-of-experts vision-language
//! model: dynamic tiling, a pixel-shuffle adaptor, multi-head latent
//! attention, routed experts with load balancing, grounding markup, and a
//! few scheduling heuristics for training at scale.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adaptor;
pub mod attention;
pub mod error;
pub mod grounding;
pub mod imaging;
pub mod model;
pub mod moe;
pub mod numcore;
pub mod schedsim;
pub mod tiling;

pub use error::{Error, Result};
pub use imaging::Image;
pub use model::{build_config, Model, ModelConfig, SequenceBatch, Variant};
pub use numcore::Tensor;
