//! Desk-scale laboratory for spatial bias in vision-language transformers.
//!
//! The crate provides rotary position embedding, two position-id schemes for
//! multimodal sequences (sequential and balanced), a small trainable
//! multimodal decoder with exact gradients, a 3×3 composite-grid probe
//! dataset, and the measurement harnesses used to study how image-token
//! position ids shape cross-modal attention: occlusion importance, encoder
//! similarity, and text→image attention flow.

pub mod analysis;
pub mod error;
pub mod export;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod positions;
pub mod probe;
pub mod rope;

pub use error::{Error, Result};
pub use model::{EncoderKind, Model, ModelConfig, MultimodalInput};
pub use numeric::Matrix;
pub use positions::{ModalityLayout, PositionIds, Scheme};
pub use rope::RopeParams;
