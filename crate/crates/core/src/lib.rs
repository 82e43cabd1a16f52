//! Entity-aware language models.
//!
//! A transformer language model trained on full utterances is combined with
//! small entity language models trained only on catalogues of entity strings.
//! A contextual fusion layer decides, token by token, how much each entity
//! model contributes to the next-token distribution. Entity models share the
//! frozen input/output embeddings of the pre-trained model, so a retrained
//! entity model can be swapped into a trained system without touching the
//! fusion layer.

pub mod checkpoint;
pub mod entity_lm;
pub mod error;
pub mod fusion;
pub mod kv;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod pretrained_lm;
pub mod textdata;
pub mod train;

pub use error::{EalmError, Result};
