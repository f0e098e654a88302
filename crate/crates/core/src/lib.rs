//! Contrastive image–text encoder, an embedding-conditioned pixel diffusion
//! decoder, finetuning of the encoder through the frozen decoder, and the
//! evaluations around them, all on a synthetic shapes corpus.

pub mod clip;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod io;
pub mod params;

pub use error::{CoreError, Result};
