//! Language-independent layout transformer for structured document
//! understanding.
//!
//! A text stream and a layout stream run side by side and exchange
//! attention scores at every layer. The layout stream is pre-trained with
//! the text stream held (nearly) fixed, then both are fine-tuned together
//! for entity recognition or relation extraction.
//!
//! Everything is `f64` on top of a small tape-based autodiff engine
//! ([`autograd`]), so gradients can be checked against finite differences.
//!
//! ```
//! use lilt::encoder::EncoderConfig;
//! use lilt::model::{Model, ModelConfig, Task};
//!
//! let enc = EncoderConfig { layers: 1, heads: 2, d_text: 8, d_layout: 12, ffn_text: 16, ffn_layout: 12,
//!                           max_len: 16, ..EncoderConfig::desk() };
//! let model = Model::new(ModelConfig::new(enc, 40, Task::Ser), 0).unwrap();
//! assert!(model.store.num_scalars() > 0);
//! ```

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod document;
pub mod embeddings;
pub mod encoder;
pub mod experiment;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod seed;
pub mod synthetic;
pub mod text;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/inputs.md")]
    mod inputs {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/pretraining.md")]
    mod pretraining {}
    #[doc = include_str!("../../../book/src/finetuning.md")]
    mod finetuning {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
