pub mod assignment;
pub mod catalog;
pub mod checkpoint;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fsio;
pub mod image;
pub mod mapping;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod vlm;

pub use catalog::{AttrId, Attribute, AttributeCatalog, Category};
pub use encoders::{Embedding, Encoder, EncoderConfig};
pub use error::{Error, Result};
