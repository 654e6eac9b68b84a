//! Fine-grained image retrieval with dual visual filtering.
//!
//! The pipeline crops images around a detected object ([`ovf`]), encodes
//! them with a plain ViT whose last layer only sees the most informative
//! patch tokens ([`encoder`], [`svf`]), trains the embedding with a proxy
//! plus margin-contrastive objective ([`training`]) and scores retrieval
//! with Recall@K ([`retrieval`]).

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod ovf;
pub mod retrieval;
pub mod svf;
pub mod synth;
pub mod training;

pub use error::{DvfError, ProviderError, Result};
