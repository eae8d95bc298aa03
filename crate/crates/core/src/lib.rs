//! Writer retrieval from binarized handwriting.
//!
//! Documents are binarized, cut into grid windows and fed through a Vision
//! Transformer. Patch tokens whose input patch holds enough ink are aggregated per
//! document into a VLAD vector, power- and L2-normalized, and reduced with whitened
//! PCA. Retrieval ranks documents by cosine distance, optionally after reranking.

pub mod codebook;
pub mod container;
pub mod encoder;
pub mod error;
pub mod features;
pub mod preproc;
pub mod retrieval;
pub mod sampler;
pub mod synthetic;
pub mod vit;

pub use error::{Error, Result};
