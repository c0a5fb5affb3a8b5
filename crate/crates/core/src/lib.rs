//! Sketch representation learning with a transformer autoencoder.

mod bin_io;
pub mod container;
pub mod crossmodal;
pub mod dataset;
pub mod embed;
pub mod error;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod rdp;
pub mod sketch;
pub mod synth;
pub mod tokenize;
pub mod train;

pub use error::{Error, Result};

// The guide's code listings run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/sketches.md")]
    mod sketches {}
    #[doc = include_str!("../../../book/src/tokenizers.md")]
    mod tokenizers {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/embeddings.md")]
    mod embeddings {}
    #[doc = include_str!("../../../book/src/crossmodal.md")]
    mod crossmodal {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}
