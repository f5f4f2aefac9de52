//! Semantic segmentation from sparse annotations.
//!
//! The crate trains a small fully convolutional network from point, line or
//! polygon annotations with a masked cross-entropy loss plus a relational
//! regularizer on the network's features, then refines predictions with a
//! fully connected CRF. A deterministic scene generator and annotation
//! simulator make every stage checkable without external data.
//!
//! The guide in `book/` walks through each stage; its code listings are
//! compiled and run as doc-tests of this crate.

pub mod annotations;
pub mod autodiff;
pub mod checkpoint;
pub mod crf;
pub mod error;
pub mod experiment;
pub mod festa;
pub mod io;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/scenes.md")]
    struct Scenes;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/losses.md")]
    struct Losses;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/crf.md")]
    struct Crf;
    #[doc = include_str!("../../../book/src/metrics.md")]
    struct Metrics;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
