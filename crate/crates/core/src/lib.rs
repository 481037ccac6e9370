//! Hamming-space retrieval metrics, mis-rank bounds and bound-guided hashing.

pub mod bounds;
pub mod centers;
pub mod cli;
pub mod codefile;
pub mod codes;
pub mod error;
pub mod labels;
pub mod mvb;
pub mod nn;
pub mod ranking;
pub mod rng;
pub mod train;

pub use codes::{BitCode, RealCode};
pub use error::{Error, Result};
pub use labels::{Label, LabelSet};

// The guide's snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/codes.md")]
    mod codes {}
    #[doc = include_str!("../../../book/src/ranking.md")]
    mod ranking {}
    #[doc = include_str!("../../../book/src/bounds.md")]
    mod bounds {}
    #[doc = include_str!("../../../book/src/centers.md")]
    mod centers {}
    #[doc = include_str!("../../../book/src/mvb.md")]
    mod mvb {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
