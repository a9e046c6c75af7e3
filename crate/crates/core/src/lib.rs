//! Sparse autoencoders trained as an ensemble with mutual feature
//! regularization, plus the synthetic data, matching and evaluation tools
//! needed to measure how well they recover ground-truth features.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evalrep;
pub mod matching;
pub mod mfr;
pub mod numerics;
pub mod sae;
pub mod storefmt;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/synthetic-data.md")]
    mod synthetic_data {}
    #[doc = include_str!("../../../book/src/topk-sae.md")]
    mod topk_sae {}
    #[doc = include_str!("../../../book/src/mfr.md")]
    mod mfr {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/file-formats.md")]
    mod file_formats {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
