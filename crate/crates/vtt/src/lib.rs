//! Subword vocabulary construction, tokenization statistics, and vocabulary
//! transplant for pre-trained embedding matrices.
//!
//! The crate covers the full pipeline for moving a language model to a new
//! subword vocabulary:
//!
//! - [`vocab`] — train, load, and save unigram vocabularies with byte
//!   fallback.
//! - [`segment`] — Viterbi and minimum-token lattice segmentation, plus
//!   corpus-level token statistics.
//! - [`overlap`] — shared-piece census between two vocabularies.
//! - [`transplant`] — swap (random projection), insert, mean
//!   initialization, vocabulary expansion, factorized expansion, and
//!   parameter accounting.
//! - [`tensorio`] — the VTT1 checkpoint container.
//! - [`eval`] — multiple-choice scoring by normalized likelihood.
//! - [`rng`] — the counter-based deterministic generator everything
//!   random is built on.
//!
//! The mdBook under `book/` walks through each of these with runnable
//! examples; its code blocks compile and run as doctests of this crate.

pub mod cli;
pub mod error;
pub mod eval;
pub mod overlap;
pub mod rng;
pub mod segment;
pub mod tensor;
pub mod tensorio;
pub mod transplant;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::TensorF32;

// Run every code block in the book as a doctest so the guide can never
// drift from the library.
#[cfg(doctest)]
#[doc(hidden)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/vocabulary.md")]
    pub mod vocabulary {}
    #[doc = include_str!("../../../book/src/segmentation.md")]
    pub mod segmentation {}
    #[doc = include_str!("../../../book/src/overlap.md")]
    pub mod overlap {}
    #[doc = include_str!("../../../book/src/transplant.md")]
    pub mod transplant {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/randomness.md")]
    pub mod randomness {}
    #[doc = include_str!("../../../book/src/formats.md")]
    pub mod formats {}
}
