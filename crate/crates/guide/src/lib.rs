//! The book's chapters as doc-tests.
//!
//! mdbook cannot link code blocks against workspace crates, so each chapter
//! is included here as a module doc and `cargo test --doc -p pgrd-guide`
//! runs its snippets. One module per chapter keeps failures attributable.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/residual-diffusion.md")]
pub mod residual_diffusion {}
#[doc = include_str!("../../../book/src/sampling.md")]
pub mod sampling {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/reproducibility.md")]
pub mod reproducibility {}
#[doc = include_str!("../../../book/src/command-line.md")]
pub mod command_line {}
