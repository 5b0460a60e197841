//! The chapters of `book/` compiled as doc-tests, one module per chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/kernels.md")]
pub mod kernels {}
#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/batch-norm.md")]
pub mod batch_norm {}
#[doc = include_str!("../../../book/src/checks.md")]
pub mod checks {}
#[doc = include_str!("../../../book/src/command-line.md")]
pub mod command_line {}
