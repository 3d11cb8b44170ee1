//! The guide's chapters, compiled so every example runs as a doc-test.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/models.md")]
pub mod models {}

#[doc = include_str!("../../../book/src/gradients.md")]
pub mod gradients {}

#[doc = include_str!("../../../book/src/neural.md")]
pub mod neural {}

#[doc = include_str!("../../../book/src/langevin.md")]
pub mod langevin {}

#[doc = include_str!("../../../book/src/posteriors.md")]
pub mod posteriors {}

#[doc = include_str!("../../../book/src/command-line.md")]
pub mod command_line {}
