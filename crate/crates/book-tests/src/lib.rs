//! Keeps the guide honest: every code block in `book/` compiles and runs
//! as a doctest of this crate under `cargo test --workspace`. One module
//! per chapter so a failure names its chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}

#[doc = include_str!("../../../book/src/hypernet.md")]
pub mod hypernet {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/analysis.md")]
pub mod analysis {}

#[doc = include_str!("../../../book/src/bound.md")]
pub mod bound {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
