//! Compiles the guide's code snippets as doctests, so `cargo test` keeps the
//! book in sync with the crate.

#[doc = include_str!("../../../book/src/introduction.md")]
mod introduction {}

#[doc = include_str!("../../../book/src/synthetic-data.md")]
mod synthetic_data {}

#[doc = include_str!("../../../book/src/candidates.md")]
mod candidates {}

#[doc = include_str!("../../../book/src/model.md")]
mod model {}

#[doc = include_str!("../../../book/src/training.md")]
mod training {}

#[doc = include_str!("../../../book/src/quantization.md")]
mod quantization {}

#[doc = include_str!("../../../book/src/streaming.md")]
mod streaming {}

#[doc = include_str!("../../../book/src/evaluation.md")]
mod evaluation {}

#[doc = include_str!("../../../book/src/cli.md")]
mod cli {}
