//! Keeps the book honest: every chapter is attached here as module
//! documentation, so `cargo test --doc` compiles and runs the book's code
//! snippets against the current API. A failing snippet points at the
//! chapter module it came from.

#[doc = include_str!("../../../book/src/overview.md")]
pub mod overview {}

#[doc = include_str!("../../../book/src/tokens_and_tags.md")]
pub mod tokens_and_tags {}

#[doc = include_str!("../../../book/src/ranker.md")]
pub mod ranker {}

#[doc = include_str!("../../../book/src/network.md")]
pub mod network {}

#[doc = include_str!("../../../book/src/simulator.md")]
pub mod simulator {}

#[doc = include_str!("../../../book/src/augmentation.md")]
pub mod augmentation {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli_walkthrough {}
