//! Compiles every code snippet in the guide (`book/`) as a doc test, so
//! `cargo test --doc` fails whenever a chapter drifts out of sync with the
//! library. Each module below mirrors one chapter file verbatim.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/scenes.md")]
pub mod scenes {}

#[doc = include_str!("../../../book/src/diffusion-planner.md")]
pub mod diffusion_planner {}

#[doc = include_str!("../../../book/src/rewards-thresholding.md")]
pub mod rewards_thresholding {}

#[doc = include_str!("../../../book/src/fine-tuning.md")]
pub mod fine_tuning {}

#[doc = include_str!("../../../book/src/guidance.md")]
pub mod guidance {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
