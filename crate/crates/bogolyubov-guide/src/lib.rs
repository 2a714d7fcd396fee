//! Doc-test shim for the guide under `book/`.
//!
//! Each chapter is attached verbatim as the documentation of an empty
//! module, so every fenced Rust block in the book compiles and runs
//! under `cargo test -p bogolyubov-guide --doc`. Edit the chapters, not
//! this file; a snippet that drifts from the library API fails the
//! workspace test run.

#[doc = include_str!("../../../README.md")]
pub mod readme {}

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/recurrent-coefficients.md")]
pub mod recurrent_coefficients {}

#[doc = include_str!("../../../book/src/averaging.md")]
pub mod averaging {}

#[doc = include_str!("../../../book/src/linear-flow.md")]
pub mod linear_flow {}

#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}

#[doc = include_str!("../../../book/src/laws-and-distances.md")]
pub mod laws_and_distances {}

#[doc = include_str!("../../../book/src/scenarios.md")]
pub mod scenarios {}
