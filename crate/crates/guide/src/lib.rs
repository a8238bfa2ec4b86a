//! Every chapter of the guide in `book/src`, included verbatim so that
//! `cargo test` runs its code samples.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/configuration.md")]
pub mod configuration {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/encoding.md")]
pub mod encoding {}

#[doc = include_str!("../../../book/src/heads.md")]
pub mod heads {}

#[doc = include_str!("../../../book/src/network.md")]
pub mod network {}

#[doc = include_str!("../../../book/src/confidence.md")]
pub mod confidence {}

#[doc = include_str!("../../../book/src/artifact.md")]
pub mod artifact {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
