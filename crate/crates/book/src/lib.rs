//! Book chapters compiled as doctests, so every snippet in `book/src`
//! runs under `cargo test`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("../../../book/src/transforms.md")]
pub mod transforms {}
#[doc = include_str!("../../../book/src/probing.md")]
pub mod probing {}
#[doc = include_str!("../../../book/src/fusion.md")]
pub mod fusion {}
#[doc = include_str!("../../../book/src/calibration.md")]
pub mod calibration {}
#[doc = include_str!("../../../book/src/sspb.md")]
pub mod sspb {}
#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
