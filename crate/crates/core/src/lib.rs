//! Self-supervised probing for classifier trustworthiness.
//!
//! Linear probing heads are trained on a frozen classifier backbone to
//! recognise which geometric transform (quarter-turn rotation or mirrored
//! translation) was applied to an input. Their softmax mass on the identity
//! transform, the *probing confidence*, is then used to
//!
//! * strengthen misclassification and out-of-distribution scores
//!   ([`scores::fuse_ssp`]),
//! * drive an input-dependent softmax temperature
//!   ([`calibration::fit_input_dependent`]).
//!
//! The [`metrics`] module carries exact threshold-sweep implementations of
//! every evaluation metric, and [`pipeline`] wires the stages together
//! behind a flat `key = value` configuration file.

pub mod calibration;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod probing;
pub mod rng;
pub mod scores;
pub mod sspb;
pub mod tensor;
pub mod transforms;

pub use error::{Error, FormatError, Result};
