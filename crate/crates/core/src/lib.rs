//! Cross-pose fingerprint matching on 3D minutiae.
//!
//! Minutiae are lifted to 3D from depth gradients ([`geometry`]), embedded by a
//! dynamic EdgeConv graph network ([`graphnet`]) built on a small reverse-mode
//! engine ([`autodiff`]), trained with batch-hard triplet loss ([`training`])
//! on deterministic synthetic fingers ([`synthgen`]) and scored with the usual
//! verification and identification protocols ([`evaluation`]).

pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod graphnet;
pub mod io;
pub mod pipeline;
pub mod registry;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
