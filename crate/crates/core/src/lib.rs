//! Contrastive continual learning with importance-sampled replay.
//!
//! The numeric core ([`numerics`]) is generic over the scalar type; the
//! learning stack above it runs in `f64`, exposed through the aliases below.

pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod replay;
pub mod rng;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};

/// 64-bit tensor used throughout the learning stack.
pub type Tensor = numerics::Tensor<f64>;
/// 64-bit differentiation tape.
pub type Tape = numerics::Tape<f64>;
/// 64-bit gradient map.
pub type Gradients = numerics::Gradients<f64>;
pub use numerics::Var;
