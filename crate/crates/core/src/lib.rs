//! Temporal intent modelling over heterogeneous multi-domain event streams.

pub mod attention;
pub mod calendar;
pub mod error;
pub mod eval;
pub mod io;
pub mod journey;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
