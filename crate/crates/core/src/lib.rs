//! Monte Carlo toolkit for Berry-Esseen and Malliavin-Stein rate experiments
//! on one-dimensional diffusions with asymptotically constant coefficients.

pub mod bounds;
pub mod distances;
pub mod error;
pub mod experiment;
pub mod format;
pub mod malliavin;
pub mod model;
pub mod models;
pub mod numerics;
pub mod rng;
pub mod sde;

pub use error::{LabError, Result};
