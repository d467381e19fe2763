//! Self-guided group-relative policy optimization on sparse-reward toy
//! environments.
//!
//! An agent emits a polarity assessment of its own progress before each
//! action. The assessment is turned into a small internal reward that is
//! blended into the episode return under a trapezoid trust schedule, and the
//! blended returns drive a clipped group-relative policy update.

pub mod analysis;
pub mod env;
pub mod error;
pub mod optimizer;
pub mod policy;
pub mod reward;
pub mod rollout;
pub mod trainer;
pub mod trajectory;

pub use error::{EnvError, Error, Result};
