//! Difference-of-convex tube MPC for fed-batch bioreactor control.
//!
//! The crate learns a surrogate model of the reactor dynamics as a
//! difference of two input-convex networks, bounds its linearization error
//! through convexity, and runs a robust adaptive model predictive controller
//! whose uncertainty tube has simplex cross-sections. Online set-membership
//! and least-mean-squares estimators track the uncertain yield and feed
//! concentration parameters.

pub mod error;
pub mod estimate;
pub mod icnn;
pub mod lqr;
pub mod plant;
pub mod report;
pub mod rng;
pub mod sim;
pub mod socp;
pub mod train;
pub mod tube;

pub use error::{Error, Result};
