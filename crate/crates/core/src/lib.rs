//! Robust zone-tracking nonlinear model predictive control.
//!
//! The toolkit covers plant models and their discretization ([`dynamics`]),
//! box arithmetic with the zone cost and target shrinkage ([`sets`]), grid
//! control-invariant sets ([`cis`]), the finite-horizon optimal control
//! problem ([`ocp`]), closed-loop simulation with metrics ([`closedloop`]),
//! and the end-to-end controller design for each variant ([`design`]).

pub mod error;
pub mod dynamics;
pub mod sets;
pub mod cis;
pub mod ocp;
pub mod closedloop;
pub mod design;

pub use error::{Result, ZmpcError};
