//! One-round federated deep-broad learning.
//!
//! Clients hold banks of frozen, pooled deep features ([`bank`]), solve a
//! ridge-regularized linear classifier in closed form ([`solver`]) and upload
//! the weight matrix once. The server averages the uploads by sample count
//! ([`fed`]), optionally inside an additively homomorphic cryptosystem
//! ([`secure`]). [`metrics`] and [`harness`] cover evaluation and the
//! proportion-sweep / client-scaling experiment protocol.

pub mod bank;
mod container;
pub mod error;
pub mod fed;
pub mod harness;
pub mod metrics;
mod numeric;
pub mod secure;
pub mod solver;

pub use error::{Error, ParseError, Result};
