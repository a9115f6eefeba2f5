//! Robust joint multicast/broadcast precoding for multi-user MISO downlinks
//! with imperfect transmitter-side channel knowledge.
//!
//! The average sum rate over the CSIT error is approximated by a Monte-Carlo
//! sample and maximized through an augmented weighted-MMSE reformulation:
//! MMSE equalizers and weights are updated in closed form, and the precoder
//! update is a convex QCQP solved by an interior-point method.

pub mod ao;
pub mod awsmse;
pub mod baselines;
pub mod channel;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod qcqp;
pub mod receivers;
pub mod sum;

pub use error::{Error, Result};
