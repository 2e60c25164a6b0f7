//! Responsibility-aware control barrier functions for decentralized
//! multi-agent collision avoidance.
//!
//! Agents follow unicycle kinematics. Pairwise safety is certified by a
//! flow-based barrier under an idle backup policy; each agent enforces its
//! share of the barrier condition, shifted by a learned responsibility
//! allocation, in a small per-agent quadratic program.

pub mod barrier;
pub mod dynamics;
pub mod error;
pub mod filter;
pub mod forensics;
pub mod learning;
pub mod mlp;
pub mod qp;
pub mod responsibility;
pub mod sim;

pub use error::{Error, Result};
