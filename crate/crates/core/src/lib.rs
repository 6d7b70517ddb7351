//! Distributed pose estimation for satellite fleets with dual quaternions.

pub mod algebra;
pub mod consensus;
pub mod ddq;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod mekf;
pub mod rigid_body;
pub mod sim;

pub use error::{Error, Result};
