//! Constant-memory attention blocks and the attentive neural processes
//! built on them.

pub mod attention;
pub mod cmab;
pub mod cmanp;
pub mod error;
pub mod numerics;
pub mod tasks;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
