//! Conditionally shifted neurons: few-shot networks that adapt per task by
//! adding activation shifts retrieved from a key-value memory.

pub mod conditioning;
pub mod config;
pub mod csn;
pub mod diffcore;
pub mod episodes;
pub mod error;
pub mod learners;
pub mod memory;

pub use error::{CsnError, Result};
