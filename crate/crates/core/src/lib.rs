//! Offline region soft-label cache and dual-prompt student training.

pub mod bench;
pub mod config;
pub mod error;
pub mod losses;
pub mod numerics;
pub mod ril;
pub mod selftest;
pub mod student;
pub mod teacher;
pub mod trainer;

pub use error::{Error, Result};
