//! Files and persistence.

pub mod atomic;
pub(crate) mod bytes;
pub mod config;
pub mod manifest;
pub mod media;
pub mod records;
pub mod toyset;
