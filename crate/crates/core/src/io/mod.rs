//! On-disk formats and datasets.

pub mod checkpoint;
pub mod data;
pub mod kv;
pub mod pgm;

pub use kv::KvMap;
