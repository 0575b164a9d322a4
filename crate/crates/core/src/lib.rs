//! Commonality-aware mini-batch scheduling for instruction tuning.
//!
//! The pipeline groups a dataset ([`grouping`]), builds mini-batches that each
//! draw from a single group and shuffles their order ([`scheduler`]), and
//! provides a small softmax trainer ([`trainer`]) and dataset analyses
//! ([`analysis`]) for checking the resulting schedules.

pub mod analysis;
pub mod cli;
pub mod grouping;
pub mod ingest;
pub mod scheduler;
pub mod trainer;

use sha2::{Digest, Sha256};

pub use grouping::{GroupLabel, GroupedDataset};
pub use ingest::{Dataset, LengthBasis, Record};
pub use scheduler::{Schedule, ScheduleConfig, ScheduleMode, TailPolicy};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
