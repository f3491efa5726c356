//! Data ingestion, synthetic data, experiments, the cascade and run
//! directories.

pub mod cascade;
pub mod experiments;
pub mod manifest;
pub mod run;
pub mod synthetic;

pub use cascade::{cascade_predict, Cascade, CascadeConfig, CascadeResult, CascadeStep, Stage};
pub use manifest::{ingest, split, Manifest, Record, Split};
pub use run::RunDir;
pub use synthetic::{generate_synthetic, swap_token, synthesize, Pattern, SyntheticSet, SyntheticSpec, TokenSpec};
