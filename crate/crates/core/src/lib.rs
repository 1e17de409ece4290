//! Deterministic generation, validation, and benchmarking of synthetic
//! battery magnetic-field signatures conditioned on state of health.
//!
//! The pipeline: classify the request voltage ([`regime`]), draw a base
//! morphology from the scan bank ([`bank`]), modulate it toward degraded
//! morphologies in a discriminant subspace of a fixed reservoir embedding
//! ([`embed`], [`modulator`]), add sensor and SOC noise ([`noise`]), and
//! optionally derive sensor anomalies ([`anomaly`]). [`emit`] assembles whole
//! datasets, [`splits`] builds leakage-safe splits, [`validate`] runs the
//! sanity and distributional checks, and [`bench`] runs the downstream tasks.

// Linear algebra in this crate goes through LAPACK; pull in the system
// OpenBLAS link directives.
extern crate openblas_src;

pub mod anomaly;
pub mod bank;
pub mod bench;
pub mod conditioning;
pub mod config;
pub mod embed;
pub mod emit;
pub mod error;
pub mod io;
pub mod modulator;
pub mod noise;
pub mod record;
pub mod regime;
pub mod signature;
pub mod splits;
pub mod validate;

pub use bank::{generate_demo_bank, ingest_bank, BaseMode, MorphologyBank};
pub use conditioning::{
    load_conditioning, second_life_label, shuffle_soh, ConditioningRecord, ConditioningSource,
};
pub use config::{config_hash, derive_sample_seed, BridgeConfig, BRIDGE_VERSION, SCHEMA_VERSION};
pub use embed::{ReservoirParams, ReservoirSpec};
pub use error::{Error, Result};
pub use modulator::{fit_lda_model, modulate, LdaModel};
pub use record::{
    AnomalyOrigin, AnomalySubtype, Chemistry, GenerationRequest, Regime, SampleRecord,
    SecondLifeClass, U_DIM,
};
pub use regime::{classify, Classification};
pub use signature::{Signature, C, CHANNEL_NAMES, T};
