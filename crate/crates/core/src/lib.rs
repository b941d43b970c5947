//! Quantifying out-of-domain transfer performance of fitted prediction
//! rules: pooled cross-domain transfer errors, exact finite-sample forecast
//! intervals (including robustness to non-identically-distributed target
//! domains), dominance comparisons between methods, and U-statistic
//! confidence intervals for population transfer quantities, with a built-in
//! application to certainty-equivalent prediction for binary lotteries.

pub mod concentration;
pub mod intervals;
pub mod io;
pub mod meta;
pub mod metareg;
pub mod rules;
pub mod shift;
pub mod synth;
pub mod transfer;

pub use meta::{
    sample_error, validate_metadata, DomainSample, Loss, LossSpec, Lottery, MetaData, Observation,
    Transform, Violation,
};
pub use rules::{FitConfig, PredictionRule, RuleConfig};

/// Library version echoed into every artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
