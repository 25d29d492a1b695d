//! Average treatment effect estimation from natural-language reports.
//!
//! Reports are turned into per-report conditional distributions over
//! covariates, treatment and outcome by a [`providers::Provider`]; the
//! estimators in [`estimators`] then combine those distributions into an
//! effect estimate. [`synth`] generates reports with a known ground truth.

pub mod diagnostics;
pub mod estimators;
pub mod jsonl;
pub mod pipeline;
pub mod providers;
pub mod study;
pub mod synth;

pub use estimators::{AteEstimate, EstimateError};
pub use providers::{Provider, ProviderError, ProviderPolicy};
pub use study::{
    ConditionalSlice, CovariateDim, CovariateSchema, CovariateVector, InclusionBox, JointTable, Report, StudyDesign,
    StudyError, TabularUnit,
};
