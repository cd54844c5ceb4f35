//! Turn recorded hardware-counter measurements into ranked findings of
//! well-defined performance patterns.
//!
//! The pipeline has four stages:
//!
//! 1. [`session`] loads and validates measurement sessions (per-core event
//!    counts for one or more code regions, optionally with timeline samples).
//! 2. [`perfgroup`] evaluates performance groups — named event sets with
//!    derived-metric formulas — against a region's counts.
//! 3. [`analysis`] computes the derived quantities the pattern signatures
//!    consume: CPI, bandwidths, Flop rates, instruction-mix ratios,
//!    imbalance indices and scaling classifications, compared against the
//!    baselines in a [`machine`] model.
//! 4. [`patterns`] runs one detector per pattern and merges the evidence
//!    into a ranked list of findings.
//!
//! [`synth`] generates sessions with a known injected pattern; it is the
//! ground-truth oracle the detector thresholds are calibrated against.

pub mod analysis;
mod jsonutil;
pub mod machine;
pub mod patterns;
pub mod perfgroup;
pub mod report;
pub mod session;
pub mod synth;
pub mod thresholds;

pub use analysis::{DerivedMetrics, ImbalanceReport, ScalingClassification, ScalingShape};
pub use machine::{Baselines, MachineModel, Topology};
pub use patterns::{DiagnosisInput, Evidence, Finding, PatternKind};
pub use perfgroup::{GroupRegistry, MetricValue, PerformanceGroup};
pub use session::{MeasurementSession, RegionMeasurement, ScalingSeries};
pub use thresholds::Thresholds;
