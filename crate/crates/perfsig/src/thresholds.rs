//! Numeric cutoffs for the pattern detectors and scaling classifier.
//!
//! Every cutoff lives here: the signature descriptions are qualitative
//! ("comparable", "large", "near"), so each value is a documented default
//! calibrated against the synthetic oracle, overridable from a flat JSON map
//! `{"threshold_name": number}` (see `docs/thresholds.default.json`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct Thresholds {
    /// Speedup drop tolerated before a curve counts as degrading.
    pub eps: f64,
    /// Final marginal speedup gain per thread below which a curve saturates.
    pub sat_slope: f64,
    /// Fraction of ideal speedup required for a linear classification.
    pub lin_frac: f64,
    /// Imbalance index (1 - min/max) at which load imbalance fires.
    pub imb_threshold: f64,
    /// Bandwidth utilization at which saturation fires.
    pub sat_threshold: f64,
    /// Load+store instruction fraction counting as LD/ST domination.
    pub ldst_threshold: f64,
    /// Bandwidth utilization below which strided access suspects low transfer efficiency.
    pub low_bw_threshold: f64,
    /// Cache hit ratio below which strided access suspects erratic access.
    pub hit_threshold: f64,
    /// Instructions-per-flop ratio at which the instruction mix fires.
    pub mix_threshold: f64,
    /// Packed-FP fraction below which scalar code dominates a data-parallel loop.
    pub simd_threshold: f64,
    /// CPI cutoff factor: fires at CPI <= factor / issue_width.
    pub cpi_limit_factor: f64,
    /// Non-FP instruction fraction counting as synchronization overhead (FP workloads).
    pub nonfp_threshold: f64,
    /// Log-log growth exponent of instructions vs threads above which totals grow superlinearly.
    pub growth_exponent: f64,
    /// Cacheline evictions per instruction indicating coherence trouble.
    pub evict_threshold: f64,
    /// Two-thread speedup at or below which false sharing is suspected.
    pub speedup2_max: f64,
    /// Imbalance index over per-domain bandwidth at which bad placement fires.
    pub numa_imb_threshold: f64,
    /// Remote-traffic fraction at which bad placement fires.
    pub remote_threshold: f64,
    /// Measured/model performance ratio at or below which an anomaly fires.
    pub anomaly_fraction: f64,
    /// Relative agreement between measured CPI and a static prediction worth reporting.
    pub static_agreement_tol: f64,
    /// Severity weight of the LD/ST term in the strided-access detector.
    pub strided_weight_ldst: f64,
    /// Severity weight of the starvation term in the strided-access detector.
    pub strided_weight_starvation: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            eps: 0.05,
            sat_slope: 0.1,
            lin_frac: 0.8,
            imb_threshold: 0.15,
            sat_threshold: 0.75,
            ldst_threshold: 0.4,
            low_bw_threshold: 0.3,
            hit_threshold: 0.9,
            mix_threshold: 2.0,
            simd_threshold: 0.5,
            cpi_limit_factor: 1.3,
            nonfp_threshold: 0.8,
            growth_exponent: 1.1,
            evict_threshold: 0.01,
            speedup2_max: 1.05,
            numa_imb_threshold: 0.5,
            remote_threshold: 0.3,
            anomaly_fraction: 0.5,
            static_agreement_tol: 0.15,
            strided_weight_ldst: 0.4,
            strided_weight_starvation: 0.6,
        }
    }
}

macro_rules! threshold_fields {
    ($m:ident, $self:ident) => {
        $m!(
            $self,
            eps,
            sat_slope,
            lin_frac,
            imb_threshold,
            sat_threshold,
            ldst_threshold,
            low_bw_threshold,
            hit_threshold,
            mix_threshold,
            simd_threshold,
            cpi_limit_factor,
            nonfp_threshold,
            growth_exponent,
            evict_threshold,
            speedup2_max,
            numa_imb_threshold,
            remote_threshold,
            anomaly_fraction,
            static_agreement_tol,
            strided_weight_ldst,
            strided_weight_starvation
        )
    };
}

#[derive(Debug, Error)]
pub enum ThresholdsError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unknown threshold `{0}`")]
    UnknownThreshold(String),
}

impl Thresholds {
    /// Defaults overridden by the entries of a flat JSON map. Unknown names
    /// are rejected so typos do not silently keep a default.
    pub fn from_json_str(text: &str) -> Result<Self, ThresholdsError> {
        let map: BTreeMap<String, f64> =
            serde_json::from_str(text).map_err(|e| ThresholdsError::Parse(e.to_string()))?;
        let mut out = Thresholds::default();
        for (key, value) in map {
            macro_rules! apply {
                ($s:ident, $($field:ident),+) => {
                    match key.as_str() {
                        $(stringify!($field) => $s.$field = value,)+
                        other => return Err(ThresholdsError::UnknownThreshold(other.to_string())),
                    }
                };
            }
            threshold_fields!(apply, out);
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ThresholdsError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ThresholdsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    /// Flat name -> value map, e.g. for the `thresholds_used` report section.
    pub fn to_map(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        macro_rules! put {
            ($s:ident, $($field:ident),+) => {
                $(out.insert(stringify!($field).to_string(), $s.$field);)+
            };
        }
        threshold_fields!(put, self);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_documented_set() {
        let t = Thresholds::default();
        assert_eq!(t.eps, 0.05);
        assert_eq!(t.sat_slope, 0.1);
        assert_eq!(t.lin_frac, 0.8);
        assert_eq!(t.imb_threshold, 0.15);
        assert_eq!(t.sat_threshold, 0.75);
        assert_eq!(t.mix_threshold, 2.0);
        assert_eq!(t.cpi_limit_factor, 1.3);
    }

    #[test]
    fn overrides_apply_and_unknown_names_fail() {
        let t = Thresholds::from_json_str(r#"{"imb_threshold": 0.5}"#).unwrap();
        assert_eq!(t.imb_threshold, 0.5);
        assert_eq!(t.sat_threshold, 0.75);
        assert!(matches!(
            Thresholds::from_json_str(r#"{"imb_treshold": 0.5}"#),
            Err(ThresholdsError::UnknownThreshold(_))
        ));
    }

    #[test]
    fn map_round_trips() {
        let t = Thresholds::default();
        let map = t.to_map();
        let text = serde_json::to_string(&map).unwrap();
        let t2 = Thresholds::from_json_str(&text).unwrap();
        assert_eq!(t, t2);
    }
}
