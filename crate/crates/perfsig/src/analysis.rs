//! Derived quantities the pattern signatures consume: CPI, bandwidths, Flop
//! rates, instruction-mix ratios, imbalance indices and scaling shapes.

use thiserror::Error;

use crate::machine::MachineModel;
use crate::perfgroup::{evaluate_group, GroupRegistry, MetricValue};
use crate::session::{RegionMeasurement, ScalingSeries, SeriesValue};
use crate::thresholds::Thresholds;

/// Canonical event names the metric derivation looks for.
pub mod events {
    pub const INSTR_RETIRED: &str = "INSTR_RETIRED";
    pub const CPU_CLK_UNHALTED: &str = "CPU_CLK_UNHALTED";
    pub const FP_OPS_PACKED_DP: &str = "FP_OPS_PACKED_DP";
    pub const FP_OPS_SCALAR_DP: &str = "FP_OPS_SCALAR_DP";
    pub const FP_OPS_PACKED_SP: &str = "FP_OPS_PACKED_SP";
    pub const FP_OPS_SCALAR_SP: &str = "FP_OPS_SCALAR_SP";
    pub const MEM_LINES_IN: &str = "MEM_LINES_IN";
    pub const MEM_LINES_OUT: &str = "MEM_LINES_OUT";
    pub const MEM_LINES_REMOTE: &str = "MEM_LINES_REMOTE";

    /// Packed-FP events, the preferred work proxy for imbalance checks.
    pub const PACKED_FP: [&str; 2] = [FP_OPS_PACKED_DP, FP_OPS_PACKED_SP];
    pub const SCALAR_FP: [&str; 2] = [FP_OPS_SCALAR_DP, FP_OPS_SCALAR_SP];

    /// Flops carried by one counted operation of the given FP event.
    pub fn flops_per_op(event: &str) -> f64 {
        match event {
            FP_OPS_PACKED_DP => 2.0,
            FP_OPS_PACKED_SP => 4.0,
            _ => 1.0,
        }
    }
}

/// The signature-relevant metrics of one scope (a core or the aggregate).
/// Any field may be `Undefined` (0/0) or `NotComputable` (events missing).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSet {
    /// Cycles per instruction.
    pub cpi: MetricValue,
    /// Main memory bandwidth, MByte/s.
    pub mem_bw_mbs: MetricValue,
    /// Outer-level-cache bandwidth, MByte/s.
    pub olc_bw_mbs: MetricValue,
    /// Floating-point rate, MFlop/s.
    pub mflops: MetricValue,
    /// Packed-FP operations / all FP operations, in [0, 1].
    pub simd_fraction: MetricValue,
    /// Instructions retired / floating-point operations.
    pub instr_per_flop: MetricValue,
    /// Load+store instructions / instructions retired, in [0, 1].
    pub ldst_fraction: MetricValue,
}

/// [`MetricSet`]s for the aggregate and for each core of a region.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedMetrics {
    pub aggregate: MetricSet,
    /// Aligned with the region's core order; tagged with the core id.
    pub per_core: Vec<(u32, MetricSet)>,
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("unknown event `{0}`")]
    UnknownEvent(String),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("invalid scaling series: {0}")]
    InvalidSeries(String),
}

fn group_metric(
    registry: &GroupRegistry,
    region: &RegionMeasurement,
    group: &str,
    metric: &str,
) -> (MetricValue, Vec<MetricValue>) {
    let Some(group) = registry.get(group) else {
        return (
            MetricValue::NotComputable(vec![format!("group {group} not in registry")]),
            vec![],
        );
    };
    let results = evaluate_group(group, region);
    match results.into_iter().find(|r| r.metric_name == metric) {
        Some(r) => (r.aggregate, r.per_core),
        None => (
            MetricValue::NotComputable(vec![format!("metric {metric} not defined")]),
            vec![],
        ),
    }
}

fn scale(v: &MetricValue, factor: f64) -> MetricValue {
    match v {
        MetricValue::Value(x) => MetricValue::Value(x * factor),
        other => other.clone(),
    }
}

/// Totals of the FP operation events within one scope.
#[derive(Debug, Default, Clone, Copy)]
struct FpTotals {
    packed_ops: f64,
    scalar_ops: f64,
    flops: f64,
    any_event: bool,
}

fn fp_totals(counts: impl Fn(&str) -> Option<u64>) -> FpTotals {
    let mut out = FpTotals::default();
    for event in events::PACKED_FP {
        if let Some(v) = counts(event) {
            out.packed_ops += v as f64;
            out.flops += v as f64 * events::flops_per_op(event);
            out.any_event = true;
        }
    }
    for event in events::SCALAR_FP {
        if let Some(v) = counts(event) {
            out.scalar_ops += v as f64;
            out.flops += v as f64;
            out.any_event = true;
        }
    }
    out
}

fn ratio_or_undefined(num: f64, den: f64) -> MetricValue {
    if den == 0.0 {
        MetricValue::Undefined
    } else {
        MetricValue::Value(num / den)
    }
}

fn fp_missing_marker() -> MetricValue {
    MetricValue::NotComputable(
        events::PACKED_FP
            .iter()
            .chain(events::SCALAR_FP.iter())
            .map(|s| s.to_string())
            .collect(),
    )
}

/// Compute the derived metrics of a region from the builtin groups, with
/// bandwidths rescaled from the groups' 64-byte-line assumption to the
/// machine's actual line size.
pub fn derive_metrics(
    region: &RegionMeasurement,
    machine: &MachineModel,
    registry: &GroupRegistry,
) -> DerivedMetrics {
    let cl_factor = machine.baselines.cacheline_bytes as f64 / 64.0;

    let (cpi_a, cpi_c) = group_metric(registry, region, "CPI", "CPI");
    let (mem_a, mem_c) = group_metric(registry, region, "MEM", "MEM_BW");
    let (l3_a, l3_c) = group_metric(registry, region, "L3", "L3_BW");
    let (ldst_a, ldst_c) = group_metric(registry, region, "DATA", "LDST_FRACTION");
    let (dp_a, dp_c) = group_metric(registry, region, "FLOPS_DP", "DP_MFLOPS");
    let (sp_a, sp_c) = group_metric(registry, region, "FLOPS_SP", "SP_MFLOPS");

    let ncores = region.cores.len();
    let get = |vals: &Vec<MetricValue>, i: usize| -> MetricValue {
        vals.get(i).cloned().unwrap_or(MetricValue::NotComputable(vec![]))
    };

    // MFlop/s from whichever FLOPS groups are computable; both missing keeps
    // the union of missing events visible.
    let combine_mflops = |dp: &MetricValue, sp: &MetricValue| -> MetricValue {
        match (dp, sp) {
            (MetricValue::Value(a), MetricValue::Value(b)) => MetricValue::Value(a + b),
            (MetricValue::Value(a), MetricValue::NotComputable(_)) => MetricValue::Value(*a),
            (MetricValue::NotComputable(_), MetricValue::Value(b)) => MetricValue::Value(*b),
            (MetricValue::Undefined, _) | (_, MetricValue::Undefined) => MetricValue::Undefined,
            (MetricValue::NotComputable(a), MetricValue::NotComputable(b)) => {
                let mut missing = a.clone();
                missing.extend(b.iter().cloned());
                missing.sort();
                missing.dedup();
                MetricValue::NotComputable(missing)
            }
        }
    };

    let instr_sum: Option<u64> = region
        .has_event(events::INSTR_RETIRED)
        .then(|| region.cores.iter().map(|c| c.count(events::INSTR_RETIRED).unwrap_or(0)).sum());

    let scope_set = |mem: MetricValue,
                     l3: MetricValue,
                     cpi: MetricValue,
                     ldst: MetricValue,
                     mflops: MetricValue,
                     fp: FpTotals,
                     instr: Option<u64>|
     -> MetricSet {
        let simd_fraction = if fp.any_event {
            ratio_or_undefined(fp.packed_ops, fp.packed_ops + fp.scalar_ops)
        } else {
            fp_missing_marker()
        };
        let instr_per_flop = match instr {
            Some(i) if fp.any_event => ratio_or_undefined(i as f64, fp.flops),
            Some(_) => fp_missing_marker(),
            None => MetricValue::NotComputable(vec![events::INSTR_RETIRED.to_string()]),
        };
        MetricSet {
            cpi,
            mem_bw_mbs: scale(&mem, cl_factor),
            olc_bw_mbs: scale(&l3, cl_factor),
            mflops,
            simd_fraction,
            instr_per_flop,
            ldst_fraction: ldst,
        }
    };

    let aggregate_fp = fp_totals(|e| {
        region
            .has_event(e)
            .then(|| region.cores.iter().map(|c| c.count(e).unwrap_or(0)).sum())
    });
    let aggregate = scope_set(
        mem_a,
        l3_a,
        cpi_a,
        ldst_a,
        combine_mflops(&dp_a, &sp_a),
        aggregate_fp,
        instr_sum,
    );

    let per_core = (0..ncores)
        .map(|i| {
            let core = &region.cores[i];
            let fp = fp_totals(|e| core.count(e));
            let instr = core.count(events::INSTR_RETIRED);
            (
                core.core_id,
                scope_set(
                    get(&mem_c, i),
                    get(&l3_c, i),
                    get(&cpi_c, i),
                    get(&ldst_c, i),
                    combine_mflops(&get(&dp_c, i), &get(&sp_c, i)),
                    fp,
                    instr,
                ),
            )
        })
        .collect();

    DerivedMetrics {
        aggregate,
        per_core,
    }
}

/// Work distribution of one event across cores. `index` is `1 - min/max`
/// (0 = balanced, →1 = one core starved); `max_over_mean >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImbalanceReport {
    pub event_name: String,
    pub per_core: Vec<(u32, u64)>,
    pub index: f64,
    pub max_over_mean: f64,
}

/// Index and max/mean of a slice of per-core work proxies.
/// All-zero input is defined as perfectly balanced.
pub(crate) fn imbalance_of(values: &[f64]) -> (f64, f64) {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return (0.0, 1.0);
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (1.0 - min / max, max / mean)
}

pub fn imbalance_index(
    region: &RegionMeasurement,
    event_name: &str,
) -> Result<ImbalanceReport, AnalysisError> {
    if region.cores.is_empty() || !region.has_event(event_name) {
        return Err(AnalysisError::UnknownEvent(event_name.to_string()));
    }
    let per_core: Vec<(u32, u64)> = region
        .cores
        .iter()
        .map(|c| (c.core_id, c.count(event_name).unwrap_or(0)))
        .collect();
    let values: Vec<f64> = per_core.iter().map(|(_, v)| *v as f64).collect();
    let (index, max_over_mean) = imbalance_of(&values);
    Ok(ImbalanceReport {
        event_name: event_name.to_string(),
        per_core,
        index,
        max_over_mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingShape {
    Linear,
    Saturating,
    Degrading,
    Irregular,
}

impl ScalingShape {
    pub fn name(&self) -> &'static str {
        match self {
            ScalingShape::Linear => "linear",
            ScalingShape::Saturating => "saturating",
            ScalingShape::Degrading => "degrading",
            ScalingShape::Irregular => "irregular",
        }
    }
}

/// Speedups relative to the smallest measured thread count, plus the curve shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingClassification {
    /// (thread count, speedup); the first entry is 1 by construction.
    pub speedups: Vec<(u32, f64)>,
    pub shape: ScalingShape,
    /// Thread count after which marginal gains stay below `sat_slope`
    /// (present only for saturating curves).
    pub saturation_point: Option<u32>,
}

pub fn validate_series(series: &ScalingSeries) -> Result<(), AnalysisError> {
    let mut prev: Option<u32> = None;
    for p in &series.points {
        if let Some(prev) = prev {
            if p.threads <= prev {
                return Err(AnalysisError::InvalidSeries(
                    "thread counts must be strictly increasing".into(),
                ));
            }
        } else if p.threads < 1 {
            return Err(AnalysisError::InvalidSeries(
                "first point must have thread_count >= 1".into(),
            ));
        }
        prev = Some(p.threads);
        match &p.value {
            SeriesValue::RuntimeS(t) if !(*t > 0.0) => {
                return Err(AnalysisError::InvalidSeries("runtimes must be > 0".into()))
            }
            SeriesValue::Performance { value, .. } if !(*value > 0.0) => {
                return Err(AnalysisError::InvalidSeries(
                    "performance values must be > 0".into(),
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Classify a speedup curve. Speedup is relative to the smallest measured
/// thread count: `runtime(first)/runtime(n)` for runtime points,
/// `perf(n)/perf(first)` for performance points.
pub fn speedup_curve(
    series: &ScalingSeries,
    thresholds: &Thresholds,
) -> Result<ScalingClassification, AnalysisError> {
    if series.points.len() < 2 {
        return Err(AnalysisError::TooFewPoints {
            needed: 2,
            got: series.points.len(),
        });
    }
    validate_series(series)?;

    let speedup_value = |p: &SeriesValue, first: &SeriesValue| -> Result<f64, AnalysisError> {
        match (first, p) {
            (SeriesValue::RuntimeS(t0), SeriesValue::RuntimeS(t)) => Ok(t0 / t),
            (SeriesValue::Performance { value: p0, .. }, SeriesValue::Performance { value, .. }) => {
                Ok(value / p0)
            }
            _ => Err(AnalysisError::InvalidSeries(
                "mixed runtime and performance points".into(),
            )),
        }
    };

    let first = &series.points[0];
    let speedups: Vec<(u32, f64)> = series
        .points
        .iter()
        .map(|p| Ok((p.threads, speedup_value(&p.value, &first.value)?)))
        .collect::<Result<_, AnalysisError>>()?;

    let n = speedups.len();
    let degrading = speedups
        .windows(2)
        .any(|w| w[1].1 < w[0].1 - thresholds.eps);
    let gain = |a: &(u32, f64), b: &(u32, f64)| (b.1 - a.1) / (b.0 - a.0) as f64;
    let final_gain = gain(&speedups[n - 2], &speedups[n - 1]);
    let thread_ratio = speedups[n - 1].0 as f64 / speedups[0].0 as f64;

    let shape = if degrading {
        ScalingShape::Degrading
    } else if final_gain < thresholds.sat_slope {
        ScalingShape::Saturating
    } else if speedups[n - 1].1 >= thresholds.lin_frac * thread_ratio {
        ScalingShape::Linear
    } else {
        ScalingShape::Irregular
    };

    let saturation_point = (shape == ScalingShape::Saturating).then(|| {
        // Walk back while marginal gains stay below the slope cutoff.
        let mut j = n - 1;
        while j >= 1 && gain(&speedups[j - 1], &speedups[j]) < thresholds.sat_slope {
            j -= 1;
        }
        speedups[j].0
    });

    Ok(ScalingClassification {
        speedups,
        shape,
        saturation_point,
    })
}

/// Relative change of an event's total between two runs of the same work:
/// `|sum(before) - sum(after)| / sum(before)`.
pub fn balance_work_conservation(
    before: &RegionMeasurement,
    after: &RegionMeasurement,
    event: &str,
) -> Result<f64, AnalysisError> {
    let total = |region: &RegionMeasurement| -> Result<u64, AnalysisError> {
        if !region.has_event(event) {
            return Err(AnalysisError::UnknownEvent(event.to_string()));
        }
        Ok(region.cores.iter().map(|c| c.count(event).unwrap_or(0)).sum())
    };
    let b = total(before)? as f64;
    let a = total(after)? as f64;
    if b == 0.0 {
        return Ok(if a == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok((b - a).abs() / b)
}

/// Runtime ratio of two runs of the same job (e.g. before/after a fix).
pub fn before_after_speedup(before_s: f64, after_s: f64) -> f64 {
    before_s / after_s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::{CoreMeasurement, ScalingPoint};

    pub(crate) fn region_from_counts(event: &str, counts: &[u64], wall: f64) -> RegionMeasurement {
        RegionMeasurement {
            region_name: "r".into(),
            wall_time_s: wall,
            cores: counts
                .iter()
                .enumerate()
                .map(|(i, v)| CoreMeasurement {
                    core_id: i as u32,
                    counts: [(event.to_string(), *v)].into_iter().collect(),
                })
                .collect(),
            timeline: None,
        }
    }

    const TABLE3: [u64; 6] = [
        27_400_000_000,
        93_900_000_000,
        92_300_000_000,
        93_000_000_000,
        92_900_000_000,
        30_700_000_000,
    ];
    const TABLE4: [u64; 6] = [
        71_600_000_000,
        71_700_000_000,
        71_600_000_000,
        71_700_000_000,
        71_700_000_000,
        71_700_000_000,
    ];

    #[test]
    fn imbalance_on_unbalanced_packed_counts() {
        let region = region_from_counts("FP_OPS_PACKED_SP", &TABLE3, 61.72);
        let report = imbalance_index(&region, "FP_OPS_PACKED_SP").unwrap();
        assert!((report.index - 0.7082).abs() < 1e-3, "{}", report.index);
        assert!((report.max_over_mean - 1.310).abs() < 1e-3, "{}", report.max_over_mean);
    }

    #[test]
    fn imbalance_on_balanced_counts() {
        let region = region_from_counts("FP_OPS_PACKED_SP", &TABLE4, 43.9);
        let report = imbalance_index(&region, "FP_OPS_PACKED_SP").unwrap();
        assert!((report.index - 0.0014).abs() < 5e-4, "{}", report.index);
    }

    #[test]
    fn imbalance_edge_cases() {
        let region = region_from_counts("E", &[5, 5, 5], 1.0);
        assert_eq!(imbalance_index(&region, "E").unwrap().index, 0.0);
        let region = region_from_counts("E", &[0, 0], 1.0);
        let r = imbalance_index(&region, "E").unwrap();
        assert_eq!(r.index, 0.0);
        assert_eq!(r.max_over_mean, 1.0);
        assert!(matches!(
            imbalance_index(&region, "NOPE"),
            Err(AnalysisError::UnknownEvent(_))
        ));
    }

    fn runtime_series(threads_runtimes: &[(u32, f64)]) -> ScalingSeries {
        ScalingSeries {
            label: "t".into(),
            points: threads_runtimes
                .iter()
                .map(|(n, t)| ScalingPoint {
                    threads: *n,
                    value: SeriesValue::RuntimeS(*t),
                })
                .collect(),
            sessions: vec![],
        }
    }

    #[test]
    fn perfect_scaling_is_linear() {
        let series = runtime_series(&[(1, 60.0), (2, 30.0), (3, 20.0), (4, 15.0)]);
        let c = speedup_curve(&series, &Thresholds::default()).unwrap();
        assert_eq!(c.shape, ScalingShape::Linear);
        let expected = [1.0, 2.0, 3.0, 4.0];
        for ((_, s), e) in c.speedups.iter().zip(expected) {
            assert!((s - e).abs() < 1e-12);
        }
    }

    #[test]
    fn flattening_curve_saturates_at_three_threads() {
        // speedups [1, 1.9, 2.0, 2.0]
        let series = runtime_series(&[(1, 60.0), (2, 60.0 / 1.9), (3, 30.0), (4, 30.0)]);
        let c = speedup_curve(&series, &Thresholds::default()).unwrap();
        assert_eq!(c.shape, ScalingShape::Saturating);
        assert_eq!(c.saturation_point, Some(3));
    }

    #[test]
    fn shrinking_speedup_is_degrading() {
        // speedups [1, 1.8, 1.5, 1.2]
        let series = runtime_series(&[(1, 60.0), (2, 60.0 / 1.8), (3, 40.0), (4, 50.0)]);
        let c = speedup_curve(&series, &Thresholds::default()).unwrap();
        assert_eq!(c.shape, ScalingShape::Degrading);
        assert_eq!(c.saturation_point, None);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let series = runtime_series(&[(1, 60.0)]);
        assert!(matches!(
            speedup_curve(&series, &Thresholds::default()),
            Err(AnalysisError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn work_is_conserved_between_table3_and_table4() {
        let before = region_from_counts("FP_OPS_PACKED_SP", &TABLE3, 61.72);
        let after = region_from_counts("FP_OPS_PACKED_SP", &TABLE4, 43.9);
        let rel = balance_work_conservation(&before, &after, "FP_OPS_PACKED_SP").unwrap();
        assert!((rel - 0.00046).abs() < 5e-5, "{rel}");
        assert_eq!(
            balance_work_conservation(&before, &before, "FP_OPS_PACKED_SP").unwrap(),
            0.0
        );
        let doubled = region_from_counts(
            "FP_OPS_PACKED_SP",
            &TABLE3.map(|v| v * 2),
            61.72,
        );
        assert_eq!(
            balance_work_conservation(&before, &doubled, "FP_OPS_PACKED_SP").unwrap(),
            1.0
        );
    }

    #[test]
    fn before_after_ratio() {
        let s = before_after_speedup(61.72, 43.9);
        assert!((s - 1.406).abs() < 1e-3, "{s}");
    }
}
