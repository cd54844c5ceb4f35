//! Performance groups: named event sets with derived-metric formulas.
//!
//! A group file declares which counter slot measures which event and how to
//! combine the slots into metrics (see the grammar in `docs/formats.md`).
//! Groups are immutable after parse; evaluation is pure.

mod parser;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::session::RegionMeasurement;

pub use parser::{parse_group_file, print_expr, print_group};

/// Arithmetic expression over counter slots, numeric literals and the builtin
/// `time` variable (region wall time in seconds).
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    /// A non-negative literal; negative constants parse as `Neg(Number)`.
    Number(f64),
    Slot(String),
    Time,
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl Expr {
    /// All slot names referenced by this expression.
    pub fn slots(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_slots(&mut out);
        out
    }

    fn collect_slots(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Slot(s) => {
                out.insert(s.clone());
            }
            Expr::Neg(inner) => inner.collect_slots(out),
            Expr::Bin(_, l, r) => {
                l.collect_slots(out);
                r.collect_slots(out);
            }
            Expr::Number(_) | Expr::Time => {}
        }
    }
}

/// One line of an EVENTSET section: this slot counts this event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventSetEntry {
    pub counter_slot: String,
    pub event_name: String,
}

/// A named metric formula; `unit` is the free-text tag from the group file
/// (`NAME[unit]`), empty when none was given.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricFormula {
    pub metric_name: String,
    pub unit: String,
    pub expression: Expr,
}

/// A parsed performance group: event set plus ordered metric formulas.
#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceGroup {
    pub group_name: String,
    pub short_description: String,
    pub event_set: Vec<EventSetEntry>,
    pub metrics: Vec<MetricFormula>,
}

impl PerformanceGroup {
    pub fn event_for_slot(&self, slot: &str) -> Option<&str> {
        self.event_set
            .iter()
            .find(|e| e.counter_slot == slot)
            .map(|e| e.event_name.as_str())
    }
}

#[derive(Debug, Error)]
pub enum GroupError {
    #[error("syntax error at line {line}, column {col}: {message}")]
    Syntax {
        line: usize,
        col: usize,
        message: String,
    },
    #[error("metric `{metric}` references slot `{slot}` not declared in EVENTSET")]
    UnknownSlot { metric: String, slot: String },
    #[error("duplicate group name `{0}` in registry")]
    DuplicateGroup(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Outcome of evaluating one formula in one scope.
///
/// Division by zero yields `Undefined` rather than an error or a NaN;
/// formulas whose events are absent from the region yield `NotComputable`
/// naming the missing events.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricValue {
    Value(f64),
    Undefined,
    NotComputable(Vec<String>),
}

impl MetricValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            MetricValue::Value(x) => Some(*x),
            _ => None,
        }
    }

    pub fn is_value(&self) -> bool {
        matches!(self, MetricValue::Value(_))
    }
}

impl std::fmt::Display for MetricValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricValue::Value(x) => write!(f, "{x}"),
            MetricValue::Undefined => write!(f, "undefined"),
            MetricValue::NotComputable(missing) => {
                write!(f, "not computable: missing {}", missing.join(", "))
            }
        }
    }
}

/// Result of evaluating one metric over a region: per-core values (aligned
/// with the region's core order) and the aggregate over summed bindings.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricResult {
    pub metric_name: String,
    pub unit: String,
    pub per_core: Vec<MetricValue>,
    pub aggregate: MetricValue,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("slot `{0}` is not bound")]
    UnboundSlot(String),
}

/// Evaluate a formula against explicit slot bindings. Division by zero and
/// non-finite intermediate results become the `Undefined` marker.
pub fn evaluate_formula(
    expr: &Expr,
    bindings: &BTreeMap<String, f64>,
    time: f64,
) -> Result<MetricValue, EvalError> {
    fn eval(expr: &Expr, bindings: &BTreeMap<String, f64>, time: f64) -> Result<Option<f64>, EvalError> {
        Ok(match expr {
            Expr::Number(x) => Some(*x),
            Expr::Time => Some(time),
            Expr::Slot(s) => Some(
                *bindings
                    .get(s)
                    .ok_or_else(|| EvalError::UnboundSlot(s.clone()))?,
            ),
            Expr::Neg(inner) => eval(inner, bindings, time)?.map(|x| -x),
            Expr::Bin(op, l, r) => {
                let (l, r) = (eval(l, bindings, time)?, eval(r, bindings, time)?);
                match (l, r) {
                    (Some(l), Some(r)) => match op {
                        BinOp::Add => Some(l + r),
                        BinOp::Sub => Some(l - r),
                        BinOp::Mul => Some(l * r),
                        BinOp::Div => {
                            if r == 0.0 {
                                None
                            } else {
                                Some(l / r)
                            }
                        }
                    },
                    _ => None,
                }
            }
        })
    }
    Ok(match eval(expr, bindings, time)? {
        Some(x) if x.is_finite() => MetricValue::Value(x),
        _ => MetricValue::Undefined,
    })
}

/// Evaluate every metric of a group against a region: once per core with that
/// core's bindings, and once with bindings summed over all cores. Metrics
/// whose events are missing from the region yield `NotComputable`.
pub fn evaluate_group(group: &PerformanceGroup, region: &RegionMeasurement) -> Vec<MetricResult> {
    let events = region.event_names();
    // Per-core and summed bindings for the slots whose events are present.
    let mut summed: BTreeMap<String, f64> = BTreeMap::new();
    let mut per_core: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new(); region.cores.len()];
    for entry in &group.event_set {
        if !events.contains(&entry.event_name) {
            continue;
        }
        let mut total = 0.0;
        for (core, bindings) in region.cores.iter().zip(per_core.iter_mut()) {
            let v = core.count(&entry.event_name).unwrap_or(0) as f64;
            bindings.insert(entry.counter_slot.clone(), v);
            total += v;
        }
        summed.insert(entry.counter_slot.clone(), total);
    }

    group
        .metrics
        .iter()
        .map(|metric| {
            let missing: Vec<String> = metric
                .expression
                .slots()
                .iter()
                .filter_map(|slot| {
                    let event = group.event_for_slot(slot)?;
                    if events.contains(event) {
                        None
                    } else {
                        Some(event.to_string())
                    }
                })
                .collect();
            if !missing.is_empty() {
                return MetricResult {
                    metric_name: metric.metric_name.clone(),
                    unit: metric.unit.clone(),
                    per_core: vec![MetricValue::NotComputable(missing.clone()); region.cores.len()],
                    aggregate: MetricValue::NotComputable(missing),
                };
            }
            let per_core_values = per_core
                .iter()
                .map(|b| {
                    evaluate_formula(&metric.expression, b, region.wall_time_s)
                        .expect("slots resolved at parse time")
                })
                .collect();
            let aggregate = evaluate_formula(&metric.expression, &summed, region.wall_time_s)
                .expect("slots resolved at parse time");
            MetricResult {
                metric_name: metric.metric_name.clone(),
                unit: metric.unit.clone(),
                per_core: per_core_values,
                aggregate,
            }
        })
        .collect()
}

/// A set of groups keyed by name. Group names are unique; adding a duplicate
/// is an error.
#[derive(Debug, Clone, Default)]
pub struct GroupRegistry {
    groups: BTreeMap<String, PerformanceGroup>,
}

impl GroupRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, group: PerformanceGroup) -> Result<(), GroupError> {
        if self.groups.contains_key(&group.group_name) {
            return Err(GroupError::DuplicateGroup(group.group_name));
        }
        self.groups.insert(group.group_name.clone(), group);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&PerformanceGroup> {
        self.groups.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.groups.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PerformanceGroup> {
        self.groups.values()
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Find a metric by name. Returns the first group (by name order) whose
    /// events are all present in `region`; if none matches, the union of
    /// missing events across defining groups, or `None` if no group defines
    /// the metric at all.
    pub fn resolve_metric(
        &self,
        metric: &str,
        region: &RegionMeasurement,
    ) -> Option<Result<(&PerformanceGroup, &MetricFormula), Vec<String>>> {
        let events = region.event_names();
        let mut missing_union: BTreeSet<String> = BTreeSet::new();
        let mut defined = false;
        for group in self.groups.values() {
            let Some(formula) = group.metrics.iter().find(|m| m.metric_name == metric) else {
                continue;
            };
            defined = true;
            let missing: Vec<String> = formula
                .expression
                .slots()
                .iter()
                .filter_map(|slot| {
                    let event = group.event_for_slot(slot)?;
                    (!events.contains(event)).then(|| event.to_string())
                })
                .collect();
            if missing.is_empty() {
                return Some(Ok((group, formula)));
            }
            missing_union.extend(missing);
        }
        defined.then(|| Err(missing_union.into_iter().collect()))
    }
}

/// The names of the builtin groups, in registry order.
pub const BUILTIN_GROUP_NAMES: [&str; 7] =
    ["CACHE", "CPI", "DATA", "FLOPS_DP", "FLOPS_SP", "L3", "MEM"];

/// The builtin group registry. `CPI` is evaluated in every analysis run; the
/// canonical event schema the groups rely on is documented in `docs/formats.md`.
pub fn builtin_groups() -> GroupRegistry {
    let sources: [(&str, &str); 7] = [
        ("CACHE", include_str!("../../groups/CACHE.txt")),
        ("CPI", include_str!("../../groups/CPI.txt")),
        ("DATA", include_str!("../../groups/DATA.txt")),
        ("FLOPS_DP", include_str!("../../groups/FLOPS_DP.txt")),
        ("FLOPS_SP", include_str!("../../groups/FLOPS_SP.txt")),
        ("L3", include_str!("../../groups/L3.txt")),
        ("MEM", include_str!("../../groups/MEM.txt")),
    ];
    let mut registry = GroupRegistry::new();
    for (name, text) in sources {
        let group = parse_group_file(name, text)
            .unwrap_or_else(|e| panic!("builtin group {name} must parse: {e}"));
        registry.add(group).expect("builtin names are unique");
    }
    registry
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::CoreMeasurement;

    fn region_1core(pairs: &[(&str, u64)], wall: f64) -> RegionMeasurement {
        RegionMeasurement {
            region_name: "r".into(),
            wall_time_s: wall,
            cores: vec![CoreMeasurement {
                core_id: 0,
                counts: pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            }],
            timeline: None,
        }
    }

    #[test]
    fn minimal_group_parses_and_evaluates() {
        let text = "\
SHORT Cycles per instruction
EVENTSET
FIXC0 INSTR_RETIRED
FIXC1 CPU_CLK_UNHALTED
METRICS
CPI FIXC1/FIXC0
";
        let group = parse_group_file("CPI", text).unwrap();
        assert_eq!(group.metrics.len(), 1);
        let region = region_1core(&[("INSTR_RETIRED", 100), ("CPU_CLK_UNHALTED", 200)], 1.0);
        let results = evaluate_group(&group, &region);
        assert_eq!(results[0].per_core[0], MetricValue::Value(2.0));
        assert_eq!(results[0].aggregate, MetricValue::Value(2.0));
    }

    #[test]
    fn formula_with_exponent_literal() {
        let text = "\
SHORT Flops
EVENTSET
PMC0 FP_OPS_PACKED_DP
PMC1 FP_OPS_SCALAR_DP
METRICS
DP_MFLOPS 1.0E-06*(PMC0*2.0+PMC1)/time
";
        let group = parse_group_file("F", text).unwrap();
        let expr = &group.metrics[0].expression;
        // 1.0e-6 * (0*2 + 0) / t == 0
        let bindings: BTreeMap<String, f64> =
            [("PMC0".to_string(), 0.0), ("PMC1".to_string(), 0.0)].into();
        assert_eq!(
            evaluate_formula(expr, &bindings, 3.0).unwrap(),
            MetricValue::Value(0.0)
        );
    }

    #[test]
    fn unknown_slot_is_reported() {
        let text = "\
SHORT Bad
EVENTSET
PMC0 SOMETHING
METRICS
M PMC9*2.0
";
        match parse_group_file("B", text) {
            Err(GroupError::UnknownSlot { metric, slot }) => {
                assert_eq!(metric, "M");
                assert_eq!(slot, "PMC9");
            }
            other => panic!("expected UnknownSlot, got {other:?}"),
        }
    }

    #[test]
    fn division_by_zero_is_undefined() {
        let bindings: BTreeMap<String, f64> =
            [("A".to_string(), 5.0), ("B".to_string(), 0.0)].into();
        let expr = Expr::Bin(
            BinOp::Div,
            Box::new(Expr::Slot("A".into())),
            Box::new(Expr::Slot("B".into())),
        );
        assert_eq!(
            evaluate_formula(&expr, &bindings, 1.0).unwrap(),
            MetricValue::Undefined
        );
    }

    #[test]
    fn table2_cpi_from_back_computed_cycles() {
        let bindings: BTreeMap<String, f64> = [
            ("FIXC0".to_string(), 1.25420e12),
            ("FIXC1".to_string(), 5.52928e11),
        ]
        .into();
        let expr = Expr::Bin(
            BinOp::Div,
            Box::new(Expr::Slot("FIXC1".into())),
            Box::new(Expr::Slot("FIXC0".into())),
        );
        let got = evaluate_formula(&expr, &bindings, 1.0).unwrap().as_f64().unwrap();
        assert!((got - 0.440861).abs() / 0.440861 < 1e-6, "{got}");
    }

    #[test]
    fn missing_events_yield_not_computable() {
        let registry = builtin_groups();
        let flops_sp = registry.get("FLOPS_SP").unwrap();
        // Packed counts only; the scalar event is absent.
        let region = region_1core(&[("FP_OPS_PACKED_SP", 1000)], 1.0);
        let results = evaluate_group(flops_sp, &region);
        let by_name = |n: &str| results.iter().find(|r| r.metric_name == n).unwrap();
        assert!(by_name("PACKED_SP_MUOPS").aggregate.is_value());
        match &by_name("SP_MFLOPS").aggregate {
            MetricValue::NotComputable(missing) => {
                assert!(missing.contains(&"FP_OPS_SCALAR_SP".to_string()))
            }
            other => panic!("expected NotComputable, got {other:?}"),
        }
    }

    #[test]
    fn builtin_registry_has_exactly_the_seven_groups() {
        let registry = builtin_groups();
        let names: Vec<&str> = registry.names().collect();
        assert_eq!(names, BUILTIN_GROUP_NAMES);
        let cpi = registry.get("CPI").unwrap();
        assert!(cpi.metrics.iter().any(|m| m.metric_name == "CPI"));
        assert!(registry.get("NOPE").is_none());
    }

    #[test]
    fn aggregate_uses_summed_bindings_not_mean_of_ratios() {
        let registry = builtin_groups();
        let cpi = registry.get("CPI").unwrap();
        let region = RegionMeasurement {
            region_name: "r".into(),
            wall_time_s: 1.0,
            cores: vec![
                CoreMeasurement {
                    core_id: 0,
                    counts: [("INSTR_RETIRED".to_string(), 100), ("CPU_CLK_UNHALTED".to_string(), 100)]
                        .into_iter()
                        .collect(),
                },
                CoreMeasurement {
                    core_id: 1,
                    counts: [("INSTR_RETIRED".to_string(), 100), ("CPU_CLK_UNHALTED".to_string(), 400)]
                        .into_iter()
                        .collect(),
                },
            ],
            timeline: None,
        };
        let results = evaluate_group(cpi, &region);
        let r = results.iter().find(|r| r.metric_name == "CPI").unwrap();
        let aggregate = r.aggregate.as_f64().unwrap();
        let mean_of_per_core = (r.per_core[0].as_f64().unwrap() + r.per_core[1].as_f64().unwrap()) / 2.0;
        assert_eq!(aggregate, 500.0 / 200.0);
        assert_ne!(aggregate, mean_of_per_core);
    }
}
