//! Measurement data model: sessions, regions, per-core event counts and
//! timeline samples, plus loading, validation and aggregation.
//!
//! Counts are stored as exact integers; derived metrics are computed in
//! double precision. Sessions are immutable after load and every operation
//! here is a pure function over loaded data.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::jsonutil::{
    as_array, as_object, check_keys, count_value, get_f64, get_string, get_u32, parse_document,
    JsonError,
};

/// A single raw event reading: canonical event name, optional counter slot
/// label (e.g. `PMC0`), and the counted value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventCount {
    pub event_name: String,
    pub counter_slot: Option<String>,
    pub value: u64,
}

impl EventCount {
    pub fn new(event_name: impl Into<String>, value: u64) -> Result<Self, SessionError> {
        let event_name = event_name.into();
        if !is_valid_event_name(&event_name) {
            return Err(SessionError::Parse {
                context: event_name.clone(),
                message: "event names must match [A-Z][A-Z0-9_]*".into(),
            });
        }
        Ok(EventCount {
            event_name,
            counter_slot: None,
            value,
        })
    }
}

/// Canonical event identifiers are uppercase with underscores: `[A-Z][A-Z0-9_]*`.
pub fn is_valid_event_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_uppercase() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_')
}

/// Event counts observed on one core, keyed by canonical event name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoreMeasurement {
    pub core_id: u32,
    pub counts: BTreeMap<String, u64>,
}

impl CoreMeasurement {
    pub fn new(core_id: u32) -> Self {
        CoreMeasurement {
            core_id,
            counts: BTreeMap::new(),
        }
    }

    pub fn count(&self, event: &str) -> Option<u64> {
        self.counts.get(event).copied()
    }

    /// Iterate the counts as [`EventCount`] items.
    pub fn event_counts(&self) -> impl Iterator<Item = EventCount> + '_ {
        self.counts.iter().map(|(name, v)| EventCount {
            event_name: name.clone(),
            counter_slot: None,
            value: *v,
        })
    }
}

/// One timeline sample: counts are deltas accumulated within `(t_s - dt_s, t_s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimelineSample {
    /// Sample end time in seconds.
    pub t_s: f64,
    /// Sample width in seconds.
    pub dt_s: f64,
    pub per_core_counts: Vec<CoreMeasurement>,
}

/// Measurements for one instrumented code region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMeasurement {
    pub region_name: String,
    pub wall_time_s: f64,
    pub cores: Vec<CoreMeasurement>,
    pub timeline: Option<Vec<TimelineSample>>,
}

impl RegionMeasurement {
    /// The common event-name set of this region (validated identical on all cores).
    pub fn event_names(&self) -> BTreeSet<String> {
        self.cores
            .first()
            .map(|c| c.counts.keys().cloned().collect())
            .unwrap_or_default()
    }

    pub fn has_event(&self, event: &str) -> bool {
        self.cores.iter().all(|c| c.counts.contains_key(event))
    }
}

/// A full measurement run: one machine, a fixed set of cores, one or more regions.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSession {
    pub session_id: String,
    /// Name of the machine model this session was recorded on.
    pub machine_ref: String,
    pub thread_count: u32,
    pub core_set: Vec<u32>,
    pub regions: Vec<RegionMeasurement>,
    pub notes: String,
    /// Relative tolerance for timeline-sum-vs-aggregate consistency; 0 means exact.
    pub timeline_tolerance_rel: f64,
}

/// One point of a thread-scaling campaign.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingPoint {
    pub threads: u32,
    pub value: SeriesValue,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SeriesValue {
    /// Wall-clock runtime in seconds (lower is better).
    RuntimeS(f64),
    /// A performance value with a free-text unit (higher is better).
    Performance { value: f64, unit: String },
}

/// Runtimes or performance values across thread counts, optionally backed by
/// the full sessions the points came from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScalingSeries {
    pub label: String,
    pub points: Vec<ScalingPoint>,
    pub sessions: Vec<MeasurementSession>,
}

/// An invariant violation found by [`validate_session`]. Violations are data,
/// not errors: a loader turns a non-empty list into [`SessionError::Validation`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub type_name: &'static str,
    pub field: String,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}: {}", self.type_name, self.field, self.rule)
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(Violation::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at {context}: {message}")]
    Parse { context: String, message: String },
    #[error("validation failed: {}", format_violations(.0))]
    Validation(Vec<Violation>),
    #[error("unknown event `{0}`")]
    UnknownEvent(String),
    #[error("region `{0}` has no timeline")]
    NoTimeline(String),
    #[error("no timeline samples in ({t0}, {t1}]")]
    EmptySlice { t0: f64, t1: f64 },
    #[error("invalid slice range t0={t0}, t1={t1}: need 0 <= t0 < t1")]
    InvalidSliceRange { t0: f64, t1: f64 },
}

impl From<JsonError> for SessionError {
    fn from(e: JsonError) -> Self {
        SessionError::Parse {
            context: e.path,
            message: e.message,
        }
    }
}

/// Load a session file. JSON is the primary format; files ending in `.csv`
/// go through the simplified CSV importer. Strict mode rejects unknown keys.
pub fn load_session(path: impl AsRef<Path>) -> Result<MeasurementSession, SessionError> {
    load_session_with(path, true)
}

pub fn load_session_with(
    path: impl AsRef<Path>,
    strict: bool,
) -> Result<MeasurementSession, SessionError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| SessionError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if path.extension().and_then(|e| e.to_str()) == Some("csv") {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("csv-import");
        return import_csv(&text, stem);
    }
    parse_session_str(&text, strict)
}

/// Parse a session from JSON text and validate all invariants.
pub fn parse_session_str(text: &str, strict: bool) -> Result<MeasurementSession, SessionError> {
    let doc = parse_document(text)?;
    let session = session_from_value(&doc, strict)?;
    let violations = validate_session(&session);
    if violations.is_empty() {
        Ok(session)
    } else {
        Err(SessionError::Validation(violations))
    }
}

const SESSION_KEYS: &[&str] = &[
    "session_id",
    "machine_ref",
    "thread_count",
    "core_set",
    "aliases",
    "notes",
    "timeline_tolerance_rel",
    "regions",
];

fn session_from_value(doc: &Value, strict: bool) -> Result<MeasurementSession, SessionError> {
    let obj = as_object(doc, "$")?;
    check_keys(obj, SESSION_KEYS, strict, "$")?;

    let session_id = get_string(obj, "session_id", "$")?;
    let machine_ref = get_string(obj, "machine_ref", "$")?;
    let thread_count = get_u32(obj, "thread_count", "$")?;
    let core_set = parse_core_ids(obj, "core_set", "$")?;

    let aliases: BTreeMap<String, String> = match obj.get("aliases") {
        Some(v) => {
            let map = as_object(v, "$.aliases")?;
            let mut out = BTreeMap::new();
            for (k, v) in map {
                let canon = v.as_str().ok_or_else(|| SessionError::Parse {
                    context: format!("$.aliases.{k}"),
                    message: "alias target must be a string".into(),
                })?;
                out.insert(k.clone(), canon.to_string());
            }
            out
        }
        None => BTreeMap::new(),
    };

    let notes = match obj.get("notes") {
        Some(v) => v
            .as_str()
            .ok_or_else(|| SessionError::Parse {
                context: "$.notes".into(),
                message: "expected a string".into(),
            })?
            .to_string(),
        None => String::new(),
    };

    let timeline_tolerance_rel = match obj.get("timeline_tolerance_rel") {
        Some(v) => v.as_f64().ok_or_else(|| SessionError::Parse {
            context: "$.timeline_tolerance_rel".into(),
            message: "expected a number".into(),
        })?,
        None => 0.0,
    };

    let regions_v = as_array(
        obj.get("regions").ok_or_else(|| SessionError::Parse {
            context: "$".into(),
            message: "missing required key `regions`".into(),
        })?,
        "$.regions",
    )?;
    let mut regions = Vec::with_capacity(regions_v.len());
    for (i, rv) in regions_v.iter().enumerate() {
        regions.push(region_from_value(
            rv,
            &aliases,
            strict,
            &format!("$.regions[{i}]"),
        )?);
    }

    Ok(MeasurementSession {
        session_id,
        machine_ref,
        thread_count,
        core_set,
        regions,
        notes,
        timeline_tolerance_rel,
    })
}

fn parse_core_ids(obj: &Map<String, Value>, key: &str, path: &str) -> Result<Vec<u32>, SessionError> {
    let arr = as_array(
        obj.get(key).ok_or_else(|| SessionError::Parse {
            context: path.to_string(),
            message: format!("missing required key `{key}`"),
        })?,
        &format!("{path}.{key}"),
    )?;
    arr.iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_u64()
                .and_then(|n| u32::try_from(n).ok())
                .ok_or_else(|| SessionError::Parse {
                    context: format!("{path}.{key}[{i}]"),
                    message: "expected a non-negative integer core id".into(),
                })
        })
        .collect()
}

fn region_from_value(
    v: &Value,
    aliases: &BTreeMap<String, String>,
    strict: bool,
    path: &str,
) -> Result<RegionMeasurement, SessionError> {
    let obj = as_object(v, path)?;
    check_keys(
        obj,
        &["region_name", "wall_time_s", "cores", "timeline"],
        strict,
        path,
    )?;
    let region_name = get_string(obj, "region_name", path)?;
    let wall_time_s = get_f64(obj, "wall_time_s", path)?;
    let cores = cores_from_value(
        obj.get("cores").ok_or_else(|| SessionError::Parse {
            context: path.to_string(),
            message: "missing required key `cores`".into(),
        })?,
        aliases,
        strict,
        &format!("{path}.cores"),
    )?;
    let timeline = match obj.get("timeline") {
        Some(tv) => {
            let arr = as_array(tv, &format!("{path}.timeline"))?;
            let mut samples = Vec::with_capacity(arr.len());
            for (i, sv) in arr.iter().enumerate() {
                let spath = format!("{path}.timeline[{i}]");
                let sobj = as_object(sv, &spath)?;
                check_keys(sobj, &["t_s", "dt_s", "per_core_counts"], strict, &spath)?;
                let t_s = get_f64(sobj, "t_s", &spath)?;
                let dt_s = get_f64(sobj, "dt_s", &spath)?;
                let per_core_counts = cores_from_value(
                    sobj.get("per_core_counts")
                        .ok_or_else(|| SessionError::Parse {
                            context: spath.clone(),
                            message: "missing required key `per_core_counts`".into(),
                        })?,
                    aliases,
                    strict,
                    &format!("{spath}.per_core_counts"),
                )?;
                samples.push(TimelineSample {
                    t_s,
                    dt_s,
                    per_core_counts,
                });
            }
            Some(samples)
        }
        None => None,
    };
    Ok(RegionMeasurement {
        region_name,
        wall_time_s,
        cores,
        timeline,
    })
}

fn cores_from_value(
    v: &Value,
    aliases: &BTreeMap<String, String>,
    strict: bool,
    path: &str,
) -> Result<Vec<CoreMeasurement>, SessionError> {
    let arr = as_array(v, path)?;
    let mut cores = Vec::with_capacity(arr.len());
    for (i, cv) in arr.iter().enumerate() {
        let cpath = format!("{path}[{i}]");
        let obj = as_object(cv, &cpath)?;
        check_keys(obj, &["core_id", "counts"], strict, &cpath)?;
        let core_id = get_u32(obj, "core_id", &cpath)?;
        let counts_obj = as_object(
            obj.get("counts").ok_or_else(|| SessionError::Parse {
                context: cpath.clone(),
                message: "missing required key `counts`".into(),
            })?,
            &format!("{cpath}.counts"),
        )?;
        let mut counts = BTreeMap::new();
        for (raw_name, val) in counts_obj {
            let name = aliases.get(raw_name).cloned().unwrap_or_else(|| raw_name.clone());
            let value = count_value(val, &format!("{cpath}.counts.{raw_name}"))?;
            if counts.insert(name.clone(), value).is_some() {
                return Err(SessionError::Parse {
                    context: format!("{cpath}.counts"),
                    message: format!("duplicate event `{name}` after alias resolution"),
                });
            }
        }
        cores.push(CoreMeasurement { core_id, counts });
    }
    Ok(cores)
}

/// Check every data-model invariant. Returns an empty list iff the session is
/// valid; each violation names the type, field and broken rule.
pub fn validate_session(session: &MeasurementSession) -> Vec<Violation> {
    let mut out = Vec::new();
    let v = |type_name: &'static str, field: &str, rule: String| Violation {
        type_name,
        field: field.to_string(),
        rule,
    };

    if session.thread_count < 1 {
        out.push(v(
            "MeasurementSession",
            "thread_count",
            "must be >= 1".into(),
        ));
    }
    if session.thread_count as usize != session.core_set.len() {
        out.push(v(
            "MeasurementSession",
            "thread_count",
            format!(
                "must equal core_set length ({} != {})",
                session.thread_count,
                session.core_set.len()
            ),
        ));
    }
    let core_set: BTreeSet<u32> = session.core_set.iter().copied().collect();
    if core_set.len() != session.core_set.len() {
        out.push(v(
            "MeasurementSession",
            "core_set",
            "core ids must be unique".into(),
        ));
    }

    for region in &session.regions {
        let rfield = |f: &str| format!("{}.{}", region.region_name, f);
        if !(region.wall_time_s > 0.0 && region.wall_time_s.is_finite()) {
            out.push(v(
                "RegionMeasurement",
                &rfield("wall_time_s"),
                "must be > 0".into(),
            ));
        }
        let mut seen_cores = BTreeSet::new();
        for core in &region.cores {
            if !seen_cores.insert(core.core_id) {
                out.push(v(
                    "CoreMeasurement",
                    &rfield("cores"),
                    format!("duplicate core_id {}", core.core_id),
                ));
            }
            if !core_set.contains(&core.core_id) {
                out.push(v(
                    "MeasurementSession",
                    &rfield("cores"),
                    format!("core {} not in session core_set", core.core_id),
                ));
            }
            for name in core.counts.keys() {
                if !is_valid_event_name(name) {
                    out.push(v(
                        "EventCount",
                        &rfield("counts"),
                        format!("event name `{name}` must match [A-Z][A-Z0-9_]*"),
                    ));
                }
            }
        }
        if let Some(first) = region.cores.first() {
            let reference: BTreeSet<&String> = first.counts.keys().collect();
            for core in &region.cores[1..] {
                let this: BTreeSet<&String> = core.counts.keys().collect();
                if this != reference {
                    out.push(v(
                        "RegionMeasurement",
                        &rfield("cores"),
                        format!(
                            "ragged event set: core {} reports {} events, core {} reports {}",
                            first.core_id,
                            reference.len(),
                            core.core_id,
                            this.len()
                        ),
                    ));
                    break;
                }
            }
        }
        if let Some(timeline) = &region.timeline {
            let mut prev_t = -1.0_f64;
            for (i, sample) in timeline.iter().enumerate() {
                if !(sample.dt_s > 0.0) {
                    out.push(v(
                        "TimelineSample",
                        &rfield(&format!("timeline[{i}].dt_s")),
                        "must be > 0".into(),
                    ));
                }
                if sample.t_s < 0.0 {
                    out.push(v(
                        "TimelineSample",
                        &rfield(&format!("timeline[{i}].t_s")),
                        "must be >= 0".into(),
                    ));
                }
                if sample.t_s <= prev_t {
                    out.push(v(
                        "TimelineSample",
                        &rfield(&format!("timeline[{i}].t_s")),
                        "sample times must be strictly increasing".into(),
                    ));
                }
                prev_t = sample.t_s;
                let region_ids: BTreeSet<u32> = region.cores.iter().map(|c| c.core_id).collect();
                let sample_ids: BTreeSet<u32> =
                    sample.per_core_counts.iter().map(|c| c.core_id).collect();
                if region_ids != sample_ids {
                    out.push(v(
                        "TimelineSample",
                        &rfield(&format!("timeline[{i}].per_core_counts")),
                        "must cover exactly the region's cores".into(),
                    ));
                }
            }
            // Sum of deltas must match the region aggregate within the declared tolerance.
            let tol = session.timeline_tolerance_rel.max(0.0);
            for core in &region.cores {
                for (event, total) in &core.counts {
                    let sum: u64 = timeline
                        .iter()
                        .flat_map(|s| &s.per_core_counts)
                        .filter(|c| c.core_id == core.core_id)
                        .filter_map(|c| c.count(event))
                        .sum();
                    let diff = sum.abs_diff(*total) as f64;
                    let bound = tol * (*total as f64);
                    if diff > bound {
                        out.push(v(
                            "RegionMeasurement",
                            &rfield(&format!("timeline({event}, core {})", core.core_id)),
                            format!(
                                "timeline deltas sum to {sum}, aggregate is {total} (tolerance {tol})"
                            ),
                        ));
                    }
                }
            }
        }
    }
    out
}

/// Summary statistics of one event across the cores of a region.
#[derive(Debug, Clone, PartialEq)]
pub struct CountStats {
    pub sum: u64,
    pub min: u64,
    pub max: u64,
    pub mean: f64,
    pub per_core: Vec<(u32, u64)>,
}

/// Aggregate one event across a region's cores.
pub fn aggregate_counts(
    region: &RegionMeasurement,
    event: &str,
) -> Result<CountStats, SessionError> {
    if region.cores.is_empty() || !region.has_event(event) {
        return Err(SessionError::UnknownEvent(event.to_string()));
    }
    let per_core: Vec<(u32, u64)> = region
        .cores
        .iter()
        .map(|c| (c.core_id, c.count(event).unwrap_or(0)))
        .collect();
    let values: Vec<u64> = per_core.iter().map(|(_, v)| *v).collect();
    let sum: u64 = values.iter().sum();
    let min = *values.iter().min().unwrap();
    let max = *values.iter().max().unwrap();
    let mean = sum as f64 / values.len() as f64;
    Ok(CountStats {
        sum,
        min,
        max,
        mean,
        per_core,
    })
}

/// Restrict a region to the timeline samples with `t0 < t_s <= t1`. The
/// returned region's per-core counts are the sums of the included deltas and
/// its wall time is the covered span.
pub fn slice_timeline(
    region: &RegionMeasurement,
    t0: f64,
    t1: f64,
) -> Result<RegionMeasurement, SessionError> {
    if !(t0 >= 0.0 && t0 < t1) {
        return Err(SessionError::InvalidSliceRange { t0, t1 });
    }
    let timeline = region
        .timeline
        .as_ref()
        .ok_or_else(|| SessionError::NoTimeline(region.region_name.clone()))?;
    let included: Vec<&TimelineSample> = timeline
        .iter()
        .filter(|s| s.t_s > t0 && s.t_s <= t1)
        .collect();
    if included.is_empty() {
        return Err(SessionError::EmptySlice { t0, t1 });
    }
    let mut cores: Vec<CoreMeasurement> = region
        .cores
        .iter()
        .map(|c| CoreMeasurement::new(c.core_id))
        .collect();
    for sample in &included {
        for sc in &sample.per_core_counts {
            if let Some(core) = cores.iter_mut().find(|c| c.core_id == sc.core_id) {
                for (event, delta) in &sc.counts {
                    *core.counts.entry(event.clone()).or_insert(0) += delta;
                }
            }
        }
    }
    let wall_time_s: f64 = included.iter().map(|s| s.dt_s).sum();
    Ok(RegionMeasurement {
        region_name: region.region_name.clone(),
        wall_time_s,
        cores,
        timeline: Some(included.into_iter().cloned().collect()),
    })
}

/// Serialize a session to the documented JSON schema (keys sorted, stable).
pub fn session_to_json(session: &MeasurementSession) -> Value {
    let cores_json = |cores: &[CoreMeasurement]| -> Value {
        Value::Array(
            cores
                .iter()
                .map(|c| {
                    json!({
                        "core_id": c.core_id,
                        "counts": c.counts.iter().map(|(k, v)| (k.clone(), json!(v))).collect::<Map<_, _>>(),
                    })
                })
                .collect(),
        )
    };
    let mut root = Map::new();
    root.insert("session_id".into(), json!(session.session_id));
    root.insert("machine_ref".into(), json!(session.machine_ref));
    root.insert("thread_count".into(), json!(session.thread_count));
    root.insert("core_set".into(), json!(session.core_set));
    if !session.notes.is_empty() {
        root.insert("notes".into(), json!(session.notes));
    }
    if session.timeline_tolerance_rel > 0.0 {
        root.insert(
            "timeline_tolerance_rel".into(),
            json!(session.timeline_tolerance_rel),
        );
    }
    let regions: Vec<Value> = session
        .regions
        .iter()
        .map(|r| {
            let mut obj = Map::new();
            obj.insert("region_name".into(), json!(r.region_name));
            obj.insert("wall_time_s".into(), json!(r.wall_time_s));
            obj.insert("cores".into(), cores_json(&r.cores));
            if let Some(timeline) = &r.timeline {
                obj.insert(
                    "timeline".into(),
                    Value::Array(
                        timeline
                            .iter()
                            .map(|s| {
                                json!({
                                    "t_s": s.t_s,
                                    "dt_s": s.dt_s,
                                    "per_core_counts": cores_json(&s.per_core_counts),
                                })
                            })
                            .collect(),
                    ),
                );
            }
            Value::Object(obj)
        })
        .collect();
    root.insert("regions".into(), Value::Array(regions));
    Value::Object(root)
}

/// Write a session as pretty-printed JSON. Output is byte-stable for equal sessions.
pub fn write_session(
    session: &MeasurementSession,
    path: impl AsRef<Path>,
) -> Result<(), SessionError> {
    let path = path.as_ref();
    let text = session_to_string(session);
    fs::write(path, text).map_err(|source| SessionError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn session_to_string(session: &MeasurementSession) -> String {
    let mut text = serde_json::to_string_pretty(&session_to_json(session)).expect("serializable");
    text.push('\n');
    text
}

/// Import the simplified CSV layout: data rows `region,core_id,event,value`
/// with sidecar lines `#wall_time_s=<float>` applying to the regions that
/// first appear after them. A `region,core_id,event,value` header row is
/// optional; `#` starts a comment.
pub fn import_csv(text: &str, session_id: &str) -> Result<MeasurementSession, SessionError> {
    let mut wall_time: Option<f64> = None;
    // region name -> (wall_time, core -> counts), in first-seen order
    let mut order: Vec<String> = Vec::new();
    let mut regions: BTreeMap<String, (f64, BTreeMap<u32, BTreeMap<String, u64>>)> =
        BTreeMap::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let ctx = format!("line {}", lineno + 1);
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(value) = rest.trim().strip_prefix("wall_time_s=") {
                let t: f64 = value.trim().parse().map_err(|_| SessionError::Parse {
                    context: ctx,
                    message: format!("invalid wall_time_s value `{value}`"),
                })?;
                wall_time = Some(t);
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields == ["region", "core_id", "event", "value"] {
            continue;
        }
        if fields.len() != 4 {
            return Err(SessionError::Parse {
                context: ctx,
                message: format!("expected 4 fields `region,core_id,event,value`, got {}", fields.len()),
            });
        }
        let region = fields[0].to_string();
        let core_id: u32 = fields[1].parse().map_err(|_| SessionError::Parse {
            context: ctx.clone(),
            message: format!("invalid core_id `{}`", fields[1]),
        })?;
        let event = fields[2].to_string();
        let value: u64 = fields[3].parse().map_err(|_| SessionError::Parse {
            context: ctx.clone(),
            message: format!("invalid count `{}`", fields[3]),
        })?;
        if !regions.contains_key(&region) {
            let t = wall_time.ok_or_else(|| SessionError::Parse {
                context: ctx.clone(),
                message: format!("no #wall_time_s= line seen before region `{region}`"),
            })?;
            order.push(region.clone());
            regions.insert(region.clone(), (t, BTreeMap::new()));
        }
        let (_, cores) = regions.get_mut(&region).unwrap();
        if cores
            .entry(core_id)
            .or_default()
            .insert(event.clone(), value)
            .is_some()
        {
            return Err(SessionError::Parse {
                context: ctx,
                message: format!("duplicate event `{event}` for core {core_id}"),
            });
        }
    }

    if order.is_empty() {
        return Err(SessionError::Parse {
            context: "end of input".into(),
            message: "no data rows found".into(),
        });
    }

    let mut core_ids: BTreeSet<u32> = BTreeSet::new();
    for (_, cores) in regions.values() {
        core_ids.extend(cores.keys().copied());
    }
    let core_set: Vec<u32> = core_ids.into_iter().collect();

    let session = MeasurementSession {
        session_id: session_id.to_string(),
        machine_ref: String::new(),
        thread_count: core_set.len() as u32,
        core_set,
        regions: order
            .iter()
            .map(|name| {
                let (wall_time_s, cores) = &regions[name];
                RegionMeasurement {
                    region_name: name.clone(),
                    wall_time_s: *wall_time_s,
                    cores: cores
                        .iter()
                        .map(|(core_id, counts)| CoreMeasurement {
                            core_id: *core_id,
                            counts: counts.clone(),
                        })
                        .collect(),
                    timeline: None,
                }
            })
            .collect(),
        notes: String::new(),
        timeline_tolerance_rel: 0.0,
    };
    let violations = validate_session(&session);
    if violations.is_empty() {
        Ok(session)
    } else {
        Err(SessionError::Validation(violations))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> String {
        r#"{
            "session_id": "s1",
            "machine_ref": "m",
            "thread_count": 1,
            "core_set": [0],
            "regions": [
                {
                    "region_name": "r0",
                    "wall_time_s": 1.0,
                    "cores": [
                        {"core_id": 0, "counts": {"INSTR_RETIRED": 100, "CPU_CLK_UNHALTED": 100}}
                    ]
                }
            ]
        }"#
        .to_string()
    }

    #[test]
    fn loads_minimal_session() {
        let s = parse_session_str(&minimal_json(), true).unwrap();
        assert_eq!(s.regions.len(), 1);
        assert_eq!(s.regions[0].cores[0].count("INSTR_RETIRED"), Some(100));
    }

    #[test]
    fn ragged_event_set_is_rejected() {
        let text = r#"{
            "session_id": "s", "machine_ref": "m", "thread_count": 2, "core_set": [0, 1],
            "regions": [{
                "region_name": "r", "wall_time_s": 1.0,
                "cores": [
                    {"core_id": 0, "counts": {"A": 1, "B": 2, "C": 3}},
                    {"core_id": 1, "counts": {"A": 1, "B": 2}}
                ]
            }]
        }"#;
        match parse_session_str(text, true) {
            Err(SessionError::Validation(v)) => {
                assert!(v.iter().any(|x| x.rule.contains("ragged event set")), "{v:?}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn strict_mode_rejects_unknown_keys() {
        let text = minimal_json().replace("\"session_id\"", "\"bogus\": 1, \"session_id\"");
        assert!(matches!(
            parse_session_str(&text, true),
            Err(SessionError::Parse { .. })
        ));
        assert!(parse_session_str(&text, false).is_ok());
    }

    #[test]
    fn aliases_rename_events() {
        let text = r#"{
            "session_id": "s", "machine_ref": "m", "thread_count": 1, "core_set": [0],
            "aliases": {"FP_COMP_OPS_EXE_SSE_FP_PACKED": "FP_OPS_PACKED_SP"},
            "regions": [{
                "region_name": "r", "wall_time_s": 1.0,
                "cores": [{"core_id": 0, "counts": {"FP_COMP_OPS_EXE_SSE_FP_PACKED": 42}}]
            }]
        }"#;
        let s = parse_session_str(text, true).unwrap();
        assert_eq!(s.regions[0].cores[0].count("FP_OPS_PACKED_SP"), Some(42));
        assert_eq!(s.regions[0].cores[0].count("FP_COMP_OPS_EXE_SSE_FP_PACKED"), None);
    }

    #[test]
    fn validate_flags_zero_wall_time_and_timeline_order() {
        let mut s = parse_session_str(&minimal_json(), true).unwrap();
        s.regions[0].wall_time_s = 0.0;
        let v = validate_session(&s);
        assert!(v.iter().any(|x| x.field.contains("wall_time_s")));

        let mut s = parse_session_str(&minimal_json(), true).unwrap();
        let core = |v: u64| CoreMeasurement {
            core_id: 0,
            counts: [("INSTR_RETIRED".to_string(), v), ("CPU_CLK_UNHALTED".to_string(), v)]
                .into_iter()
                .collect(),
        };
        s.regions[0].cores = vec![core(100)];
        s.regions[0].timeline = Some(vec![
            TimelineSample { t_s: 0.5, dt_s: 0.5, per_core_counts: vec![core(50)] },
            TimelineSample { t_s: 0.5, dt_s: 0.5, per_core_counts: vec![core(50)] },
        ]);
        let v = validate_session(&s);
        assert!(v.iter().any(|x| x.rule.contains("strictly increasing")), "{v:?}");
    }

    #[test]
    fn aggregate_counts_single_core() {
        let s = parse_session_str(&minimal_json(), true).unwrap();
        let stats = aggregate_counts(&s.regions[0], "INSTR_RETIRED").unwrap();
        assert_eq!(stats.sum, 100);
        assert_eq!(stats.min, 100);
        assert_eq!(stats.max, 100);
        assert_eq!(stats.mean, 100.0);
        assert!(matches!(
            aggregate_counts(&s.regions[0], "NOT_THERE"),
            Err(SessionError::UnknownEvent(_))
        ));
    }

    #[test]
    fn slice_identity_and_half() {
        let core = |v: u64| CoreMeasurement {
            core_id: 0,
            counts: [("E".to_string(), v)].into_iter().collect(),
        };
        let region = RegionMeasurement {
            region_name: "r".into(),
            wall_time_s: 1.0,
            cores: vec![core(100)],
            timeline: Some(
                (0..10)
                    .map(|i| TimelineSample {
                        t_s: (i + 1) as f64 * 0.1,
                        dt_s: 0.1,
                        per_core_counts: vec![core(10)],
                    })
                    .collect(),
            ),
        };
        let full = slice_timeline(&region, 0.0, 1.0).unwrap();
        assert_eq!(full.cores[0].count("E"), Some(100));
        let half = slice_timeline(&region, 0.0, 0.5).unwrap();
        assert_eq!(half.cores[0].count("E"), Some(50));
        assert!((half.wall_time_s - 0.5).abs() < 1e-12);
        assert!(matches!(
            slice_timeline(&region, 0.7, 0.7),
            Err(SessionError::InvalidSliceRange { .. })
        ));
        assert!(matches!(
            slice_timeline(&RegionMeasurement { timeline: None, ..region.clone() }, 0.0, 1.0),
            Err(SessionError::NoTimeline(_))
        ));
    }

    #[test]
    fn round_trip_preserves_session() {
        let s = parse_session_str(&minimal_json(), true).unwrap();
        let text = session_to_string(&s);
        let s2 = parse_session_str(&text, true).unwrap();
        assert_eq!(s, s2);
    }

    #[test]
    fn csv_import_builds_session() {
        let text = "\
# sample import
#wall_time_s=61.72
region,core_id,event,value
proj,0,FP_OPS_PACKED_SP,100
proj,1,FP_OPS_PACKED_SP,300
";
        let s = import_csv(text, "t").unwrap();
        assert_eq!(s.thread_count, 2);
        assert_eq!(s.regions[0].wall_time_s, 61.72);
        assert_eq!(s.regions[0].cores[1].count("FP_OPS_PACKED_SP"), Some(300));
    }
}
