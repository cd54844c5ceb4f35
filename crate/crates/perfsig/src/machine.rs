//! Machine model: topology plus measured baseline capabilities.
//!
//! Baselines are user-measured microbenchmark inputs, never estimated here;
//! they anchor the "comparable to peak bandwidth" style comparisons the
//! detectors make.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::jsonutil::{as_array, as_object, check_keys, get_f64, get_string, get_u32, parse_document, JsonError};

/// Core layout: sockets, shared outer-level-cache groups and NUMA domains.
/// `olc_groups` and `numa_domains` each partition `core_ids`. Socket `k`
/// owns `core_ids[k*cores_per_socket .. (k+1)*cores_per_socket]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub sockets: u32,
    pub cores_per_socket: u32,
    pub core_ids: Vec<u32>,
    pub olc_groups: Vec<Vec<u32>>,
    pub numa_domains: Vec<Vec<u32>>,
}

impl Topology {
    pub fn core_count(&self) -> usize {
        self.core_ids.len()
    }

    pub fn socket_cores(&self, socket: usize) -> &[u32] {
        let n = self.cores_per_socket as usize;
        &self.core_ids[socket * n..(socket + 1) * n]
    }

    /// How many sockets the given cores touch.
    pub fn sockets_spanned(&self, cores: &[u32]) -> usize {
        (0..self.sockets as usize)
            .filter(|&s| self.socket_cores(s).iter().any(|c| cores.contains(c)))
            .count()
    }

    /// How many outer-level-cache groups the given cores touch.
    pub fn olc_groups_spanned(&self, cores: &[u32]) -> usize {
        self.olc_groups
            .iter()
            .filter(|g| g.iter().any(|c| cores.contains(c)))
            .count()
    }

    /// Index of the NUMA domain containing `core`, if any.
    pub fn numa_domain_of(&self, core: u32) -> Option<usize> {
        self.numa_domains.iter().position(|d| d.contains(&core))
    }
}

/// Measured baseline numbers. Units are embedded in the field (and JSON key)
/// names to prevent unit drift.
#[derive(Debug, Clone, PartialEq)]
pub struct Baselines {
    /// Single-thread streaming bandwidth, MByte/s.
    pub stream_bw_core_mbs: f64,
    /// All-core array-update bandwidth per socket, MByte/s.
    pub update_bw_socket_mbs: f64,
    /// Outer-level-cache bandwidth baseline per OLC group, MByte/s.
    pub olc_bw_mbs: f64,
    /// Peak floating-point rate per core, MFlop/s.
    pub peak_mflops_core: f64,
    /// Instructions-per-cycle issue limit.
    pub issue_width: u32,
    pub cacheline_bytes: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MachineModel {
    pub name: String,
    pub topology: Topology,
    pub baselines: Baselines,
}

#[derive(Debug, Error)]
pub enum MachineError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at {context}: {message}")]
    Parse { context: String, message: String },
    #[error("validation failed: {0}")]
    Validation(String),
}

impl From<JsonError> for MachineError {
    fn from(e: JsonError) -> Self {
        MachineError::Parse {
            context: e.path,
            message: e.message,
        }
    }
}

pub fn load_machine(path: impl AsRef<Path>) -> Result<MachineModel, MachineError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| MachineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_machine_str(&text)
}

pub fn parse_machine_str(text: &str) -> Result<MachineModel, MachineError> {
    let doc = parse_document(text)?;
    let obj = as_object(&doc, "$")?;
    check_keys(obj, &["name", "topology", "baselines"], true, "$")?;

    let name = get_string(obj, "name", "$")?;

    let topo_v = obj.get("topology").ok_or_else(|| MachineError::Parse {
        context: "$".into(),
        message: "missing required key `topology`".into(),
    })?;
    let topo = as_object(topo_v, "$.topology")?;
    check_keys(
        topo,
        &["sockets", "cores_per_socket", "core_ids", "olc_groups", "numa_domains"],
        true,
        "$.topology",
    )?;
    let sockets = get_u32(topo, "sockets", "$.topology")?;
    let cores_per_socket = get_u32(topo, "cores_per_socket", "$.topology")?;
    let core_ids = parse_id_list(topo.get("core_ids"), "$.topology.core_ids")?;
    let olc_groups = parse_id_groups(topo.get("olc_groups"), "$.topology.olc_groups")?;
    let numa_domains = parse_id_groups(topo.get("numa_domains"), "$.topology.numa_domains")?;

    let base_v = obj.get("baselines").ok_or_else(|| MachineError::Parse {
        context: "$".into(),
        message: "missing required key `baselines`".into(),
    })?;
    let base = as_object(base_v, "$.baselines")?;
    check_keys(
        base,
        &[
            "stream_bw_core_MBs",
            "update_bw_socket_MBs",
            "olc_bw_MBs",
            "peak_mflops_core",
            "issue_width",
            "cacheline_bytes",
        ],
        true,
        "$.baselines",
    )?;
    let baselines = Baselines {
        stream_bw_core_mbs: get_f64(base, "stream_bw_core_MBs", "$.baselines")?,
        update_bw_socket_mbs: get_f64(base, "update_bw_socket_MBs", "$.baselines")?,
        olc_bw_mbs: get_f64(base, "olc_bw_MBs", "$.baselines")?,
        peak_mflops_core: get_f64(base, "peak_mflops_core", "$.baselines")?,
        issue_width: get_u32(base, "issue_width", "$.baselines")?,
        cacheline_bytes: get_u32(base, "cacheline_bytes", "$.baselines")?,
    };

    let model = MachineModel {
        name,
        topology: Topology {
            sockets,
            cores_per_socket,
            core_ids,
            olc_groups,
            numa_domains,
        },
        baselines,
    };
    validate_machine(&model)?;
    Ok(model)
}

fn parse_id_list(v: Option<&serde_json::Value>, path: &str) -> Result<Vec<u32>, MachineError> {
    let v = v.ok_or_else(|| MachineError::Parse {
        context: path.into(),
        message: "missing required key".into(),
    })?;
    let arr = as_array(v, path)?;
    arr.iter()
        .enumerate()
        .map(|(i, x)| {
            x.as_u64()
                .and_then(|n| u32::try_from(n).ok())
                .ok_or_else(|| MachineError::Parse {
                    context: format!("{path}[{i}]"),
                    message: "expected a non-negative integer".into(),
                })
        })
        .collect()
}

fn parse_id_groups(v: Option<&serde_json::Value>, path: &str) -> Result<Vec<Vec<u32>>, MachineError> {
    let v = v.ok_or_else(|| MachineError::Parse {
        context: path.into(),
        message: "missing required key".into(),
    })?;
    let arr = as_array(v, path)?;
    arr.iter()
        .enumerate()
        .map(|(i, g)| parse_id_list(Some(g), &format!("{path}[{i}]")))
        .collect()
}

fn check_partition(groups: &[Vec<u32>], core_ids: &[u32], what: &str) -> Result<(), MachineError> {
    let all: BTreeSet<u32> = core_ids.iter().copied().collect();
    let mut seen: BTreeSet<u32> = BTreeSet::new();
    for group in groups {
        for &core in group {
            if !all.contains(&core) {
                return Err(MachineError::Validation(format!(
                    "{what} references unknown core {core}"
                )));
            }
            if !seen.insert(core) {
                return Err(MachineError::Validation(format!(
                    "{what} is not a partition: core {core} appears twice"
                )));
            }
        }
    }
    if seen != all {
        let missing: Vec<String> = all.difference(&seen).map(u32::to_string).collect();
        return Err(MachineError::Validation(format!(
            "{what} is not a partition: cores {} uncovered",
            missing.join(", ")
        )));
    }
    Ok(())
}

pub fn validate_machine(model: &MachineModel) -> Result<(), MachineError> {
    let t = &model.topology;
    if t.sockets < 1 || t.cores_per_socket < 1 {
        return Err(MachineError::Validation(
            "sockets and cores_per_socket must be >= 1".into(),
        ));
    }
    if (t.sockets * t.cores_per_socket) as usize != t.core_ids.len() {
        return Err(MachineError::Validation(format!(
            "sockets * cores_per_socket ({}) must equal the number of core_ids ({})",
            t.sockets * t.cores_per_socket,
            t.core_ids.len()
        )));
    }
    let unique: BTreeSet<u32> = t.core_ids.iter().copied().collect();
    if unique.len() != t.core_ids.len() {
        return Err(MachineError::Validation("core_ids must be unique".into()));
    }
    check_partition(&t.olc_groups, &t.core_ids, "olc_groups")?;
    check_partition(&t.numa_domains, &t.core_ids, "numa_domains")?;

    let b = &model.baselines;
    for (name, v) in [
        ("stream_bw_core_MBs", b.stream_bw_core_mbs),
        ("update_bw_socket_MBs", b.update_bw_socket_mbs),
        ("olc_bw_MBs", b.olc_bw_mbs),
        ("peak_mflops_core", b.peak_mflops_core),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(MachineError::Validation(format!("{name} must be > 0")));
        }
    }
    if !(1..=8).contains(&b.issue_width) {
        return Err(MachineError::Validation(
            "issue_width must be within [1, 8]".into(),
        ));
    }
    if b.cacheline_bytes == 0 {
        return Err(MachineError::Validation("cacheline_bytes must be > 0".into()));
    }
    Ok(())
}

/// Roofline bound: min(peak, intensity * bandwidth), all inputs > 0.
/// `intensity` in Flop/Byte, `bw_mbs` in MByte/s, result in MFlop/s.
pub fn roofline_limit(intensity: f64, bw_mbs: f64, peak_mflops: f64) -> f64 {
    peak_mflops.min(intensity * bw_mbs)
}

/// Fraction of a baseline bandwidth actually achieved. `baseline > 0`.
pub fn bandwidth_utilization(measured_mbs: f64, baseline_mbs: f64) -> f64 {
    measured_mbs / baseline_mbs
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn westmere_json() -> String {
        r#"{
            "name": "westmere",
            "topology": {
                "sockets": 1,
                "cores_per_socket": 6,
                "core_ids": [0, 1, 2, 3, 4, 5],
                "olc_groups": [[0, 1, 2, 3, 4, 5]],
                "numa_domains": [[0, 1, 2, 3, 4, 5]]
            },
            "baselines": {
                "stream_bw_core_MBs": 11814.0,
                "update_bw_socket_MBs": 20300.0,
                "olc_bw_MBs": 32000.0,
                "peak_mflops_core": 11720.0,
                "issue_width": 4,
                "cacheline_bytes": 64
            }
        }"#
        .to_string()
    }

    #[test]
    fn loads_westmere_like_model() {
        let m = parse_machine_str(&westmere_json()).unwrap();
        assert_eq!(m.topology.core_count(), 6);
        assert_eq!(m.baselines.update_bw_socket_mbs, 20300.0);
        assert_eq!(m.baselines.stream_bw_core_mbs, 11814.0);
        assert_eq!(m.baselines.issue_width, 4);
    }

    #[test]
    fn partial_olc_groups_are_rejected() {
        let text = westmere_json().replace("\"olc_groups\": [[0, 1, 2, 3, 4, 5]]", "\"olc_groups\": [[0, 1, 2, 3]]");
        match parse_machine_str(&text) {
            Err(MachineError::Validation(msg)) => assert!(msg.contains("partition"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn two_socket_model_has_two_locality_domains() {
        let text = r#"{
            "name": "dual",
            "topology": {
                "sockets": 2,
                "cores_per_socket": 3,
                "core_ids": [0, 1, 2, 3, 4, 5],
                "olc_groups": [[0, 1, 2], [3, 4, 5]],
                "numa_domains": [[0, 1, 2], [3, 4, 5]]
            },
            "baselines": {
                "stream_bw_core_MBs": 12000.0,
                "update_bw_socket_MBs": 20300.0,
                "olc_bw_MBs": 30000.0,
                "peak_mflops_core": 12000.0,
                "issue_width": 4,
                "cacheline_bytes": 64
            }
        }"#;
        let m = parse_machine_str(text).unwrap();
        assert_eq!(m.topology.numa_domains.len(), 2);
        assert_eq!(m.topology.sockets_spanned(&[0, 3]), 2);
        assert_eq!(m.topology.sockets_spanned(&[0, 1]), 1);
        assert_eq!(m.topology.numa_domain_of(4), Some(1));
    }

    #[test]
    fn roofline_picks_the_binding_limit() {
        assert_eq!(roofline_limit(0.25, 20300.0, 40000.0), 5075.0);
        assert_eq!(roofline_limit(1e9, 20300.0, 40000.0), 40000.0);
        assert_eq!(roofline_limit(1.0, 11814.0, 8000.0), 8000.0);
    }

    #[test]
    fn utilization_is_a_plain_ratio() {
        let u = bandwidth_utilization(10000.0, 20300.0);
        assert!((u - 0.4926).abs() < 5e-4, "{u}");
        let u = bandwidth_utilization(5314.0, 11814.0);
        assert!((u - 0.4498).abs() < 5e-4, "{u}");
        assert_eq!(bandwidth_utilization(123.0, 123.0), 1.0);
    }
}
