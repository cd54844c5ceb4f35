//! Pattern detectors: one per performance pattern, each mapping metric
//! evidence against baselines and thresholds into a [`Finding`].
//!
//! Detectors are pure; [`diagnose`] runs all ten and returns every finding,
//! fired or not, ranked by (fired, severity, fixed pattern order). Patterns
//! may co-occur; only the microarchitectural-anomaly detector is a residual
//! that never fires alongside another fired pattern.

mod detectors;

use thiserror::Error;

use crate::machine::MachineModel;
use crate::perfgroup::GroupRegistry;
use crate::session::{MeasurementSession, ScalingSeries};
use crate::thresholds::Thresholds;

pub(crate) use detectors::Ctx;

/// The closed set of detectable patterns, in ranking-tiebreak order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PatternKind {
    LoadImbalance,
    OlcBandwidthSaturation,
    MemoryBandwidthSaturation,
    StridedErraticAccess,
    BadInstructionMix,
    LimitedInstructionThroughput,
    MicroarchAnomaly,
    SynchronizationOverhead,
    FalseCachelineSharing,
    BadNumaPlacement,
}

impl PatternKind {
    pub const ALL: [PatternKind; 10] = [
        PatternKind::LoadImbalance,
        PatternKind::OlcBandwidthSaturation,
        PatternKind::MemoryBandwidthSaturation,
        PatternKind::StridedErraticAccess,
        PatternKind::BadInstructionMix,
        PatternKind::LimitedInstructionThroughput,
        PatternKind::MicroarchAnomaly,
        PatternKind::SynchronizationOverhead,
        PatternKind::FalseCachelineSharing,
        PatternKind::BadNumaPlacement,
    ];

    /// Stable identifier used in reports and label files.
    pub fn name(&self) -> &'static str {
        match self {
            PatternKind::LoadImbalance => "LoadImbalance",
            PatternKind::OlcBandwidthSaturation => "OlcBandwidthSaturation",
            PatternKind::MemoryBandwidthSaturation => "MemoryBandwidthSaturation",
            PatternKind::StridedErraticAccess => "StridedErraticAccess",
            PatternKind::BadInstructionMix => "BadInstructionMix",
            PatternKind::LimitedInstructionThroughput => "LimitedInstructionThroughput",
            PatternKind::MicroarchAnomaly => "MicroarchAnomaly",
            PatternKind::SynchronizationOverhead => "SynchronizationOverhead",
            PatternKind::FalseCachelineSharing => "FalseCachelineSharing",
            PatternKind::BadNumaPlacement => "BadNumaPlacement",
        }
    }

    /// Human-readable name for text reports.
    pub fn human(&self) -> &'static str {
        match self {
            PatternKind::LoadImbalance => "Load imbalance",
            PatternKind::OlcBandwidthSaturation => "OLC bandwidth saturation",
            PatternKind::MemoryBandwidthSaturation => "Memory bandwidth saturation",
            PatternKind::StridedErraticAccess => "Strided or erratic data access",
            PatternKind::BadInstructionMix => "Bad instruction mix",
            PatternKind::LimitedInstructionThroughput => "Limited instruction throughput",
            PatternKind::MicroarchAnomaly => "Microarchitectural anomaly",
            PatternKind::SynchronizationOverhead => "Synchronization overhead",
            PatternKind::FalseCachelineSharing => "False cache line sharing",
            PatternKind::BadNumaPlacement => "Bad ccNUMA page placement",
        }
    }

    pub fn from_name(name: &str) -> Option<PatternKind> {
        PatternKind::ALL.iter().copied().find(|p| p.name() == name)
    }

    fn order(&self) -> usize {
        PatternKind::ALL.iter().position(|p| p == self).unwrap()
    }
}

impl std::fmt::Display for PatternKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How an observed value relates to its reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    GreaterEq,
    LessEq,
    Approx,
    Mismatch,
}

impl Relation {
    pub fn symbol(&self) -> &'static str {
        match self {
            Relation::GreaterEq => ">=",
            Relation::LessEq => "<=",
            Relation::Approx => "~",
            Relation::Mismatch => "mismatch",
        }
    }
}

/// Where a piece of evidence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvidenceSource {
    Hpm,
    ScalingBehavior,
    StaticAnalysisInput,
    Baseline,
}

impl EvidenceSource {
    pub fn name(&self) -> &'static str {
        match self {
            EvidenceSource::Hpm => "HPM",
            EvidenceSource::ScalingBehavior => "scaling behavior",
            EvidenceSource::StaticAnalysisInput => "static analysis input",
            EvidenceSource::Baseline => "baseline",
        }
    }
}

/// One observed quantity backing a finding, optionally against a reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    pub description: String,
    pub metric_name: String,
    pub observed: f64,
    pub reference: Option<f64>,
    pub relation: Relation,
    pub source: EvidenceSource,
}

impl Evidence {
    /// Relation of `observed` to `reference` by plain comparison.
    pub(crate) fn compare(observed: f64, reference: f64) -> Relation {
        if observed >= reference {
            Relation::GreaterEq
        } else {
            Relation::LessEq
        }
    }
}

/// A detector verdict: whether the pattern fired, how severe it looks
/// (a ranking aid in [0, 1], not a probability), and why.
#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub pattern: PatternKind,
    pub fired: bool,
    pub severity: f64,
    pub evidence: Vec<Evidence>,
    pub caveats: Vec<String>,
}

impl Finding {
    pub(crate) fn fired(
        pattern: PatternKind,
        severity: f64,
        evidence: Vec<Evidence>,
        caveats: Vec<String>,
    ) -> Self {
        debug_assert!(!evidence.is_empty(), "a fired finding needs evidence");
        Finding {
            pattern,
            fired: true,
            severity: severity.clamp(0.0, 1.0),
            evidence,
            caveats,
        }
    }

    pub(crate) fn unfired(pattern: PatternKind, evidence: Vec<Evidence>, caveats: Vec<String>) -> Self {
        Finding {
            pattern,
            fired: false,
            severity: 0.0,
            evidence,
            caveats,
        }
    }
}

/// Which baseline anchors memory-bandwidth comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MemoryBaseline {
    /// `update_bw_socket_MBs` scaled by the sockets the session spans.
    #[default]
    UpdateSocket,
    /// `stream_bw_core_MBs` scaled by the session thread count.
    StreamCore,
}

impl MemoryBaseline {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "update_bw_socket_MBs" => Some(MemoryBaseline::UpdateSocket),
            "stream_bw_core_MBs" => Some(MemoryBaseline::StreamCore),
            _ => None,
        }
    }
}

/// Externally supplied prediction numbers (the tool performs no machine-code
/// analysis or performance modelling itself).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExternalInputs {
    /// Static prediction of achievable cycles per instruction for the hot
    /// loop, e.g. from a port-pressure analysis normalized per instruction.
    pub static_cycles_per_iter: Option<f64>,
    /// Performance-model prediction, MFlop/s.
    pub model_mflops: Option<f64>,
}

/// Workload declarations that enable signature clauses which would otherwise
/// be meaningless (e.g. "non-FP instructions are overhead").
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WorkloadFlags {
    /// The useful work is floating-point arithmetic.
    pub useful_work_fp: bool,
    /// The measured loops are data-parallel (vectorizable).
    pub data_parallel: bool,
}

/// Everything a diagnosis run consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosisInput {
    pub session: MeasurementSession,
    pub machine: MachineModel,
    pub scaling: Option<ScalingSeries>,
    pub external: ExternalInputs,
    pub flags: WorkloadFlags,
    pub memory_baseline: MemoryBaseline,
}

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("{pattern}: not computable: {reason}")]
    NotComputable { pattern: PatternKind, reason: String },
    #[error("session and machine are inconsistent: {0}")]
    InconsistentInput(String),
}

impl DiagnosisInput {
    /// Build a validated input: the session's cores must exist in the machine
    /// topology.
    pub fn new(session: MeasurementSession, machine: MachineModel) -> Result<Self, PatternError> {
        let missing: Vec<String> = session
            .core_set
            .iter()
            .filter(|c| !machine.topology.core_ids.contains(c))
            .map(u32::to_string)
            .collect();
        if !missing.is_empty() {
            return Err(PatternError::InconsistentInput(format!(
                "session cores {} not in machine topology",
                missing.join(", ")
            )));
        }
        Ok(DiagnosisInput {
            session,
            machine,
            scaling: None,
            external: ExternalInputs::default(),
            flags: WorkloadFlags::default(),
            memory_baseline: MemoryBaseline::default(),
        })
    }

    pub fn with_scaling(mut self, scaling: ScalingSeries) -> Self {
        self.scaling = Some(scaling);
        self
    }

    pub fn with_external(mut self, external: ExternalInputs) -> Self {
        self.external = external;
        self
    }

    pub fn with_flags(mut self, flags: WorkloadFlags) -> Self {
        self.flags = flags;
        self
    }

    pub fn with_memory_baseline(mut self, baseline: MemoryBaseline) -> Self {
        self.memory_baseline = baseline;
        self
    }
}

/// Bandwidth level a saturation check targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandwidthLevel {
    Memory,
    Olc,
}

fn not_computable_finding(pattern: PatternKind, err: &PatternError) -> Finding {
    let reason = match err {
        PatternError::NotComputable { reason, .. } => reason.clone(),
        other => other.to_string(),
    };
    Finding::unfired(pattern, vec![], vec![format!("not computable: {reason}")])
}

macro_rules! finding_or_explain {
    ($pattern:expr, $result:expr) => {
        match $result {
            Ok(finding) => finding,
            Err(err) => not_computable_finding($pattern, &err),
        }
    };
}

/// Run all ten detectors and rank the findings: fired before unfired, then by
/// severity, then by the fixed pattern order. Detectors that cannot run yield
/// an unfired finding explaining why. Deterministic for identical inputs.
pub fn diagnose(input: &DiagnosisInput, registry: &GroupRegistry, th: &Thresholds) -> Vec<Finding> {
    let ctx = Ctx::build(input, registry, th);

    let imbalance = finding_or_explain!(PatternKind::LoadImbalance, detectors::load_imbalance(&ctx));
    let olc_sat = finding_or_explain!(
        PatternKind::OlcBandwidthSaturation,
        detectors::bw_saturation(&ctx, BandwidthLevel::Olc)
    );
    let mem_sat = finding_or_explain!(
        PatternKind::MemoryBandwidthSaturation,
        detectors::bw_saturation(&ctx, BandwidthLevel::Memory)
    );
    let strided = finding_or_explain!(
        PatternKind::StridedErraticAccess,
        detectors::strided_access(&ctx)
    );
    let mix = finding_or_explain!(
        PatternKind::BadInstructionMix,
        detectors::bad_instruction_mix(&ctx)
    );
    let throughput = finding_or_explain!(
        PatternKind::LimitedInstructionThroughput,
        detectors::limited_throughput(&ctx, mem_sat.fired || olc_sat.fired)
    );
    let sync = finding_or_explain!(
        PatternKind::SynchronizationOverhead,
        detectors::sync_overhead(&ctx)
    );
    let false_sharing = finding_or_explain!(
        PatternKind::FalseCachelineSharing,
        detectors::false_sharing(&ctx)
    );
    let numa = finding_or_explain!(PatternKind::BadNumaPlacement, detectors::numa_placement(&ctx));

    let others_fired = [
        &imbalance,
        &olc_sat,
        &mem_sat,
        &strided,
        &mix,
        &throughput,
        &sync,
        &false_sharing,
        &numa,
    ]
    .iter()
    .any(|f| f.fired);
    let anomaly = finding_or_explain!(
        PatternKind::MicroarchAnomaly,
        detectors::microarch_anomaly(&ctx, others_fired)
    );

    let mut findings = vec![
        imbalance,
        olc_sat,
        mem_sat,
        strided,
        mix,
        throughput,
        anomaly,
        sync,
        false_sharing,
        numa,
    ];
    findings.sort_by(|a, b| {
        b.fired
            .cmp(&a.fired)
            .then(b.severity.total_cmp(&a.severity))
            .then(a.pattern.order().cmp(&b.pattern.order()))
    });
    findings
}

/// Detect load imbalance from per-core work-proxy counts.
pub fn detect_load_imbalance(
    input: &DiagnosisInput,
    registry: &GroupRegistry,
    th: &Thresholds,
) -> Result<Finding, PatternError> {
    detectors::load_imbalance(&Ctx::build(input, registry, th))
}

/// Detect bandwidth saturation at the memory or outer-level-cache level.
pub fn detect_bw_saturation(
    input: &DiagnosisInput,
    registry: &GroupRegistry,
    th: &Thresholds,
    level: BandwidthLevel,
) -> Result<Finding, PatternError> {
    detectors::bw_saturation(&Ctx::build(input, registry, th), level)
}

/// Detect strided or erratic data access.
pub fn detect_strided_access(
    input: &DiagnosisInput,
    registry: &GroupRegistry,
    th: &Thresholds,
) -> Result<Finding, PatternError> {
    detectors::strided_access(&Ctx::build(input, registry, th))
}

/// Detect an inadequate instruction mix.
pub fn detect_bad_instruction_mix(
    input: &DiagnosisInput,
    registry: &GroupRegistry,
    th: &Thresholds,
) -> Result<Finding, PatternError> {
    detectors::bad_instruction_mix(&Ctx::build(input, registry, th))
}

/// Detect instruction-throughput-limited execution. Does not fire while a
/// bandwidth saturation finding explains the ceiling.
pub fn detect_limited_throughput(
    input: &DiagnosisInput,
    registry: &GroupRegistry,
    th: &Thresholds,
) -> Result<Finding, PatternError> {
    let ctx = Ctx::build(input, registry, th);
    let sat_fired = detectors::bw_saturation(&ctx, BandwidthLevel::Memory)
        .map(|f| f.fired)
        .unwrap_or(false)
        || detectors::bw_saturation(&ctx, BandwidthLevel::Olc)
            .map(|f| f.fired)
            .unwrap_or(false);
    detectors::limited_throughput(&ctx, sat_fired)
}

/// Detect synchronization overhead.
pub fn detect_sync_overhead(
    input: &DiagnosisInput,
    registry: &GroupRegistry,
    th: &Thresholds,
) -> Result<Finding, PatternError> {
    detectors::sync_overhead(&Ctx::build(input, registry, th))
}

/// Detect false cache line sharing.
pub fn detect_false_sharing(
    input: &DiagnosisInput,
    registry: &GroupRegistry,
    th: &Thresholds,
) -> Result<Finding, PatternError> {
    detectors::false_sharing(&Ctx::build(input, registry, th))
}

/// Detect bad page placement across NUMA domains.
pub fn detect_numa_placement(
    input: &DiagnosisInput,
    registry: &GroupRegistry,
    th: &Thresholds,
) -> Result<Finding, PatternError> {
    detectors::numa_placement(&Ctx::build(input, registry, th))
}

/// Detect a microarchitectural anomaly: a large unexplained residual against
/// the supplied model prediction when no other pattern fired.
pub fn detect_microarch_anomaly(
    input: &DiagnosisInput,
    registry: &GroupRegistry,
    th: &Thresholds,
) -> Result<Finding, PatternError> {
    let others = diagnose(input, registry, th);
    let others_fired = others
        .iter()
        .any(|f| f.fired && f.pattern != PatternKind::MicroarchAnomaly);
    detectors::microarch_anomaly(&Ctx::build(input, registry, th), others_fired)
}
