//! Scenario runners: calibrated virtual-time experiments with trace and
//! metrics outputs, plus the real-thread stress mode.
//!
//! Every run ends with a global audit: fabric counter sanity, per-link FIFO,
//! and decided-log agreement across replicas. Outputs are deterministic
//! byte-for-byte for a fixed `(config, seed)` pair.

use crate::fabric::{
    Delay, Fabric, FabricConfig, LatencyModel, Node, Port, Sim, SlotIndex, TraceSink, VTime,
};
use crate::smr::{SmrConfig, SmrNode};
use crate::types::{majority, ProcessId, SlotLayout, ValueId};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Virtual,
    Threaded,
}

/// Flat scenario configuration; every field has a calibrated default so a
/// config file only needs the overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub replicas: usize,
    pub proposers: usize,
    pub seed: Option<u64>,
    pub mode: Mode,
    /// Decided slots the run aims for.
    pub run_length: u64,
    pub window: u64,
    pub payload_size: usize,
    pub indirection: bool,
    pub piggyback: bool,
    /// Replicate with a plain write round instead of consensus (latency
    /// baseline; no agreement machinery).
    pub write_baseline: bool,
    pub value_bits: u32,
    pub detection_delay_us: f64,
    pub failover_penalty_us: f64,
    pub crash_at_us: Option<f64>,
    pub crash_process: u32,
    pub cas_one_way_us: f64,
    pub read_one_way_us: f64,
    pub write_one_way_us: f64,
    pub msg_one_way_us: f64,
    pub local_overhead_us: f64,
    /// Extra seeded delay drawn from `[0, jitter_us]` on every operation.
    pub jitter_us: f64,
    /// Global stabilization time: before it, operations may suffer up to
    /// `pre_gst_extra_us` of additional seeded delay.
    pub gst_us: Option<f64>,
    pub pre_gst_extra_us: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            replicas: 3,
            proposers: 2,
            seed: None,
            mode: Mode::Virtual,
            run_length: 1000,
            window: 16,
            payload_size: 16,
            indirection: true,
            piggyback: false,
            write_baseline: false,
            value_bits: 2,
            detection_delay_us: 30.0,
            failover_penalty_us: 30.0,
            crash_at_us: None,
            crash_process: 0,
            cas_one_way_us: 0.95,
            read_one_way_us: 0.95,
            write_one_way_us: 0.625,
            msg_one_way_us: 0.95,
            local_overhead_us: 0.3,
            jitter_us: 0.0,
            gst_us: None,
            pre_gst_extra_us: 0.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("virtual mode needs an explicit seed")]
    MissingSeed,
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("run incomplete: decided {decided} of {expected} slots")]
    Incomplete { decided: u64, expected: u64 },
    #[error("audit failed: {0}")]
    AuditFailed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ScenarioConfig {
    pub fn seed_or_err(&self) -> Result<u64, ScenarioError> {
        self.seed.ok_or(ScenarioError::MissingSeed)
    }

    fn delay(&self, base_us: f64) -> Delay {
        if self.jitter_us > 0.0 {
            Delay::Jitter {
                lo: VTime::from_us(base_us),
                hi: VTime::from_us(base_us + self.jitter_us),
            }
        } else {
            Delay::Const(VTime::from_us(base_us))
        }
    }

    pub fn latency_model(&self) -> LatencyModel {
        LatencyModel {
            read_one_way: self.delay(self.read_one_way_us),
            cas_one_way: self.delay(self.cas_one_way_us),
            write_one_way: self.delay(self.write_one_way_us),
            msg_one_way: self.delay(self.msg_one_way_us),
            local_overhead: VTime::from_us(self.local_overhead_us),
            gst: self.gst_us.map(VTime::from_us),
            pre_gst_extra: VTime::from_us(self.pre_gst_extra_us),
        }
    }

    fn layout(&self) -> Result<SlotLayout, ScenarioError> {
        SlotLayout::with_value_bits(self.value_bits)
            .map_err(|e| ScenarioError::BadConfig(e.to_string()))
    }

    fn smr_config(&self) -> Result<SmrConfig, ScenarioError> {
        if self.replicas < 2 || self.proposers < 1 || self.proposers > self.replicas {
            return Err(ScenarioError::BadConfig(
                "need at least 2 replicas and 1..=replicas proposers".into(),
            ));
        }
        Ok(SmrConfig {
            n: self.replicas,
            proposers: self.proposers,
            layout: self.layout()?,
            window: self.window.max(1),
            total_slots: self.run_length,
            payload_size: self.payload_size,
            indirection: self.indirection,
            piggyback: self.piggyback,
            request_gap: VTime::from_us(2.0 * self.local_overhead_us),
            failover_penalty: VTime::from_us(self.failover_penalty_us),
            payload_seed: self.seed.unwrap_or(0),
        })
    }

    fn fabric_config(&self, slots: u64) -> Result<FabricConfig, ScenarioError> {
        Ok(FabricConfig {
            processes: self.replicas as u32,
            slots,
            payload_capacity: self.payload_size + 8,
            latency: self.latency_model(),
            detection_delay: VTime::from_us(self.detection_delay_us),
            seed: self.seed_or_err()?,
        })
    }
}

/// One metrics row per decided slot, sampled at the deciding leader.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub slot: SlotIndex,
    pub decide_us: f64,
    pub latency_us: f64,
    pub critical_rounds: u64,
    pub cas_issued: u64,
    pub read_issued: u64,
    pub write_issued: u64,
    pub write_cas_issued: u64,
    pub msg_issued: u64,
}

fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(
        "slot,decide_us,latency_us,critical_rounds,cas_issued,read_issued,write_issued,write_cas_issued,msg_issued\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{:.3},{:.3},{},{},{},{},{},{}\n",
            r.slot,
            r.decide_us,
            r.latency_us,
            r.critical_rounds,
            r.cas_issued,
            r.read_issued,
            r.write_issued,
            r.write_cas_issued,
            r.msg_issued
        ));
    }
    out
}

fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

pub struct RunArtifacts {
    pub metrics_csv: String,
    pub counters: Vec<(String, u64)>,
}

impl RunArtifacts {
    /// Write `metrics.csv` and `counters.txt` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), ScenarioError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), &self.metrics_csv)?;
        let mut counters = String::new();
        for (k, v) in &self.counters {
            counters.push_str(&format!("{k} = {v}\n"));
        }
        std::fs::write(dir.join("counters.txt"), counters)?;
        Ok(())
    }
}

pub struct CommonCaseResult {
    pub decided: u64,
    pub median_latency_us: f64,
    pub critical_rounds: u64,
    pub total_rounds: u64,
    pub rows: Vec<MetricsRow>,
    pub artifacts: RunArtifacts,
    pub state_hash: u64,
}

fn open_trace(dir: Option<&Path>) -> Result<TraceSink, ScenarioError> {
    match dir {
        None => Ok(TraceSink::Null),
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let file = std::fs::File::create(dir.join("trace.jsonl"))?;
            Ok(TraceSink::Writer(Box::new(std::io::BufWriter::new(file))))
        }
    }
}

fn flush_trace(fabric: &mut Fabric) {
    if let TraceSink::Writer(w) = &mut fabric.trace {
        w.flush().expect("trace flush");
    }
}

fn snapshot_row(sim: &Sim<SmrNode>, m: &crate::smr::SlotMetric) -> MetricsRow {
    use crate::fabric::OpKind;
    let c = sim.fabric.counters();
    MetricsRow {
        slot: m.slot,
        decide_us: m.decided_us,
        latency_us: m.decided_us - m.issued_us,
        critical_rounds: c.critical_rounds.iter().sum(),
        cas_issued: c.issued_total(OpKind::Cas),
        read_issued: c.issued_total(OpKind::Read),
        write_issued: c.issued_total(OpKind::Write),
        write_cas_issued: c.issued_total(OpKind::WriteCas),
        msg_issued: c.issued_total(OpKind::Msg),
    }
}

/// Run the sim until the target number of decisions, sampling a metrics row
/// at every new leader-side decision.
fn run_smr(
    cfg: &ScenarioConfig,
    sim: &mut Sim<SmrNode>,
    rows: &mut Vec<MetricsRow>,
) -> Result<(), ScenarioError> {
    if let Some(at) = cfg.crash_at_us {
        sim.fabric
            .schedule_crash(ProcessId(cfg.crash_process), VTime::from_us(at));
    }
    sim.init();
    let max_events = cfg.run_length.saturating_mul(400) + 1_000_000;
    let mut seen: Vec<usize> = vec![0; cfg.replicas];
    for _ in 0..max_events {
        if !sim.step() {
            break;
        }
        for p in 0..cfg.replicas {
            while seen[p] < sim.nodes[p].metrics.len() {
                let m = sim.nodes[p].metrics[seen[p]];
                rows.push(snapshot_row(sim, &m));
                seen[p] += 1;
            }
        }
    }
    rows.sort_by_key(|r| r.slot);
    rows.dedup_by_key(|r| r.slot);
    audit_smr(cfg, sim)
}

fn audit_smr(cfg: &ScenarioConfig, sim: &Sim<SmrNode>) -> Result<(), ScenarioError> {
    sim.fabric.audit().map_err(ScenarioError::AuditFailed)?;
    // Decided-log agreement across replicas.
    for slot in 0..cfg.run_length {
        let mut value = None;
        for node in &sim.nodes {
            if let Some((v, _)) = node.decided.get(&slot) {
                match value {
                    None => value = Some(*v),
                    Some(w) if w != *v => {
                        return Err(ScenarioError::AuditFailed(format!(
                            "slot {slot} decided as both {w} and {v}"
                        )))
                    }
                    _ => {}
                }
            }
        }
    }
    Ok(())
}

pub fn run_common_case(
    cfg: &ScenarioConfig,
    out_dir: Option<&Path>,
) -> Result<CommonCaseResult, ScenarioError> {
    if cfg.write_baseline {
        return run_write_baseline(cfg, out_dir);
    }
    let smr_cfg = cfg.smr_config()?;
    let fabric_cfg = cfg.fabric_config(cfg.run_length + cfg.window + 4)?;
    let trace = open_trace(out_dir)?;
    let nodes = (0..cfg.replicas)
        .map(|i| SmrNode::new(ProcessId(i as u32), smr_cfg.clone()))
        .collect();
    let mut sim = Sim::new(Fabric::new(fabric_cfg, trace), nodes);
    let mut rows = Vec::new();
    run_smr(cfg, &mut sim, &mut rows)?;
    flush_trace(&mut sim.fabric);

    let decided = rows.len() as u64;
    if decided < cfg.run_length {
        return Err(ScenarioError::Incomplete {
            decided,
            expected: cfg.run_length,
        });
    }
    if cfg.crash_at_us.is_none() {
        // Stable leader: decide times are monotone in the slot index.
        debug_assert!(rows.windows(2).all(|w| w[0].decide_us <= w[1].decide_us));
    }
    let mut latencies: Vec<f64> = rows.iter().map(|r| r.latency_us).collect();
    let counters = sim.fabric.counters();
    let result = CommonCaseResult {
        decided,
        median_latency_us: median(&mut latencies),
        critical_rounds: counters.critical_rounds.iter().sum(),
        total_rounds: counters.rounds.iter().sum(),
        state_hash: crate::smr::Service::state_hash(&sim.nodes[0].service),
        artifacts: RunArtifacts {
            metrics_csv: metrics_csv(&rows),
            counters: counters.export(),
        },
        rows,
    };
    if let Some(dir) = out_dir {
        result.artifacts.write_to(dir)?;
        let snapshot = crate::smr::snapshot_region(&sim.fabric, ProcessId(0));
        std::fs::write(dir.join("log_snapshot.jsonl"), snapshot.join("\n") + "\n")?;
    }
    Ok(result)
}

/// Decision throughput at the observing replica, bucketed in 100 virtual-µs.
#[derive(Debug, Clone, Serialize)]
pub struct Bucket {
    pub start_us: f64,
    pub decisions: u64,
}

pub struct FailoverResult {
    pub crash_us: f64,
    /// Gap from the crash to the observer's next discovered decision.
    pub gap_us: f64,
    pub detection_us: f64,
    pub takeover: crate::smr::Takeover,
    /// Median decisions per complete pre-crash bucket (warmup excluded).
    pub steady_throughput_per_100us: f64,
    pub buckets: Vec<Bucket>,
    pub decided: u64,
    pub artifacts: RunArtifacts,
    pub summary_csv: String,
}

pub fn run_failover(
    cfg: &ScenarioConfig,
    out_dir: Option<&Path>,
) -> Result<FailoverResult, ScenarioError> {
    let crash_us = cfg
        .crash_at_us
        .ok_or_else(|| ScenarioError::BadConfig("failover scenario needs crash_at_us".into()))?;
    if cfg.proposers < 2 {
        return Err(ScenarioError::BadConfig(
            "failover needs a successor proposer".into(),
        ));
    }
    let smr_cfg = cfg.smr_config()?;
    let fabric_cfg = cfg.fabric_config(cfg.run_length + cfg.window + 4)?;
    let trace = open_trace(out_dir)?;
    let nodes: Vec<SmrNode> = (0..cfg.replicas)
        .map(|i| SmrNode::new(ProcessId(i as u32), smr_cfg.clone()))
        .collect();
    let mut sim = Sim::new(Fabric::new(fabric_cfg, trace), nodes);
    let mut rows = Vec::new();
    run_smr(cfg, &mut sim, &mut rows)?;
    flush_trace(&mut sim.fabric);

    // The observer is the highest-id non-proposer replica.
    let observer = &sim.nodes[cfg.replicas - 1];
    let decided = observer.decided.len() as u64;
    if decided < cfg.run_length {
        return Err(ScenarioError::Incomplete {
            decided,
            expected: cfg.run_length,
        });
    }
    let discoveries: Vec<f64> = observer
        .discoveries
        .iter()
        .map(|(_, t)| t.as_us())
        .collect();
    let first_after_crash = discoveries
        .iter()
        .copied()
        .filter(|t| *t > crash_us)
        .fold(f64::INFINITY, f64::min);
    let gap_us = first_after_crash - crash_us;

    let end = discoveries.iter().copied().fold(0.0, f64::max);
    let mut buckets = Vec::new();
    let mut start = 0.0;
    while start < end {
        let decisions = discoveries
            .iter()
            .filter(|t| **t >= start && **t < start + 100.0)
            .count() as u64;
        buckets.push(Bucket {
            start_us: start,
            decisions,
        });
        start += 100.0;
    }
    let mut pre_crash: Vec<f64> = buckets
        .iter()
        .skip(1)
        .filter(|b| b.start_us + 100.0 <= crash_us)
        .map(|b| b.decisions as f64)
        .collect();
    let steady = if pre_crash.is_empty() {
        0.0
    } else {
        median(&mut pre_crash)
    };

    let successor = sim
        .nodes
        .iter()
        .find(|n| n.takeover.is_some())
        .and_then(|n| n.takeover)
        .unwrap_or_default();

    let mut timeline = String::from("bucket_start_us,decisions\n");
    for b in &buckets {
        timeline.push_str(&format!("{:.3},{}\n", b.start_us, b.decisions));
    }
    let summary_csv = format!(
        "crash_us,detected_us,takeover_started_us,first_prepared_us,first_decided_us,observer_gap_us,detection_us,steady_tput_per_100us\n{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3}\n",
        crash_us,
        successor.trusted_us,
        successor.started_us,
        successor.first_prepared_us,
        successor.first_decided_us,
        gap_us,
        successor.trusted_us - crash_us,
        steady,
    );

    let result = FailoverResult {
        crash_us,
        gap_us,
        detection_us: successor.trusted_us - crash_us,
        takeover: successor,
        steady_throughput_per_100us: steady,
        buckets,
        decided,
        artifacts: RunArtifacts {
            metrics_csv: timeline,
            counters: sim.fabric.counters().export(),
        },
        summary_csv,
    };
    if let Some(dir) = out_dir {
        result.artifacts.write_to(dir)?;
        std::fs::write(dir.join("failover_summary.csv"), &result.summary_csv)?;
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// Plain-write replication baseline
// ---------------------------------------------------------------------------

/// Leader that "replicates" with a single write round to every replica and
/// considers a request done at a majority of write completions. No
/// consensus; exists to calibrate the write-vs-CAS latency difference.
#[derive(Debug, Default)]
struct WriteBaselineNode {
    cfg: Option<ScenarioConfig>,
    leader: bool,
    next_slot: u64,
    outstanding: usize,
    issued_at: VTime,
    pub metrics: Vec<(u64, f64, f64)>, // slot, decide_us, latency_us
}

impl WriteBaselineNode {
    fn issue(&mut self, port: &mut dyn Port) {
        let cfg = self.cfg.as_ref().unwrap();
        if self.next_slot >= cfg.run_length {
            return;
        }
        let payload = vec![0xa5u8; cfg.payload_size];
        self.issued_at = port.now();
        self.outstanding = 0;
        for p in 0..cfg.replicas {
            port.post_write(ProcessId(p as u32), self.next_slot, &payload);
        }
    }
}

impl Node for WriteBaselineNode {
    fn on_init(&mut self, port: &mut dyn Port) {
        if self.leader {
            self.issue(port);
        }
    }

    fn on_completion(
        &mut self,
        port: &mut dyn Port,
        _ticket: crate::fabric::TicketId,
        _completion: crate::fabric::Completion,
    ) {
        let cfg = self.cfg.as_ref().unwrap();
        self.outstanding += 1;
        if self.outstanding == majority(cfg.replicas) {
            let now = port.now();
            self.metrics.push((
                self.next_slot,
                now.as_us(),
                (now.saturating_sub(self.issued_at)).as_us(),
            ));
            self.next_slot += 1;
            port.schedule(VTime::from_us(2.0 * cfg.local_overhead_us), 1);
        }
    }

    fn on_wakeup(&mut self, port: &mut dyn Port, _tag: u64) {
        self.issue(port);
    }
}

fn run_write_baseline(
    cfg: &ScenarioConfig,
    out_dir: Option<&Path>,
) -> Result<CommonCaseResult, ScenarioError> {
    let fabric_cfg = cfg.fabric_config(cfg.run_length + 4)?;
    let trace = open_trace(out_dir)?;
    let nodes: Vec<WriteBaselineNode> = (0..cfg.replicas)
        .map(|i| WriteBaselineNode {
            cfg: Some(cfg.clone()),
            leader: i == 0,
            ..Default::default()
        })
        .collect();
    let mut sim = Sim::new(Fabric::new(fabric_cfg, trace), nodes);
    sim.init();
    sim.run_to_quiescence(cfg.run_length * 40 + 100_000);
    flush_trace(&mut sim.fabric);
    sim.fabric.audit().map_err(ScenarioError::AuditFailed)?;

    let rows: Vec<MetricsRow> = sim.nodes[0]
        .metrics
        .iter()
        .map(|(slot, decide_us, latency_us)| MetricsRow {
            slot: *slot,
            decide_us: *decide_us,
            latency_us: *latency_us,
            critical_rounds: 0,
            cas_issued: 0,
            read_issued: 0,
            write_issued: sim
                .fabric
                .counters()
                .issued_total(crate::fabric::OpKind::Write),
            write_cas_issued: 0,
            msg_issued: 0,
        })
        .collect();
    let decided = rows.len() as u64;
    if decided < cfg.run_length {
        return Err(ScenarioError::Incomplete {
            decided,
            expected: cfg.run_length,
        });
    }
    let mut latencies: Vec<f64> = rows.iter().map(|r| r.latency_us).collect();
    let result = CommonCaseResult {
        decided,
        median_latency_us: median(&mut latencies),
        critical_rounds: 0,
        total_rounds: 0,
        state_hash: 0,
        artifacts: RunArtifacts {
            metrics_csv: metrics_csv(&rows),
            counters: sim.fabric.counters().export(),
        },
        rows,
    };
    if let Some(dir) = out_dir {
        result.artifacts.write_to(dir)?;
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// Threaded stress mode
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ThreadedReport {
    pub instances: u64,
    pub decided_instances: u64,
    pub total_attempts: u64,
    pub chain_ok: bool,
}

/// Race `proposers` OS threads through streamlined consensus on every slot,
/// then audit agreement and per-word CAS chains. Safety properties only; no
/// virtual time, no metrics.
pub fn run_threaded(cfg: &ScenarioConfig) -> Result<ThreadedReport, ScenarioError> {
    use crate::fabric::threaded::{verify_cas_chain, ThreadPort, ThreadRegions};
    use crate::onesided::{ProposeEvent, RunMode, StreamlinedProposer};

    let layout = cfg.layout()?;
    let n = cfg.replicas;
    let slots = cfg.run_length;
    let regions = ThreadRegions::new(n as u32, slots);
    let results: Vec<(
        Vec<Option<ValueId>>,
        Vec<crate::fabric::threaded::CasTransition>,
        u64,
    )> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..cfg.proposers)
            .map(|id| {
                let regions = &regions;
                scope.spawn(move || {
                    let mut port = ThreadPort::new(ProcessId(id as u32), regions);
                    let mut decisions = vec![None; slots as usize];
                    let mut attempts = 0u64;
                    for slot in 0..slots {
                        let mut engine =
                            StreamlinedProposer::new(ProcessId(id as u32), n, layout, slot);
                        'attempts: for _ in 0..64 {
                            attempts += 1;
                            let mut ev =
                                engine.propose(&mut port, RunMode::Full, ValueId(id as u8), None);
                            while ev.is_none() {
                                let Some((ticket, completion)) = port.pending.pop_front() else {
                                    break;
                                };
                                ev = engine.on_completion(&mut port, ticket, &completion);
                            }
                            match ev {
                                Some(ProposeEvent::Decided(v)) => {
                                    decisions[slot as usize] = Some(v);
                                    break 'attempts;
                                }
                                Some(ProposeEvent::Aborted) => continue,
                                _ => break 'attempts,
                            }
                        }
                        port.pending.clear();
                    }
                    (decisions, port.cas_log, attempts)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });

    let mut decided_instances = 0u64;
    for slot in 0..slots as usize {
        let values: Vec<ValueId> = results.iter().filter_map(|(d, _, _)| d[slot]).collect();
        if !values.is_empty() {
            decided_instances += 1;
        }
        if values.windows(2).any(|w| w[0] != w[1]) {
            return Err(ScenarioError::AuditFailed(format!(
                "threaded slot {slot} decided divergently: {values:?}"
            )));
        }
    }
    // Per-(acceptor, slot) chain audit over all successful CASes.
    for a in 0..n {
        for slot in 0..slots {
            let transitions: Vec<_> = results
                .iter()
                .flat_map(|(_, log, _)| log.iter())
                .filter(|t| t.target == ProcessId(a as u32) && t.slot == slot)
                .copied()
                .collect();
            if let Err(e) = verify_cas_chain(transitions, layout) {
                return Err(ScenarioError::AuditFailed(format!(
                    "acceptor {a} slot {slot}: {e}"
                )));
            }
        }
    }
    Ok(ThreadedReport {
        instances: slots,
        decided_instances,
        total_attempts: results.iter().map(|(_, _, a)| *a).sum(),
        chain_ok: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            seed: Some(seed),
            run_length: 200,
            ..Default::default()
        }
    }

    #[test]
    fn common_case_hits_the_calibrated_latency() {
        let r = run_common_case(&base(1), None).unwrap();
        assert_eq!(r.decided, 200);
        assert!((r.median_latency_us - 1.9).abs() < 1e-9);
        assert_eq!(r.critical_rounds, 200);
        assert_eq!(r.total_rounds, 400);
    }

    #[test]
    fn write_baseline_hits_the_write_round_latency() {
        let cfg = ScenarioConfig {
            write_baseline: true,
            ..base(1)
        };
        let r = run_common_case(&cfg, None).unwrap();
        assert_eq!(r.decided, 200);
        assert!((r.median_latency_us - 1.25).abs() < 1e-9);
    }

    #[test]
    fn zero_latency_model_costs_only_local_overhead() {
        let cfg = ScenarioConfig {
            cas_one_way_us: 0.0,
            read_one_way_us: 0.0,
            write_one_way_us: 0.0,
            msg_one_way_us: 0.0,
            run_length: 50,
            ..base(2)
        };
        let r = run_common_case(&cfg, None).unwrap();
        // Remote legs are free; the self leg still pays the local overhead
        // both ways.
        assert!(r.median_latency_us <= 2.0 * cfg.local_overhead_us + 1e-9);
    }

    #[test]
    fn failover_gap_lands_in_the_calibrated_band() {
        let cfg = ScenarioConfig {
            run_length: 400,
            crash_at_us: Some(500.0),
            ..base(3)
        };
        let r = run_failover(&cfg, None).unwrap();
        assert!((r.detection_us - 30.0).abs() < 1e-9);
        assert!(r.gap_us >= 50.0 && r.gap_us <= 80.0, "gap {}", r.gap_us);
        assert!(
            r.steady_throughput_per_100us >= 38.0 && r.steady_throughput_per_100us <= 46.0,
            "tput {}",
            r.steady_throughput_per_100us
        );
        assert_eq!(r.decided, 400);
    }

    #[test]
    fn identical_seeds_produce_identical_artifacts() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg = ScenarioConfig {
            jitter_us: 0.4,
            run_length: 100,
            ..base(9)
        };
        run_common_case(&cfg, Some(dir_a.path())).unwrap();
        run_common_case(&cfg, Some(dir_b.path())).unwrap();
        for file in ["trace.jsonl", "metrics.csv", "counters.txt"] {
            let a = std::fs::read(dir_a.path().join(file)).unwrap();
            let b = std::fs::read(dir_b.path().join(file)).unwrap();
            assert_eq!(a, b, "{file} differs between identical runs");
            assert!(!a.is_empty());
        }
    }

    #[test]
    fn threaded_mode_keeps_agreement_under_contention() {
        let cfg = ScenarioConfig {
            mode: Mode::Threaded,
            run_length: 50,
            proposers: 3,
            seed: Some(4),
            ..Default::default()
        };
        let r = run_threaded(&cfg).unwrap();
        assert_eq!(r.instances, 50);
        assert!(r.chain_ok);
        assert!(r.decided_instances > 0);
    }
}
