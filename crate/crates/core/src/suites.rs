//! Property suites shared by the acceptance tests and the CLI runner.
//!
//! Three suites, each yielding one pass/fail line per checked property:
//!
//! - `lemma_suite`: the one-sided RPC transformation properties --
//!   equivalence with the plain RPC when unobstructed, no side effect on
//!   abort, no aborts when running alone, and the handler-semantics lift of
//!   whole solo executions.
//! - `safety_suite`: bounded exploration of all four protocols plus the
//!   three deliberate defects the explorer must catch.
//! - `smr_suite`: replication-level properties -- bounded retry
//!   convergence under wrong predictions, exact amortized round counts,
//!   payload recoverability under leader crashes, and the proposal-overflow
//!   fallback.

use crate::casrpc::{rpc, AcceptSpec, CasRpcLeg, CasRpcResult, Fetch, PrepareSpec, RpcSpec};
use crate::checker::{explore, replay, ExploreConfig, Protocol};
use crate::defect::Defect;
use crate::fabric::{Completion, Fabric, FabricConfig, OpKind, Sim, TicketId, TraceSink, VTime};
use crate::onesided::{ProposeEvent, RunMode, StreamlinedProposer};
use crate::rpcpaxos::{handle_accept, handle_prepare, HostNode};
use crate::scenario::{run_common_case, run_failover, ScenarioConfig};
use crate::smr::{request_payload, Recovery, RecoveryResult, SmrConfig, SmrNode};
use crate::types::{AcceptorState, ProcessId, ProposalNumber, SlotLayout, SlotWord, ValueId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: String,
    pub results: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.results.iter().all(|r| r.pass)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            out.push_str(&format!(
                "[{}] {}/{}: {}\n",
                if r.pass { "PASS" } else { "FAIL" },
                self.suite,
                r.name,
                r.detail
            ));
        }
        out
    }
}

fn check(results: &mut Vec<CheckResult>, name: &str, pass: bool, detail: String) {
    results.push(CheckResult {
        name: name.to_string(),
        pass,
        detail,
    });
}

fn random_state(rng: &mut ChaCha8Rng, layout: SlotLayout, bound: u64) -> AcceptorState {
    let min = rng.gen_range(0..bound);
    let accepted = rng.gen_range(0..=min);
    let value = (accepted > 0).then(|| rng.gen_range(0..=layout.max_value_id()));
    AcceptorState::new(min, accepted, value)
}

/// Like [`random_state`] but globally consistent: a given accepted proposal
/// always names the same value, as any real execution guarantees.
fn random_consistent_state(rng: &mut ChaCha8Rng, layout: SlotLayout, bound: u64) -> AcceptorState {
    let min = rng.gen_range(0..bound);
    let accepted = rng.gen_range(0..=min);
    let value =
        (accepted > 0).then(|| ((accepted * 7 + 3) % (layout.max_value_id() as u64 + 1)) as u8);
    AcceptorState::new(min, accepted, value)
}

fn tiny_sim(seed: u64, word: SlotWord) -> Sim<HostNode> {
    let cfg = FabricConfig {
        processes: 2,
        slots: 1,
        seed,
        ..Default::default()
    };
    let mut fabric = Fabric::new(cfg, TraceSink::Null);
    fabric.preset_word(ProcessId(1), 0, word);
    Sim::new(fabric, vec![HostNode::default(), HostNode::default()])
}

fn drive_leg<S: RpcSpec>(
    sim: &mut Sim<HostNode>,
    leg: &mut CasRpcLeg<S>,
    fetch: Fetch,
) -> CasRpcResult<S::Reply> {
    if let Some(done) = sim.with_port(ProcessId(0), |port, _| leg.start(port, fetch)) {
        return done;
    }
    loop {
        assert!(sim.step(), "leg never resolved");
        let pending: Vec<(TicketId, Completion)> = sim.nodes[0].completions.drain(..).collect();
        for (ticket, completion) in pending {
            let r = sim.with_port(ProcessId(0), |port, _| {
                leg.on_completion(port, ticket, &completion)
            });
            if let Some(done) = r {
                return done;
            }
        }
    }
}

/// Equivalence, no-side-effect, obstruction-freedom, and the solo-execution
/// handler lift. `cases` bounds the randomized case count per property.
pub fn lemma_suite(seed: u64, cases: usize) -> SuiteReport {
    let layout = SlotLayout::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();

    // Unobstructed cas-rpc equals rpc, and never aborts, for both specs.
    let mut mismatches = 0usize;
    let mut solo_aborts = 0usize;
    for i in 0..cases {
        let state = random_state(&mut rng, layout, 1000);
        let word = state.pack(layout).unwrap();
        let x = ProposalNumber(rng.gen_range(0..1200));
        let mut sim = tiny_sim(seed ^ i as u64, word);
        if i % 2 == 0 {
            let mut leg = CasRpcLeg::new(PrepareSpec, x, ProcessId(1), 0, layout);
            let got = drive_leg(&mut sim, &mut leg, Fetch::Fresh);
            let mut oracle = state;
            let want = rpc(&PrepareSpec, &x, &mut oracle);
            match got {
                CasRpcResult::Reply(reply) => {
                    if reply != want
                        || sim.fabric.word(ProcessId(1), 0) != oracle.pack(layout).unwrap()
                    {
                        mismatches += 1;
                    }
                }
                CasRpcResult::Aborted => solo_aborts += 1,
            }
        } else {
            let value = ValueId(rng.gen_range(0..=layout.max_value_id()));
            let mut leg = CasRpcLeg::new(AcceptSpec, (x, value), ProcessId(1), 0, layout);
            let got = drive_leg(&mut sim, &mut leg, Fetch::Fresh);
            let mut oracle = state;
            let want = rpc(&AcceptSpec, &(x, value), &mut oracle);
            match got {
                CasRpcResult::Reply(reply) => {
                    if reply != want
                        || sim.fabric.word(ProcessId(1), 0) != oracle.pack(layout).unwrap()
                    {
                        mismatches += 1;
                    }
                }
                CasRpcResult::Aborted => solo_aborts += 1,
            }
        }
    }
    check(
        &mut results,
        "equivalence",
        mismatches == 0,
        format!("{cases} unobstructed invocations, {mismatches} mismatches vs plain rpc"),
    );
    check(
        &mut results,
        "obstruction-freedom",
        solo_aborts == 0,
        format!("{solo_aborts} aborts across {cases} solo invocations"),
    );

    // Every aborted invocation leaves the word untouched by its caller.
    let contended = (cases / 10).max(100);
    let mut aborted = 0usize;
    let mut side_effects = 0usize;
    for i in 0..contended {
        let state = random_state(&mut rng, layout, 50);
        let word = state.pack(layout).unwrap();
        let x = ProposalNumber(state.min_proposal.0 + 1 + rng.gen_range(0..50));
        let mut sim = tiny_sim(seed ^ (0x5eed ^ i as u64), word);
        let mut leg = CasRpcLeg::new(PrepareSpec, x, ProcessId(1), 0, layout);
        assert!(sim
            .with_port(ProcessId(0), |port, _| leg.start(port, Fetch::Fresh))
            .is_none());
        // Interpose a competing mutation between the fetch and the swap.
        sim.run_until(VTime::from_us(1.0));
        let mut competing = state;
        competing.min_proposal = ProposalNumber(x.0 + 1 + rng.gen_range(0..10));
        sim.with_port(ProcessId(1), |port, _| {
            port.post_cas(ProcessId(1), 0, word, competing.pack(layout).unwrap())
        });
        let mut outcome = None;
        let mut swap_ticket = None;
        while outcome.is_none() {
            assert!(sim.step());
            let pending: Vec<(TicketId, Completion)> = sim.nodes[0].completions.drain(..).collect();
            for (ticket, completion) in pending {
                let r = sim.with_port(ProcessId(0), |port, _| {
                    leg.on_completion(port, ticket, &completion)
                });
                if matches!(completion, Completion::Cas { .. }) {
                    swap_ticket = Some(ticket);
                }
                if r.is_some() {
                    outcome = r;
                }
            }
        }
        if matches!(outcome, Some(CasRpcResult::Aborted)) {
            aborted += 1;
            let record = sim
                .fabric
                .apply_log()
                .iter()
                .find(|r| r.ticket == swap_ticket)
                .expect("the aborted swap applied");
            if record.swapped || record.new != record.old {
                side_effects += 1;
            }
        }
    }
    check(
        &mut results,
        "no-side-effect",
        aborted > 0 && side_effects == 0,
        format!("{aborted} aborted invocations, {side_effects} with side effects"),
    );

    // Whole solo executions land acceptors exactly where the message
    // handlers would, fed the operations that actually took effect.
    let runs = (cases / 100).max(100);
    let mut lift_failures = 0usize;
    for i in 0..runs {
        if let Err(e) = solo_lift_case(seed ^ (0x11f7u64 ^ ((i as u64) << 8)), layout, &mut rng) {
            lift_failures += 1;
            if lift_failures == 1 {
                eprintln!("lift failure: {e}");
            }
        }
    }
    check(
        &mut results,
        "handler-lift",
        lift_failures == 0,
        format!("{runs} solo executions replayed through the message handlers"),
    );

    SuiteReport {
        suite: "lemmas".into(),
        results,
    }
}

/// One randomized solo streamlined execution; replays its effective CASes
/// through the message handlers and compares final states.
fn solo_lift_case(seed: u64, layout: SlotLayout, rng: &mut ChaCha8Rng) -> Result<(), String> {
    let n = 3;
    let cfg = FabricConfig {
        processes: n as u32,
        slots: 1,
        seed,
        ..Default::default()
    };
    let mut fabric = Fabric::new(cfg, TraceSink::Null);
    let mut initial = Vec::new();
    for a in 0..n {
        let st = random_consistent_state(rng, layout, 12);
        fabric.preset_word(ProcessId(a as u32), 0, st.pack(layout).unwrap());
        initial.push(st);
    }
    let mut sim = Sim::new(fabric, (0..n).map(|_| HostNode::default()).collect());
    let mut proposer = StreamlinedProposer::new(ProcessId(0), n, layout, 0);
    let value = ValueId(rng.gen_range(0..=layout.max_value_id()));

    let mut attempts = 0;
    'outer: loop {
        attempts += 1;
        if attempts > n + 1 {
            return Err("no decision within n+1 attempts".into());
        }
        sim.with_port(ProcessId(0), |port, _| {
            proposer.propose(port, RunMode::Full, value, None)
        });
        loop {
            let completions: Vec<(TicketId, Completion)> =
                sim.nodes[0].completions.drain(..).collect();
            let mut resolved = None;
            for (t, c) in completions {
                let ev = sim.with_port(ProcessId(0), |port, _| proposer.on_completion(port, t, &c));
                resolved = resolved.or(ev);
            }
            match resolved {
                Some(ProposeEvent::Decided(_)) => break 'outer,
                Some(ProposeEvent::Aborted) => {
                    // Drain stragglers before the retry so predictions settle.
                    sim.run_to_quiescence(10_000);
                    let completions: Vec<(TicketId, Completion)> =
                        sim.nodes[0].completions.drain(..).collect();
                    for (t, c) in completions {
                        sim.with_port(ProcessId(0), |port, _| proposer.on_completion(port, t, &c));
                    }
                    continue 'outer;
                }
                _ => {
                    if !sim.step() {
                        return Err("quiescent without outcome".into());
                    }
                }
            }
        }
    }
    sim.run_to_quiescence(10_000);
    replay_against_handlers(&sim, &initial, layout)
}

fn replay_against_handlers(
    sim: &Sim<HostNode>,
    initial: &[AcceptorState],
    layout: SlotLayout,
) -> Result<(), String> {
    for (a, init) in initial.iter().enumerate() {
        let mut state = *init;
        for record in sim.fabric.apply_log() {
            if !record.swapped || record.op != OpKind::Cas || record.owner != ProcessId(a as u32) {
                continue;
            }
            let old = record.old.unpack(layout).map_err(|e| e.to_string())?;
            let new = record.new.unpack(layout).map_err(|e| e.to_string())?;
            if new.accepted_proposal == old.accepted_proposal
                && new.accepted_value == old.accepted_value
            {
                handle_prepare(&mut state, new.min_proposal);
            } else {
                handle_accept(
                    &mut state,
                    new.accepted_proposal,
                    new.accepted_value.ok_or("accept without value")?,
                );
            }
            if state != new {
                return Err(format!(
                    "handler produced {state:?}, execution produced {new:?}"
                ));
            }
        }
        let final_word = sim.fabric.word(ProcessId(a as u32), 0);
        if state.pack(layout).unwrap() != final_word {
            return Err(format!(
                "acceptor {a}: handlers end at {state:?}, word is {final_word}"
            ));
        }
    }
    Ok(())
}

/// Bounded exploration of every protocol, plus defect sensitivity.
pub fn safety_suite(budget: u64, parallel: bool) -> SuiteReport {
    let mut results = Vec::new();
    for protocol in Protocol::ALL {
        let cfg = ExploreConfig {
            budget,
            parallel,
            ..ExploreConfig::new(protocol)
        };
        let report = explore(&cfg);
        check(
            &mut results,
            protocol.name(),
            report.ok(),
            format!(
                "{} states, {} transitions, {} terminals, {} aborts, {} violations{}",
                report.states,
                report.transitions,
                report.terminals,
                report.abort_events,
                report.violations.len(),
                if report.complete {
                    ""
                } else {
                    " (budget-capped)"
                },
            ),
        );
    }
    let mutations: [(&str, Protocol, Defect); 3] = [
        (
            "mutation-drop-cas-fail-abort",
            Protocol::Streamlined,
            Defect {
                skip_cas_fail_abort: true,
                ..Defect::NONE
            },
        ),
        (
            "mutation-skip-adoption",
            Protocol::Streamlined,
            Defect {
                skip_adoption: true,
                ..Defect::NONE
            },
        ),
        (
            "mutation-accept-below-min",
            Protocol::RefPaxos,
            Defect {
                accept_below_min: true,
                ..Defect::NONE
            },
        ),
    ];
    for (name, protocol, defect) in mutations {
        let cfg = ExploreConfig {
            budget,
            parallel,
            defect,
            crashes: 0,
            stop_at_first_violation: true,
            ..ExploreConfig::new(protocol)
        };
        let report = explore(&cfg);
        let caught = !report.violations.is_empty();
        let replays = caught
            && report.violations.iter().any(|v| {
                let issues = replay(&cfg, &v.witness);
                issues.iter().any(|(k, _)| *k == v.kind)
            });
        check(
            &mut results,
            name,
            caught && replays,
            format!(
                "{} violations after {} transitions, witness replays: {}",
                report.violations.len(),
                report.transitions,
                replays
            ),
        );
    }
    SuiteReport {
        suite: "safety".into(),
        results,
    }
}

/// Replication-level properties.
pub fn smr_suite(seed: u64) -> SuiteReport {
    let mut results = Vec::new();

    // Streamlined liveness: a solo proposer decides within n+1 attempts for
    // every assignment of adversarial initial predictions from a 4-state
    // pool against fixed acceptor words.
    let layout = SlotLayout::default();
    let pool = [
        AcceptorState::INITIAL,
        AcceptorState::new(5, 0, None),
        AcceptorState::new(7, 7, Some(1)),
        AcceptorState::new(9, 4, Some(2)),
    ];
    let actual = [
        AcceptorState::INITIAL,
        AcceptorState::new(5, 0, None),
        AcceptorState::new(7, 7, Some(1)),
    ];
    let mut worst = 0u32;
    let mut failures = 0usize;
    for combo in 0..(pool.len().pow(3)) {
        let predicted: Vec<AcceptorState> = (0..3)
            .map(|i| pool[(combo / pool.len().pow(i)) % pool.len()])
            .collect();
        match convergence_case(seed, layout, &actual, predicted) {
            Ok(attempts) => worst = worst.max(attempts),
            Err(_) => failures += 1,
        }
    }
    check(
        &mut results,
        "bounded-retries",
        failures == 0 && worst <= 4,
        format!("64 prediction grids, worst case {worst} attempts (bound 4)"),
    );

    // Amortized rounds: exactly one critical CAS round per decided slot and
    // two total rounds per slot over a long stable run.
    let cfg = ScenarioConfig {
        seed: Some(seed),
        run_length: 10_000,
        ..Default::default()
    };
    match run_common_case(&cfg, None) {
        Ok(r) => {
            let exact = r.critical_rounds == r.decided && r.total_rounds <= 2 * r.decided;
            check(
                &mut results,
                "amortized-single-cas",
                exact,
                format!(
                    "{} slots: {} critical rounds, {} total rounds",
                    r.decided, r.critical_rounds, r.total_rounds
                ),
            );
        }
        Err(e) => check(&mut results, "amortized-single-cas", false, e.to_string()),
    }

    // Recoverability: randomized leader crashes around the accept window;
    // every decided slot must recover its original payload at a survivor.
    let cases = 1000;
    let mut checked_slots = 0u64;
    let mut recovery_failures = 0u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4ec0);
    for i in 0..cases {
        match recovery_case(seed ^ ((i as u64) << 16), &mut rng) {
            Ok((slots, bad)) => {
                checked_slots += slots;
                recovery_failures += bad;
            }
            Err(e) => {
                recovery_failures += 1;
                if recovery_failures == 1 {
                    eprintln!("recovery case error: {e}");
                }
            }
        }
    }
    check(
        &mut results,
        "recoverability",
        recovery_failures == 0 && checked_slots > 0,
        format!("{checked_slots} decided slots across {cases} crash schedules, {recovery_failures} failures"),
    );

    // Proposal-overflow fallback: an acceptor preset at the threshold runs
    // the whole log in message mode without violations.
    check_fallback(seed, &mut results);

    SuiteReport {
        suite: "smr".into(),
        results,
    }
}

fn convergence_case(
    seed: u64,
    layout: SlotLayout,
    actual: &[AcceptorState],
    predicted: Vec<AcceptorState>,
) -> Result<u32, String> {
    let cfg = FabricConfig {
        processes: 3,
        slots: 1,
        seed,
        ..Default::default()
    };
    let mut fabric = Fabric::new(cfg, TraceSink::Null);
    for (a, st) in actual.iter().enumerate() {
        fabric.preset_word(ProcessId(a as u32), 0, st.pack(layout).unwrap());
    }
    let mut sim = Sim::new(fabric, (0..3).map(|_| HostNode::default()).collect());
    let mut proposer = StreamlinedProposer::new(ProcessId(0), 3, layout, 0);
    proposer.set_predictions(predicted);
    for attempt in 1..=5u32 {
        sim.with_port(ProcessId(0), |port, _| {
            proposer.propose(port, RunMode::Full, ValueId(0), None)
        });
        loop {
            let completions: Vec<(TicketId, Completion)> =
                sim.nodes[0].completions.drain(..).collect();
            let mut resolved = None;
            for (t, c) in completions {
                let ev = sim.with_port(ProcessId(0), |port, _| proposer.on_completion(port, t, &c));
                resolved = resolved.or(ev);
            }
            match resolved {
                Some(ProposeEvent::Decided(_)) => return Ok(attempt),
                Some(ProposeEvent::Aborted) => break,
                _ => {
                    if !sim.step() {
                        return Err("quiescent without outcome".into());
                    }
                }
            }
        }
    }
    Err("no decision within 5 attempts".into())
}

fn recovery_case(seed: u64, rng: &mut ChaCha8Rng) -> Result<(u64, u64), String> {
    let total = rng.gen_range(2..6u64);
    let crash_at = 2.0 + rng.gen_range(0.0..(total as f64) * 3.0);
    let smr_cfg = SmrConfig {
        n: 3,
        proposers: 2,
        total_slots: total,
        window: 4,
        payload_size: 12,
        payload_seed: seed,
        ..Default::default()
    };
    let fabric_cfg = FabricConfig {
        processes: 3,
        slots: total + 8,
        payload_capacity: 32,
        seed,
        ..Default::default()
    };
    let nodes: Vec<SmrNode> = (0..3)
        .map(|i| SmrNode::new(ProcessId(i), smr_cfg.clone()))
        .collect();
    let mut sim = Sim::new(Fabric::new(fabric_cfg, TraceSink::Null), nodes);
    sim.fabric
        .schedule_crash(ProcessId(0), VTime::from_us(crash_at));
    sim.init();
    sim.run_to_quiescence(500_000);

    // Every slot any survivor learned must recover with its payload from a
    // survivor's majority read.
    let decided: std::collections::BTreeSet<u64> = sim
        .nodes
        .iter()
        .skip(1)
        .flat_map(|n| n.decided.keys().copied())
        .collect();
    let mut bad = 0u64;
    for slot in decided.iter().copied() {
        let mut rec = Recovery::new(slot, 3, smr_cfg.layout);
        sim.with_port(ProcessId(1), |port, _| rec.start(port));
        let mut got = None;
        while got.is_none() {
            if !sim.step() {
                return Err("recovery starved".into());
            }
            let pending: Vec<(TicketId, Completion)> = std::mem::take(&mut sim.nodes[1].stray);
            for (t, c) in pending {
                let r = sim.with_port(ProcessId(1), |port, _| rec.on_completion(port, t, &c));
                got = got.or(r);
            }
        }
        match got.unwrap() {
            RecoveryResult::Recovered { payload, .. } => {
                if payload != request_payload(&smr_cfg, slot) {
                    bad += 1;
                }
            }
            RecoveryResult::NotDecided => bad += 1,
        }
    }
    Ok((decided.len() as u64, bad))
}

fn check_fallback(seed: u64, results: &mut Vec<CheckResult>) {
    let smr_cfg = SmrConfig {
        n: 3,
        proposers: 2,
        total_slots: 16,
        window: 4,
        ..Default::default()
    };
    let layout = smr_cfg.layout;
    let threshold = layout.fallback_threshold(3);
    let frozen = AcceptorState {
        min_proposal: threshold,
        accepted_proposal: ProposalNumber::ZERO,
        accepted_value: None,
    };
    let fabric_cfg = FabricConfig {
        processes: 3,
        slots: 32,
        payload_capacity: 32,
        seed,
        ..Default::default()
    };
    let nodes: Vec<SmrNode> = (0..3)
        .map(|i| SmrNode::new(ProcessId(i), smr_cfg.clone()))
        .collect();
    let mut sim = Sim::new(Fabric::new(fabric_cfg, TraceSink::Null), nodes);
    for slot in 0..32 {
        sim.fabric
            .preset_word(ProcessId(2), slot, frozen.pack(layout).unwrap());
    }
    sim.init();
    sim.run_to_quiescence(2_000_000);
    let decided = sim.nodes[0].decided.len() as u64;
    let frozen_intact =
        (0..16).all(|slot| sim.fabric.word(ProcessId(2), slot) == frozen.pack(layout).unwrap());
    let audit = sim.fabric.audit();
    let hashes_agree = {
        use crate::smr::Service;
        sim.nodes
            .iter()
            .all(|n| n.service.state_hash() == sim.nodes[0].service.state_hash())
    };
    check(
        results,
        "overflow-fallback",
        decided == 16 && frozen_intact && audit.is_ok() && hashes_agree,
        format!(
            "16-slot run with a threshold acceptor: decided {decided}, words frozen {frozen_intact}, audit {:?}, replica hashes agree {hashes_agree}",
            audit.is_ok()
        ),
    );
}

/// The failover and common-case calibration checks, shared with acceptance.
pub fn calibration_suite(seed: u64) -> SuiteReport {
    let mut results = Vec::new();
    let cfg = ScenarioConfig {
        seed: Some(seed),
        run_length: 2000,
        ..Default::default()
    };
    match run_common_case(&cfg, None) {
        Ok(r) => {
            let pass = (r.median_latency_us - 1.9).abs() <= 1.9 * 0.05;
            check(
                &mut results,
                "common-case-latency",
                pass,
                format!(
                    "median {:.3} virtual-us (target 1.9 +/- 5%)",
                    r.median_latency_us
                ),
            );
        }
        Err(e) => check(&mut results, "common-case-latency", false, e.to_string()),
    }
    let baseline = ScenarioConfig {
        write_baseline: true,
        ..cfg.clone()
    };
    match run_common_case(&baseline, None) {
        Ok(r) => {
            let pass = (r.median_latency_us - 1.25).abs() <= 1.25 * 0.05;
            check(
                &mut results,
                "write-baseline-latency",
                pass,
                format!(
                    "median {:.3} virtual-us (target 1.25 +/- 5%)",
                    r.median_latency_us
                ),
            );
        }
        Err(e) => check(&mut results, "write-baseline-latency", false, e.to_string()),
    }
    let failover = ScenarioConfig {
        run_length: 600,
        crash_at_us: Some(700.0),
        ..cfg
    };
    match run_failover(&failover, None) {
        Ok(r) => {
            check(
                &mut results,
                "failover-gap",
                r.gap_us >= 50.0 && r.gap_us <= 80.0,
                format!(
                    "crash-to-next-decision gap {:.3} virtual-us (band 50..80)",
                    r.gap_us
                ),
            );
            check(
                &mut results,
                "failover-detection",
                (r.detection_us - 30.0).abs() < 1e-6,
                format!("detection component {:.3} virtual-us", r.detection_us),
            );
            check(
                &mut results,
                "steady-throughput",
                r.steady_throughput_per_100us >= 38.0 && r.steady_throughput_per_100us <= 46.0,
                format!(
                    "{} decisions per 100 virtual-us (band 38..46)",
                    r.steady_throughput_per_100us
                ),
            );
        }
        Err(e) => {
            check(&mut results, "failover-gap", false, e.to_string());
        }
    }
    SuiteReport {
        suite: "calibration".into(),
        results,
    }
}
