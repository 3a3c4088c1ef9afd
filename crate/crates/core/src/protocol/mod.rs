//! The manager-free secure aggregation protocol wrapped around the
//! projected-gradient iteration.
//!
//! Every iteration, every agent acts as dealer and shareholder at once: it
//! fixed-point-encodes each slot of its charging profile, deals a fresh
//! random degree-k polynomial per slot, sends evaluation j to agent j and
//! keeps its own, sums the n shares it holds into vᵢ, broadcasts vᵢ, and
//! interpolates the k+1 lowest-indexed broadcast points at zero. The
//! constant term is the field sum of all encoded profiles; one decode yields
//! `Σ xᵢ` and the agent proceeds with its local primal/dual update.
//!
//! Dual variables, demands, rate caps, and step sizes never touch the wire.

pub mod adversary;

use std::collections::BTreeSet;
use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoding::FixedPointCodec;
use crate::field::FieldElement;
use crate::optim::{
    agent_update, AgentState, EvSpec, Horizon, IterationRecord, Scenario, SolveOutput, TraceRow,
};
use crate::shamir::{self, SharePoint, SharingPolicy};
use crate::transport::{
    InProcBus, InProcBusOptions, MessageKind, Recipient, RoundMessage, Tap, TapKind, Transport,
};
use crate::{optim, Error, Result};

pub use adversary::{
    attack_reconstruct, AdversarySpec, AdversaryView, AttackOutcome, CertificateDetail,
    InsufficiencyCertificate,
};

/// Everything agents must agree on before a run. The node values α are
/// common knowledge among agents but are never transmitted.
#[derive(Debug, Clone)]
pub struct ProtocolConfig {
    pub policy: SharingPolicy,
    pub codec: FixedPointCodec,
    pub nodes: Vec<FieldElement>,
    pub horizon: Horizon,
    pub seed: u64,
}

impl ProtocolConfig {
    pub fn new(
        policy: SharingPolicy,
        codec: FixedPointCodec,
        nodes: Vec<FieldElement>,
        horizon: Horizon,
        seed: u64,
    ) -> Result<Self> {
        let n = policy.shareholders();
        // With two agents each can subtract its own secret from the decoded
        // sum and read off the other's profile, so the aggregate itself
        // breaks privacy. Three or more keep every individual profile hidden
        // behind a sum of at least two unknowns.
        if n < 3 {
            return Err(Error::Config(format!(
                "at least 3 agents are required for a privacy-preserving run; with n = {n} \
                 an agent can derive a peer's profile from the aggregate"
            )));
        }
        if nodes.len() != n {
            return Err(Error::Config(format!(
                "{} nodes supplied for {n} agents",
                nodes.len()
            )));
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.field() != policy.field() {
                return Err(Error::Config("node outside the policy field".into()));
            }
            if node.is_zero() {
                return Err(Error::Config("node 0 would expose secrets directly".into()));
            }
            if nodes[..i].contains(node) {
                return Err(Error::Config(format!(
                    "duplicate node value {}",
                    node.value()
                )));
            }
        }
        if codec.field() != policy.field() {
            return Err(Error::Config(
                "codec and sharing policy use different fields".into(),
            ));
        }
        if codec.capacity() < n as u64 {
            return Err(Error::Config(format!(
                "codec capacity {} cannot absorb {n} addends",
                codec.capacity()
            )));
        }
        if horizon.slots > u16::MAX as usize {
            return Err(Error::Config(
                "horizon does not fit the wire slot field".into(),
            ));
        }
        Ok(ProtocolConfig {
            policy,
            codec,
            nodes,
            horizon,
            seed,
        })
    }

    /// Per-agent deterministic coefficient stream. Stream 0 is reserved for
    /// scenario sampling.
    pub fn agent_rng(&self, agent_id: u16) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1 + agent_id as u64);
        rng
    }
}

/// Dealer-side record of one round, kept only when a run is asked to expose
/// an agent's local knowledge (result files, coalition adversaries).
#[derive(Debug, Clone)]
pub struct RoundWitness {
    pub round: u32,
    /// Encoded secret per slot.
    pub secrets: Vec<u64>,
    /// Full coefficient vector per slot, constant term first.
    pub coeffs: Vec<Vec<u64>>,
    /// The self-addressed share pᵢ(αᵢ) per slot; never transmitted.
    pub kept_share: Vec<u64>,
}

/// All rounds of one agent's local dealer knowledge.
#[derive(Debug, Clone)]
pub struct AgentWitness {
    pub agent: u16,
    pub rounds: Vec<RoundWitness>,
}

/// Buffers messages that arrive ahead of the phase the agent is collecting.
#[derive(Default)]
struct Inbox {
    pending: Vec<RoundMessage>,
}

impl Inbox {
    /// Collects exactly one message of `kind` for round `round` from every
    /// sender except `me`, for every slot. Returns payloads indexed
    /// [sender][slot]; the caller's own row stays zero.
    fn collect<T: Transport>(
        &mut self,
        endpoint: &mut T,
        kind: MessageKind,
        round: u32,
        me: u16,
        n: usize,
        slots: usize,
    ) -> Result<Vec<Vec<u64>>> {
        let mut got: Vec<Vec<Option<u64>>> = vec![vec![None; slots]; n];
        let mut outstanding = (n - 1) * slots;

        let mut stash = Vec::new();
        for msg in self.pending.drain(..) {
            if msg.kind == kind && msg.round == round {
                Self::file(&mut got, &mut outstanding, me, n, slots, msg, round)?;
            } else {
                stash.push(msg);
            }
        }
        self.pending = stash;

        while outstanding > 0 {
            let msg = match endpoint.recv() {
                Ok(msg) => msg,
                Err(Error::Transport(_)) => {
                    return Err(Error::RoundAbort {
                        round,
                        missing: missing_senders(&got, me),
                    });
                }
                Err(other) => return Err(other),
            };
            if msg.kind == kind && msg.round == round {
                Self::file(&mut got, &mut outstanding, me, n, slots, msg, round)?;
            } else {
                self.pending.push(msg);
            }
        }

        Ok(got
            .into_iter()
            .map(|row| row.into_iter().map(|v| v.unwrap_or(0)).collect())
            .collect())
    }

    fn file(
        got: &mut [Vec<Option<u64>>],
        outstanding: &mut usize,
        me: u16,
        n: usize,
        slots: usize,
        msg: RoundMessage,
        round: u32,
    ) -> Result<()> {
        let sender = msg.sender as usize;
        let slot = msg.slot as usize;
        if sender >= n || slot >= slots || msg.sender == me {
            return Err(Error::Integrity {
                round,
                detail: format!(
                    "message from sender {} for slot {} is outside the run's shape",
                    msg.sender, msg.slot
                ),
            });
        }
        if got[sender][slot].replace(msg.payload).is_some() {
            return Err(Error::Integrity {
                round,
                detail: format!(
                    "duplicate {:?} message from agent {} for slot {}",
                    msg.kind, msg.sender, msg.slot
                ),
            });
        }
        *outstanding -= 1;
        Ok(())
    }
}

fn missing_senders(got: &[Vec<Option<u64>>], me: u16) -> Vec<u16> {
    got.iter()
        .enumerate()
        .filter(|(sender, row)| *sender != me as usize && row.iter().any(|v| v.is_none()))
        .map(|(sender, _)| sender as u16)
        .collect()
}

/// Barrier phase id for a round (low bits left for future phases).
fn share_phase(round: u32) -> u64 {
    (round as u64) << 2
}

/// One aggregation round from a single agent's perspective: deal, exchange,
/// sum, broadcast, reconstruct, decode. Returns the decoded aggregate; every
/// honest agent obtains the identical vector.
fn aggregation_round<T: Transport>(
    endpoint: &mut T,
    inbox: &mut Inbox,
    round: u32,
    x: &[f64],
    config: &ProtocolConfig,
    rng: &mut ChaCha8Rng,
    mut witness: Option<&mut RoundWitness>,
) -> Result<Vec<f64>> {
    let me = endpoint.agent_id();
    let n = config.policy.shareholders();
    let slots = x.len();
    let field = config.policy.field();

    // Share phase: fresh coefficients per slot, evaluation j to agent j,
    // own evaluation kept.
    let mut kept: Vec<FieldElement> = Vec::with_capacity(slots);
    for (t, &xt) in x.iter().enumerate() {
        let secret = config.codec.encode(xt)?;
        let (poly, shares) = shamir::deal(secret, &config.policy, &config.nodes, rng)?;
        if let Some(w) = witness.as_deref_mut() {
            w.secrets.push(secret.value());
            w.coeffs
                .push(poly.coeffs().iter().map(|c| c.value()).collect());
            w.kept_share.push(shares[me as usize].value.value());
        }
        for j in 0..n as u16 {
            if j != me {
                endpoint.send(RoundMessage {
                    kind: MessageKind::Share,
                    sender: me,
                    receiver: Recipient::Agent(j),
                    round,
                    slot: t as u16,
                    payload: shares[j as usize].value.value(),
                })?;
            }
        }
        kept.push(shares[me as usize].value);
    }
    endpoint.flush()?;

    let shares_in = inbox.collect(endpoint, MessageKind::Share, round, me, n, slots)?;

    // One synchronization point between the share phase and the broadcast
    // phase keeps iterations in lockstep.
    endpoint.barrier(share_phase(round))?;

    // Sum the column of shares this agent holds: vᵢ = Σₗ pₗ(αᵢ).
    let mut v: Vec<FieldElement> = Vec::with_capacity(slots);
    for (t, &own) in kept.iter().enumerate() {
        let mut acc = own;
        for (sender, row) in shares_in.iter().enumerate() {
            if sender != me as usize {
                acc = acc.add(field.element(row[t]))?;
            }
        }
        v.push(acc);
    }

    for (t, &vt) in v.iter().enumerate() {
        endpoint.broadcast(RoundMessage {
            kind: MessageKind::Broadcast,
            sender: me,
            receiver: Recipient::All,
            round,
            slot: t as u16,
            payload: vt.value(),
        })?;
    }
    endpoint.flush()?;

    let broadcasts = inbox.collect(endpoint, MessageKind::Broadcast, round, me, n, slots)?;

    // Reconstruction: the n broadcast points lie on one degree-k polynomial
    // whose constant term is the encoded sum. The k+1 lowest-indexed points
    // reconstruct it; the surplus points are the integrity check.
    let mut aggregate = Vec::with_capacity(slots);
    for t in 0..slots {
        let points: Vec<SharePoint> = (0..n)
            .map(|l| SharePoint {
                node: config.nodes[l],
                value: if l == me as usize {
                    v[t]
                } else {
                    field.element(broadcasts[l][t])
                },
            })
            .collect();
        if !shamir::consistency_check(&points, &config.policy) {
            return Err(Error::Integrity {
                round,
                detail: format!(
                    "broadcast points for slot {t} do not lie on a degree-{} polynomial",
                    config.policy.degree()
                ),
            });
        }
        let sum = shamir::reconstruct(&points, &config.policy)?;
        aggregate.push(config.codec.decode(sum));
    }
    Ok(aggregate)
}

/// Everything one agent needs to participate in a run.
pub struct AgentSetup {
    pub agent_id: u16,
    pub spec: EvSpec,
    pub baseline: Vec<f64>,
    pub beta: f64,
    pub eps0: f64,
    pub max_iter: usize,
    /// Record dealer-side knowledge (secrets, coefficients, kept shares).
    pub capture_witness: bool,
}

/// One agent's complete run record.
#[derive(Debug, Clone)]
pub struct AgentRunOutput {
    pub agent_id: u16,
    pub state: AgentState,
    pub eps_trace: Vec<f64>,
    pub lambda_trace: Vec<f64>,
    pub x_trace: Vec<Vec<f64>>,
    pub aggregates: Vec<Vec<f64>>,
    pub converged_at: Option<usize>,
    pub witness: Option<AgentWitness>,
}

/// The full protocol loop for one agent: aggregation rounds interleaved with
/// local primal/dual updates. An agent whose squared displacement reaches
/// ε₀ freezes its iterate but keeps dealing its frozen profile so the
/// others' aggregates stay correct; the loop itself always runs to
/// `max_iter` rounds, keeping all agents in lockstep.
pub fn run_agent<T: Transport>(
    setup: AgentSetup,
    config: &ProtocolConfig,
    mut endpoint: T,
) -> Result<AgentRunOutput> {
    let slots = config.horizon.slots;
    let dt = config.horizon.dt_hours;
    if setup.baseline.len() != slots {
        return Err(Error::Config(format!(
            "baseline has {} slots, horizon has {slots}",
            setup.baseline.len()
        )));
    }
    if setup.max_iter > u32::MAX as usize {
        return Err(Error::Config("iteration count does not fit the wire".into()));
    }

    let mut rng = config.agent_rng(setup.agent_id);
    let mut inbox = Inbox::default();
    let mut state = AgentState::new(setup.spec, slots);
    let mut converged_at: Option<usize> = None;

    let mut eps_trace = Vec::with_capacity(setup.max_iter);
    let mut lambda_trace = Vec::with_capacity(setup.max_iter);
    let mut x_trace = Vec::with_capacity(setup.max_iter);
    let mut aggregates = Vec::with_capacity(setup.max_iter);
    let mut witness_rounds = Vec::new();

    for round in 0..setup.max_iter as u32 {
        let mut round_witness = setup.capture_witness.then(|| RoundWitness {
            round,
            secrets: Vec::with_capacity(slots),
            coeffs: Vec::with_capacity(slots),
            kept_share: Vec::with_capacity(slots),
        });

        let aggregate = aggregation_round(
            &mut endpoint,
            &mut inbox,
            round,
            &state.x,
            config,
            &mut rng,
            round_witness.as_mut(),
        )?;

        let eps = if converged_at.is_none() {
            let update = agent_update(&state, &setup.baseline, &aggregate, setup.beta, dt)?;
            state.x = update.x;
            state.lambda = update.lambda;
            if update.eps <= setup.eps0 {
                converged_at = Some(round as usize + 1);
            }
            update.eps
        } else {
            0.0
        };

        eps_trace.push(eps);
        lambda_trace.push(state.lambda);
        x_trace.push(state.x.clone());
        aggregates.push(aggregate);
        if let Some(w) = round_witness {
            witness_rounds.push(w);
        }
    }

    Ok(AgentRunOutput {
        agent_id: setup.agent_id,
        state,
        eps_trace,
        lambda_trace,
        x_trace,
        aggregates,
        converged_at,
        witness: setup.capture_witness.then_some(AgentWitness {
            agent: setup.agent_id,
            rounds: witness_rounds,
        }),
    })
}

/// A complete multi-agent run: solver-compatible output plus protocol-side
/// artifacts.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub solve: SolveOutput,
    /// Narrow message sample for result files (slot 0, first two agents).
    pub sampled_messages: Vec<RoundMessage>,
    /// Agent 0's per-round polynomial coefficients for slot 0.
    pub polynomial_trace: Vec<(u32, Vec<u64>)>,
    /// Present when the run was asked to record an adversary's view.
    pub adversary: Option<AdversaryView>,
}

impl RunOutput {
    pub fn digest(&self) -> String {
        self.solve.digest()
    }
}

/// Runs the full protocol over the in-process bus, one thread per agent.
pub fn run_protocol(
    scenario: &Scenario,
    config: &ProtocolConfig,
    adversary: Option<&AdversarySpec>,
) -> Result<RunOutput> {
    let mut tap_kinds = vec![TapKind::SlotSampler {
        slot: 0,
        senders: [0u16, 1].into_iter().collect(),
    }];
    match adversary {
        Some(AdversarySpec::Eavesdropper) => tap_kinds.push(TapKind::Eavesdropper),
        Some(AdversarySpec::Coalition(members)) => {
            tap_kinds.push(TapKind::Insider(members.clone()))
        }
        None => {}
    }

    let n = config.policy.shareholders();
    let (endpoints, taps) = InProcBus::build(n, InProcBusOptions::default(), &tap_kinds);
    run_protocol_with_endpoints(scenario, config, endpoints, &taps, adversary)
}

/// Runs the protocol over caller-supplied endpoints (the in-process path
/// above, or TCP endpoints living in one process).
pub fn run_protocol_with_endpoints<T: Transport + 'static>(
    scenario: &Scenario,
    config: &ProtocolConfig,
    endpoints: Vec<T>,
    taps: &[Tap],
    adversary: Option<&AdversarySpec>,
) -> Result<RunOutput> {
    scenario.validate()?;
    let n = config.policy.shareholders();
    if scenario.fleet.len() != n {
        return Err(Error::Config(format!(
            "scenario has {} EVs but the protocol is configured for {n}",
            scenario.fleet.len()
        )));
    }
    if scenario.horizon != config.horizon {
        return Err(Error::Config(
            "scenario and protocol configuration disagree on the horizon".into(),
        ));
    }
    if endpoints.len() != n {
        return Err(Error::Config(format!(
            "{} endpoints for {n} agents",
            endpoints.len()
        )));
    }

    let coalition: BTreeSet<u16> = match adversary {
        Some(AdversarySpec::Coalition(members)) => members.clone(),
        _ => BTreeSet::new(),
    };

    let mut outputs: Vec<Option<AgentRunOutput>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for (i, endpoint) in endpoints.into_iter().enumerate() {
            let setup = AgentSetup {
                agent_id: i as u16,
                spec: scenario.fleet[i].clone(),
                baseline: scenario.baseline.clone(),
                beta: scenario.beta,
                eps0: scenario.eps0,
                max_iter: scenario.max_iter,
                // agent 0 feeds the polynomial trace in every run
                capture_witness: i == 0 || coalition.contains(&(i as u16)),
            };
            handles.push(scope.spawn(move || run_agent(setup, config, endpoint)));
        }
        for (i, handle) in handles.into_iter().enumerate() {
            let out = handle
                .join()
                .map_err(|_| Error::Transport(format!("agent {i} panicked")))??;
            outputs[i] = Some(out);
        }
        Ok(())
    })?;
    let outputs: Vec<AgentRunOutput> = outputs.into_iter().map(|o| o.unwrap()).collect();

    // Every agent must have decoded identical aggregates; anything else is
    // a protocol defect.
    for out in &outputs[1..] {
        if out.aggregates != outputs[0].aggregates {
            return Err(Error::Integrity {
                round: 0,
                detail: format!("agent {} decoded a different aggregate", out.agent_id),
            });
        }
    }

    let rounds = scenario.max_iter;
    let mut trace = Vec::with_capacity(rounds * n);
    let mut trajectory = Vec::with_capacity(rounds);
    for r in 0..rounds {
        let objective = optim::objective(&scenario.baseline, &outputs[0].aggregates[r]);
        for out in &outputs {
            trace.push(TraceRow {
                iteration: r + 1,
                agent: out.agent_id as usize,
                eps: out.eps_trace[r],
                lambda: out.lambda_trace[r],
                objective,
            });
        }
        trajectory.push(IterationRecord {
            xs: outputs.iter().map(|o| o.x_trace[r].clone()).collect(),
            lambdas: outputs.iter().map(|o| o.lambda_trace[r]).collect(),
        });
    }

    let polynomial_trace = outputs[0]
        .witness
        .as_ref()
        .map(|w| {
            w.rounds
                .iter()
                .map(|r| (r.round, r.coeffs.first().cloned().unwrap_or_default()))
                .collect()
        })
        .unwrap_or_default();

    let adversary_view = adversary.map(|spec| {
        let captured = taps
            .iter()
            .find(|t| {
                matches!(
                    (spec, t.kind()),
                    (AdversarySpec::Eavesdropper, TapKind::Eavesdropper)
                        | (AdversarySpec::Coalition(_), TapKind::Insider(_))
                )
            })
            .map(|t| t.snapshot())
            .unwrap_or_default();
        let insider = outputs
            .iter()
            .filter(|o| coalition.contains(&o.agent_id))
            .filter_map(|o| o.witness.clone().map(|w| (o.agent_id, w)))
            .collect();
        AdversaryView {
            mode: spec.clone(),
            captured,
            insider,
            nodes: match spec {
                // every agent knows all the α's; an outside wiretap does not
                AdversarySpec::Coalition(_) => {
                    Some(config.nodes.iter().map(|n| n.value()).collect())
                }
                AdversarySpec::Eavesdropper => None,
            },
        }
    });

    let solve = SolveOutput {
        states: outputs.iter().map(|o| o.state.clone()).collect(),
        trace,
        aggregates: outputs[0].aggregates.clone(),
        trajectory,
        converged_at: outputs.iter().map(|o| o.converged_at).collect(),
        iterations: rounds,
    };

    Ok(RunOutput {
        solve,
        sampled_messages: taps
            .iter()
            .find(|t| matches!(t.kind(), TapKind::SlotSampler { .. }))
            .map(|t| t.snapshot())
            .unwrap_or_default(),
        polynomial_trace,
        adversary: adversary_view,
    })
}

/// One standalone secure-sum round: every agent contributes a vector, all
/// agents learn the slot-wise sum (to fixed-point precision) and nothing
/// else. Returns each agent's decoded copy.
pub fn secure_aggregate_round(
    local_vectors: &[Vec<f64>],
    config: &ProtocolConfig,
) -> Result<Vec<Vec<f64>>> {
    let n = config.policy.shareholders();
    if local_vectors.len() != n {
        return Err(Error::Config(format!(
            "{} input vectors for {n} agents",
            local_vectors.len()
        )));
    }
    let slots = config.horizon.slots;
    for (i, v) in local_vectors.iter().enumerate() {
        if v.len() != slots {
            return Err(Error::InvalidInput(format!(
                "agent {i} vector has {} slots, expected {slots}",
                v.len()
            )));
        }
    }

    let (endpoints, _) = InProcBus::build(n, InProcBusOptions::default(), &[]);
    let mut results: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for (i, mut endpoint) in endpoints.into_iter().enumerate() {
            let x = local_vectors[i].clone();
            handles.push(scope.spawn(move || -> Result<Vec<f64>> {
                let mut rng = config.agent_rng(i as u16);
                let mut inbox = Inbox::default();
                aggregation_round(&mut endpoint, &mut inbox, 0, &x, config, &mut rng, None)
            }));
        }
        for (i, handle) in handles.into_iter().enumerate() {
            results[i] = Some(
                handle
                    .join()
                    .map_err(|_| Error::Transport(format!("agent {i} panicked")))??,
            );
        }
        Ok(())
    })?;
    Ok(results.into_iter().map(|r| r.unwrap()).collect())
}

/// Plaintext fixed-point sum with the same arithmetic shape the secure round
/// produces: sum of floors in the field, one decode. The independent
/// comparison point for correctness tests.
pub fn plaintext_fixed_point_sum(
    local_vectors: &[Vec<f64>],
    codec: &FixedPointCodec,
) -> Result<Vec<f64>> {
    let slots = local_vectors.first().map(|v| v.len()).unwrap_or(0);
    let mut out = Vec::with_capacity(slots);
    for t in 0..slots {
        let mut acc = codec.field().zero();
        for v in local_vectors {
            acc = acc.add(codec.encode(v[t])?)?;
        }
        out.push(codec.decode(acc));
    }
    Ok(out)
}

/// Convenience: α_i = i + 1 for agents 0..n−1 (wire ids are zero-based, the
/// customary node values are one-based).
pub fn default_nodes(n: usize, field: crate::field::FieldPrime) -> Vec<FieldElement> {
    (1..=n as u64).map(|i| field.element(i)).collect()
}

/// Groups a sampled-message log by (round, sender) for result files.
pub fn sampled_by_round(messages: &[RoundMessage]) -> HashMap<(u32, u16), Vec<RoundMessage>> {
    let mut out: HashMap<(u32, u16), Vec<RoundMessage>> = HashMap::new();
    for m in messages {
        out.entry((m.round, m.sender)).or_default().push(*m);
    }
    out
}
