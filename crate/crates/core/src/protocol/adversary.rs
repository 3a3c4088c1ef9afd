//! Adversary views and reconstruction attempts.
//!
//! Two attacker models, taken seriously enough to actually run them:
//!
//! * an honest-but-curious coalition of agents, who follow the protocol but
//!   pool everything they legitimately see (their own secrets and
//!   coefficients, the α table, shares addressed to them, all broadcasts);
//! * an external eavesdropper who wiretaps every channel but does not know
//!   the node values α.
//!
//! [`attack_reconstruct`] replays the strongest strategy available to each:
//! interpolating the target's polynomial when enough of its points are held,
//! subtracting own secrets from the reconstructed sum when the coalition is
//! everyone-but-the-target, and otherwise producing an
//! insufficient-information certificate. On small fields the certificate is
//! backed by exhaustively counting coefficient completions per candidate
//! secret; on production-size fields by a rank argument over the held
//! nodes, checked by elimination rather than assumed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::field::{self, FieldElement, FieldPrime};
use crate::protocol::{AgentWitness, ProtocolConfig};
use crate::shamir::SharePoint;
use crate::transport::{MessageKind, Recipient, RoundMessage};
use crate::{Error, Result};

/// Coefficient-enumeration ceiling for exhaustive certificates: e^k at or
/// below this is counted outright, anything larger falls back to the rank
/// argument.
const EXHAUSTIVE_LIMIT: u128 = 2_000_000;

/// Which adversary a run should record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdversarySpec {
    Eavesdropper,
    Coalition(BTreeSet<u16>),
}

/// The exact information set an attacker accumulated during a run.
#[derive(Debug, Clone)]
pub struct AdversaryView {
    pub mode: AdversarySpec,
    /// Captured wire messages, canonically ordered.
    pub captured: Vec<RoundMessage>,
    /// Coalition members' own dealer records; empty for an eavesdropper.
    pub insider: BTreeMap<u16, AgentWitness>,
    /// The α table — common knowledge among agents, unknown to outsiders.
    pub nodes: Option<Vec<u64>>,
}

impl AdversaryView {
    /// Latest round present in the captured log.
    pub fn last_round(&self) -> Option<u32> {
        self.captured.iter().map(|m| m.round).max()
    }
}

/// Outcome of a reconstruction attempt.
#[derive(Debug, Clone)]
pub enum AttackOutcome {
    /// The target's per-slot secrets were recovered exactly.
    Recovered {
        round: u32,
        secrets: Vec<u64>,
        /// Decoded kW profile (the target's profile at fixed-point
        /// precision).
        profile: Vec<f64>,
    },
    Insufficient(InsufficiencyCertificate),
}

impl AttackOutcome {
    pub fn is_recovered(&self) -> bool {
        matches!(self, AttackOutcome::Recovered { .. })
    }
}

/// Evidence that the attempted reconstruction cannot determine the secret.
#[derive(Debug, Clone)]
pub struct InsufficiencyCertificate {
    pub target: u16,
    pub round: u32,
    pub detail: CertificateDetail,
}

#[derive(Debug, Clone)]
pub enum CertificateDetail {
    /// Fewer points on the target's polynomial than its degree + 1.
    TooFewPoints {
        held: usize,
        needed: usize,
        /// e^(k − held): coefficient completions consistent with the held
        /// points, for every candidate secret alike.
        completions_base: u64,
        completions_exp: u32,
        /// The held-node power matrix has full row rank (checked by
        /// elimination), which is what makes the completion count
        /// independent of the candidate secret.
        rank_verified: bool,
        /// On small fields the count is additionally established by brute
        /// force: (candidate secrets checked, completions for each).
        exhaustive: Option<(u64, u64)>,
    },
    /// Wiretap without the node values: every candidate node assignment
    /// yields a consistent interpolation, with no way to prefer one.
    UnknownNodes {
        assignments_tried: u64,
        distinct_candidate_secrets: u64,
        /// On small fields: whether every field value appears as a candidate
        /// secret under some assignment.
        all_field_values_attainable: Option<bool>,
    },
}

impl fmt::Display for InsufficiencyCertificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "insufficient information to reconstruct agent {} at round {}: ",
            self.target, self.round
        )?;
        match &self.detail {
            CertificateDetail::TooFewPoints {
                held,
                needed,
                completions_base,
                completions_exp,
                rank_verified,
                exhaustive,
            } => {
                write!(
                    f,
                    "{held} of the {needed} required polynomial points are held; \
                     every candidate secret admits {completions_base}^{completions_exp} \
                     consistent coefficient completions"
                )?;
                if *rank_verified {
                    write!(f, " (full-rank check passed)")?;
                }
                if let Some((candidates, each)) = exhaustive {
                    write!(
                        f,
                        "; exhaustive count: {each} completions for each of {candidates} \
                         candidate secrets"
                    )?;
                }
                Ok(())
            }
            CertificateDetail::UnknownNodes {
                assignments_tried,
                distinct_candidate_secrets,
                all_field_values_attainable,
            } => {
                write!(
                    f,
                    "polynomial outputs were captured but the evaluation nodes are not on \
                     the wire; {assignments_tried} candidate node assignments each \
                     interpolate consistently and produced {distinct_candidate_secrets} \
                     different candidate secrets"
                )?;
                if let Some(true) = all_field_values_attainable {
                    write!(f, " (every field value is attainable)")?;
                }
                Ok(())
            }
        }
    }
}

/// Replays the strongest reconstruction strategy the view supports against
/// `target`. `round` defaults to the last captured round.
pub fn attack_reconstruct(
    view: &AdversaryView,
    target: u16,
    config: &ProtocolConfig,
    round: Option<u32>,
) -> Result<AttackOutcome> {
    let n = config.policy.shareholders();
    if (target as usize) >= n {
        return Err(Error::InvalidInput(format!(
            "target {target} outside the run's {n} agents"
        )));
    }
    let round = round
        .or_else(|| view.last_round())
        .ok_or_else(|| Error::InvalidInput("the captured view is empty".into()))?;

    match &view.mode {
        AdversarySpec::Coalition(members) => {
            if members.contains(&target) {
                return Err(Error::InvalidInput(
                    "the coalition already owns the target's secrets".into(),
                ));
            }
            coalition_attack(view, members, target, config, round)
        }
        AdversarySpec::Eavesdropper => eavesdropper_attack(view, target, config, round),
    }
}

fn coalition_attack(
    view: &AdversaryView,
    members: &BTreeSet<u16>,
    target: u16,
    config: &ProtocolConfig,
    round: u32,
) -> Result<AttackOutcome> {
    let slots = config.horizon.slots;
    let field = config.policy.field();
    let k = config.policy.degree();
    let n = config.policy.shareholders();

    // Points on the target's polynomials: shares the target addressed to
    // coalition members. Indexed per slot, ordered by member id.
    let mut points_per_slot: Vec<Vec<SharePoint>> = vec![Vec::new(); slots];
    for member in members {
        for msg in &view.captured {
            if msg.kind == MessageKind::Share
                && msg.round == round
                && msg.sender == target
                && msg.receiver == Recipient::Agent(*member)
            {
                points_per_slot[msg.slot as usize].push(SharePoint {
                    node: config.nodes[*member as usize],
                    value: field.element(msg.payload),
                });
            }
        }
    }
    let held = points_per_slot.first().map(|p| p.len()).unwrap_or(0);

    if held > k {
        // Enough points to interpolate the target's polynomial directly.
        let mut secrets = Vec::with_capacity(slots);
        let mut profile = Vec::with_capacity(slots);
        for pts in &points_per_slot {
            let raw: Vec<_> = pts.iter().map(|p| (p.node, p.value)).collect();
            let secret = field::interpolate_at_zero(&raw, k + 1)?;
            secrets.push(secret.value());
            profile.push(config.codec.decode(secret));
        }
        return Ok(AttackOutcome::Recovered {
            round,
            secrets,
            profile,
        });
    }

    if members.len() == n - 1 {
        // Everyone but the target colluding: reconstruct the aggregate from
        // the broadcasts, then subtract the coalition's own secrets.
        let totals = reconstruct_totals_from_broadcasts(view, config, round)?;
        let mut secrets = Vec::with_capacity(slots);
        let mut profile = Vec::with_capacity(slots);
        for (t, total) in totals.iter().enumerate() {
            let mut own = field.zero();
            for member in members {
                let witness = view.insider.get(member).ok_or_else(|| {
                    Error::InvalidInput(format!("no insider record for agent {member}"))
                })?;
                let round_witness = witness
                    .rounds
                    .iter()
                    .find(|r| r.round == round)
                    .ok_or_else(|| {
                        Error::InvalidInput(format!("agent {member} has no round {round} record"))
                    })?;
                own = own.add(field.element(round_witness.secrets[t]))?;
            }
            let secret = total.sub(own)?;
            secrets.push(secret.value());
            profile.push(config.codec.decode(secret));
        }
        return Ok(AttackOutcome::Recovered {
            round,
            secrets,
            profile,
        });
    }

    // Too few points and not a full-minus-one coalition: certify.
    let observed = points_per_slot.first().cloned().unwrap_or_default();
    let exhaustive = exhaustive_completion_count(field, k, &observed);
    let rank_verified = power_matrix_rank(field, k, &observed)? == held;
    Ok(AttackOutcome::Insufficient(InsufficiencyCertificate {
        target,
        round,
        detail: CertificateDetail::TooFewPoints {
            held,
            needed: k + 1,
            completions_base: field.modulus(),
            completions_exp: (k - held) as u32,
            rank_verified,
            exhaustive,
        },
    }))
}

/// Interpolates the aggregate polynomial from the broadcasts of one round
/// (usable by anyone who knows the α table).
fn reconstruct_totals_from_broadcasts(
    view: &AdversaryView,
    config: &ProtocolConfig,
    round: u32,
) -> Result<Vec<FieldElement>> {
    let slots = config.horizon.slots;
    let field = config.policy.field();
    let k = config.policy.degree();
    let mut totals = Vec::with_capacity(slots);
    for t in 0..slots {
        let mut points: Vec<(u16, u64)> = view
            .captured
            .iter()
            .filter(|m| {
                m.kind == MessageKind::Broadcast && m.round == round && m.slot == t as u16
            })
            .map(|m| (m.sender, m.payload))
            .collect();
        points.sort_unstable();
        points.dedup();
        if points.len() < k + 1 {
            return Err(Error::Threshold {
                needed: k + 1,
                got: points.len(),
            });
        }
        let raw: Vec<_> = points
            .iter()
            .map(|&(sender, payload)| {
                (config.nodes[sender as usize], field.element(payload))
            })
            .collect();
        totals.push(field::interpolate_at_zero(&raw, k + 1)?);
    }
    Ok(totals)
}

fn eavesdropper_attack(
    view: &AdversaryView,
    target: u16,
    config: &ProtocolConfig,
    round: u32,
) -> Result<AttackOutcome> {
    let field = config.policy.field();
    let k = config.policy.degree();
    let n = config.policy.shareholders();
    let e = field.modulus();

    // Assemble every output of the target's slot-0 polynomial, indexed by
    // agent. Shares to peers are on the wire directly; the self-addressed
    // share falls out of the broadcast sum: p_t(α_t) = v_t − Σ_{l≠t} p_l(α_t).
    let slot = 0u16;
    let mut outputs: Vec<Option<FieldElement>> = vec![None; n];
    for msg in &view.captured {
        if msg.kind == MessageKind::Share
            && msg.round == round
            && msg.slot == slot
            && msg.sender == target
        {
            if let Recipient::Agent(j) = msg.receiver {
                outputs[j as usize] = Some(field.element(msg.payload));
            }
        }
    }
    let v_target = view
        .captured
        .iter()
        .find(|m| {
            m.kind == MessageKind::Broadcast
                && m.round == round
                && m.slot == slot
                && m.sender == target
        })
        .map(|m| field.element(m.payload));
    if let Some(v) = v_target {
        let mut others = field.zero();
        let mut complete = true;
        for l in 0..n as u16 {
            if l == target {
                continue;
            }
            let found = view.captured.iter().find(|m| {
                m.kind == MessageKind::Share
                    && m.round == round
                    && m.slot == slot
                    && m.sender == l
                    && m.receiver == Recipient::Agent(target)
            });
            match found {
                Some(m) => others = others.add(field.element(m.payload))?,
                None => complete = false,
            }
        }
        if complete {
            outputs[target as usize] = Some(v.sub(others)?);
        }
    }
    let values: Vec<FieldElement> = outputs.into_iter().flatten().collect();
    if values.len() < k + 1 {
        return Ok(AttackOutcome::Insufficient(InsufficiencyCertificate {
            target,
            round,
            detail: CertificateDetail::UnknownNodes {
                assignments_tried: 0,
                distinct_candidate_secrets: 0,
                all_field_values_attainable: None,
            },
        }));
    }

    // Strategy replay: guess node assignments for the first k+1 outputs.
    // Every injective assignment interpolates consistently; differing
    // constant terms certify that the outputs alone pin down nothing.
    let mut candidates: BTreeSet<u64> = BTreeSet::new();
    let mut tried = 0u64;
    let small = e <= 64;
    let mut record = |nodes: &[u64], values: &[FieldElement]| -> Result<()> {
        let pts: Vec<_> = nodes
            .iter()
            .zip(values)
            .map(|(&a, &v)| (field.element(a), v))
            .collect();
        candidates.insert(field::interpolate_at_zero(&pts, k + 1)?.value());
        tried += 1;
        Ok(())
    };

    if small {
        // Enumerate assignments recursively until the space is covered.
        let mut assignment = Vec::with_capacity(k + 1);
        enumerate_assignments(e, k + 1, &mut assignment, &mut |nodes| {
            record(nodes, &values)
        })?;
    } else {
        // Shifted runs plus random distinct draws.
        for shift in 0..32u64 {
            let nodes: Vec<u64> = (1..=(k + 1) as u64).map(|b| b + shift).collect();
            record(&nodes, &values)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0xEAE5);
        for _ in 0..32 {
            let mut nodes = BTreeSet::new();
            while nodes.len() < k + 1 {
                let candidate = 1 + rng.next_u64() % (e - 1);
                nodes.insert(candidate);
            }
            let nodes: Vec<u64> = nodes.into_iter().collect();
            record(&nodes, &values)?;
        }
    }

    Ok(AttackOutcome::Insufficient(InsufficiencyCertificate {
        target,
        round,
        detail: CertificateDetail::UnknownNodes {
            assignments_tried: tried,
            distinct_candidate_secrets: candidates.len() as u64,
            all_field_values_attainable: small.then_some(candidates.len() as u64 == e),
        },
    }))
}

fn enumerate_assignments(
    e: u64,
    len: usize,
    assignment: &mut Vec<u64>,
    visit: &mut impl FnMut(&[u64]) -> Result<()>,
) -> Result<()> {
    if assignment.len() == len {
        return visit(assignment);
    }
    for candidate in 1..e {
        if !assignment.contains(&candidate) {
            assignment.push(candidate);
            enumerate_assignments(e, len, assignment, visit)?;
            assignment.pop();
        }
    }
    Ok(())
}

/// Brute-force completion census on small fields: for every candidate
/// secret, count coefficient vectors consistent with the observed points.
/// Returns (candidates checked, completions each) when all counts agree,
/// which is the zero-information statement made computational.
fn exhaustive_completion_count(
    field: FieldPrime,
    k: usize,
    observed: &[SharePoint],
) -> Option<(u64, u64)> {
    let e = field.modulus();
    if (e as u128).pow(k as u32) > EXHAUSTIVE_LIMIT {
        return None;
    }
    let total = e.pow(k as u32);
    let mut per_candidate = Vec::with_capacity(e as usize);
    for candidate in 0..e {
        let mut count = 0u64;
        for idx in 0..total {
            let mut coeffs = vec![field.element(candidate)];
            let mut rem = idx;
            for _ in 0..k {
                coeffs.push(field.element(rem % e));
                rem /= e;
            }
            let consistent = observed.iter().all(|p| {
                field::eval_poly(&coeffs, p.node)
                    .map(|v| v == p.value)
                    .unwrap_or(false)
            });
            if consistent {
                count += 1;
            }
        }
        per_candidate.push(count);
    }
    let first = per_candidate[0];
    per_candidate
        .iter()
        .all(|&c| c == first)
        .then_some((e, first))
}

/// Row rank over the field of the matrix whose row for node α is
/// (α¹, …, α^k) — the linear system a coalition would have to solve for the
/// masking coefficients. Full row rank means the system is solvable for
/// every right-hand side, hence for every candidate secret equally.
fn power_matrix_rank(field: FieldPrime, k: usize, observed: &[SharePoint]) -> Result<usize> {
    let mut rows: Vec<Vec<FieldElement>> = observed
        .iter()
        .map(|p| {
            let mut row = Vec::with_capacity(k);
            let mut acc = field.one();
            for _ in 0..k {
                acc = acc.mul(p.node)?;
                row.push(acc);
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;

    let mut rank = 0usize;
    for col in 0..k {
        let Some(pivot) = (rank..rows.len()).find(|&r| !rows[r][col].is_zero()) else {
            continue;
        };
        rows.swap(rank, pivot);
        let inv = rows[rank][col].inv()?;
        let pivot_row = rows[rank].clone();
        for (r, row) in rows.iter_mut().enumerate() {
            if r != rank && !row[col].is_zero() {
                let factor = row[col].mul(inv)?;
                for (c, cell) in row.iter_mut().enumerate().skip(col) {
                    let scaled = pivot_row[c].mul(factor)?;
                    *cell = cell.sub(scaled)?;
                }
            }
        }
        rank += 1;
        if rank == rows.len() {
            break;
        }
    }
    Ok(rank)
}
