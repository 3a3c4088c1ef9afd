//! The valley-filling quadratic program and its projected-gradient primal /
//! subgradient-ascent dual iteration.
//!
//! Each EV owns a charging profile `x ∈ [0, r_max]^T` and a scalar dual λ for
//! its energy-demand equality constraint. The only cross-agent coupling is
//! the aggregate `Σ xᵢ`, which enters as an injected input: the plaintext
//! solver computes it directly, the secure protocol reconstructs it from
//! shares. Both paths call the same [`agent_update`] with the same operand
//! order, so equal aggregates produce bit-identical iterates.

use sha2::{Digest, Sha256};

use crate::encoding::FixedPointCodec;
use crate::{Error, Result};

/// The valley-filling window: `slots` samples of `dt_hours` each.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Horizon {
    pub slots: usize,
    pub dt_hours: f64,
}

impl Horizon {
    pub fn new(slots: usize, dt_hours: f64) -> Result<Self> {
        if slots == 0 {
            return Err(Error::Config("horizon needs at least one slot".into()));
        }
        if !(dt_hours.is_finite() && dt_hours > 0.0) {
            return Err(Error::Config(format!(
                "slot length must be positive, got {dt_hours}"
            )));
        }
        Ok(Horizon { slots, dt_hours })
    }
}

/// One EV's private parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EvSpec {
    /// Per-slot charging-rate upper bound, kW.
    pub r_max: Vec<f64>,
    /// Required energy over the horizon, kWh.
    pub demand_kwh: f64,
    /// Primal step size.
    pub gamma: f64,
}

impl EvSpec {
    /// Uniform rate cap across the horizon.
    pub fn uniform(r_max_kw: f64, demand_kwh: f64, gamma: f64, slots: usize) -> Self {
        EvSpec {
            r_max: vec![r_max_kw; slots],
            demand_kwh,
            gamma,
        }
    }

    pub fn validate(&self, horizon: &Horizon) -> Result<()> {
        if self.r_max.len() != horizon.slots {
            return Err(Error::Config(format!(
                "rate bound has {} slots, horizon has {}",
                self.r_max.len(),
                horizon.slots
            )));
        }
        if self.r_max.iter().any(|&r| !(r.is_finite() && r >= 0.0)) {
            return Err(Error::Config("rate bounds must be nonnegative".into()));
        }
        let max_energy: f64 = self.r_max.iter().sum::<f64>() * horizon.dt_hours;
        if !(self.demand_kwh >= 0.0 && self.demand_kwh <= max_energy) {
            return Err(Error::Config(format!(
                "demand {} kWh is infeasible for a charger able to deliver {max_energy} kWh",
                self.demand_kwh
            )));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Config(format!(
                "primal step size must be positive, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// One EV's iterate: charging profile, dual variable, and its spec.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub x: Vec<f64>,
    pub lambda: f64,
    pub spec: EvSpec,
}

impl AgentState {
    /// Zero-initialized iterate.
    pub fn new(spec: EvSpec, slots: usize) -> Self {
        AgentState {
            x: vec![0.0; slots],
            lambda: 0.0,
            spec,
        }
    }
}

/// A full problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub horizon: Horizon,
    /// Baseline (non-EV) load per slot, kW.
    pub baseline: Vec<f64>,
    pub fleet: Vec<EvSpec>,
    /// Dual step size, shared by the fleet.
    pub beta: f64,
    /// Per-agent convergence tolerance on the squared iterate displacement.
    pub eps0: f64,
    pub max_iter: usize,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.baseline.len() != self.horizon.slots {
            return Err(Error::Config(format!(
                "baseline has {} slots, horizon has {}",
                self.baseline.len(),
                self.horizon.slots
            )));
        }
        if self.baseline.iter().any(|&b| !(b.is_finite() && b >= 0.0)) {
            return Err(Error::Config("baseline load must be nonnegative".into()));
        }
        if self.fleet.is_empty() {
            return Err(Error::Config("fleet is empty".into()));
        }
        for spec in &self.fleet {
            spec.validate(&self.horizon)?;
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!(
                "dual step size must be positive, got {}",
                self.beta
            )));
        }
        if !(self.eps0.is_finite() && self.eps0 > 0.0) {
            return Err(Error::Config(format!(
                "convergence tolerance must be positive, got {}",
                self.eps0
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// ∇ₓᵢ of the relaxed Lagrangian: `P_b + Σx + λᵢ·dt` per slot.
pub fn primal_gradient(
    baseline: &[f64],
    aggregate: &[f64],
    lambda: f64,
    dt: f64,
) -> Result<Vec<f64>> {
    if baseline.len() != aggregate.len() {
        return Err(Error::InvalidInput(format!(
            "baseline has {} slots, aggregate has {}",
            baseline.len(),
            aggregate.len()
        )));
    }
    Ok(baseline
        .iter()
        .zip(aggregate)
        .map(|(&b, &a)| b + a + lambda * dt)
        .collect())
}

/// ∇_λᵢ of the relaxed Lagrangian: delivered energy minus demand, kWh.
pub fn dual_gradient(x: &[f64], spec: &EvSpec, dt: f64) -> f64 {
    dt * x.iter().sum::<f64>() - spec.demand_kwh
}

/// Euclidean projection onto the box [0, r_max]: elementwise clamp.
pub fn project_box(x: &[f64], spec: &EvSpec) -> Vec<f64> {
    x.iter()
        .zip(&spec.r_max)
        .map(|(&v, &hi)| v.clamp(0.0, hi))
        .collect()
}

/// One projected primal descent step at the current aggregate.
pub fn primal_step(
    state: &AgentState,
    baseline: &[f64],
    aggregate: &[f64],
    dt: f64,
) -> Result<Vec<f64>> {
    let grad = primal_gradient(baseline, aggregate, state.lambda, dt)?;
    let stepped: Vec<f64> = state
        .x
        .iter()
        .zip(&grad)
        .map(|(&x, &g)| x - state.spec.gamma * g)
        .collect();
    Ok(project_box(&stepped, &state.spec))
}

/// One dual ascent step. Evaluated at the pre-update profile; never
/// communicated.
pub fn dual_step(state: &AgentState, beta: f64, dt: f64) -> f64 {
    state.lambda + beta * dual_gradient(&state.x, &state.spec, dt)
}

/// Squared displacement between consecutive iterates:
/// ‖x⁺−x‖₂² + (λ⁺−λ)².
pub fn convergence_error(prev: &AgentState, next: &AgentState) -> f64 {
    let dx: f64 = prev
        .x
        .iter()
        .zip(&next.x)
        .map(|(&a, &b)| (b - a) * (b - a))
        .sum();
    let dl = next.lambda - prev.lambda;
    dx + dl * dl
}

/// ½‖P_b + Σx‖₂², the quantity valley filling minimizes.
pub fn objective(baseline: &[f64], aggregate: &[f64]) -> f64 {
    0.5 * baseline
        .iter()
        .zip(aggregate)
        .map(|(&b, &a)| (b + a) * (b + a))
        .sum::<f64>()
}

/// The result of one agent's simultaneous primal/dual update. Both gradients
/// are evaluated at the old iterate.
#[derive(Debug, Clone)]
pub struct AgentUpdate {
    pub x: Vec<f64>,
    pub lambda: f64,
    pub eps: f64,
}

/// The single update routine shared by the plaintext solver and the secure
/// protocol; bit-identical trajectories between the two hinge on both
/// calling exactly this.
pub fn agent_update(
    state: &AgentState,
    baseline: &[f64],
    aggregate: &[f64],
    beta: f64,
    dt: f64,
) -> Result<AgentUpdate> {
    let x = primal_step(state, baseline, aggregate, dt)?;
    let lambda = dual_step(state, beta, dt);
    let next = AgentState {
        x,
        lambda,
        spec: state.spec.clone(),
    };
    let eps = convergence_error(state, &next);
    Ok(AgentUpdate {
        x: next.x,
        lambda,
        eps,
    })
}

/// How the solver obtains `Σ xᵢ` each iteration.
#[derive(Debug, Clone, Copy)]
pub enum Aggregation<'a> {
    /// Exact real-number column sums.
    Exact,
    /// Sum of fixed-point encodings in the field, then one decode — exactly
    /// the arithmetic the secure protocol performs, minus the sharing.
    Quantized(&'a FixedPointCodec),
}

impl Aggregation<'_> {
    /// Aggregate the fleet's profiles for one iteration.
    pub fn aggregate(&self, states: &[AgentState], slots: usize) -> Result<Vec<f64>> {
        match self {
            Aggregation::Exact => {
                let mut out = vec![0.0; slots];
                for state in states {
                    for (t, &v) in state.x.iter().enumerate() {
                        out[t] += v;
                    }
                }
                Ok(out)
            }
            Aggregation::Quantized(codec) => {
                let mut out = Vec::with_capacity(slots);
                for t in 0..slots {
                    let mut acc = codec.field().zero();
                    for state in states {
                        acc = acc.add(codec.encode(state.x[t])?)?;
                    }
                    out.push(codec.decode(acc));
                }
                Ok(out)
            }
        }
    }
}

/// One row of the iterate trace. `objective` is evaluated at the aggregate
/// the iteration consumed (the pre-update profiles).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub agent: usize,
    pub eps: f64,
    pub lambda: f64,
    pub objective: f64,
}

/// Post-update snapshot of every agent at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub xs: Vec<Vec<f64>>,
    pub lambdas: Vec<f64>,
}

/// Full solver output: final states, per-iteration trace, the aggregates
/// each iteration consumed, and complete iterate snapshots.
#[derive(Debug, Clone)]
pub struct SolveOutput {
    pub states: Vec<AgentState>,
    pub trace: Vec<TraceRow>,
    pub aggregates: Vec<Vec<f64>>,
    pub trajectory: Vec<IterationRecord>,
    /// 1-indexed iteration at which each agent froze, if it did.
    pub converged_at: Vec<Option<usize>>,
    pub iterations: usize,
}

impl SolveOutput {
    /// Largest per-EV energy-demand violation |G·xᵢ − dᵢ| in kWh.
    pub fn max_demand_residual(&self, dt: f64) -> f64 {
        self.states
            .iter()
            .map(|s| dual_gradient(&s.x, &s.spec, dt).abs())
            .fold(0.0, f64::max)
    }

    /// Hex digest of the aggregates and full trajectory; equal digests mean
    /// bit-identical runs.
    pub fn digest(&self) -> String {
        trajectory_digest(&self.aggregates, &self.trajectory)
    }
}

/// SHA-256 over the canonical byte serialization of a run's aggregates and
/// iterate snapshots (little-endian f64 bits, iteration-major, agent-minor).
pub fn trajectory_digest(aggregates: &[Vec<f64>], trajectory: &[IterationRecord]) -> String {
    let mut hasher = Sha256::new();
    hasher.update((aggregates.len() as u64).to_le_bytes());
    hasher.update((trajectory.len() as u64).to_le_bytes());
    for agg in aggregates {
        for &v in agg {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
    for record in trajectory {
        for xs in &record.xs {
            for &v in xs {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        for &l in &record.lambdas {
            hasher.update(l.to_bits().to_le_bytes());
        }
    }
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs the full iteration with directly computed aggregates. Every agent
/// participates in aggregation every iteration; an agent whose squared
/// displacement drops to ε₀ freezes its own updates but keeps contributing
/// its profile, so the others' gradients stay correct.
pub fn solve_plaintext(scenario: &Scenario, mode: Aggregation) -> Result<SolveOutput> {
    scenario.validate()?;
    let n = scenario.fleet.len();
    let slots = scenario.horizon.slots;
    let dt = scenario.horizon.dt_hours;

    let mut states: Vec<AgentState> = scenario
        .fleet
        .iter()
        .map(|spec| AgentState::new(spec.clone(), slots))
        .collect();
    let mut converged_at: Vec<Option<usize>> = vec![None; n];
    let mut trace = Vec::new();
    let mut aggregates = Vec::with_capacity(scenario.max_iter);
    let mut trajectory = Vec::with_capacity(scenario.max_iter);

    for iter in 1..=scenario.max_iter {
        let aggregate = mode.aggregate(&states, slots)?;
        let obj = objective(&scenario.baseline, &aggregate);
        for (i, state) in states.iter_mut().enumerate() {
            let eps = if converged_at[i].is_none() {
                let update = agent_update(state, &scenario.baseline, &aggregate, scenario.beta, dt)?;
                state.x = update.x;
                state.lambda = update.lambda;
                if update.eps <= scenario.eps0 {
                    converged_at[i] = Some(iter);
                }
                update.eps
            } else {
                0.0
            };
            trace.push(TraceRow {
                iteration: iter,
                agent: i,
                eps,
                lambda: state.lambda,
                objective: obj,
            });
        }
        aggregates.push(aggregate);
        trajectory.push(IterationRecord {
            xs: states.iter().map(|s| s.x.clone()).collect(),
            lambdas: states.iter().map(|s| s.lambda).collect(),
        });
    }

    Ok(SolveOutput {
        states,
        trace,
        aggregates,
        trajectory,
        converged_at,
        iterations: scenario.max_iter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldPrime;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(r: f64, d: f64, gamma: f64, slots: usize) -> EvSpec {
        EvSpec::uniform(r, d, gamma, slots)
    }

    #[test]
    fn primal_gradient_examples() {
        let zero = primal_gradient(&[0.0, 0.0], &[0.0, 0.0], 0.0, 0.25).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);
        let passthrough = primal_gradient(&[3.0, 4.0], &[0.0, 0.0], 0.0, 0.25).unwrap();
        assert_eq!(passthrough, vec![3.0, 4.0]);
        let g = primal_gradient(&[1.0, 1.0], &[2.0, 3.0], 2.0, 0.25).unwrap();
        assert_eq!(g, vec![3.5, 4.5]);
        assert!(primal_gradient(&[1.0], &[1.0, 2.0], 0.0, 0.25).is_err());
    }

    #[test]
    fn dual_gradient_examples() {
        let s = spec(6.6, 10.0, 0.01, 2);
        assert_eq!(dual_gradient(&[0.0, 0.0], &s, 0.25), -10.0);
        let met = spec(6.6, 1.5, 0.01, 2);
        assert_eq!(dual_gradient(&[3.0, 3.0], &met, 0.25), 0.0);
        assert_eq!(dual_gradient(&[4.0, 4.0], &met, 0.25), 0.5);
    }

    #[test]
    fn projection_clamps_and_is_idempotent() {
        let s = spec(6.6, 1.0, 0.01, 2);
        assert_eq!(project_box(&[1.0, 2.0], &s), vec![1.0, 2.0]);
        assert_eq!(project_box(&[-1.0, 7.0], &s), vec![0.0, 6.6]);
        let once = project_box(&[-3.0, 9.9], &s);
        assert_eq!(project_box(&once, &s), once);
    }

    #[test]
    fn projection_is_closest_feasible_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let s = spec(6.6, 1.0, 0.01, 6);
        let raw: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..12.0)).collect();
        let proj = project_box(&raw, &s);
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
        };
        let d_proj = dist(&raw, &proj);
        for _ in 0..1000 {
            let y: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..6.6)).collect();
            assert!(d_proj <= dist(&raw, &y) + 1e-12);
        }
    }

    #[test]
    fn primal_step_examples() {
        let mut state = AgentState::new(spec(6.6, 0.5, 0.01, 1), 1);
        state.x = vec![1.0];
        // gradient = 0 (baseline) + 1 (aggregate = own x) + 0 → x' = 1 − 0.01
        let stepped = primal_step(&state, &[0.0], &[1.0], 0.25).unwrap();
        assert_eq!(stepped, vec![0.99]);
        // zero step size leaves x unchanged
        let mut frozen = state.clone();
        frozen.spec.gamma = f64::MIN_POSITIVE;
        let unchanged = primal_step(&frozen, &[0.0], &[1.0], 0.25).unwrap();
        assert!((unchanged[0] - 1.0).abs() < 1e-12);
        // zero gradient leaves x unchanged exactly
        let flat = primal_step(&state, &[0.0], &[0.0], 0.25);
        assert_eq!(flat.unwrap(), vec![1.0]);
    }

    #[test]
    fn dual_step_examples() {
        let mut state = AgentState::new(spec(6.6, 10.0, 0.01, 2), 2);
        assert_eq!(dual_step(&state, 1.0, 0.25), -10.0);
        state.spec.demand_kwh = 0.0;
        state.lambda = 3.0;
        assert_eq!(dual_step(&state, 1.0, 0.25), 3.0); // zero dual gradient
        state.x = vec![3.0, 3.0];
        state.spec.demand_kwh = 1.0;
        state.lambda = 1.0;
        assert_eq!(dual_step(&state, 1.0, 0.25), 1.5);
    }

    #[test]
    fn convergence_error_examples() {
        let a = AgentState {
            x: vec![0.0, 0.0],
            lambda: 0.0,
            spec: spec(6.6, 1.0, 0.01, 2),
        };
        assert_eq!(convergence_error(&a, &a), 0.0);
        let mut b = a.clone();
        b.x = vec![3.0, 4.0];
        assert_eq!(convergence_error(&a, &b), 25.0);
        let mut c = a.clone();
        c.x = vec![1.0, 1.0];
        c.lambda = 2.0;
        assert_eq!(convergence_error(&a, &c), 6.0);
    }

    /// Central differences of the relaxed Lagrangian agree with the analytic
    /// subgradients. The Lagrangian is quadratic, so central differences are
    /// exact up to floating-point rounding.
    #[test]
    fn gradients_match_finite_differences() {
        fn lagrangian(baseline: &[f64], xs: &[Vec<f64>], lambdas: &[f64], ds: &[f64], dt: f64) -> f64 {
            let slots = baseline.len();
            let mut quad = 0.0;
            for t in 0..slots {
                let total: f64 = baseline[t] + xs.iter().map(|x| x[t]).sum::<f64>();
                quad += total * total;
            }
            let duals: f64 = lambdas
                .iter()
                .zip(xs)
                .zip(ds)
                .map(|((&l, x), &d)| l * (dt * x.iter().sum::<f64>() - d))
                .sum();
            0.5 * quad + duals
        }

        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..100 {
            let n = rng.random_range(1..=4usize);
            let slots = rng.random_range(1..=5usize);
            let dt = 0.25;
            let baseline: Vec<f64> = (0..slots).map(|_| rng.random_range(0.0..50.0)).collect();
            let xs: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..slots).map(|_| rng.random_range(0.0..6.6)).collect())
                .collect();
            let lambdas: Vec<f64> = (0..n).map(|_| rng.random_range(-400.0..10.0)).collect();
            let ds: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..20.0)).collect();
            let aggregate: Vec<f64> = (0..slots).map(|t| xs.iter().map(|x| x[t]).sum()).collect();

            let i = rng.random_range(0..n);
            let spec_i = EvSpec {
                r_max: vec![6.6; slots],
                demand_kwh: ds[i],
                gamma: 0.01,
            };
            let analytic = primal_gradient(&baseline, &aggregate, lambdas[i], dt).unwrap();
            let h = 1e-4;
            for t in 0..slots {
                let mut hi = xs.clone();
                let mut lo = xs.clone();
                hi[i][t] += h;
                lo[i][t] -= h;
                let fd = (lagrangian(&baseline, &hi, &lambdas, &ds, dt)
                    - lagrangian(&baseline, &lo, &lambdas, &ds, dt))
                    / (2.0 * h);
                let denom = analytic[t].abs().max(1.0);
                assert!(
                    (fd - analytic[t]).abs() / denom < 1e-6,
                    "primal fd {fd} vs analytic {}",
                    analytic[t]
                );
            }

            let analytic_dual = dual_gradient(&xs[i], &spec_i, dt);
            let mut hi = lambdas.clone();
            let mut lo = lambdas.clone();
            hi[i] += h;
            lo[i] -= h;
            let fd_dual = (lagrangian(&baseline, &xs, &hi, &ds, dt)
                - lagrangian(&baseline, &xs, &lo, &ds, dt))
                / (2.0 * h);
            let denom = analytic_dual.abs().max(1.0);
            assert!((fd_dual - analytic_dual).abs() / denom < 1e-6);
        }
    }

    #[test]
    fn iterates_stay_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let s = spec(6.6, 10.0, 0.05, 8);
        let mut state = AgentState::new(s, 8);
        let baseline: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..100.0)).collect();
        for _ in 0..200 {
            let aggregate: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..40.0)).collect();
            let update = agent_update(&state, &baseline, &aggregate, 1.0, 0.25).unwrap();
            state.x = update.x;
            state.lambda = update.lambda;
            for (t, &v) in state.x.iter().enumerate() {
                assert!((0.0..=state.spec.r_max[t]).contains(&v));
            }
        }
    }

    #[test]
    fn zero_demand_fleet_converges_immediately() {
        let horizon = Horizon::new(4, 0.25).unwrap();
        let scenario = Scenario {
            horizon,
            baseline: vec![5.0; 4],
            fleet: (0..3).map(|_| spec(6.6, 0.0, 0.01, 4)).collect(),
            beta: 1.0,
            eps0: 1e-6,
            max_iter: 5,
        };
        let out = solve_plaintext(&scenario, Aggregation::Exact).unwrap();
        for state in &out.states {
            assert!(state.x.iter().all(|&v| v == 0.0));
            assert_eq!(state.lambda, 0.0);
        }
        assert!(out.converged_at.iter().all(|&c| c == Some(1)));
    }

    /// Single EV, T = 2: the iteration reaches the KKT water-filling point,
    /// equal marginal loads where unconstrained. Closed form: x₁ − x₂ equals
    /// the baseline tilt, x₁ + x₂ = d/dt.
    #[test]
    fn single_ev_water_filling_closed_form() {
        for baseline in [vec![1.0, 1.0], vec![1.0, 2.0]] {
            let horizon = Horizon::new(2, 0.25).unwrap();
            let scenario = Scenario {
                horizon,
                baseline: baseline.clone(),
                fleet: vec![spec(6.6, 1.2, 0.1, 2)],
                beta: 0.5,
                eps0: 1e-30,
                max_iter: 3000,
            };
            let out = solve_plaintext(&scenario, Aggregation::Exact).unwrap();
            let e_total = 1.2 / 0.25;
            let x1 = (e_total + baseline[1] - baseline[0]) / 2.0;
            let x2 = e_total - x1;
            let x = &out.states[0].x;
            assert!((x[0] - x1).abs() < 1e-9, "x0 = {}, want {x1}", x[0]);
            assert!((x[1] - x2).abs() < 1e-9, "x1 = {}, want {x2}", x[1]);
        }
    }

    #[test]
    fn quantized_aggregation_tracks_exact_sums() {
        let field = FieldPrime::new(2_147_483_647).unwrap();
        let codec = FixedPointCodec::new(3, field, 20, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 5;
        let slots = 6;
        let states: Vec<AgentState> = (0..n)
            .map(|_| {
                let mut s = AgentState::new(spec(6.6, 1.0, 0.01, slots), slots);
                s.x = (0..slots).map(|_| rng.random_range(0.0..6.6)).collect();
                s
            })
            .collect();
        let exact = Aggregation::Exact.aggregate(&states, slots).unwrap();
        let quant = Aggregation::Quantized(&codec)
            .aggregate(&states, slots)
            .unwrap();
        for t in 0..slots {
            assert!((exact[t] - quant[t]).abs() < n as f64 * 1e-3);
            // quantized value is exactly the sum of floors
            let floors: i64 = states.iter().map(|s| (1000.0 * s.x[t]).floor() as i64).sum();
            assert_eq!(quant[t], floors as f64 / 1000.0);
        }
    }

    #[test]
    fn infeasible_scenarios_are_rejected() {
        let horizon = Horizon::new(2, 0.25).unwrap();
        let mut scenario = Scenario {
            horizon,
            baseline: vec![1.0, 1.0],
            fleet: vec![spec(6.6, 50.0, 0.01, 2)], // 50 kWh > 3.3 kWh deliverable
            beta: 1.0,
            eps0: 1e-6,
            max_iter: 10,
        };
        assert!(solve_plaintext(&scenario, Aggregation::Exact).is_err());
        scenario.fleet = vec![spec(6.6, 1.0, 0.01, 2)];
        scenario.baseline = vec![1.0];
        assert!(scenario.validate().is_err());
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let horizon = Horizon::new(3, 0.25).unwrap();
        let scenario = Scenario {
            horizon,
            baseline: vec![4.0, 2.0, 4.0],
            fleet: vec![spec(6.6, 1.0, 0.05, 3), spec(6.6, 2.0, 0.05, 3)],
            beta: 0.5,
            eps0: 1e-9,
            max_iter: 40,
        };
        let a = solve_plaintext(&scenario, Aggregation::Exact).unwrap();
        let b = solve_plaintext(&scenario, Aggregation::Exact).unwrap();
        assert_eq!(a.digest(), b.digest());
        let mut tweaked = scenario.clone();
        tweaked.fleet[0].demand_kwh = 1.5;
        let c = solve_plaintext(&tweaked, Aggregation::Exact).unwrap();
        assert_ne!(a.digest(), c.digest());
    }
}
