//! Baseline-load ingestion, synthetic profiles, fleet randomization, and CSV
//! result emission.
//!
//! File schemas are documented in data_formats.md at the repository root.
//! Floating-point columns are written with Rust's shortest round-trip
//! formatting, so re-reading a file reproduces the exact bit patterns.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::optim::{EvSpec, Horizon, SolveOutput};
use crate::transport::{MessageKind, Recipient, RoundMessage};
use crate::{Error, Result};

/// A baseline (non-EV) load profile.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineProfile {
    pub values: Vec<f64>,
    pub label: String,
}

impl BaselineProfile {
    pub fn validate(&self, horizon: &Horizon) -> Result<()> {
        if self.values.len() != horizon.slots {
            return Err(Error::Config(format!(
                "baseline '{}' has {} rows, horizon needs {}",
                self.label,
                self.values.len(),
                horizon.slots
            )));
        }
        if self.values.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
            return Err(Error::Config(format!(
                "baseline '{}' contains negative or non-finite values",
                self.label
            )));
        }
        Ok(())
    }
}

/// Reads a one-column CSV of kW values (optional header) into a profile.
pub fn load_baseline(path: &Path, horizon: &Horizon) -> Result<BaselineProfile> {
    let text = fs::read_to_string(path)?;
    let mut values = Vec::new();
    let mut rows_seen = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let cell = line.split(',').next().unwrap_or("").trim();
        if cell.is_empty() {
            continue;
        }
        match cell.parse::<f64>() {
            Ok(v) if v.is_finite() && v >= 0.0 => {
                values.push(v);
                rows_seen += 1;
            }
            Ok(v) => {
                return Err(Error::Parse {
                    location: format!("{}:{}", path.display(), lineno + 1),
                    msg: format!("baseline value {v} must be nonnegative"),
                })
            }
            Err(_) if rows_seen == 0 && lineno == 0 => {
                // header row
            }
            Err(e) => {
                return Err(Error::Parse {
                    location: format!("{}:{}", path.display(), lineno + 1),
                    msg: format!("not a number: {e}"),
                })
            }
        }
    }
    if values.len() != horizon.slots {
        return Err(Error::Parse {
            location: path.display().to_string(),
            msg: format!(
                "expected {} rows, found {} ({} missing or extra)",
                horizon.slots,
                values.len(),
                horizon.slots.abs_diff(values.len())
            ),
        });
    }
    Ok(BaselineProfile {
        values,
        label: path.display().to_string(),
    })
}

/// Deterministic synthetic stand-in for an overnight net-demand trace: high
/// at both ends of the window, minimum near the middle, with a whisper of
/// seeded noise so distinct seeds give distinct profiles.
pub fn synthetic_valley(slots: usize, peak_kw: f64, valley_kw: f64, seed: u64) -> Result<BaselineProfile> {
    if slots == 0 {
        return Err(Error::InvalidInput("profile needs at least one slot".into()));
    }
    if !(peak_kw.is_finite() && valley_kw.is_finite()) || valley_kw < 0.0 {
        return Err(Error::InvalidInput("profile bounds must be finite and nonnegative".into()));
    }
    if valley_kw > peak_kw {
        return Err(Error::InvalidInput(format!(
            "valley {valley_kw} kW exceeds peak {peak_kw} kW"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = peak_kw - valley_kw;
    let noise_amp = 0.01 * span;
    let denom = (slots.max(2) - 1) as f64;
    let values = (0..slots)
        .map(|t| {
            let phase = 2.0 * std::f64::consts::PI * t as f64 / denom;
            let shape = (1.0 + phase.cos()) / 2.0; // 1 at the ends, 0 mid-window
            let noise = if noise_amp > 0.0 {
                rng.random_range(-noise_amp..=noise_amp)
            } else {
                0.0
            };
            (valley_kw + span * shape + noise).max(0.0)
        })
        .collect();
    Ok(BaselineProfile {
        values,
        label: format!("synthetic-valley(peak={peak_kw},valley={valley_kw},seed={seed})"),
    })
}

/// Fleet randomization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FleetSpec {
    pub n: usize,
    pub r_max_kw: f64,
    pub demand_kwh_lo: f64,
    pub demand_kwh_hi: f64,
    pub gamma: f64,
    pub seed: u64,
}

/// Draws `n` EV specs: demands i.i.d. uniform in the configured range,
/// uniform rate caps, shared primal step size.
pub fn sample_fleet(spec: &FleetSpec, horizon: &Horizon) -> Result<Vec<EvSpec>> {
    if spec.n < 3 {
        return Err(Error::Config(format!(
            "a fleet needs at least 3 EVs for the protocol, got {}",
            spec.n
        )));
    }
    if !(spec.demand_kwh_lo >= 0.0 && spec.demand_kwh_hi >= spec.demand_kwh_lo) {
        return Err(Error::Config(format!(
            "demand range [{}, {}] kWh is malformed",
            spec.demand_kwh_lo, spec.demand_kwh_hi
        )));
    }
    let deliverable = spec.r_max_kw * horizon.dt_hours * horizon.slots as f64;
    if spec.demand_kwh_hi > deliverable {
        return Err(Error::Config(format!(
            "demand up to {} kWh is infeasible: a {} kW charger delivers at most \
             {deliverable} kWh over the window",
            spec.demand_kwh_hi, spec.r_max_kw
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.n)
        .map(|_| {
            let demand = if spec.demand_kwh_hi > spec.demand_kwh_lo {
                rng.random_range(spec.demand_kwh_lo..=spec.demand_kwh_hi)
            } else {
                spec.demand_kwh_lo
            };
            EvSpec::uniform(spec.r_max_kw, demand, spec.gamma, horizon.slots)
        })
        .collect())
}

/// Everything the result writer needs from a finished run.
pub struct RunArtifacts<'a> {
    pub baseline: &'a BaselineProfile,
    pub solve: &'a SolveOutput,
    pub sampled_messages: &'a [RoundMessage],
    pub polynomial_trace: &'a [(u32, Vec<u64>)],
}

/// Emits the run's result files into `dir` and returns their paths:
/// profiles.csv, total_load.csv, trace.csv, messages.csv, polynomials.csv.
pub fn write_results(artifacts: &RunArtifacts, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let slots = artifacts.baseline.values.len();

    // profiles.csv: agent × slot kW matrix
    let path = dir.join("profiles.csv");
    {
        let mut w = csv::Writer::from_writer(File::create(&path)?);
        let mut header = vec!["agent".to_string()];
        header.extend((1..=slots).map(|t| format!("kw_{t}")));
        w.write_record(&header).map_err(csv_err)?;
        for (i, state) in artifacts.solve.states.iter().enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(state.x.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
    }
    written.push(path);

    // total_load.csv: slot, baseline, baseline + final aggregate
    let path = dir.join("total_load.csv");
    {
        let mut w = csv::Writer::from_writer(File::create(&path)?);
        w.write_record(["slot", "baseline_kw", "total_kw"])
            .map_err(csv_err)?;
        for t in 0..slots {
            let ev: f64 = artifacts.solve.states.iter().map(|s| s.x[t]).sum();
            w.write_record([
                (t + 1).to_string(),
                artifacts.baseline.values[t].to_string(),
                (artifacts.baseline.values[t] + ev).to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
    }
    written.push(path);

    // trace.csv: iteration, agent, eps, lambda, objective
    let path = dir.join("trace.csv");
    {
        let mut w = csv::Writer::from_writer(File::create(&path)?);
        w.write_record(["iteration", "agent", "eps", "lambda", "objective"])
            .map_err(csv_err)?;
        for row in &artifacts.solve.trace {
            w.write_record([
                row.iteration.to_string(),
                row.agent.to_string(),
                row.eps.to_string(),
                row.lambda.to_string(),
                row.objective.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
    }
    written.push(path);

    // messages.csv: sampled wire traffic
    let path = dir.join("messages.csv");
    {
        let mut w = csv::Writer::from_writer(File::create(&path)?);
        w.write_record(["iteration", "kind", "sender", "receiver", "slot", "payload"])
            .map_err(csv_err)?;
        for m in artifacts.sampled_messages {
            let kind = match m.kind {
                MessageKind::Share => "share",
                MessageKind::Broadcast => "broadcast",
            };
            let receiver = match m.receiver {
                Recipient::Agent(id) => id.to_string(),
                Recipient::All => "all".to_string(),
            };
            w.write_record([
                (m.round + 1).to_string(),
                kind.to_string(),
                m.sender.to_string(),
                receiver,
                m.slot.to_string(),
                m.payload.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
    }
    written.push(path);

    // polynomials.csv: agent 0's slot-0 coefficients per iteration
    let path = dir.join("polynomials.csv");
    {
        let mut w = csv::Writer::from_writer(File::create(&path)?);
        let degree = artifacts
            .polynomial_trace
            .first()
            .map(|(_, c)| c.len().saturating_sub(1))
            .unwrap_or(0);
        let mut header = vec!["iteration".to_string()];
        header.extend((0..=degree).map(|j| format!("c{j}")));
        w.write_record(&header).map_err(csv_err)?;
        for (round, coeffs) in artifacts.polynomial_trace {
            let mut row = vec![(round + 1).to_string()];
            row.extend(coeffs.iter().map(|c| c.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
    }
    written.push(path);

    Ok(written)
}

/// Reads profiles.csv back into (agent, profile) pairs.
pub fn read_profiles(path: &Path) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for (rowno, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let mut cells = record.iter();
        let agent = cells
            .next()
            .ok_or_else(|| parse_err(path, rowno, "missing agent column"))?
            .parse::<usize>()
            .map_err(|e| parse_err(path, rowno, &e.to_string()))?;
        let profile = cells
            .map(|c| c.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(path, rowno, &e.to_string()))?;
        out.push((agent, profile));
    }
    Ok(out)
}

/// Writes a baseline profile as a one-column CSV (with header).
pub fn write_baseline(profile: &BaselineProfile, path: &Path) -> Result<()> {
    let mut text = String::from("baseline_kw\n");
    for v in &profile.values {
        text.push_str(&v.to_string());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            location: "csv".into(),
            msg: format!("{other:?}"),
        },
    }
}

fn parse_err(path: &Path, row: usize, msg: &str) -> Error {
    Error::Parse {
        location: format!("{}:{}", path.display(), row + 2),
        msg: msg.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{Aggregation, Scenario};

    fn horizon48() -> Horizon {
        Horizon::new(48, 0.25).unwrap()
    }

    #[test]
    fn baseline_roundtrip_and_row_count_errors() {
        let dir = tempfile::tempdir().unwrap();
        let horizon = horizon48();
        let profile = synthetic_valley(48, 180.0, 80.0, 7).unwrap();
        let path = dir.path().join("baseline.csv");
        write_baseline(&profile, &path).unwrap();
        let back = load_baseline(&path, &horizon).unwrap();
        assert_eq!(back.values, profile.values);

        // 47 rows against a 48-slot horizon names the deficit
        let short: Vec<String> = profile.values[..47].iter().map(|v| v.to_string()).collect();
        let short_path = dir.path().join("short.csv");
        fs::write(&short_path, short.join("\n")).unwrap();
        let err = load_baseline(&short_path, &horizon).unwrap_err().to_string();
        assert!(err.contains("expected 48 rows, found 47"), "{err}");

        // negative and non-numeric rows are named by position
        let bad_path = dir.path().join("bad.csv");
        fs::write(&bad_path, "1.0\n-2.0\n").unwrap();
        let err = load_baseline(&bad_path, &Horizon::new(2, 0.25).unwrap())
            .unwrap_err()
            .to_string();
        assert!(err.contains(":2"), "{err}");
        fs::write(&bad_path, "1.0\npotato\n").unwrap();
        assert!(load_baseline(&bad_path, &Horizon::new(2, 0.25).unwrap()).is_err());
    }

    #[test]
    fn synthetic_valley_shape() {
        // flat when peak equals valley
        let flat = synthetic_valley(48, 100.0, 100.0, 3).unwrap();
        assert!(flat.values.iter().all(|&v| v == 100.0));

        // argmin in the middle third, deterministic per seed
        let a = synthetic_valley(48, 180.0, 80.0, 9).unwrap();
        let b = synthetic_valley(48, 180.0, 80.0, 9).unwrap();
        assert_eq!(a.values, b.values);
        let argmin = a
            .values
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.partial_cmp(y.1).unwrap())
            .unwrap()
            .0;
        assert!((16..32).contains(&argmin), "argmin {argmin}");
        let c = synthetic_valley(48, 180.0, 80.0, 10).unwrap();
        assert_ne!(a.values, c.values);

        assert!(synthetic_valley(48, 80.0, 180.0, 0).is_err());
    }

    #[test]
    fn fleet_sampling_is_deterministic_and_feasible() {
        let horizon = horizon48();
        let spec = FleetSpec {
            n: 20,
            r_max_kw: 6.6,
            demand_kwh_lo: 10.0,
            demand_kwh_hi: 20.0,
            gamma: 0.01,
            seed: 7,
        };
        let fleet = sample_fleet(&spec, &horizon).unwrap();
        assert_eq!(fleet.len(), 20);
        for ev in &fleet {
            assert!((10.0..=20.0).contains(&ev.demand_kwh));
            ev.validate(&horizon).unwrap();
        }
        let again = sample_fleet(&spec, &horizon).unwrap();
        assert_eq!(fleet, again);

        let mut constant = spec.clone();
        constant.demand_kwh_lo = 15.0;
        constant.demand_kwh_hi = 15.0;
        assert!(sample_fleet(&constant, &horizon)
            .unwrap()
            .iter()
            .all(|ev| ev.demand_kwh == 15.0));

        let mut infeasible = spec.clone();
        infeasible.demand_kwh_hi = 100.0;
        assert!(sample_fleet(&infeasible, &horizon).is_err());
        let mut tiny = spec;
        tiny.n = 2;
        assert!(sample_fleet(&tiny, &horizon).is_err());
    }

    #[test]
    fn zero_iteration_run_writes_header_only_csvs() {
        let dir = tempfile::tempdir().unwrap();
        let baseline = synthetic_valley(4, 10.0, 5.0, 1).unwrap();
        let solve = SolveOutput {
            states: vec![],
            trace: vec![],
            aggregates: vec![],
            trajectory: vec![],
            converged_at: vec![],
            iterations: 0,
        };
        let artifacts = RunArtifacts {
            baseline: &baseline,
            solve: &solve,
            sampled_messages: &[],
            polynomial_trace: &[],
        };
        let files = write_results(&artifacts, dir.path()).unwrap();
        assert_eq!(files.len(), 5);
        for f in &files {
            let text = fs::read_to_string(f).unwrap();
            let lines: Vec<_> = text.lines().collect();
            if f.ends_with("total_load.csv") {
                assert_eq!(lines.len(), 5); // header + 4 slots
            } else {
                assert_eq!(lines.len(), 1, "{f:?} should be header-only: {text}");
            }
        }
    }

    #[test]
    fn results_roundtrip_through_profiles_csv() {
        let dir = tempfile::tempdir().unwrap();
        let horizon = Horizon::new(6, 0.25).unwrap();
        let baseline = synthetic_valley(6, 12.0, 6.0, 2).unwrap();
        let fleet = sample_fleet(
            &FleetSpec {
                n: 3,
                r_max_kw: 6.6,
                demand_kwh_lo: 1.0,
                demand_kwh_hi: 2.0,
                gamma: 0.05,
                seed: 5,
            },
            &horizon,
        )
        .unwrap();
        let scenario = Scenario {
            horizon,
            baseline: baseline.values.clone(),
            fleet,
            beta: 0.5,
            eps0: 1e-9,
            max_iter: 30,
        };
        let solve = crate::optim::solve_plaintext(&scenario, Aggregation::Exact).unwrap();
        let artifacts = RunArtifacts {
            baseline: &baseline,
            solve: &solve,
            sampled_messages: &[],
            polynomial_trace: &[],
        };
        let files = write_results(&artifacts, dir.path()).unwrap();
        let profiles = read_profiles(&files[0]).unwrap();
        assert_eq!(profiles.len(), 3);
        for (agent, profile) in profiles {
            assert_eq!(profile, solve.states[agent].x, "agent {agent}");
        }
        // total_load row count matches the horizon
        let total = fs::read_to_string(&files[1]).unwrap();
        assert_eq!(total.lines().count(), 7);
    }
}
