//! Per-agent result files for multi-process TCP runs.
//!
//! Each agent process writes its own iterate trace; the coordinator reads
//! them back and reassembles the same structures an in-process run returns.
//! Floats go through Rust's shortest round-trip formatting, so the
//! reassembled trajectories are bit-identical to what the agents held in
//! memory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use valleyfill::optim::{AgentState, IterationRecord, SolveOutput, TraceRow};
use valleyfill::protocol::AgentRunOutput;
use valleyfill::{optim, Error, Result};

pub fn agent_trace_path(dir: &Path, agent_id: u16) -> PathBuf {
    dir.join(format!("agent_{agent_id:03}.csv"))
}

pub fn aggregates_path(dir: &Path) -> PathBuf {
    dir.join("aggregates.csv")
}

/// Writes one agent's per-round record: round, eps, lambda, converged flag,
/// then the profile.
pub fn write_agent_trace(out: &AgentRunOutput, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = agent_trace_path(dir, out.agent_id);
    let mut w = BufWriter::new(File::create(&path)?);
    let slots = out.state.x.len();
    write!(w, "round,eps,lambda,converged_at")?;
    for t in 1..=slots {
        write!(w, ",kw_{t}")?;
    }
    writeln!(w)?;
    for r in 0..out.eps_trace.len() {
        write!(
            w,
            "{},{},{},{}",
            r + 1,
            out.eps_trace[r],
            out.lambda_trace[r],
            out.converged_at.map(|c| c.to_string()).unwrap_or_default()
        )?;
        for v in &out.x_trace[r] {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(path)
}

/// Writes the decoded aggregates (identical across agents; agent 0 emits
/// them on everyone's behalf).
pub fn write_aggregates(out: &AgentRunOutput, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = aggregates_path(dir);
    let mut w = BufWriter::new(File::create(&path)?);
    let slots = out.state.x.len();
    write!(w, "round")?;
    for t in 1..=slots {
        write!(w, ",agg_{t}")?;
    }
    writeln!(w)?;
    for (r, agg) in out.aggregates.iter().enumerate() {
        write!(w, "{}", r + 1)?;
        for v in agg {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(path)
}

struct AgentTrace {
    eps: Vec<f64>,
    lambda: Vec<f64>,
    xs: Vec<Vec<f64>>,
    converged_at: Option<usize>,
}

fn parse_f64(cell: &str, path: &Path, row: usize) -> Result<f64> {
    cell.parse::<f64>().map_err(|e| Error::Parse {
        location: format!("{}:{}", path.display(), row + 2),
        msg: e.to_string(),
    })
}

fn read_agent_trace(path: &Path, slots: usize) -> Result<AgentTrace> {
    let text = fs::read_to_string(path)?;
    let mut eps = Vec::new();
    let mut lambda = Vec::new();
    let mut xs = Vec::new();
    let mut converged_at = None;
    for (row, line) in text.lines().skip(1).enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 4 + slots {
            return Err(Error::Parse {
                location: format!("{}:{}", path.display(), row + 2),
                msg: format!("expected {} columns, found {}", 4 + slots, cells.len()),
            });
        }
        eps.push(parse_f64(cells[1], path, row)?);
        lambda.push(parse_f64(cells[2], path, row)?);
        if !cells[3].is_empty() {
            converged_at = Some(cells[3].parse::<usize>().map_err(|e| Error::Parse {
                location: format!("{}:{}", path.display(), row + 2),
                msg: e.to_string(),
            })?);
        }
        let profile = cells[4..]
            .iter()
            .map(|c| parse_f64(c, path, row))
            .collect::<Result<Vec<f64>>>()?;
        xs.push(profile);
    }
    Ok(AgentTrace {
        eps,
        lambda,
        xs,
        converged_at,
    })
}

fn read_aggregates(path: &Path, slots: usize) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (row, line) in text.lines().skip(1).enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 1 + slots {
            return Err(Error::Parse {
                location: format!("{}:{}", path.display(), row + 2),
                msg: format!("expected {} columns, found {}", 1 + slots, cells.len()),
            });
        }
        out.push(
            cells[1..]
                .iter()
                .map(|c| parse_f64(c, path, row))
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    Ok(out)
}

/// Reassembles a [`SolveOutput`] from the per-agent files of a multi-process
/// run. Needs the scenario's baseline (for the objective column) and the
/// fleet specs (to rebuild final states).
pub fn combine_agent_outputs(
    dir: &Path,
    n: usize,
    slots: usize,
    baseline: &[f64],
    fleet: &[valleyfill::optim::EvSpec],
) -> Result<SolveOutput> {
    let aggregates = read_aggregates(&aggregates_path(dir), slots)?;
    let rounds = aggregates.len();
    let mut agents = Vec::with_capacity(n);
    for id in 0..n as u16 {
        let trace = read_agent_trace(&agent_trace_path(dir, id), slots)?;
        if trace.eps.len() != rounds {
            return Err(Error::Parse {
                location: agent_trace_path(dir, id).display().to_string(),
                msg: format!("agent has {} rounds, aggregates have {rounds}", trace.eps.len()),
            });
        }
        agents.push(trace);
    }

    let mut trace_rows = Vec::with_capacity(rounds * n);
    let mut trajectory = Vec::with_capacity(rounds);
    for r in 0..rounds {
        let objective = optim::objective(baseline, &aggregates[r]);
        for (i, agent) in agents.iter().enumerate() {
            trace_rows.push(TraceRow {
                iteration: r + 1,
                agent: i,
                eps: agent.eps[r],
                lambda: agent.lambda[r],
                objective,
            });
        }
        trajectory.push(IterationRecord {
            xs: agents.iter().map(|a| a.xs[r].clone()).collect(),
            lambdas: agents.iter().map(|a| a.lambda[r]).collect(),
        });
    }

    let states = agents
        .iter()
        .zip(fleet)
        .map(|(a, spec)| AgentState {
            x: a.xs.last().cloned().unwrap_or_else(|| vec![0.0; slots]),
            lambda: a.lambda.last().copied().unwrap_or(0.0),
            spec: spec.clone(),
        })
        .collect();

    Ok(SolveOutput {
        states,
        trace: trace_rows,
        aggregates,
        trajectory,
        converged_at: agents.iter().map(|a| a.converged_at).collect(),
        iterations: rounds,
    })
}
