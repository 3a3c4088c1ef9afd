//! Mode execution: plaintext and quantized solver runs, in-process private
//! runs, attack replays, and the TCP coordinator / per-agent child roles.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write as IoWrite};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::Instant;

use valleyfill::optim::{self, Aggregation, SolveOutput};
use valleyfill::protocol::{
    attack_reconstruct, run_agent, run_protocol, AgentSetup, AttackOutcome, RunOutput,
};
use valleyfill::scenario_io::{self, RunArtifacts};
use valleyfill::transport::{connect_mesh, connect_mesh_with_listener, parse_address_table, TcpOptions};
use valleyfill::{Error, Result};

use crate::config::{Mode, RunConfig, TransportChoice};
use crate::handoff;

pub struct RunSummary {
    pub mode: Mode,
    pub iterations: usize,
    pub converged_agents: usize,
    pub agents: usize,
    pub final_objective: f64,
    pub max_residual_kwh: f64,
    pub digest: String,
    pub elapsed_secs: f64,
}

impl RunSummary {
    fn from_solve(config: &RunConfig, solve: &SolveOutput, started: Instant) -> Self {
        RunSummary {
            mode: config.mode,
            iterations: solve.iterations,
            converged_agents: solve.converged_at.iter().filter(|c| c.is_some()).count(),
            agents: solve.states.len(),
            final_objective: f64::NAN, // filled by the caller with the baseline at hand
            max_residual_kwh: solve.max_demand_residual(config.dt),
            digest: solve.digest(),
            elapsed_secs: started.elapsed().as_secs_f64(),
        }
    }

    pub fn print(&self) {
        println!("mode:                {}", self.mode);
        println!(
            "iterations:          {} (agents converged: {}/{})",
            self.iterations, self.converged_agents, self.agents
        );
        println!("final objective:     {:.3}", self.final_objective);
        println!("max demand residual: {:.6} kWh", self.max_residual_kwh);
        println!("wall clock:          {:.3} s", self.elapsed_secs);
        println!("digest:              {}", self.digest);
    }
}

fn write_common_outputs(
    config: &RunConfig,
    solve: &SolveOutput,
    run: Option<&RunOutput>,
) -> Result<()> {
    let baseline = config.baseline()?;
    let empty_msgs = Vec::new();
    let empty_poly = Vec::new();
    let artifacts = RunArtifacts {
        baseline: &baseline,
        solve,
        sampled_messages: run.map(|r| r.sampled_messages.as_slice()).unwrap_or(&empty_msgs),
        polynomial_trace: run.map(|r| r.polynomial_trace.as_slice()).unwrap_or(&empty_poly),
    };
    scenario_io::write_results(&artifacts, &config.out)?;
    fs::write(config.out.join("config_resolved.toml"), config.echo())?;
    fs::write(config.out.join("digest.txt"), solve.digest() + "\n")?;
    Ok(())
}

fn final_objective(config: &RunConfig, solve: &SolveOutput) -> Result<f64> {
    let baseline = config.baseline()?;
    let slots = baseline.values.len();
    let final_agg: Vec<f64> = (0..slots)
        .map(|t| solve.states.iter().map(|s| s.x[t]).sum())
        .collect();
    Ok(optim::objective(&baseline.values, &final_agg))
}

/// Executes the configured run and returns its summary.
pub fn execute_run(config: &RunConfig) -> Result<RunSummary> {
    if config.agent_id.is_some() {
        return run_tcp_agent(config);
    }
    match (config.mode, config.transport) {
        (Mode::Plaintext, _) => run_solver(config, false),
        (Mode::QuantizedOracle, _) => run_solver(config, true),
        (Mode::Private, TransportChoice::Inproc) => run_private_inproc(config),
        (Mode::AttackReplay, TransportChoice::Inproc) => run_attack_replay(config),
        (Mode::Private, TransportChoice::Tcp) => run_tcp_coordinator(config),
        (Mode::AttackReplay, TransportChoice::Tcp) => Err(Error::Config(
            "attack replays need the in-process transport (taps cannot span processes)".into(),
        )),
    }
}

fn run_solver(config: &RunConfig, quantized: bool) -> Result<RunSummary> {
    let started = Instant::now();
    let scenario = config.scenario()?;
    let solve = if quantized {
        let pc = config.protocol_config()?;
        optim::solve_plaintext(&scenario, Aggregation::Quantized(&pc.codec))?
    } else {
        optim::solve_plaintext(&scenario, Aggregation::Exact)?
    };
    write_common_outputs(config, &solve, None)?;
    let mut summary = RunSummary::from_solve(config, &solve, started);
    summary.final_objective = final_objective(config, &solve)?;
    Ok(summary)
}

fn run_private_inproc(config: &RunConfig) -> Result<RunSummary> {
    let started = Instant::now();
    let scenario = config.scenario()?;
    let pc = config.protocol_config()?;
    let run = run_protocol(&scenario, &pc, config.adversary.as_ref())?;
    write_common_outputs(config, &run.solve, Some(&run))?;
    let mut summary = RunSummary::from_solve(config, &run.solve, started);
    summary.final_objective = final_objective(config, &run.solve)?;
    Ok(summary)
}

fn run_attack_replay(config: &RunConfig) -> Result<RunSummary> {
    let started = Instant::now();
    let adversary = config.adversary.clone().ok_or_else(|| {
        Error::Config("attack-replay needs --adversary eavesdropper or coalition:...".into())
    })?;
    let scenario = config.scenario()?;
    let pc = config.protocol_config()?;
    let run = run_protocol(&scenario, &pc, Some(&adversary))?;
    let view = run
        .adversary
        .as_ref()
        .expect("adversary view recorded for attack replay");

    // Attack the lowest-indexed agent outside the coalition.
    let coalition = match &adversary {
        valleyfill::protocol::AdversarySpec::Coalition(members) => members.clone(),
        _ => Default::default(),
    };
    let target = (0..config.n as u16)
        .find(|id| !coalition.contains(id))
        .ok_or_else(|| Error::Config("no agent left to attack".into()))?;

    let outcome = attack_reconstruct(view, target, &pc, None)?;
    let mut report = String::new();
    match &outcome {
        AttackOutcome::Recovered { round, profile, .. } => {
            report.push_str(&format!(
                "RECOVERED agent {target} at round {round}: profile {profile:?}\n"
            ));
        }
        AttackOutcome::Insufficient(cert) => {
            report.push_str(&format!("{cert}\n"));
        }
    }
    print!("{report}");
    write_common_outputs(config, &run.solve, Some(&run))?;
    fs::write(config.out.join("adversary_report.txt"), &report)?;

    let mut summary = RunSummary::from_solve(config, &run.solve, started);
    summary.final_objective = final_objective(config, &run.solve)?;
    Ok(summary)
}

const HANDSHAKE: &str = "@handshake";

fn tcp_options() -> TcpOptions {
    TcpOptions::default()
}

/// One-agent-per-process role: bind, mesh up, run, write handoff files.
fn run_tcp_agent(config: &RunConfig) -> Result<RunSummary> {
    let started = Instant::now();
    let agent_id = config.agent_id.expect("checked by caller");
    if config.transport != TransportChoice::Tcp {
        return Err(Error::Config("--agent-id requires --transport tcp".into()));
    }
    if agent_id as usize >= config.n {
        return Err(Error::Config(format!(
            "agent id {agent_id} outside the fleet of {}",
            config.n
        )));
    }
    let scenario = config.scenario()?;
    let pc = config.protocol_config()?;

    let endpoint = match config.addresses.as_deref() {
        Some(path) if path.as_os_str() != HANDSHAKE => {
            let table = parse_address_table(&fs::read_to_string(path)?)?;
            connect_mesh(agent_id, &table, tcp_options())?
        }
        _ => {
            // Port handshake with the coordinator: report the bound port on
            // stdout, receive the full address table on stdin.
            let listener = TcpListener::bind("127.0.0.1:0")
                .map_err(|e| Error::Transport(format!("bind failed: {e}")))?;
            let port = listener
                .local_addr()
                .map_err(|e| Error::Transport(e.to_string()))?
                .port();
            println!("PORT {port}");
            std::io::stdout().flush()?;
            let mut line = String::new();
            std::io::stdin().read_line(&mut line)?;
            let rest = line
                .strip_prefix("TABLE ")
                .ok_or_else(|| Error::Transport(format!("bad coordinator handshake: {line:?}")))?;
            let table = parse_address_table(&rest.trim().replace(' ', "\n"))?;
            connect_mesh_with_listener(agent_id, listener, &table, tcp_options())?
        }
    };

    let setup = AgentSetup {
        agent_id,
        spec: scenario.fleet[agent_id as usize].clone(),
        baseline: scenario.baseline.clone(),
        beta: scenario.beta,
        eps0: scenario.eps0,
        max_iter: scenario.max_iter,
        capture_witness: agent_id == 0,
    };
    let out = run_agent(setup, &pc, endpoint)?;

    let agents_dir = config.out.join("agents");
    handoff::write_agent_trace(&out, &agents_dir)?;
    if agent_id == 0 {
        handoff::write_aggregates(&out, &agents_dir)?;
        if let Some(witness) = &out.witness {
            write_polynomials(
                &agents_dir.join("polynomials.csv"),
                &witness
                    .rounds
                    .iter()
                    .map(|r| (r.round, r.coeffs.first().cloned().unwrap_or_default()))
                    .collect::<Vec<_>>(),
            )?;
        }
    }

    Ok(RunSummary {
        mode: config.mode,
        iterations: out.eps_trace.len(),
        converged_agents: usize::from(out.converged_at.is_some()),
        agents: 1,
        final_objective: f64::NAN,
        max_residual_kwh: f64::NAN,
        digest: String::new(),
        elapsed_secs: started.elapsed().as_secs_f64(),
    })
}

fn write_polynomials(path: &Path, trace: &[(u32, Vec<u64>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let degree = trace
        .first()
        .map(|(_, c)| c.len().saturating_sub(1))
        .unwrap_or(0);
    write!(w, "iteration")?;
    for j in 0..=degree {
        write!(w, ",c{j}")?;
    }
    writeln!(w)?;
    for (round, coeffs) in trace {
        write!(w, "{}", round + 1)?;
        for c in coeffs {
            write!(w, ",{c}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Coordinator role: spawn one child process per agent, broker the port
/// handshake, wait, and reassemble the run from the handoff files.
fn run_tcp_coordinator(config: &RunConfig) -> Result<RunSummary> {
    let started = Instant::now();
    let scenario = config.scenario()?;
    fs::create_dir_all(&config.out)?;

    let exe = std::env::current_exe().map_err(Error::Io)?;
    let handshake = config.addresses.is_none();
    let mut children: Vec<Child> = Vec::with_capacity(config.n);
    for id in 0..config.n as u16 {
        let mut cmd = Command::new(&exe);
        cmd.arg("run");
        push_child_args(&mut cmd, config, id);
        cmd.stdout(Stdio::piped());
        cmd.stderr(Stdio::inherit());
        cmd.stdin(if handshake { Stdio::piped() } else { Stdio::null() });
        children.push(cmd.spawn().map_err(|e| {
            Error::Transport(format!("spawning agent {id} failed: {e}"))
        })?);
    }

    let result = drive_children(&mut children, handshake);
    if result.is_err() {
        for child in &mut children {
            let _ = child.kill();
        }
    }
    result?;

    for (id, child) in children.iter_mut().enumerate() {
        let status = child
            .wait()
            .map_err(|e| Error::Transport(format!("waiting for agent {id}: {e}")))?;
        if !status.success() {
            return Err(Error::Transport(format!(
                "agent {id} exited with {status}"
            )));
        }
    }

    let agents_dir = config.out.join("agents");
    let solve = handoff::combine_agent_outputs(
        &agents_dir,
        config.n,
        config.slots,
        &scenario.baseline,
        &scenario.fleet,
    )?;
    write_common_outputs(config, &solve, None)?;
    // child 0 produced the coefficient trace; lift it next to the other
    // result files
    let poly_src = agents_dir.join("polynomials.csv");
    if poly_src.exists() {
        fs::copy(&poly_src, config.out.join("polynomials.csv"))?;
    }

    let mut summary = RunSummary::from_solve(config, &solve, started);
    summary.final_objective = final_objective(config, &solve)?;
    Ok(summary)
}

fn push_child_args(cmd: &mut Command, config: &RunConfig, agent_id: u16) {
    cmd.args(["--mode", "private", "--transport", "tcp"]);
    cmd.args(["--agent-id", &agent_id.to_string()]);
    cmd.args(["--n", &config.n.to_string()]);
    cmd.args(["--slots", &config.slots.to_string()]);
    cmd.args(["--dt", &config.dt.to_string()]);
    cmd.args(["--delta", &config.delta.to_string()]);
    cmd.args(["--degree", &config.degree.to_string()]);
    cmd.args(["--modulus", &config.modulus.to_string()]);
    cmd.args(["--gamma", &config.gamma.to_string()]);
    cmd.args(["--beta", &config.beta.to_string()]);
    cmd.args(["--eps0", &config.eps0.to_string()]);
    cmd.args(["--max-iter", &config.max_iter.to_string()]);
    cmd.args(["--seed", &config.seed.to_string()]);
    cmd.args(["--r-max", &config.r_max.to_string()]);
    cmd.args(["--demand-lo", &config.demand_lo.to_string()]);
    cmd.args(["--demand-hi", &config.demand_hi.to_string()]);
    match &config.baseline_path {
        Some(path) => {
            cmd.arg("--baseline");
            cmd.arg(path);
        }
        None => {
            cmd.args(["--peak-kw", &config.peak_kw.to_string()]);
            cmd.args(["--valley-kw", &config.valley_kw.to_string()]);
        }
    }
    cmd.arg("--out");
    cmd.arg(&config.out);
    cmd.arg("--addresses");
    match &config.addresses {
        Some(path) => {
            cmd.arg(path);
        }
        None => {
            cmd.arg(HANDSHAKE);
        }
    }
}

fn drive_children(children: &mut [Child], handshake: bool) -> Result<()> {
    if !handshake {
        return Ok(());
    }
    let mut ports = Vec::with_capacity(children.len());
    let mut stdouts = Vec::with_capacity(children.len());
    for (id, child) in children.iter_mut().enumerate() {
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| Error::Transport(format!("agent {id} has no stdout")))?;
        let mut reader = BufReader::new(stdout);
        let mut line = String::new();
        reader
            .read_line(&mut line)
            .map_err(|e| Error::Transport(format!("agent {id} handshake read: {e}")))?;
        let port = line
            .trim()
            .strip_prefix("PORT ")
            .and_then(|p| p.parse::<u16>().ok())
            .ok_or_else(|| {
                Error::Transport(format!("agent {id} sent a bad handshake: {line:?}"))
            })?;
        ports.push(port);
        stdouts.push(reader);
    }
    let table: Vec<String> = ports.iter().map(|p| format!("127.0.0.1:{p}")).collect();
    let line = format!("TABLE {}\n", table.join(" "));
    for (id, child) in children.iter_mut().enumerate() {
        let stdin = child
            .stdin
            .as_mut()
            .ok_or_else(|| Error::Transport(format!("agent {id} has no stdin")))?;
        stdin
            .write_all(line.as_bytes())
            .map_err(|e| Error::Transport(format!("agent {id} handshake write: {e}")))?;
    }
    Ok(())
}
