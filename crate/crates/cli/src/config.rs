//! Run configuration: flag parsing, config-file merging, preset expansion,
//! and the resolved-config echo that makes every run reproducible.
//!
//! Precedence, lowest to highest: built-in defaults, `--paper-preset`,
//! config file, explicit flags. Environment variables override only the
//! output directory (`VALLEYFILL_OUT`) and log verbosity (`VALLEYFILL_LOG`);
//! every scientific parameter must be explicit.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use valleyfill::encoding::FixedPointCodec;
use valleyfill::field::FieldPrime;
use valleyfill::optim::{Horizon, Scenario};
use valleyfill::protocol::{default_nodes, AdversarySpec, ProtocolConfig};
use valleyfill::scenario_io::{self, BaselineProfile, FleetSpec};
use valleyfill::shamir::SharingPolicy;
use valleyfill::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    /// Secure run: aggregates via threshold secret sharing.
    Private,
    /// Exact real-number aggregation, no protocol.
    Plaintext,
    /// Plaintext aggregation through the fixed-point codec — the oracle the
    /// private run must match bit for bit.
    QuantizedOracle,
    /// Private run with a recorded adversary view, followed by
    /// reconstruction attempts.
    AttackReplay,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Private => "private",
            Mode::Plaintext => "plaintext",
            Mode::QuantizedOracle => "quantized-oracle",
            Mode::AttackReplay => "attack-replay",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TransportChoice {
    Inproc,
    Tcp,
}

impl fmt::Display for TransportChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransportChoice::Inproc => "inproc",
            TransportChoice::Tcp => "tcp",
        })
    }
}

/// Fully resolved run parameters. Everything a run needs, nothing implicit.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: Mode,
    pub n: usize,
    pub slots: usize,
    pub dt: f64,
    pub delta: u32,
    pub degree: usize,
    pub modulus: u64,
    pub gamma: f64,
    pub beta: f64,
    pub eps0: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub r_max: f64,
    pub demand_lo: f64,
    pub demand_hi: f64,
    pub baseline_path: Option<PathBuf>,
    pub peak_kw: f64,
    pub valley_kw: f64,
    pub transport: TransportChoice,
    pub addresses: Option<PathBuf>,
    pub adversary: Option<AdversarySpec>,
    pub out: PathBuf,
    pub agent_id: Option<u16>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Private,
            n: 5,
            slots: 12,
            dt: 0.25,
            delta: 3,
            degree: 2,
            modulus: 2_147_483_647,
            gamma: 0.05,
            beta: 0.5,
            eps0: 1e-6,
            max_iter: 100,
            seed: 7,
            r_max: 6.6,
            demand_lo: 4.0,
            demand_hi: 8.0,
            baseline_path: None,
            peak_kw: 60.0,
            valley_kw: 25.0,
            transport: TransportChoice::Inproc,
            addresses: None,
            adversary: None,
            out: PathBuf::from("results"),
            agent_id: None,
        }
    }
}

impl RunConfig {
    /// The reference experiment: 20 EVs, 48 quarter-hour slots, δ = 3,
    /// degree-3 polynomials over the Mersenne prime 2³¹ − 1, γ = 0.01,
    /// β = 1, up to 300 iterations, 6.6 kW chargers, demands in [10, 20]
    /// kWh, nodes αᵢ = i.
    pub fn apply_paper_preset(&mut self) {
        self.n = 20;
        self.slots = 48;
        self.dt = 0.25;
        self.delta = 3;
        self.degree = 3;
        self.modulus = 2_147_483_647;
        self.gamma = 0.01;
        self.beta = 1.0;
        self.eps0 = 1e-6;
        self.max_iter = 300;
        self.r_max = 6.6;
        self.demand_lo = 10.0;
        self.demand_hi = 20.0;
        self.peak_kw = 180.0;
        self.valley_kw = 80.0;
    }

    pub fn horizon(&self) -> Result<Horizon> {
        Horizon::new(self.slots, self.dt)
    }

    pub fn baseline(&self) -> Result<BaselineProfile> {
        let horizon = self.horizon()?;
        match &self.baseline_path {
            Some(path) => scenario_io::load_baseline(path, &horizon),
            None => scenario_io::synthetic_valley(self.slots, self.peak_kw, self.valley_kw, self.seed),
        }
    }

    pub fn fleet_spec(&self) -> FleetSpec {
        FleetSpec {
            n: self.n,
            r_max_kw: self.r_max,
            demand_kwh_lo: self.demand_lo,
            demand_kwh_hi: self.demand_hi,
            gamma: self.gamma,
            seed: self.seed,
        }
    }

    pub fn scenario(&self) -> Result<Scenario> {
        let horizon = self.horizon()?;
        let baseline = self.baseline()?;
        baseline.validate(&horizon)?;
        let fleet = scenario_io::sample_fleet(&self.fleet_spec(), &horizon)?;
        let scenario = Scenario {
            horizon,
            baseline: baseline.values,
            fleet,
            beta: self.beta,
            eps0: self.eps0,
            max_iter: self.max_iter,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn protocol_config(&self) -> Result<ProtocolConfig> {
        let field = FieldPrime::new(self.modulus)?;
        let policy = SharingPolicy::new(self.degree, self.n, field)?;
        let codec = FixedPointCodec::new(self.delta, field, self.n as u64, self.r_max)?;
        ProtocolConfig::new(
            policy,
            codec,
            default_nodes(self.n, field),
            self.horizon()?,
            self.seed,
        )
    }

    /// Serializes the fully resolved configuration as flat key = value text
    /// (valid TOML), sufficient to reproduce the run exactly.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("mode", format!("\"{}\"", self.mode));
        push("n", self.n.to_string());
        push("slots", self.slots.to_string());
        push("dt", self.dt.to_string());
        push("delta", self.delta.to_string());
        push("degree", self.degree.to_string());
        push("modulus", self.modulus.to_string());
        push("gamma", self.gamma.to_string());
        push("beta", self.beta.to_string());
        push("eps0", self.eps0.to_string());
        push("max_iter", self.max_iter.to_string());
        push("seed", self.seed.to_string());
        push("r_max", self.r_max.to_string());
        push("demand_lo", self.demand_lo.to_string());
        push("demand_hi", self.demand_hi.to_string());
        if let Some(p) = &self.baseline_path {
            push("baseline", format!("{:?}", p.display().to_string()));
        } else {
            push("peak_kw", self.peak_kw.to_string());
            push("valley_kw", self.valley_kw.to_string());
        }
        push("transport", format!("\"{}\"", self.transport));
        if let Some(a) = &self.addresses {
            push("addresses", format!("{:?}", a.display().to_string()));
        }
        push(
            "adversary",
            format!("\"{}\"", adversary_to_string(self.adversary.as_ref())),
        );
        push("out", format!("{:?}", self.out.display().to_string()));
        out
    }
}

pub fn adversary_to_string(spec: Option<&AdversarySpec>) -> String {
    match spec {
        None => "none".into(),
        Some(AdversarySpec::Eavesdropper) => "eavesdropper".into(),
        Some(AdversarySpec::Coalition(members)) => {
            let ids: Vec<String> = members.iter().map(|m| m.to_string()).collect();
            format!("coalition:{}", ids.join(","))
        }
    }
}

pub fn parse_adversary(text: &str) -> Result<Option<AdversarySpec>> {
    let text = text.trim();
    if text.eq_ignore_ascii_case("none") || text.is_empty() {
        return Ok(None);
    }
    if text.eq_ignore_ascii_case("eavesdropper") {
        return Ok(Some(AdversarySpec::Eavesdropper));
    }
    if let Some(list) = text.strip_prefix("coalition:") {
        let members = list
            .split(',')
            .map(|id| {
                id.trim().parse::<u16>().map_err(|e| {
                    Error::Config(format!("bad coalition member '{id}': {e}"))
                })
            })
            .collect::<Result<BTreeSet<u16>>>()?;
        if members.is_empty() {
            return Err(Error::Config("coalition needs at least one member".into()));
        }
        return Ok(Some(AdversarySpec::Coalition(members)));
    }
    Err(Error::Config(format!(
        "unknown adversary '{text}' (use none, eavesdropper, or coalition:1,2,...)"
    )))
}

/// Config file schema: flat key = value pairs mirroring the flag names.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub mode: Option<String>,
    pub n: Option<usize>,
    pub slots: Option<usize>,
    pub dt: Option<f64>,
    pub delta: Option<u32>,
    pub degree: Option<usize>,
    pub modulus: Option<u64>,
    pub gamma: Option<f64>,
    pub beta: Option<f64>,
    pub eps0: Option<f64>,
    pub max_iter: Option<usize>,
    pub seed: Option<u64>,
    pub r_max: Option<f64>,
    pub demand_lo: Option<f64>,
    pub demand_hi: Option<f64>,
    pub baseline: Option<PathBuf>,
    pub peak_kw: Option<f64>,
    pub valley_kw: Option<f64>,
    pub transport: Option<String>,
    pub addresses: Option<PathBuf>,
    pub adversary: Option<String>,
    pub out: Option<PathBuf>,
}

pub fn load_config_file(path: &Path) -> Result<ConfigFile> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        location: path.display().to_string(),
        msg: e.to_string(),
    })
}

pub fn apply_config_file(config: &mut RunConfig, file: &ConfigFile) -> Result<()> {
    if let Some(mode) = &file.mode {
        config.mode = match mode.as_str() {
            "private" => Mode::Private,
            "plaintext" => Mode::Plaintext,
            "quantized-oracle" => Mode::QuantizedOracle,
            "attack-replay" => Mode::AttackReplay,
            other => return Err(Error::Config(format!("unknown mode '{other}'"))),
        };
    }
    if let Some(v) = file.n {
        config.n = v;
    }
    if let Some(v) = file.slots {
        config.slots = v;
    }
    if let Some(v) = file.dt {
        config.dt = v;
    }
    if let Some(v) = file.delta {
        config.delta = v;
    }
    if let Some(v) = file.degree {
        config.degree = v;
    }
    if let Some(v) = file.modulus {
        config.modulus = v;
    }
    if let Some(v) = file.gamma {
        config.gamma = v;
    }
    if let Some(v) = file.beta {
        config.beta = v;
    }
    if let Some(v) = file.eps0 {
        config.eps0 = v;
    }
    if let Some(v) = file.max_iter {
        config.max_iter = v;
    }
    if let Some(v) = file.seed {
        config.seed = v;
    }
    if let Some(v) = file.r_max {
        config.r_max = v;
    }
    if let Some(v) = file.demand_lo {
        config.demand_lo = v;
    }
    if let Some(v) = file.demand_hi {
        config.demand_hi = v;
    }
    if let Some(v) = &file.baseline {
        config.baseline_path = Some(v.clone());
    }
    if let Some(v) = file.peak_kw {
        config.peak_kw = v;
    }
    if let Some(v) = file.valley_kw {
        config.valley_kw = v;
    }
    if let Some(t) = &file.transport {
        config.transport = match t.as_str() {
            "inproc" => TransportChoice::Inproc,
            "tcp" => TransportChoice::Tcp,
            other => return Err(Error::Config(format!("unknown transport '{other}'"))),
        };
    }
    if let Some(v) = &file.addresses {
        config.addresses = Some(v.clone());
    }
    if let Some(a) = &file.adversary {
        config.adversary = parse_adversary(a)?;
    }
    if let Some(v) = &file.out {
        config.out = v.clone();
    }
    Ok(())
}
