//! `valleyfill verify` — a fast self-check of the toolkit's correctness and
//! privacy machinery at small scale, printing one pass/fail line per
//! criterion. The full-scale acceptance suite lives in the test tree; this
//! command is the fresh-checkout smoke test.

use std::collections::BTreeSet;
use std::time::Duration;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use valleyfill::encoding::FixedPointCodec;
use valleyfill::field::{self, FieldPrime};
use valleyfill::optim::{Aggregation, EvSpec, Horizon, Scenario};
use valleyfill::protocol::{
    attack_reconstruct, default_nodes, plaintext_fixed_point_sum, run_protocol,
    run_protocol_with_endpoints, secure_aggregate_round, AdversarySpec, ProtocolConfig,
};
use valleyfill::shamir::{self, SharingPolicy};
use valleyfill::transport::{
    InProcBus, InProcBusOptions, MessageKind, RoundMessage, Transport,
};
use valleyfill::{Error, Result};

pub struct VerifyOptions {
    pub inject_corruption: bool,
    pub n: usize,
}

struct Report {
    failures: usize,
}

impl Report {
    fn check(&mut self, name: &str, outcome: Result<()>) {
        match outcome {
            Ok(()) => println!("verify {name}: PASS"),
            Err(e) => {
                println!("verify {name}: FAIL ({e})");
                self.failures += 1;
            }
        }
    }
}

fn ensure(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidInput(msg.to_string()))
    }
}

/// Runs all checks; returns Err if any criterion failed.
pub fn run_verify(options: &VerifyOptions) -> Result<()> {
    if options.n < 3 {
        // surfaces the same config error a run would produce
        let field = FieldPrime::new(31)?;
        let policy = SharingPolicy::new(1, options.n.max(2), field)?;
        let codec = FixedPointCodec::new(0, field, 2, 2.0)?;
        ProtocolConfig::new(
            policy,
            codec,
            default_nodes(options.n.max(2), field),
            Horizon::new(2, 0.25)?,
            0,
        )?;
        unreachable!("configs below 3 agents are rejected");
    }

    let mut report = Report { failures: 0 };

    report.check("field arithmetic", field_checks());
    report.check("fixed-point codec", codec_checks());
    report.check("share dealing and reconstruction", shamir_checks());
    report.check("secure sum equals plaintext fixed-point sum", {
        secure_sum_checks(options.n)
    });
    report.check("private run equals quantized oracle", oracle_checks(options.n));
    report.check("threshold zero-information (small field)", zero_info_checks());
    report.check("adversary reconstruction bounds", adversary_checks());
    report.check(
        "share integrity detection",
        integrity_checks(options.inject_corruption),
    );

    if report.failures > 0 {
        Err(Error::InvalidInput(format!(
            "{} verification criteria failed",
            report.failures
        )))
    } else {
        println!("all verification criteria passed");
        Ok(())
    }
}

fn field_checks() -> Result<()> {
    let f17 = FieldPrime::new(17)?;
    ensure(
        f17.element(5).mul(f17.element(7))?.value() == 1,
        "5·7 should be 1 mod 17",
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &e in &[17u64, 31, 2_147_483_647] {
        let f = FieldPrime::new(e)?;
        for _ in 0..200 {
            let a = f.sample(&mut rng);
            if !a.is_zero() {
                ensure(a.mul(a.inv()?)?.value() == 1, "a · a⁻¹ must be 1")?;
            }
        }
        // interpolation returns the constant term
        let coeffs: Vec<_> = (0..4).map(|_| f.sample(&mut rng)).collect();
        let pts: Vec<_> = (1..=4u64)
            .map(|i| {
                let z = f.element(i);
                Ok((z, field::eval_poly(&coeffs, z)?))
            })
            .collect::<Result<_>>()?;
        ensure(
            field::interpolate_at_zero(&pts, 4)? == coeffs[0],
            "interpolation must recover the constant term",
        )?;
    }
    Ok(())
}

fn codec_checks() -> Result<()> {
    let f = FieldPrime::new(2_147_483_647)?;
    let codec = FixedPointCodec::new(3, f, 20, 10.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..500 {
        let x = rng.random_range(-10.0..10.0);
        let back = codec.decode(codec.encode(x)?);
        ensure((back - x).abs() < 1e-3, "roundtrip within one fixed-point ulp")?;
        ensure(
            (x < 0.0) == (2 * (codec.encode(x)?.value() as u128) >= 2_147_483_647u128),
            "negatives map to the upper half",
        )?;
    }
    ensure(
        FixedPointCodec::new(0, FieldPrime::new(17)?, 3, 4.0).is_err(),
        "overflowing codecs must be rejected",
    )
}

fn shamir_checks() -> Result<()> {
    let f = FieldPrime::new(17)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 1..=3usize {
        let n = k + 2;
        let policy = SharingPolicy::new(k, n, f)?;
        let nodes = default_nodes(n, f);
        for s in 0..17u64 {
            let secret = f.element(s);
            let (_, shares) = shamir::deal(secret, &policy, &nodes, &mut rng)?;
            ensure(
                shamir::reconstruct(&shares, &policy)? == secret,
                "reconstruction must return the dealt secret",
            )?;
            ensure(
                shamir::consistency_check(&shares, &policy),
                "untampered shares must be consistent",
            )?;
            ensure(
                matches!(
                    shamir::reconstruct(&shares[..k], &policy),
                    Err(Error::Threshold { .. })
                ),
                "k shares must not reconstruct",
            )?;
        }
    }
    Ok(())
}

fn secure_sum_checks(n: usize) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..5u64 {
        let k = 1 + (rng.next_u64() as usize) % (n - 1);
        let f = FieldPrime::new(2_147_483_647)?;
        let policy = SharingPolicy::new(k, n, f)?;
        let codec = FixedPointCodec::new(3, f, n as u64, 10.0)?;
        let slots = 3;
        let config = ProtocolConfig::new(
            policy,
            codec,
            default_nodes(n, f),
            Horizon::new(slots, 0.25)?,
            trial,
        )?;
        let vectors: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..slots).map(|_| rng.random_range(-10.0..10.0)).collect())
            .collect();
        let expected = plaintext_fixed_point_sum(&vectors, &config.codec)?;
        for decoded in secure_aggregate_round(&vectors, &config)? {
            ensure(decoded == expected, "decoded sum must match exactly")?;
        }
    }
    Ok(())
}

fn verify_scenario(n: usize) -> Result<(Scenario, ProtocolConfig)> {
    let horizon = Horizon::new(4, 0.25)?;
    let scenario = Scenario {
        horizon,
        baseline: vec![3.0, 1.0, 1.5, 2.5],
        fleet: (0..n)
            .map(|i| EvSpec::uniform(6.6, 1.0 + 0.2 * i as f64, 0.05, 4))
            .collect(),
        beta: 0.5,
        eps0: 1e-9,
        max_iter: 25,
    };
    let f = FieldPrime::new(2_147_483_647)?;
    let policy = SharingPolicy::new(2.min(n - 1), n, f)?;
    let codec = FixedPointCodec::new(3, f, n as u64, 6.6)?;
    let config = ProtocolConfig::new(policy, codec, default_nodes(n, f), horizon, 11)?;
    Ok((scenario, config))
}

fn oracle_checks(n: usize) -> Result<()> {
    let (scenario, config) = verify_scenario(n)?;
    let private = run_protocol(&scenario, &config, None)?;
    let oracle =
        valleyfill::optim::solve_plaintext(&scenario, Aggregation::Quantized(&config.codec))?;
    ensure(
        private.solve.digest() == oracle.digest(),
        "private and quantized-oracle trajectories must be bit-identical",
    )
}

fn zero_info_checks() -> Result<()> {
    let f = FieldPrime::new(17)?;
    let e = 17u64;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for k in 1..=2usize {
        let n = k + 2;
        let policy = SharingPolicy::new(k, n, f)?;
        let nodes = default_nodes(n, f);
        for s in [0u64, 5, 16] {
            let (_, shares) = shamir::deal(f.element(s), &policy, &nodes, &mut rng)?;
            for m in 1..=k {
                let observed = &shares[..m];
                let mut counts = Vec::new();
                for candidate in 0..e {
                    let total = e.pow(k as u32);
                    let mut count = 0u64;
                    for idx in 0..total {
                        let mut coeffs = vec![f.element(candidate)];
                        let mut rem = idx;
                        for _ in 0..k {
                            coeffs.push(f.element(rem % e));
                            rem /= e;
                        }
                        if observed.iter().all(|p| {
                            field::eval_poly(&coeffs, p.node)
                                .map(|v| v == p.value)
                                .unwrap_or(false)
                        }) {
                            count += 1;
                        }
                    }
                    counts.push(count);
                }
                ensure(
                    counts.windows(2).all(|w| w[0] == w[1]),
                    "completion counts must not depend on the candidate secret",
                )?;
                ensure(
                    counts[0] == e.pow((k - m) as u32),
                    "completion count must be e^(k−m)",
                )?;
            }
        }
    }
    Ok(())
}

fn adversary_checks() -> Result<()> {
    let (scenario, config) = verify_scenario(4)?;

    // single honest-but-curious agent: certificate
    let single: BTreeSet<u16> = [1u16].into_iter().collect();
    let run = run_protocol(&scenario, &config, Some(&AdversarySpec::Coalition(single)))?;
    let outcome = attack_reconstruct(run.adversary.as_ref().unwrap(), 0, &config, None)?;
    ensure(
        !outcome.is_recovered(),
        "a single agent must not reconstruct a peer's profile",
    )?;

    // eavesdropper: certificate
    let run = run_protocol(&scenario, &config, Some(&AdversarySpec::Eavesdropper))?;
    let outcome = attack_reconstruct(run.adversary.as_ref().unwrap(), 0, &config, None)?;
    ensure(
        !outcome.is_recovered(),
        "a wiretap without the node table must not reconstruct",
    )?;

    // coalition of n−1: recovery
    let coalition: BTreeSet<u16> = [0u16, 1, 2].into_iter().collect();
    let run = run_protocol(&scenario, &config, Some(&AdversarySpec::Coalition(coalition)))?;
    let outcome = attack_reconstruct(run.adversary.as_ref().unwrap(), 3, &config, None)?;
    ensure(
        outcome.is_recovered(),
        "a coalition of all-but-one must recover the remaining profile",
    )?;

    // two-agent configurations are rejected outright
    let f = FieldPrime::new(31)?;
    let rejected = ProtocolConfig::new(
        SharingPolicy::new(1, 2, f)?,
        FixedPointCodec::new(0, f, 2, 2.0)?,
        default_nodes(2, f),
        Horizon::new(2, 0.25)?,
        0,
    );
    ensure(rejected.is_err(), "two-agent runs must be rejected")
}

/// Wraps an endpoint, flipping one share payload in round 2 when fault
/// injection is enabled.
struct FaultInjector<T: Transport> {
    inner: T,
    armed: bool,
}

impl<T: Transport> Transport for FaultInjector<T> {
    fn agent_id(&self) -> u16 {
        self.inner.agent_id()
    }
    fn agent_count(&self) -> usize {
        self.inner.agent_count()
    }
    fn send(&mut self, mut msg: RoundMessage) -> Result<()> {
        if self.armed && msg.kind == MessageKind::Share && msg.round == 2 {
            msg.payload ^= 1;
            self.armed = false;
        }
        self.inner.send(msg)
    }
    fn broadcast(&mut self, msg: RoundMessage) -> Result<()> {
        self.inner.broadcast(msg)
    }
    fn recv(&mut self) -> Result<RoundMessage> {
        self.inner.recv()
    }
    fn barrier(&mut self, phase: u64) -> Result<()> {
        self.inner.barrier(phase)
    }
    fn flush(&mut self) -> Result<()> {
        self.inner.flush()
    }
}

fn integrity_checks(inject: bool) -> Result<()> {
    let (scenario, config) = verify_scenario(4)?;
    let options = InProcBusOptions {
        recv_timeout: Some(Duration::from_secs(10)),
        barrier_timeout: Some(Duration::from_secs(10)),
    };
    let (endpoints, taps) = InProcBus::build(4, options, &[]);
    let wrapped: Vec<_> = endpoints
        .into_iter()
        .enumerate()
        .map(|(i, inner)| FaultInjector {
            inner,
            armed: inject && i == 0,
        })
        .collect();
    match run_protocol_with_endpoints(&scenario, &config, wrapped, &taps, None) {
        Ok(_) => Ok(()),
        Err(Error::Integrity { round, detail }) => Err(Error::Integrity { round, detail }),
        Err(other) => Err(other),
    }
}
