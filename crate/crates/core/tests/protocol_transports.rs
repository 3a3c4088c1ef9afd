//! Cross-transport equivalence and fault injection for the aggregation
//! protocol.

use std::net::{SocketAddr, TcpListener};
use std::thread;
use std::time::Duration;

use valleyfill::encoding::FixedPointCodec;
use valleyfill::field::FieldPrime;
use valleyfill::optim::{EvSpec, Horizon, Scenario};
use valleyfill::protocol::{
    default_nodes, run_protocol, run_protocol_with_endpoints, ProtocolConfig,
};
use valleyfill::shamir::SharingPolicy;
use valleyfill::transport::{
    connect_mesh, InProcBus, InProcBusOptions, MessageKind, RoundMessage, TcpOptions, Transport,
};
use valleyfill::Error;

fn scenario(n: usize, max_iter: usize) -> Scenario {
    Scenario {
        horizon: Horizon::new(4, 0.25).unwrap(),
        baseline: vec![3.0, 1.5, 1.0, 2.5],
        fleet: (0..n)
            .map(|i| EvSpec::uniform(6.6, 1.0 + 0.3 * i as f64, 0.05, 4))
            .collect(),
        beta: 0.5,
        eps0: 1e-9,
        max_iter,
    }
}

fn config(n: usize, k: usize, seed: u64) -> ProtocolConfig {
    let field = FieldPrime::new(2_147_483_647).unwrap();
    let policy = SharingPolicy::new(k, n, field).unwrap();
    let codec = FixedPointCodec::new(3, field, n as u64, 6.6).unwrap();
    ProtocolConfig::new(
        policy,
        codec,
        default_nodes(n, field),
        Horizon::new(4, 0.25).unwrap(),
        seed,
    )
    .unwrap()
}

fn local_table(n: usize) -> Vec<SocketAddr> {
    (0..n)
        .map(|_| {
            TcpListener::bind("127.0.0.1:0")
                .unwrap()
                .local_addr()
                .unwrap()
        })
        .collect()
}

/// Same seed, same scenario: the in-process bus and a real TCP mesh produce
/// bit-identical results.
#[test]
fn tcp_and_inproc_runs_are_bit_identical() {
    let n = 5;
    let sc = scenario(n, 25);
    let cfg = config(n, 2, 4242);

    let inproc = run_protocol(&sc, &cfg, None).unwrap();

    let table = local_table(n);
    let mut handles = Vec::new();
    for id in 0..n as u16 {
        let table = table.clone();
        handles.push(thread::spawn(move || {
            connect_mesh(id, &table, TcpOptions::default()).unwrap()
        }));
    }
    let endpoints: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    let tcp = run_protocol_with_endpoints(&sc, &cfg, endpoints, &[], None).unwrap();

    assert_eq!(inproc.digest(), tcp.digest());
    assert_eq!(inproc.solve.aggregates, tcp.solve.aggregates);
    assert_eq!(inproc.solve.trace, tcp.solve.trace);
}

/// Wraps an endpoint and flips one share payload at a chosen round; every
/// agent's surplus-point consistency check must catch it and name the round.
struct CorruptingEndpoint<T: Transport> {
    inner: T,
    corrupt_round: u32,
    done: bool,
}

impl<T: Transport> Transport for CorruptingEndpoint<T> {
    fn agent_id(&self) -> u16 {
        self.inner.agent_id()
    }
    fn agent_count(&self) -> usize {
        self.inner.agent_count()
    }
    fn send(&mut self, mut msg: RoundMessage) -> valleyfill::Result<()> {
        if !self.done && msg.kind == MessageKind::Share && msg.round == self.corrupt_round {
            msg.payload = (msg.payload + 1) % 2_147_483_647;
            self.done = true;
        }
        self.inner.send(msg)
    }
    fn broadcast(&mut self, msg: RoundMessage) -> valleyfill::Result<()> {
        self.inner.broadcast(msg)
    }
    fn recv(&mut self) -> valleyfill::Result<RoundMessage> {
        self.inner.recv()
    }
    fn barrier(&mut self, phase: u64) -> valleyfill::Result<()> {
        self.inner.barrier(phase)
    }
    fn flush(&mut self) -> valleyfill::Result<()> {
        self.inner.flush()
    }
}

#[test]
fn corrupted_share_is_detected_and_names_the_round() {
    let n = 4;
    let sc = scenario(n, 6);
    let cfg = config(n, 1, 99); // k+1 = 2 < n: surplus points exist
    let options = InProcBusOptions {
        recv_timeout: Some(Duration::from_secs(5)),
        barrier_timeout: Some(Duration::from_secs(5)),
    };
    let (endpoints, taps) = InProcBus::build(n, options, &[]);
    // only agent 0 misbehaves
    let wrapped: Vec<_> = endpoints
        .into_iter()
        .enumerate()
        .map(|(i, inner)| CorruptingEndpoint {
            inner,
            corrupt_round: if i == 0 { 3 } else { u32::MAX },
            done: false,
        })
        .collect();
    let err = run_protocol_with_endpoints(&sc, &cfg, wrapped, &taps, None).unwrap_err();
    match err {
        Error::Integrity { round, detail } => {
            assert_eq!(round, 3);
            assert!(detail.contains("polynomial"), "{detail}");
        }
        other => panic!("expected integrity failure, got {other}"),
    }
}

/// Wraps an endpoint and silently drops everything it is asked to send from
/// a chosen round on, while staying connected — an agent that hangs rather
/// than crashes. The others' collection times out and the abort names it.
struct SilentEndpoint<T: Transport> {
    inner: T,
    silent_from: u32,
}

impl<T: Transport> Transport for SilentEndpoint<T> {
    fn agent_id(&self) -> u16 {
        self.inner.agent_id()
    }
    fn agent_count(&self) -> usize {
        self.inner.agent_count()
    }
    fn send(&mut self, msg: RoundMessage) -> valleyfill::Result<()> {
        if msg.round >= self.silent_from {
            return Ok(());
        }
        self.inner.send(msg)
    }
    fn broadcast(&mut self, msg: RoundMessage) -> valleyfill::Result<()> {
        if msg.round >= self.silent_from {
            return Ok(());
        }
        self.inner.broadcast(msg)
    }
    fn recv(&mut self) -> valleyfill::Result<RoundMessage> {
        self.inner.recv()
    }
    fn barrier(&mut self, phase: u64) -> valleyfill::Result<()> {
        self.inner.barrier(phase)
    }
    fn flush(&mut self) -> valleyfill::Result<()> {
        self.inner.flush()
    }
}

#[test]
fn missing_agent_aborts_round_and_is_named() {
    let n = 3;
    let sc = scenario(n, 6);
    let cfg = config(n, 1, 7);
    let options = InProcBusOptions {
        recv_timeout: Some(Duration::from_millis(300)),
        barrier_timeout: Some(Duration::from_millis(300)),
    };
    let (endpoints, taps) = InProcBus::build(n, options, &[]);
    // agent 2 goes dark from round 2 on
    let wrapped: Vec<_> = endpoints
        .into_iter()
        .enumerate()
        .map(|(i, inner)| SilentEndpoint {
            inner,
            silent_from: if i == 2 { 2 } else { u32::MAX },
        })
        .collect();

    let err = run_protocol_with_endpoints(&sc, &cfg, wrapped, &taps, None).unwrap_err();
    match err {
        Error::RoundAbort { round, missing } => {
            assert_eq!(round, 2);
            assert_eq!(missing, vec![2]);
        }
        other => panic!("expected round abort, got {other}"),
    }
}
