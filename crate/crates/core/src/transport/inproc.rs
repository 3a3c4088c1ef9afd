//! In-process bus: mpsc channels plus a phase barrier.
//!
//! Delivery is reliable and per-link ordered. Thread interleaving makes the
//! raw arrival order across senders nondeterministic, but every consumer in
//! this crate either collects a complete phase (a set, order-free) or reads
//! a canonically sorted tap snapshot, so run results and transcripts are
//! reproducible for a given seed.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::transport::{Recipient, RoundMessage, Tap, TapKind, Transport};
use crate::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct InProcBusOptions {
    /// `None` blocks forever (the default: fault tests set explicit
    /// timeouts, honest runs cannot stall).
    pub recv_timeout: Option<Duration>,
    pub barrier_timeout: Option<Duration>,
}

/// Factory for a fully connected in-process fabric.
pub struct InProcBus;

impl InProcBus {
    /// Builds `n` endpoints plus handles to the requested taps.
    pub fn build(
        n: usize,
        options: InProcBusOptions,
        tap_kinds: &[TapKind],
    ) -> (Vec<InProcEndpoint>, Vec<Tap>) {
        let taps: Arc<Vec<Tap>> = Arc::new(tap_kinds.iter().cloned().map(Tap::new).collect());
        let barrier = Arc::new(PhaseBarrier::new(n));
        let mut senders = Vec::with_capacity(n);
        let mut receivers = Vec::with_capacity(n);
        for _ in 0..n {
            let (tx, rx) = mpsc::channel();
            senders.push(tx);
            receivers.push(rx);
        }
        let endpoints = receivers
            .into_iter()
            .enumerate()
            .map(|(id, rx)| InProcEndpoint {
                id: id as u16,
                n,
                senders: senders.clone(),
                rx,
                taps: Arc::clone(&taps),
                barrier: Arc::clone(&barrier),
                options: options.clone(),
            })
            .collect();
        (endpoints, taps.iter().cloned().collect())
    }
}

pub struct InProcEndpoint {
    id: u16,
    n: usize,
    senders: Vec<Sender<RoundMessage>>,
    rx: Receiver<RoundMessage>,
    taps: Arc<Vec<Tap>>,
    barrier: Arc<PhaseBarrier>,
    options: InProcBusOptions,
}

impl InProcEndpoint {
    fn deliver(&self, to: u16, msg: RoundMessage) -> Result<()> {
        let tx = self.senders.get(to as usize).ok_or_else(|| {
            Error::Transport(format!("unknown receiver {to} on a bus of {}", self.n))
        })?;
        tx.send(msg)
            .map_err(|_| Error::Transport(format!("receiver {to} hung up")))
    }
}

impl Transport for InProcEndpoint {
    fn agent_id(&self) -> u16 {
        self.id
    }

    fn agent_count(&self) -> usize {
        self.n
    }

    fn send(&mut self, msg: RoundMessage) -> Result<()> {
        let Recipient::Agent(to) = msg.receiver else {
            return Err(Error::Transport(
                "use broadcast() for ALL-addressed messages".into(),
            ));
        };
        for tap in self.taps.iter() {
            tap.observe(&msg);
        }
        self.deliver(to, msg)
    }

    fn broadcast(&mut self, msg: RoundMessage) -> Result<()> {
        if msg.receiver != Recipient::All {
            return Err(Error::Transport(
                "broadcast() requires an ALL-addressed message".into(),
            ));
        }
        // Taps record the fan-out once, as the single broadcast it is.
        for tap in self.taps.iter() {
            tap.observe(&msg);
        }
        for to in 0..self.n as u16 {
            if to != self.id {
                self.deliver(to, msg)?;
            }
        }
        Ok(())
    }

    fn recv(&mut self) -> Result<RoundMessage> {
        match self.options.recv_timeout {
            None => self
                .rx
                .recv()
                .map_err(|_| Error::Transport("all senders hung up".into())),
            Some(timeout) => self.rx.recv_timeout(timeout).map_err(|e| match e {
                RecvTimeoutError::Timeout => {
                    Error::Transport(format!("receive timed out after {timeout:?}"))
                }
                RecvTimeoutError::Disconnected => {
                    Error::Transport("all senders hung up".into())
                }
            }),
        }
    }

    fn barrier(&mut self, phase: u64) -> Result<()> {
        self.barrier
            .wait(self.id, phase, self.options.barrier_timeout)
    }

    fn flush(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Reusable n-party barrier keyed by phase id. Entries are garbage-collected
/// once the last participant leaves.
struct PhaseBarrier {
    n: usize,
    state: Mutex<HashMap<u64, PhaseState>>,
    cv: Condvar,
}

#[derive(Default)]
struct PhaseState {
    arrived: BTreeSet<u16>,
    released: bool,
    exited: usize,
}

impl PhaseBarrier {
    fn new(n: usize) -> Self {
        PhaseBarrier {
            n,
            state: Mutex::new(HashMap::new()),
            cv: Condvar::new(),
        }
    }

    fn wait(&self, me: u16, phase: u64, timeout: Option<Duration>) -> Result<()> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut state = self.state.lock().expect("barrier poisoned");
        let entry = state.entry(phase).or_default();
        entry.arrived.insert(me);
        if entry.arrived.len() == self.n {
            entry.released = true;
            self.cv.notify_all();
        }
        while !state.get(&phase).map(|e| e.released).unwrap_or(true) {
            match deadline {
                None => state = self.cv.wait(state).expect("barrier poisoned"),
                Some(deadline) => {
                    let now = Instant::now();
                    if now >= deadline {
                        let missing = self.missing(&state, phase);
                        return Err(Error::RoundAbort {
                            round: (phase >> 2) as u32,
                            missing,
                        });
                    }
                    let (guard, res) = self
                        .cv
                        .wait_timeout(state, deadline - now)
                        .expect("barrier poisoned");
                    state = guard;
                    if res.timed_out()
                        && !state.get(&phase).map(|e| e.released).unwrap_or(true)
                    {
                        let missing = self.missing(&state, phase);
                        return Err(Error::RoundAbort {
                            round: (phase >> 2) as u32,
                            missing,
                        });
                    }
                }
            }
        }
        if let Some(entry) = state.get_mut(&phase) {
            entry.exited += 1;
            if entry.exited == self.n {
                state.remove(&phase);
            }
        }
        Ok(())
    }

    fn missing(&self, state: &HashMap<u64, PhaseState>, phase: u64) -> Vec<u16> {
        let arrived = state
            .get(&phase)
            .map(|e| e.arrived.clone())
            .unwrap_or_default();
        (0..self.n as u16).filter(|id| !arrived.contains(id)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::MessageKind;
    use std::thread;

    fn msg(sender: u16, receiver: Recipient, payload: u64) -> RoundMessage {
        RoundMessage {
            kind: MessageKind::Share,
            sender,
            receiver,
            round: 0,
            slot: 0,
            payload,
        }
    }

    #[test]
    fn loopback_fidelity() {
        let (mut eps, _) = InProcBus::build(2, InProcBusOptions::default(), &[]);
        let mut b = eps.pop().unwrap();
        let mut a = eps.pop().unwrap();
        let m = msg(0, Recipient::Agent(1), 42);
        a.send(m).unwrap();
        assert_eq!(b.recv().unwrap(), m);
    }

    #[test]
    fn broadcast_fans_out_and_taps_record_once() {
        let (mut eps, taps) = InProcBus::build(3, InProcBusOptions::default(), &[TapKind::Eavesdropper]);
        let mut c = eps.pop().unwrap();
        let mut b = eps.pop().unwrap();
        let mut a = eps.pop().unwrap();
        let m = RoundMessage {
            kind: MessageKind::Broadcast,
            sender: 0,
            receiver: Recipient::All,
            round: 1,
            slot: 2,
            payload: 7,
        };
        a.broadcast(m).unwrap();
        assert_eq!(b.recv().unwrap(), m);
        assert_eq!(c.recv().unwrap(), m);
        let log = taps[0].snapshot();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].receiver, Recipient::All);
    }

    #[test]
    fn unknown_receiver_is_a_routing_error() {
        let (mut eps, _) = InProcBus::build(2, InProcBusOptions::default(), &[]);
        let mut a = eps.remove(0);
        assert!(a.send(msg(0, Recipient::Agent(7), 1)).is_err());
    }

    #[test]
    fn insider_tap_sees_only_coalition_traffic() {
        let coalition: BTreeSet<u16> = [1u16].into_iter().collect();
        let (mut eps, taps) = InProcBus::build(
            3,
            InProcBusOptions::default(),
            &[TapKind::Insider(coalition)],
        );
        let mut a = eps.remove(0);
        a.send(msg(0, Recipient::Agent(1), 10)).unwrap(); // touches coalition
        a.send(msg(0, Recipient::Agent(2), 20)).unwrap(); // does not
        let log = taps[0].snapshot();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].payload, 10);
    }

    /// A seeded blast of 10⁴ messages across 20 endpoints produces the same
    /// canonical transcript on every run.
    #[test]
    fn deterministic_transcript_replay() {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        fn blast(seed: u64) -> Vec<RoundMessage> {
            let n = 20;
            let (eps, taps) =
                InProcBus::build(n, InProcBusOptions::default(), &[TapKind::Eavesdropper]);
            thread::scope(|scope| {
                for (i, mut ep) in eps.into_iter().enumerate() {
                    scope.spawn(move || {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
                        for k in 0..500u64 {
                            let to = loop {
                                let t = rng.random_range(0..n as u16);
                                if t != i as u16 {
                                    break t;
                                }
                            };
                            let m = RoundMessage {
                                kind: MessageKind::Share,
                                sender: i as u16,
                                receiver: Recipient::Agent(to),
                                round: k as u32,
                                slot: 0,
                                payload: rng.random_range(0..1_000_000),
                            };
                            ep.send(m).unwrap();
                        }
                        // hold the endpoint until everyone finished sending
                        ep.barrier(0).unwrap();
                    });
                }
            });
            taps[0].snapshot()
        }

        let a = blast(99);
        let b = blast(99);
        assert_eq!(a.len(), 10_000);
        assert_eq!(a, b);
    }

    #[test]
    fn barrier_single_agent_releases_immediately() {
        let (mut eps, _) = InProcBus::build(1, InProcBusOptions::default(), &[]);
        eps[0].barrier(0).unwrap();
    }

    #[test]
    fn barrier_releases_all_together_despite_delay() {
        let (eps, _) = InProcBus::build(3, InProcBusOptions::default(), &[]);
        let released = Arc::new(Mutex::new(Vec::new()));
        thread::scope(|scope| {
            for (i, mut ep) in eps.into_iter().enumerate() {
                let released = Arc::clone(&released);
                scope.spawn(move || {
                    if i == 2 {
                        thread::sleep(Duration::from_millis(50));
                    }
                    ep.barrier(4).unwrap();
                    released.lock().unwrap().push(i);
                });
            }
        });
        assert_eq!(released.lock().unwrap().len(), 3);
    }

    #[test]
    fn barrier_timeout_names_missing_agents() {
        let options = InProcBusOptions {
            recv_timeout: None,
            barrier_timeout: Some(Duration::from_millis(50)),
        };
        let (mut eps, _) = InProcBus::build(3, options, &[]);
        let mut a = eps.remove(0);
        let mut b = eps.remove(0);
        // agent 2 never arrives
        let h = thread::spawn(move || b.barrier(8));
        let res = a.barrier(8);
        match res {
            Err(Error::RoundAbort { round: 2, missing }) => {
                assert_eq!(missing, vec![2]);
            }
            other => panic!("expected round abort, got {other:?}"),
        }
        assert!(h.join().unwrap().is_err());
    }
}
