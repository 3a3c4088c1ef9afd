//! TCP full-mesh transport.
//!
//! One stream per unordered agent pair: the higher id dials the lower id's
//! listener and identifies itself with a 2-byte hello. Frames are the
//! envelope from [`super::wire`] behind a 4-byte little-endian length
//! prefix. A reader thread per stream feeds a single inbox channel; barriers
//! are transport-internal tokens (kind byte 0xB0) exchanged all-to-all.
//!
//! Broadcast is n−1 unicasts; the envelope keeps the ALL receiver marker so
//! the semantics survive the fan-out.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::transport::wire::{self, ENVELOPE_LEN, KIND_BARRIER};
use crate::transport::{Recipient, RoundMessage, Tap, Transport};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct TcpOptions {
    /// How long to keep retrying dials / awaiting inbound peers.
    pub connect_timeout: Duration,
    pub recv_timeout: Duration,
    pub barrier_timeout: Duration,
}

impl Default for TcpOptions {
    fn default() -> Self {
        TcpOptions {
            connect_timeout: Duration::from_secs(30),
            recv_timeout: Duration::from_secs(30),
            barrier_timeout: Duration::from_secs(30),
        }
    }
}

enum Inbound {
    Data(RoundMessage),
    BarrierToken { from: u16, phase: u64 },
    PeerClosed(u16),
}

/// Endpoint owning one buffered writer per peer and a shared inbox fed by
/// per-stream reader threads.
pub struct TcpEndpoint {
    id: u16,
    n: usize,
    writers: Vec<Option<std::io::BufWriter<TcpStream>>>,
    inbox: Receiver<Inbound>,
    data_stash: Vec<RoundMessage>,
    barrier_stash: Vec<(u16, u64)>,
    dead_peers: BTreeSet<u16>,
    options: TcpOptions,
    taps: Option<Arc<Vec<Tap>>>,
    _readers: Vec<JoinHandle<()>>,
}

/// Builds the mesh for `agent_id`, binding the listener from the table.
pub fn connect_mesh(agent_id: u16, table: &[SocketAddr], options: TcpOptions) -> Result<TcpEndpoint> {
    let addr = *table
        .get(agent_id as usize)
        .ok_or_else(|| Error::Config(format!("no address for agent {agent_id}")))?;
    let listener = TcpListener::bind(addr)
        .map_err(|e| Error::Transport(format!("agent {agent_id} cannot bind {addr}: {e}")))?;
    connect_mesh_with_listener(agent_id, listener, table, options)
}

/// Same, but with a listener the caller already bound (lets a coordinator
/// hand out port-zero listeners before the address table is final).
pub fn connect_mesh_with_listener(
    agent_id: u16,
    listener: TcpListener,
    table: &[SocketAddr],
    options: TcpOptions,
) -> Result<TcpEndpoint> {
    let n = table.len();
    if (agent_id as usize) >= n {
        return Err(Error::Config(format!(
            "agent id {agent_id} outside table of {n} addresses"
        )));
    }
    let deadline = Instant::now() + options.connect_timeout;

    // Inbound side: peers with higher ids dial us.
    let expected_inbound = n - 1 - agent_id as usize;
    listener
        .set_nonblocking(true)
        .map_err(|e| Error::Transport(format!("listener setup failed: {e}")))?;
    let mut streams: Vec<Option<TcpStream>> = (0..n).map(|_| None).collect();

    // Outbound side: we dial every lower id, retrying while peers start up.
    for peer in 0..agent_id {
        let peer_addr = table[peer as usize];
        let stream = loop {
            match TcpStream::connect(peer_addr) {
                Ok(s) => break s,
                Err(e) => {
                    if Instant::now() >= deadline {
                        return Err(Error::Transport(format!(
                            "agent {agent_id} could not reach agent {peer} at {peer_addr}: {e}"
                        )));
                    }
                    thread::sleep(Duration::from_millis(25));
                }
            }
        };
        prepare_stream(&stream)?;
        let mut s = stream;
        s.write_all(&agent_id.to_le_bytes())
            .map_err(|e| Error::Transport(format!("hello to agent {peer} failed: {e}")))?;
        s.flush()
            .map_err(|e| Error::Transport(format!("hello to agent {peer} failed: {e}")))?;
        streams[peer as usize] = Some(s);
    }

    let mut accepted = 0usize;
    while accepted < expected_inbound {
        match listener.accept() {
            Ok((stream, _)) => {
                stream
                    .set_nonblocking(false)
                    .map_err(|e| Error::Transport(format!("accept setup failed: {e}")))?;
                prepare_stream(&stream)?;
                let mut hello = [0u8; 2];
                let mut s = stream;
                s.read_exact(&mut hello)
                    .map_err(|e| Error::Transport(format!("peer hello failed: {e}")))?;
                let peer = u16::from_le_bytes(hello);
                if peer as usize >= n || peer <= agent_id {
                    return Err(Error::Transport(format!(
                        "unexpected hello from agent {peer}"
                    )));
                }
                streams[peer as usize] = Some(s);
                accepted += 1;
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    let missing: Vec<u16> = (agent_id + 1..n as u16)
                        .filter(|&p| streams[p as usize].is_none())
                        .collect();
                    return Err(Error::RoundAbort { round: 0, missing });
                }
                thread::sleep(Duration::from_millis(10));
            }
            Err(e) => return Err(Error::Transport(format!("accept failed: {e}"))),
        }
    }

    // Split each stream into a buffered writer and a reader thread.
    let (tx, inbox) = mpsc::channel::<Inbound>();
    let mut writers: Vec<Option<std::io::BufWriter<TcpStream>>> = (0..n).map(|_| None).collect();
    let mut readers = Vec::new();
    for (peer, slot) in streams.into_iter().enumerate() {
        let Some(stream) = slot else { continue };
        let read_half = stream
            .try_clone()
            .map_err(|e| Error::Transport(format!("stream clone failed: {e}")))?;
        writers[peer] = Some(std::io::BufWriter::with_capacity(64 * 1024, stream));
        let tx = tx.clone();
        let peer_id = peer as u16;
        readers.push(thread::spawn(move || read_loop(read_half, peer_id, tx)));
    }

    Ok(TcpEndpoint {
        id: agent_id,
        n,
        writers,
        inbox,
        data_stash: Vec::new(),
        barrier_stash: Vec::new(),
        dead_peers: BTreeSet::new(),
        options,
        taps: None,
        _readers: readers,
    })
}

fn prepare_stream(stream: &TcpStream) -> Result<()> {
    stream
        .set_nodelay(true)
        .map_err(|e| Error::Transport(format!("nodelay failed: {e}")))
}

fn read_loop(mut stream: TcpStream, peer: u16, tx: Sender<Inbound>) {
    let mut len_buf = [0u8; 4];
    let mut frame = [0u8; ENVELOPE_LEN];
    loop {
        if stream.read_exact(&mut len_buf).is_err() {
            let _ = tx.send(Inbound::PeerClosed(peer));
            return;
        }
        let len = u32::from_le_bytes(len_buf) as usize;
        if len != ENVELOPE_LEN {
            let _ = tx.send(Inbound::PeerClosed(peer));
            return;
        }
        if stream.read_exact(&mut frame).is_err() {
            let _ = tx.send(Inbound::PeerClosed(peer));
            return;
        }
        let event = match wire::decode_raw(&frame) {
            Ok((KIND_BARRIER, from, _, _, _, phase)) => {
                Inbound::BarrierToken { from, phase }
            }
            _ => match wire::decode_envelope(&frame) {
                Ok(msg) => Inbound::Data(msg),
                Err(_) => {
                    let _ = tx.send(Inbound::PeerClosed(peer));
                    return;
                }
            },
        };
        if tx.send(event).is_err() {
            return;
        }
    }
}

impl TcpEndpoint {
    /// Attaches passive taps (only meaningful when all endpoints share the
    /// process; cross-process runs have no global observation point).
    pub fn set_taps(&mut self, taps: Arc<Vec<Tap>>) {
        self.taps = Some(taps);
    }

    fn observe(&self, msg: &RoundMessage) {
        if let Some(taps) = &self.taps {
            for tap in taps.iter() {
                tap.observe(msg);
            }
        }
    }

    fn write_frame(&mut self, to: u16, bytes: &[u8; ENVELOPE_LEN]) -> Result<()> {
        let writer = self
            .writers
            .get_mut(to as usize)
            .and_then(|w| w.as_mut())
            .ok_or_else(|| Error::Transport(format!("no stream to agent {to}")))?;
        writer
            .write_all(&(ENVELOPE_LEN as u32).to_le_bytes())
            .and_then(|_| writer.write_all(bytes))
            .map_err(|e| Error::Transport(format!("write to agent {to} failed: {e}")))
    }

    fn next_inbound(&mut self, deadline: Instant) -> Result<Inbound> {
        let now = Instant::now();
        if now >= deadline {
            return Err(Error::Transport("receive timed out".into()));
        }
        match self.inbox.recv_timeout(deadline - now) {
            Ok(event) => Ok(event),
            Err(RecvTimeoutError::Timeout) => Err(Error::Transport("receive timed out".into())),
            Err(RecvTimeoutError::Disconnected) => {
                Err(Error::Transport("all reader threads exited".into()))
            }
        }
    }
}

impl Transport for TcpEndpoint {
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
        self.observe(&msg);
        self.write_frame(to, &wire::encode_envelope(&msg))
    }

    fn broadcast(&mut self, msg: RoundMessage) -> Result<()> {
        if msg.receiver != Recipient::All {
            return Err(Error::Transport(
                "broadcast() requires an ALL-addressed message".into(),
            ));
        }
        self.observe(&msg);
        let bytes = wire::encode_envelope(&msg);
        for to in 0..self.n as u16 {
            if to != self.id {
                self.write_frame(to, &bytes)?;
            }
        }
        Ok(())
    }

    fn recv(&mut self) -> Result<RoundMessage> {
        if let Some(msg) = self.data_stash.pop() {
            return Ok(msg);
        }
        let deadline = Instant::now() + self.options.recv_timeout;
        loop {
            match self.next_inbound(deadline)? {
                Inbound::Data(msg) => return Ok(msg),
                Inbound::BarrierToken { from, phase } => {
                    self.barrier_stash.push((from, phase));
                }
                Inbound::PeerClosed(peer) => {
                    self.dead_peers.insert(peer);
                    if self.dead_peers.len() == self.n - 1 {
                        return Err(Error::Transport("all peers disconnected".into()));
                    }
                }
            }
        }
    }

    fn barrier(&mut self, phase: u64) -> Result<()> {
        self.flush()?;
        let token = wire::encode_raw(KIND_BARRIER, self.id, super::ALL_RECEIVER, 0, 0, phase);
        for to in 0..self.n as u16 {
            if to != self.id {
                self.write_frame(to, &token)?;
            }
        }
        self.flush()?;

        let mut arrived = BTreeSet::new();
        let mut keep = Vec::new();
        for (from, p) in self.barrier_stash.drain(..) {
            if p == phase {
                arrived.insert(from);
            } else {
                keep.push((from, p));
            }
        }
        self.barrier_stash = keep;

        let deadline = Instant::now() + self.options.barrier_timeout;
        while arrived.len() < self.n - 1 {
            match self.next_inbound(deadline) {
                Ok(Inbound::BarrierToken { from, phase: p }) if p == phase => {
                    arrived.insert(from);
                }
                Ok(Inbound::BarrierToken { from, phase: p }) => {
                    self.barrier_stash.push((from, p));
                }
                Ok(Inbound::Data(msg)) => self.data_stash.insert(0, msg),
                Ok(Inbound::PeerClosed(peer)) => {
                    self.dead_peers.insert(peer);
                }
                Err(_) => {
                    let missing: Vec<u16> = (0..self.n as u16)
                        .filter(|&p| p != self.id && !arrived.contains(&p))
                        .collect();
                    return Err(Error::RoundAbort {
                        round: (phase >> 2) as u32,
                        missing,
                    });
                }
            }
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        for (to, writer) in self.writers.iter_mut().enumerate() {
            if let Some(w) = writer {
                w.flush()
                    .map_err(|e| Error::Transport(format!("flush to agent {to} failed: {e}")))?;
            }
        }
        Ok(())
    }
}

/// Parses an address table file: one `host:port` per line, agent ids in line
/// order, `#` comments allowed.
pub fn parse_address_table(text: &str) -> Result<Vec<SocketAddr>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let addr: SocketAddr = line.parse().map_err(|e| Error::Parse {
            location: format!("address table line {}", i + 1),
            msg: format!("{e}"),
        })?;
        out.push(addr);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::MessageKind;

    fn local_table(n: usize) -> Vec<SocketAddr> {
        // Reserve ports by binding and immediately dropping; raciness is
        // acceptable for loopback tests.
        (0..n)
            .map(|_| {
                let l = TcpListener::bind("127.0.0.1:0").unwrap();
                l.local_addr().unwrap()
            })
            .collect()
    }

    fn build_mesh(n: usize, options: TcpOptions) -> Vec<TcpEndpoint> {
        let table = local_table(n);
        let mut handles = Vec::new();
        for id in 0..n as u16 {
            let table = table.clone();
            let options = options.clone();
            handles.push(thread::spawn(move || {
                connect_mesh(id, &table, options).unwrap()
            }));
        }
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    }

    #[test]
    fn mesh_roundtrip_and_broadcast() {
        let mut eps = build_mesh(3, TcpOptions::default());
        let m = RoundMessage {
            kind: MessageKind::Share,
            sender: 0,
            receiver: Recipient::Agent(2),
            round: 9,
            slot: 4,
            payload: 123456789,
        };
        eps[0].send(m).unwrap();
        eps[0].flush().unwrap();
        assert_eq!(eps[2].recv().unwrap(), m);

        let b = RoundMessage {
            kind: MessageKind::Broadcast,
            sender: 1,
            receiver: Recipient::All,
            round: 9,
            slot: 0,
            payload: 55,
        };
        eps[1].broadcast(b).unwrap();
        eps[1].flush().unwrap();
        assert_eq!(eps[0].recv().unwrap(), b);
        assert_eq!(eps[2].recv().unwrap(), b);
    }

    #[test]
    fn barrier_across_sockets() {
        let eps = build_mesh(3, TcpOptions::default());
        let mut handles = Vec::new();
        for (i, mut ep) in eps.into_iter().enumerate() {
            handles.push(thread::spawn(move || {
                if i == 1 {
                    thread::sleep(Duration::from_millis(30));
                }
                ep.barrier(12).unwrap();
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
    }

    #[test]
    fn barrier_timeout_reports_missing_peer() {
        let mut opts = TcpOptions::default();
        opts.barrier_timeout = Duration::from_millis(100);
        let mut eps = build_mesh(2, opts);
        let _silent = eps.pop().unwrap();
        match eps[0].barrier(4) {
            Err(Error::RoundAbort { round: 1, missing }) => assert_eq!(missing, vec![1]),
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn address_table_parsing() {
        let table = parse_address_table("# fleet\n127.0.0.1:9000\n127.0.0.1:9001\n").unwrap();
        assert_eq!(table.len(), 2);
        assert!(parse_address_table("not-an-addr\n").is_err());
    }
}
