//! Pluggable message fabric for the aggregation protocol.
//!
//! Two implementations of the same [`Transport`] contract: an in-process
//! channel bus for deterministic simulation and tests, and a TCP full mesh
//! for multi-process runs. Channels are reliable and ordered per
//! sender/receiver pair; nothing is dropped or duplicated.
//!
//! Adversary taps attach to the fabric as passive observers: they see copies
//! of messages at send time and can never alter content, ordering, or timing
//! visible to agents.

mod inproc;
mod tcp;
mod wire;

pub use inproc::{InProcBus, InProcBusOptions, InProcEndpoint};
pub use tcp::{connect_mesh, connect_mesh_with_listener, parse_address_table, TcpEndpoint, TcpOptions};
pub use wire::{decode_envelope, encode_envelope, ENVELOPE_LEN};

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use crate::Result;

/// Wire id marking a broadcast receiver.
pub const ALL_RECEIVER: u16 = 0xFFFF;

/// What a message is carrying.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    /// One polynomial evaluation, addressed to a single agent.
    Share,
    /// An agent's share-sum, addressed to everyone.
    Broadcast,
}

/// Message destination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Recipient {
    Agent(u16),
    All,
}

impl Recipient {
    pub fn wire_id(self) -> u16 {
        match self {
            Recipient::Agent(id) => id,
            Recipient::All => ALL_RECEIVER,
        }
    }
}

/// The envelope every protocol message travels in. The payload is a field
/// residue; node values (the α's) are deliberately not representable here —
/// they never leave agent-local configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RoundMessage {
    pub kind: MessageKind,
    pub sender: u16,
    pub receiver: Recipient,
    pub round: u32,
    pub slot: u16,
    pub payload: u64,
}

impl RoundMessage {
    /// Canonical ordering key: transcripts sorted by it are reproducible
    /// regardless of thread interleaving.
    pub fn canonical_key(&self) -> (u32, u8, u16, u16, u16) {
        let kind = match self.kind {
            MessageKind::Share => 0u8,
            MessageKind::Broadcast => 1u8,
        };
        (self.round, kind, self.slot, self.sender, self.receiver.wire_id())
    }
}

/// Sorts a captured log into canonical transcript order.
pub fn canonicalize(messages: &mut [RoundMessage]) {
    messages.sort_by_key(|m| m.canonical_key());
}

/// What a registered tap is allowed to observe.
#[derive(Debug, Clone)]
pub enum TapKind {
    /// Wiretap on every channel.
    Eavesdropper,
    /// A coalition member's view: traffic touching the coalition, plus all
    /// broadcasts.
    Insider(BTreeSet<u16>),
    /// Narrow sampler for result files: one slot, a fixed set of senders.
    SlotSampler { slot: u16, senders: BTreeSet<u16> },
}

impl TapKind {
    fn observes(&self, msg: &RoundMessage) -> bool {
        match self {
            TapKind::Eavesdropper => true,
            TapKind::Insider(coalition) => {
                coalition.contains(&msg.sender)
                    || msg.receiver == Recipient::All
                    || matches!(msg.receiver, Recipient::Agent(id) if coalition.contains(&id))
            }
            TapKind::SlotSampler { slot, senders } => {
                msg.slot == *slot && senders.contains(&msg.sender)
            }
        }
    }
}

/// A passive observer registered on a fabric. Append-only; readers receive a
/// canonically sorted snapshot.
#[derive(Clone)]
pub struct Tap {
    kind: TapKind,
    log: Arc<Mutex<Vec<RoundMessage>>>,
}

impl Tap {
    pub fn new(kind: TapKind) -> Self {
        Tap {
            kind,
            log: Arc::new(Mutex::new(Vec::new())),
        }
    }

    pub fn kind(&self) -> &TapKind {
        &self.kind
    }

    pub(crate) fn observe(&self, msg: &RoundMessage) {
        if self.kind.observes(msg) {
            self.log.lock().expect("tap log poisoned").push(*msg);
        }
    }

    /// Canonically ordered copy of everything captured so far.
    pub fn snapshot(&self) -> Vec<RoundMessage> {
        let mut out = self.log.lock().expect("tap log poisoned").clone();
        canonicalize(&mut out);
        out
    }
}

/// The per-agent endpoint contract the protocol runs against.
///
/// `send`/`broadcast` enqueue without blocking on the receiver. `recv`
/// blocks until a message or the endpoint's configured timeout. `barrier`
/// blocks until all n agents have entered the same phase; a timeout names
/// the agents that never arrived. `flush` pushes any buffered writes out
/// (a no-op on the in-process bus).
pub trait Transport: Send {
    fn agent_id(&self) -> u16;
    fn agent_count(&self) -> usize;
    fn send(&mut self, msg: RoundMessage) -> Result<()>;
    fn broadcast(&mut self, msg: RoundMessage) -> Result<()>;
    fn recv(&mut self) -> Result<RoundMessage>;
    fn barrier(&mut self, phase: u64) -> Result<()>;
    fn flush(&mut self) -> Result<()>;
}
