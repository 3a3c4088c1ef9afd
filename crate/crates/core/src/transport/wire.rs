//! Bit-exact envelope encoding shared by both transports and documented in
//! protocol.md.
//!
//! Layout (19 bytes, all multi-byte fields little-endian):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 1    | kind: 1 = share, 2 = broadcast |
//! | 1      | 2    | sender id                      |
//! | 3      | 2    | receiver id, 0xFFFF = ALL      |
//! | 5      | 4    | round (iteration index)        |
//! | 9      | 2    | slot (time index)              |
//! | 11     | 8    | payload (field residue)        |
//!
//! The TCP transport prefixes each envelope with a 4-byte little-endian
//! length. Kind byte 0xB0 marks a transport-internal barrier token (payload
//! carries the phase id); barrier tokens are not protocol messages and are
//! invisible to taps.

use crate::transport::{MessageKind, Recipient, RoundMessage, ALL_RECEIVER};
use crate::{Error, Result};

pub const ENVELOPE_LEN: usize = 19;

pub(crate) const KIND_SHARE: u8 = 1;
pub(crate) const KIND_BROADCAST: u8 = 2;
pub(crate) const KIND_BARRIER: u8 = 0xB0;

pub fn encode_envelope(msg: &RoundMessage) -> [u8; ENVELOPE_LEN] {
    let kind = match msg.kind {
        MessageKind::Share => KIND_SHARE,
        MessageKind::Broadcast => KIND_BROADCAST,
    };
    encode_raw(kind, msg.sender, msg.receiver.wire_id(), msg.round, msg.slot, msg.payload)
}

pub fn decode_envelope(bytes: &[u8]) -> Result<RoundMessage> {
    let (kind, sender, receiver, round, slot, payload) = decode_raw(bytes)?;
    let kind = match kind {
        KIND_SHARE => MessageKind::Share,
        KIND_BROADCAST => MessageKind::Broadcast,
        other => {
            return Err(Error::Transport(format!(
                "unknown message kind byte 0x{other:02x}"
            )))
        }
    };
    let receiver = if receiver == ALL_RECEIVER {
        Recipient::All
    } else {
        Recipient::Agent(receiver)
    };
    Ok(RoundMessage {
        kind,
        sender,
        receiver,
        round,
        slot,
        payload,
    })
}

pub(crate) fn encode_raw(
    kind: u8,
    sender: u16,
    receiver: u16,
    round: u32,
    slot: u16,
    payload: u64,
) -> [u8; ENVELOPE_LEN] {
    let mut out = [0u8; ENVELOPE_LEN];
    out[0] = kind;
    out[1..3].copy_from_slice(&sender.to_le_bytes());
    out[3..5].copy_from_slice(&receiver.to_le_bytes());
    out[5..9].copy_from_slice(&round.to_le_bytes());
    out[9..11].copy_from_slice(&slot.to_le_bytes());
    out[11..19].copy_from_slice(&payload.to_le_bytes());
    out
}

pub(crate) fn decode_raw(bytes: &[u8]) -> Result<(u8, u16, u16, u32, u16, u64)> {
    if bytes.len() != ENVELOPE_LEN {
        return Err(Error::Transport(format!(
            "envelope must be {ENVELOPE_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    Ok((
        bytes[0],
        u16::from_le_bytes([bytes[1], bytes[2]]),
        u16::from_le_bytes([bytes[3], bytes[4]]),
        u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]),
        u16::from_le_bytes([bytes[9], bytes[10]]),
        u64::from_le_bytes([
            bytes[11], bytes[12], bytes[13], bytes[14], bytes[15], bytes[16], bytes[17],
            bytes[18],
        ]),
    ))
}
