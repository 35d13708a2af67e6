//! Message fabric: a deterministic in-process simulator and a TCP
//! implementation share the same client-facing contract, so any
//! protocol exercised on one must behave identically on the other.

pub mod sim;
pub mod tcp;

use std::collections::BTreeMap;

use crate::error::{OdesError, Result};
use crate::message::ServerMessage;
use crate::sharing::Delta;

pub type NodeId = u16;

/// Sender id used by the client; server ids are `0..m`.
pub const CLIENT_NODE_ID: NodeId = 0xFFFF;
/// Recipient id meaning "every server".
pub const BROADCAST_NODE_ID: NodeId = 0xFFFE;

/// One routed message in the simulator; `seq` is a strictly increasing
/// per-cluster counter so transcripts are totally ordered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub sender: NodeId,
    pub recipient: NodeId,
    pub seq: u64,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn message(&self) -> Result<ServerMessage> {
        ServerMessage::decode(&self.payload)
    }

    /// Canonical byte form used when hashing whole transcripts.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.payload.len());
        out.extend_from_slice(&self.sender.to_be_bytes());
        out.extend_from_slice(&self.recipient.to_be_bytes());
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }
}

/// What the client needs from either fabric: targeted sends, broadcast,
/// and an exchange that flushes pending traffic and returns exactly one
/// client-addressed reply per server (indexed by server id).
pub trait ClusterLink {
    fn server_count(&self) -> usize;

    fn send(&mut self, to: NodeId, msg: &ServerMessage) -> Result<()>;

    fn broadcast(&mut self, msg: &ServerMessage) -> Result<()> {
        for id in 0..self.server_count() as NodeId {
            self.send(id, msg)?;
        }
        Ok(())
    }

    /// Drives delivery until every server has produced one reply, or
    /// fails with `ProtocolTimeout` when one stays silent.
    fn exchange(&mut self) -> Result<Vec<ServerMessage>>;

    /// Messages moved through the fabric so far (protocol accounting).
    fn messages_total(&self) -> u64;
}

/// Buffers deltas per round until a round holds one delta from every
/// server. Rounds are globally unique and monotone, so deltas arriving
/// for a future round simply wait their turn.
#[derive(Debug, Default)]
pub struct DeltaCollector {
    expected: usize,
    rounds: BTreeMap<u64, BTreeMap<u16, Delta>>,
}

impl DeltaCollector {
    pub fn new(expected: usize) -> Self {
        Self {
            expected,
            rounds: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, delta: Delta) -> Result<()> {
        let slot = self.rounds.entry(delta.round).or_default();
        if slot.insert(delta.server_id, delta).is_some() {
            return Err(OdesError::Protocol(format!(
                "duplicate delta from server {} in round {}",
                delta.server_id, delta.round
            )));
        }
        Ok(())
    }

    pub fn have(&self, round: u64) -> usize {
        self.rounds.get(&round).map_or(0, BTreeMap::len)
    }

    /// Removes and returns the round's deltas once all are present.
    pub fn try_take(&mut self, round: u64) -> Option<Vec<Delta>> {
        if self.have(round) == self.expected {
            let slot = self.rounds.remove(&round).unwrap();
            Some(slot.into_values().collect())
        } else {
            None
        }
    }

    /// Error describing an incomplete round, for timeout reporting.
    pub fn incomplete(&self, round: u64) -> OdesError {
        OdesError::IncompleteRound {
            round,
            have: self.have(round),
            want: self.expected,
        }
    }

    pub fn pending_rounds(&self) -> usize {
        self.rounds.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta(server_id: u16, round: u64, value: i128) -> Delta {
        Delta {
            server_id,
            round,
            value,
        }
    }

    #[test]
    fn collects_a_full_round() {
        let mut c = DeltaCollector::new(3);
        c.insert(delta(0, 5, 1)).unwrap();
        c.insert(delta(2, 5, 3)).unwrap();
        assert!(c.try_take(5).is_none());
        c.insert(delta(1, 5, 2)).unwrap();
        let got = c.try_take(5).unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(c.pending_rounds(), 0);
    }

    #[test]
    fn interleaved_rounds_stay_separate() {
        let mut c = DeltaCollector::new(2);
        c.insert(delta(0, 8, 10)).unwrap();
        c.insert(delta(1, 9, 99)).unwrap();
        c.insert(delta(1, 8, 20)).unwrap();
        c.insert(delta(0, 9, 88)).unwrap();
        let r8 = c.try_take(8).unwrap();
        assert!(r8.iter().all(|d| d.round == 8));
        let r9 = c.try_take(9).unwrap();
        assert!(r9.iter().all(|d| d.round == 9));
    }

    #[test]
    fn duplicate_delta_is_rejected() {
        let mut c = DeltaCollector::new(2);
        c.insert(delta(0, 1, 7)).unwrap();
        assert!(c.insert(delta(0, 1, 7)).is_err());
    }

    #[test]
    fn incomplete_error_reports_counts() {
        let mut c = DeltaCollector::new(4);
        c.insert(delta(0, 3, 0)).unwrap();
        match c.incomplete(3) {
            OdesError::IncompleteRound {
                round: 3,
                have: 1,
                want: 4,
            } => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
