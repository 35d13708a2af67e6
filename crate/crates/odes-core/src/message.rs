//! Protocol messages and their binary encoding.
//!
//! The same byte layout is used as the payload of simulated envelopes
//! and as the body of TCP frames: one type byte followed by
//! type-specific fields, every integer big-endian, shares as 16-byte
//! two's-complement.

use crate::error::{OdesError, Result};
use crate::index::RecordId;
use crate::sharing::Delta;

pub const MSG_STORE_SHARE: u8 = 0x01;
pub const MSG_BEGIN_INSERT: u8 = 0x02;
pub const MSG_DELTA_BROADCAST: u8 = 0x03;
pub const MSG_QUERY_REQUEST: u8 = 0x04;
pub const MSG_QUERY_RESPONSE: u8 = 0x05;
pub const MSG_DELETE_RECORD: u8 = 0x06;
pub const MSG_INDEX_SNAPSHOT: u8 = 0x07;
pub const MSG_ACK: u8 = 0x08;
pub const MSG_COMPARE_REQUEST: u8 = 0x09;

/// Order predicate resolved against ranks, never against values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankPredicate {
    All,
    RangeByRank { lo: u64, hi: u64 },
    TopK(u64),
    BottomK(u64),
}

impl RankPredicate {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RankPredicate::RangeByRank { lo, hi } if lo > hi => Err(OdesError::Config(format!(
                "rank range lo {lo} exceeds hi {hi}"
            ))),
            RankPredicate::TopK(0) | RankPredicate::BottomK(0) => {
                Err(OdesError::Config("k must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Half-open rank interval selected out of `n` live records.
    pub fn resolve(&self, n: u64) -> (u64, u64) {
        match *self {
            RankPredicate::All => (0, n),
            RankPredicate::RangeByRank { lo, hi } => {
                if lo >= n {
                    (0, 0)
                } else {
                    (lo, hi.saturating_add(1).min(n))
                }
            }
            RankPredicate::TopK(k) => (n - k.min(n), n),
            RankPredicate::BottomK(k) => (0, k.min(n)),
        }
    }
}

/// One qualifying record in a query response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryRow {
    pub rank: u64,
    pub rid: RecordId,
    pub key: String,
    pub share: i128,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum AckStatus {
    Ok = 0,
    DuplicateRid = 1,
    UnknownRid = 2,
    RankOutOfBounds = 3,
    Rejected = 4,
}

impl AckStatus {
    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => AckStatus::Ok,
            1 => AckStatus::DuplicateRid,
            2 => AckStatus::UnknownRid,
            3 => AckStatus::RankOutOfBounds,
            4 => AckStatus::Rejected,
            other => {
                return Err(OdesError::MalformedMessage(format!(
                    "bad ack status {other}"
                )))
            }
        })
    }
}

/// Operation acknowledgement addressed to the client. `rank` carries
/// the assigned (insert) or vacated (delete) position; delete acks also
/// return the removed record's key so a stateless client can re-insert
/// it during modification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ack {
    pub status: AckStatus,
    pub rid: RecordId,
    pub rank: u64,
    pub key: String,
}

impl Ack {
    pub fn ok(rid: RecordId, rank: u64) -> Self {
        Self {
            status: AckStatus::Ok,
            rid,
            rank,
            key: String::new(),
        }
    }

    pub fn error(status: AckStatus, rid: RecordId) -> Self {
        Self {
            status,
            rid,
            rank: 0,
            key: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServerMessage {
    /// Unconditional share store; ordering is handled separately.
    StoreShare {
        rid: RecordId,
        key: String,
        share: i128,
    },
    /// Starts the lockstep binary search for the new record's rank.
    BeginInsert {
        rid: RecordId,
        key: String,
        share: i128,
    },
    /// The only inter-server message; carries one share difference.
    DeltaBroadcast(Delta),
    QueryRequest {
        query_id: u64,
        predicate: RankPredicate,
    },
    QueryResponse {
        query_id: u64,
        rows: Vec<QueryRow>,
    },
    DeleteRecord {
        rid: RecordId,
    },
    /// Client-built index broadcast at the end of initialization.
    IndexSnapshot {
        index: Vec<u8>,
    },
    Ack(Ack),
    /// One comparison round against the record at `target_rank`; the
    /// server answers the client with its local delta and stays
    /// otherwise untouched.
    CompareRequest {
        query_id: u64,
        target_rank: u64,
        share: i128,
    },
}

impl ServerMessage {
    pub fn type_byte(&self) -> u8 {
        match self {
            ServerMessage::StoreShare { .. } => MSG_STORE_SHARE,
            ServerMessage::BeginInsert { .. } => MSG_BEGIN_INSERT,
            ServerMessage::DeltaBroadcast(_) => MSG_DELTA_BROADCAST,
            ServerMessage::QueryRequest { .. } => MSG_QUERY_REQUEST,
            ServerMessage::QueryResponse { .. } => MSG_QUERY_RESPONSE,
            ServerMessage::DeleteRecord { .. } => MSG_DELETE_RECORD,
            ServerMessage::IndexSnapshot { .. } => MSG_INDEX_SNAPSHOT,
            ServerMessage::Ack(_) => MSG_ACK,
            ServerMessage::CompareRequest { .. } => MSG_COMPARE_REQUEST,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![self.type_byte()];
        match self {
            ServerMessage::StoreShare { rid, key, share }
            | ServerMessage::BeginInsert { rid, key, share } => {
                put_u64(&mut out, rid.0);
                put_i128(&mut out, *share);
                put_str(&mut out, key);
            }
            ServerMessage::DeltaBroadcast(d) => {
                out.extend_from_slice(&d.server_id.to_be_bytes());
                put_u64(&mut out, d.round);
                put_i128(&mut out, d.value);
            }
            ServerMessage::QueryRequest {
                query_id,
                predicate,
            } => {
                put_u64(&mut out, *query_id);
                match *predicate {
                    RankPredicate::All => out.push(0),
                    RankPredicate::RangeByRank { lo, hi } => {
                        out.push(1);
                        put_u64(&mut out, lo);
                        put_u64(&mut out, hi);
                    }
                    RankPredicate::TopK(k) => {
                        out.push(2);
                        put_u64(&mut out, k);
                    }
                    RankPredicate::BottomK(k) => {
                        out.push(3);
                        put_u64(&mut out, k);
                    }
                }
            }
            ServerMessage::QueryResponse { query_id, rows } => {
                put_u64(&mut out, *query_id);
                out.extend_from_slice(&(rows.len() as u32).to_be_bytes());
                for row in rows {
                    put_u64(&mut out, row.rank);
                    put_u64(&mut out, row.rid.0);
                    put_i128(&mut out, row.share);
                    put_str(&mut out, &row.key);
                }
            }
            ServerMessage::DeleteRecord { rid } => put_u64(&mut out, rid.0),
            ServerMessage::IndexSnapshot { index } => out.extend_from_slice(index),
            ServerMessage::Ack(ack) => {
                out.push(ack.status as u8);
                put_u64(&mut out, ack.rid.0);
                put_u64(&mut out, ack.rank);
                put_str(&mut out, &ack.key);
            }
            ServerMessage::CompareRequest {
                query_id,
                target_rank,
                share,
            } => {
                put_u64(&mut out, *query_id);
                put_u64(&mut out, *target_rank);
                put_i128(&mut out, *share);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let ty = r.u8()?;
        let msg = match ty {
            MSG_STORE_SHARE | MSG_BEGIN_INSERT => {
                let rid = RecordId(r.u64()?);
                let share = r.i128()?;
                let key = r.str()?;
                if ty == MSG_STORE_SHARE {
                    ServerMessage::StoreShare { rid, key, share }
                } else {
                    ServerMessage::BeginInsert { rid, key, share }
                }
            }
            MSG_DELTA_BROADCAST => {
                let server_id = r.u16()?;
                let round = r.u64()?;
                let value = r.i128()?;
                ServerMessage::DeltaBroadcast(Delta {
                    server_id,
                    round,
                    value,
                })
            }
            MSG_QUERY_REQUEST => {
                let query_id = r.u64()?;
                let predicate = match r.u8()? {
                    0 => RankPredicate::All,
                    1 => RankPredicate::RangeByRank {
                        lo: r.u64()?,
                        hi: r.u64()?,
                    },
                    2 => RankPredicate::TopK(r.u64()?),
                    3 => RankPredicate::BottomK(r.u64()?),
                    other => {
                        return Err(OdesError::MalformedMessage(format!(
                            "bad predicate kind {other}"
                        )))
                    }
                };
                ServerMessage::QueryRequest {
                    query_id,
                    predicate,
                }
            }
            MSG_QUERY_RESPONSE => {
                let query_id = r.u64()?;
                let count = r.u32()? as usize;
                let mut rows = Vec::with_capacity(count.min(1 << 20));
                for _ in 0..count {
                    let rank = r.u64()?;
                    let rid = RecordId(r.u64()?);
                    let share = r.i128()?;
                    let key = r.str()?;
                    rows.push(QueryRow {
                        rank,
                        rid,
                        key,
                        share,
                    });
                }
                ServerMessage::QueryResponse { query_id, rows }
            }
            MSG_DELETE_RECORD => ServerMessage::DeleteRecord {
                rid: RecordId(r.u64()?),
            },
            MSG_INDEX_SNAPSHOT => ServerMessage::IndexSnapshot {
                index: r.rest().to_vec(),
            },
            MSG_ACK => {
                let status = AckStatus::from_byte(r.u8()?)?;
                let rid = RecordId(r.u64()?);
                let rank = r.u64()?;
                let key = r.str()?;
                ServerMessage::Ack(Ack {
                    status,
                    rid,
                    rank,
                    key,
                })
            }
            MSG_COMPARE_REQUEST => ServerMessage::CompareRequest {
                query_id: r.u64()?,
                target_rank: r.u64()?,
                share: r.i128()?,
            },
            other => {
                return Err(OdesError::MalformedMessage(format!(
                    "unknown type 0x{other:02x}"
                )))
            }
        };
        if !matches!(msg, ServerMessage::IndexSnapshot { .. }) {
            r.finish()?;
        }
        Ok(msg)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_i128(out: &mut Vec<u8>, v: i128) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    let bytes = s.as_bytes();
    debug_assert!(bytes.len() <= u16::MAX as usize);
    out.extend_from_slice(&(bytes.len() as u16).to_be_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| OdesError::MalformedMessage("truncated message".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i128(&mut self) -> Result<i128> {
        Ok(i128::from_be_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| OdesError::MalformedMessage("key is not utf-8".into()))
    }

    fn rest(&mut self) -> &'a [u8] {
        let out = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        out
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(OdesError::MalformedMessage("trailing bytes".into()))
        }
    }
}
