//! The data-provider/customer side of the protocols.
//!
//! A session is stateless in the protocol sense: between operations it
//! holds only the parameter set, the monotone rid counter and a
//! randomness source, never any per-record data. Everything about the
//! stored records lives on the servers.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::time::Instant;

use crate::error::{OdesError, Result};
use crate::index::{OrderIndex, RecordId};
use crate::message::{Ack, AckStatus, RankPredicate, ServerMessage};
use crate::rng::RandomSource;
use crate::sharing::{aggregate_sign, reconstruct, share, MaskParams, ShareVector};
use crate::transport::{ClusterLink, NodeId};

/// One reconstructed record out of a rank query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryResult {
    pub rank: u64,
    pub rid: RecordId,
    pub key: String,
    pub value: i64,
}

/// Client-side encoding cost counters (share generation and
/// reconstruction time), reported by the benchmark harness.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClientStats {
    pub encode_ns: u64,
    pub shares_generated: u64,
}

pub struct ClientSession {
    params: MaskParams,
    next_rid: u64,
    next_query_id: u64,
    rng: Box<dyn RandomSource>,
    pub stats: ClientStats,
}

impl ClientSession {
    pub fn new(params: MaskParams, rng: Box<dyn RandomSource>) -> Self {
        Self {
            params,
            next_rid: 0,
            next_query_id: 0,
            rng,
            stats: ClientStats::default(),
        }
    }

    /// Resumes a session whose rid counter was persisted elsewhere.
    pub fn resume(params: MaskParams, next_rid: u64, rng: Box<dyn RandomSource>) -> Self {
        Self {
            params,
            next_rid,
            next_query_id: 0,
            rng,
            stats: ClientStats::default(),
        }
    }

    pub fn params(&self) -> &MaskParams {
        &self.params
    }

    pub fn next_rid(&self) -> u64 {
        self.next_rid
    }

    /// Canonical serialized session: parameters plus the rid counter.
    /// Its size is fixed no matter how many records are stored, which
    /// is the point of the stateless design.
    pub fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(22);
        out.extend_from_slice(&self.params.plaintext_bound().to_be_bytes());
        out.extend_from_slice(&self.params.mask_bits().to_be_bytes());
        out.extend_from_slice(&(self.params.share_count() as u16).to_be_bytes());
        out.extend_from_slice(&self.next_rid.to_be_bytes());
        out
    }

    fn alloc_rid(&mut self) -> RecordId {
        let rid = RecordId(self.next_rid);
        self.next_rid += 1;
        rid
    }

    fn alloc_query_id(&mut self) -> u64 {
        let id = self.next_query_id;
        self.next_query_id += 1;
        id
    }

    fn make_shares(&mut self, value: i64) -> Result<ShareVector> {
        let start = Instant::now();
        let sv = share(value, &self.params, self.rng.as_mut())?;
        self.stats.encode_ns += start.elapsed().as_nanos() as u64;
        self.stats.shares_generated += 1;
        Ok(sv)
    }

    /// Bulk-loads `records` into empty servers: every value is freshly
    /// shared and distributed, and the rank index is built client-side
    /// (the plaintexts are still at hand here) and broadcast once.
    pub fn init_dataset(
        &mut self,
        link: &mut dyn ClusterLink,
        records: &[(String, i64)],
    ) -> Result<Vec<RecordId>> {
        for (_, value) in records {
            self.params.check_plaintext(*value)?;
        }
        let mut rids = Vec::with_capacity(records.len());
        let mut ranked: Vec<(i64, RecordId)> = Vec::with_capacity(records.len());
        for (key, value) in records {
            let rid = self.alloc_rid();
            let sv = self.make_shares(*value)?;
            for (j, &share) in sv.shares().iter().enumerate() {
                link.send(
                    j as NodeId,
                    &ServerMessage::StoreShare {
                        rid,
                        key: key.clone(),
                        share,
                    },
                )?;
            }
            // insertion sort by value, ties land after existing equals
            let rank = ranked.partition_point(|&(v, _)| v <= *value);
            ranked.insert(rank, (*value, rid));
            rids.push(rid);
        }
        let index = OrderIndex::from_ranked(ranked.into_iter().map(|(_, r)| r).collect())?;
        link.broadcast(&ServerMessage::IndexSnapshot {
            index: index.to_bytes(),
        })?;
        let replies = link.exchange()?;
        let acks = expect_acks(replies)?;
        for ack in &acks {
            if ack.rank != records.len() as u64 {
                return Err(OdesError::ReplicaDivergence(format!(
                    "server acknowledged {} records, expected {}",
                    ack.rank,
                    records.len()
                )));
            }
        }
        Ok(rids)
    }

    /// Inserts one record through the server-side lockstep search;
    /// returns the rid and the rank the replicas agreed on.
    pub fn insert_record(
        &mut self,
        link: &mut dyn ClusterLink,
        key: &str,
        value: i64,
    ) -> Result<(RecordId, u64)> {
        self.params.check_plaintext(value)?;
        let rid = self.alloc_rid();
        let sv = self.make_shares(value)?;
        for (j, &share) in sv.shares().iter().enumerate() {
            link.send(
                j as NodeId,
                &ServerMessage::BeginInsert {
                    rid,
                    key: key.into(),
                    share,
                },
            )?;
        }
        let acks = expect_acks(link.exchange()?)?;
        let rank = acks[0].rank;
        if acks.iter().any(|a| a.rank != rank || a.rid != rid) {
            return Err(OdesError::ReplicaDivergence(
                "servers disagree on the inserted rank".into(),
            ));
        }
        Ok((rid, rank))
    }

    /// Runs a rank-predicate query and reconstructs the results; rows
    /// are aligned across servers by rid and must agree exactly.
    pub fn query_ranks(
        &mut self,
        link: &mut dyn ClusterLink,
        predicate: RankPredicate,
    ) -> Result<Vec<QueryResult>> {
        predicate.validate()?;
        let query_id = self.alloc_query_id();
        link.broadcast(&ServerMessage::QueryRequest {
            query_id,
            predicate,
        })?;
        let replies = link.exchange()?;

        let mut per_server: Vec<Vec<crate::message::QueryRow>> = Vec::with_capacity(replies.len());
        for (id, reply) in replies.into_iter().enumerate() {
            match reply {
                ServerMessage::QueryResponse {
                    query_id: qid,
                    rows,
                } if qid == query_id => per_server.push(rows),
                other => {
                    return Err(OdesError::Protocol(format!(
                        "server {id} answered a query with {other:?}"
                    )))
                }
            }
        }
        let first = &per_server[0];
        // rid-keyed join; positional agreement double-checked below
        let mut joined: BTreeMap<RecordId, (u64, String, Vec<i128>)> = first
            .iter()
            .map(|row| (row.rid, (row.rank, row.key.clone(), vec![row.share])))
            .collect();
        if joined.len() != first.len() {
            return Err(OdesError::IncompleteResponses(
                "duplicate rid in response".into(),
            ));
        }
        for (id, rows) in per_server.iter().enumerate().skip(1) {
            if rows.len() != first.len() {
                return Err(OdesError::IncompleteResponses(format!(
                    "server {id} returned {} rows, server 0 returned {}",
                    rows.len(),
                    first.len()
                )));
            }
            for (pos, row) in rows.iter().enumerate() {
                let entry = joined.get_mut(&row.rid).ok_or_else(|| {
                    OdesError::IncompleteResponses(format!(
                        "server {id} returned rid {} unknown to server 0",
                        row.rid
                    ))
                })?;
                if entry.0 != row.rank || entry.1 != row.key || first[pos].rid != row.rid {
                    return Err(OdesError::IncompleteResponses(format!(
                        "server {id} disagrees on rank/key for rid {}",
                        row.rid
                    )));
                }
                entry.2.push(row.share);
            }
        }

        let start = Instant::now();
        let mut results: Vec<QueryResult> = joined
            .into_iter()
            .map(|(rid, (rank, key, shares))| {
                let value = reconstruct(&self.params, &ShareVector::from_shares(shares))?;
                Ok(QueryResult {
                    rank,
                    rid,
                    key,
                    value,
                })
            })
            .collect::<Result<_>>()?;
        self.stats.encode_ns += start.elapsed().as_nanos() as u64;
        results.sort_by_key(|r| r.rank);
        Ok(results)
    }

    /// Compares a fresh value against the record at `target_rank`
    /// without touching any server state: each server answers with its
    /// local delta and the signs are aggregated here.
    pub fn compare_ephemeral(
        &mut self,
        link: &mut dyn ClusterLink,
        value: i64,
        target_rank: u64,
    ) -> Result<Ordering> {
        self.params.check_plaintext(value)?;
        let query_id = self.alloc_query_id();
        let sv = self.make_shares(value)?;
        for (j, &share) in sv.shares().iter().enumerate() {
            link.send(
                j as NodeId,
                &ServerMessage::CompareRequest {
                    query_id,
                    target_rank,
                    share,
                },
            )?;
        }
        let replies = link.exchange()?;
        let mut deltas = Vec::with_capacity(replies.len());
        for reply in replies {
            match reply {
                ServerMessage::DeltaBroadcast(d) if d.round == query_id => deltas.push(d),
                ServerMessage::Ack(ack) if ack.status == AckStatus::RankOutOfBounds => {
                    return Err(OdesError::RankOutOfBounds {
                        rank: target_rank,
                        len: 0,
                    })
                }
                other => {
                    return Err(OdesError::Protocol(format!(
                        "unexpected comparison reply {other:?}"
                    )))
                }
            }
        }
        aggregate_sign(&self.params, &deltas)
    }

    pub fn delete_record(&mut self, link: &mut dyn ClusterLink, rid: RecordId) -> Result<()> {
        self.delete_returning_key(link, rid).map(|_| ())
    }

    fn delete_returning_key(
        &mut self,
        link: &mut dyn ClusterLink,
        rid: RecordId,
    ) -> Result<String> {
        link.broadcast(&ServerMessage::DeleteRecord { rid })?;
        let acks = expect_acks(link.exchange()?)?;
        let key = acks[0].key.clone();
        if acks.iter().any(|a| a.rank != acks[0].rank || a.key != key) {
            return Err(OdesError::ReplicaDivergence(
                "servers disagree on deleted record".into(),
            ));
        }
        Ok(key)
    }

    /// Modification is deletion followed by insertion of the new value
    /// under the same key; returns the fresh rid and its rank.
    pub fn modify_record(
        &mut self,
        link: &mut dyn ClusterLink,
        rid: RecordId,
        new_value: i64,
    ) -> Result<(RecordId, u64)> {
        self.params.check_plaintext(new_value)?;
        let key = self.delete_returning_key(link, rid)?;
        self.insert_record(link, &key, new_value)
    }
}

/// Every reply must be an `Ok` ack; protocol-level refusals map back to
/// their error.
fn expect_acks(replies: Vec<ServerMessage>) -> Result<Vec<Ack>> {
    let mut acks = Vec::with_capacity(replies.len());
    for reply in replies {
        match reply {
            ServerMessage::Ack(ack) => match ack.status {
                AckStatus::Ok => acks.push(ack),
                AckStatus::DuplicateRid => return Err(OdesError::DuplicateRid(ack.rid.0)),
                AckStatus::UnknownRid => return Err(OdesError::UnknownRid(ack.rid.0)),
                AckStatus::RankOutOfBounds => {
                    return Err(OdesError::RankOutOfBounds {
                        rank: ack.rank,
                        len: 0,
                    })
                }
                AckStatus::Rejected => {
                    return Err(OdesError::Protocol("server rejected the operation".into()))
                }
            },
            other => {
                return Err(OdesError::Protocol(format!(
                    "expected an ack, got {other:?}"
                )))
            }
        }
    }
    Ok(acks)
}
