//! One non-colluding share server.
//!
//! A server stores its column of shares plus the replicated rank index,
//! takes part in lockstep binary-search rounds by broadcasting deltas,
//! answers rank-predicate queries, and never sends a raw share to
//! another server. All replicas process the same message rounds, so
//! their index replicas (and search trajectories) stay byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{OdesError, Result};
use crate::index::{OrderIndex, RecordId};
use crate::message::{Ack, AckStatus, QueryRow, RankPredicate, ServerMessage};
use crate::sharing::{aggregate_sign, local_delta, Delta, MaskParams};
use crate::transport::DeltaCollector;

pub const SHARES_MAGIC: &[u8; 4] = b"ODSS";
pub const KEYS_MAGIC: &[u8; 4] = b"ODSK";
pub const RETIRED_MAGIC: &[u8; 4] = b"ODSR";
pub const STATE_VERSION: u8 = 0x01;

pub const SHARES_FILE: &str = "shares.odss";
pub const KEYS_FILE: &str = "keys.odsk";
pub const INDEX_FILE: &str = "index.odsi";
pub const RETIRED_FILE: &str = "retired.odsr";
pub const META_FILE: &str = "meta.toml";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredRecord {
    pub key: String,
    pub share: i128,
}

/// Everything one server holds. Shares never leave this struct except
/// inside query responses addressed to the client.
#[derive(Debug, Clone)]
pub struct ServerState {
    server_id: u16,
    params: MaskParams,
    share_table: BTreeMap<RecordId, StoredRecord>,
    index: OrderIndex,
    /// Rids seen and since deleted; re-storing them is refused so ids
    /// are never reused.
    retired: BTreeSet<RecordId>,
    /// Number of delta rounds consumed over the server's lifetime; also
    /// the id the next round will carry. Identical across replicas.
    round_counter: u64,
}

impl ServerState {
    pub fn new(server_id: u16, params: MaskParams) -> Self {
        Self {
            server_id,
            params,
            share_table: BTreeMap::new(),
            index: OrderIndex::new(),
            retired: BTreeSet::new(),
            round_counter: 0,
        }
    }

    pub fn server_id(&self) -> u16 {
        self.server_id
    }

    pub fn params(&self) -> &MaskParams {
        &self.params
    }

    pub fn record_count(&self) -> u64 {
        self.share_table.len() as u64
    }

    pub fn round_counter(&self) -> u64 {
        self.round_counter
    }

    pub fn index(&self) -> &OrderIndex {
        &self.index
    }

    pub fn share_of(&self, rid: RecordId) -> Option<i128> {
        self.share_table.get(&rid).map(|r| r.share)
    }

    /// All stored share values; used by leak-scanning tests.
    pub fn stored_shares(&self) -> impl Iterator<Item = i128> + '_ {
        self.share_table.values().map(|r| r.share)
    }

    /// Stores a share under a fresh rid. The index is untouched;
    /// ordering is the insert protocol's job.
    pub fn store(&mut self, rid: RecordId, key: String, share: i128) -> Result<()> {
        if self.share_table.contains_key(&rid) || self.retired.contains(&rid) {
            return Err(OdesError::DuplicateRid(rid.0));
        }
        self.share_table.insert(rid, StoredRecord { key, share });
        Ok(())
    }

    /// Removes the record and its rank; returns the vacated rank and
    /// the record's key.
    pub fn delete(&mut self, rid: RecordId) -> Result<(u64, String)> {
        if !self.share_table.contains_key(&rid) {
            return Err(OdesError::UnknownRid(rid.0));
        }
        let rank = self.index.remove(rid)?;
        let record = self.share_table.remove(&rid).unwrap();
        self.retired.insert(rid);
        Ok((rank, record.key))
    }

    /// Rows qualifying under the predicate, ascending by rank.
    pub fn query(&self, predicate: RankPredicate) -> Vec<QueryRow> {
        let (start, end) = predicate.resolve(self.index.len());
        (start..end)
            .map(|rank| {
                let rid = self.index.lookup(rank).expect("rank resolved in range");
                let record = self.share_table.get(&rid).expect("index rid has a share");
                QueryRow {
                    rank,
                    rid,
                    key: record.key.clone(),
                    share: record.share,
                }
            })
            .collect()
    }

    /// Replaces the index replica with a client-built snapshot; the rid
    /// set must match the stored shares exactly.
    pub fn apply_index_snapshot(&mut self, bytes: &[u8]) -> Result<()> {
        let index = OrderIndex::from_bytes(bytes)?;
        let snapshot: BTreeSet<RecordId> = index.as_slice().iter().copied().collect();
        let stored: BTreeSet<RecordId> = self.share_table.keys().copied().collect();
        if snapshot != stored {
            return Err(OdesError::Protocol(
                "index snapshot names a different rid set than the share table".into(),
            ));
        }
        self.index = index;
        Ok(())
    }

    /// Hash over the bit-exact serialized state (shares, keys, index);
    /// replicas and cross-transport runs compare these.
    pub fn state_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.shares_to_bytes());
        hasher.update(self.keys_to_bytes());
        hasher.update(self.index.to_bytes());
        hasher.finalize().into()
    }

    /// Bytes this server's share table and index occupy on disk.
    pub fn storage_bytes(&self) -> u64 {
        (self.shares_to_bytes().len() + self.index.to_bytes().len()) as u64
    }

    fn shares_to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + self.share_table.len() * 24);
        out.extend_from_slice(SHARES_MAGIC);
        out.push(STATE_VERSION);
        out.extend_from_slice(&(self.share_table.len() as u64).to_be_bytes());
        for (rid, record) in &self.share_table {
            out.extend_from_slice(&rid.0.to_be_bytes());
            out.extend_from_slice(&record.share.to_be_bytes());
        }
        out
    }

    fn keys_to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(KEYS_MAGIC);
        out.push(STATE_VERSION);
        out.extend_from_slice(&(self.share_table.len() as u64).to_be_bytes());
        for (rid, record) in &self.share_table {
            out.extend_from_slice(&rid.0.to_be_bytes());
            let key = record.key.as_bytes();
            out.extend_from_slice(&(key.len() as u16).to_be_bytes());
            out.extend_from_slice(key);
        }
        out
    }

    fn retired_to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + self.retired.len() * 8);
        out.extend_from_slice(RETIRED_MAGIC);
        out.push(STATE_VERSION);
        out.extend_from_slice(&(self.retired.len() as u64).to_be_bytes());
        for rid in &self.retired {
            out.extend_from_slice(&rid.0.to_be_bytes());
        }
        out
    }

    pub fn persist(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(SHARES_FILE), self.shares_to_bytes())?;
        fs::write(dir.join(KEYS_FILE), self.keys_to_bytes())?;
        fs::write(dir.join(INDEX_FILE), self.index.to_bytes())?;
        fs::write(dir.join(RETIRED_FILE), self.retired_to_bytes())?;
        let meta = StateMeta {
            server_id: self.server_id,
            share_count: self.params.share_count(),
            mask_bits: self.params.mask_bits(),
            plaintext_bound: self.params.plaintext_bound(),
            round_counter: self.round_counter,
        };
        let text = toml::to_string(&meta)
            .map_err(|e| OdesError::CorruptStateFile(format!("meta encode: {e}")))?;
        fs::write(dir.join(META_FILE), text)?;
        Ok(())
    }

    /// Loads a persisted state; an absent or empty directory yields a
    /// fresh empty server.
    pub fn restore(dir: &Path, server_id: u16, params: MaskParams) -> Result<Self> {
        let corrupt = |why: String| OdesError::CorruptStateFile(why);
        if !dir.join(META_FILE).exists() {
            return Ok(Self::new(server_id, params));
        }
        let text = fs::read_to_string(dir.join(META_FILE))?;
        let meta: StateMeta =
            toml::from_str(&text).map_err(|e| corrupt(format!("meta decode: {e}")))?;
        if meta.server_id != server_id
            || meta.share_count != params.share_count()
            || meta.mask_bits != params.mask_bits()
            || meta.plaintext_bound != params.plaintext_bound()
        {
            return Err(corrupt(
                "state metadata disagrees with requested parameters".into(),
            ));
        }

        let read = |name: &str| {
            fs::read(dir.join(name))
                .map_err(|e| OdesError::CorruptStateFile(format!("{name}: {e}")))
        };
        let shares = parse_shares(&read(SHARES_FILE)?)?;
        let keys = parse_keys(&read(KEYS_FILE)?)?;
        let index = OrderIndex::from_bytes(&read(INDEX_FILE)?)
            .map_err(|e| corrupt(format!("index: {e}")))?;
        let retired = parse_retired(&read(RETIRED_FILE)?)?;

        if shares.len() != keys.len() || shares.keys().any(|rid| !keys.contains_key(rid)) {
            return Err(corrupt("share and key tables name different rids".into()));
        }
        let indexed: BTreeSet<RecordId> = index.as_slice().iter().copied().collect();
        let stored: BTreeSet<RecordId> = shares.keys().copied().collect();
        if indexed != stored {
            return Err(corrupt("index and share table name different rids".into()));
        }
        if retired.iter().any(|rid| stored.contains(rid)) {
            return Err(corrupt("retired rid still stored".into()));
        }

        let share_table = shares
            .into_iter()
            .map(|(rid, share)| {
                (
                    rid,
                    StoredRecord {
                        key: keys[&rid].clone(),
                        share,
                    },
                )
            })
            .collect();
        Ok(Self {
            server_id,
            params,
            share_table,
            index,
            retired,
            round_counter: meta.round_counter,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    server_id: u16,
    share_count: usize,
    mask_bits: u32,
    plaintext_bound: i64,
    round_counter: u64,
}

fn parse_header<'a>(bytes: &'a [u8], magic: &[u8; 4], what: &str) -> Result<(u64, &'a [u8])> {
    if bytes.len() < 13 || &bytes[..4] != magic || bytes[4] != STATE_VERSION {
        return Err(OdesError::CorruptStateFile(format!("{what}: bad header")));
    }
    let count = u64::from_be_bytes(bytes[5..13].try_into().unwrap());
    Ok((count, &bytes[13..]))
}

fn parse_shares(bytes: &[u8]) -> Result<BTreeMap<RecordId, i128>> {
    let (count, body) = parse_header(bytes, SHARES_MAGIC, "share table")?;
    if body.len() as u64 != count.saturating_mul(24) {
        return Err(OdesError::CorruptStateFile("share table: truncated".into()));
    }
    let mut out = BTreeMap::new();
    for chunk in body.chunks_exact(24) {
        let rid = RecordId(u64::from_be_bytes(chunk[..8].try_into().unwrap()));
        let share = i128::from_be_bytes(chunk[8..].try_into().unwrap());
        if out.insert(rid, share).is_some() {
            return Err(OdesError::CorruptStateFile(format!(
                "share table: duplicate rid {rid}"
            )));
        }
    }
    Ok(out)
}

fn parse_keys(bytes: &[u8]) -> Result<BTreeMap<RecordId, String>> {
    let (count, body) = parse_header(bytes, KEYS_MAGIC, "key table")?;
    let corrupt = || OdesError::CorruptStateFile("key table: truncated".into());
    let mut out = BTreeMap::new();
    let mut pos = 0usize;
    for _ in 0..count {
        if body.len() < pos + 10 {
            return Err(corrupt());
        }
        let rid = RecordId(u64::from_be_bytes(body[pos..pos + 8].try_into().unwrap()));
        let len = u16::from_be_bytes(body[pos + 8..pos + 10].try_into().unwrap()) as usize;
        pos += 10;
        if body.len() < pos + len {
            return Err(corrupt());
        }
        let key = String::from_utf8(body[pos..pos + len].to_vec())
            .map_err(|_| OdesError::CorruptStateFile("key table: invalid utf-8".into()))?;
        pos += len;
        if out.insert(rid, key).is_some() {
            return Err(OdesError::CorruptStateFile(format!(
                "key table: duplicate rid {rid}"
            )));
        }
    }
    if pos != body.len() {
        return Err(OdesError::CorruptStateFile(
            "key table: trailing bytes".into(),
        ));
    }
    Ok(out)
}

fn parse_retired(bytes: &[u8]) -> Result<BTreeSet<RecordId>> {
    let (count, body) = parse_header(bytes, RETIRED_MAGIC, "retired set")?;
    if body.len() as u64 != count.saturating_mul(8) {
        return Err(OdesError::CorruptStateFile("retired set: truncated".into()));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| RecordId(u64::from_be_bytes(c.try_into().unwrap())))
        .collect())
}

/// Outcome of one binary-search transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchStep {
    Continue { lo: i64, hi: i64 },
    Found { rank: u64 },
}

/// The replicated search transition: given the bracket and the complete
/// delta set for the current round, narrow the bracket or finish.
///
/// With `lo > hi` the search is exhausted and the record belongs at
/// `lo`. A zero delta sum means the probed record equals the one at
/// `mid`, and the search terminates right behind it; deterministic
/// placement keeps the replicas identical. Every server feeds identical
/// delta sets through this function, so all replicas transition alike.
pub fn binary_search_step(
    params: &MaskParams,
    lo: i64,
    hi: i64,
    round_deltas: &[Delta],
) -> Result<SearchStep> {
    if lo > hi {
        return Ok(SearchStep::Found { rank: lo as u64 });
    }
    let mid = (lo + hi) / 2;
    match aggregate_sign(params, round_deltas)? {
        std::cmp::Ordering::Greater => Ok(SearchStep::Continue { lo: mid + 1, hi }),
        std::cmp::Ordering::Less => Ok(SearchStep::Continue { lo, hi: mid - 1 }),
        std::cmp::Ordering::Equal => Ok(SearchStep::Found {
            rank: (mid + 1) as u64,
        }),
    }
}

/// An insert whose rank is still being searched. Nothing is committed
/// until the search completes, so an aborted operation leaves the
/// share table and index untouched.
#[derive(Debug, Clone)]
struct InsertSearch {
    rid: RecordId,
    key: String,
    share: i128,
    lo: i64,
    hi: i64,
    round: u64,
}

/// Where a server output is headed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outbound {
    ToClient(ServerMessage),
    Broadcast(ServerMessage),
}

/// The sequential message loop around one [`ServerState`].
#[derive(Debug)]
pub struct ServerNode {
    state: ServerState,
    in_flight: Option<InsertSearch>,
    deltas: DeltaCollector,
}

impl ServerNode {
    pub fn new(state: ServerState) -> Self {
        let expected = state.params.share_count();
        Self {
            state,
            in_flight: None,
            deltas: DeltaCollector::new(expected),
        }
    }

    pub fn state(&self) -> &ServerState {
        &self.state
    }

    pub fn into_state(self) -> ServerState {
        self.state
    }

    pub fn has_in_flight(&self) -> bool {
        self.in_flight.is_some()
    }

    /// Describes the delta round a staged insert is stuck on, if any.
    pub fn pending_round_error(&self) -> Option<OdesError> {
        self.in_flight
            .as_ref()
            .map(|search| self.deltas.incomplete(search.round))
    }

    /// Processes one message; every reaction is pushed onto `out`.
    pub fn handle_message(&mut self, msg: ServerMessage, out: &mut Vec<Outbound>) -> Result<()> {
        match msg {
            ServerMessage::StoreShare { rid, key, share } => {
                if let Err(OdesError::DuplicateRid(_)) = self.state.store(rid, key, share) {
                    out.push(Outbound::ToClient(ServerMessage::Ack(Ack::error(
                        AckStatus::DuplicateRid,
                        rid,
                    ))));
                }
            }
            ServerMessage::BeginInsert { rid, key, share } => {
                self.begin_insert(rid, key, share, out)?;
            }
            ServerMessage::DeltaBroadcast(delta) => {
                if delta.round < self.state.round_counter {
                    return Err(OdesError::Protocol(format!(
                        "stale delta for round {} (counter {})",
                        delta.round, self.state.round_counter
                    )));
                }
                self.deltas.insert(delta)?;
                self.advance(out)?;
            }
            ServerMessage::QueryRequest {
                query_id,
                predicate,
            } => {
                let rows = self.state.query(predicate);
                out.push(Outbound::ToClient(ServerMessage::QueryResponse {
                    query_id,
                    rows,
                }));
            }
            ServerMessage::DeleteRecord { rid } => match self.state.delete(rid) {
                Ok((rank, key)) => out.push(Outbound::ToClient(ServerMessage::Ack(Ack {
                    status: AckStatus::Ok,
                    rid,
                    rank,
                    key,
                }))),
                Err(OdesError::UnknownRid(_)) => {
                    out.push(Outbound::ToClient(ServerMessage::Ack(Ack::error(
                        AckStatus::UnknownRid,
                        rid,
                    ))));
                }
                Err(e) => return Err(e),
            },
            ServerMessage::IndexSnapshot { index } => {
                match self.state.apply_index_snapshot(&index) {
                    Ok(()) => out.push(Outbound::ToClient(ServerMessage::Ack(Ack::ok(
                        RecordId(0),
                        self.state.index.len(),
                    )))),
                    Err(_) => out.push(Outbound::ToClient(ServerMessage::Ack(Ack::error(
                        AckStatus::Rejected,
                        RecordId(0),
                    )))),
                }
            }
            ServerMessage::CompareRequest {
                query_id,
                target_rank,
                share,
            } => {
                self.compare(query_id, target_rank, share, out);
            }
            ServerMessage::QueryResponse { .. } | ServerMessage::Ack(_) => {
                return Err(OdesError::Protocol(
                    "client-bound message reached a server".into(),
                ));
            }
        }
        Ok(())
    }

    fn begin_insert(
        &mut self,
        rid: RecordId,
        key: String,
        share: i128,
        out: &mut Vec<Outbound>,
    ) -> Result<()> {
        if self.in_flight.is_some() {
            out.push(Outbound::ToClient(ServerMessage::Ack(Ack::error(
                AckStatus::Rejected,
                rid,
            ))));
            return Ok(());
        }
        if self.state.share_table.contains_key(&rid) || self.state.retired.contains(&rid) {
            out.push(Outbound::ToClient(ServerMessage::Ack(Ack::error(
                AckStatus::DuplicateRid,
                rid,
            ))));
            return Ok(());
        }
        let n = self.state.index.len();
        if n == 0 {
            return self.commit(rid, key, share, 0, out);
        }
        self.in_flight = Some(InsertSearch {
            rid,
            key,
            share,
            lo: 0,
            hi: (n - 1) as i64,
            round: self.state.round_counter,
        });
        self.emit_delta(out)?;
        // Faster replicas may already have broadcast this round.
        self.advance(out)
    }

    /// Broadcasts this server's delta for the current bracket's mid.
    fn emit_delta(&mut self, out: &mut Vec<Outbound>) -> Result<()> {
        let search = self
            .in_flight
            .as_ref()
            .expect("delta emitted with no search");
        let mid = (search.lo + search.hi) / 2;
        let target = self.state.index.lookup(mid as u64)?;
        let own = self
            .state
            .share_of(target)
            .ok_or_else(|| OdesError::Protocol(format!("index rid {target} has no share")))?;
        let delta = local_delta(search.share, own, self.state.server_id, search.round);
        out.push(Outbound::Broadcast(ServerMessage::DeltaBroadcast(delta)));
        Ok(())
    }

    /// Consumes complete rounds until the search blocks or finishes.
    fn advance(&mut self, out: &mut Vec<Outbound>) -> Result<()> {
        while let Some(search) = self.in_flight.as_ref() {
            let Some(round) = self.deltas.try_take(search.round) else {
                break;
            };
            let step = binary_search_step(&self.state.params, search.lo, search.hi, &round)?;
            self.state.round_counter = search.round + 1;
            match step {
                SearchStep::Found { rank } => {
                    let s = self.in_flight.take().unwrap();
                    self.commit(s.rid, s.key, s.share, rank, out)?;
                }
                SearchStep::Continue { lo, hi } if lo > hi => {
                    let s = self.in_flight.take().unwrap();
                    self.commit(s.rid, s.key, s.share, lo as u64, out)?;
                }
                SearchStep::Continue { lo, hi } => {
                    let search = self.in_flight.as_mut().unwrap();
                    search.lo = lo;
                    search.hi = hi;
                    search.round = self.state.round_counter;
                    self.emit_delta(out)?;
                }
            }
        }
        Ok(())
    }

    fn commit(
        &mut self,
        rid: RecordId,
        key: String,
        share: i128,
        rank: u64,
        out: &mut Vec<Outbound>,
    ) -> Result<()> {
        self.state.store(rid, key, share)?;
        self.state.index.insert_at(rank, rid)?;
        out.push(Outbound::ToClient(ServerMessage::Ack(Ack::ok(rid, rank))));
        Ok(())
    }

    /// One ephemeral comparison round: the delta goes back to the
    /// client and nothing on the server changes.
    fn compare(&self, query_id: u64, target_rank: u64, share: i128, out: &mut Vec<Outbound>) {
        let Ok(target) = self.state.index.lookup(target_rank) else {
            out.push(Outbound::ToClient(ServerMessage::Ack(Ack::error(
                AckStatus::RankOutOfBounds,
                RecordId(0),
            ))));
            return;
        };
        let own = self.state.share_of(target).expect("index rid has a share");
        let delta = local_delta(share, own, self.state.server_id, query_id);
        out.push(Outbound::ToClient(ServerMessage::DeltaBroadcast(delta)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRandomSource;
    use crate::sharing::share;
    use tempfile::tempdir;

    fn params(m: usize) -> MaskParams {
        MaskParams::new(1_000_000_000_000, 40, m).unwrap()
    }

    fn rid(n: u64) -> RecordId {
        RecordId(n)
    }

    #[test]
    fn store_rejects_reused_rids() {
        let mut state = ServerState::new(0, params(2));
        state.store(rid(7), "apr".into(), -6000).unwrap();
        assert_eq!(state.share_of(rid(7)), Some(-6000));
        assert!(matches!(
            state.store(rid(7), "x".into(), 1),
            Err(OdesError::DuplicateRid(7))
        ));

        state.index.insert_at(0, rid(7)).unwrap();
        state.delete(rid(7)).unwrap();
        assert!(matches!(
            state.store(rid(7), "x".into(), 1),
            Err(OdesError::DuplicateRid(7))
        ));
    }

    #[test]
    fn empty_table_insert_commits_at_rank_zero() {
        let mut node = ServerNode::new(ServerState::new(0, params(2)));
        let mut out = Vec::new();
        node.handle_message(
            ServerMessage::BeginInsert {
                rid: rid(1),
                key: "k".into(),
                share: 42,
            },
            &mut out,
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        match &out[0] {
            Outbound::ToClient(ServerMessage::Ack(ack)) => {
                assert_eq!((ack.status, ack.rid, ack.rank), (AckStatus::Ok, rid(1), 0));
            }
            other => panic!("unexpected output {other:?}"),
        }
        assert_eq!(node.state().record_count(), 1);
        assert_eq!(node.state().round_counter(), 0);
    }

    #[test]
    fn walkthrough_single_round_places_lower_value_first() {
        // Plus server holds -6000 for the stored month; the probe share
        // is 3000. Its delta is 9000; the minus server's is -12000.
        let mut node = ServerNode::new(ServerState::new(0, params(2)));
        let mut out = Vec::new();
        node.handle_message(
            ServerMessage::StoreShare {
                rid: rid(0),
                key: "22-APR".into(),
                share: -6000,
            },
            &mut out,
        )
        .unwrap();
        let idx = OrderIndex::from_ranked(vec![rid(0)]).unwrap();
        node.handle_message(
            ServerMessage::IndexSnapshot {
                index: idx.to_bytes(),
            },
            &mut out,
        )
        .unwrap();
        out.clear();

        node.handle_message(
            ServerMessage::BeginInsert {
                rid: rid(1),
                key: "22-MAY".into(),
                share: 3000,
            },
            &mut out,
        )
        .unwrap();
        let own_delta = match &out[0] {
            Outbound::Broadcast(ServerMessage::DeltaBroadcast(d)) => *d,
            other => panic!("expected delta broadcast, got {other:?}"),
        };
        assert_eq!(own_delta.value, 9000);

        // Deliver both deltas (self-delivery included, as the fabric does).
        out.clear();
        node.handle_message(ServerMessage::DeltaBroadcast(own_delta), &mut out)
            .unwrap();
        node.handle_message(
            ServerMessage::DeltaBroadcast(Delta {
                server_id: 1,
                round: 0,
                value: -12_000,
            }),
            &mut out,
        )
        .unwrap();
        match &out[0] {
            Outbound::ToClient(ServerMessage::Ack(ack)) => {
                assert_eq!((ack.status, ack.rank), (AckStatus::Ok, 0));
            }
            other => panic!("unexpected output {other:?}"),
        }
        assert_eq!(node.state().index().as_slice(), &[rid(1), rid(0)]);
        assert_eq!(node.state().round_counter(), 1);
    }

    #[test]
    fn search_step_transitions() {
        let p = params(2);
        let round = |v0: i128, v1: i128| {
            [
                Delta {
                    server_id: 0,
                    round: 0,
                    value: v0,
                },
                Delta {
                    server_id: 1,
                    round: 0,
                    value: v1,
                },
            ]
        };
        assert_eq!(
            binary_search_step(&p, 0, 7, &round(5, 5)).unwrap(),
            SearchStep::Continue { lo: 4, hi: 7 }
        );
        assert_eq!(
            binary_search_step(&p, 0, 7, &round(5, -6)).unwrap(),
            SearchStep::Continue { lo: 0, hi: 2 }
        );
        assert_eq!(
            binary_search_step(&p, 0, 7, &round(5, -5)).unwrap(),
            SearchStep::Found { rank: 4 }
        );
        assert_eq!(
            binary_search_step(&p, 3, 2, &[]).unwrap(),
            SearchStep::Found { rank: 3 }
        );
    }

    /// Runs m nodes coupled by direct delivery: every broadcast goes to
    /// all nodes (self included), client-addressed output is collected.
    fn mesh_insert(
        nodes: &mut [ServerNode],
        rid: RecordId,
        key: &str,
        shares: &[i128],
    ) -> Vec<Ack> {
        let mut acks = Vec::new();
        let mut pending: Vec<(usize, ServerMessage)> = Vec::new();
        for (j, node) in nodes.iter_mut().enumerate() {
            let mut out = Vec::new();
            node.handle_message(
                ServerMessage::BeginInsert {
                    rid,
                    key: key.into(),
                    share: shares[j],
                },
                &mut out,
            )
            .unwrap();
            for o in out {
                pending.push((
                    j,
                    match o {
                        Outbound::Broadcast(m) => m,
                        Outbound::ToClient(m) => {
                            if let ServerMessage::Ack(a) = m {
                                acks.push(a);
                                continue;
                            }
                            panic!("unexpected client message");
                        }
                    },
                ));
            }
        }
        while let Some((_, msg)) = pending.pop() {
            for node in nodes.iter_mut() {
                let mut out = Vec::new();
                node.handle_message(msg.clone(), &mut out).unwrap();
                for o in out {
                    match o {
                        Outbound::Broadcast(m) => pending.push((0, m)),
                        Outbound::ToClient(ServerMessage::Ack(a)) => acks.push(a),
                        Outbound::ToClient(other) => panic!("unexpected {other:?}"),
                    }
                }
            }
        }
        acks
    }

    #[test]
    fn shuffled_inserts_match_sort_oracle_within_round_bound() {
        let m = 2;
        let p = params(m);
        let mut nodes: Vec<ServerNode> = (0..m)
            .map(|j| ServerNode::new(ServerState::new(j as u16, p)))
            .collect();
        let mut rng = SeededRandomSource::new(11);
        let mut values: Vec<i64> = (0..500).map(|i| (i * 7919 % 997) - 500).collect();
        // deterministic shuffle
        for i in (1..values.len()).rev() {
            let j = (i * 2_654_435_761) % (i + 1);
            values.swap(i, j);
        }

        let mut shadow: Vec<i64> = Vec::new();
        for (i, &v) in values.iter().enumerate() {
            let before = nodes[0].state().round_counter();
            let sv = share(v, &p, &mut rng).unwrap();
            let acks = mesh_insert(&mut nodes, rid(i as u64), "k", sv.shares());
            assert_eq!(acks.len(), m);
            assert!(acks.iter().all(|a| a.status == AckStatus::Ok));
            assert!(
                acks.windows(2).all(|w| w[0].rank == w[1].rank),
                "replica rank divergence"
            );

            let n = shadow.len() as u32;
            let rounds = nodes[0].state().round_counter() - before;
            let bound = if n == 0 {
                0
            } else {
                (n.next_power_of_two().trailing_zeros() + 1) as u64
            };
            assert!(
                rounds <= bound,
                "insert #{i} into n={n} used {rounds} rounds (bound {bound})"
            );

            shadow.push(v);
            shadow.sort_unstable();
            // replicas identical after every insert
            let idx0 = nodes[0].state().index().clone();
            assert!(nodes.iter().all(|nd| *nd.state().index() == idx0));
        }

        // rank order reconstructs the sorted multiset
        let recon: Vec<i64> = (0..shadow.len() as u64)
            .map(|rank| {
                let sum: i128 = nodes
                    .iter()
                    .map(|nd| {
                        let r = nd.state().index().lookup(rank).unwrap();
                        nd.state().share_of(r).unwrap()
                    })
                    .sum();
                sum as i64
            })
            .collect();
        assert_eq!(recon, shadow);
    }

    #[test]
    fn query_slices_sorted_values() {
        let p = params(2);
        let mut state = ServerState::new(0, p);
        // single-server view with plain values as shares
        let values = [50i64, 10, 90, 20, 70, 0, 40, 60, 30, 80];
        let mut ranked: Vec<(i64, RecordId)> = Vec::new();
        for (i, &v) in values.iter().enumerate() {
            state
                .store(rid(i as u64), format!("k{i}"), v as i128)
                .unwrap();
            ranked.push((v, rid(i as u64)));
        }
        ranked.sort();
        let idx = OrderIndex::from_ranked(ranked.iter().map(|&(_, r)| r).collect()).unwrap();
        state.apply_index_snapshot(&idx.to_bytes()).unwrap();

        let rows = state.query(RankPredicate::RangeByRank { lo: 2, hi: 5 });
        let got: Vec<i128> = rows.iter().map(|r| r.share).collect();
        assert_eq!(got, vec![20, 30, 40, 50]);
        assert!(
            state
                .query(RankPredicate::RangeByRank { lo: 0, hi: 0 })
                .len()
                == 1
        );
        assert_eq!(state.query(RankPredicate::All).len(), 10);
    }

    #[test]
    fn delete_middle_rank_keeps_rest_sorted() {
        let p = params(2);
        let mut state = ServerState::new(0, p);
        for i in 0..100u64 {
            state
                .store(rid(i), format!("k{i}"), (i * 3) as i128)
                .unwrap();
            state.index.insert_at(i, rid(i)).unwrap();
        }
        let (rank, key) = state.delete(rid(50)).unwrap();
        assert_eq!((rank, key.as_str()), (50, "k50"));
        let rows = state.query(RankPredicate::All);
        assert_eq!(rows.len(), 99);
        assert!(rows.windows(2).all(|w| w[0].share <= w[1].share));
        assert!(matches!(
            state.delete(rid(50)),
            Err(OdesError::UnknownRid(50))
        ));
    }

    #[test]
    fn persist_restore_roundtrip() {
        let p = params(2);
        let mut state = ServerState::new(1, p);
        let mut rng = SeededRandomSource::new(3);
        let mut ranked: Vec<(i128, RecordId)> = Vec::new();
        for i in 0..10_000u64 {
            let sv = share((i as i64 * 37) % 5000 - 2500, &p, &mut rng).unwrap();
            state
                .store(rid(i), format!("key-{i}"), sv.shares()[1])
                .unwrap();
            ranked.push((sv.shares()[1], rid(i)));
        }
        ranked.sort();
        let idx = OrderIndex::from_ranked(ranked.iter().map(|&(_, r)| r).collect()).unwrap();
        state.apply_index_snapshot(&idx.to_bytes()).unwrap();
        state.index.remove(rid(5)).unwrap();
        state.delete_for_test(rid(5));

        let dir = tempdir().unwrap();
        state.persist(dir.path()).unwrap();
        let back = ServerState::restore(dir.path(), 1, p).unwrap();
        assert_eq!(back.state_hash(), state.state_hash());
        assert_eq!(back.round_counter(), state.round_counter());
        assert_eq!(back.retired, state.retired);
    }

    #[test]
    fn restore_from_missing_dir_is_fresh() {
        let dir = tempdir().unwrap();
        let state = ServerState::restore(&dir.path().join("nothing"), 0, params(2)).unwrap();
        assert_eq!(state.record_count(), 0);
        assert!(state.index().is_empty());
    }

    #[test]
    fn restore_rejects_truncated_share_file() {
        let p = params(2);
        let mut state = ServerState::new(0, p);
        state.store(rid(1), "a".into(), 5).unwrap();
        state.index.insert_at(0, rid(1)).unwrap();
        let dir = tempdir().unwrap();
        state.persist(dir.path()).unwrap();

        let path = dir.path().join(SHARES_FILE);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            ServerState::restore(dir.path(), 0, p),
            Err(OdesError::CorruptStateFile(_))
        ));
    }

    impl ServerState {
        /// Test helper: drop a record without touching the index.
        fn delete_for_test(&mut self, rid: RecordId) {
            self.share_table.remove(&rid);
            self.retired.insert(rid);
        }
    }
}
