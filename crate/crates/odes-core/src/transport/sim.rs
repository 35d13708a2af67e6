//! Deterministic in-process cluster: the client and all m servers run
//! single-threaded over a virtual clock. Identical seeds and inputs
//! produce byte-identical transcripts, and replica agreement is
//! asserted after every exchange.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use crate::error::{OdesError, Result};
use crate::message::ServerMessage;
use crate::server::{Outbound, ServerNode, ServerState};
use crate::sharing::MaskParams;
use crate::transport::{ClusterLink, Envelope, NodeId, BROADCAST_NODE_ID, CLIENT_NODE_ID};

/// Simulator knobs. Latency and jitter shape only the virtual
/// timestamps and must never change final state.
#[derive(Debug, Clone, Copy)]
pub struct SimConfig {
    pub seed: u64,
    pub latency_ns: u64,
    pub jitter_ns: u64,
    pub record_transcript: bool,
    pub check_replicas: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            latency_ns: 0,
            jitter_ns: 0,
            record_transcript: true,
            check_replicas: true,
        }
    }
}

#[derive(Debug)]
struct Scheduled {
    deliver_at: u64,
    seq: u64,
    envelope: Envelope,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.deliver_at, self.seq) == (other.deliver_at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.deliver_at, self.seq).cmp(&(other.deliver_at, other.seq))
    }
}

pub struct SimCluster {
    servers: Vec<ServerNode>,
    queue: BinaryHeap<Reverse<Scheduled>>,
    inboxes: Vec<VecDeque<ServerMessage>>,
    transcript: Vec<Envelope>,
    per_pair_last: BTreeMap<(NodeId, NodeId), u64>,
    muted: BTreeSet<NodeId>,
    latency_rng: ChaCha12Rng,
    cfg: SimConfig,
    now_ns: u64,
    next_seq: u64,
    messages_total: u64,
}

impl SimCluster {
    /// Fresh, empty cluster of `m` servers.
    pub fn new(params: MaskParams, cfg: SimConfig) -> Self {
        let states = (0..params.share_count())
            .map(|j| ServerState::new(j as u16, params))
            .collect();
        Self::from_states(states, cfg)
    }

    pub fn from_states(states: Vec<ServerState>, cfg: SimConfig) -> Self {
        let m = states.len();
        Self {
            servers: states.into_iter().map(ServerNode::new).collect(),
            queue: BinaryHeap::new(),
            inboxes: (0..m).map(|_| VecDeque::new()).collect(),
            transcript: Vec::new(),
            per_pair_last: BTreeMap::new(),
            muted: BTreeSet::new(),
            latency_rng: ChaCha12Rng::seed_from_u64(cfg.seed),
            cfg,
            now_ns: 0,
            next_seq: 0,
            messages_total: 0,
        }
    }

    pub fn into_states(self) -> Vec<ServerState> {
        self.servers
            .into_iter()
            .map(ServerNode::into_state)
            .collect()
    }

    pub fn server_state(&self, id: usize) -> &ServerState {
        self.servers[id].state()
    }

    /// Delta rounds consumed so far (identical on every replica).
    pub fn delta_rounds(&self) -> u64 {
        self.servers
            .first()
            .map_or(0, |s| s.state().round_counter())
    }

    pub fn transcript(&self) -> &[Envelope] {
        &self.transcript
    }

    pub fn transcript_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for env in &self.transcript {
            hasher.update(env.to_bytes());
        }
        hasher.finalize().into()
    }

    /// Combined hash over every server's serialized state.
    pub fn state_hash(&self) -> [u8; 32] {
        combined_state_hash(self.servers.iter().map(|s| s.state()))
    }

    /// Test knob: drop every message this server sends from now on.
    pub fn mute_server(&mut self, id: NodeId) {
        self.muted.insert(id);
    }

    fn schedule(&mut self, sender: NodeId, recipient: NodeId, payload: Vec<u8>) {
        let seq = self.next_seq;
        self.next_seq += 1;
        let jitter = if self.cfg.jitter_ns > 0 {
            self.latency_rng.gen_range(0..=self.cfg.jitter_ns)
        } else {
            0
        };
        // clamp to the pair's last delivery time to keep per-pair FIFO
        let at = self.now_ns + self.cfg.latency_ns + jitter;
        let last = self.per_pair_last.entry((sender, recipient)).or_insert(0);
        let deliver_at = at.max(*last);
        *last = deliver_at;

        let envelope = Envelope {
            sender,
            recipient,
            seq,
            payload,
        };
        if self.cfg.record_transcript {
            self.transcript.push(envelope.clone());
        }
        self.messages_total += 1;
        self.queue.push(Reverse(Scheduled {
            deliver_at,
            seq,
            envelope,
        }));
    }

    fn route(&mut self, sender: NodeId, recipient: NodeId, msg: &ServerMessage) -> Result<()> {
        if self.muted.contains(&sender) {
            return Ok(());
        }
        let payload = msg.encode();
        match recipient {
            BROADCAST_NODE_ID => {
                for id in 0..self.servers.len() as NodeId {
                    self.schedule(sender, id, payload.clone());
                }
            }
            CLIENT_NODE_ID => self.schedule(sender, CLIENT_NODE_ID, payload),
            id if (id as usize) < self.servers.len() => self.schedule(sender, id, payload),
            id => return Err(OdesError::UnknownRecipient(id)),
        }
        Ok(())
    }

    /// Delivers queued envelopes in virtual-time order until quiescent.
    fn pump(&mut self) -> Result<()> {
        while let Some(Reverse(next)) = self.queue.pop() {
            self.now_ns = self.now_ns.max(next.deliver_at);
            let env = next.envelope;
            let msg = env.message()?;
            if env.recipient == CLIENT_NODE_ID {
                let from = env.sender as usize;
                if from >= self.inboxes.len() {
                    return Err(OdesError::UnknownRecipient(env.sender));
                }
                self.inboxes[from].push_back(msg);
                continue;
            }
            let idx = env.recipient as usize;
            let mut out = Vec::new();
            self.servers[idx].handle_message(msg, &mut out)?;
            let sender = env.recipient;
            for o in out {
                match o {
                    Outbound::ToClient(m) => self.route(sender, CLIENT_NODE_ID, &m)?,
                    Outbound::Broadcast(m) => self.route(sender, BROADCAST_NODE_ID, &m)?,
                }
            }
        }
        Ok(())
    }

    /// Replica agreement: identical index replicas, identical table
    /// sizes, no search left hanging.
    fn verify_replicas(&self) -> Result<()> {
        if !self.cfg.check_replicas || self.servers.is_empty() || !self.muted.is_empty() {
            return Ok(());
        }
        let first = self.servers[0].state();
        for node in &self.servers[1..] {
            let state = node.state();
            if state.index() != first.index() {
                return Err(OdesError::ReplicaDivergence(format!(
                    "index replica on server {} differs from server 0",
                    state.server_id()
                )));
            }
            if state.record_count() != first.record_count() {
                return Err(OdesError::ReplicaDivergence(
                    "share table sizes differ".into(),
                ));
            }
            if state.round_counter() != first.round_counter() {
                return Err(OdesError::ReplicaDivergence("round counters differ".into()));
            }
        }
        if let Some(node) = self.servers.iter().find(|n| n.has_in_flight()) {
            return Err(OdesError::ReplicaDivergence(format!(
                "server {} still has an in-flight insert",
                node.state().server_id()
            )));
        }
        Ok(())
    }
}

impl ClusterLink for SimCluster {
    fn server_count(&self) -> usize {
        self.servers.len()
    }

    fn send(&mut self, to: NodeId, msg: &ServerMessage) -> Result<()> {
        if (to as usize) >= self.servers.len() {
            return Err(OdesError::UnknownRecipient(to));
        }
        self.route(CLIENT_NODE_ID, to, msg)
    }

    fn exchange(&mut self) -> Result<Vec<ServerMessage>> {
        if self.inboxes.iter().any(|q| !q.is_empty()) {
            return Err(OdesError::Protocol(
                "stale client-bound messages before exchange".into(),
            ));
        }
        self.pump()?;
        let mut replies = Vec::with_capacity(self.servers.len());
        for (id, inbox) in self.inboxes.iter_mut().enumerate() {
            match inbox.pop_front() {
                Some(msg) => replies.push(msg),
                None => {
                    let stuck = self
                        .servers
                        .iter()
                        .find_map(|n| n.pending_round_error())
                        .map(|e| format!(" ({e})"))
                        .unwrap_or_default();
                    return Err(OdesError::ProtocolTimeout(format!(
                        "server {id} sent no reply before quiescence{stuck}"
                    )));
                }
            }
        }
        self.verify_replicas()?;
        Ok(replies)
    }

    fn messages_total(&self) -> u64 {
        self.messages_total
    }
}

/// Hash over the concatenation of per-server state hashes; equal end
/// states across transports must produce equal values.
pub fn combined_state_hash<'a>(states: impl Iterator<Item = &'a ServerState>) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for state in states {
        hasher.update(state.state_hash());
    }
    hasher.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::RecordId;
    use crate::message::{Ack, AckStatus, RankPredicate};

    fn params() -> MaskParams {
        MaskParams::new(1_000_000_000_000, 40, 2).unwrap()
    }

    fn store(link: &mut SimCluster, rid: u64, shares: [i128; 2]) {
        for (j, &s) in shares.iter().enumerate() {
            link.send(
                j as NodeId,
                &ServerMessage::StoreShare {
                    rid: RecordId(rid),
                    key: format!("k{rid}"),
                    share: s,
                },
            )
            .unwrap();
        }
    }

    fn snapshot(link: &mut SimCluster, rids: &[u64]) -> Vec<ServerMessage> {
        let idx =
            crate::index::OrderIndex::from_ranked(rids.iter().map(|&r| RecordId(r)).collect())
                .unwrap();
        link.broadcast(&ServerMessage::IndexSnapshot {
            index: idx.to_bytes(),
        })
        .unwrap();
        link.exchange().unwrap()
    }

    #[test]
    fn broadcast_reaches_every_server_once() {
        let mut link = SimCluster::new(params(), SimConfig::default());
        store(&mut link, 0, [3, -3]);
        let acks = snapshot(&mut link, &[0]);
        assert_eq!(acks.len(), 2);
        for ack in acks {
            assert!(matches!(
                ack,
                ServerMessage::Ack(Ack {
                    status: AckStatus::Ok,
                    rank: 1,
                    ..
                })
            ));
        }
        // store to each of 2 + snapshot to each of 2 + 2 acks
        assert_eq!(link.messages_total(), 6);
    }

    #[test]
    fn unknown_recipient_is_rejected() {
        let mut link = SimCluster::new(params(), SimConfig::default());
        let msg = ServerMessage::DeleteRecord { rid: RecordId(0) };
        assert!(matches!(
            link.send(9, &msg),
            Err(OdesError::UnknownRecipient(9))
        ));
    }

    #[test]
    fn silent_server_times_out() {
        let mut link = SimCluster::new(params(), SimConfig::default());
        link.mute_server(1);
        store(&mut link, 0, [3, -3]);
        let idx = crate::index::OrderIndex::from_ranked(vec![RecordId(0)]).unwrap();
        link.broadcast(&ServerMessage::IndexSnapshot {
            index: idx.to_bytes(),
        })
        .unwrap();
        assert!(matches!(
            link.exchange(),
            Err(OdesError::ProtocolTimeout(_))
        ));
    }

    #[test]
    fn aborted_insert_stages_nothing() {
        use crate::client::ClientSession;
        use crate::rng::SeededRandomSource;

        let p = params();
        let mut link = SimCluster::new(p, SimConfig::default());
        let mut session = ClientSession::new(p, Box::new(SeededRandomSource::new(4)));
        session
            .init_dataset(
                &mut link,
                &[("a".into(), 10), ("b".into(), 20), ("c".into(), 30)],
            )
            .unwrap();
        let index_before = link.server_state(0).index().to_bytes();

        link.mute_server(1);
        let err = session.insert_record(&mut link, "d", 15).unwrap_err();
        match err {
            OdesError::ProtocolTimeout(msg) => {
                assert!(msg.contains("incomplete delta round"), "got: {msg}")
            }
            other => panic!("expected timeout, got {other:?}"),
        }
        // the staged insert never touched the index or the share table
        for id in 0..2 {
            assert_eq!(link.server_state(id).record_count(), 3);
            assert_eq!(link.server_state(id).index().to_bytes(), index_before);
        }
    }

    #[test]
    fn latency_and_jitter_do_not_change_state() {
        let run = |cfg: SimConfig| {
            let mut link = SimCluster::new(params(), cfg);
            for i in 0..20u64 {
                store(&mut link, i, [i as i128 * 7, -(i as i128 * 6)]);
            }
            let rids: Vec<u64> = {
                let mut v: Vec<(i128, u64)> = (0..20).map(|i| (i as i128, i)).collect();
                v.sort();
                v.into_iter().map(|(_, r)| r).collect()
            };
            snapshot(&mut link, &rids);
            link.broadcast(&ServerMessage::QueryRequest {
                query_id: 1,
                predicate: RankPredicate::All,
            })
            .unwrap();
            link.exchange().unwrap();
            link.state_hash()
        };
        let plain = run(SimConfig::default());
        let delayed = run(SimConfig {
            latency_ns: 1_000,
            jitter_ns: 5_000,
            ..Default::default()
        });
        assert_eq!(plain, delayed);
    }

    #[test]
    fn identical_seeds_give_identical_transcripts() {
        let run = || {
            let mut link = SimCluster::new(params(), SimConfig::default());
            store(&mut link, 0, [11, -4]);
            store(&mut link, 1, [2, 13]);
            snapshot(&mut link, &[0, 1]);
            link.transcript_hash()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_run_has_empty_transcript() {
        let link = SimCluster::new(params(), SimConfig::default());
        assert!(link.transcript().is_empty());
    }
}
