//! The rank index: an ordered sequence of record ids, position `k`
//! holding the id of the k-th smallest plaintext. Every server carries a
//! byte-identical replica and mutates it only through deterministic
//! protocol steps, so the index is the one piece of order metadata in
//! the whole system.

use crate::error::{OdesError, Result};

pub const INDEX_MAGIC: &[u8; 4] = b"ODSI";
pub const INDEX_VERSION: u8 = 0x01;

/// Record identifier; assigned once by the client, never reused after
/// deletion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RecordId(pub u64);

impl std::fmt::Display for RecordId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OrderIndex {
    ranks: Vec<RecordId>,
}

impl OrderIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds the index from rids already listed in rank order.
    pub fn from_ranked(ranks: Vec<RecordId>) -> Result<Self> {
        let mut sorted: Vec<u64> = ranks.iter().map(|r| r.0).collect();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            let dup = sorted.windows(2).find(|w| w[0] == w[1]).unwrap()[0];
            return Err(OdesError::DuplicateRid(dup));
        }
        Ok(Self { ranks })
    }

    pub fn len(&self) -> u64 {
        self.ranks.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    pub fn as_slice(&self) -> &[RecordId] {
        &self.ranks
    }

    pub fn lookup(&self, rank: u64) -> Result<RecordId> {
        self.ranks
            .get(usize::try_from(rank).map_err(|_| self.oob(rank))?)
            .copied()
            .ok_or_else(|| self.oob(rank))
    }

    pub fn rank_of(&self, rid: RecordId) -> Option<u64> {
        self.ranks.iter().position(|&r| r == rid).map(|p| p as u64)
    }

    /// Inserts `rid` at `rank`, shifting everything at `>= rank` up by
    /// one. `rank == len` appends.
    pub fn insert_at(&mut self, rank: u64, rid: RecordId) -> Result<()> {
        if rank > self.len() {
            return Err(self.oob(rank));
        }
        if self.ranks.contains(&rid) {
            return Err(OdesError::DuplicateRid(rid.0));
        }
        self.ranks.insert(rank as usize, rid);
        Ok(())
    }

    /// Removes `rid`, closing the gap; returns its former rank.
    pub fn remove(&mut self, rid: RecordId) -> Result<u64> {
        match self.rank_of(rid) {
            Some(rank) => {
                self.ranks.remove(rank as usize);
                Ok(rank)
            }
            None => Err(OdesError::UnknownRid(rid.0)),
        }
    }

    /// Wire format: magic, version byte, u64-BE count, then each rid as
    /// u64-BE. Bit-exact so replicas can be hash-compared.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + self.ranks.len() * 8);
        out.extend_from_slice(INDEX_MAGIC);
        out.push(INDEX_VERSION);
        out.extend_from_slice(&self.len().to_be_bytes());
        for rid in &self.ranks {
            out.extend_from_slice(&rid.0.to_be_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let malformed = |why: &str| OdesError::MalformedIndexFile(why.to_string());
        if bytes.len() < 13 {
            return Err(malformed("truncated header"));
        }
        if &bytes[..4] != INDEX_MAGIC {
            return Err(malformed("bad magic"));
        }
        if bytes[4] != INDEX_VERSION {
            return Err(malformed("unsupported version"));
        }
        let count = u64::from_be_bytes(bytes[5..13].try_into().unwrap());
        let body = &bytes[13..];
        let expected = count
            .checked_mul(8)
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| malformed("count overflows"))?;
        if body.len() != expected {
            return Err(malformed("length field disagrees with payload"));
        }
        let ranks: Vec<RecordId> = body
            .chunks_exact(8)
            .map(|c| RecordId(u64::from_be_bytes(c.try_into().unwrap())))
            .collect();
        Self::from_ranked(ranks).map_err(|_| malformed("duplicate rid"))
    }

    fn oob(&self, rank: u64) -> OdesError {
        OdesError::RankOutOfBounds {
            rank,
            len: self.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rid(n: u64) -> RecordId {
        RecordId(n)
    }

    #[test]
    fn lookup_reads_by_rank() {
        let idx = OrderIndex::from_ranked(vec![rid(2), rid(0), rid(1)]).unwrap();
        assert_eq!(idx.lookup(1).unwrap(), rid(0));
        assert!(matches!(
            OrderIndex::new().lookup(0),
            Err(OdesError::RankOutOfBounds { rank: 0, len: 0 })
        ));
    }

    #[test]
    fn insert_at_shifts_and_rejects() {
        let mut idx = OrderIndex::from_ranked(vec![rid(10), rid(30)]).unwrap();
        idx.insert_at(1, rid(20)).unwrap();
        assert_eq!(idx.as_slice(), &[rid(10), rid(20), rid(30)]);

        let mut empty = OrderIndex::new();
        empty.insert_at(0, rid(1)).unwrap();
        assert_eq!(empty.as_slice(), &[rid(1)]);

        assert!(matches!(
            idx.insert_at(1, rid(20)),
            Err(OdesError::DuplicateRid(20))
        ));
        assert!(matches!(
            idx.insert_at(9, rid(40)),
            Err(OdesError::RankOutOfBounds { .. })
        ));
    }

    #[test]
    fn remove_keeps_relative_order() {
        let mut idx = OrderIndex::from_ranked(vec![rid(1), rid(2), rid(3)]).unwrap();
        assert_eq!(idx.remove(rid(2)).unwrap(), 1);
        assert_eq!(idx.as_slice(), &[rid(1), rid(3)]);
        assert!(matches!(idx.remove(rid(9)), Err(OdesError::UnknownRid(9))));
    }

    #[test]
    fn sorted_inserts_match_sort_oracle() {
        // values 5, 1, 9 under rids a=0 b=1 c=2
        let values = [(5i64, rid(0)), (1, rid(1)), (9, rid(2))];
        let mut idx = OrderIndex::new();
        for &(v, r) in &values {
            let rank = idx
                .as_slice()
                .iter()
                .map(|rr| values.iter().find(|(_, x)| x == rr).unwrap().0)
                .filter(|&existing| existing <= v)
                .count() as u64;
            idx.insert_at(rank, r).unwrap();
        }
        assert_eq!(idx.lookup(0).unwrap(), rid(1));
        assert_eq!(idx.lookup(2).unwrap(), rid(2));
    }

    #[test]
    fn serialization_negative_cases() {
        assert!(OrderIndex::from_bytes(b"ODSI").is_err());
        assert!(OrderIndex::from_bytes(b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00\x00").is_err());
        // count says 2, payload carries 1
        let mut bytes = OrderIndex::from_ranked(vec![rid(7)]).unwrap().to_bytes();
        bytes[12] = 2;
        assert!(matches!(
            OrderIndex::from_bytes(&bytes),
            Err(OdesError::MalformedIndexFile(_))
        ));
        // duplicate rid
        let dup = OrderIndex {
            ranks: vec![rid(7), rid(7)],
        }
        .to_bytes();
        assert!(OrderIndex::from_bytes(&dup).is_err());
    }

    #[test]
    fn serialize_roundtrip_at_scale() {
        let idx = OrderIndex::from_ranked((0..100_000).map(RecordId).collect()).unwrap();
        let bytes = idx.to_bytes();
        assert_eq!(bytes.len(), 13 + 100_000 * 8);
        assert_eq!(OrderIndex::from_bytes(&bytes).unwrap(), idx);
    }

    #[test]
    fn empty_roundtrip_is_header_only() {
        let empty = OrderIndex::new();
        let bytes = empty.to_bytes();
        assert_eq!(bytes.len(), 13);
        assert_eq!(OrderIndex::from_bytes(&bytes).unwrap(), empty);
    }

    proptest! {
        #[test]
        fn serialize_roundtrip(rids in prop::collection::btree_set(0u64..1_000_000, 0..300)) {
            let idx = OrderIndex::from_ranked(rids.into_iter().map(RecordId).collect()).unwrap();
            let back = OrderIndex::from_bytes(&idx.to_bytes()).unwrap();
            prop_assert_eq!(idx, back);
        }

        #[test]
        fn random_inserts_match_stable_argsort(values in prop::collection::vec(-500i64..=500, 0..200)) {
            // Stable argsort oracle: ties keep insertion order, which is
            // what rank = count(existing <= v) inserts produce.
            let mut idx = OrderIndex::new();
            let mut shadow: Vec<(i64, u64)> = Vec::new();
            for (i, &v) in values.iter().enumerate() {
                let rank = shadow.iter().filter(|(x, _)| *x <= v).count() as u64;
                idx.insert_at(rank, rid(i as u64)).unwrap();
                shadow.push((v, i as u64));
            }
            let mut oracle: Vec<(i64, u64)> = shadow.clone();
            oracle.sort_by_key(|&(v, i)| (v, i));
            let expect: Vec<RecordId> = oracle.iter().map(|&(_, i)| rid(i)).collect();
            prop_assert_eq!(idx.as_slice(), &expect[..]);
        }
    }
}
