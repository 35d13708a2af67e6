#![allow(dead_code)]

//! Shared fixtures for the integration and acceptance suites: the
//! balance-table walkthrough, a sorted-multiset shadow oracle, and a
//! seeded interleaved workload that runs identically over any fabric.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use odes_core::client::ClientSession;
use odes_core::error::Result;
use odes_core::index::RecordId;
use odes_core::message::RankPredicate;
use odes_core::rng::{ScriptedRandomSource, SeededRandomSource};
use odes_core::sharing::MaskParams;
use odes_core::transport::ClusterLink;

pub fn params(m: usize) -> MaskParams {
    MaskParams::new(1_000_000_000_000, 40, m).unwrap()
}

/// The five-month balance table; the last month is the one the
/// walkthrough inserts on the fly.
pub fn balance_records() -> Vec<(String, i64)> {
    [
        ("22-JAN", 8_000i64),
        ("22-FEB", 12_000),
        ("22-MAR", 13_000),
        ("22-APR", 14_000),
    ]
    .map(|(k, v)| (k.to_string(), v))
    .into()
}

/// Mask script pinning the per-server shares of the four stored months
/// to the published values: FEB (14000, -2000), MAR (11000, 2000),
/// APR (-6000, 20000); JAN is (3000, 5000).
pub fn scripted_balance_source() -> ScriptedRandomSource {
    ScriptedRandomSource::identity_permutation(&[5_000, -2_000, 2_000, 20_000])
}

/// Sorted-multiset shadow the protocol state is checked against.
#[derive(Default, Clone)]
pub struct Oracle {
    live: Vec<(RecordId, String, i64)>,
}

impl Oracle {
    pub fn insert(&mut self, rid: RecordId, key: &str, value: i64) {
        self.live.push((rid, key.to_string(), value));
    }

    pub fn remove(&mut self, rid: RecordId) -> (String, i64) {
        let pos = self
            .live
            .iter()
            .position(|(r, _, _)| *r == rid)
            .expect("rid is live");
        let (_, key, value) = self.live.remove(pos);
        (key, value)
    }

    pub fn live_rids(&self) -> Vec<RecordId> {
        self.live.iter().map(|(r, _, _)| *r).collect()
    }

    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn sorted_values(&self) -> Vec<i64> {
        let mut values: Vec<i64> = self.live.iter().map(|(_, _, v)| *v).collect();
        values.sort_unstable();
        values
    }
}

pub struct WorkloadReport {
    pub oracle: Oracle,
    pub operations: u64,
}

/// Seeded interleaving of init/insert/delete/modify with intermittent
/// query spot-checks; every choice is driven by the seed so the same
/// workload can replay over any fabric. The final order is asserted
/// against the oracle before returning.
pub fn interleaved_workload(
    link: &mut dyn ClusterLink,
    m: usize,
    seed: u64,
    initial_records: usize,
    operations: u64,
    value_span: i64,
) -> Result<WorkloadReport> {
    let p = params(m);
    let mut session = ClientSession::new(p, Box::new(SeededRandomSource::new(seed ^ 0x5EED_0001)));
    let mut chooser = ChaCha12Rng::seed_from_u64(seed);
    let mut oracle = Oracle::default();

    let init: Vec<(String, i64)> = (0..initial_records)
        .map(|i| {
            (
                format!("init-{i}"),
                chooser.gen_range(-value_span..=value_span),
            )
        })
        .collect();
    let rids = session.init_dataset(link, &init)?;
    for (rid, (key, value)) in rids.iter().zip(&init) {
        oracle.insert(*rid, key, *value);
    }

    let mut ops_done = 0u64;
    for op in 0..operations {
        let roll = chooser.gen_range(0u32..100);
        if roll < 55 || oracle.len() == 0 {
            let value = chooser.gen_range(-value_span..=value_span);
            let key = format!("op-{op}");
            let (rid, _) = session.insert_record(link, &key, value)?;
            oracle.insert(rid, &key, value);
        } else if roll < 75 {
            let live = oracle.live_rids();
            let rid = live[chooser.gen_range(0..live.len())];
            session.delete_record(link, rid)?;
            oracle.remove(rid);
        } else if roll < 90 {
            let live = oracle.live_rids();
            let rid = live[chooser.gen_range(0..live.len())];
            let value = chooser.gen_range(-value_span..=value_span);
            let (new_rid, _) = session.modify_record(link, rid, value)?;
            let (key, _) = oracle.remove(rid);
            oracle.insert(new_rid, &key, value);
        } else {
            let sorted = oracle.sorted_values();
            if !sorted.is_empty() {
                let n = sorted.len() as u64;
                let lo = chooser.gen_range(0..n);
                let hi = chooser.gen_range(lo..n);
                let rows = session.query_ranks(link, RankPredicate::RangeByRank { lo, hi })?;
                let got: Vec<i64> = rows.iter().map(|r| r.value).collect();
                assert_eq!(got, sorted[lo as usize..=hi as usize].to_vec());
            }
        }
        ops_done += 1;
    }

    let all = session.query_ranks(link, RankPredicate::All)?;
    let got: Vec<i64> = all.iter().map(|r| r.value).collect();
    assert_eq!(
        got,
        oracle.sorted_values(),
        "final order diverged from the oracle"
    );
    Ok(WorkloadReport {
        oracle,
        operations: ops_done,
    })
}

/// Straight-line insert workload used by the round-bound, sentinel and
/// transport-equivalence checks.
pub fn insert_workload(
    link: &mut dyn ClusterLink,
    m: usize,
    seed: u64,
    inserts: u64,
    value_span: i64,
) -> Result<Vec<i64>> {
    let p = params(m);
    let mut session = ClientSession::new(p, Box::new(SeededRandomSource::new(seed ^ 0x5EED_0002)));
    let mut chooser = ChaCha12Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(inserts as usize);
    for i in 0..inserts {
        let value = chooser.gen_range(-value_span..=value_span);
        session.insert_record(link, &format!("w-{i}"), value)?;
        values.push(value);
    }
    Ok(values)
}
