//! Workload execution: synthetic table generation, CSV ingestion and
//! export, cluster lifecycle around either fabric, and the benchmark
//! that loads a table from empty and then runs log(n) rank point
//! queries.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::BaselineSystem;
use crate::client::{ClientSession, QueryResult};
use crate::error::{OdesError, Result};
use crate::message::RankPredicate;
use crate::rng::SeededRandomSource;
use crate::server::ServerState;
use crate::sharing::MaskParams;
use crate::transport::sim::{SimCluster, SimConfig};
use crate::transport::tcp::{TcpClientLink, TcpCluster, TcpConfig};
use crate::transport::ClusterLink;

/// The four synthetic tables and their fixed row counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableSpec {
    Supplier,
    Customer,
    Part,
    Orders,
}

impl TableSpec {
    pub const ALL: [TableSpec; 4] = [
        TableSpec::Supplier,
        TableSpec::Customer,
        TableSpec::Part,
        TableSpec::Orders,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TableSpec::Supplier => "supplier",
            TableSpec::Customer => "customer",
            TableSpec::Part => "part",
            TableSpec::Orders => "orders",
        }
    }

    pub fn rows(&self) -> u64 {
        match self {
            TableSpec::Supplier => 100,
            TableSpec::Customer => 1500,
            TableSpec::Part => 2000,
            TableSpec::Orders => 15_000,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "supplier" => Ok(TableSpec::Supplier),
            "customer" => Ok(TableSpec::Customer),
            "part" => Ok(TableSpec::Part),
            "orders" => Ok(TableSpec::Orders),
            other => Err(OdesError::Config(format!(
                "unknown table '{other}' (expected supplier|customer|part|orders)"
            ))),
        }
    }
}

/// Seeded synthetic rows: values uniform over `[-bound, bound]`.
pub fn generate_records(spec: TableSpec, seed: u64, bound: i64) -> Vec<(String, i64)> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..spec.rows())
        .map(|i| {
            (
                format!("{}-{:06}", spec.name(), i),
                rng.gen_range(-bound..=bound),
            )
        })
        .collect()
}

pub fn write_records_csv(path: &Path, records: &[(String, i64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["key", "value"]).map_err(csv_err)?;
    for (key, value) in records {
        w.write_record([key.as_str(), &value.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv(path: &Path, bound: i64) -> Result<Vec<(String, i64)>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_err)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(csv_err)?;
        if row.len() != 2 {
            return Err(OdesError::Config(format!(
                "expected key,value row, got {row:?}"
            )));
        }
        let key = row[0].to_string();
        let value: i64 = row[1]
            .trim()
            .parse()
            .map_err(|_| OdesError::Config(format!("value '{}' is not an integer", &row[1])))?;
        if value.checked_abs().is_none_or(|a| a > bound) {
            return Err(OdesError::BoundExceeded { value, bound });
        }
        out.push((key, value));
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> OdesError {
    match e.into_kind() {
        csv::ErrorKind::Io(ioe) => OdesError::Io(ioe),
        other => OdesError::Config(format!("csv: {other:?}")),
    }
}

/// Query results as `rank,key,value` CSV rows, rank being the 0-based
/// position within the result set (no header on terminals, header in
/// files).
pub fn format_query_rows(results: &[QueryResult]) -> String {
    let mut out = String::new();
    for (pos, r) in results.iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", pos, r.key, r.value));
    }
    out
}

pub fn write_query_csv(path: &Path, results: &[QueryResult]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "rank,key,value")?;
    f.write_all(format_query_rows(results).as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Sim,
    Tcp,
}

impl TransportKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sim" => Ok(TransportKind::Sim),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(OdesError::Config(format!("unknown transport '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Odes,
    Baseline,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Odes => "odes",
            Scheme::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "odes" => Ok(Scheme::Odes),
            "baseline" => Ok(Scheme::Baseline),
            other => Err(OdesError::Config(format!("unknown scheme '{other}'"))),
        }
    }
}

/// A running cluster behind either fabric; `finish` hands back the
/// final server states.
pub enum Cluster {
    Sim(Box<SimCluster>),
    Tcp(TcpCluster, TcpClientLink),
}

impl Cluster {
    pub fn open(kind: TransportKind, states: Vec<ServerState>, sim_seed: u64) -> Result<Self> {
        match kind {
            TransportKind::Sim => {
                let cfg = SimConfig {
                    seed: sim_seed,
                    ..Default::default()
                };
                Ok(Cluster::Sim(Box::new(SimCluster::from_states(states, cfg))))
            }
            TransportKind::Tcp => {
                let (cluster, link) = TcpCluster::launch(states, TcpConfig::default())?;
                Ok(Cluster::Tcp(cluster, link))
            }
        }
    }

    pub fn link(&mut self) -> &mut dyn ClusterLink {
        match self {
            Cluster::Sim(c) => c.as_mut(),
            Cluster::Tcp(_, link) => link,
        }
    }

    pub fn finish(self) -> Result<Vec<ServerState>> {
        match self {
            Cluster::Sim(c) => Ok(c.into_states()),
            Cluster::Tcp(cluster, link) => {
                drop(link);
                cluster.shutdown()
            }
        }
    }
}

/// Per-bench metrics row.
#[derive(Debug, Clone)]
pub struct WorkloadMetrics {
    pub scheme: String,
    pub table: String,
    pub m: usize,
    pub rows: u64,
    pub client_overhead_ns: u64,
    pub insert_ns: u64,
    pub query_ns: u64,
    pub delta_rounds: u64,
    pub messages: u64,
    pub server_bytes: u64,
    pub client_bytes: u64,
}

impl WorkloadMetrics {
    pub const CSV_HEADER: &'static str = "scheme,table,m,rows,client_overhead_ns,insert_ns,query_ns,delta_rounds,messages,server_bytes,client_bytes";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.scheme,
            self.table,
            self.m,
            self.rows,
            self.client_overhead_ns,
            self.insert_ns,
            self.query_ns,
            self.delta_rounds,
            self.messages,
            self.server_bytes,
            self.client_bytes
        )
    }
}

/// Upper bound on total delta rounds for inserting records one by one
/// into tables of size 0, 1, ..., n-1: an insert into k records takes
/// at most `ceil(log2 k) + 1` rounds, an insert into an empty table
/// takes none.
pub fn round_budget(n: u64) -> u64 {
    (1..n).map(|k| ceil_log2(k) + 1).sum::<u64>()
}

pub fn ceil_log2(n: u64) -> u64 {
    (n.next_power_of_two().trailing_zeros()) as u64
}

/// Number of point queries the benchmark issues after loading n rows.
pub fn bench_query_count(n: u64) -> u64 {
    ceil_log2(n.max(1)).max(1)
}

/// Inserts the whole table from empty, runs `ceil(log2 n)` random rank
/// point queries, verifies the final order against the sort oracle, and
/// reports one metrics row.
pub fn run_bench(
    scheme: Scheme,
    spec: TableSpec,
    m: usize,
    transport: TransportKind,
    seed: u64,
    bound: i64,
    mask_bits: u32,
) -> Result<WorkloadMetrics> {
    let records = generate_records(spec, seed, bound);
    match scheme {
        Scheme::Odes => run_bench_odes(spec, m, transport, seed, bound, mask_bits, &records),
        Scheme::Baseline => run_bench_baseline(spec, m, seed, bound, &records),
    }
}

fn run_bench_odes(
    spec: TableSpec,
    m: usize,
    transport: TransportKind,
    seed: u64,
    bound: i64,
    mask_bits: u32,
    records: &[(String, i64)],
) -> Result<WorkloadMetrics> {
    let params = MaskParams::new(bound, mask_bits, m)?;
    let states = (0..m).map(|j| ServerState::new(j as u16, params)).collect();
    let mut cluster = match transport {
        TransportKind::Sim => {
            // transcripts for a 15k-row load are large and unused here
            let cfg = SimConfig {
                seed,
                record_transcript: false,
                ..Default::default()
            };
            Cluster::Sim(Box::new(SimCluster::from_states(states, cfg)))
        }
        TransportKind::Tcp => Cluster::open(TransportKind::Tcp, states, seed)?,
    };
    let mut session = ClientSession::new(
        params,
        Box::new(SeededRandomSource::new(seed ^ 0x0DE5_5EED)),
    );

    let insert_start = Instant::now();
    for (key, value) in records {
        session.insert_record(cluster.link(), key, *value)?;
    }
    let insert_ns = insert_start.elapsed().as_nanos() as u64;

    let n = records.len() as u64;
    let mut query_rng = ChaCha12Rng::seed_from_u64(seed ^ 0x9E37_79B9);
    let query_start = Instant::now();
    for _ in 0..bench_query_count(n) {
        let rank = query_rng.gen_range(0..n.max(1));
        let rows = session.query_ranks(
            cluster.link(),
            RankPredicate::RangeByRank { lo: rank, hi: rank },
        )?;
        if rows.len() != 1 {
            return Err(OdesError::Protocol("point query returned no row".into()));
        }
    }
    let query_ns = query_start.elapsed().as_nanos() as u64;

    // final-order oracle check
    let all = session.query_ranks(cluster.link(), RankPredicate::All)?;
    let mut oracle: Vec<i64> = records.iter().map(|(_, v)| *v).collect();
    oracle.sort_unstable();
    let got: Vec<i64> = all.iter().map(|r| r.value).collect();
    if got != oracle {
        return Err(OdesError::Protocol(format!(
            "bench order mismatch on table {}",
            spec.name()
        )));
    }

    let messages = cluster.link().messages_total();
    let client_bytes = session.state_bytes().len() as u64;
    let states = cluster.finish()?;
    let delta_rounds = states[0].round_counter();
    if delta_rounds > round_budget(n) {
        return Err(OdesError::Protocol(format!(
            "round budget exceeded: {delta_rounds} > {}",
            round_budget(n)
        )));
    }

    Ok(WorkloadMetrics {
        scheme: Scheme::Odes.name().into(),
        table: spec.name().into(),
        m,
        rows: n,
        client_overhead_ns: session.stats.encode_ns,
        insert_ns,
        query_ns,
        delta_rounds,
        messages,
        server_bytes: states[0].storage_bytes(),
        client_bytes,
    })
}

fn run_bench_baseline(
    spec: TableSpec,
    m: usize,
    seed: u64,
    bound: i64,
    records: &[(String, i64)],
) -> Result<WorkloadMetrics> {
    let mut sys = BaselineSystem::new(bound, seed);
    let insert_start = Instant::now();
    for (_, value) in records {
        sys.insert(*value)?;
    }
    let insert_ns = insert_start.elapsed().as_nanos() as u64;

    let n = records.len() as u64;
    let mut query_rng = ChaCha12Rng::seed_from_u64(seed ^ 0x9E37_79B9);
    let query_start = Instant::now();
    for _ in 0..bench_query_count(n) {
        let rank = query_rng.gen_range(0..n.max(1));
        let (tokens, values) = sys.query_rank_range(rank, rank + 1);
        if tokens.len() != 1 || values.len() != 1 {
            return Err(OdesError::Protocol(
                "baseline point query returned no row".into(),
            ));
        }
    }
    let query_ns = query_start.elapsed().as_nanos() as u64;

    let (_, got) = sys.query_rank_range(0, n);
    let mut oracle: Vec<i64> = records.iter().map(|(_, v)| *v).collect();
    oracle.sort_unstable();
    if got != oracle {
        return Err(OdesError::Protocol("baseline order mismatch".into()));
    }

    Ok(WorkloadMetrics {
        scheme: Scheme::Baseline.name().into(),
        table: spec.name().into(),
        m,
        rows: n,
        client_overhead_ns: sys.encode_ns,
        insert_ns,
        query_ns,
        delta_rounds: 0,
        messages: sys.counters.total(),
        server_bytes: sys.server.size_bytes(),
        client_bytes: sys.client.size_bytes(),
    })
}

/// Session metadata persisted at the root of a state directory; holds
/// everything the stateless client needs across CLI invocations.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SessionMeta {
    pub plaintext_bound: i64,
    pub mask_bits: u32,
    pub servers: usize,
    pub next_rid: u64,
    pub base_seed: Option<u64>,
    pub op_counter: u64,
}

pub const SESSION_FILE: &str = "session.toml";

impl SessionMeta {
    pub fn params(&self) -> Result<MaskParams> {
        MaskParams::new(self.plaintext_bound, self.mask_bits, self.servers)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(SESSION_FILE);
        let text = fs::read_to_string(&path).map_err(|e| {
            OdesError::Config(format!(
                "no session at {}: {e} (run init first)",
                path.display()
            ))
        })?;
        toml::from_str(&text).map_err(|e| OdesError::CorruptStateFile(format!("session: {e}")))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let text = toml::to_string(self)
            .map_err(|e| OdesError::CorruptStateFile(format!("session encode: {e}")))?;
        fs::write(dir.join(SESSION_FILE), text)?;
        Ok(())
    }

    /// Distinct mask seed per CLI invocation so re-running a seeded
    /// command never replays the previous command's masks.
    pub fn next_mask_seed(&mut self) -> Option<u64> {
        let seed = self.base_seed.map(|base| {
            let mut z = base ^ self.op_counter.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z ^ (z >> 31)
        });
        self.op_counter += 1;
        seed
    }
}

pub fn server_dir(root: &Path, id: usize) -> std::path::PathBuf {
    root.join(format!("server_{id}"))
}

/// Loads every server replica under `root`.
pub fn restore_states(root: &Path, meta: &SessionMeta) -> Result<Vec<ServerState>> {
    let params = meta.params()?;
    (0..meta.servers)
        .map(|j| ServerState::restore(&server_dir(root, j), j as u16, params))
        .collect()
}

pub fn persist_states(root: &Path, states: &[ServerState]) -> Result<()> {
    for (j, state) in states.iter().enumerate() {
        state.persist(&server_dir(root, j))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn generation_is_seed_deterministic_and_sized() {
        let a = generate_records(TableSpec::Supplier, 42, 1_000_000);
        let b = generate_records(TableSpec::Supplier, 42, 1_000_000);
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        assert_eq!(generate_records(TableSpec::Orders, 1, 10).len(), 15_000);
        let c = generate_records(TableSpec::Supplier, 43, 1_000_000);
        assert_ne!(a, c);
    }

    #[test]
    fn csv_roundtrip_and_bound_check() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let records = vec![
            ("22-APR".to_string(), 14_000i64),
            ("22-MAY".to_string(), -11_000),
        ];
        write_records_csv(&path, &records).unwrap();
        let back = read_records_csv(&path, 1_000_000).unwrap();
        assert_eq!(records, back);
        assert!(matches!(
            read_records_csv(&path, 10_000),
            Err(OdesError::BoundExceeded { value: 14_000, .. })
        ));
    }

    #[test]
    fn round_budget_formula() {
        // inserting into 0 records is free; into 1 costs <= 1; into 2 <= 2
        assert_eq!(round_budget(1), 0);
        assert_eq!(round_budget(2), 1);
        assert_eq!(round_budget(3), 1 + 2);
        assert_eq!(round_budget(5), 1 + 2 + 3 + 3);
        assert_eq!(ceil_log2(1), 0);
        assert_eq!(ceil_log2(2), 1);
        assert_eq!(ceil_log2(3), 2);
        assert_eq!(ceil_log2(1024), 10);
    }

    #[test]
    fn bench_smoke_supplier_both_schemes() {
        let odes = run_bench(
            Scheme::Odes,
            TableSpec::Supplier,
            2,
            TransportKind::Sim,
            7,
            1_000_000_000_000,
            40,
        )
        .unwrap();
        assert_eq!(odes.rows, 100);
        assert!(odes.delta_rounds <= round_budget(100));
        assert!(odes.client_bytes == 22);
        assert!(odes.server_bytes > 0);

        let base = run_bench(
            Scheme::Baseline,
            TableSpec::Supplier,
            2,
            TransportKind::Sim,
            7,
            1_000_000_000_000,
            40,
        )
        .unwrap();
        assert_eq!(base.delta_rounds, 0);
        assert_eq!(base.messages, 100 * 3 + bench_query_count(100) + 1);
        assert!(base.client_bytes > 0);
    }

    #[test]
    fn session_meta_roundtrip_and_mask_seeds() {
        let dir = tempdir().unwrap();
        let mut meta = SessionMeta {
            plaintext_bound: 1_000_000,
            mask_bits: 40,
            servers: 2,
            next_rid: 17,
            base_seed: Some(5),
            op_counter: 0,
        };
        let s1 = meta.next_mask_seed().unwrap();
        let s2 = meta.next_mask_seed().unwrap();
        assert_ne!(s1, s2);
        meta.save(dir.path()).unwrap();
        let back = SessionMeta::load(dir.path()).unwrap();
        assert_eq!(meta, back);
        assert!(SessionMeta::load(&dir.path().join("missing")).is_err());
    }
}
