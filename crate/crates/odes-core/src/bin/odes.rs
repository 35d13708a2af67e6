//! Command-line front end: dataset generation and ingestion, protocol
//! operations against a persisted state directory, and the benchmark.
//!
//! Exit codes: 1 usage or bound errors, 2 protocol errors, 3 I/O.

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use odes_core::client::ClientSession;
use odes_core::error::{OdesError, Result};
use odes_core::harness::{
    self, format_query_rows, Cluster, Scheme, SessionMeta, TableSpec, TransportKind,
    WorkloadMetrics,
};
use odes_core::index::RecordId;
use odes_core::message::RankPredicate;
use odes_core::rng::{OsRandomSource, RandomSource, SeededRandomSource};
use odes_core::sharing::{DEFAULT_MASK_BITS, DEFAULT_PLAINTEXT_BOUND};

#[derive(Parser)]
#[command(
    name = "odes",
    about = "Order-preserving storage over non-colluding share servers"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// State directory holding the session and per-server replicas
    #[arg(long, default_value = "odes-state")]
    state_dir: PathBuf,
    /// Message fabric to run the operation over
    #[arg(long, default_value = "sim")]
    transport: String,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic table as key,value CSV
    Gen {
        /// supplier (100), customer (1500), part (2000) or orders (15000)
        #[arg(long)]
        table: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PLAINTEXT_BOUND)]
        bound: i64,
    },
    /// Create a cluster state directory and bulk-load a CSV dataset
    Init {
        #[command(flatten)]
        common: CommonOpts,
        /// key,value CSV to load (optional: empty store otherwise)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of share servers
        #[arg(long, default_value_t = 2)]
        servers: usize,
        /// Statistical masking exponent sigma
        #[arg(long, default_value_t = DEFAULT_MASK_BITS)]
        mask_bits: u32,
        /// Plaintext magnitude bound M
        #[arg(long, default_value_t = DEFAULT_PLAINTEXT_BOUND)]
        bound: i64,
        /// Seed for deterministic masks (omit for OS entropy)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Insert one record through the lockstep search
    Insert {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        key: String,
        #[arg(long)]
        value: i64,
    },
    /// Run a rank-predicate query; prints rank,key,value rows
    Query {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, conflicts_with_all = ["top_k", "bottom_k", "range"])]
        all: bool,
        #[arg(long)]
        top_k: Option<u64>,
        #[arg(long)]
        bottom_k: Option<u64>,
        /// Inclusive rank range lo:hi
        #[arg(long)]
        range: Option<String>,
        /// Also write the rows (with a header) to this CSV file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a fresh value against the record at a rank
    Compare {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        value: i64,
        #[arg(long)]
        rank: u64,
    },
    /// Delete a record by rid
    Delete {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        rid: u64,
    },
    /// Load a synthetic table from empty and run log(n) point queries
    Bench {
        /// supplier, customer, part, orders, or "all"
        #[arg(long)]
        table: String,
        #[arg(long, default_value_t = 2)]
        servers: usize,
        #[arg(long, default_value = "odes")]
        scheme: String,
        #[arg(long, default_value = "sim")]
        transport: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Metrics CSV to append to
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_PLAINTEXT_BOUND)]
        bound: i64,
        #[arg(long, default_value_t = DEFAULT_MASK_BITS)]
        mask_bits: u32,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen {
            table,
            seed,
            out,
            bound,
        } => cmd_gen(&table, seed, &out, bound),
        Cmd::Init {
            common,
            data,
            servers,
            mask_bits,
            bound,
            seed,
        } => cmd_init(&common, data.as_deref(), servers, mask_bits, bound, seed),
        Cmd::Insert { common, key, value } => cmd_insert(&common, &key, value),
        Cmd::Query {
            common,
            all,
            top_k,
            bottom_k,
            range,
            out,
        } => {
            let predicate = parse_predicate(all, top_k, bottom_k, range.as_deref())?;
            cmd_query(&common, predicate, out.as_deref())
        }
        Cmd::Compare {
            common,
            value,
            rank,
        } => cmd_compare(&common, value, rank),
        Cmd::Delete { common, rid } => cmd_delete(&common, rid),
        Cmd::Bench {
            table,
            servers,
            scheme,
            transport,
            seed,
            out,
            bound,
            mask_bits,
        } => cmd_bench(
            &table,
            servers,
            &scheme,
            &transport,
            seed,
            out.as_deref(),
            bound,
            mask_bits,
        ),
    }
}

fn cmd_gen(table: &str, seed: u64, out: &Path, bound: i64) -> Result<()> {
    let spec = TableSpec::parse(table)?;
    let records = harness::generate_records(spec, seed, bound);
    harness::write_records_csv(out, &records)?;
    println!("wrote {} rows to {}", records.len(), out.display());
    Ok(())
}

fn cmd_init(
    common: &CommonOpts,
    data: Option<&Path>,
    servers: usize,
    mask_bits: u32,
    bound: i64,
    seed: Option<u64>,
) -> Result<()> {
    let transport = TransportKind::parse(&common.transport)?;
    if common.state_dir.join(harness::SESSION_FILE).exists() {
        return Err(OdesError::Config(format!(
            "state directory {} is already initialized",
            common.state_dir.display()
        )));
    }
    let mut meta = SessionMeta {
        plaintext_bound: bound,
        mask_bits,
        servers,
        next_rid: 0,
        base_seed: seed,
        op_counter: 0,
    };
    let params = meta.params()?;
    let records = match data {
        Some(path) => harness::read_records_csv(path, bound)?,
        None => Vec::new(),
    };

    let mask_seed = meta.next_mask_seed();
    let states = (0..servers)
        .map(|j| odes_core::server::ServerState::new(j as u16, params))
        .collect();
    let mut cluster = Cluster::open(transport, states, 0)?;
    let mut session = ClientSession::new(params, make_rng(mask_seed));
    session.init_dataset(cluster.link(), &records)?;
    let states = cluster.finish()?;

    meta.next_rid = session.next_rid();
    harness::persist_states(&common.state_dir, &states)?;
    meta.save(&common.state_dir)?;
    println!(
        "initialized {} servers with {} records",
        servers,
        records.len()
    );
    Ok(())
}

fn make_rng(seed: Option<u64>) -> Box<dyn RandomSource> {
    match seed {
        Some(s) => Box::new(SeededRandomSource::new(s)),
        None => Box::new(OsRandomSource),
    }
}

/// Restores the cluster, runs `op`, persists the surviving states.
fn with_cluster<T>(
    common: &CommonOpts,
    op: impl FnOnce(&mut ClientSession, &mut Cluster) -> Result<T>,
) -> Result<T> {
    let transport = TransportKind::parse(&common.transport)?;
    let mut meta = SessionMeta::load(&common.state_dir)?;
    let params = meta.params()?;
    let states = harness::restore_states(&common.state_dir, &meta)?;
    let mask_seed = meta.next_mask_seed();
    let mut cluster = Cluster::open(transport, states, 0)?;
    let mut session = ClientSession::resume(params, meta.next_rid, make_rng(mask_seed));
    let out = op(&mut session, &mut cluster)?;
    let states = cluster.finish()?;
    harness::persist_states(&common.state_dir, &states)?;
    meta.next_rid = session.next_rid();
    meta.save(&common.state_dir)?;
    Ok(out)
}

fn cmd_insert(common: &CommonOpts, key: &str, value: i64) -> Result<()> {
    let (rid, rank) = with_cluster(common, |session, cluster| {
        session.insert_record(cluster.link(), key, value)
    })?;
    println!("inserted rid {rid} at rank {rank}");
    Ok(())
}

fn parse_predicate(
    all: bool,
    top_k: Option<u64>,
    bottom_k: Option<u64>,
    range: Option<&str>,
) -> Result<RankPredicate> {
    let predicate = match (all, top_k, bottom_k, range) {
        (true, None, None, None) => RankPredicate::All,
        (false, Some(k), None, None) => RankPredicate::TopK(k),
        (false, None, Some(k), None) => RankPredicate::BottomK(k),
        (false, None, None, Some(spec)) => {
            let (lo, hi) = spec.split_once(':').ok_or_else(|| {
                OdesError::Config(format!("range must look like lo:hi, got '{spec}'"))
            })?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| OdesError::Config(format!("bad rank '{s}' in range")))
            };
            RankPredicate::RangeByRank {
                lo: parse(lo)?,
                hi: parse(hi)?,
            }
        }
        _ => {
            return Err(OdesError::Config(
                "pick exactly one of --all, --top-k, --bottom-k, --range".into(),
            ))
        }
    };
    predicate.validate()?;
    Ok(predicate)
}

fn cmd_query(common: &CommonOpts, predicate: RankPredicate, out: Option<&Path>) -> Result<()> {
    let results = with_cluster(common, |session, cluster| {
        session.query_ranks(cluster.link(), predicate)
    })?;
    print!("{}", format_query_rows(&results));
    if let Some(path) = out {
        harness::write_query_csv(path, &results)?;
    }
    Ok(())
}

fn cmd_compare(common: &CommonOpts, value: i64, rank: u64) -> Result<()> {
    let ordering = with_cluster(common, |session, cluster| {
        session.compare_ephemeral(cluster.link(), value, rank)
    })?;
    println!(
        "{}",
        match ordering {
            Ordering::Less => "LESS",
            Ordering::Equal => "EQUAL",
            Ordering::Greater => "GREATER",
        }
    );
    Ok(())
}

fn cmd_delete(common: &CommonOpts, rid: u64) -> Result<()> {
    with_cluster(common, |session, cluster| {
        session.delete_record(cluster.link(), RecordId(rid))
    })?;
    println!("deleted rid {rid}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    table: &str,
    servers: usize,
    scheme: &str,
    transport: &str,
    seed: u64,
    out: Option<&Path>,
    bound: i64,
    mask_bits: u32,
) -> Result<()> {
    let scheme = Scheme::parse(scheme)?;
    let transport = TransportKind::parse(transport)?;
    let specs: Vec<TableSpec> = if table.eq_ignore_ascii_case("all") {
        TableSpec::ALL.to_vec()
    } else {
        vec![TableSpec::parse(table)?]
    };

    let mut rows = Vec::new();
    println!("{}", WorkloadMetrics::CSV_HEADER);
    for spec in specs {
        let metrics = harness::run_bench(scheme, spec, servers, transport, seed, bound, mask_bits)?;
        println!("{}", metrics.csv_row());
        rows.push(metrics);
    }

    if let Some(path) = out {
        let new_file = !path.exists();
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        if new_file {
            writeln!(f, "{}", WorkloadMetrics::CSV_HEADER)?;
        }
        for m in &rows {
            writeln!(f, "{}", m.csv_row())?;
        }
    }
    Ok(())
}
