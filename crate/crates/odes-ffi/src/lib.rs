//! C ABI over an embedded share-store cluster.
//!
//! A handle bundles a deterministic in-process cluster with a client
//! session, so host languages get the full protocol behind opaque
//! pointers and plain error codes. Strings cross the boundary as
//! NUL-terminated UTF-8; query results are cached on the handle and
//! read back row by row.
//!
//! Handles are not thread-safe: confine each `OdesClient` to one
//! thread, or guard it with the host language's locking. Error
//! messages are per-thread.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::ffi::{c_char, CStr};
use std::ptr;

use odes_core::client::{ClientSession, QueryResult};
use odes_core::error::OdesError;
use odes_core::index::RecordId;
use odes_core::message::RankPredicate;
use odes_core::rng::{OsRandomSource, SeededRandomSource};
use odes_core::sharing::MaskParams;
use odes_core::transport::sim::{SimCluster, SimConfig};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdesStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BoundExceeded = 3,
    UnknownRid = 4,
    DuplicateRid = 5,
    RankOutOfBounds = 6,
    ProtocolError = 7,
    InvalidUtf8 = 8,
    BufferTooSmall = 9,
}

/// Comparison verdicts for `odes_compare`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdesOrdering {
    Less = -1,
    Equal = 0,
    Greater = 1,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_last_error(msg: impl Into<String>) {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = msg.into());
}

fn status_of(err: &OdesError) -> OdesStatus {
    match err {
        OdesError::BoundExceeded { .. } => OdesStatus::BoundExceeded,
        OdesError::UnknownRid(_) => OdesStatus::UnknownRid,
        OdesError::DuplicateRid(_) => OdesStatus::DuplicateRid,
        OdesError::RankOutOfBounds { .. } => OdesStatus::RankOutOfBounds,
        OdesError::Config(_) => OdesStatus::InvalidArgument,
        _ => OdesStatus::ProtocolError,
    }
}

fn fail(err: OdesError) -> OdesStatus {
    let status = status_of(&err);
    set_last_error(err.to_string());
    status
}

/// Opaque handle over one embedded cluster plus its client session.
pub struct OdesClient {
    cluster: SimCluster,
    session: ClientSession,
    last_query: Vec<QueryResult>,
}

/// Copies the most recent error message for this thread into `buf`
/// (NUL-terminated, truncated to `cap`); returns the full length.
///
/// # Safety
/// `buf` must point to `cap` writable bytes, or be NULL (length query).
#[no_mangle]
pub unsafe extern "C" fn odes_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast(), n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Opens an embedded cluster of `servers` share servers.
///
/// `mask_bits` is the statistical masking exponent, `bound` the largest
/// plaintext magnitude, `seed` makes runs reproducible (pass 0 to draw
/// from OS entropy). Returns NULL on invalid parameters.
#[no_mangle]
pub extern "C" fn odes_open(
    servers: u16,
    mask_bits: u32,
    bound: i64,
    seed: u64,
) -> *mut OdesClient {
    let params = match MaskParams::new(bound, mask_bits, servers as usize) {
        Ok(p) => p,
        Err(e) => {
            set_last_error(e.to_string());
            return ptr::null_mut();
        }
    };
    let cluster = SimCluster::new(
        params,
        SimConfig {
            seed,
            record_transcript: false,
            ..Default::default()
        },
    );
    let session = if seed == 0 {
        ClientSession::new(params, Box::new(OsRandomSource))
    } else {
        ClientSession::new(params, Box::new(SeededRandomSource::new(seed)))
    };
    Box::into_raw(Box::new(OdesClient {
        cluster,
        session,
        last_query: Vec::new(),
    }))
}

/// Releases a handle returned by `odes_open`.
///
/// # Safety
/// `client` must be a pointer from `odes_open` not yet closed, or NULL.
#[no_mangle]
pub unsafe extern "C" fn odes_close(client: *mut OdesClient) {
    if !client.is_null() {
        drop(Box::from_raw(client));
    }
}

unsafe fn borrow<'a>(client: *mut OdesClient) -> Option<&'a mut OdesClient> {
    client.as_mut()
}

unsafe fn read_key(key: *const c_char) -> Result<String, OdesStatus> {
    if key.is_null() {
        return Err(OdesStatus::NullPointer);
    }
    CStr::from_ptr(key)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| OdesStatus::InvalidUtf8)
}

/// Inserts `(key, value)`; writes the assigned record id to `out_rid`
/// and its rank to `out_rank` (either may be NULL).
///
/// # Safety
/// `client` must be a live handle, `key` a NUL-terminated string, and
/// the out pointers writable or NULL.
#[no_mangle]
pub unsafe extern "C" fn odes_insert(
    client: *mut OdesClient,
    key: *const c_char,
    value: i64,
    out_rid: *mut u64,
    out_rank: *mut u64,
) -> OdesStatus {
    let Some(handle) = borrow(client) else {
        return OdesStatus::NullPointer;
    };
    let key = match read_key(key) {
        Ok(k) => k,
        Err(status) => return status,
    };
    match handle
        .session
        .insert_record(&mut handle.cluster, &key, value)
    {
        Ok((rid, rank)) => {
            if !out_rid.is_null() {
                *out_rid = rid.0;
            }
            if !out_rank.is_null() {
                *out_rank = rank;
            }
            OdesStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Deletes the record with id `rid` on every server.
///
/// # Safety
/// `client` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn odes_delete(client: *mut OdesClient, rid: u64) -> OdesStatus {
    let Some(handle) = borrow(client) else {
        return OdesStatus::NullPointer;
    };
    match handle
        .session
        .delete_record(&mut handle.cluster, RecordId(rid))
    {
        Ok(()) => OdesStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Replaces the record's value, keeping its key; returns the fresh rid
/// through `out_rid`.
///
/// # Safety
/// `client` must be a live handle; `out_rid` writable or NULL.
#[no_mangle]
pub unsafe extern "C" fn odes_modify(
    client: *mut OdesClient,
    rid: u64,
    new_value: i64,
    out_rid: *mut u64,
) -> OdesStatus {
    let Some(handle) = borrow(client) else {
        return OdesStatus::NullPointer;
    };
    match handle
        .session
        .modify_record(&mut handle.cluster, RecordId(rid), new_value)
    {
        Ok((new_rid, _)) => {
            if !out_rid.is_null() {
                *out_rid = new_rid.0;
            }
            OdesStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Compares `value` against the stored record at `target_rank` in one
/// ephemeral round; no server state changes.
///
/// # Safety
/// `client` must be a live handle; `out_ordering` writable.
#[no_mangle]
pub unsafe extern "C" fn odes_compare(
    client: *mut OdesClient,
    value: i64,
    target_rank: u64,
    out_ordering: *mut OdesOrdering,
) -> OdesStatus {
    let Some(handle) = borrow(client) else {
        return OdesStatus::NullPointer;
    };
    if out_ordering.is_null() {
        return OdesStatus::NullPointer;
    }
    match handle
        .session
        .compare_ephemeral(&mut handle.cluster, value, target_rank)
    {
        Ok(ordering) => {
            *out_ordering = match ordering {
                Ordering::Less => OdesOrdering::Less,
                Ordering::Equal => OdesOrdering::Equal,
                Ordering::Greater => OdesOrdering::Greater,
            };
            OdesStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Predicate selector for `odes_query`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdesPredicate {
    All = 0,
    /// ranks in `[a, b]`
    RangeByRank = 1,
    /// the `a` largest values
    TopK = 2,
    /// the `a` smallest values
    BottomK = 3,
}

/// Runs a rank query and caches the reconstructed rows on the handle;
/// the row count lands in `out_count`, rows are read via
/// `odes_query_row`.
///
/// # Safety
/// `client` must be a live handle; `out_count` writable.
#[no_mangle]
pub unsafe extern "C" fn odes_query(
    client: *mut OdesClient,
    predicate: OdesPredicate,
    a: u64,
    b: u64,
    out_count: *mut u64,
) -> OdesStatus {
    let Some(handle) = borrow(client) else {
        return OdesStatus::NullPointer;
    };
    if out_count.is_null() {
        return OdesStatus::NullPointer;
    }
    let predicate = match predicate {
        OdesPredicate::All => RankPredicate::All,
        OdesPredicate::RangeByRank => RankPredicate::RangeByRank { lo: a, hi: b },
        OdesPredicate::TopK => RankPredicate::TopK(a),
        OdesPredicate::BottomK => RankPredicate::BottomK(a),
    };
    match handle.session.query_ranks(&mut handle.cluster, predicate) {
        Ok(rows) => {
            *out_count = rows.len() as u64;
            handle.last_query = rows;
            OdesStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Reads row `i` of the last `odes_query` result. The key is copied
/// NUL-terminated into `key_buf` (truncated to `key_cap`).
///
/// # Safety
/// `client` must be a live handle; out pointers writable or NULL;
/// `key_buf` must hold `key_cap` bytes when non-NULL.
#[no_mangle]
pub unsafe extern "C" fn odes_query_row(
    client: *mut OdesClient,
    i: u64,
    out_rank: *mut u64,
    out_rid: *mut u64,
    out_value: *mut i64,
    key_buf: *mut c_char,
    key_cap: usize,
) -> OdesStatus {
    let Some(handle) = borrow(client) else {
        return OdesStatus::NullPointer;
    };
    let Some(row) = handle.last_query.get(i as usize) else {
        set_last_error(format!("row {i} out of range"));
        return OdesStatus::InvalidArgument;
    };
    if !out_rank.is_null() {
        *out_rank = row.rank;
    }
    if !out_rid.is_null() {
        *out_rid = row.rid.0;
    }
    if !out_value.is_null() {
        *out_value = row.value;
    }
    if !key_buf.is_null() {
        let bytes = row.key.as_bytes();
        if key_cap == 0 {
            return OdesStatus::BufferTooSmall;
        }
        let n = bytes.len().min(key_cap - 1);
        ptr::copy_nonoverlapping(bytes.as_ptr(), key_buf.cast(), n);
        *key_buf.add(n) = 0;
        if n < bytes.len() {
            return OdesStatus::BufferTooSmall;
        }
    }
    OdesStatus::Ok
}

/// Number of records currently stored (from server 0's replica).
///
/// # Safety
/// `client` must be a live handle; `out_count` writable.
#[no_mangle]
pub unsafe extern "C" fn odes_record_count(
    client: *mut OdesClient,
    out_count: *mut u64,
) -> OdesStatus {
    let Some(handle) = borrow(client) else {
        return OdesStatus::NullPointer;
    };
    if out_count.is_null() {
        return OdesStatus::NullPointer;
    }
    *out_count = handle.cluster.server_state(0).record_count();
    OdesStatus::Ok
}
