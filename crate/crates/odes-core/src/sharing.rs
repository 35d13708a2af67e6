//! Additive share arithmetic: generation, reconstruction and the
//! sign-aggregation comparison.
//!
//! All arithmetic is plain (non-modular) signed 128-bit integer math.
//! Wrapping arithmetic would destroy the sign-of-sum comparison, so the
//! parameter set is validated up front to guarantee that no intermediate
//! value in any protocol step can leave the `i128` range. Masks are
//! drawn uniform over `[-B, B]` with `B = M * 2^sigma`, which bounds the
//! information a single share carries about its plaintext by `M / B`,
//! i.e. `2^-sigma`.

use std::cmp::Ordering;

use crate::error::{OdesError, Result};
use crate::rng::RandomSource;

pub const MIN_SHARE_COUNT: usize = 2;
pub const MAX_SHARE_COUNT: usize = 16;
pub const MIN_MASK_BITS: u32 = 1;
pub const MAX_MASK_BITS: u32 = 64;

pub const DEFAULT_MASK_BITS: u32 = 40;
pub const DEFAULT_PLAINTEXT_BOUND: i64 = 1_000_000_000_000;

/// Validated parameter set governing one cluster: the plaintext bound
/// `M`, the statistical masking exponent `sigma` and the share count `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskParams {
    plaintext_bound: i64,
    mask_bits: u32,
    share_count: usize,
    mask_range: i128,
}

impl MaskParams {
    pub fn new(plaintext_bound: i64, mask_bits: u32, share_count: usize) -> Result<Self> {
        if plaintext_bound < 1 {
            return Err(OdesError::Config(format!(
                "plaintext bound must be >= 1, got {plaintext_bound}"
            )));
        }
        if !(MIN_SHARE_COUNT..=MAX_SHARE_COUNT).contains(&share_count) {
            return Err(OdesError::Config(format!(
                "share count must be in [{MIN_SHARE_COUNT}, {MAX_SHARE_COUNT}], got {share_count}"
            )));
        }
        if !(MIN_MASK_BITS..=MAX_MASK_BITS).contains(&mask_bits) {
            return Err(OdesError::Config(format!(
                "mask bits must be in [{MIN_MASK_BITS}, {MAX_MASK_BITS}], got {mask_bits}"
            )));
        }
        // Every intermediate the protocol can form is bounded by
        // 2m * (m*B + M): shares by m*B + M, deltas by twice that, and
        // the delta sum by m times a delta. Reject parameter sets where
        // that headroom does not fit i128.
        let m = share_count as i128;
        let bound = plaintext_bound as i128;
        let mask_range = bound
            .checked_mul(1i128 << mask_bits)
            .ok_or_else(|| OdesError::Config("mask range M * 2^sigma overflows".into()))?;
        mask_range
            .checked_mul(m)
            .and_then(|mb| mb.checked_add(bound))
            .and_then(|lim| lim.checked_mul(2 * m))
            .ok_or_else(|| OdesError::Config("share magnitude limit overflows i128".into()))?;
        Ok(Self {
            plaintext_bound,
            mask_bits,
            share_count,
            mask_range,
        })
    }

    /// Parameters with the default bound `10^12` and `sigma = 40`.
    pub fn with_share_count(share_count: usize) -> Result<Self> {
        Self::new(DEFAULT_PLAINTEXT_BOUND, DEFAULT_MASK_BITS, share_count)
    }

    pub fn plaintext_bound(&self) -> i64 {
        self.plaintext_bound
    }

    pub fn mask_bits(&self) -> u32 {
        self.mask_bits
    }

    pub fn share_count(&self) -> usize {
        self.share_count
    }

    /// `B = M * 2^sigma`, the half-width of the mask range.
    pub fn mask_range(&self) -> i128 {
        self.mask_range
    }

    /// Largest magnitude any single share can take: `m*B + M`.
    pub fn share_magnitude_limit(&self) -> i128 {
        self.mask_range * self.share_count as i128 + self.plaintext_bound as i128
    }

    /// Largest magnitude a delta can take: `2 * (m*B + M)`.
    pub fn delta_magnitude_limit(&self) -> i128 {
        2 * self.share_magnitude_limit()
    }

    pub fn check_plaintext(&self, value: i64) -> Result<()> {
        if value.checked_abs().is_none_or(|a| a > self.plaintext_bound) {
            return Err(OdesError::BoundExceeded {
                value,
                bound: self.plaintext_bound,
            });
        }
        Ok(())
    }
}

/// The m-way additive decomposition of one plaintext; position `j` is
/// destined for server `j`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ShareVector {
    shares: Vec<i128>,
}

impl ShareVector {
    /// Assembles a vector from raw shares (e.g. collected query
    /// responses); no invariant beyond non-emptiness is checked here,
    /// `reconstruct` validates the length.
    pub fn from_shares(shares: Vec<i128>) -> Self {
        Self { shares }
    }

    pub fn shares(&self) -> &[i128] {
        &self.shares
    }

    pub fn len(&self) -> usize {
        self.shares.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shares.is_empty()
    }
}

/// Per-server local share difference broadcast during one comparison
/// round; the only value derived from shares that ever crosses between
/// servers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Delta {
    pub server_id: u16,
    pub round: u64,
    pub value: i128,
}

/// Splits `value` into `m` shares: positions `1..m` are uniform masks
/// over `[-B, B]`, position `0` completes the sum, and the result is
/// shuffled so the completing share's destination is unpredictable.
pub fn share(value: i64, params: &MaskParams, rng: &mut dyn RandomSource) -> Result<ShareVector> {
    params.check_plaintext(value)?;
    let mut shares = share_unpermuted(value, params, rng);
    // Fisher-Yates; identical distribution to enumerating permutations.
    for j in (1..shares.len()).rev() {
        let k = rng.index_draw(j + 1);
        shares.swap(j, k);
    }
    debug_assert!(shares
        .iter()
        .all(|s| s.abs() <= params.share_magnitude_limit()));
    debug_assert_eq!(shares.iter().sum::<i128>(), value as i128);
    Ok(ShareVector { shares })
}

/// The decomposition before shuffling, completing share first. Exposed
/// so distribution tests can target the one share that depends on the
/// plaintext.
pub fn share_unpermuted(value: i64, params: &MaskParams, rng: &mut dyn RandomSource) -> Vec<i128> {
    let m = params.share_count();
    let b = params.mask_range();
    let mut shares = vec![0i128; m];
    let mut masked = 0i128;
    for slot in shares.iter_mut().skip(1) {
        let r = rng.mask_draw(b);
        *slot = r;
        masked += r;
    }
    shares[0] = value as i128 - masked;
    shares
}

/// Exact integer sum of the shares; the inverse of [`share`].
pub fn reconstruct(params: &MaskParams, sv: &ShareVector) -> Result<i64> {
    if sv.len() != params.share_count() {
        return Err(OdesError::LengthMismatch {
            got: sv.len(),
            expected: params.share_count(),
        });
    }
    let sum: i128 = sv.shares().iter().sum();
    i64::try_from(sum).map_err(|_| {
        OdesError::Protocol(format!(
            "reconstructed value {sum} exceeds the plaintext domain"
        ))
    })
}

/// One server's contribution to a comparison round: the difference of
/// two locally held shares.
pub fn local_delta(own_left: i128, own_right: i128, server_id: u16, round: u64) -> Delta {
    Delta {
        server_id,
        round,
        value: own_left - own_right,
    }
}

/// Aggregates one delta per server into the plaintext ordering: the
/// sign of the delta sum equals the sign of `left - right`.
pub fn aggregate_sign(params: &MaskParams, deltas: &[Delta]) -> Result<Ordering> {
    let m = params.share_count();
    let mut seen = vec![false; m];
    let mut round = None;
    let mut sum = 0i128;
    for d in deltas {
        debug_assert!(d.value.abs() <= params.delta_magnitude_limit());
        let id = d.server_id as usize;
        if id >= m || seen[id] {
            return first_missing(&seen);
        }
        seen[id] = true;
        match round {
            None => round = Some(d.round),
            Some(r) if r != d.round => {
                return Err(OdesError::RoundMismatch {
                    first: r,
                    other: d.round,
                })
            }
            _ => {}
        }
        sum += d.value;
    }
    if deltas.len() != m {
        return first_missing(&seen);
    }
    Ok(sum.cmp(&0))
}

fn first_missing<T>(seen: &[bool]) -> Result<T> {
    let id = seen.iter().position(|s| !s).unwrap_or(0);
    Err(OdesError::MissingDelta(id as u16))
}
