//! Injectable randomness for share generation.
//!
//! The protocols only ever need two kinds of draws: a mask uniform over
//! `[-B, B]` and a shuffle index. Keeping the source behind a trait lets
//! tests and the simulator run fully deterministic while production use
//! draws from OS entropy.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

pub trait RandomSource {
    /// Uniform draw over the inclusive range `[-bound, bound]`.
    fn mask_draw(&mut self, bound: i128) -> i128;

    /// Uniform draw over `[0, upper)`; `upper >= 1`.
    fn index_draw(&mut self, upper: usize) -> usize;
}

/// Deterministic source seeded from a `u64`; used by tests, the
/// simulator and any run that passes `--seed`.
pub struct SeededRandomSource {
    rng: ChaCha12Rng,
}

impl SeededRandomSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }
}

impl RandomSource for SeededRandomSource {
    fn mask_draw(&mut self, bound: i128) -> i128 {
        self.rng.gen_range(-bound..=bound)
    }

    fn index_draw(&mut self, upper: usize) -> usize {
        self.rng.gen_range(0..upper)
    }
}

/// OS-entropy source for normal operation.
pub struct OsRandomSource;

impl RandomSource for OsRandomSource {
    fn mask_draw(&mut self, bound: i128) -> i128 {
        rand::rngs::OsRng.gen_range(-bound..=bound)
    }

    fn index_draw(&mut self, upper: usize) -> usize {
        rand::rngs::OsRng.gen_range(0..upper)
    }
}

/// Replays a fixed script of draws; lets tests pin the exact shares a
/// `share()` call produces. Panics when the script runs dry.
pub struct ScriptedRandomSource {
    masks: std::collections::VecDeque<i128>,
    indices: std::collections::VecDeque<usize>,
}

impl ScriptedRandomSource {
    pub fn new(masks: &[i128], indices: &[usize]) -> Self {
        Self {
            masks: masks.iter().copied().collect(),
            indices: indices.iter().copied().collect(),
        }
    }

    /// Script that keeps the generated share order as-is: every shuffle
    /// draw returns the highest admissible index, making the
    /// Fisher-Yates pass a no-op.
    pub fn identity_permutation(masks: &[i128]) -> Self {
        Self {
            masks: masks.iter().copied().collect(),
            indices: std::collections::VecDeque::new(),
        }
    }
}

impl RandomSource for ScriptedRandomSource {
    fn mask_draw(&mut self, bound: i128) -> i128 {
        let v = self
            .masks
            .pop_front()
            .expect("scripted mask draws exhausted");
        assert!(
            v.abs() <= bound,
            "scripted mask {v} outside [-{bound}, {bound}]"
        );
        v
    }

    fn index_draw(&mut self, upper: usize) -> usize {
        match self.indices.pop_front() {
            Some(i) => {
                assert!(i < upper, "scripted index {i} not below {upper}");
                i
            }
            // identity permutation: swap element with itself
            None => upper - 1,
        }
    }
}

/// Adapter exposing any `RngCore` as a `RandomSource`.
pub struct RngAdapter<R: RngCore>(pub R);

impl<R: RngCore> RandomSource for RngAdapter<R> {
    fn mask_draw(&mut self, bound: i128) -> i128 {
        self.0.gen_range(-bound..=bound)
    }

    fn index_draw(&mut self, upper: usize) -> usize {
        self.0.gen_range(0..upper)
    }
}
