//! Reproducible per-replication random streams.
//!
//! Every replication owns independent ChaCha8 streams keyed by
//! `(master_seed, replication index, lane)`. Results therefore depend only on
//! the master seed and never on how replications are scheduled over workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Independent randomness consumers inside one replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lane {
    Observation = 0,
    Harvest = 1,
    Gate = 2,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `lane` of replication `index` under `master_seed`.
pub fn stream(master_seed: u64, index: u64, lane: Lane) -> SimRng {
    let mut state = master_seed ^ (lane as u64).wrapping_mul(0xd1b5_4a32_d192_ed03);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(index);
    rng
}

/// The three streams one replication consumes.
#[derive(Debug, Clone)]
pub struct RunStreams {
    pub observation: SimRng,
    pub harvest: SimRng,
    pub gate: SimRng,
}

impl RunStreams {
    pub fn new(master_seed: u64, index: u64) -> Self {
        Self {
            observation: stream(master_seed, index, Lane::Observation),
            harvest: stream(master_seed, index, Lane::Harvest),
            gate: stream(master_seed, index, Lane::Gate),
        }
    }
}

/// Seed for an independent sub-experiment tagged `tag`.
pub fn sub_seed(master_seed: u64, tag: u64) -> u64 {
    let mut state = master_seed ^ tag.wrapping_mul(0x2545_f491_4f6c_dd1d);
    splitmix64(&mut state)
}

/// Runs `n` replications in parallel and returns their outputs in index order.
pub fn replicate<T, F>(n: usize, master_seed: u64, f: F) -> crate::Result<Vec<T>>
where
    T: Send,
    F: Fn(u64, &mut RunStreams) -> crate::Result<T> + Sync + Send,
{
    use rayon::prelude::*;
    (0..n as u64)
        .into_par_iter()
        .map(|i| f(i, &mut RunStreams::new(master_seed, i)))
        .collect()
}

/// Runs `f` inside a rayon pool with `workers` threads (`None` = rayon default).
///
/// Parallel code in this crate reduces per-replication records in index
/// order, so the worker count never changes results.
pub fn with_workers<R, F>(workers: Option<usize>, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("failed to build worker pool")
            .install(f),
        None => f(),
    }
}
