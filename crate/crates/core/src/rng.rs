//! Deterministic random streams keyed by (seed, replication, block).
//!
//! ChaCha is counter-based: the key comes from the seed and the 64-bit
//! stream id selects an independent sequence, so replication r draws the
//! same numbers no matter which worker runs it or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Variable groups that get their own stream within a replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Block {
    Pi = 0,
    Instruments = 1,
    Errors = 2,
    Folds = 3,
}

const BLOCK_BITS: u32 = 4;

pub fn stream(seed: u64, rep: u64, block: Block) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((rep << BLOCK_BITS) | block as u64);
    rng
}
