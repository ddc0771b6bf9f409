pub mod anchors;
pub mod attention;
pub mod cli;
pub mod clustering;
pub mod error;
pub mod ingest;
pub mod tape;
pub mod tensor;
pub mod theory;
pub mod trainer;

pub use error::{BgError, Result};

/// CLI entry point; returns the process exit code.
pub fn run() -> i32 {
    cli::run()
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Every stochastic component draws from a ChaCha stream keyed by an explicit
/// seed so runs replay bit-for-bit.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
