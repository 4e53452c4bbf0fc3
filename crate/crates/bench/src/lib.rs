//! Fixtures shared by the benchmarks.

use semem::rng::{substream, Rng};
use semem::Memory;

pub use semem;

/// Uniform keys in [-1, 1), values cycling through `vocab_size`.
pub fn random_memory(rows: usize, d: usize, vocab_size: u32, seed: u64) -> Memory {
    let mut rng = substream(seed, "bench-memory", 0);
    let mut memory = Memory::new(d);
    for i in 0..rows {
        memory.append(&random_key(d, &mut rng), i as u32 % vocab_size).unwrap();
    }
    memory
}

pub fn random_key(d: usize, rng: &mut Rng) -> Vec<f32> {
    use rand::Rng as _;
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}
