//! Seeded random streams.
//!
//! Every stochastic component draws from its own ChaCha stream derived from
//! the master seed, so adding draws in one component never shifts another.
//! Per-particle noise uses counter-based access (stream + word position) so
//! particle `i` sees the same numbers regardless of how work is split across
//! threads.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Named stream identifiers. The high 32 bits of a ChaCha stream id carry the
/// purpose, the low 32 bits an optional step counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Trajectory = 1,
    Odometry = 2,
    Init = 3,
    Observation = 4,
    Resampling = 5,
    Propagation = 6,
    Augmentation = 7,
    Projection = 8,
}

pub fn stream(seed: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose as u64) << 32);
    rng
}

/// Counter-addressed standard normals for one (seed, purpose, step) triple.
#[derive(Clone)]
pub struct CounterNormals {
    base: ChaCha8Rng,
}

impl CounterNormals {
    pub fn new(seed: u64, purpose: Purpose, step: u32) -> Self {
        let mut base = ChaCha8Rng::seed_from_u64(seed);
        base.set_stream(((purpose as u64) << 32) | step as u64);
        Self { base }
    }

    /// Two independent N(0, 1) values owned by `index`.
    pub fn pair(&self, index: usize) -> (f64, f64) {
        let mut rng = self.base.clone();
        // each index owns two u64 draws, i.e. four 32-bit words
        rng.set_word_pos(index as u128 * 4);
        box_muller(rng.next_u64(), rng.next_u64())
    }
}

fn box_muller(a: u64, b: u64) -> (f64, f64) {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    // u1 in (0, 1] keeps the log finite
    let u1 = ((a >> 11) + 1) as f64 * SCALE;
    let u2 = (b >> 11) as f64 * SCALE;
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}
