//! Counter-based noise streams.
//!
//! Every trajectory gets its own ChaCha8 stream keyed by the master seed and
//! selected by the trajectory index, so trajectory `i` sees the same signs no
//! matter which worker simulates it or in what order.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::NoiseDraw;

#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    word: u64,
    bits_left: u32,
}

impl NoiseStream {
    pub fn new(master_seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(index);
        Self {
            rng,
            word: 0,
            bits_left: 0,
        }
    }

    /// Draws `m` fresh bits (one per noise channel) and returns them as a pattern.
    ///
    /// Bit `k` set means `ξᵏ = −1`. A step never straddles two words.
    #[inline]
    pub fn next_pattern(&mut self, m: usize) -> usize {
        debug_assert!((1..=32).contains(&m));
        let m = m as u32;
        if self.bits_left < m {
            self.word = self.rng.next_u64();
            self.bits_left = 64;
        }
        let pattern = (self.word & ((1u64 << m) - 1)) as usize;
        self.word >>= m;
        self.bits_left -= m;
        pattern
    }

    pub fn next_draw(&mut self, m: usize) -> NoiseDraw {
        if m <= 32 {
            NoiseDraw::from_pattern(self.next_pattern(m), m)
        } else {
            let signs = (0..m)
                .map(|_| if self.next_pattern(1) == 1 { -1.0 } else { 1.0 })
                .collect();
            NoiseDraw::new(signs).expect("signs are ±1 by construction")
        }
    }
}
