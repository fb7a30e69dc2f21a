//! Counter-based deterministic random numbers.
//!
//! Every consumer seeds its own generator from `(seed, stream, counter)` —
//! typically `(run seed, purpose, iteration/ray index)` — so draws depend only
//! on those keys, never on batch order or worker count. This is what makes
//! training byte-reproducible under any thread configuration.

/// Draw purposes, kept disjoint so e.g. batch assembly at iteration k never
/// shares a sequence with per-ray jitter at the same iteration.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const COARSE_JITTER: u64 = 3;
    pub const FINE_SAMPLES: u64 = 4;
    pub const SOLAR: u64 = 5;
    pub const SIGMA_NOISE: u64 = 6;
    pub const TEST: u64 = 99;
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline(always)]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// SplitMix64 walker over a state derived by hashing the three keys.
#[derive(Debug, Clone)]
pub struct CounterRng {
    state: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64, counter: u64) -> Self {
        let mut s = mix(seed ^ GOLDEN);
        s = mix(s ^ stream.wrapping_mul(0xff51_afd7_ed55_8ccd));
        s = mix(s ^ counter.wrapping_mul(0xc4ce_b9fe_1a85_ec53));
        CounterRng { state: s }
    }

    #[inline(always)]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in [0, 1).
    #[inline(always)]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    #[inline(always)]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_f64().max(1e-300);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in [0, n). `n` must be positive.
    #[inline(always)]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // multiply-shift; bias is < 2^-53 for any n we use
        (self.next_f64() * n as f64) as usize % n
    }
}
