//! Counter-based deterministic random numbers.
//!
//! Every draw is a pure function of `(seed, stream, index)`, so cohorts,
//! parameter initializations, and batch orders reproduce bit-for-bit across
//! runs regardless of thread count or call interleaving. Streams are cheap
//! to derive, which lets per-record work (one stream per patient, per
//! parameter group, per epoch) run in any order and still agree.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The raw counter generator: a well-mixed 64-bit word for `(seed, stream, index)`.
pub fn mix(seed: u64, stream: u64, index: u64) -> u64 {
    let z = splitmix(seed.wrapping_add(GOLDEN.wrapping_mul(stream.wrapping_add(1))));
    splitmix(z ^ index.wrapping_mul(0xff51_afd7_ed55_8ccd).wrapping_add(GOLDEN))
}

/// A positioned view into one stream of the counter generator.
///
/// Holds no entropy of its own: `(seed, stream, index)` fully determine every
/// future draw, and [`Rng::substream`] derives independent child streams.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    index: u64,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Rng {
            seed,
            stream,
            index: 0,
        }
    }

    /// Derives an independent child stream tagged by `tag`.
    pub fn substream(&self, tag: u64) -> Rng {
        Rng::new(self.seed, mix(self.seed, self.stream, tag ^ 0xa5a5_5a5a_0f0f_f0f0))
    }

    pub fn next_u64(&mut self) -> u64 {
        let x = mix(self.seed, self.stream, self.index);
        self.index += 1;
        x
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller (consumes two counter words).
    pub fn normal(&mut self) -> f64 {
        // (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, n)` via the multiply-shift reduction.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
