//! Seeded pseudo-random numbers.
//!
//! Everything random in this crate funnels through [`SplitMix64`] so that
//! datasets, parameter initialization and training runs reproduce
//! bit-exactly from a single seed. Gaussian draws use the Marsaglia polar
//! method with `libm::log`, which keeps the stream identical across
//! platforms (no dependence on the system libm).

/// SplitMix64 generator. Small state, passes BigCrush, and cheap enough
/// to instantiate per dialogue.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
    cached_normal: Option<f64>,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed, cached_normal: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`. The modulo bias is below 2^-50 for the
    /// range sizes used here.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (self.next_u64() % n as u64) as usize
    }

    pub fn next_bool(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal draw (Marsaglia polar, pairs cached).
    pub fn normal_std(&mut self) -> f64 {
        if let Some(v) = self.cached_normal.take() {
            return v;
        }
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let m = (-2.0 * libm::log(s) / s).sqrt();
                self.cached_normal = Some(v * m);
                return u * m;
            }
        }
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.normal_std()
    }

    /// Gumbel(0, 1) draw via inverse transform.
    pub fn gumbel_std(&mut self) -> f64 {
        // Clamp away from 0 so the double log stays finite.
        let u = self.next_f64().max(1e-300);
        -libm::log(-libm::log(u))
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Derives a child seed from a base seed, a textual lane label and an
/// index. Distinct lanes never share a stream even for equal indices.
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    // FNV-1a over the label, then a splitmix-style finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    let mut z = base ^ h.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
