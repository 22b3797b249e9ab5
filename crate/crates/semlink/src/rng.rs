//! Splittable counter-based random number generator.
//!
//! One master seed expands into independent named streams (channel draws,
//! dataset synthesis, weight init, noise, ...) so that changing how one
//! component consumes randomness never perturbs the others. The generator is
//! a keyed SplitMix64 permutation over a 64-bit counter: stateless apart from
//! the counter, deterministic across platforms, and cheap to split.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_label(label: &str) -> u64 {
    // FNV-1a over the label bytes.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// An independent random stream identified by a key; drawing advances only
/// the local counter.
#[derive(Debug, Clone)]
pub struct RngStream {
    key: u64,
    ctr: u64,
    spare_normal: Option<f64>,
}

impl RngStream {
    /// Derive a named stream from the master seed.
    pub fn derive(master_seed: u64, label: &str) -> Self {
        RngStream {
            key: mix64(master_seed ^ hash_label(label)),
            ctr: 0,
            spare_normal: None,
        }
    }

    /// Split off an indexed substream (e.g. one per sample).
    pub fn substream(&self, index: u64) -> Self {
        RngStream {
            key: mix64(self.key ^ mix64(index.wrapping_add(1).wrapping_mul(GOLDEN))),
            ctr: 0,
            spare_normal: None,
        }
    }

    /// Split off a labelled substream.
    pub fn labeled(&self, label: &str) -> Self {
        RngStream {
            key: mix64(self.key ^ hash_label(label)),
            ctr: 0,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let out = mix64(self.key.wrapping_add(self.ctr.wrapping_mul(GOLDEN)));
        self.ctr = self.ctr.wrapping_add(1);
        out
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). Lemire's widening-multiply reduction;
    /// the modulo bias is below 2^-64 and irrelevant here, determinism is not.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Uniform integer in [lo, hi] inclusive; a degenerate range yields lo.
    pub fn int_range(&mut self, lo: u64, hi: u64) -> u64 {
        if hi <= lo {
            return lo;
        }
        lo + self.below(hi - lo + 1)
    }

    /// Standard normal via Box-Muller (caches the second draw).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0,1] so ln never sees zero.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Circularly-symmetric complex Gaussian with total variance `var`
    /// (each component has variance var/2). Returns (re, im).
    pub fn complex_normal(&mut self, var: f64) -> (f64, f64) {
        let s = (var / 2.0).sqrt();
        (s * self.normal(), s * self.normal())
    }

    /// Fisher-Yates shuffle of a slice of indices.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}
