//! Deterministic, splittable random number generation.
//!
//! The generator is a SplitMix64 counter stream: the state advances by a
//! fixed odd increment and every output is a finalizer hash of the state.
//! Child streams are derived from the parent's construction seed and a
//! string label, so `split` is a pure function of `(seed, label)` and is
//! unaffected by how many draws the parent has made. Runs executing in
//! parallel therefore cannot perturb each other's streams.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over raw bytes; stable across platforms and compiler versions.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Counter-based splittable generator.
///
/// Identical seeds produce identical streams; children split with distinct
/// labels never share draws (up to 64-bit hash collisions).
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, state: seed }
    }

    /// The seed this stream was constructed with.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent child stream identified by `label`.
    ///
    /// Splitting depends only on the construction seed, not on draw
    /// position; the same `(seed, label)` pair always yields the same child.
    pub fn split(&self, label: &str) -> Rng {
        let tag = fnv1a64(label.as_bytes()).wrapping_mul(GOLDEN_GAMMA);
        Rng::new(mix64(self.seed ^ tag))
    }

    /// Like [`split`](Self::split) but with an index mixed in, for families
    /// of streams ("sample", 0..n).
    pub fn split_indexed(&self, label: &str, index: u64) -> Rng {
        let tag = fnv1a64(label.as_bytes())
            .wrapping_mul(GOLDEN_GAMMA)
            .wrapping_add(mix64(index.wrapping_add(1)));
        Rng::new(mix64(self.seed ^ tag))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in [0, n). Lemire's multiply-shift; the bias is
    /// below 2^-64 per draw for the small n used here.
    pub fn gen_range(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    /// Bernoulli draw with success probability `p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.gen_range(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_is_position_independent() {
        let mut parent = Rng::new(7);
        let before = parent.split("child");
        for _ in 0..10 {
            parent.next_u64();
        }
        let after = parent.split("child");
        assert_eq!(before.state, after.state);
    }

    #[test]
    fn distinct_labels_diverge() {
        let parent = Rng::new(7);
        let mut a = parent.split("weights");
        let mut b = parent.split("data");
        let draws_a: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let draws_b: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(draws_a, draws_b);
    }

    #[test]
    fn uniform_moments_sane() {
        let mut rng = Rng::new(1);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| rng.uniform()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "uniform mean {mean}");
    }

    #[test]
    fn normal_moments_sane() {
        let mut rng = Rng::new(2);
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "normal mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "normal var {var}");
    }

    #[test]
    fn gen_range_in_bounds_and_covers() {
        let mut rng = Rng::new(3);
        let mut seen = [false; 10];
        for _ in 0..1000 {
            let v = rng.gen_range(10);
            assert!(v < 10);
            seen[v] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
