//! Counter-based random streams.
//!
//! Algorithm `splitmix64-counter-v1`:
//!
//! * `mix64(z)`: the SplitMix64 finalizer
//!   `z ^= z >> 30; z *= 0xbf58476d1ce4e5b9; z ^= z >> 27; z *= 0x94d049bb133111eb; z ^= z >> 31`
//!   (wrapping arithmetic).
//! * draw `k` (k = 1, 2, ...) of a stream with key `s` is `mix64(s + k * 0x9e3779b97f4a7c15)`.
//! * child stream `i` of key `s` has key `mix64(s + mix64(i ^ 0xd1b54a32d192ed03))`.
//! * `f64` in `[0, 1)`: `(draw >> 11) * 2^-53`.
//! * standard normal: Box-Muller on two uniforms, `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`.
//! * index below `n`: `(draw as u128 * n) >> 64`.

pub const RNG_ALGORITHM: &str = "splitmix64-counter-v1";

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;
const SPLIT_SALT: u64 = 0xd1b5_4a32_d192_ed03;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Key of child stream `index` under `key`.
#[inline]
pub fn split(key: u64, index: u64) -> u64 {
    mix64(key.wrapping_add(mix64(index ^ SPLIT_SALT)))
}

/// Fixed sub-stream tags so that independent draws inside one work item
/// never share a stream.
pub mod tags {
    pub const EVAL: u64 = 1;
    pub const INSTANCE: u64 = 2;
    pub const TRIPLE: u64 = 3;
    pub const ONSET: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const NOISE: u64 = 6;
    pub const FOLDS: u64 = 7;
    pub const ATTEMPT: u64 = 8;
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// A child stream; does not advance `self`.
    pub fn child(&self, index: u64) -> Self {
        Self::new(split(self.key, index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[-1, 1)`.
    pub fn symmetric(&mut self) -> f64 {
        2.0 * self.next_f64() - 1.0
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_stream_values() {
        // SplitMix64 seeded with 0 yields these as its first outputs.
        let mut rng = CounterRng::new(0);
        assert_eq!(rng.next_u64(), 0xe220_a839_7b1d_cdaf);
        assert_eq!(rng.next_u64(), 0x6e78_9e6a_a1b9_65f4);
        assert_eq!(rng.next_u64(), 0x06c4_5d18_8009_454f);
    }

    #[test]
    fn children_are_independent_of_parent_position() {
        let mut a = CounterRng::new(42);
        let b = CounterRng::new(42);
        a.next_u64();
        assert_eq!(a.child(3).next_u64(), b.child(3).next_u64());
        assert_ne!(b.child(3).next_u64(), b.child(4).next_u64());
    }

    #[test]
    fn uniform_ranges_and_moments() {
        let mut rng = CounterRng::new(7);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let u = rng.symmetric();
            assert!((-1.0..1.0).contains(&u));
            sum += u;
            sum_sq += u * u;
        }
        assert!((sum / n as f64).abs() < 0.01);
        assert!((sum_sq / n as f64 - 1.0 / 3.0).abs() < 0.01);
    }

    #[test]
    fn normal_moments() {
        let mut rng = CounterRng::new(11);
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.01);
    }

    #[test]
    fn below_and_shuffle() {
        let mut rng = CounterRng::new(3);
        let mut counts = [0usize; 5];
        for _ in 0..50_000 {
            counts[rng.below(5)] += 1;
        }
        assert!(counts.iter().all(|&c| (9_500..10_500).contains(&c)));
        let mut items: Vec<usize> = (0..100).collect();
        rng.shuffle(&mut items);
        let mut sorted = items.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(items, sorted);
    }
}
