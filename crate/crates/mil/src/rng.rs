//! Seeded random stream: SplitMix64 expands the seed into the 256-bit state
//! of xoshiro256**. Identical seed gives an identical sequence on every
//! platform.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SplitMix64 step, used for state expansion. Public so tests can pin the
/// reference outputs.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct RandomStream {
    state: [u64; 4],
    seed: u64,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        RandomStream { state, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// xoshiro256** next.
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> Result<f64> {
        if !(lo < hi) {
            return Err(Error::InvalidArgument(format!(
                "uniform bounds lo={lo} hi={hi}"
            )));
        }
        Ok(lo + self.next_f64() * (hi - lo))
    }

    pub fn uniform_tensor(&mut self, lo: f64, hi: f64, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.uniform(lo, hi)?);
        }
        Tensor::new(shape.to_vec(), data)
    }

    /// Integer in [lo, hi] inclusive.
    pub fn uniform_int(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        let span = (hi - lo + 1) as f64;
        lo + (self.next_f64() * span) as usize
    }

    /// Standard normal via Box-Muller. Each call consumes exactly two
    /// uniform draws (u1 then u2) and returns sqrt(-2 ln(1-u1)) cos(2 pi u2).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn normal_scaled(&mut self, mean: f64, sigma: f64) -> f64 {
        mean + sigma * self.normal()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.uniform_int(0, i);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix64_reference_outputs() {
        // Published reference sequence for seed 0.
        let mut s = 0u64;
        assert_eq!(splitmix64(&mut s), 0xE220A8397B1DCDAF);
        assert_eq!(splitmix64(&mut s), 0x6E789E6AA1B965F4);
        assert_eq!(splitmix64(&mut s), 0x06C45D188009454F);
    }

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RandomStream::new(42);
        let mut b = RandomStream::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn uniform_mean_near_half() {
        let mut rng = RandomStream::new(7);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| rng.next_f64()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn uniform_rejects_bad_bounds() {
        let mut rng = RandomStream::new(1);
        assert!(rng.uniform(1.0, 1.0).is_err());
        assert!(rng.uniform(2.0, 1.0).is_err());
    }

    #[test]
    fn uniform_respects_bounds() {
        let mut rng = RandomStream::new(3);
        for _ in 0..1000 {
            let v = rng.uniform(-2.0, 3.0).unwrap();
            assert!((-2.0..3.0).contains(&v));
        }
    }

    #[test]
    fn normal_moments() {
        let mut rng = RandomStream::new(11);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }
}
