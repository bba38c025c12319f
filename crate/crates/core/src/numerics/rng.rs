use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Counter-based SplitMix64 stream.
///
/// Output `n` is `mix(seed + (n + 1)·φ)`, so `(seed, position)` is the entire state and
/// a restored stream continues bit-exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng {
    seed: u64,
    position: u64,
}

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, position: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    /// Independent stream derived from this generator's seed and a label.
    pub fn fork(&self, label: u64) -> Rng {
        Rng::new(mix(self.seed ^ mix(label.wrapping_add(GOLDEN))))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.position = self.position.wrapping_add(1);
        mix(self.seed.wrapping_add(self.position.wrapping_mul(GOLDEN)))
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)` (Lemire's multiply-shift with rejection).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Standard normal via Box–Muller; consumes two draws, discards the sine branch.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}

/// One Bernoulli draw per entry of `p`; entries equal to 0 or 1 are deterministic.
pub fn bernoulli_vector(p: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
    p.iter()
        .map(|&pi| {
            if !(0.0..=1.0).contains(&pi) {
                return Err(Error::domain(format!("bernoulli probability {pi} outside [0, 1]")));
            }
            // Endpoints consume no draw.
            Ok(if pi == 1.0 || (pi > 0.0 && rng.bernoulli(pi)) { 1.0 } else { 0.0 })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_probabilities() {
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            assert_eq!(bernoulli_vector(&[0.0, 1.0, 0.0], &mut rng).unwrap(), vec![0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn law_of_large_numbers() {
        let mut rng = Rng::new(12345);
        let p = vec![0.5; 100_000];
        let xs = bernoulli_vector(&p, &mut rng).unwrap();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn same_seed_same_vector() {
        let p = vec![0.3; 64];
        let a = bernoulli_vector(&p, &mut Rng::new(9)).unwrap();
        let b = bernoulli_vector(&p, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_probability() {
        assert!(bernoulli_vector(&[0.2, 1.5], &mut Rng::new(0)).is_err());
        assert!(bernoulli_vector(&[-0.1], &mut Rng::new(0)).is_err());
    }

    #[test]
    fn serialized_state_continues_exactly() {
        let mut rng = Rng::new(77);
        for _ in 0..1000 {
            rng.next_u64();
        }
        let saved = serde_json::to_string(&rng).unwrap();
        let mut restored: Rng = serde_json::from_str(&saved).unwrap();
        for _ in 0..1000 {
            assert_eq!(rng.next_u64(), restored.next_u64());
        }
    }

    #[test]
    fn below_is_in_range_and_roughly_uniform() {
        let mut rng = Rng::new(5);
        let mut counts = [0usize; 7];
        for _ in 0..70_000 {
            counts[rng.below(7) as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() < 400.0, "{counts:?}");
        }
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::new(99);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.02);
    }

    #[test]
    fn forks_differ() {
        let base = Rng::new(1);
        let mut a = base.fork(1);
        let mut b = base.fork(2);
        assert_ne!(a.next_u64(), b.next_u64());
    }
}
