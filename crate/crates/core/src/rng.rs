//! Seeded pseudo-random generation shared by every stage of the pipeline.
//!
//! The generator is xoshiro256** with its 256-bit state expanded from a
//! 64-bit seed by SplitMix64, exactly as in the reference C implementation
//! by Blackman and Vigna. Bounded integers use Lemire's multiply-shift
//! rejection method and normals use the cosine branch of Box–Muller, so an
//! implementation in any language that follows the same three rules produces
//! the same stream bit-for-bit.

use crate::error::{Error, Result};

/// SplitMix64, used only to expand seeds.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
}

/// xoshiro256** generator with serializable state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub const STATE_BYTES: usize = 32;

    pub fn seed_from_u64(seed: u64) -> Self {
        let mut sm = SplitMix64::new(seed);
        let s = [sm.next_u64(), sm.next_u64(), sm.next_u64(), sm.next_u64()];
        Self { s }
    }

    /// Derives an independent stream for a named purpose, so that adding a
    /// consumer of randomness in one stage never shifts another stage.
    pub fn derive(seed: u64, stream: &str) -> Self {
        let mut h = seed ^ 0x6c65_6467_6572_6c6d;
        for b in stream.bytes() {
            h = SplitMix64::new(h ^ u64::from(b)).next_u64();
        }
        Self::seed_from_u64(h)
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        let mut m = u128::from(self.next_u64()) * u128::from(n);
        let mut low = m as u64;
        if low < n {
            let threshold = n.wrapping_neg() % n;
            while low < threshold {
                m = u128::from(self.next_u64()) * u128::from(n);
                low = m as u64;
            }
        }
        (m >> 64) as u64
    }

    /// Uniform double in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw (Box–Muller, cosine branch; one draw per pair).
    pub fn normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// In-place Fisher–Yates shuffle, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    pub fn to_bytes(&self) -> [u8; Self::STATE_BYTES] {
        let mut out = [0u8; Self::STATE_BYTES];
        for (i, word) in self.s.iter().enumerate() {
            out[i * 8..(i + 1) * 8].copy_from_slice(&word.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != Self::STATE_BYTES {
            return Err(Error::Format(format!(
                "rng state must be {} bytes, got {}",
                Self::STATE_BYTES,
                bytes.len()
            )));
        }
        let mut s = [0u64; 4];
        for (i, word) in s.iter_mut().enumerate() {
            *word = u64::from_le_bytes(bytes[i * 8..(i + 1) * 8].try_into().unwrap());
        }
        if s == [0; 4] {
            return Err(Error::Format("rng state is all zero".into()));
        }
        Ok(Self { s })
    }
}

/// Seeded permutation of `[0, n)`.
pub fn global_permute(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = Rng::seed_from_u64(seed);
    permute_with(&mut rng, n)
}

pub(crate) fn permute_with(rng: &mut Rng, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    perm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_vector() {
        // First outputs of SplitMix64 seeded with 1234567 (reference C code).
        let mut sm = SplitMix64::new(1234567);
        assert_eq!(sm.next_u64(), 6457827717110365317);
        assert_eq!(sm.next_u64(), 3203168211198807973);
        assert_eq!(sm.next_u64(), 9817491932198370423);
    }

    #[test]
    fn below_stays_in_range() {
        let mut rng = Rng::seed_from_u64(9);
        for n in [1u64, 2, 3, 7, 1000, u64::MAX] {
            for _ in 0..200 {
                assert!(rng.below(n) < n);
            }
        }
    }

    #[test]
    fn permute_trivial_cases() {
        assert!(global_permute(0, 1).is_empty());
        assert_eq!(global_permute(1, 77), vec![0]);
        assert_eq!(global_permute(50, 3), global_permute(50, 3));
        assert_ne!(global_permute(50, 3), global_permute(50, 4));
    }

    #[test]
    fn state_round_trip() {
        let mut rng = Rng::seed_from_u64(42);
        rng.next_u64();
        let restored = Rng::from_bytes(&rng.to_bytes()).unwrap();
        assert_eq!(rng, restored);
        assert!(Rng::from_bytes(&[0u8; 32]).is_err());
        assert!(Rng::from_bytes(&[1u8; 7]).is_err());
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::seed_from_u64(5);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.01, "{var}");
    }
}
