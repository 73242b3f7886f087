//! Rotary position embedding over the leading fraction of each head.
//!
//! Inverse frequencies and angle tables are always `f64`, whatever the
//! precision of the activations they rotate.

use crate::error::{Error, Result};

pub const DEFAULT_ROPE_THETA: f64 = 10000.0;

/// Number of head dimensions that get rotated.
pub fn rotary_dims(head_dim: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!("rope fraction {fraction} not in (0, 1]")));
    }
    let exact = fraction * head_dim as f64;
    let rounded = exact.round();
    if (exact - rounded).abs() > 1e-9 || rounded as usize % 2 != 0 || rounded < 2.0 {
        return Err(Error::Invalid(format!(
            "rope fraction {fraction} × head dim {head_dim} = {exact} is not a positive even integer"
        )));
    }
    Ok(rounded as usize)
}

/// `inv_freq[j] = theta^(-2j / rot)` for `j < rot / 2`, `rot = fraction · head_dim`.
pub fn rope_inverse_frequencies(head_dim: usize, fraction: f64) -> Result<Vec<f64>> {
    inverse_frequencies_with_theta(head_dim, fraction, DEFAULT_ROPE_THETA)
}

pub fn inverse_frequencies_with_theta(head_dim: usize, fraction: f64, theta: f64) -> Result<Vec<f64>> {
    let rot = rotary_dims(head_dim, fraction)?;
    Ok((0..rot / 2)
        .map(|j| theta.powf(-2.0 * j as f64 / rot as f64))
        .collect())
}

/// Precomputed `(cos, sin)` per position and frequency.
#[derive(Debug, Clone)]
pub struct RopeTable {
    pairs: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(inv_freq: &[f64], max_positions: usize) -> Self {
        let pairs = inv_freq.len();
        let mut cos = Vec::with_capacity(max_positions * pairs);
        let mut sin = Vec::with_capacity(max_positions * pairs);
        for pos in 0..max_positions {
            for &f in inv_freq {
                let angle = pos as f64 * f;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Self { pairs, cos, sin }
    }

    pub fn rotated_dims(&self) -> usize {
        self.pairs * 2
    }

    /// Rotates adjacent pairs `(x[2j], x[2j+1])` of one head vector in place;
    /// dims past the rotary span are untouched.
    pub fn rotate(&self, x: &mut [f64], pos: usize) {
        let base = pos * self.pairs;
        for j in 0..self.pairs {
            let (c, s) = (self.cos[base + j], self.sin[base + j]);
            let (a, b) = (x[2 * j], x[2 * j + 1]);
            x[2 * j] = a * c - b * s;
            x[2 * j + 1] = a * s + b * c;
        }
    }

    /// Applies the transpose rotation; this is the backward pass of `rotate`.
    pub fn rotate_back(&self, x: &mut [f64], pos: usize) {
        let base = pos * self.pairs;
        for j in 0..self.pairs {
            let (c, s) = (self.cos[base + j], self.sin[base + j]);
            let (a, b) = (x[2 * j], x[2 * j + 1]);
            x[2 * j] = a * c + b * s;
            x[2 * j + 1] = -a * s + b * c;
        }
    }
}

/// Rotates every head of a `[positions.len(), n_heads · head_dim]` buffer.
pub fn apply_rope(x: &mut [f64], positions: &[usize], head_dim: usize, inv_freq: &[f64]) {
    let max_pos = positions.iter().copied().max().map_or(0, |p| p + 1);
    let table = RopeTable::new(inv_freq, max_pos);
    let width = x.len() / positions.len().max(1);
    for (row, &pos) in x.chunks_exact_mut(width).zip(positions) {
        for head in row.chunks_exact_mut(head_dim) {
            table.rotate(head, pos);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::linalg::dot;
    use crate::rng::Rng;

    #[test]
    fn first_frequency_is_one() {
        let f = rope_inverse_frequencies(32, 1.0).unwrap();
        assert_eq!(f[0], 1.0);
        assert_eq!(f.len(), 16);
        assert!((f[1] - 10000f64.powf(-2.0 / 32.0)).abs() < 1e-15);
    }

    #[test]
    fn quarter_fraction() {
        let f = rope_inverse_frequencies(32, 0.25).unwrap();
        assert_eq!(f.len(), 4);
        assert_eq!(rotary_dims(32, 0.25).unwrap(), 8);
        // rotation touches dims 0..8 only
        let mut x: Vec<f64> = (0..32).map(|i| i as f64 + 1.0).collect();
        let orig = x.clone();
        apply_rope(&mut x, &[5], 32, &f);
        assert_ne!(x[..8], orig[..8]);
        assert_eq!(x[8..], orig[8..]);
    }

    #[test]
    fn invalid_fraction() {
        assert!(rotary_dims(32, 0.0).is_err());
        assert!(rotary_dims(32, 1.5).is_err());
        assert!(rotary_dims(6, 0.5).is_err());
    }

    #[test]
    fn position_zero_is_identity() {
        let f = rope_inverse_frequencies(8, 1.0).unwrap();
        let mut x = vec![0.3, -1.0, 2.0, 0.5, 1.5, -0.2, 0.0, 4.0];
        let orig = x.clone();
        apply_rope(&mut x, &[0], 8, &f);
        assert_eq!(x, orig);
    }

    #[test]
    fn pair_norms_preserved() {
        let f = rope_inverse_frequencies(16, 1.0).unwrap();
        let mut rng = Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        for pos in [1usize, 7, 100, 2047] {
            let mut y = x.clone();
            apply_rope(&mut y, &[pos], 16, &f);
            for j in 0..8 {
                let a = x[2 * j].hypot(x[2 * j + 1]);
                let b = y[2 * j].hypot(y[2 * j + 1]);
                assert!((a - b).abs() <= 4.0 * f64::EPSILON * a.max(1.0));
            }
        }
    }

    #[test]
    fn rotate_back_inverts() {
        let f = rope_inverse_frequencies(8, 0.5).unwrap();
        let t = RopeTable::new(&f, 10);
        let mut x = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        t.rotate(&mut x, 9);
        t.rotate_back(&mut x, 9);
        for (a, b) in x.iter().zip([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn relative_position_property() {
        // <R(q, m), R(k, n)> depends only on m - n
        let f = rope_inverse_frequencies(16, 1.0).unwrap();
        let t = RopeTable::new(&f, 64);
        let mut rng = Rng::seed_from_u64(11);
        for _ in 0..5 {
            let q: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
            let k: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
            for delta in 0..8usize {
                let mut reference = None;
                for n in 0..(64 - delta) {
                    let m = n + delta;
                    let (mut qr, mut kr) = (q.clone(), k.clone());
                    t.rotate(&mut qr, m);
                    t.rotate(&mut kr, n);
                    let d = dot(&qr, &kr);
                    let r = *reference.get_or_insert(d);
                    assert!((d - r).abs() < 1e-10, "delta {delta}: {d} vs {r}");
                }
            }
        }
    }
}
