//! The memorization score and the statistics built on per-probe scores.

use crate::error::{Error, Result};

/// Positions `i < l` where `g[i]` equals the continuation token `s[k + i]`.
pub fn match_count(s: &[u16], g: &[u16], k: usize, l: usize) -> Result<usize> {
    if s.len() != k + l || g.len() != l {
        return Err(Error::Invalid(format!(
            "expected a {}-token sequence and {l}-token generation, got {} and {}",
            k + l,
            s.len(),
            g.len()
        )));
    }
    Ok(s[k..].iter().zip(g).filter(|(a, b)| a == b).count())
}

/// `(1/l) Σ 1[S_{k+i} = G_{k+i}]`; `g` holds only the `l` generated tokens.
pub fn memorization_score(s: &[u16], g: &[u16], k: usize, l: usize) -> Result<f64> {
    if l == 0 {
        return Err(Error::Invalid("continuation length must be positive".into()));
    }
    Ok(match_count(s, g, k, l)? as f64 / l as f64)
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Pearson correlation; `None` when either vector is constant or too short.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(x)?, mean(y)?);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Phi coefficient of two binary vectors (Pearson on 0/1 values).
pub fn phi(x: &[bool], y: &[bool]) -> Option<f64> {
    let f = |v: &[bool]| v.iter().map(|&b| f64::from(u8::from(b))).collect::<Vec<_>>();
    pearson(&f(x), &f(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_examples() {
        let s: Vec<u16> = (0..64).collect();
        assert_eq!(memorization_score(&s, &s[32..], 32, 32).unwrap(), 1.0);
        let disjoint = vec![999u16; 32];
        assert_eq!(memorization_score(&s, &disjoint, 32, 32).unwrap(), 0.0);
        let mut half = s[32..].to_vec();
        half[16..].iter_mut().for_each(|t| *t = 999);
        assert_eq!(memorization_score(&s, &half, 32, 32).unwrap(), 0.5);
        assert!(memorization_score(&s, &half[1..], 32, 32).is_err());
        assert!(memorization_score(&s[1..], &half, 32, 32).is_err());
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&x, &[2.0; 4]), None);
        assert_eq!(phi(&[true, true], &[true, false]), None);
        assert!((phi(&[true, false, true], &[true, false, true]).unwrap() - 1.0).abs() < 1e-15);
    }
}
