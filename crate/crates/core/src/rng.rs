//! Seeded randomness: a reproducible generator, index splits and Gaussian
//! parameter draws.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::linalg::Matrix;

/// A reproducible generator. The stream is fixed by the seed alone, on every
/// platform.
///
/// Not meant to be shared between threads; derive independent generators
/// with [`SeededRng::child`] instead.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent generator keyed by `(seed, stream)`. Does not advance
    /// `self`.
    pub fn child(&self, stream: u64) -> SeededRng {
        SeededRng::new(splitmix64(self.seed ^ splitmix64(stream.wrapping_add(1))))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Shuffles `0..n` and cuts it into consecutive parts sized by `fractions`.
///
/// Every part but the last gets `floor(n · fraction)` indices; the last takes
/// whatever remains.
pub fn shuffle_split(n: usize, fractions: &[f64], rng: &mut SeededRng) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() {
        return Err(invalid("shuffle_split needs at least one fraction"));
    }
    if fractions.iter().any(|&f| !(f.is_finite() && f > 0.0)) {
        return Err(invalid(format!(
            "split fractions must be positive, got {fractions:?}"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split fractions sum to {total}, not 1")));
    }
    if n < fractions.len() {
        return Err(invalid(format!(
            "cannot split {n} items into {} parts",
            fractions.len()
        )));
    }

    let perm = rng.permutation(n);
    let mut parts = Vec::with_capacity(fractions.len());
    let mut start = 0;
    for (i, &f) in fractions.iter().enumerate() {
        let end = if i + 1 == fractions.len() {
            n
        } else {
            // the epsilon keeps e.g. 100 · 0.29 from flooring to 28
            (start + (n as f64 * f + 1e-9).floor() as usize).min(n)
        };
        parts.push(perm[start..end].to_vec());
        start = end;
    }
    Ok(parts)
}

/// `rows × cols` i.i.d. draws from `N(0, scale²)`.
pub fn gaussian_sample(
    rows: usize,
    cols: usize,
    scale: f64,
    rng: &mut SeededRng,
) -> Result<Matrix> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(invalid(format!(
            "gaussian scale must be positive, got {scale}"
        )));
    }
    let data = (0..rows * cols)
        .map(|_| scale * rng.standard_normal())
        .collect();
    Ok(Matrix::from_raw(rows, cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn ninety_ten_split() {
        let mut rng = SeededRng::new(1);
        let parts = shuffle_split(10, &[0.9, 0.1], &mut rng).unwrap();
        assert_eq!(parts[0].len(), 9);
        assert_eq!(parts[1].len(), 1);
        let all: HashSet<usize> = parts.iter().flatten().copied().collect();
        assert_eq!(all, (0..10).collect());
    }

    #[test]
    fn single_part_is_a_permutation() {
        let mut rng = SeededRng::new(2);
        let parts = shuffle_split(5, &[1.0], &mut rng).unwrap();
        let mut p = parts[0].clone();
        p.sort_unstable();
        assert_eq!(p, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn split_is_deterministic() {
        let a = shuffle_split(100, &[0.5, 0.3, 0.2], &mut SeededRng::new(9)).unwrap();
        let b = shuffle_split(100, &[0.5, 0.3, 0.2], &mut SeededRng::new(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), vec![50, 30, 20]);
    }

    #[test]
    fn split_errors() {
        let mut rng = SeededRng::new(0);
        assert!(shuffle_split(1, &[0.5, 0.5], &mut rng).is_err());
        assert!(shuffle_split(10, &[0.5, 0.4], &mut rng).is_err());
        assert!(shuffle_split(10, &[1.2, -0.2], &mut rng).is_err());
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = SeededRng::new(11);
        let m = gaussian_sample(1000, 1000, 0.1, &mut rng).unwrap();
        let n = m.data().len() as f64;
        let mean = m.data().iter().sum::<f64>() / n;
        let var = m.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.001, "mean {mean}");
        assert!((var.sqrt() - 0.1).abs() < 0.005, "std {}", var.sqrt());
    }

    #[test]
    fn gaussian_rejects_zero_scale() {
        assert!(gaussian_sample(2, 2, 0.0, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn gaussian_is_deterministic() {
        let a = gaussian_sample(3, 4, 1.0, &mut SeededRng::new(5)).unwrap();
        let b = gaussian_sample(3, 4, 1.0, &mut SeededRng::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn children_differ_from_parent_and_each_other() {
        let root = SeededRng::new(42);
        let mut a = root.child(0);
        let mut b = root.child(1);
        let mut r = root.clone();
        let (x, y, z) = (a.next_u64(), b.next_u64(), r.next_u64());
        assert!(x != y && y != z && x != z);
        assert_eq!(root.child(0).next_u64(), x);
    }
}
