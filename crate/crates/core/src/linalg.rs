//! Dense row-major matrices and the pairwise squared-distance kernel.
//!
//! Everything is `f64`. Matrices are plain values: operations return new
//! matrices and never mutate their inputs.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{shape, DwacError, Result};

/// A dense row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape(
                "Matrix::new",
                format!(
                    "{rows}x{cols} needs {} values, got {}",
                    rows * cols,
                    data.len()
                ),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(DwacError::NonFinite(format!(
                "matrix entry ({}, {}) is {}",
                pos / cols.max(1),
                pos % cols.max(1),
                data[pos]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape(
                    "Matrix::from_rows",
                    format!("row {i} has {} columns, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Wraps data produced internally; callers guarantee the length.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a zero-column matrix still has rows
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self::from_raw(indices.len(), self.cols, data)
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_range(&self, start: usize, end: usize) -> Self {
        Self::from_raw(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape(
                "matmul",
                format!("{:?} · {:?}", self.shape(), other.shape()),
            ));
        }
        let (n, m) = (self.rows, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let dst = &mut out[i * m..(i + 1) * m];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        Ok(Matrix::from_raw(n, m, out))
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(shape(
                "t_matmul",
                format!("{:?}ᵀ · {:?}", self.shape(), other.shape()),
            ));
        }
        let (n, m) = (self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for r in 0..self.rows {
            let b_row = other.row(r);
            for (i, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let dst = &mut out[i * m..(i + 1) * m];
                for (d, &b) in dst.iter_mut().zip(b_row) {
                    *d += a * b;
                }
            }
        }
        Ok(Matrix::from_raw(n, m, out))
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(shape(
                "matmul_t",
                format!("{:?} · {:?}ᵀ", self.shape(), other.shape()),
            ));
        }
        let mut out = Vec::with_capacity(self.rows * other.rows);
        for a in self.row_iter() {
            for b in other.row_iter() {
                out.push(dot(a, b));
            }
        }
        Ok(Matrix::from_raw(self.rows, other.rows, out))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Column sums as a vector.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.row_iter() {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// Adds `v` to every row in place.
    pub(crate) fn add_row_vector(&mut self, v: &[f64]) {
        debug_assert_eq!(v.len(), self.cols);
        if self.cols == 0 {
            return;
        }
        for row in self.data.chunks_exact_mut(self.cols) {
            for (x, &b) in row.iter_mut().zip(v) {
                *x += b;
            }
        }
    }

    /// Stacks two matrices with the same column count vertically.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(shape(
                "vstack",
                format!("{} vs {} columns", self.cols, other.cols),
            ));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix::from_raw(self.rows + other.rows, self.cols, data))
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Squared Euclidean distance between every row of `a` and every row of `b`.
///
/// Uses `‖a‖² + ‖b‖² − 2a·b`, which costs one inner product per pair, and
/// clamps the result at zero. Cancellation can push near-coincident pairs
/// slightly negative; the kernel downstream needs `d² ≥ 0`.
pub fn pairwise_sq_distances(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(shape(
            "pairwise_sq_distances",
            format!("{} vs {} columns", a.cols, b.cols),
        ));
    }
    let norms_a: Vec<f64> = a.row_iter().map(|r| dot(r, r)).collect();
    let norms_b: Vec<f64> = b.row_iter().map(|r| dot(r, r)).collect();
    let mut out = Vec::with_capacity(a.rows * b.rows);
    for (ra, &na) in a.row_iter().zip(&norms_a) {
        for (rb, &nb) in b.row_iter().zip(&norms_b) {
            out.push((na + nb - 2.0 * dot(ra, rb)).max(0.0));
        }
    }
    Ok(Matrix::from_raw(a.rows, b.rows, out))
}

// Parameters are stored as decimal strings so artifacts round-trip every bit.
// `{:?}` on f64 prints the shortest representation that parses back exactly.

pub(crate) mod decimal {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn to_string(v: f64) -> String {
        format!("{v:?}")
    }

    pub fn parse<E: serde::de::Error>(s: &str) -> Result<f64, E> {
        let v: f64 = s
            .parse()
            .map_err(|_| E::custom(format!("`{s}` is not a decimal number")))?;
        if !v.is_finite() {
            return Err(E::custom(format!("`{s}` is not finite")));
        }
        Ok(v)
    }

    pub fn serialize_vec<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|&x| to_string(x)))
    }

    pub fn deserialize_vec<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw = Vec::<String>::deserialize(d)?;
        raw.iter().map(|s| parse::<D::Error>(s)).collect()
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&to_string(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let raw = String::deserialize(d)?;
        parse::<D::Error>(&raw)
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    #[serde(
        serialize_with = "decimal::serialize_vec",
        deserialize_with = "decimal::deserialize_vec"
    )]
    data: Vec<f64>,
}

impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        MatrixRepr {
            rows: self.rows,
            cols: self.cols,
            data: self.data.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = MatrixRepr::deserialize(d)?;
        Matrix::new(repr.rows, repr.cols, repr.data).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_sample, SeededRng};
    use proptest::prelude::*;

    fn naive_sq_distances(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.rows());
        for i in 0..a.rows() {
            for j in 0..b.rows() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    let d = a.get(i, k) - b.get(j, k);
                    s += d * d;
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn self_distance_is_zero() {
        let a = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let d = pairwise_sq_distances(&a, &a).unwrap();
        assert_eq!(d.data(), &[0.0]);
    }

    #[test]
    fn axis_aligned_points() {
        let a = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0, 0.0], [0.0, 2.0]]).unwrap();
        let d = pairwise_sq_distances(&a, &b).unwrap();
        assert_eq!(d.data(), &[1.0, 4.0]);
    }

    #[test]
    fn small_random_matches_loop() {
        let mut rng = SeededRng::new(7);
        let a = gaussian_sample(5, 3, 1.0, &mut rng).unwrap();
        let b = gaussian_sample(4, 3, 1.0, &mut rng).unwrap();
        let fast = pairwise_sq_distances(&a, &b).unwrap();
        assert!(max_abs_diff(&fast, &naive_sq_distances(&a, &b)) < 1e-10);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 4);
        assert!(matches!(
            pairwise_sq_distances(&a, &b),
            Err(DwacError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn rejects_non_finite_and_bad_length() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = SeededRng::new(3);
        let a = gaussian_sample(4, 3, 1.0, &mut rng).unwrap();
        let b = gaussian_sample(3, 5, 1.0, &mut rng).unwrap();
        let c = gaussian_sample(4, 5, 1.0, &mut rng).unwrap();
        let ab = a.matmul(&b).unwrap();
        let ab2 = a.matmul_t(&b.transpose()).unwrap();
        assert!(max_abs_diff(&ab, &ab2) < 1e-12);
        let atc = a.t_matmul(&c).unwrap();
        let atc2 = a.transpose().matmul(&c).unwrap();
        assert!(max_abs_diff(&atc, &atc2) < 1e-12);
    }

    #[test]
    fn serde_round_trip_is_exact() {
        let m = Matrix::from_rows(&[[0.1, 1.0 / 3.0], [-2.5e-300, 7.0]]).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        let back: Matrix = serde_json::from_str(&json).unwrap();
        assert_eq!(m, back);
    }

    fn matrix_strategy(max_rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        (1..=max_rows).prop_flat_map(move |r| {
            prop::collection::vec(-10.0f64..10.0, r * cols)
                .prop_map(move |data| Matrix::new(r, cols, data).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn diagonal_exactly_zero(a in matrix_strategy(30, 7)) {
            let d = pairwise_sq_distances(&a, &a).unwrap();
            for i in 0..a.rows() {
                prop_assert_eq!(d.get(i, i), 0.0);
            }
        }

        #[test]
        fn symmetric_under_swap(
            (a, b) in (1usize..12).prop_flat_map(|c| (matrix_strategy(20, c), matrix_strategy(20, c)))
        ) {
            let ab = pairwise_sq_distances(&a, &b).unwrap();
            let ba = pairwise_sq_distances(&b, &a).unwrap().transpose();
            prop_assert!(max_abs_diff(&ab, &ba) < 1e-10);
        }

        #[test]
        fn expansion_matches_naive(seed in any::<u64>(), ra in 1usize..200, rb in 1usize..200, d in 1usize..50) {
            let mut rng = SeededRng::new(seed);
            let a = gaussian_sample(ra, d, 1.0, &mut rng).unwrap();
            let b = gaussian_sample(rb, d, 1.0, &mut rng).unwrap();
            let fast = pairwise_sq_distances(&a, &b).unwrap();
            prop_assert!(max_abs_diff(&fast, &naive_sq_distances(&a, &b)) < 1e-8);
        }
    }
}
