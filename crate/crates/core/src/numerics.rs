//! Dense row-major matrices and the stable reductions shared by the solvers
//! and the classifier.
//!
//! Vectors are plain `[f64]` slices; nonnegativity is checked by the
//! consumers that need it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of finite `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    /// Builds a matrix, rejecting length mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(value.is_finite());
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds from a closure over `(row, col)`. Panics on non-finite output.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let x = f(i, j);
                assert!(x.is_finite(), "non-finite entry at ({i}, {j})");
                data.push(x);
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw storage. Callers must keep entries finite.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                for (o, b) in out.row_mut(i).iter_mut().zip(src) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Mat) -> Result<Mat> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "t_matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b = other.row(k);
            for i in 0..self.cols {
                let a = self[(k, i)];
                if a == 0.0 {
                    continue;
                }
                for (o, bv) in out.row_mut(i).iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Mat::from_fn(self.rows, other.rows, |i, j| dot(self.row(i), other.row(j))))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, x) in out.iter_mut().zip(self.row(i)) {
                *o += x;
            }
        }
        out
    }

    /// Column means, i.e. mean pooling over rows.
    pub fn col_means(&self) -> Vec<f64> {
        let n = self.rows as f64;
        self.col_sums().into_iter().map(|s| s / n).collect()
    }

    /// Frobenius inner product `⟨self, other⟩`.
    pub fn frobenius_dot(&self, other: &Mat) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch("frobenius product".into()));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Adds `scale · other` in place.
    pub fn add_scaled(&mut self, other: &Mat, scale: f64) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Mat {
        Mat::from_fn(self.rows, self.cols, |i, j| f(self[(i, j)]))
    }

    /// Stacks the rows of several matrices with equal column count.
    pub fn vstack(parts: &[&Mat]) -> Result<Mat> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::ShapeMismatch("vstack column count".into()));
        }
        let data: Vec<f64> = parts.iter().flat_map(|m| m.data.iter().copied()).collect();
        Ok(Mat { rows: data.len() / cols.max(1), cols, data })
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `log Σ exp(vᵢ)` with max-shift.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if v.is_empty() {
        return Err(Error::EmptyReduction);
    }
    if v.len() == 1 || max == f64::NEG_INFINITY || max == f64::INFINITY {
        return Ok(max);
    }
    let s: f64 = v.iter().map(|x| (x - max).exp()).sum();
    Ok(max + s.ln())
}

/// Numerically stable softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    let lse = logsumexp(v)?;
    Ok(v.iter().map(|x| (x - lse).exp()).collect())
}

/// Returns a unit-norm copy of `v`, or `None` when the norm is zero.
pub fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = norm2(v);
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

/// Normalizes every row of `m` in place.
pub fn normalize_rows(m: &mut Mat) -> Result<()> {
    for i in 0..m.rows() {
        let n = norm2(m.row(i));
        if n == 0.0 {
            return Err(Error::DegenerateEmbedding { row: i });
        }
        m.row_mut(i).iter_mut().for_each(|x| *x /= n);
    }
    Ok(())
}

/// Pairwise cosine similarities: entry `(i, j) = ⟨aᵢ, bⱼ⟩ / (‖aᵢ‖‖bⱼ‖)`.
pub fn cosine_matrix(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols() != b.cols() || a.cols() == 0 {
        return Err(Error::ShapeMismatch(format!("cosine of {}x{} and {}x{}", a.rows(), a.cols(), b.rows(), b.cols())));
    }
    let row_norms = |m: &Mat| -> Result<Vec<f64>> {
        (0..m.rows())
            .map(|i| match norm2(m.row(i)) {
                n if n > 0.0 => Ok(n),
                _ => Err(Error::DegenerateEmbedding { row: i }),
            })
            .collect()
    };
    let na = row_norms(a)?;
    let nb = row_norms(b)?;
    Ok(Mat::from_fn(a.rows(), b.rows(), |i, j| (dot(a.row(i), b.row(j)) / (na[i] * nb[j])).clamp(-1.0, 1.0)))
}

/// `x log x` with the `0 log 0 = 0` convention.
pub fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Shannon entropy of a nonnegative matrix, `−Σ wᵢⱼ log wᵢⱼ`.
pub fn entropy(w: &Mat) -> Result<f64> {
    if let Some(index) = w.as_slice().iter().position(|&x| x < 0.0) {
        return Err(Error::NegativeMass { index });
    }
    Ok(-w.as_slice().iter().map(|&x| xlogx(x)).sum::<f64>())
}

/// Generalized KL divergence `wᵀ log(w ⊘ z) − 1ᵀw + 1ᵀz` between a
/// nonnegative `w` and a positive `z`.
pub fn generalized_kl(w: &[f64], z: &[f64]) -> Result<f64> {
    if w.len() != z.len() {
        return Err(Error::ShapeMismatch(format!("kl of lengths {} and {}", w.len(), z.len())));
    }
    if let Some(index) = w.iter().position(|&x| x < 0.0) {
        return Err(Error::NegativeMass { index });
    }
    if let Some(index) = z.iter().position(|&x| x <= 0.0) {
        return Err(Error::ZeroReferenceMass { index });
    }
    Ok(w.iter().zip(z).map(|(&wi, &zi)| if wi == 0.0 { zi } else { wi * (wi / zi).ln() - wi + zi }).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn logsumexp_examples() {
        assert_eq!(logsumexp(&[0.0]).unwrap(), 0.0);
        let c = 3.7;
        assert!((logsumexp(&[c, c]).unwrap() - (c + 2f64.ln())).abs() < 1e-15);
        let big = logsumexp(&[1000.0, 1000.0]).unwrap();
        assert!(big.is_finite());
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!(matches!(logsumexp(&[]), Err(Error::EmptyReduction)));
        assert!(format!("{}", logsumexp(&[]).unwrap_err()).contains("empty reduction"));
    }

    #[test]
    fn cosine_examples() {
        let a = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-0.6, -0.8]]).unwrap();
        let b = Mat::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8]]).unwrap();
        let c = cosine_matrix(&a, &b).unwrap();
        assert_eq!(c[(0, 0)], 1.0);
        assert_eq!(c[(1, 0)], 0.0);
        assert!((c[(2, 1)] + 1.0).abs() < 1e-15);

        let z = Mat::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let err = cosine_matrix(&z, &b).unwrap_err();
        assert!(err.to_string().contains("degenerate embedding"));
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&Mat::zeros(2, 3)).unwrap(), 0.0);
        assert_eq!(entropy(&Mat::filled(1, 1, 1.0)).unwrap(), 0.0);
        let q = Mat::filled(2, 2, 0.25);
        assert!((entropy(&q).unwrap() - 1.386294).abs() < 1e-6);
        let neg = Mat::new(1, 2, vec![0.5, -0.1]).unwrap();
        assert!(entropy(&neg).unwrap_err().to_string().contains("negative mass"));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(generalized_kl(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((generalized_kl(&[0.0, 0.0], &[0.3, 0.7]).unwrap() - 1.0).abs() < 1e-15);
        // 1·log(1/2) + 2·log 2 − 3 + 3
        assert!((generalized_kl(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let err = generalized_kl(&[1.0], &[0.0]).unwrap_err();
        assert!(err.to_string().contains("zero reference mass"));
    }

    #[test]
    fn mat_rejects_non_finite() {
        assert!(Mat::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Mat::new(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Mat::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.1 - 0.3);
        let b = Mat::from_fn(3, 2, |i, j| (i + 2 * j) as f64 * 0.7 - 1.0);
        let direct = a.transpose().matmul(&b).unwrap();
        assert!(direct.max_abs_diff(&a.t_matmul(&b).unwrap()) < 1e-14);
        let c = Mat::from_fn(5, 4, |i, j| (i as f64 - j as f64).sin());
        let direct = a.matmul(&c.transpose()).unwrap();
        assert!(direct.max_abs_diff(&a.matmul_t(&c).unwrap()) < 1e-14);
    }

    fn small_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, 1..12)
    }

    proptest! {
        #[test]
        fn cosine_within_unit_interval(
            a in prop::collection::vec(-10.0f64..10.0, 12),
            b in prop::collection::vec(-10.0f64..10.0, 8),
        ) {
            let a = Mat::new(3, 4, a.iter().map(|x| x + 0.01).collect()).unwrap();
            let b = Mat::new(2, 4, b.iter().map(|x| x - 0.01).collect()).unwrap();
            if let Ok(c) = cosine_matrix(&a, &b) {
                for &x in c.as_slice() {
                    prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&x));
                }
            }
        }

        #[test]
        fn kl_nonnegative(pairs in prop::collection::vec((0.0f64..5.0, 1e-6f64..5.0), 1..10)) {
            let (w, z): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assert!(generalized_kl(&w, &z).unwrap() >= -1e-12);
        }

        #[test]
        fn logsumexp_bounds(v in small_vec()) {
            let lse = logsumexp(&v).unwrap();
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lse >= max);
            prop_assert!(lse <= max + (v.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn entropy_permutation_invariant(
            data in prop::collection::vec(0.0f64..1.0, 12),
            rot_r in 0usize..3,
            rot_c in 0usize..4,
        ) {
            let w = Mat::new(3, 4, data).unwrap();
            let permuted = Mat::from_fn(3, 4, |i, j| w[((i + rot_r) % 3, (3 - j + rot_c) % 4)]);
            let (a, b) = (entropy(&w).unwrap(), entropy(&permuted).unwrap());
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
