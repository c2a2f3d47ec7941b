//! Thin SVD by one-sided Jacobi rotations.
//!
//! nalgebra's bidiagonal SVD returns accurate singular values but, on a few
//! percent of small wide or rank-deficient inputs, singular vectors that do
//! not reconstruct the matrix. Everything here that needs vectors goes
//! through [`thin_svd`] instead.

use nalgebra::{DMatrix, DVector};

const MAX_SWEEPS: usize = 100;

/// `M = left * diag(values) * right^T`, values positive and decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinSvd {
    pub left: DMatrix<f64>,
    pub values: DVector<f64>,
    pub right: DMatrix<f64>,
}

impl ThinSvd {
    pub fn recompose(&self) -> DMatrix<f64> {
        &self.left * DMatrix::from_diagonal(&self.values) * self.right.transpose()
    }

    /// Recomposes with every value passed through `f`; values mapped to zero
    /// drop out.
    pub fn recompose_with<F: Fn(f64) -> f64>(&self, f: F) -> DMatrix<f64> {
        let mapped = self.values.map(f);
        &self.left * DMatrix::from_diagonal(&mapped) * self.right.transpose()
    }
}

/// Hestenes one-sided Jacobi on the columns of a tall matrix `a` (m x n,
/// m >= n). Returns the rotated columns and the accumulated rotation.
fn jacobi_columns(mut a: DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.ncols();
    let mut v = DMatrix::identity(n, n);
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = a.column(p).norm_squared();
                let beta = a.column(q).norm_squared();
                let gamma = a.column(p).dot(&a.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for m in [&mut a, &mut v] {
                    for i in 0..m.nrows() {
                        let (x, y) = (m[(i, p)], m[(i, q)]);
                        m[(i, p)] = c * x - s * y;
                        m[(i, q)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    (a, v)
}

/// Thin SVD keeping only strictly positive singular values.
pub fn thin_svd(m: &DMatrix<f64>) -> ThinSvd {
    let wide = m.nrows() < m.ncols();
    let tall = if wide { m.transpose() } else { m.clone() };
    let (a, v) = jacobi_columns(tall);

    let norms: Vec<f64> = a.column_iter().map(|c| c.norm()).collect();
    let mut order: Vec<usize> = (0..norms.len()).filter(|&j| norms[j] > 0.0).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let r = order.len();
    let values = DVector::from_iterator(r, order.iter().map(|&j| norms[j]));
    let u = DMatrix::from_fn(a.nrows(), r, |i, j| a[(i, order[j])] / norms[order[j]]);
    let w = DMatrix::from_fn(v.nrows(), r, |i, j| v[(i, order[j])]);
    if wide {
        ThinSvd { left: w, values, right: u }
    } else {
        ThinSvd { left: u, values, right: w }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn low_rank(seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.gen_range(2..8);
        let n = rng.gen_range(1..40);
        let r = rng.gen_range(1..=k);
        let a = DMatrix::from_fn(k, r, |_, _| rng.gen_range(-1.0..1.0));
        let b = DMatrix::from_fn(r, n, |_, _| rng.gen_range(-1.0..1.0));
        let mut m: DMatrix<f64> = a * b;
        if seed % 2 == 0 {
            for mut c in m.column_iter_mut() {
                let mean = c.mean();
                c.add_scalar_mut(-mean);
            }
        }
        if seed % 3 == 0 {
            m.transpose()
        } else {
            m
        }
    }

    #[test]
    fn zero_matrix() {
        let s = thin_svd(&DMatrix::zeros(3, 5));
        assert_eq!(s.values.len(), 0);
        assert_eq!(s.recompose(), DMatrix::zeros(3, 5));
    }

    #[test]
    fn wide_with_repeated_columns() {
        #[rustfmt::skip]
        let data = [
            2.8665891748273022, -1.0545527306187086, -0.9060182221042967, -0.9060182221042967,
            2.8665891748273036, -1.0545527306187181, -0.9060182221042928, -0.9060182221042928,
            2.8665891748273182, -1.0545527306186948, -0.9060182221043117, -0.9060182221043116,
            -1.0545527306185853, 2.8665891748269505, -0.9060182221041826, -0.9060182221041826,
            -1.0545527306185853, 2.8665891748269505, -0.9060182221041826, -0.9060182221041826,
            -1.0545527306185853, 2.8665891748269505, -0.9060182221041826, -0.9060182221041826,
            -1.0345170560705192, -1.0345170560706123, 3.1135990091995467, -1.0445648970584154,
            -1.0345170560705192, -1.0345170560706123, -1.0445648970584154, 3.1135990091995467,
        ];
        let m = DMatrix::from_column_slice(4, 8, &data);
        let s = thin_svd(&m);
        assert!((s.recompose() - &m).norm() < 1e-13 * m.norm());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn reconstructs_and_is_orthonormal(seed in any::<u64>()) {
            let m = low_rank(seed);
            let s = thin_svd(&m);
            let scale = m.norm().max(1e-300);
            prop_assert!((s.recompose() - &m).norm() <= 1e-12 * scale);
            let r = s.values.len();
            let eye = DMatrix::<f64>::identity(r, r);
            let big: Vec<usize> = (0..r).filter(|&j| s.values[j] > 1e-10 * scale).collect();
            let lu = DMatrix::from_fn(m.nrows(), big.len(), |i, j| s.left[(i, big[j])]);
            let lu_eye = DMatrix::<f64>::identity(big.len(), big.len());
            prop_assert!((lu.transpose() * &lu - lu_eye).norm() <= 1e-10);
            prop_assert!((s.right.transpose() * &s.right - eye).norm() <= 1e-10);
            let mut reference: Vec<f64> = m.singular_values().iter().copied().collect();
            reference.sort_by(|a, b| b.total_cmp(a));
            for (a, b) in s.values.iter().zip(&reference) {
                prop_assert!((a - b).abs() <= 1e-12 * scale);
            }
        }
    }
}
