//! Closed-form compact SVD of the SEL matrix under STEP imbalance, a numerical
//! cross-check, and the dual certificate `B = U V^T`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SeliError};
use crate::linalg::thin_svd;
use crate::sel::{build_dataset, build_sel_matrix, ImbalanceSpec, SelMatrix};

pub const FACTOR_TOL: f64 = 1e-10;
pub const ROW_SUM_TOL: f64 = 1e-12;
pub const TRACE_TOL: f64 = 1e-8;

/// Compact SVD `Z = V diag(lambda) U^T` with `V` k x (k-1) and `U` n x (k-1).
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    pub v: DMatrix<f64>,
    pub lambda: DVector<f64>,
    pub u: DMatrix<f64>,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.lambda.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.v * DMatrix::from_diagonal(&self.lambda) * self.u.transpose()
    }

    /// Largest of `||U^T U - I||_F` and `||V^T V - I||_F`.
    pub fn orthonormality_residual(&self) -> f64 {
        let eye = DMatrix::<f64>::identity(self.rank(), self.rank());
        let ru = (self.u.transpose() * &self.u - &eye).norm();
        let rv = (self.v.transpose() * &self.v - &eye).norm();
        ru.max(rv)
    }

    /// Singular values sorted in decreasing order.
    pub fn sorted_values(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.lambda.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }
}

/// Householder columns spanning the complement of `1_m`, with `m = 1`
/// giving an empty 1 x 0 block.
pub(crate) fn complement_basis(m: usize) -> DMatrix<f64> {
    if m <= 1 {
        return DMatrix::zeros(m, 0);
    }
    let inv = 1.0 / (m as f64).sqrt();
    let mut u = DVector::from_element(m, inv);
    u[0] -= 1.0;
    let scale = 2.0 / u.norm_squared();
    let mut p = DMatrix::zeros(m, m - 1);
    for j in 1..m {
        for i in 0..m {
            let e = if i == j { 1.0 } else { 0.0 };
            p[(i, j - 1)] = e - scale * u[i] * u[j];
        }
    }
    p
}

/// Orthonormal basis `P_m` (m x (m-1)) of the subspace orthogonal to `1_m`.
pub fn orthonormal_complement_basis(m: usize) -> Result<DMatrix<f64>> {
    if m < 2 {
        return Err(SeliError::InvalidSpec(format!("basis size m = {m} must be at least 2")));
    }
    Ok(complement_basis(m))
}

/// Closed-form factors for a STEP spec with one minority example per class.
pub fn closed_form_svd(spec: &ImbalanceSpec) -> Result<SvdFactors> {
    spec.validate()?;
    if spec.n_min != 1 {
        return Err(SeliError::Unsupported(format!(
            "n_min = {} needs closed_form_svd_scaled",
            spec.n_min
        )));
    }
    closed_form_svd_with_basis(spec, complement_basis)
}

/// Closed-form factors for any `n_min`: singular values pick up a factor
/// `sqrt(n_min)` and the embedding blocks replicate across class members.
pub fn closed_form_svd_scaled(spec: &ImbalanceSpec) -> Result<SvdFactors> {
    spec.validate()?;
    closed_form_svd_with_basis(spec, complement_basis)
}

/// Closed-form factors with a caller-supplied complement basis. `basis(m)`
/// must return an m x (m-1) matrix with orthonormal columns orthogonal to `1_m`.
pub fn closed_form_svd_with_basis<F>(spec: &ImbalanceSpec, basis: F) -> Result<SvdFactors>
where
    F: Fn(usize) -> DMatrix<f64>,
{
    spec.validate()?;
    let k = spec.k;
    let kf = k as f64;
    let maj = spec.num_majority_classes();
    let min = k - maj;
    let n_maj = spec.majority_count();
    let n_min = spec.n_min;
    let n = spec.n();

    let rho = min as f64 / kf;
    let rho_bar = maj as f64 / kf;
    let r = n_maj as f64 / n_min as f64;
    let nm = n_min as f64;
    let mid = rho_bar + r * rho;

    let p_maj = basis(maj);
    let p_min = basis(min);
    for (p, m) in [(&p_maj, maj), (&p_min, min)] {
        if p.shape() != (m, m - 1) {
            return Err(SeliError::Dimension(format!(
                "basis for m = {m} has shape {:?}",
                p.shape()
            )));
        }
    }

    let rank = k - 1;
    let mut lambda = DVector::zeros(rank);
    let mut v = DMatrix::zeros(k, rank);
    let mut u = DMatrix::zeros(n, rank);

    let first_min_row = maj * n_maj;

    // Majority block.
    let s_maj = (r * nm).sqrt();
    for j in 0..maj - 1 {
        lambda[j] = s_maj;
        for c in 0..maj {
            v[(c, j)] = p_maj[(c, j)];
            for t in 0..n_maj {
                u[(c * n_maj + t, j)] = p_maj[(c, j)] / s_maj;
            }
        }
    }

    // Direction separating majorities from minorities.
    let jm = maj - 1;
    lambda[jm] = (mid * nm).sqrt();
    let v_maj = -(rho / rho_bar / kf).sqrt();
    let v_min = (rho_bar / rho / kf).sqrt();
    let denom = (mid * kf * nm).sqrt();
    let u_maj = -(rho / rho_bar).sqrt() / denom;
    let u_min = (rho_bar / rho).sqrt() / denom;
    for c in 0..k {
        v[(c, jm)] = if c < maj { v_maj } else { v_min };
    }
    for i in 0..first_min_row {
        u[(i, jm)] = u_maj;
    }
    for i in first_min_row..n {
        u[(i, jm)] = u_min;
    }

    // Minority block.
    let s_min = nm.sqrt();
    for j in 0..min - 1 {
        let col = maj + j;
        lambda[col] = s_min;
        for c in 0..min {
            v[(maj + c, col)] = p_min[(c, j)];
            for t in 0..n_min {
                u[(first_min_row + c * n_min + t, col)] = p_min[(c, j)] / s_min;
            }
        }
    }

    Ok(SvdFactors { v, lambda, u })
}

/// Rank-(k-1) compact SVD of the SEL matrix from a general dense SVD routine.
pub fn numerical_svd(z: &SelMatrix) -> SvdFactors {
    let mut f = compact_svd(z.entries(), 0.0);
    let rank = z.k() - 1;
    f.v = f.v.columns(0, rank).into_owned();
    f.u = f.u.columns(0, rank).into_owned();
    f.lambda = f.lambda.rows(0, rank).into_owned();
    f
}

/// Compact SVD `M = V diag(lambda) U^T` keeping singular values above
/// `rel_tol * max(1, sigma_max)`, in decreasing order.
pub fn compact_svd(m: &DMatrix<f64>, rel_tol: f64) -> SvdFactors {
    let svd = thin_svd(m);
    let s = &svd.values;
    let cut = rel_tol * s.iter().copied().fold(1.0, f64::max);
    let r = s.iter().take_while(|&&x| x > cut).count();
    SvdFactors {
        v: svd.left.columns(0, r).into_owned(),
        lambda: s.rows(0, r).into_owned(),
        u: svd.right.columns(0, r).into_owned(),
    }
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().max()
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().sum()
}

/// Optimal dual variable of the nuclear-norm max-margin relaxation, with the
/// diagnostics used to certify it.
#[derive(Debug, Clone, PartialEq)]
pub struct DualCertificate {
    /// n x k matrix `U V^T`.
    pub b: DMatrix<f64>,
    pub spectral_norm: f64,
    /// `max_i |(B 1_k)_i|`.
    pub row_sum_residual: f64,
    /// Smallest entry of `B ⊙ Z^T` and where it occurs (example, class).
    pub min_sign_agreement: f64,
    pub min_sign_at: (usize, usize),
    /// `|tr(Z B) - ||Z||_*|`.
    pub trace_gap: f64,
}

impl DualCertificate {
    /// Computes `B = U V^T` and its diagnostics without judging them.
    pub fn diagnose(f: &SvdFactors, z: &SelMatrix) -> Result<Self> {
        let b = &f.u * f.v.transpose();
        if b.shape() != (z.n(), z.k()) {
            return Err(SeliError::Dimension(format!(
                "certificate shape {:?} does not match (n, k) = ({}, {})",
                b.shape(),
                z.n(),
                z.k()
            )));
        }
        let zt = z.entries();
        let row_sum_residual = (0..b.nrows())
            .map(|i| b.row(i).sum().abs())
            .fold(0.0, f64::max);
        let mut min_sign_agreement = f64::INFINITY;
        let mut min_sign_at = (0, 0);
        for i in 0..b.nrows() {
            for c in 0..b.ncols() {
                let p = b[(i, c)] * zt[(c, i)];
                if p < min_sign_agreement {
                    min_sign_agreement = p;
                    min_sign_at = (i, c);
                }
            }
        }
        let trace = (zt * &b).trace();
        let trace_gap = (trace - nuclear_norm(zt)).abs();
        Ok(Self {
            spectral_norm: spectral_norm(&b),
            b,
            row_sum_residual,
            min_sign_agreement,
            min_sign_at,
            trace_gap,
        })
    }

    /// First violated condition, if any.
    pub fn violation(&self) -> Option<SeliError> {
        let at = |reason: String| {
            Some(SeliError::Certificate {
                row: self.min_sign_at.0,
                col: self.min_sign_at.1,
                reason,
            })
        };
        if !(self.min_sign_agreement > 0.0) {
            return at(format!(
                "sign agreement {:e} is not strictly positive",
                self.min_sign_agreement
            ));
        }
        if !(self.spectral_norm <= 1.0 + FACTOR_TOL) {
            return at(format!("spectral norm {} exceeds 1", self.spectral_norm));
        }
        if !(self.row_sum_residual <= ROW_SUM_TOL) {
            return at(format!("row sums reach {:e}", self.row_sum_residual));
        }
        if !(self.trace_gap <= TRACE_TOL) {
            return at(format!("trace gap {:e}", self.trace_gap));
        }
        None
    }
}

/// Builds `B = U V^T` and fails with the offending entry when any certificate
/// condition is violated.
pub fn dual_certificate(f: &SvdFactors, z: &SelMatrix) -> Result<DualCertificate> {
    let cert = DualCertificate::diagnose(f, z)?;
    match cert.violation() {
        Some(e) => Err(e),
        None => Ok(cert),
    }
}

/// Classifier Gram, embedding Gram, and logits of the SELI geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct GramTargets {
    /// k x k, `V Λ V^T`.
    pub gw: DMatrix<f64>,
    /// n x n, `U Λ U^T`.
    pub gh: DMatrix<f64>,
    /// k x n, `V Λ U^T`.
    pub z: DMatrix<f64>,
}

pub fn seli_gram_targets(f: &SvdFactors) -> GramTargets {
    let l = DMatrix::from_diagonal(&f.lambda);
    let vl = &f.v * &l;
    GramTargets {
        gw: &vl * f.v.transpose(),
        gh: &f.u * &l * f.u.transpose(),
        z: &vl * f.u.transpose(),
    }
}

/// SEL matrix and its closed-form factors for a spec with any `n_min`.
pub fn sel_with_factors(spec: &ImbalanceSpec) -> Result<(SelMatrix, SvdFactors)> {
    let ds = build_dataset(spec)?;
    let z = build_sel_matrix(&ds);
    let f = closed_form_svd_scaled(spec)?;
    Ok((z, f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn spec(k: usize, r: f64, rho: f64) -> ImbalanceSpec {
        ImbalanceSpec::step(k, r, rho).unwrap()
    }

    fn random_orthogonal(m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        if m == 0 {
            return DMatrix::zeros(0, 0);
        }
        let a = DMatrix::from_fn(m, m, |_, _| StandardNormal.sample(rng));
        a.qr().q()
    }

    #[test]
    fn basis_m2_is_unique_up_to_sign() {
        let p = orthonormal_complement_basis(2).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!((p[(0, 0)].abs() - h).abs() < 1e-15);
        assert!((p[(0, 0)] + p[(1, 0)]).abs() < 1e-15);
    }

    #[test]
    fn basis_identities() {
        for m in [3, 6, 11] {
            let p = orthonormal_complement_basis(m).unwrap();
            let mf = m as f64;
            let proj = DMatrix::<f64>::identity(m, m) - DMatrix::from_element(m, m, 1.0 / mf);
            assert!((&p * p.transpose() - proj).norm() < 1e-12);
            assert!((p.transpose() * &p - DMatrix::<f64>::identity(m - 1, m - 1)).norm() < 1e-12);
            assert!((p.transpose() * DVector::from_element(m, 1.0)).norm() < 1e-12);
        }
        assert!(orthonormal_complement_basis(1).is_err());
        assert!(orthonormal_complement_basis(0).is_err());
    }

    #[test]
    fn rho_half_singular_values() {
        let f = closed_form_svd(&spec(4, 3.0, 0.5)).unwrap();
        let want = [3f64.sqrt(), 2f64.sqrt(), 1.0];
        for (a, b) in f.lambda.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn balanced_is_identity_spectrum() {
        for k in [2, 4, 6] {
            let s = spec(k, 1.0, 0.5);
            let f = closed_form_svd(&s).unwrap();
            assert!(f.lambda.iter().all(|&l| (l - 1.0).abs() < 1e-15));
            let z = build_sel_matrix(&build_dataset(&s).unwrap());
            assert!((f.reconstruct() - z.entries()).norm() < 1e-12);
            // U and V span the same space as P_k.
            assert!((&f.u * f.u.transpose() - &f.v * f.v.transpose()).norm() < 1e-12);
        }
    }

    #[test]
    fn scaled_variant_required_for_multiple_minority_examples() {
        let s = ImbalanceSpec::new(4, 10.0, 0.25, 2).unwrap();
        assert!(matches!(closed_form_svd(&s), Err(SeliError::Unsupported(_))));
        let f = closed_form_svd_scaled(&s).unwrap();
        let base = closed_form_svd(&spec(4, 10.0, 0.25)).unwrap();
        for (a, b) in f.sorted_values().iter().zip(base.sorted_values()) {
            assert!((a - 2f64.sqrt() * b).abs() < 1e-12);
        }
        let z = build_sel_matrix(&build_dataset(&s).unwrap());
        assert!((f.reconstruct() - z.entries()).norm() < 1e-10);
        assert!(f.orthonormality_residual() < 1e-10);
    }

    #[test]
    fn closed_form_matches_numerical_svd() {
        for (k, r, rho) in [(4, 10.0, 0.5), (6, 50.0, 1.0 / 3.0), (4, 3.0, 0.25), (2, 5.0, 0.5)] {
            let s = spec(k, r, rho);
            let z = build_sel_matrix(&build_dataset(&s).unwrap());
            let f = closed_form_svd(&s).unwrap();
            let g = numerical_svd(&z);
            assert!((f.reconstruct() - z.entries()).norm() < 1e-10);
            assert!((g.reconstruct() - z.entries()).norm() < 1e-10);
            for (a, b) in f.sorted_values().iter().zip(g.sorted_values()) {
                assert!((a - b).abs() < 1e-9);
            }
            let (tf, tg) = (seli_gram_targets(&f), seli_gram_targets(&g));
            assert!((tf.gw - tg.gw).norm() < 1e-9);
            assert!((tf.gh - tg.gh).norm() < 1e-9);
            assert!((tf.z - tg.z).norm() < 1e-9);
        }
    }

    #[test]
    fn top_singular_value_is_sqrt_r() {
        for r in [2.0, 10.0, 100.0] {
            let z = build_sel_matrix(&build_dataset(&spec(6, r, 0.5)).unwrap());
            assert!((spectral_norm(z.entries()) - r.sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn balanced_certificate_is_sel_transpose() {
        let s = spec(3, 1.0, 1.0 / 3.0);
        let z = build_sel_matrix(&build_dataset(&s).unwrap());
        let cert = dual_certificate(&closed_form_svd(&s).unwrap(), &z).unwrap();
        assert!((cert.b - z.entries().transpose()).norm() < 1e-12);
    }

    #[test]
    fn certificate_conditions() {
        for (k, r, rho) in [(4, 10.0, 0.5), (6, 50.0, 1.0 / 3.0)] {
            let s = spec(k, r, rho);
            let z = build_sel_matrix(&build_dataset(&s).unwrap());
            let cert = dual_certificate(&closed_form_svd(&s).unwrap(), &z).unwrap();
            assert!(cert.min_sign_agreement > 0.0);
            assert!(cert.trace_gap <= 1e-8);
        }
    }

    #[test]
    fn sign_flip_breaks_certificate() {
        let s = spec(4, 10.0, 0.5);
        let z = build_sel_matrix(&build_dataset(&s).unwrap());
        let f = closed_form_svd(&s).unwrap();
        let mut flipped = z.entries().clone();
        flipped[(0, 0)] = -flipped[(0, 0)];
        let bad = z.with_entries(flipped).unwrap();
        match dual_certificate(&f, &bad) {
            Err(SeliError::Certificate { row, col, .. }) => assert_eq!((row, col), (0, 0)),
            other => panic!("expected certificate failure, got {other:?}"),
        }
    }

    #[test]
    fn balanced_gram_is_etf() {
        let f = closed_form_svd(&spec(5, 1.0, 0.4)).unwrap();
        let gw = seli_gram_targets(&f).gw;
        let etf = DMatrix::<f64>::identity(5, 5) - DMatrix::from_element(5, 5, 0.2);
        assert!((gw - etf).norm() < 1e-12);
    }

    #[test]
    fn classifier_norms_take_two_values() {
        let gw = seli_gram_targets(&closed_form_svd(&spec(4, 10.0, 0.5)).unwrap()).gw;
        assert!((gw[(0, 0)] - gw[(1, 1)]).abs() < 1e-12);
        assert!((gw[(2, 2)] - gw[(3, 3)]).abs() < 1e-12);
        assert!((gw[(0, 0)] - gw[(2, 2)]).abs() > 0.1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn gram_targets_are_basis_invariant(
            k_half in 1usize..6,
            r in 1usize..40,
            quarter in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let k = if quarter { 4 * k_half } else { 2 * k_half };
            let rho = if quarter { 0.25 } else { 0.5 };
            let s = spec(k, r as f64, rho);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let qs: Vec<(usize, DMatrix<f64>)> = [s.num_majority_classes(), s.num_minority_classes()]
                .iter()
                .map(|&m| (m, random_orthogonal(m.saturating_sub(1), &mut rng)))
                .collect();
            let rotated = closed_form_svd_with_basis(&s, |m| {
                let q = &qs.iter().find(|(mm, _)| *mm == m).unwrap().1;
                complement_basis(m) * q
            })
            .unwrap();
            let plain = closed_form_svd(&s).unwrap();
            let (a, b) = (seli_gram_targets(&rotated), seli_gram_targets(&plain));
            prop_assert!((a.gw - b.gw).norm() <= 1e-10);
            prop_assert!((a.gh - b.gh).norm() <= 1e-10);
            prop_assert!((a.z - b.z).norm() <= 1e-10);
        }

        #[test]
        fn factor_invariants_hold(k_half in 1usize..6, r in 1usize..60, quarter in any::<bool>()) {
            let k = if quarter { 4 * k_half } else { 2 * k_half };
            let rho = if quarter { 0.25 } else { 0.5 };
            let s = spec(k, r as f64, rho);
            let f = closed_form_svd(&s).unwrap();
            let z = build_sel_matrix(&build_dataset(&s).unwrap());
            prop_assert!(f.orthonormality_residual() <= 1e-10);
            prop_assert!((f.v.transpose() * DVector::from_element(k, 1.0)).norm() <= 1e-12);
            prop_assert!((f.reconstruct() - z.entries()).abs().max() <= 1e-10);
            prop_assert!(dual_certificate(&f, &z).is_ok());
        }
    }
}
