//! Closed-form SELI geometry for half-minority STEP imbalance, the ETF
//! reference, large-R limits, the minority-collapse threshold, and the scalar
//! equations behind the regularized scalings.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SeliError};
use crate::sel::{build_dataset, ImbalanceSpec};
use crate::spectral::GramTargets;

/// Norms, angles, and classifier/embedding alignments of a class-collapsed
/// geometry, summarized by one representative majority and minority class.
///
/// Same-kind cosines are `None` when there is only one class of that kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub norm_w_maj2: f64,
    pub norm_w_min2: f64,
    pub norm_h_maj2: f64,
    pub norm_h_min2: f64,
    pub cos_w_majmaj: Option<f64>,
    pub cos_w_minmin: Option<f64>,
    pub cos_w_majmin: f64,
    pub cos_h_majmaj: Option<f64>,
    pub cos_h_minmin: Option<f64>,
    pub cos_h_majmin: f64,
    pub align_maj: f64,
    pub align_min: f64,
}

impl GeometryReport {
    pub fn norm_ratio_w2(&self) -> f64 {
        self.norm_w_maj2 / self.norm_w_min2
    }

    pub fn norm_ratio_h2(&self) -> f64 {
        self.norm_h_maj2 / self.norm_h_min2
    }

    /// Every cosine and alignment that is defined, with its column name.
    pub fn angles(&self) -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        let mut push = |name, v: Option<f64>| {
            if let Some(v) = v {
                out.push((name, v));
            }
        };
        push("cos_w_majmaj", self.cos_w_majmaj);
        push("cos_w_minmin", self.cos_w_minmin);
        push("cos_w_majmin", Some(self.cos_w_majmin));
        push("cos_h_majmaj", self.cos_h_majmaj);
        push("cos_h_minmin", self.cos_h_minmin);
        push("cos_h_majmin", Some(self.cos_h_majmin));
        push("align_maj", Some(self.align_maj));
        push("align_min", Some(self.align_min));
        out
    }

    /// Largest absolute difference over all fields; a field defined on one
    /// side only counts as infinite.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => (a - b).abs(),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        };
        [
            (self.norm_w_maj2 - other.norm_w_maj2).abs(),
            (self.norm_w_min2 - other.norm_w_min2).abs(),
            (self.norm_h_maj2 - other.norm_h_maj2).abs(),
            (self.norm_h_min2 - other.norm_h_min2).abs(),
            opt(self.cos_w_majmaj, other.cos_w_majmaj),
            opt(self.cos_w_minmin, other.cos_w_minmin),
            (self.cos_w_majmin - other.cos_w_majmin).abs(),
            opt(self.cos_h_majmaj, other.cos_h_majmaj),
            opt(self.cos_h_minmin, other.cos_h_minmin),
            (self.cos_h_majmin - other.cos_h_majmin).abs(),
            (self.align_maj - other.align_maj).abs(),
            (self.align_min - other.align_min).abs(),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Reads the report off Gram/logit targets. Class 0 stands for the
/// majorities and class k-1 for the minorities; embeddings are represented by
/// the first example of each class.
pub fn from_gram_targets(t: &GramTargets, spec: &ImbalanceSpec) -> Result<GeometryReport> {
    let ds = build_dataset(spec)?;
    let k = ds.k();
    if t.gw.shape() != (k, k) || t.gh.shape() != (ds.n(), ds.n()) || t.z.shape() != (k, ds.n()) {
        return Err(SeliError::Dimension("targets do not match dataset".into()));
    }
    let maj = spec.num_majority_classes();
    let first = ds.first_indices();
    let (a, b) = (0, k - 1);
    let (ha, hb) = (first[a], first[b]);
    let cos = |g: &DMatrix<f64>, i: usize, j: usize| g[(i, j)] / (g[(i, i)] * g[(j, j)]).sqrt();
    let majmaj = (maj >= 2).then_some((0, 1));
    let minmin = (k - maj >= 2).then_some((k - 2, k - 1));
    let align = |c: usize| t.z[(c, first[c])] / (t.gw[(c, c)] * t.gh[(first[c], first[c])]).sqrt();
    Ok(GeometryReport {
        norm_w_maj2: t.gw[(a, a)],
        norm_w_min2: t.gw[(b, b)],
        norm_h_maj2: t.gh[(ha, ha)],
        norm_h_min2: t.gh[(hb, hb)],
        cos_w_majmaj: majmaj.map(|(i, j)| cos(&t.gw, i, j)),
        cos_w_minmin: minmin.map(|(i, j)| cos(&t.gw, i, j)),
        cos_w_majmin: cos(&t.gw, a, b),
        cos_h_majmaj: majmaj.map(|(i, j)| cos(&t.gh, first[i], first[j])),
        cos_h_minmin: minmin.map(|(i, j)| cos(&t.gh, first[i], first[j])),
        cos_h_majmin: cos(&t.gh, ha, hb),
        align_maj: align(a),
        align_min: align(b),
    })
}

/// Closed-form SELI geometry for `rho = 1/2`, one minority example per class.
pub fn seli_closed_form(k: usize, r: f64) -> Result<GeometryReport> {
    if k < 2 || k % 2 != 0 {
        return Err(SeliError::InvalidSpec(format!("k = {k} must be even and at least 2")));
    }
    if !r.is_finite() || r < 1.0 {
        return Err(SeliError::InvalidSpec(format!("R = {r} must be a finite real >= 1")));
    }
    let kf = k as f64;
    let sr = r.sqrt();
    let s = ((r + 1.0) / 2.0).sqrt();
    let a = 1.0 - 2.0 / kf;

    let norm_w_maj2 = a * sr + s / kf;
    let norm_w_min2 = a + s / kf;
    let norm_h_maj2 = a / sr + 1.0 / (kf * s);
    let norm_h_min2 = a + 1.0 / (kf * s);
    let (wj, wn) = (norm_w_maj2.sqrt(), norm_w_min2.sqrt());
    let (hj, hn) = (norm_h_maj2.sqrt(), norm_h_min2.sqrt());

    let same_kind = k > 2;
    let cos_w_majmaj = same_kind.then(|| (-2.0 * sr + s) / ((kf - 2.0) * sr + s));
    let cos_w_minmin = same_kind.then(|| (r - 7.0) / (r - 7.0 + 2.0 * kf * (2.0 + s)));
    let cos_h_majmaj =
        same_kind.then(|| -(r + 2.0) / (-(r + 2.0) + kf * (r + 1.0 + sr * s)));
    let cos_h_minmin = same_kind.then(|| {
        let t = 1.0 - 2f64.sqrt() * (r + 1.0).sqrt();
        t / (t + kf * s)
    });

    let diag = 1.0 - 1.0 / kf;
    Ok(GeometryReport {
        norm_w_maj2,
        norm_w_min2,
        norm_h_maj2,
        norm_h_min2,
        cos_w_majmaj,
        cos_w_minmin,
        cos_w_majmin: -s / (kf * wj * wn),
        cos_h_majmaj,
        cos_h_minmin,
        cos_h_majmin: -1.0 / (hj * hn * kf * s),
        align_maj: diag / (wj * hj),
        align_min: diag / (wn * hn),
    })
}

/// Simplex ETF Gram `I - (1/k) 1 1^T`.
pub fn etf_reference(k: usize) -> DMatrix<f64> {
    DMatrix::identity(k, k) - DMatrix::from_element(k, k, 1.0 / k as f64)
}

/// Limits of the half-minority SELI geometry as `R -> infinity`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticLimits {
    pub norm_ratio_w2: f64,
    pub norm_ratio_h2: f64,
    pub cos_w_majmaj: f64,
    pub cos_w_minmin: f64,
    pub cos_w_majmin: f64,
    pub cos_h_majmaj: f64,
    pub cos_h_minmin: f64,
    pub cos_h_majmin: f64,
    pub align_maj: f64,
    pub align_min: f64,
}

impl AsymptoticLimits {
    pub fn named(&self) -> [(&'static str, f64); 10] {
        [
            ("norm_ratio_w2", self.norm_ratio_w2),
            ("norm_ratio_h2", self.norm_ratio_h2),
            ("cos_w_majmaj", self.cos_w_majmaj),
            ("cos_w_minmin", self.cos_w_minmin),
            ("cos_w_majmin", self.cos_w_majmin),
            ("cos_h_majmaj", self.cos_h_majmaj),
            ("cos_h_minmin", self.cos_h_minmin),
            ("cos_h_majmin", self.cos_h_majmin),
            ("align_maj", self.align_maj),
            ("align_min", self.align_min),
        ]
    }

    /// The same ten quantities read off a finite-R report, in matching order.
    pub fn finite_values(report: &GeometryReport) -> Option<[f64; 10]> {
        Some([
            report.norm_ratio_w2(),
            report.norm_ratio_h2(),
            report.cos_w_majmaj?,
            report.cos_w_minmin?,
            report.cos_w_majmin,
            report.cos_h_majmaj?,
            report.cos_h_minmin?,
            report.cos_h_majmin,
            report.align_maj,
            report.align_min,
        ])
    }
}

pub fn asymptotic_limits(k: usize) -> Result<AsymptoticLimits> {
    if k <= 2 || k % 2 != 0 {
        return Err(SeliError::InvalidSpec(format!("k = {k} must be even and above 2")));
    }
    let kf = k as f64;
    let r2 = 2f64.sqrt();
    let m = kf - 2.0;
    Ok(AsymptoticLimits {
        norm_ratio_w2: 1.0 + m * r2,
        norm_ratio_h2: 0.0,
        cos_w_majmaj: (-4.0 + r2) / (r2 + 2.0 * m),
        cos_w_minmin: 1.0,
        cos_w_majmin: -1.0 / (1.0 + r2 * m).sqrt(),
        cos_h_majmaj: -1.0 / (kf * (1.0 + r2 / 2.0) - 1.0),
        cos_h_minmin: -2.0 / m,
        cos_h_majmin: 0.0,
        align_maj: (kf - 1.0) / ((m + r2).sqrt() * (m + r2 / 2.0).sqrt()),
        align_min: 0.0,
    })
}

/// Imbalance ratio above which minority classifiers collapse under ridge
/// parameter `lambda` (per-sample normalized loss).
pub fn minority_collapse_threshold(k: usize, rho: f64, lambda: f64) -> f64 {
    (1.0 / (2.0 * k as f64 * lambda) - rho) / (1.0 - rho)
}

/// Sufficient condition, for a per-sample normalized loss over `n` examples,
/// that the regularized solution still separates every class.
pub fn no_collapse_guaranteed(lambda_per_n: f64, n: usize) -> bool {
    2.0 * lambda_per_n < 1.0 / n as f64
}

const ROOT_TOL: f64 = 1e-12;

/// Root of a continuous increasing `g` with `g(lo) < 0`. The upper bracket
/// starts at `hi` and doubles until the sign changes.
pub(crate) fn bisect_increasing<G: Fn(f64) -> f64>(g: G, mut lo: f64, mut hi: f64) -> f64 {
    while g(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        assert!(hi.is_finite(), "no sign change before overflow");
    }
    for _ in 0..2000 {
        if hi - lo <= ROOT_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Positive root of `lambda * a = k / (e^a + k - 1)`: the scale at which
/// `a * Z` is stationary for ridge-regularized CE on logits.
pub fn linear_model_scale(k: usize, lambda: f64) -> f64 {
    assert!(lambda > 0.0, "lambda must be positive");
    let kf = k as f64;
    bisect_increasing(|a| lambda * a - kf / (a.exp() + kf - 1.0), 0.0, 1.0)
}

/// Squared scale `s = a^2` at which the scaled factorized SELI state is
/// stationary for balanced ridge-regularized CE: `k / (e^s + k - 1) = lambda`.
/// Zero when `lambda >= 1`, where the origin is the only stationary point of
/// this family.
pub fn balanced_ridge_scale2(k: usize, lambda: f64) -> f64 {
    assert!(lambda > 0.0, "lambda must be positive");
    let kf = k as f64;
    if lambda >= 1.0 {
        0.0
    } else {
        (kf / lambda - kf + 1.0).ln()
    }
}

/// Fixed point of the logit-regularization bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitFixedPoint {
    pub rho: f64,
    pub bound: f64,
    pub residual: f64,
}

/// Solves `rho = (beta/lambda_l) (k-1) e^{-beta rho} / (1 + (k-1) e^{-beta rho})`
/// with `beta = sqrt(k / (n (k-1)))`, and evaluates the loss lower bound
/// `log(1 + (k-1) e^{-beta rho}) + (lambda_l/2) rho^2` there.
pub fn logit_reg_fixed_point(k: usize, n: usize, lambda_l: f64) -> LogitFixedPoint {
    assert!(lambda_l > 0.0, "lambda_l must be positive");
    let kf = k as f64;
    let beta = (kf / (n as f64 * (kf - 1.0))).sqrt();
    let rhs = |rho: f64| {
        let e = (kf - 1.0) * (-beta * rho).exp();
        beta / lambda_l * e / (1.0 + e)
    };
    let rho = bisect_increasing(|p| p - rhs(p), 0.0, 1.0);
    let bound = (1.0 + (kf - 1.0) * (-rho * beta).exp()).ln() + 0.5 * lambda_l * rho * rho;
    LogitFixedPoint {
        rho,
        bound,
        residual: (rho - rhs(rho)).abs(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sel::{build_sel_matrix, ce_gradient};
    use crate::spectral::{closed_form_svd, seli_gram_targets};
    use proptest::prelude::*;

    fn spectral_report(k: usize, r: f64) -> GeometryReport {
        let spec = ImbalanceSpec::step(k, r, 0.5).unwrap();
        let t = seli_gram_targets(&closed_form_svd(&spec).unwrap());
        from_gram_targets(&t, &spec).unwrap()
    }

    #[test]
    fn balanced_is_etf() {
        let g = seli_closed_form(4, 1.0).unwrap();
        for (name, c) in g.angles() {
            if name.starts_with("cos") {
                assert!((c + 1.0 / 3.0).abs() < 1e-12, "{name} = {c}");
            }
        }
        assert!((g.align_maj - 1.0).abs() < 1e-12 && (g.align_min - 1.0).abs() < 1e-12);
        assert!((g.norm_ratio_w2() - 1.0).abs() < 1e-12);
        assert!((g.norm_ratio_h2() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn minority_classifiers_orthogonal_at_seven() {
        assert_eq!(seli_closed_form(4, 7.0).unwrap().cos_w_minmin, Some(0.0));
    }

    #[test]
    fn norm_ratio_at_ten() {
        let g = seli_closed_form(4, 10.0).unwrap();
        let t = spectral_report(4, 10.0);
        assert!((g.norm_ratio_w2() - t.norm_ratio_w2()).abs() < 1e-12);
        assert!((g.norm_ratio_w2() - 1.995).abs() < 1e-3);
        let want = -(5.5f64).sqrt() / (4.0 * (g.norm_w_maj2 * g.norm_w_min2).sqrt());
        assert!((g.cos_w_majmin - want).abs() < 1e-15);
    }

    #[test]
    fn binary_has_no_same_kind_pairs() {
        let g = seli_closed_form(2, 10.0).unwrap();
        assert!(g.cos_w_majmaj.is_none() && g.cos_h_minmin.is_none());
        assert!((g.cos_w_majmin + 1.0).abs() < 1e-12);
        assert!((g.cos_h_majmin + 1.0).abs() < 1e-12);
        assert!((g.align_maj - 1.0).abs() < 1e-12);
        assert!(g.max_abs_diff(&spectral_report(2, 10.0)) < 1e-12);
    }

    #[test]
    fn rejects_odd_k() {
        assert!(seli_closed_form(3, 2.0).is_err());
        assert!(asymptotic_limits(2).is_err());
        assert!(asymptotic_limits(5).is_err());
    }

    #[test]
    fn closed_form_matches_spectral_grid() {
        for k in [2, 4, 10, 20] {
            for r in [1.0, 2.0, 3.0, 7.0, 10.0, 100.0] {
                let d = seli_closed_form(k, r).unwrap().max_abs_diff(&spectral_report(k, r));
                assert!(d <= 1e-10, "k={k} R={r} diff={d}");
            }
        }
    }

    #[test]
    fn etf_reference_spectrum() {
        assert_eq!(etf_reference(2), DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]));
        let g = etf_reference(6);
        let mut ev: Vec<f64> = g.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert!(ev[0].abs() < 1e-12);
        assert!(ev[1..].iter().all(|e| (e - 1.0).abs() < 1e-12));
    }

    #[test]
    fn limits_for_four_classes() {
        let l = asymptotic_limits(4).unwrap();
        assert!((l.norm_ratio_w2 - (1.0 + 2.0 * 2f64.sqrt())).abs() < 1e-15);
        assert_eq!(l.cos_w_minmin, 1.0);
        assert_eq!(l.cos_h_minmin, -1.0);
    }

    #[test]
    fn limits_are_approached() {
        // Convergence is roughly R^{-1/4}; 1e12 is far enough out for 1e-2.
        for k in [4, 6, 10] {
            let l = asymptotic_limits(k).unwrap();
            let v = AsymptoticLimits::finite_values(&seli_closed_form(k, 1e12).unwrap()).unwrap();
            for ((name, lim), x) in l.named().iter().zip(v) {
                assert!((lim - x).abs() < 1e-2, "k={k} {name}: limit {lim} value {x}");
            }
        }
    }

    #[test]
    fn collapse_threshold_value() {
        assert!((minority_collapse_threshold(4, 0.5, 0.01) - 24.0).abs() < 1e-12);
        let near = minority_collapse_threshold(4, 1e-9, 1.0 / 8.0);
        assert!((near - 1.0).abs() < 1e-8);
        assert!(no_collapse_guaranteed(0.9 / 44.0, 22));
        assert!(!no_collapse_guaranteed(1.0 / 44.0, 22));
    }

    #[test]
    fn linear_scale_values() {
        let a = linear_model_scale(2, 1.0);
        assert!((a - 0.675).abs() < 1e-3);
        assert!((a - 2.0 / (a.exp() + 1.0)).abs() < 1e-11);
        assert!(linear_model_scale(4, 1e6) < 1e-5);
    }

    #[test]
    fn linear_scale_is_stationary() {
        let ds = build_dataset(&ImbalanceSpec::step(4, 10.0, 0.5).unwrap()).unwrap();
        let z = build_sel_matrix(&ds);
        let lambda = 0.1;
        let a = linear_model_scale(4, lambda);
        let zs = z.entries() * a;
        let res = (ce_gradient(&zs, &ds) + &zs * lambda).norm();
        assert!(res <= 1e-8, "residual {res}");
    }

    #[test]
    fn balanced_ridge_scale_root() {
        for lambda in [1e-3, 0.1, 0.5] {
            let s = balanced_ridge_scale2(4, lambda);
            assert!((4.0 / (s.exp() + 3.0) - lambda).abs() < 1e-12);
        }
        assert_eq!(balanced_ridge_scale2(4, 1.0), 0.0);
    }

    #[test]
    fn logit_fixed_point() {
        let fp = logit_reg_fixed_point(4, 22, 1e-3);
        assert!(fp.residual <= 1e-10, "residual {}", fp.residual);
        assert!(fp.bound <= 4f64.ln());
        assert!(logit_reg_fixed_point(4, 22, 1e9).rho < 1e-9);
    }

    proptest! {
        #[test]
        fn threshold_monotone(k in 2usize..20, a in 0.01f64..0.98, b in 0.01f64..0.98, l in 1e-4f64..1.0) {
            let lambda = l / (2.0 * k as f64);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assume!(hi - lo > 1e-6);
            prop_assert!(minority_collapse_threshold(k, lo, lambda) < minority_collapse_threshold(k, hi, lambda));
            prop_assert!(minority_collapse_threshold(k, lo, lambda) > minority_collapse_threshold(k, lo, 1.5 * lambda));
        }

        #[test]
        fn cosines_bounded(k_half in 1usize..15, r in 1.0f64..1e4) {
            let g = seli_closed_form(2 * k_half, r).unwrap();
            for (name, c) in g.angles() {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c), "{} = {}", name, c);
            }
        }

        #[test]
        fn majority_norm_dominates(k_half in 2usize..15, r in 1.0f64..1e4) {
            let g = seli_closed_form(2 * k_half, r).unwrap();
            prop_assert!(g.norm_ratio_w2() >= 1.0 - 1e-12);
            if r > 1.0 + 1e-6 {
                prop_assert!(g.norm_ratio_w2() > 1.0);
            }
        }

        #[test]
        fn classifier_angles_monotone(k_half in 2usize..15, r in 1.0f64..1e4, dr in 1e-3f64..10.0) {
            let k = 2 * k_half;
            let (a, b) = (seli_closed_form(k, r).unwrap(), seli_closed_form(k, r + dr).unwrap());
            prop_assert!(b.cos_w_majmaj.unwrap() < a.cos_w_majmaj.unwrap());
            prop_assert!(b.cos_w_minmin.unwrap() > a.cos_w_minmin.unwrap());
        }
    }
}
