//! STEP-imbalanced label layouts, the simplex-encoding label (SEL) matrix, and
//! the multiclass cross-entropy loss evaluated directly on logit matrices.
//!
//! Class indices are zero-based. Examples are ordered by class: all examples of
//! class 0 first, then class 1, and so on. Majority classes come first.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SeliError};

const INTEGRAL_TOL: f64 = 1e-9;

fn as_integer(x: f64) -> Option<usize> {
    let r = x.round();
    if r >= 0.0 && (x - r).abs() <= INTEGRAL_TOL * x.abs().max(1.0) {
        Some(r as usize)
    } else {
        None
    }
}

/// Description of an `(R, rho)`-STEP imbalanced dataset.
///
/// `(1 - rho) * k` majority classes carry `R * n_min` examples each and the
/// remaining `rho * k` minority classes carry `n_min` examples each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub k: usize,
    #[serde(rename = "R")]
    pub r: f64,
    pub rho: f64,
    pub n_min: usize,
}

impl ImbalanceSpec {
    /// Validated constructor.
    pub fn new(k: usize, r: f64, rho: f64, n_min: usize) -> Result<Self> {
        let spec = Self { k, r, rho, n_min };
        spec.validate()?;
        Ok(spec)
    }

    /// STEP imbalance with a single minority example per class.
    pub fn step(k: usize, r: f64, rho: f64) -> Result<Self> {
        Self::new(k, r, rho, 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SeliError::InvalidSpec(msg));
        if self.k < 2 {
            return bad(format!("k = {} must be at least 2", self.k));
        }
        if !self.r.is_finite() || self.r < 1.0 {
            return bad(format!("R = {} must be a finite real >= 1", self.r));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad(format!("rho = {} must lie in (0, 1)", self.rho));
        }
        if self.n_min < 1 {
            return bad("n_min must be at least 1".into());
        }
        let kf = self.k as f64;
        match as_integer(self.rho * kf) {
            Some(m) if m >= 1 && m < self.k => {}
            _ => return bad(format!("rho * k = {} is not a positive integer below k", self.rho * kf)),
        }
        if as_integer(self.r * self.n_min as f64).is_none() {
            return bad(format!(
                "R * n_min = {} is not an integer",
                self.r * self.n_min as f64
            ));
        }
        Ok(())
    }

    pub fn num_minority_classes(&self) -> usize {
        as_integer(self.rho * self.k as f64).expect("validated spec")
    }

    pub fn num_majority_classes(&self) -> usize {
        self.k - self.num_minority_classes()
    }

    /// Examples per majority class, `R * n_min`.
    pub fn majority_count(&self) -> usize {
        as_integer(self.r * self.n_min as f64).expect("validated spec")
    }

    /// Total example count `(rho + R (1 - rho)) k n_min`.
    pub fn n(&self) -> usize {
        self.num_majority_classes() * self.majority_count() + self.num_minority_classes() * self.n_min
    }

    pub fn is_balanced(&self) -> bool {
        self.majority_count() == self.n_min
    }
}

/// Class-ordered labels together with per-class counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    k: usize,
    labels: Vec<usize>,
    counts: Vec<usize>,
}

impl LabeledDataset {
    /// Ordered dataset with the given per-class counts.
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if counts.len() < 2 {
            return Err(SeliError::InvalidSpec("need at least two classes".into()));
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(SeliError::InvalidSpec(format!("class {c} has no examples")));
        }
        let labels = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
            .collect();
        Ok(Self {
            k: counts.len(),
            labels,
            counts: counts.to_vec(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Index of the first example of each class.
    pub fn first_indices(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.k);
        let mut start = 0;
        for &n in &self.counts {
            out.push(start);
            start += n;
        }
        out
    }

    /// Zero-one label matrix `Y` (k x n).
    pub fn one_hot(&self) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(self.k, self.n());
        for (i, &c) in self.labels.iter().enumerate() {
            y[(c, i)] = 1.0;
        }
        y
    }
}

/// Builds the ordered STEP dataset described by `spec`.
pub fn build_dataset(spec: &ImbalanceSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let maj = spec.num_majority_classes();
    let n_maj = spec.majority_count();
    let counts: Vec<usize> = (0..spec.k)
        .map(|c| if c < maj { n_maj } else { spec.n_min })
        .collect();
    LabeledDataset::from_counts(&counts)
}

/// The k x n simplex-encoding label matrix of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SelMatrix {
    entries: DMatrix<f64>,
    dataset: LabeledDataset,
}

impl SelMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn dataset(&self) -> &LabeledDataset {
        &self.dataset
    }

    pub fn k(&self) -> usize {
        self.dataset.k()
    }

    pub fn n(&self) -> usize {
        self.dataset.n()
    }

    /// Replaces the entries, keeping the dataset. Used to build perturbed
    /// copies for negative controls.
    pub fn with_entries(&self, entries: DMatrix<f64>) -> Result<Self> {
        if entries.shape() != self.entries.shape() {
            return Err(SeliError::Dimension(format!(
                "expected {:?}, got {:?}",
                self.entries.shape(),
                entries.shape()
            )));
        }
        Ok(Self {
            entries,
            dataset: self.dataset.clone(),
        })
    }
}

/// `Z[c, i] = 1 - 1/k` when `c = y_i`, `-1/k` otherwise.
pub fn build_sel_matrix(ds: &LabeledDataset) -> SelMatrix {
    let k = ds.k();
    let inv_k = 1.0 / k as f64;
    let mut entries = DMatrix::from_element(k, ds.n(), -inv_k);
    for (i, &c) in ds.labels().iter().enumerate() {
        entries[(c, i)] = 1.0 - inv_k;
    }
    SelMatrix {
        entries,
        dataset: ds.clone(),
    }
}

fn check_logits(z: &DMatrix<f64>, ds: &LabeledDataset) {
    assert_eq!(
        z.shape(),
        (ds.k(), ds.n()),
        "logit matrix shape does not match dataset (k, n)"
    );
}

/// Cross-entropy of a single logit column with true class `y`, computed as
/// `logsumexp(z) - z[y]`.
pub(crate) fn column_loss(z: &[f64], y: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|&v| (v - m).exp()).sum();
    s.ln() + m - z[y]
}

/// Softmax of a logit column minus the one-hot indicator of `y`, written into `out`.
pub(crate) fn column_gradient(z: &[f64], y: usize, out: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
    out[y] -= 1.0;
}

/// `sum_i log(1 + sum_{c != y_i} exp(Z[c,i] - Z[y_i,i]))`.
pub fn ce_loss(z: &DMatrix<f64>, ds: &LabeledDataset) -> f64 {
    check_logits(z, ds);
    ds.labels()
        .iter()
        .enumerate()
        .map(|(i, &y)| column_loss(z.column(i).as_slice(), y))
        .sum()
}

/// Gradient of [`ce_loss`] with respect to the logits: `A - Y` with `A` the
/// column-wise softmax. Columns sum to zero.
pub fn ce_gradient(z: &DMatrix<f64>, ds: &LabeledDataset) -> DMatrix<f64> {
    check_logits(z, ds);
    let mut g = DMatrix::zeros(ds.k(), ds.n());
    for (i, &y) in ds.labels().iter().enumerate() {
        let mut col = g.column_mut(i);
        column_gradient(z.column(i).as_slice(), y, col.as_mut_slice());
    }
    g
}

/// Smallest pairwise margin `Z[y_i,i] - Z[c,i]` over all examples and `c != y_i`.
pub fn min_margin(z: &DMatrix<f64>, ds: &LabeledDataset) -> f64 {
    check_logits(z, ds);
    let mut best = f64::INFINITY;
    for (i, &y) in ds.labels().iter().enumerate() {
        for c in 0..ds.k() {
            if c != y {
                best = best.min(z[(y, i)] - z[(c, i)]);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_binary_dataset() {
        let spec = ImbalanceSpec::new(2, 1.0, 0.5, 1).unwrap();
        let ds = build_dataset(&spec).unwrap();
        assert_eq!(ds.labels(), &[0, 1]);
        assert_eq!(ds.counts(), &[1, 1]);
    }

    #[test]
    fn step_counts() {
        let ds = build_dataset(&ImbalanceSpec::new(4, 10.0, 0.5, 1).unwrap()).unwrap();
        assert_eq!(ds.counts(), &[10, 10, 1, 1]);
        assert_eq!(ds.n(), 22);

        let spec = ImbalanceSpec::new(4, 3.0, 0.25, 2).unwrap();
        let ds = build_dataset(&spec).unwrap();
        assert_eq!(ds.counts(), &[6, 6, 6, 2]);
        assert_eq!(ds.n(), 20);
        assert_eq!(spec.n(), 20);
    }

    #[test]
    fn rejects_non_integral_specs() {
        assert!(ImbalanceSpec::new(4, 2.5, 0.5, 1).is_err());
        assert!(ImbalanceSpec::new(4, 2.5, 0.5, 2).is_ok());
        assert!(ImbalanceSpec::new(4, 3.0, 0.3, 1).is_err());
        assert!(ImbalanceSpec::new(4, 0.5, 0.5, 1).is_err());
        assert!(ImbalanceSpec::new(1, 1.0, 0.5, 1).is_err());
        assert!(ImbalanceSpec::new(4, 3.0, 0.5, 0).is_err());
        assert!(LabeledDataset::from_counts(&[3, 0, 1]).is_err());
    }

    #[test]
    fn sel_matrix_binary() {
        let ds = LabeledDataset::from_counts(&[1, 1]).unwrap();
        let z = build_sel_matrix(&ds);
        let expected = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        assert_eq!(z.entries(), &expected);
    }

    #[test]
    fn sel_matrix_is_centered_one_hot() {
        let ds = LabeledDataset::from_counts(&[3, 1, 2]).unwrap();
        let z = build_sel_matrix(&ds);
        let y = ds.one_hot();
        let expected = &y - DMatrix::from_element(3, ds.n(), 1.0 / 3.0);
        assert!((z.entries() - expected).norm() < 1e-15);
        for j in 0..ds.n() {
            assert!(z.entries().column(j).sum().abs() < 1e-15);
        }
    }

    #[test]
    fn loss_at_zero_is_n_log_k() {
        let ds = LabeledDataset::from_counts(&[3, 2, 1]).unwrap();
        let z = DMatrix::zeros(3, 6);
        assert!((ce_loss(&z, &ds) - 6.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_at_binary_sel() {
        let ds = LabeledDataset::from_counts(&[1, 1]).unwrap();
        let z = build_sel_matrix(&ds);
        let expected = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((ce_loss(z.entries(), &ds) - expected).abs() < 1e-14);
    }

    #[test]
    fn loss_vanishes_along_scaled_sel() {
        let ds = LabeledDataset::from_counts(&[4, 1, 1]).unwrap();
        let z = build_sel_matrix(&ds);
        let big = z.entries() * 800.0;
        let l = ce_loss(&big, &ds);
        assert!(l.is_finite() && l < 1e-300);
        assert!(ce_loss(&(z.entries() * 5.0), &ds) > ce_loss(&(z.entries() * 10.0), &ds));
    }

    #[test]
    fn gradient_at_zero_is_minus_sel() {
        let ds = LabeledDataset::from_counts(&[2, 3, 1, 1]).unwrap();
        let z = build_sel_matrix(&ds);
        let g = ce_gradient(&DMatrix::zeros(4, ds.n()), &ds);
        assert!((g + z.entries()).norm() < 1e-15);
    }

    #[test]
    fn min_margin_of_sel_is_one() {
        let ds = LabeledDataset::from_counts(&[5, 5, 1]).unwrap();
        let z = build_sel_matrix(&ds);
        assert!((min_margin(z.entries(), &ds) - 1.0).abs() < 1e-15);
    }
}
