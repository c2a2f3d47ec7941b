//! Distances of trained classifiers, embeddings, and logits to reference
//! geometries, plus collapse, norm, and margin summaries.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SeliError};
use crate::geometry::etf_reference;
use crate::sel::{min_margin, LabeledDataset};
use crate::spectral::GramTargets;
use crate::ufm::UfmState;

/// Per-class means `M` (d x k) and their centered version `M - mu_G 1^T`,
/// where `mu_G` is the unweighted average of the class means.
pub fn class_means(h: &DMatrix<f64>, ds: &LabeledDataset) -> (DMatrix<f64>, DMatrix<f64>) {
    assert_eq!(h.ncols(), ds.n(), "embedding count does not match dataset");
    let k = ds.k();
    let mut m = DMatrix::zeros(h.nrows(), k);
    for (i, &c) in ds.labels().iter().enumerate() {
        let mut col = m.column_mut(c);
        col += h.column(i);
    }
    for (c, &n) in ds.counts().iter().enumerate() {
        let mut col = m.column_mut(c);
        col /= n as f64;
    }
    let mu_g = m.column_mean();
    let mut centered = m.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mu_g;
    }
    (m, centered)
}

/// `|| A/||A||_F - T/||T||_F ||_F`.
pub fn gram_distance(a: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != target.shape() {
        return Err(SeliError::Dimension(format!(
            "{:?} vs {:?}",
            a.shape(),
            target.shape()
        )));
    }
    let (na, nt) = (a.norm(), target.norm());
    if !(na > 0.0) || !(nt > 0.0) {
        return Err(SeliError::Degenerate("zero matrix has no direction".into()));
    }
    Ok((a / na - target / nt).norm())
}

/// Within-class over total scatter of the embeddings, with the total taken
/// around the unweighted mean of class means.
pub fn nc_error(h: &DMatrix<f64>, ds: &LabeledDataset) -> Result<f64> {
    let (m, _) = class_means(h, ds);
    let mu_g = m.column_mean();
    let mut within = 0.0;
    let mut total = 0.0;
    for (i, &c) in ds.labels().iter().enumerate() {
        within += (h.column(i) - m.column(c)).norm_squared();
        total += (h.column(i) - &mu_g).norm_squared();
    }
    if !(total > 0.0) {
        return Err(SeliError::Degenerate("all embeddings coincide".into()));
    }
    Ok(within / total)
}

/// Reference Gram and logit matrices for both geometries.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTargets {
    pub seli_w: DMatrix<f64>,
    /// k x k, class-representative rows and columns of the embedding Gram.
    pub seli_h: DMatrix<f64>,
    /// k x n logits.
    pub seli_z: DMatrix<f64>,
    pub etf: DMatrix<f64>,
}

impl MetricTargets {
    pub fn new(t: &GramTargets, ds: &LabeledDataset) -> Result<Self> {
        let k = ds.k();
        if t.gw.shape() != (k, k) || t.gh.shape() != (ds.n(), ds.n()) || t.z.shape() != (k, ds.n()) {
            return Err(SeliError::Dimension("targets do not match dataset".into()));
        }
        let first = ds.first_indices();
        Ok(Self {
            seli_w: t.gw.clone(),
            seli_h: DMatrix::from_fn(k, k, |a, b| t.gh[(first[a], first[b])]),
            seli_z: t.z.clone(),
            etf: etf_reference(k),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub dist_seli_w: f64,
    pub dist_seli_h: f64,
    pub dist_seli_z: f64,
    pub dist_etf_w: f64,
    pub dist_etf_h: f64,
    pub dist_etf_z: f64,
    pub nc_error: f64,
    pub norm_ratio_w: f64,
    pub norm_ratio_h: f64,
    pub min_margin: f64,
}

/// Mean column norm over the most populous classes divided by the mean over
/// the least populous ones.
fn norm_ratio(m: &DMatrix<f64>, counts: &[usize]) -> f64 {
    let hi = *counts.iter().max().unwrap();
    let lo = *counts.iter().min().unwrap();
    let mean = |target: usize| {
        let norms: Vec<f64> = counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n == target)
            .map(|(c, _)| m.column(c).norm())
            .collect();
        norms.iter().sum::<f64>() / norms.len() as f64
    };
    mean(hi) / mean(lo)
}

/// All metrics of a state. Classifier metrics use `W^T W`; embedding metrics
/// use centered class means; the ETF logit metric uses uncentered `W^T M`
/// against the ETF Gram and the SELI logit metric compares `W^T H` with the
/// target logits. Undefined quantities (zero matrices) are NaN.
pub fn snapshot(state: &UfmState, ds: &LabeledDataset, targets: &MetricTargets) -> MetricSnapshot {
    let (w, h) = (&state.w, &state.h);
    let (m, centered) = class_means(h, ds);
    let gw = w.transpose() * w;
    let gm = centered.transpose() * &centered;
    let z = w.transpose() * h;
    let zm = w.transpose() * &m;
    let d = |a: &DMatrix<f64>, t: &DMatrix<f64>| gram_distance(a, t).unwrap_or(f64::NAN);
    MetricSnapshot {
        dist_seli_w: d(&gw, &targets.seli_w),
        dist_seli_h: d(&gm, &targets.seli_h),
        dist_seli_z: d(&z, &targets.seli_z),
        dist_etf_w: d(&gw, &targets.etf),
        dist_etf_h: d(&gm, &targets.etf),
        dist_etf_z: d(&zm, &targets.etf),
        nc_error: nc_error(h, ds).unwrap_or(f64::NAN),
        norm_ratio_w: norm_ratio(w, ds.counts()),
        norm_ratio_h: norm_ratio(&centered, ds.counts()),
        min_margin: min_margin(&z, ds),
    }
}
