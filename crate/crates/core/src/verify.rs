//! The full invariant battery: every check records the worst value of each
//! monitored quantity together with the grid point where it occurred.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convex::{regularization_path, solve_nuc_reg, SolverOptions};
use crate::error::Result;
use crate::geometry::{
    asymptotic_limits, balanced_ridge_scale2, from_gram_targets, linear_model_scale,
    minority_collapse_threshold, no_collapse_guaranteed, seli_closed_form, AsymptoticLimits,
};
use crate::metrics::MetricTargets;
use crate::sel::{build_dataset, build_sel_matrix, ce_gradient, ce_loss, min_margin, ImbalanceSpec, LabeledDataset};
use crate::spectral::{closed_form_svd, seli_gram_targets, DualCertificate, FACTOR_TOL, ROW_SUM_TOL, TRACE_TOL};
use crate::ufm::{init_ufm, margins, scaled_seli_ridge_residual, train, RidgeDecay, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

pub type Coords = BTreeMap<String, f64>;

pub fn at(pairs: &[(&str, f64)]) -> Coords {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bound {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
    #[serde(rename = ">")]
    Above,
}

/// Worst observation of one monitored quantity against its bound. NaN
/// observations are always worst.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantity {
    pub name: String,
    pub bound: Bound,
    pub tolerance: f64,
    pub worst: f64,
    pub at: Coords,
    pub samples: usize,
}

impl Quantity {
    pub fn new(name: &str, bound: Bound, tolerance: f64) -> Self {
        let worst = match bound {
            Bound::AtMost => f64::NEG_INFINITY,
            _ => f64::INFINITY,
        };
        Self {
            name: name.to_string(),
            bound,
            tolerance,
            worst,
            at: Coords::new(),
            samples: 0,
        }
    }

    pub fn observe(&mut self, value: f64, at: Coords) {
        self.samples += 1;
        if self.worst.is_nan() {
            return;
        }
        let worse = value.is_nan()
            || match self.bound {
                Bound::AtMost => value > self.worst,
                _ => value < self.worst,
            };
        if worse || self.samples == 1 {
            self.worst = value;
            self.at = at;
        }
    }

    pub fn passed(&self) -> bool {
        self.samples > 0
            && match self.bound {
                Bound::AtMost => self.worst <= self.tolerance,
                Bound::AtLeast => self.worst >= self.tolerance,
                Bound::Above => self.worst > self.tolerance,
            }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub seconds: f64,
    pub quantities: Vec<Quantity>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub passed: bool,
    pub seconds: f64,
    pub checks: Vec<CheckReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyOptions {
    /// Negates one entry of the SEL matrix before the certificate check.
    pub inject_sign_flip: bool,
    pub train_epochs: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            inject_sign_flip: false,
            train_epochs: 20_000,
        }
    }
}

/// STEP grid with one minority example per class: `k in {2,4,6,10}`,
/// `R in {1,2,3,10,100}`, `rho in {1/2, 1/4}` wherever the class counts are
/// integral.
pub fn spec_grid() -> Vec<ImbalanceSpec> {
    let mut out = Vec::new();
    for k in [2usize, 4, 6, 10] {
        for r in [1.0, 2.0, 3.0, 10.0, 100.0] {
            for rho in [0.5, 0.25] {
                if let Ok(s) = ImbalanceSpec::step(k, r, rho) {
                    out.push(s);
                }
            }
        }
    }
    out
}

fn spec_at(s: &ImbalanceSpec) -> Coords {
    at(&[("k", s.k as f64), ("R", s.r), ("rho", s.rho)])
}

type CheckFn = fn(&VerifyOptions, &mut Vec<Quantity>) -> Result<()>;

fn run_check(name: &str, f: CheckFn, opts: &VerifyOptions) -> CheckReport {
    let start = Instant::now();
    let mut quantities = Vec::new();
    let error = f(opts, &mut quantities).err().map(|e| e.to_string());
    let passed = error.is_none() && !quantities.is_empty() && quantities.iter().all(Quantity::passed);
    CheckReport {
        name: name.to_string(),
        passed,
        seconds: start.elapsed().as_secs_f64(),
        quantities,
        error,
    }
}

pub fn svd_reconstruction(_: &VerifyOptions, q: &mut Vec<Quantity>) -> Result<()> {
    let mut rec = Quantity::new("reconstruction_frobenius", Bound::AtMost, 1e-10);
    let mut orth = Quantity::new("orthonormality_residual", Bound::AtMost, 1e-10);
    let mut vals = Quantity::new("singular_value_mismatch", Bound::AtMost, 1e-9);
    for s in spec_grid() {
        let z = build_sel_matrix(&build_dataset(&s)?);
        let f = closed_form_svd(&s)?;
        rec.observe((f.reconstruct() - z.entries()).norm(), spec_at(&s));
        orth.observe(f.orthonormality_residual(), spec_at(&s));
        let mut reference: Vec<f64> = z.entries().singular_values().iter().copied().collect();
        reference.sort_by(|a, b| b.total_cmp(a));
        let mismatch = f
            .sorted_values()
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).abs())
            .fold(reference[s.k - 1].abs(), f64::max);
        vals.observe(mismatch, spec_at(&s));
    }
    q.extend([rec, orth, vals]);
    Ok(())
}

pub fn dual_certificate(opts: &VerifyOptions, q: &mut Vec<Quantity>) -> Result<()> {
    let mut norm = Quantity::new("spectral_norm", Bound::AtMost, 1.0 + FACTOR_TOL);
    let mut rows = Quantity::new("row_sum_residual", Bound::AtMost, ROW_SUM_TOL);
    let mut sign = Quantity::new("min_sign_agreement", Bound::Above, 0.0);
    let mut trace = Quantity::new("trace_gap", Bound::AtMost, TRACE_TOL);
    for s in spec_grid() {
        let mut z = build_sel_matrix(&build_dataset(&s)?);
        if opts.inject_sign_flip {
            let mut e = z.entries().clone();
            e[(0, 0)] = -e[(0, 0)];
            z = z.with_entries(e)?;
        }
        let cert = DualCertificate::diagnose(&closed_form_svd(&s)?, &z)?;
        norm.observe(cert.spectral_norm, spec_at(&s));
        rows.observe(cert.row_sum_residual, spec_at(&s));
        let mut coords = spec_at(&s);
        coords.insert("example".into(), cert.min_sign_at.0 as f64);
        coords.insert("class".into(), cert.min_sign_at.1 as f64);
        sign.observe(cert.min_sign_agreement, coords);
        trace.observe(cert.trace_gap, spec_at(&s));
    }
    q.extend([norm, rows, sign, trace]);
    Ok(())
}

pub fn closed_form_geometry(_: &VerifyOptions, q: &mut Vec<Quantity>) -> Result<()> {
    let mut agree = Quantity::new("closed_form_vs_spectral", Bound::AtMost, 1e-10);
    let mut etf = Quantity::new("etf_reduction", Bound::AtMost, 1e-10);
    let mut r7 = Quantity::new("cos_w_minmin_at_r7", Bound::AtMost, 1e-14);
    for k in [2usize, 4, 10, 20] {
        for r in [1.0, 2.0, 3.0, 7.0, 10.0, 100.0] {
            let s = ImbalanceSpec::step(k, r, 0.5)?;
            let coords = at(&[("k", k as f64), ("R", r)]);
            let closed = seli_closed_form(k, r)?;
            let spectral = from_gram_targets(&seli_gram_targets(&closed_form_svd(&s)?), &s)?;
            agree.observe(closed.max_abs_diff(&spectral), coords.clone());
            if r == 1.0 || k == 2 {
                let same = -1.0 / (k as f64 - 1.0);
                let mut dev = (closed.norm_ratio_w2() - 1.0).abs().max((closed.norm_ratio_h2() - 1.0).abs());
                for (name, v) in closed.angles() {
                    let want = if name.starts_with("align") { 1.0 } else { same };
                    dev = dev.max((v - want).abs());
                }
                etf.observe(dev, coords.clone());
            }
            if r == 7.0 {
                r7.observe(closed.cos_w_minmin.map_or(0.0, f64::abs), coords);
            }
        }
    }
    q.extend([agree, etf, r7]);
    Ok(())
}

pub fn asymptotics(_: &VerifyOptions, q: &mut Vec<Quantity>) -> Result<()> {
    let (k, r) = (4, 1e6);
    let limits = asymptotic_limits(k)?;
    let finite = AsymptoticLimits::finite_values(&seli_closed_form(k, r)?)
        .expect("all ten quantities are defined for k = 4");
    let mut gap = Quantity::new("limit_gap", Bound::AtMost, 1e-2);
    for (i, ((_, lim), val)) in limits.named().iter().zip(finite).enumerate() {
        gap.observe((val - lim).abs(), at(&[("k", k as f64), ("R", r), ("limit", i as f64 + 1.0)]));
    }
    q.push(gap);
    Ok(())
}

fn random_matrix(rows: usize, cols: usize, seed: u64, scale: f64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| {
        let x: f64 = StandardNormal.sample(&mut rng);
        scale * x
    })
}

fn finite_difference_gradient(z: &DMatrix<f64>, ds: &LabeledDataset, h: f64) -> DMatrix<f64> {
    DMatrix::from_fn(z.nrows(), z.ncols(), |r, c| {
        let (mut p, mut m) = (z.clone(), z.clone());
        p[(r, c)] += h;
        m[(r, c)] -= h;
        (ce_loss(&p, ds) - ce_loss(&m, ds)) / (2.0 * h)
    })
}

pub fn ce_gradient_identity(_: &VerifyOptions, q: &mut Vec<Quantity>) -> Result<()> {
    let mut ident = Quantity::new("scaled_sel_gradient_identity", Bound::AtMost, 1e-9);
    let mut fd = Quantity::new("finite_difference_relative", Bound::AtMost, 1e-6);
    for s in spec_grid() {
        let ds = build_dataset(&s)?;
        let z = build_sel_matrix(&ds);
        let kf = s.k as f64;
        for alpha in [0.0f64, 1.0, 5.0] {
            let g = ce_gradient(&(z.entries() * alpha), &ds);
            let want = z.entries() * (kf / (alpha.exp() + kf - 1.0));
            let mut coords = spec_at(&s);
            coords.insert("alpha".into(), alpha);
            ident.observe((g + want).norm(), coords);
        }
    }
    let ds = LabeledDataset::from_counts(&[2, 2, 1])?;
    for seed in 0..5u64 {
        let z = random_matrix(3, 5, seed, 2.0);
        let g = ce_gradient(&z, &ds);
        let num = finite_difference_gradient(&z, &ds, 1e-5);
        fd.observe((num - &g).norm() / g.norm(), at(&[("seed", seed as f64)]));
    }
    q.extend([ident, fd]);
    Ok(())
}

fn k4r10() -> Result<LabeledDataset> {
    build_dataset(&ImbalanceSpec::step(4, 10.0, 0.5)?)
}

pub fn convex_solver(_: &VerifyOptions, q: &mut Vec<Quantity>) -> Result<()> {
    let ds = k4r10()?;
    let opts = SolverOptions::default();
    let root = 10f64.sqrt();
    let mut zero = Quantity::new("norm_at_sqrt_r", Bound::AtMost, 1e-8);
    let mut nonzero = Quantity::new("norm_at_0.9_sqrt_r", Bound::Above, 1e-3);
    let mut margin = Quantity::new("min_margin_at_0.4", Bound::Above, 1e-9);
    let mut time = Quantity::new("solve_seconds", Bound::AtMost, 60.0);
    let mut kkt = Quantity::new("kkt_residual", Bound::AtMost, opts.tol);
    for (lambda, which) in [(root, 0), (0.9 * root, 1), (0.4, 2)] {
        let start = Instant::now();
        let res = solve_nuc_reg(&ds, lambda, &opts)?;
        let coords = at(&[("k", 4.0), ("R", 10.0), ("lambda", lambda)]);
        time.observe(start.elapsed().as_secs_f64(), coords.clone());
        kkt.observe(res.kkt.residual, coords.clone());
        match which {
            0 => zero.observe(res.z.norm(), coords),
            1 => nonzero.observe(res.z.norm(), coords),
            _ => margin.observe(min_margin(&res.z, &ds), coords),
        }
    }
    q.extend([zero, nonzero, margin, time, kkt]);
    Ok(())
}

pub const PATH_LAMBDAS: [f64; 7] = [1.0, 0.3, 0.1, 0.03, 0.01, 0.003, 0.001];

pub fn regularization_path_check(_: &VerifyOptions, q: &mut Vec<Quantity>) -> Result<()> {
    let opts = SolverOptions::default();
    let mut increase = Quantity::new("max_direction_increase", Bound::AtMost, 0.0);
    let mut shrink = Quantity::new("final_over_first_nonzero", Bound::AtMost, 0.5);
    let mut balanced = Quantity::new("balanced_direction_distance", Bound::AtMost, 1e-6);
    let mut kkt = Quantity::new("kkt_residual", Bound::AtMost, opts.tol);

    let path = regularization_path(&k4r10()?, &PATH_LAMBDAS, &opts)?;
    let dist: Vec<(f64, f64)> = path
        .iter()
        .filter_map(|p| p.direction_distance.map(|d| (p.lambda, d)))
        .collect();
    for p in &path {
        kkt.observe(p.kkt_residual, at(&[("k", 4.0), ("R", 10.0), ("lambda", p.lambda)]));
    }
    for w in dist.windows(2) {
        increase.observe(w[1].1 - w[0].1, at(&[("k", 4.0), ("R", 10.0), ("lambda", w[1].0)]));
    }
    if let (Some(first), Some(last)) = (dist.first(), dist.last()) {
        shrink.observe(last.1 / first.1, at(&[("k", 4.0), ("R", 10.0), ("lambda", last.0)]));
    }

    let bal = build_dataset(&ImbalanceSpec::step(4, 1.0, 0.5)?)?;
    let below_one: Vec<f64> = PATH_LAMBDAS.iter().copied().filter(|&l| l < 1.0).collect();
    for p in regularization_path(&bal, &below_one, &opts)? {
        let coords = at(&[("k", 4.0), ("R", 1.0), ("lambda", p.lambda)]);
        kkt.observe(p.kkt_residual, coords.clone());
        balanced.observe(p.direction_distance.unwrap_or(f64::NAN), coords);
    }
    q.extend([increase, shrink, balanced, kkt]);
    Ok(())
}

/// 20 log-spaced scales in `[0.1, 10]` and 10 log-spaced ridge values in
/// `[1e-3, 1]`.
pub fn imbalance_grid() -> (Vec<f64>, Vec<f64>) {
    let logspace = |a: f64, b: f64, m: usize| -> Vec<f64> {
        (0..m)
            .map(|i| 10f64.powf(a + (b - a) * i as f64 / (m - 1) as f64))
            .collect()
    };
    (logspace(-1.0, 1.0, 20), logspace(-3.0, 0.0, 10))
}

pub fn imbalance_regularization(_: &VerifyOptions, q: &mut Vec<Quantity>) -> Result<()> {
    let (alphas, lambdas) = imbalance_grid();
    let mut away = Quantity::new("imbalanced_min_residual", Bound::AtLeast, 1e-3);
    let mut root = Quantity::new("balanced_root_residual", Bound::AtMost, 1e-8);
    let mut range = Quantity::new("balanced_root_scale", Bound::AtMost, 10.0);

    let spec = ImbalanceSpec::step(4, 10.0, 0.5)?;
    let ds = build_dataset(&spec)?;
    let f = closed_form_svd(&spec)?;
    for &lambda in &lambdas {
        for &alpha in &alphas {
            let r = scaled_seli_ridge_residual(&f, &ds, alpha, lambda)?;
            away.observe(r, at(&[("alpha", alpha), ("lambda", lambda)]));
        }
    }

    let bspec = ImbalanceSpec::step(4, 1.0, 0.5)?;
    let bds = build_dataset(&bspec)?;
    let bf = closed_form_svd(&bspec)?;
    for &lambda in &lambdas {
        let alpha = balanced_ridge_scale2(4, lambda).sqrt();
        let coords = at(&[("alpha", alpha), ("lambda", lambda)]);
        root.observe(scaled_seli_ridge_residual(&bf, &bds, alpha, lambda)?, coords.clone());
        range.observe(alpha, coords);
    }
    q.extend([away, root, range]);
    Ok(())
}

pub fn linear_model(_: &VerifyOptions, q: &mut Vec<Quantity>) -> Result<()> {
    let mut res = Quantity::new("stationarity_residual", Bound::AtMost, 1e-8);
    for k in [2usize, 4, 10] {
        for r in [1.0, 10.0] {
            let ds = build_dataset(&ImbalanceSpec::step(k, r, 0.5)?)?;
            let z = build_sel_matrix(&ds);
            for lambda in [0.01, 0.1, 1.0] {
                let alpha = linear_model_scale(k, lambda);
                let scaled = z.entries() * alpha;
                let g = ce_gradient(&scaled, &ds) + &scaled * lambda;
                res.observe(g.norm(), at(&[("k", k as f64), ("R", r), ("lambda", lambda), ("alpha", alpha)]));
            }
        }
    }
    q.push(res);
    Ok(())
}

/// Logit-regularized full-batch run with ridge decay on `(k=4, R=10)`.
pub fn logit_reg_config(n: usize, epochs: usize) -> TrainConfig {
    let nf = n as f64;
    TrainConfig {
        learning_rate: 1.0,
        epochs,
        batch_size: None,
        ridge_lambda: 1e-2 * nf,
        logit_lambda: 1e-3 * nf,
        ridge_decay: Some(RidgeDecay::default()),
        seed: 0,
        init_scale: 0.1,
        normalize: true,
    }
}

pub const LOGIT_REG_DIM: usize = 8;

pub fn ufm_logit_training(opts: &VerifyOptions, q: &mut Vec<Quantity>) -> Result<()> {
    let spec = ImbalanceSpec::step(4, 10.0, 0.5)?;
    let ds = build_dataset(&spec)?;
    let cfg = logit_reg_config(ds.n(), opts.train_epochs);
    let targets = MetricTargets::new(&seli_gram_targets(&closed_form_svd(&spec)?), &ds)?;
    let init = init_ufm(&ds, LOGIT_REG_DIM, cfg.seed, cfg.init_scale)?;
    let (state, trace) = train(&init, &ds, &cfg, &targets)?;
    let first = trace.first().expect("epoch 0 is always recorded").metrics;
    let last = trace.last().expect("final epoch is always recorded");
    let coords = at(&[("k", 4.0), ("R", 10.0), ("epoch", last.epoch as f64)]);
    let m = last.metrics;

    let mut fin = Quantity::new("final_dist_seli_z", Bound::AtMost, 0.1);
    let mut rel = Quantity::new("final_over_initial_dist_seli_z", Bound::AtMost, 0.1);
    let mut spread = Quantity::new("pair_margin_relative_spread", Bound::AtMost, 0.05);
    let mut gap = Quantity::new("dist_etf_z_minus_dist_seli_z", Bound::Above, 0.0);
    fin.observe(m.dist_seli_z, coords.clone());
    rel.observe(m.dist_seli_z / first.dist_seli_z, coords.clone());
    spread.observe(margins(&state, &ds).relative_spread(), coords.clone());
    gap.observe(m.dist_etf_z - m.dist_seli_z, coords);
    q.extend([fin, rel, spread, gap]);
    Ok(())
}

pub fn minority_collapse(_: &VerifyOptions, q: &mut Vec<Quantity>) -> Result<()> {
    let mut value = Quantity::new("threshold_k4_rho0.5_lambda0.01_minus_24", Bound::AtMost, 1e-12);
    value.observe((minority_collapse_threshold(4, 0.5, 0.01) - 24.0).abs(), at(&[("k", 4.0)]));

    let rhos: Vec<f64> = (1..=10).map(|i| i as f64 / 11.0).collect();
    let lambdas: Vec<f64> = (0..10).map(|i| 10f64.powf(-3.0 + 2.0 * i as f64 / 9.0)).collect();
    let mut in_rho = Quantity::new("min_increase_in_rho", Bound::Above, 0.0);
    let mut in_inv_lambda = Quantity::new("min_increase_in_inverse_lambda", Bound::Above, 0.0);
    for &lambda in &lambdas {
        for w in rhos.windows(2) {
            let d = minority_collapse_threshold(4, w[1], lambda) - minority_collapse_threshold(4, w[0], lambda);
            in_rho.observe(d, at(&[("rho", w[1]), ("lambda", lambda)]));
        }
    }
    for &rho in &rhos {
        for w in lambdas.windows(2) {
            // Larger lambda first, so the step increases 1/lambda.
            let d = minority_collapse_threshold(4, rho, w[0]) - minority_collapse_threshold(4, rho, w[1]);
            in_inv_lambda.observe(d, at(&[("rho", rho), ("lambda", w[0])]));
        }
    }

    let ds = k4r10()?;
    let n = ds.n();
    let mut margin = Quantity::new("min_margin_below_threshold", Bound::Above, 1e-9);
    for frac in [0.9, 0.5, 0.1] {
        let per_n = frac / (2.0 * n as f64);
        debug_assert!(no_collapse_guaranteed(per_n, n));
        let res = solve_nuc_reg(&ds, per_n * n as f64, &SolverOptions::default())?;
        margin.observe(min_margin(&res.z, &ds), at(&[("lambda_per_n", per_n)]));
    }
    q.extend([value, in_rho, in_inv_lambda, margin]);
    Ok(())
}

pub const CHECKS: [(&str, CheckFn); 11] = [
    ("svd_reconstruction", svd_reconstruction),
    ("dual_certificate", dual_certificate),
    ("closed_form_geometry", closed_form_geometry),
    ("asymptotics", asymptotics),
    ("ce_gradient", ce_gradient_identity),
    ("convex_solver", convex_solver),
    ("regularization_path", regularization_path_check),
    ("imbalance_regularization", imbalance_regularization),
    ("linear_model", linear_model),
    ("ufm_logit_training", ufm_logit_training),
    ("minority_collapse", minority_collapse),
];

/// Runs one named check.
pub fn run_named(name: &str, opts: &VerifyOptions) -> Option<CheckReport> {
    CHECKS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(n, f)| run_check(n, *f, opts))
}

/// Runs every check on a worker pool; the report keeps the fixed check order.
pub fn run_all(opts: &VerifyOptions) -> VerifyReport {
    let start = Instant::now();
    let checks: Vec<CheckReport> = CHECKS.par_iter().map(|(n, f)| run_check(n, *f, opts)).collect();
    VerifyReport {
        schema_version: SCHEMA_VERSION,
        passed: checks.iter().all(|c| c.passed),
        seconds: start.elapsed().as_secs_f64(),
        checks,
    }
}
