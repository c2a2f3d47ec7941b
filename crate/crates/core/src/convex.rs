//! Nuclear-norm regularized cross-entropy on logit matrices,
//! `min_Z CE(Z) + lambda ||Z||_*`, solved by accelerated proximal gradient.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SeliError};
use crate::linalg::thin_svd;
use crate::metrics::{snapshot, MetricSnapshot, MetricTargets};
use crate::sel::{build_sel_matrix, ce_gradient, ce_loss, min_margin, LabeledDataset};
use crate::spectral::{compact_svd, nuclear_norm, numerical_svd, seli_gram_targets, GramTargets};
use crate::ufm::factorized_seli_state;

/// Singular values below this fraction of `max(1, sigma_max)` count as zero.
pub const RANK_TOL: f64 = 1e-10;

const ROUNDOFF: f64 = 64.0 * f64::EPSILON;
const CANCELLATION: f64 = 1e-8;

/// Singular value soft-thresholding, the proximal map of `tau ||.||_*`.
pub fn svt(m: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    assert!(tau >= 0.0, "threshold must be nonnegative");
    if tau == 0.0 {
        return m.clone();
    }
    thin_svd(m).recompose_with(|s| (s - tau).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub initial_step: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 200_000,
            initial_step: 1.0,
        }
    }
}

/// First-order optimality diagnostics of the regularized program.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResidual {
    /// `||grad L(Z)||_2`.
    pub grad_spectral_norm: f64,
    /// `max(||grad U + lambda V||_F, ||grad^T V + lambda U||_F)` over the
    /// compact SVD `Z = V diag(s) U^T`.
    pub factor_residual: f64,
    pub rank: usize,
    /// Largest violation, including `max(0, ||grad||_2 - lambda)`.
    pub residual: f64,
}

pub fn kkt_residual(z: &DMatrix<f64>, ds: &LabeledDataset, lambda: f64) -> KktResidual {
    let g = ce_gradient(z, ds);
    let f = compact_svd(z, RANK_TOL);
    let grad_spectral_norm = g.singular_values().max();
    let factor_residual = if f.rank() == 0 {
        0.0
    } else {
        let a = (&g * &f.u + &f.v * lambda).norm();
        let b = (g.transpose() * &f.v + &f.u * lambda).norm();
        a.max(b)
    };
    KktResidual {
        grad_spectral_norm,
        factor_residual,
        rank: f.rank(),
        residual: factor_residual.max(grad_spectral_norm - lambda).max(0.0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverResult {
    pub z: DMatrix<f64>,
    pub lambda: f64,
    pub objective: f64,
    pub kkt: KktResidual,
    pub iterations: usize,
    pub converged: bool,
}

fn regularized(z: &DMatrix<f64>, ds: &LabeledDataset, lambda: f64) -> f64 {
    ce_loss(z, ds) + lambda * nuclear_norm(z)
}

/// Solves from the origin.
pub fn solve_nuc_reg(ds: &LabeledDataset, lambda: f64, opts: &SolverOptions) -> Result<SolverResult> {
    solve_nuc_reg_from(ds, lambda, opts, &DMatrix::zeros(ds.k(), ds.n()))
}

/// Accelerated proximal gradient with backtracking from `start`. Momentum is
/// reset when the objective would increase beyond roundoff or when the
/// extrapolation direction stops agreeing with the proximal step.
pub fn solve_nuc_reg_from(
    ds: &LabeledDataset,
    lambda: f64,
    opts: &SolverOptions,
    start: &DMatrix<f64>,
) -> Result<SolverResult> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(SeliError::Config(format!("lambda = {lambda} must be positive")));
    }
    if start.shape() != (ds.k(), ds.n()) {
        return Err(SeliError::Dimension("starting point does not match dataset".into()));
    }
    if !(opts.tol > 0.0 && opts.initial_step > 0.0) {
        return Err(SeliError::Config("tolerance and step must be positive".into()));
    }

    let mut x = start.clone();
    let mut fx = regularized(&x, ds, lambda);
    let mut y = x.clone();
    let mut theta = 1.0f64;
    let mut step = opts.initial_step;
    let mut kkt = kkt_residual(&x, ds, lambda);
    let mut iterations = 0;

    while kkt.residual > opts.tol && iterations < opts.max_iter {
        iterations += 1;
        let ly = ce_loss(&y, ds);
        let gy = ce_gradient(&y, ds);
        step *= 1.25;
        let (cand, fc) = loop {
            let cand = svt(&(&y - &gy * step), lambda * step);
            let diff = &cand - &y;
            let dd = diff.norm_squared();
            let lc = ce_loss(&cand, ds);
            let accept = if dd == 0.0 {
                true
            } else if (lc - ly).abs() > CANCELLATION * ly.abs().max(1.0) {
                lc - ly - gy.dot(&diff) <= dd / (2.0 * step)
            } else {
                // Function values agree to roundoff; bound the curvature from
                // the gradient change instead.
                (ce_gradient(&cand, ds) - &gy).dot(&diff).abs() <= dd / step
            };
            if accept || step < 1e-14 {
                let fc = lc + lambda * nuclear_norm(&cand);
                break (cand, fc);
            }
            step *= 0.5;
        };
        if fc > fx + ROUNDOFF * fx.abs().max(1.0) {
            if theta > 1.0 {
                // Restart from the last accepted point without momentum.
                theta = 1.0;
                y = x.clone();
                continue;
            }
            break;
        }
        // Gradient-based restart: drop momentum once it points uphill.
        if (&y - &cand).dot(&(&cand - &x)) > 0.0 {
            theta = 1.0;
        }
        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        y = &cand + (&cand - &x) * ((theta - 1.0) / theta_next);
        theta = theta_next;
        x = cand;
        fx = fc;
        kkt = kkt_residual(&x, ds, lambda);
    }

    Ok(SolverResult {
        converged: kkt.residual <= opts.tol,
        objective: fx,
        z: x,
        lambda,
        kkt,
        iterations,
    })
}

/// Gram and logit targets `(V Λ V^T, U Λ U^T, V Λ U^T)` of a solution.
pub fn lambda_seli_targets(result: &SolverResult) -> GramTargets {
    seli_gram_targets(&compact_svd(&result.z, RANK_TOL))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub lambda: f64,
    pub zero_solution: bool,
    pub converged: bool,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// `|| Z_l/||Z_l||_* - Z/||Z||_* ||_F`; `None` at the zero solution.
    pub direction_distance: Option<f64>,
    pub min_margin: f64,
    /// Metrics of the factorized state built from the solution's SVD,
    /// measured against the SELI and ETF references.
    pub metrics: Option<MetricSnapshot>,
}

/// Frobenius norm below which a solution is reported as zero.
pub const ZERO_SOLUTION_TOL: f64 = 1e-8;

/// Solves along a decreasing grid, warm-starting each point from the last.
pub fn regularization_path(
    ds: &LabeledDataset,
    lambdas: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<PathPoint>> {
    if lambdas.is_empty() {
        return Err(SeliError::Config("empty lambda grid".into()));
    }
    if lambdas.iter().any(|&l| !(l > 0.0 && l.is_finite())) || lambdas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(SeliError::Config("lambda grid must be positive and strictly decreasing".into()));
    }
    let sel = build_sel_matrix(ds);
    let sel_dir = sel.entries() / nuclear_norm(sel.entries());
    let targets = MetricTargets::new(&seli_gram_targets(&numerical_svd(&sel)), ds)?;

    let mut z = DMatrix::zeros(ds.k(), ds.n());
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let res = solve_nuc_reg_from(ds, lambda, opts, &z)?;
        let zero_solution = res.z.norm() <= ZERO_SOLUTION_TOL;
        let (direction_distance, metrics) = if zero_solution {
            (None, None)
        } else {
            let dir = (&res.z / nuclear_norm(&res.z) - &sel_dir).norm();
            let f = compact_svd(&res.z, RANK_TOL);
            let state = factorized_seli_state(&f, ds.k(), 1.0)?;
            (Some(dir), Some(snapshot(&state, ds, &targets)))
        };
        out.push(PathPoint {
            lambda,
            zero_solution,
            converged: res.converged,
            iterations: res.iterations,
            kkt_residual: res.kkt.residual,
            direction_distance,
            min_margin: min_margin(&res.z, ds),
            metrics,
        });
        z = res.z;
    }
    Ok(out)
}
