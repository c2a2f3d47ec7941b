//! Experiment runner: subcommands, JSON configs with flag overrides, and the
//! CSV/JSON files read by the plotting tools.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::convex::{regularization_path, solve_nuc_reg, PathPoint, SolverOptions, SolverResult, ZERO_SOLUTION_TOL};
use crate::error::{Result, SeliError};
use crate::geometry::{seli_closed_form, GeometryReport};
use crate::metrics::{MetricSnapshot, MetricTargets};
use crate::sel::{build_dataset, build_sel_matrix, min_margin, ImbalanceSpec};
use crate::spectral::{closed_form_svd_scaled, nuclear_norm, seli_gram_targets, DualCertificate};
use crate::ufm::{init_ufm, margins, train_with, RidgeDecay, TrainConfig, TrainRecord};
use crate::verify::{self, VerifyOptions, VerifyReport, PATH_LAMBDAS};

pub const SCHEMA_VERSION: u32 = 1;

pub const GEOMETRY_HEADER: [&str; 14] = [
    "k",
    "R",
    "norm_w_maj2",
    "norm_w_min2",
    "norm_h_maj2",
    "norm_h_min2",
    "cos_w_majmaj",
    "cos_w_minmin",
    "cos_w_majmin",
    "cos_h_majmaj",
    "cos_h_minmin",
    "cos_h_majmin",
    "align_maj",
    "align_min",
];

pub const TRAIN_HEADER: [&str; 13] = [
    "epoch",
    "objective",
    "lambda",
    "dist_seli_w",
    "dist_seli_h",
    "dist_seli_z",
    "dist_etf_w",
    "dist_etf_h",
    "dist_etf_z",
    "nc_error",
    "norm_ratio_w",
    "norm_ratio_h",
    "min_margin",
];

pub const REGPATH_HEADER: [&str; 16] = [
    "k",
    "R",
    "lambda",
    "lambda_per_n",
    "zero_solution",
    "converged",
    "iterations",
    "kkt_residual",
    "direction_distance",
    "min_margin",
    "dist_seli_w",
    "dist_seli_h",
    "dist_seli_z",
    "dist_etf_w",
    "dist_etf_h",
    "dist_etf_z",
];

/// Seventeen significant digits, enough to round-trip any f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Debug, Parser)]
#[command(name = "seli", version, about = "SEL geometry, UFM training, and regularization-path experiments")]
pub struct Cli {
    /// Worker threads for sweeps (default: one per core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-form geometry over a (k, R) grid.
    Geometry(GeometryArgs),
    /// Closed-form SVD and dual certificate of one SEL matrix.
    Svd(SvdArgs),
    /// Train the unconstrained-features model.
    Train(TrainArgs),
    /// Solve the nuclear-norm regularized program at one lambda.
    Solve(SolveArgs),
    /// Warm-started regularization path.
    Regpath(RegpathArgs),
    /// Run the invariant battery; exits 1 if any check fails.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SpecArgs {
    #[arg(long)]
    pub k: Option<usize>,
    /// Imbalance ratio R.
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub n_min: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GeometryArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Explicit R values; replaces the log-spaced grid.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    #[arg(long)]
    pub r_min: Option<f64>,
    #[arg(long)]
    pub r_max: Option<f64>,
    #[arg(long)]
    pub r_count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SvdArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub spec: SpecArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Embedding dimension.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size; 0 selects full-batch gradient descent.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub ridge_lambda: Option<f64>,
    #[arg(long)]
    pub logit_lambda: Option<f64>,
    /// Enables ridge decay with this division factor.
    #[arg(long)]
    pub ridge_decay_factor: Option<f64>,
    #[arg(long)]
    pub ridge_decay_every: Option<usize>,
    #[arg(long)]
    pub ridge_decay_floor: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub init_scale: Option<f64>,
    /// Step on the objective divided by n (true) or the raw sum (false).
    #[arg(long)]
    pub normalize: Option<bool>,
    /// Read ridge and logit lambdas as per-sample values (multiplied by n).
    #[arg(long)]
    pub lambda_per_n: bool,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub initial_step: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub spec: SpecArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Read lambda as a per-sample value (multiplied by n).
    #[arg(long)]
    pub lambda_per_n: bool,
}

#[derive(Debug, Args)]
pub struct RegpathArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub n_min: Option<usize>,
    /// Strictly decreasing lambda grid.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Read lambdas as per-sample values (multiplied by n).
    #[arg(long)]
    pub lambda_per_n: bool,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Also write the report to this directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Negate one SEL entry before the certificate check.
    #[arg(long)]
    pub inject_sign_flip: bool,
    #[arg(long)]
    pub train_epochs: Option<usize>,
    /// Run only these checks.
    #[arg(long, value_delimiter = ',')]
    pub only: Option<Vec<String>>,
}

fn default_spec() -> ImbalanceSpec {
    ImbalanceSpec {
        k: 4,
        r: 10.0,
        rho: 0.5,
        n_min: 1,
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn apply_spec(spec: &mut ImbalanceSpec, a: &SpecArgs) {
    if let Some(v) = a.k {
        spec.k = v;
    }
    if let Some(v) = a.ratio {
        spec.r = v;
    }
    if let Some(v) = a.rho {
        spec.rho = v;
    }
    if let Some(v) = a.n_min {
        spec.n_min = v;
    }
}

fn apply_solver(opts: &mut SolverOptions, a: &SolverArgs) {
    if let Some(v) = a.tol {
        opts.tol = v;
    }
    if let Some(v) = a.max_iter {
        opts.max_iter = v;
    }
    if let Some(v) = a.initial_step {
        opts.initial_step = v;
    }
}

fn load<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| SeliError::Io(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| SeliError::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SeliError::Io(format!("{}: {e}", dir.display())))
}

// ---------------------------------------------------------------- geometry

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub ks: Vec<usize>,
    /// Explicit R values; when empty, `r_count` log-spaced points in
    /// `[r_min, r_max]` are used.
    pub ratios: Vec<f64>,
    pub r_min: f64,
    pub r_max: f64,
    pub r_count: usize,
    pub out_dir: PathBuf,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            ks: vec![2, 4, 10, 20],
            ratios: Vec::new(),
            r_min: 1.0,
            r_max: 100.0,
            r_count: 50,
            out_dir: default_out_dir(),
        }
    }
}

impl GeometryConfig {
    pub fn grid(&self) -> Vec<f64> {
        if !self.ratios.is_empty() {
            return self.ratios.clone();
        }
        if self.r_count == 1 {
            return vec![self.r_min];
        }
        let (a, b) = (self.r_min.ln(), self.r_max.ln());
        (0..self.r_count)
            .map(|i| {
                if i + 1 == self.r_count {
                    self.r_max
                } else {
                    (a + (b - a) * i as f64 / (self.r_count - 1) as f64).exp()
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SeliError::Config(m));
        if self.ks.is_empty() {
            return bad("no k values".into());
        }
        if let Some(k) = self.ks.iter().find(|&&k| k < 2 || k % 2 != 0) {
            return bad(format!("k = {k} must be even and at least 2"));
        }
        if self.ratios.is_empty() {
            if !(self.r_min >= 1.0 && self.r_max >= self.r_min && self.r_max.is_finite()) {
                return bad(format!("R range [{}, {}] must satisfy 1 <= r_min <= r_max", self.r_min, self.r_max));
            }
            if self.r_count == 0 {
                return bad("r_count must be positive".into());
            }
        } else if let Some(r) = self.ratios.iter().find(|&&r| !(r >= 1.0 && r.is_finite())) {
            return bad(format!("R = {r} must be a finite real >= 1"));
        }
        Ok(())
    }
}

pub fn geometry_rows(cfg: &GeometryConfig) -> Result<Vec<(usize, f64, GeometryReport)>> {
    cfg.validate()?;
    let points: Vec<(usize, f64)> = cfg
        .ks
        .iter()
        .flat_map(|&k| cfg.grid().into_iter().map(move |r| (k, r)))
        .collect();
    points
        .par_iter()
        .map(|&(k, r)| seli_closed_form(k, r).map(|g| (k, r, g)))
        .collect()
}

pub fn write_geometry_csv(path: &Path, rows: &[(usize, f64, GeometryReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(GEOMETRY_HEADER)?;
    for (k, r, g) in rows {
        w.write_record([
            k.to_string(),
            fmt_f64(*r),
            fmt_f64(g.norm_w_maj2),
            fmt_f64(g.norm_w_min2),
            fmt_f64(g.norm_h_maj2),
            fmt_f64(g.norm_h_min2),
            fmt_opt(g.cos_w_majmaj),
            fmt_opt(g.cos_w_minmin),
            fmt_f64(g.cos_w_majmin),
            fmt_opt(g.cos_h_majmaj),
            fmt_opt(g.cos_h_minmin),
            fmt_f64(g.cos_h_majmin),
            fmt_f64(g.align_maj),
            fmt_f64(g.align_min),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_geometry(a: &GeometryArgs) -> Result<()> {
    let mut cfg: GeometryConfig = load(&a.common.config)?;
    if let Some(v) = &a.ks {
        cfg.ks = v.clone();
    }
    if let Some(v) = &a.ratios {
        cfg.ratios = v.clone();
    }
    if let Some(v) = a.r_min {
        cfg.r_min = v;
    }
    if let Some(v) = a.r_max {
        cfg.r_max = v;
    }
    if let Some(v) = a.r_count {
        cfg.r_count = v;
    }
    if let Some(v) = &a.common.out_dir {
        cfg.out_dir = v.clone();
    }
    cfg.validate()?;
    prepare_dir(&cfg.out_dir)?;
    let rows = geometry_rows(&cfg)?;
    write_geometry_csv(&cfg.out_dir.join("geometry.csv"), &rows)?;
    write_json(
        &cfg.out_dir.join("geometry.json"),
        &serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "config": cfg,
            "rows": rows.len(),
        }),
    )?;
    eprintln!("wrote {} rows to {}", rows.len(), cfg.out_dir.join("geometry.csv").display());
    Ok(())
}

// ---------------------------------------------------------------- svd

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvdConfig {
    pub spec: ImbalanceSpec,
    pub out_dir: PathBuf,
}

impl Default for SvdConfig {
    fn default() -> Self {
        Self {
            spec: default_spec(),
            out_dir: default_out_dir(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdSummary {
    pub schema_version: u32,
    pub spec: ImbalanceSpec,
    pub n: usize,
    pub singular_values: Vec<f64>,
    pub v: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub reconstruction_residual: f64,
    pub orthonormality_residual: f64,
    pub certificate_spectral_norm: f64,
    pub certificate_row_sum_residual: f64,
    pub certificate_min_sign_agreement: f64,
    pub certificate_min_sign_at: (usize, usize),
    pub certificate_trace_gap: f64,
    pub certificate_valid: bool,
}

pub fn svd_summary(spec: &ImbalanceSpec) -> Result<SvdSummary> {
    let ds = build_dataset(spec)?;
    let z = build_sel_matrix(&ds);
    let f = closed_form_svd_scaled(spec)?;
    let cert = DualCertificate::diagnose(&f, &z)?;
    Ok(SvdSummary {
        schema_version: SCHEMA_VERSION,
        spec: *spec,
        n: ds.n(),
        singular_values: f.lambda.iter().copied().collect(),
        v: rows(&f.v),
        u: rows(&f.u),
        reconstruction_residual: (f.reconstruct() - z.entries()).norm(),
        orthonormality_residual: f.orthonormality_residual(),
        certificate_spectral_norm: cert.spectral_norm,
        certificate_row_sum_residual: cert.row_sum_residual,
        certificate_min_sign_agreement: cert.min_sign_agreement,
        certificate_min_sign_at: cert.min_sign_at,
        certificate_trace_gap: cert.trace_gap,
        certificate_valid: cert.violation().is_none(),
    })
}

fn cmd_svd(a: &SvdArgs) -> Result<()> {
    let mut cfg: SvdConfig = load(&a.common.config)?;
    apply_spec(&mut cfg.spec, &a.spec);
    if let Some(v) = &a.common.out_dir {
        cfg.out_dir = v.clone();
    }
    cfg.spec.validate()?;
    prepare_dir(&cfg.out_dir)?;
    let s = svd_summary(&cfg.spec)?;
    write_json(&cfg.out_dir.join("svd.json"), &s)?;
    eprintln!(
        "singular values {:?}; certificate {}",
        s.singular_values,
        if s.certificate_valid { "valid" } else { "INVALID" }
    );
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCommandConfig {
    pub spec: ImbalanceSpec,
    /// Embedding dimension; `None` uses k.
    pub d: Option<usize>,
    pub train: TrainConfig,
    /// Ridge and logit lambdas in `train` are per-sample values.
    pub lambda_per_n: bool,
    pub out_dir: PathBuf,
}

impl Default for TrainCommandConfig {
    fn default() -> Self {
        Self {
            spec: default_spec(),
            d: None,
            train: TrainConfig::default(),
            lambda_per_n: false,
            out_dir: default_out_dir(),
        }
    }
}

impl TrainCommandConfig {
    pub fn dim(&self) -> usize {
        self.d.unwrap_or(self.spec.k)
    }

    /// Training config with lambdas in raw (unnormalized) units.
    pub fn raw_train(&self, n: usize) -> TrainConfig {
        let mut t = self.train.clone();
        if self.lambda_per_n {
            t.ridge_lambda *= n as f64;
            t.logit_lambda *= n as f64;
        }
        t
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let ds = build_dataset(&self.spec)?;
        if self.dim() + 1 < self.spec.k {
            return Err(SeliError::Config(format!("d = {} must be at least k - 1", self.dim())));
        }
        self.raw_train(ds.n()).validate(ds.n())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub schema_version: u32,
    pub csv_header: Vec<String>,
    pub config: TrainCommandConfig,
    pub raw_ridge_lambda: f64,
    pub raw_logit_lambda: f64,
    pub n: usize,
    pub seed: u64,
    pub completed: bool,
    pub error: Option<String>,
    pub records: usize,
    pub final_epoch: Option<usize>,
    pub initial: Option<MetricSnapshot>,
    pub last: Option<MetricSnapshot>,
    pub pair_margins: Option<Vec<Vec<f64>>>,
    pub min_margin: Option<f64>,
    pub pair_margin_relative_spread: Option<f64>,
    pub runtime_seconds: f64,
}

fn train_row(r: &TrainRecord) -> [String; 13] {
    let m = &r.metrics;
    [
        r.epoch.to_string(),
        fmt_f64(r.objective),
        fmt_f64(r.lambda),
        fmt_f64(m.dist_seli_w),
        fmt_f64(m.dist_seli_h),
        fmt_f64(m.dist_seli_z),
        fmt_f64(m.dist_etf_w),
        fmt_f64(m.dist_etf_h),
        fmt_f64(m.dist_etf_z),
        fmt_f64(m.nc_error),
        fmt_f64(m.norm_ratio_w),
        fmt_f64(m.norm_ratio_h),
        fmt_f64(m.min_margin),
    ]
}

/// Trains and streams the trace to `out_dir/train.csv`; the summary is
/// written even when training aborts, and the abort is then returned.
pub fn run_train(cfg: &TrainCommandConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    prepare_dir(&cfg.out_dir)?;
    let start = Instant::now();
    let ds = build_dataset(&cfg.spec)?;
    let tc = cfg.raw_train(ds.n());
    let targets = MetricTargets::new(&seli_gram_targets(&closed_form_svd_scaled(&cfg.spec)?), &ds)?;
    let init = init_ufm(&ds, cfg.dim(), tc.seed, tc.init_scale)?;

    let mut w = csv::Writer::from_path(cfg.out_dir.join("train.csv"))?;
    w.write_record(TRAIN_HEADER)?;
    w.flush()?;
    let mut io_error: Option<SeliError> = None;
    let mut first: Option<MetricSnapshot> = None;
    let mut last: Option<TrainRecord> = None;
    let mut count = 0;
    let outcome = train_with(&init, &ds, &tc, &targets, |rec| {
        count += 1;
        first.get_or_insert(rec.metrics);
        last = Some(*rec);
        if io_error.is_none() {
            if let Err(e) = w.write_record(train_row(rec)).and_then(|_| w.flush().map_err(Into::into)) {
                io_error = Some(e.into());
            }
        }
    });
    w.flush()?;
    if let Some(e) = io_error {
        return Err(e);
    }

    let (state, error) = match outcome {
        Ok((state, _)) => (Some(state), None),
        Err(e) => (None, Some(e)),
    };
    let m = state.as_ref().map(|s| margins(s, &ds));
    let summary = TrainSummary {
        schema_version: SCHEMA_VERSION,
        csv_header: TRAIN_HEADER.iter().map(|s| s.to_string()).collect(),
        config: cfg.clone(),
        raw_ridge_lambda: tc.ridge_lambda,
        raw_logit_lambda: tc.logit_lambda,
        n: ds.n(),
        seed: tc.seed,
        completed: error.is_none(),
        error: error.as_ref().map(|e| e.to_string()),
        records: count,
        final_epoch: last.map(|r| r.epoch),
        initial: first,
        last: last.map(|r| r.metrics),
        pair_margins: m.as_ref().map(|m| rows(&m.pairs)),
        min_margin: m.as_ref().map(|m| m.min),
        pair_margin_relative_spread: m.as_ref().map(|m| m.relative_spread()),
        runtime_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&cfg.out_dir.join("train.json"), &summary)?;
    match error {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg: TrainCommandConfig = load(&a.common.config)?;
    apply_spec(&mut cfg.spec, &a.spec);
    if let Some(v) = &a.common.out_dir {
        cfg.out_dir = v.clone();
    }
    if a.d.is_some() {
        cfg.d = a.d;
    }
    let t = &mut cfg.train;
    if let Some(v) = a.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = (v > 0).then_some(v);
    }
    if let Some(v) = a.ridge_lambda {
        t.ridge_lambda = v;
    }
    if let Some(v) = a.logit_lambda {
        t.logit_lambda = v;
    }
    if a.ridge_decay_factor.is_some() || a.ridge_decay_every.is_some() || a.ridge_decay_floor.is_some() {
        let mut rd = t.ridge_decay.unwrap_or_default();
        if let Some(v) = a.ridge_decay_factor {
            rd.factor = v;
        }
        if let Some(v) = a.ridge_decay_every {
            rd.every_epochs = v;
        }
        if let Some(v) = a.ridge_decay_floor {
            rd.floor = v;
        }
        t.ridge_decay = Some(rd);
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.init_scale {
        t.init_scale = v;
    }
    if let Some(v) = a.normalize {
        t.normalize = v;
    }
    if a.lambda_per_n {
        cfg.lambda_per_n = true;
    }
    let s = run_train(&cfg)?;
    if let Some(m) = s.last {
        eprintln!(
            "epoch {}: dist_seli_z {:.3e}, dist_etf_z {:.3e}, min margin {:.3e}",
            s.final_epoch.unwrap_or(0),
            m.dist_seli_z,
            m.dist_etf_z,
            m.min_margin
        );
    }
    Ok(())
}

/// Default ridge-decay schedule, re-exported for config files.
pub fn default_ridge_decay() -> RidgeDecay {
    RidgeDecay::default()
}

// ---------------------------------------------------------------- solve

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub spec: ImbalanceSpec,
    pub lambda: f64,
    pub lambda_per_n: bool,
    pub solver: SolverOptions,
    pub out_dir: PathBuf,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            spec: default_spec(),
            lambda: 0.4,
            lambda_per_n: false,
            solver: SolverOptions::default(),
            out_dir: default_out_dir(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub schema_version: u32,
    pub config: SolveConfig,
    pub raw_lambda: f64,
    pub n: usize,
    pub objective: f64,
    pub grad_spectral_norm: f64,
    pub factor_residual: f64,
    pub kkt_residual: f64,
    pub rank: usize,
    pub iterations: usize,
    pub converged: bool,
    pub zero_solution: bool,
    pub frobenius_norm: f64,
    pub nuclear_norm: f64,
    pub min_margin: f64,
    pub z: Vec<Vec<f64>>,
    pub runtime_seconds: f64,
}

pub fn run_solve(cfg: &SolveConfig) -> Result<(SolveSummary, SolverResult)> {
    cfg.spec.validate()?;
    let ds = build_dataset(&cfg.spec)?;
    let raw = if cfg.lambda_per_n {
        cfg.lambda * ds.n() as f64
    } else {
        cfg.lambda
    };
    let start = Instant::now();
    let res = solve_nuc_reg(&ds, raw, &cfg.solver)?;
    let summary = SolveSummary {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        raw_lambda: raw,
        n: ds.n(),
        objective: res.objective,
        grad_spectral_norm: res.kkt.grad_spectral_norm,
        factor_residual: res.kkt.factor_residual,
        kkt_residual: res.kkt.residual,
        rank: res.kkt.rank,
        iterations: res.iterations,
        converged: res.converged,
        zero_solution: res.z.norm() <= ZERO_SOLUTION_TOL,
        frobenius_norm: res.z.norm(),
        nuclear_norm: nuclear_norm(&res.z),
        min_margin: min_margin(&res.z, &ds),
        z: rows(&res.z),
        runtime_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((summary, res))
}

fn cmd_solve(a: &SolveArgs) -> Result<()> {
    let mut cfg: SolveConfig = load(&a.common.config)?;
    apply_spec(&mut cfg.spec, &a.spec);
    apply_solver(&mut cfg.solver, &a.solver);
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if a.lambda_per_n {
        cfg.lambda_per_n = true;
    }
    if let Some(v) = &a.common.out_dir {
        cfg.out_dir = v.clone();
    }
    prepare_dir(&cfg.out_dir)?;
    let (s, _) = run_solve(&cfg)?;
    write_json(&cfg.out_dir.join("solve.json"), &s)?;
    eprintln!(
        "lambda {}: converged {} after {} iterations, kkt {:.3e}, min margin {:.3e}",
        s.raw_lambda, s.converged, s.iterations, s.kkt_residual, s.min_margin
    );
    Ok(())
}

// ---------------------------------------------------------------- regpath

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegpathConfig {
    pub k: usize,
    pub ratios: Vec<f64>,
    pub rho: f64,
    pub n_min: usize,
    pub lambdas: Vec<f64>,
    pub lambda_per_n: bool,
    pub solver: SolverOptions,
    pub out_dir: PathBuf,
}

impl Default for RegpathConfig {
    fn default() -> Self {
        Self {
            k: 4,
            ratios: vec![10.0, 100.0],
            rho: 0.5,
            n_min: 1,
            lambdas: PATH_LAMBDAS.to_vec(),
            lambda_per_n: false,
            solver: SolverOptions::default(),
            out_dir: default_out_dir(),
        }
    }
}

impl RegpathConfig {
    pub fn specs(&self) -> Result<Vec<ImbalanceSpec>> {
        if self.ratios.is_empty() {
            return Err(SeliError::Config("no R values".into()));
        }
        self.ratios
            .iter()
            .map(|&r| ImbalanceSpec::new(self.k, r, self.rho, self.n_min))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegpathRow {
    pub spec: ImbalanceSpec,
    pub n: usize,
    pub point: PathPoint,
}

/// One path per R, run in parallel; rows keep the configured order.
pub fn regpath_rows(cfg: &RegpathConfig) -> Result<Vec<RegpathRow>> {
    let specs = cfg.specs()?;
    let paths: Vec<Result<Vec<RegpathRow>>> = specs
        .par_iter()
        .map(|spec| {
            let ds = build_dataset(spec)?;
            let scale = if cfg.lambda_per_n { ds.n() as f64 } else { 1.0 };
            let raw: Vec<f64> = cfg.lambdas.iter().map(|l| l * scale).collect();
            let points = regularization_path(&ds, &raw, &cfg.solver)?;
            Ok(points
                .into_iter()
                .map(|point| RegpathRow {
                    spec: *spec,
                    n: ds.n(),
                    point,
                })
                .collect())
        })
        .collect();
    let mut out = Vec::new();
    for p in paths {
        out.extend(p?);
    }
    Ok(out)
}

pub fn write_regpath_csv(path: &Path, rows: &[RegpathRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REGPATH_HEADER)?;
    for r in rows {
        let p = &r.point;
        let m = p.metrics;
        w.write_record([
            r.spec.k.to_string(),
            fmt_f64(r.spec.r),
            fmt_f64(p.lambda),
            fmt_f64(p.lambda / r.n as f64),
            p.zero_solution.to_string(),
            p.converged.to_string(),
            p.iterations.to_string(),
            fmt_f64(p.kkt_residual),
            fmt_opt(p.direction_distance),
            fmt_f64(p.min_margin),
            fmt_opt(m.map(|m| m.dist_seli_w)),
            fmt_opt(m.map(|m| m.dist_seli_h)),
            fmt_opt(m.map(|m| m.dist_seli_z)),
            fmt_opt(m.map(|m| m.dist_etf_w)),
            fmt_opt(m.map(|m| m.dist_etf_h)),
            fmt_opt(m.map(|m| m.dist_etf_z)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_regpath(a: &RegpathArgs) -> Result<()> {
    let mut cfg: RegpathConfig = load(&a.common.config)?;
    if let Some(v) = a.k {
        cfg.k = v;
    }
    if let Some(v) = &a.ratios {
        cfg.ratios = v.clone();
    }
    if let Some(v) = a.rho {
        cfg.rho = v;
    }
    if let Some(v) = a.n_min {
        cfg.n_min = v;
    }
    if let Some(v) = &a.lambdas {
        cfg.lambdas = v.clone();
    }
    if a.lambda_per_n {
        cfg.lambda_per_n = true;
    }
    apply_solver(&mut cfg.solver, &a.solver);
    if let Some(v) = &a.common.out_dir {
        cfg.out_dir = v.clone();
    }
    cfg.specs()?;
    prepare_dir(&cfg.out_dir)?;
    let start = Instant::now();
    let rows = regpath_rows(&cfg)?;
    write_regpath_csv(&cfg.out_dir.join("regpath.csv"), &rows)?;
    let unconverged = rows.iter().filter(|r| !r.point.converged).count();
    write_json(
        &cfg.out_dir.join("regpath.json"),
        &serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "csv_header": REGPATH_HEADER,
            "config": cfg,
            "rows": rows.len(),
            "unconverged_points": unconverged,
            "runtime_seconds": start.elapsed().as_secs_f64(),
        }),
    )?;
    eprintln!("wrote {} rows ({unconverged} unconverged)", rows.len());
    Ok(())
}

// ---------------------------------------------------------------- verify

pub fn run_verify(opts: &VerifyOptions, only: Option<&[String]>) -> Result<VerifyReport> {
    match only {
        None => Ok(verify::run_all(opts)),
        Some(names) => {
            let start = Instant::now();
            let checks = names
                .par_iter()
                .map(|n| verify::run_named(n, opts).ok_or_else(|| SeliError::Config(format!("unknown check {n}"))))
                .collect::<Result<Vec<_>>>()?;
            Ok(VerifyReport {
                schema_version: verify::SCHEMA_VERSION,
                passed: checks.iter().all(|c| c.passed),
                seconds: start.elapsed().as_secs_f64(),
                checks,
            })
        }
    }
}

fn cmd_verify(a: &VerifyArgs) -> Result<bool> {
    let mut opts = VerifyOptions {
        inject_sign_flip: a.inject_sign_flip,
        ..Default::default()
    };
    if let Some(e) = a.train_epochs {
        opts.train_epochs = e;
    }
    let report = run_verify(&opts, a.only.as_deref())?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(dir) = &a.out_dir {
        prepare_dir(dir)?;
        write_json(&dir.join("verify.json"), &report)?;
    }
    for c in &report.checks {
        eprintln!("{} {}", if c.passed { "PASS" } else { "FAIL" }, c.name);
    }
    Ok(report.passed)
}

/// Runs a parsed command. `Ok(false)` means the command ran but reported a
/// failed check.
pub fn run(cli: &Cli) -> Result<bool> {
    if let Some(t) = cli.threads {
        // Ignore the error if a pool already exists (repeated in-process runs).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match &cli.command {
        Command::Geometry(a) => cmd_geometry(a).map(|_| true),
        Command::Svd(a) => cmd_svd(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Solve(a) => cmd_solve(a).map(|_| true),
        Command::Regpath(a) => cmd_regpath(a).map(|_| true),
        Command::Verify(a) => cmd_verify(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn float_format_round_trips() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 1e308, 0.0] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(fmt_opt(None), "");
    }

    #[test]
    fn log_grid_hits_endpoints() {
        let cfg = GeometryConfig {
            r_count: 7,
            ..Default::default()
        };
        let g = cfg.grid();
        assert_eq!(g.len(), 7);
        assert_eq!((g[0], g[6]), (1.0, 100.0));
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn geometry_config_rejects_odd_k() {
        let cfg = GeometryConfig {
            ks: vec![3],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(SeliError::Config(_))));
    }

    #[test]
    fn lambda_per_n_scales_penalties_only() {
        let mut cfg = TrainCommandConfig::default();
        cfg.train.ridge_lambda = 0.01;
        cfg.train.logit_lambda = 0.001;
        cfg.lambda_per_n = true;
        let t = cfg.raw_train(22);
        assert!((t.ridge_lambda - 0.22).abs() < 1e-15 && (t.logit_lambda - 0.022).abs() < 1e-15);
        assert_eq!(t.learning_rate, cfg.train.learning_rate);
    }

    #[test]
    fn configs_reject_unknown_fields() {
        assert!(serde_json::from_str::<TrainCommandConfig>(r#"{"epochz": 3}"#).is_err());
        let c: TrainCommandConfig = serde_json::from_str(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.spec, default_spec());
    }
}
