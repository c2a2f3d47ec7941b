//! Unconstrained-features model: free classifiers `W` (d x k) and embeddings
//! `H` (d x n) trained on regularized cross-entropy.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SeliError};
use crate::metrics::{snapshot, MetricSnapshot, MetricTargets};
use crate::sel::{ce_gradient, ce_loss, column_gradient, LabeledDataset};
use crate::spectral::SvdFactors;

#[derive(Debug, Clone, PartialEq)]
pub struct UfmState {
    pub w: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

impl UfmState {
    pub fn d(&self) -> usize {
        self.w.nrows()
    }

    pub fn logits(&self) -> DMatrix<f64> {
        self.w.transpose() * &self.h
    }

    fn is_finite(&self) -> bool {
        self.w.iter().chain(self.h.iter()).all(|x| x.is_finite())
    }
}

fn check_dim(d: usize, k: usize) -> Result<()> {
    if d + 1 < k {
        return Err(SeliError::Dimension(format!("d = {d} is below k - 1 = {}", k - 1)));
    }
    Ok(())
}

/// Independent `N(0, init_scale^2)` entries, `W` drawn before `H`.
pub fn init_ufm(ds: &LabeledDataset, d: usize, seed: u64, init_scale: f64) -> Result<UfmState> {
    check_dim(d, ds.k())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |r: usize, c: usize| {
        DMatrix::from_fn(r, c, |_, _| {
            let x: f64 = StandardNormal.sample(&mut rng);
            x * init_scale
        })
    };
    let w = draw(d, ds.k());
    let h = draw(d, ds.n());
    Ok(UfmState { w, h })
}

/// Ridge weight on `||W||^2 + ||H||^2` and logit weight on `||W^T H||^2`,
/// both in units of the unnormalized loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Penalties {
    pub ridge: f64,
    pub logit: f64,
}

/// `CE(W^T H) + (ridge/2)(||W||^2 + ||H||^2) + (logit/2)||W^T H||^2`.
pub fn objective(state: &UfmState, ds: &LabeledDataset, p: Penalties) -> f64 {
    let z = state.logits();
    ce_loss(&z, ds)
        + 0.5 * p.ridge * (state.w.norm_squared() + state.h.norm_squared())
        + 0.5 * p.logit * z.norm_squared()
}

/// Gradients of [`objective`] with respect to `W` and `H`.
pub fn gradients(state: &UfmState, ds: &LabeledDataset, p: Penalties) -> (DMatrix<f64>, DMatrix<f64>) {
    let z = state.logits();
    let e = ce_gradient(&z, ds) + &z * p.logit;
    let dw = &state.h * e.transpose() + &state.w * p.ridge;
    let dh = &state.w * e + &state.h * p.ridge;
    (dw, dh)
}

/// Frobenius norm of the full gradient.
pub fn gradient_norm(state: &UfmState, ds: &LabeledDataset, p: Penalties) -> f64 {
    let (dw, dh) = gradients(state, ds, p);
    (dw.norm_squared() + dh.norm_squared()).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RidgeDecay {
    pub factor: f64,
    pub every_epochs: usize,
    #[serde(default = "default_floor")]
    pub floor: f64,
}

fn default_floor() -> f64 {
    1e-8
}

impl Default for RidgeDecay {
    fn default() -> Self {
        Self {
            factor: 10.0,
            every_epochs: 2000,
            floor: default_floor(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// `None` runs full-batch gradient descent.
    pub batch_size: Option<usize>,
    pub ridge_lambda: f64,
    pub logit_lambda: f64,
    pub ridge_decay: Option<RidgeDecay>,
    pub seed: u64,
    pub init_scale: f64,
    /// Optimize the objective divided by n, as is usual for empirical risk.
    /// Penalties stay in unnormalized units either way.
    pub normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.4,
            epochs: 1000,
            batch_size: None,
            ridge_lambda: 0.0,
            logit_lambda: 0.0,
            ridge_decay: None,
            seed: 0,
            init_scale: 0.1,
            normalize: true,
        }
    }
}

impl TrainConfig {
    pub fn penalties(&self) -> Penalties {
        Penalties {
            ridge: self.ridge_lambda,
            logit: self.logit_lambda,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |m: String| Err(SeliError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate = {} must be positive", self.learning_rate));
        }
        if let Some(b) = self.batch_size {
            if b == 0 || b > n {
                return bad(format!("batch_size = {b} must lie in 1..={n}"));
            }
        }
        if !(self.ridge_lambda >= 0.0) || !(self.logit_lambda >= 0.0) {
            return bad("penalties must be nonnegative".into());
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init_scale = {} must be nonnegative", self.init_scale));
        }
        if let Some(r) = &self.ridge_decay {
            if !(r.factor > 1.0) {
                return bad(format!("ridge decay factor = {} must exceed 1", r.factor));
            }
            if r.every_epochs == 0 {
                return bad("ridge decay interval must be at least one epoch".into());
            }
            if !(r.floor >= 0.0) {
                return bad("ridge decay floor must be nonnegative".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    /// Unnormalized objective at the current penalties.
    pub objective: f64,
    pub lambda: f64,
    pub metrics: MetricSnapshot,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TrainRecord>,
}

impl TrainTrace {
    pub fn first(&self) -> Option<&TrainRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&TrainRecord> {
        self.records.last()
    }
}

/// Every epoch through 100, then geometric growth by 1.2, always ending at
/// `epochs`.
pub fn record_schedule(epochs: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=epochs.min(100)).collect();
    let mut e = 100usize;
    loop {
        e = ((e as f64) * 1.2).ceil() as usize;
        if e >= epochs {
            break;
        }
        out.push(e);
    }
    if *out.last().unwrap() != epochs {
        out.push(epochs);
    }
    out
}

/// One gradient step on the columns `batch`. The CE and logit terms are
/// rescaled by `n / |batch|` so that each step estimates the full gradient.
fn step(state: &mut UfmState, ds: &LabeledDataset, batch: &[usize], p: Penalties, lr: f64) {
    let k = ds.k();
    let d = state.d();
    let scale = ds.n() as f64 / batch.len() as f64;
    let labels = ds.labels();

    let mut e = DMatrix::zeros(k, batch.len());
    let mut hb = DMatrix::zeros(d, batch.len());
    for (j, &i) in batch.iter().enumerate() {
        hb.set_column(j, &state.h.column(i));
    }
    let zb = state.w.transpose() * &hb;
    for (j, &i) in batch.iter().enumerate() {
        let mut col = e.column_mut(j);
        column_gradient(zb.column(j).as_slice(), labels[i], col.as_mut_slice());
    }
    if p.logit > 0.0 {
        e += &zb * p.logit;
    }
    e *= scale;

    let dw = &hb * e.transpose() + &state.w * p.ridge;
    let dhb = &state.w * &e;
    if p.ridge > 0.0 {
        state.h *= 1.0 - lr * p.ridge;
    }
    for (j, &i) in batch.iter().enumerate() {
        let mut col = state.h.column_mut(i);
        col.axpy(-lr, &dhb.column(j), 1.0);
    }
    state.w -= dw * lr;
}

/// Runs gradient descent, calling `on_record` for every recorded epoch as it
/// happens. Stops with [`SeliError::NonFinite`] if the iterates blow up.
pub fn train_with<F>(
    state: &UfmState,
    ds: &LabeledDataset,
    cfg: &TrainConfig,
    targets: &MetricTargets,
    mut on_record: F,
) -> Result<(UfmState, TrainTrace)>
where
    F: FnMut(&TrainRecord),
{
    cfg.validate(ds.n())?;
    if state.w.shape() != (state.d(), ds.k()) || state.h.shape() != (state.d(), ds.n()) {
        return Err(SeliError::Dimension("state does not match dataset".into()));
    }
    let n = ds.n();
    let lr = if cfg.normalize {
        cfg.learning_rate / n as f64
    } else {
        cfg.learning_rate
    };
    let mut state = state.clone();
    let mut p = cfg.penalties();
    let mut trace = TrainTrace::default();
    let schedule = record_schedule(cfg.epochs);
    let mut next = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..n).collect();

    let mut record = |epoch: usize, state: &UfmState, p: Penalties, trace: &mut TrainTrace| {
        let objective = objective(state, ds, p);
        if !objective.is_finite() {
            return Err(SeliError::NonFinite { epoch });
        }
        let rec = TrainRecord {
            epoch,
            objective,
            lambda: p.ridge,
            metrics: snapshot(state, ds, targets),
        };
        on_record(&rec);
        trace.records.push(rec);
        Ok(())
    };

    for epoch in 0..=cfg.epochs {
        if epoch > 0 {
            match cfg.batch_size {
                None => step(&mut state, ds, &order, p, lr),
                Some(b) => {
                    order.shuffle(&mut rng);
                    for chunk in order.chunks(b) {
                        step(&mut state, ds, chunk, p, lr);
                    }
                }
            }
            if !state.is_finite() {
                return Err(SeliError::NonFinite { epoch });
            }
        }
        if next < schedule.len() && schedule[next] == epoch {
            record(epoch, &state, p, &mut trace)?;
            next += 1;
        }
        if let Some(rd) = &cfg.ridge_decay {
            if epoch > 0 && epoch % rd.every_epochs == 0 {
                p.ridge = (p.ridge / rd.factor).max(rd.floor.min(p.ridge));
            }
        }
    }
    Ok((state, trace))
}

pub fn train(
    state: &UfmState,
    ds: &LabeledDataset,
    cfg: &TrainConfig,
    targets: &MetricTargets,
) -> Result<(UfmState, TrainTrace)> {
    train_with(state, ds, cfg, targets, |_| {})
}

/// `W = scale * R^T sqrt(Λ) V^T`, `H = scale * R^T sqrt(Λ) U^T` with `R^T` the
/// first k-1 coordinate directions of R^d.
pub fn factorized_seli_state(f: &SvdFactors, d: usize, scale: f64) -> Result<UfmState> {
    let k = f.v.nrows();
    check_dim(d, k)?;
    let r = f.rank();
    let root = f.lambda.map(f64::sqrt);
    let mut w = DMatrix::zeros(d, k);
    let mut h = DMatrix::zeros(d, f.u.nrows());
    for j in 0..r {
        let s = scale * root[j];
        w.row_mut(j).copy_from(&(f.v.column(j).transpose() * s));
        h.row_mut(j).copy_from(&(f.u.column(j).transpose() * s));
    }
    Ok(UfmState { w, h })
}

/// Norm of the ridge-regularized gradient at `alpha` times the factorized
/// SELI state, i.e. how far that scaled geometry is from stationarity.
pub fn scaled_seli_ridge_residual(f: &SvdFactors, ds: &LabeledDataset, alpha: f64, ridge: f64) -> Result<f64> {
    let state = factorized_seli_state(f, f.rank(), alpha)?;
    Ok(gradient_norm(&state, ds, Penalties { ridge, logit: 0.0 }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Margins {
    /// `pairs[(y, c)]` is the average of `(w_y - w_c)^T h_i` over examples of
    /// class `y`; the diagonal is zero.
    pub pairs: DMatrix<f64>,
    pub min: f64,
}

impl Margins {
    /// Largest relative deviation of an off-diagonal pair margin from their mean.
    pub fn relative_spread(&self) -> f64 {
        let k = self.pairs.nrows();
        let vals: Vec<f64> = (0..k)
            .flat_map(|y| (0..k).filter(move |&c| c != y).map(move |c| (y, c)))
            .map(|ix| self.pairs[ix])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        vals.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max) / mean.abs()
    }
}

pub fn margins(state: &UfmState, ds: &LabeledDataset) -> Margins {
    let z = state.logits();
    let k = ds.k();
    let mut pairs = DMatrix::zeros(k, k);
    let mut min = f64::INFINITY;
    for (i, &y) in ds.labels().iter().enumerate() {
        for c in (0..k).filter(|&c| c != y) {
            let m = z[(y, i)] - z[(c, i)];
            pairs[(y, c)] += m;
            min = min.min(m);
        }
    }
    for (y, &n) in ds.counts().iter().enumerate() {
        let mut row = pairs.row_mut(y);
        row /= n as f64;
    }
    Margins { pairs, min }
}
