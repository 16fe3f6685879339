//! Influence-function baselines over per-sample gradients: exact inverse
//! Hessian, LiSSA, gradient tracing at the final checkpoint, self-influence,
//! and a brute-force leave-one-out retraining oracle.
//!
//! Signed scores estimate the change in evaluation loss when `z_j` is removed,
//! `I(z_j) = g_sum^T H^-1 g_j`, where `g_sum` sums the evaluation-set loss
//! gradients and `H` is the summed training Hessian. A score below zero means
//! removal lowers the loss, i.e. the sample is detrimental.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{self, GradientMatrix, HeadHvp, ModelSpec, TrainConfig, DEFAULT_DAMPING};
use crate::par;

/// Largest training set the leave-one-out oracle will retrain over.
pub const MAX_LOO_SAMPLES: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfluenceMethod {
    Exact,
    Lissa,
    Trace,
    SelfExact,
    SelfLissa,
}

impl InfluenceMethod {
    /// Self-influence scores are all non-positive; suspects are ranked by
    /// magnitude rather than sign.
    pub fn is_self(self) -> bool {
        matches!(self, InfluenceMethod::SelfExact | InfluenceMethod::SelfLissa)
    }
}

impl fmt::Display for InfluenceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            InfluenceMethod::Exact => "exact",
            InfluenceMethod::Lissa => "lissa",
            InfluenceMethod::Trace => "trace",
            InfluenceMethod::SelfExact => "self_exact",
            InfluenceMethod::SelfLissa => "self_lissa",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSet {
    #[default]
    Train,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub method: InfluenceMethod,
    pub scores: Vec<f64>,
    /// 0 = detrimental, 1 = beneficial.
    pub discrete: Vec<u8>,
    pub eval_set: EvalSet,
    pub provenance: String,
}

impl InfluenceReport {
    fn new(method: InfluenceMethod, scores: Vec<f64>, provenance: String) -> Self {
        InfluenceReport {
            method,
            discrete: discretize(&scores),
            scores,
            eval_set: EvalSet::Train,
            provenance,
        }
    }

    pub fn with_eval_set(mut self, eval_set: EvalSet) -> Self {
        self.eval_set = eval_set;
        self
    }

    /// Suspicion score, higher = more likely detrimental: `-score` for signed
    /// methods, `|score|` for self-influence.
    pub fn suspicion(&self) -> Vec<f64> {
        if self.method.is_self() {
            self.scores.iter().map(|s| s.abs()).collect()
        } else {
            self.scores.iter().map(|s| -s).collect()
        }
    }
}

/// 0 where the score is negative, 1 otherwise (zero counts as beneficial).
pub fn discretize(scores: &[f64]) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s >= 0.0)).collect()
}

fn check_same_dim(a: &GradientMatrix, b: &GradientMatrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            what: "gradient dimension",
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Ratio of extreme eigenvalue magnitudes; infinite when H is indefinite.
fn condition_estimate(h: &DMatrix<f64>) -> f64 {
    let eig = h.clone().symmetric_eigen().eigenvalues;
    let (lo, hi) = (eig.min(), eig.amax());
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

fn cholesky(h: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    h.clone().cholesky().ok_or_else(|| Error::Singular {
        condition: condition_estimate(h),
    })
}

/// `scores[j] = g_sum^T H^-1 g_j` with `g_sum` the sum of the evaluation rows.
pub fn exact_influence(g_eval: &GradientMatrix, h: &DMatrix<f64>, g_train: &GradientMatrix) -> Result<InfluenceReport> {
    check_same_dim(g_eval, g_train)?;
    if h.nrows() != g_train.dim() || !h.is_square() {
        return Err(Error::Dimension {
            what: "Hessian size",
            expected: g_train.dim(),
            got: h.nrows(),
        });
    }
    let chol = cholesky(h)?;
    let s = chol.solve(&DVector::from_vec(g_eval.row_sum()));
    let s = s.as_slice();
    let scores = par::map_range(g_train.n_rows(), |j| dot(s, g_train.row(j)));
    Ok(InfluenceReport::new(InfluenceMethod::Exact, scores, g_train.source.clone()))
}

/// Gradient tracing at the final checkpoint: `scores[j] = g_sum^T g_j`.
pub fn trace_influence(g_eval: &GradientMatrix, g_train: &GradientMatrix) -> Result<InfluenceReport> {
    check_same_dim(g_eval, g_train)?;
    let g_sum = g_eval.row_sum();
    let scores = par::map_range(g_train.n_rows(), |j| dot(&g_sum, g_train.row(j)));
    Ok(InfluenceReport::new(InfluenceMethod::Trace, scores, g_train.source.clone()))
}

/// `scores[j] = -g_j^T H^-1 g_j`.
pub fn self_influence_exact(g_train: &GradientMatrix, h: &DMatrix<f64>) -> Result<InfluenceReport> {
    if h.nrows() != g_train.dim() || !h.is_square() {
        return Err(Error::Dimension {
            what: "Hessian size",
            expected: g_train.dim(),
            got: h.nrows(),
        });
    }
    let chol = cholesky(h)?;
    let scores = par::map_range(g_train.n_rows(), |j| {
        let g = DVector::from_column_slice(g_train.row(j));
        -g.dot(&chol.solve(&g))
    });
    Ok(InfluenceReport::new(InfluenceMethod::SelfExact, scores, g_train.source.clone()))
}

/// Matrix-free access to a symmetric positive semi-definite operator.
pub trait HvpOracle: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Vec<f64>;
}

impl HvpOracle for HeadHvp {
    fn dim(&self) -> usize {
        HeadHvp::dim(self)
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        HeadHvp::apply(self, v)
    }
}

impl HvpOracle for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        (self * DVector::from_column_slice(v)).data.into()
    }
}

/// The zero operator: with damping, LiSSA then inverts `damping * I`.
#[derive(Debug, Clone, Copy)]
pub struct ZeroHvp(pub usize);

impl HvpOracle for ZeroHvp {
    fn dim(&self) -> usize {
        self.0
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        vec![0.0; v.len()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LissaConfig {
    pub depth: usize,
    /// `None` picks `1 / (1.1 * spectral estimate)`.
    pub scale: Option<f64>,
    pub repeats: usize,
    /// Added to the oracle: the recursion inverts `H + damping * I`.
    pub damping: f64,
}

impl Default for LissaConfig {
    fn default() -> Self {
        LissaConfig {
            depth: 5000,
            scale: None,
            repeats: 4,
            damping: DEFAULT_DAMPING,
        }
    }
}

const POWER_ITERATIONS: usize = 200;

/// Largest eigenvalue of the damped operator by power iteration.
pub fn spectral_estimate(oracle: &dyn HvpOracle, damping: f64) -> f64 {
    let p = oracle.dim();
    if p == 0 {
        return damping;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..p).map(|_| rng.random_range(0.5..1.5)).collect();
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let norm = dot(&v, &v).sqrt();
        if norm == 0.0 {
            break;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let mut hv = oracle.apply(&v);
        hv.iter_mut().zip(&v).for_each(|(h, x)| *h += damping * x);
        lambda = dot(&v, &hv);
        v = hv;
    }
    lambda.max(damping)
}

/// Resolved recursion scale for `cfg` against `oracle`.
pub fn lissa_scale(oracle: &dyn HvpOracle, cfg: &LissaConfig) -> Result<f64> {
    let lambda = spectral_estimate(oracle, cfg.damping);
    let scale = match cfg.scale {
        Some(s) => s,
        None if lambda > 0.0 => 1.0 / (1.1 * lambda),
        None => 1.0,
    };
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::config(format!("LiSSA scale must be > 0, got {scale}")));
    }
    if scale * lambda > 1.0 + 1e-9 {
        return Err(Error::config(format!(
            "LiSSA scale {scale:.3e} times spectral estimate {lambda:.3e} exceeds 1"
        )));
    }
    Ok(scale)
}

/// LiSSA approximation of `(H + damping I)^-1 v`:
/// `r_0 = v`, `r_t = v + (I - scale (H + damping I)) r_{t-1}`, result
/// `scale * mean(r_depth)` over the repeats.
pub fn lissa_inverse_hvp(oracle: &dyn HvpOracle, v: &[f64], cfg: &LissaConfig) -> Result<Vec<f64>> {
    let scale = lissa_scale(oracle, cfg)?;
    lissa_with_scale(oracle, v, cfg, scale)
}

fn lissa_with_scale(oracle: &dyn HvpOracle, v: &[f64], cfg: &LissaConfig, scale: f64) -> Result<Vec<f64>> {
    if v.len() != oracle.dim() {
        return Err(Error::Dimension {
            what: "LiSSA vector",
            expected: oracle.dim(),
            got: v.len(),
        });
    }
    if cfg.repeats == 0 {
        return Err(Error::config("LiSSA needs at least one repeat"));
    }
    let v_norm = dot(v, v).sqrt();
    let runs = par::map_range(cfg.repeats, |_| -> Result<Vec<f64>> {
        let mut r = v.to_vec();
        for step in 1..=cfg.depth {
            let hr = oracle.apply(&r);
            for ((ri, hi), vi) in r.iter_mut().zip(&hr).zip(v) {
                *ri = vi + *ri - scale * (hi + cfg.damping * *ri);
            }
            // under a contraction |r_t| <= (t + 1) |v|
            let ratio = dot(&r, &r).sqrt() / v_norm.max(f64::MIN_POSITIVE);
            if !ratio.is_finite() || ratio > 10.0 * (step + 1) as f64 {
                return Err(Error::LissaDivergence { step, ratio });
            }
        }
        Ok(r)
    });
    let mut out = vec![0.0; v.len()];
    for run in runs {
        out.iter_mut().zip(run?).for_each(|(o, r)| *o += r);
    }
    let k = scale / cfg.repeats as f64;
    out.iter_mut().for_each(|o| *o *= k);
    Ok(out)
}

/// [`exact_influence`] with the inverse-HVP replaced by LiSSA.
pub fn lissa_influence(g_eval: &GradientMatrix, oracle: &dyn HvpOracle, cfg: &LissaConfig, g_train: &GradientMatrix) -> Result<InfluenceReport> {
    check_same_dim(g_eval, g_train)?;
    let s = lissa_inverse_hvp(oracle, &g_eval.row_sum(), cfg)?;
    let scores = par::map_range(g_train.n_rows(), |j| dot(&s, g_train.row(j)));
    Ok(InfluenceReport::new(InfluenceMethod::Lissa, scores, g_train.source.clone()))
}

/// Self-influence with one LiSSA solve per training row.
pub fn self_influence_lissa(g_train: &GradientMatrix, oracle: &dyn HvpOracle, cfg: &LissaConfig) -> Result<InfluenceReport> {
    let scale = lissa_scale(oracle, cfg)?;
    let solved = par::map_range(g_train.n_rows(), |j| {
        let g = g_train.row(j);
        lissa_with_scale(oracle, g, cfg, scale).map(|s| -dot(&s, g))
    });
    let scores = solved.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(InfluenceReport::new(InfluenceMethod::SelfLissa, scores, g_train.source.clone()))
}

/// Mean negative loss on `test`.
fn utility(spec: ModelSpec, cfg: TrainConfig, train: &LabeledDataset, test: &LabeledDataset) -> Result<f64> {
    Ok(-model::train(train, spec, cfg)?.mean_loss(test))
}

fn loo_guard(train: &LabeledDataset) -> Result<()> {
    if train.len() > MAX_LOO_SAMPLES {
        return Err(Error::config(format!(
            "leave-one-out oracle limited to {MAX_LOO_SAMPLES} samples, got {}",
            train.len()
        )));
    }
    Ok(())
}

/// `utility(train \ {j}) - utility(train)` with utility the mean negative test
/// loss and identical training seeds. Positive means sample `j` is detrimental.
pub fn loo_oracle(train: &LabeledDataset, test: &LabeledDataset, spec: ModelSpec, cfg: TrainConfig, j: usize) -> Result<f64> {
    loo_guard(train)?;
    if j >= train.len() {
        return Err(Error::config(format!("sample {j} out of range")));
    }
    let base = utility(spec, cfg, train, test)?;
    Ok(utility(spec, cfg, &train.without(j), test)? - base)
}

/// [`loo_oracle`] for every sample, retraining in parallel.
pub fn loo_sweep(train: &LabeledDataset, test: &LabeledDataset, spec: ModelSpec, cfg: TrainConfig) -> Result<Vec<f64>> {
    loo_guard(train)?;
    let base = utility(spec, cfg, train, test)?;
    par::map_range(train.len(), |j| utility(spec, cfg, &train.without(j), test).map(|u| u - base))
        .into_iter()
        .collect()
}
