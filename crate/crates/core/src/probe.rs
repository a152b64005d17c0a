//! Linear truthfulness probes: logistic regression and mass-mean.
//!
//! Both probes classify a feature vector `h` as truthful when
//! `θ·h + b ≥ 0`. The logistic-regression probe minimizes the mean
//! log-loss plus `λ/2 ‖θ‖²` on z-scored features with an unregularized
//! bias. The mass-mean probe takes `θ` as the difference of class means
//! and places the boundary at their midpoint.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::select::PlanEntry;

/// Floor applied to per-feature standard deviations.
pub const STD_FLOOR: f64 = 1e-8;
/// `|θ|∞` at or below this marks a mass-mean direction as degenerate.
pub const ZERO_DIRECTION_TOL: f64 = 1e-12;

/// Dense row-major feature matrix with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    values: Vec<f64>,
    labels: Vec<u8>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, values: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let rows = labels.len();
        if rows == 0 {
            return Err(Error::EmptyMatrix);
        }
        if values.len() != rows * dim {
            return Err(Error::DimMismatch {
                expected: rows * dim,
                got: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteFeature {
                row: pos / dim.max(1),
                col: pos % dim.max(1),
            });
        }
        if let Some((i, &label)) = labels.iter().enumerate().find(|(_, &l)| l > 1) {
            return Err(Error::LabelOutOfRange {
                sample_id: i as u64,
                label,
            });
        }
        Ok(FeatureMatrix {
            rows,
            dim,
            values,
            labels,
        })
    }

    pub fn from_rows<R, I>(dim: usize, rows: R) -> Result<Self>
    where
        R: IntoIterator<Item = (I, u8)>,
        I: IntoIterator<Item = f64>,
    {
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (row, label) in rows {
            let before = values.len();
            values.extend(row);
            if values.len() - before != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: values.len() - before,
                });
            }
            labels.push(label);
        }
        FeatureMatrix::new(dim, values, labels)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn has_both_classes(&self) -> bool {
        let p = self.positives();
        p > 0 && p < self.rows
    }

    /// Keeps the given columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<FeatureMatrix> {
        if let Some(&c) = cols.iter().find(|&&c| c >= self.dim) {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: c,
            });
        }
        let mut values = Vec::with_capacity(self.rows * cols.len());
        for i in 0..self.rows {
            let row = self.row(i);
            values.extend(cols.iter().map(|&c| row[c]));
        }
        FeatureMatrix::new(cols.len(), values, self.labels.clone())
    }

    /// Concatenates row-aligned blocks column-wise. Labels must agree.
    pub fn hconcat(blocks: &[FeatureMatrix]) -> Result<FeatureMatrix> {
        let first = blocks.first().ok_or(Error::EmptyPlan)?;
        let dim: usize = blocks.iter().map(|b| b.dim).sum();
        for b in blocks {
            if b.rows != first.rows || b.labels != first.labels {
                return Err(Error::DimMismatch {
                    expected: first.rows,
                    got: b.rows,
                });
            }
        }
        let mut values = Vec::with_capacity(first.rows * dim);
        for i in 0..first.rows {
            for b in blocks {
                values.extend_from_slice(b.row(i));
            }
        }
        FeatureMatrix::new(dim, values, first.labels.clone())
    }

    /// Stacks matrices of equal width row-wise.
    pub fn vconcat(parts: &[FeatureMatrix]) -> Result<FeatureMatrix> {
        let first = parts.first().ok_or(Error::EmptyMatrix)?;
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.dim != first.dim {
                return Err(Error::DimMismatch {
                    expected: first.dim,
                    got: p.dim,
                });
            }
            values.extend_from_slice(&p.values);
            labels.extend_from_slice(&p.labels);
        }
        FeatureMatrix::new(first.dim, values, labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeType {
    Lr,
    Mm,
}

impl ProbeType {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeType::Lr => "lr",
            ProbeType::Mm => "mm",
        }
    }
}

impl fmt::Display for ProbeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProbeType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lr" => Ok(ProbeType::Lr),
            "mm" => Ok(ProbeType::Mm),
            other => Err(Error::Parse(format!("unknown probe type {other:?}"))),
        }
    }
}

/// How the search direction of each optimizer iteration is chosen.
/// Both policies use the same Armijo backtracking line search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepPolicy {
    GradientDescent,
    Lbfgs { memory: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub l2_lambda: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub armijo: f64,
    pub step: StepPolicy,
    pub fit_bias: bool,
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            l2_lambda: 1e-2,
            max_iters: 1000,
            grad_tol: 1e-6,
            armijo: 1e-4,
            step: StepPolicy::Lbfgs { memory: 10 },
            fit_bias: true,
            standardize: true,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.l2_lambda < 0.0 || !self.l2_lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "l2_lambda {}",
                self.l2_lambda
            )));
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return Err(Error::InvalidConfig(format!("armijo {}", self.armijo)));
        }
        if let StepPolicy::Lbfgs { memory: 0 } = self.step {
            return Err(Error::InvalidConfig("lbfgs memory must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(m: &FeatureMatrix) -> Standardizer {
        let d = m.dim();
        let n = m.rows() as f64;
        let mut mean = vec![0.0; d];
        for i in 0..m.rows() {
            for (acc, v) in mean.iter_mut().zip(m.row(i)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n);
        let mut var = vec![0.0; d];
        for i in 0..m.rows() {
            for ((acc, v), mu) in var.iter_mut().zip(m.row(i)).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        h.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, mu), s)| (v - mu) / s)
            .collect()
    }

    fn apply_matrix(&self, m: &FeatureMatrix) -> FeatureMatrix {
        let mut values = Vec::with_capacity(m.values.len());
        for i in 0..m.rows() {
            values.extend(self.apply(m.row(i)));
        }
        FeatureMatrix {
            rows: m.rows,
            dim: m.dim,
            values,
            labels: m.labels.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: u8,
    pub score: f64,
}

/// A trained linear classifier over an ordered feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub probe_type: ProbeType,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub standardizer: Option<Standardizer>,
    /// Set when the mass-mean direction vanished (class means coincide).
    #[serde(default)]
    pub degenerate: bool,
}

impl LinearProbe {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn predict(&self, h: &[f64]) -> Result<Prediction> {
        if h.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                got: h.len(),
            });
        }
        let score = match &self.standardizer {
            Some(s) => dot(&self.weights, &s.apply(h)) + self.bias,
            None => dot(&self.weights, h) + self.bias,
        };
        Ok(Prediction {
            label: u8::from(score >= 0.0),
            score,
        })
    }

    /// Fraction of rows whose predicted label equals the stored label.
    pub fn accuracy(&self, m: &FeatureMatrix) -> Result<f64> {
        if m.rows() == 0 {
            return Err(Error::EmptyView);
        }
        let mut correct = 0usize;
        for i in 0..m.rows() {
            if self.predict(m.row(i))?.label == m.labels()[i] {
                correct += 1;
            }
        }
        Ok(correct as f64 / m.rows() as f64)
    }

    /// Weights and bias expressed on raw (unstandardized) features.
    pub fn raw_weights(&self) -> (Vec<f64>, f64) {
        match &self.standardizer {
            None => (self.weights.clone(), self.bias),
            Some(s) => {
                let w: Vec<f64> = self
                    .weights
                    .iter()
                    .zip(&s.std)
                    .map(|(w, sd)| w / sd)
                    .collect();
                let b = self.bias - dot(&w, &s.mean);
                (w, b)
            }
        }
    }
}

/// A probe bound to the locations and dimensions that compose its input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub feature_map: Vec<PlanEntry>,
    #[serde(flatten)]
    pub probe: LinearProbe,
}

impl ProbeModel {
    pub fn new(feature_map: Vec<PlanEntry>, probe: LinearProbe) -> Result<Self> {
        let total: usize = feature_map.iter().map(|e| e.dims.len()).sum();
        if total != probe.dim() {
            return Err(Error::DimMismatch {
                expected: total,
                got: probe.dim(),
            });
        }
        if probe.probe_type == ProbeType::Mm && probe.standardizer.is_some() {
            return Err(Error::InvalidConfig(
                "mass-mean probes carry no standardizer".into(),
            ));
        }
        if probe.weights.iter().any(|w| !w.is_finite()) || !probe.bias.is_finite() {
            return Err(Error::InvalidConfig("non-finite probe weights".into()));
        }
        Ok(ProbeModel { feature_map, probe })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: ProbeModel = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        ProbeModel::new(m.feature_map, m.probe)
    }
}

pub fn predict(model: &LinearProbe, h: &[f64]) -> Result<Prediction> {
    model.predict(h)
}

pub fn accuracy(model: &LinearProbe, view: &FeatureMatrix) -> Result<f64> {
    model.accuracy(view)
}

pub fn train(probe_type: ProbeType, m: &FeatureMatrix, cfg: &TrainConfig) -> Result<LinearProbe> {
    match probe_type {
        ProbeType::Lr => train_lr(m, cfg),
        ProbeType::Mm => train_mm(m),
    }
}

/// Mass-mean probe: `θ = mean(H⁺) − mean(H⁻)`, boundary at the midpoint.
pub fn train_mm(m: &FeatureMatrix) -> Result<LinearProbe> {
    if !m.has_both_classes() {
        return Err(Error::SingleClassInput(None));
    }
    let d = m.dim();
    let mut pos = vec![0.0; d];
    let mut neg = vec![0.0; d];
    let (mut n_pos, mut n_neg) = (0usize, 0usize);
    for i in 0..m.rows() {
        let (acc, n) = if m.labels()[i] == 1 {
            (&mut pos, &mut n_pos)
        } else {
            (&mut neg, &mut n_neg)
        };
        for (a, v) in acc.iter_mut().zip(m.row(i)) {
            *a += v;
        }
        *n += 1;
    }
    pos.iter_mut().for_each(|v| *v /= n_pos as f64);
    neg.iter_mut().for_each(|v| *v /= n_neg as f64);
    let weights: Vec<f64> = pos.iter().zip(&neg).map(|(p, q)| p - q).collect();
    let midpoint: Vec<f64> = pos.iter().zip(&neg).map(|(p, q)| (p + q) / 2.0).collect();
    let bias = -dot(&weights, &midpoint);
    let degenerate = weights.iter().all(|w| w.abs() <= ZERO_DIRECTION_TOL);
    if degenerate {
        log::warn!("mass-mean direction vanished: class means coincide");
    }
    Ok(LinearProbe {
        probe_type: ProbeType::Mm,
        weights,
        bias,
        standardizer: None,
        degenerate,
    })
}

/// Optimizer trace of one logistic-regression fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LrTrace {
    /// Objective after initialization and after every accepted step.
    pub losses: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub fn train_lr(m: &FeatureMatrix, cfg: &TrainConfig) -> Result<LinearProbe> {
    train_lr_traced(m, cfg).map(|(p, _)| p)
}

pub fn train_lr_traced(m: &FeatureMatrix, cfg: &TrainConfig) -> Result<(LinearProbe, LrTrace)> {
    cfg.validate()?;
    if !m.has_both_classes() {
        return Err(Error::SingleClassInput(None));
    }
    let standardizer = cfg.standardize.then(|| Standardizer::fit(m));
    let z = match &standardizer {
        Some(s) => s.apply_matrix(m),
        None => m.clone(),
    };
    let objective = Objective {
        m: &z,
        lambda: cfg.l2_lambda,
        fit_bias: cfg.fit_bias,
    };
    let (x, trace) = minimize(&objective, m.dim() + 1, cfg);
    let d = m.dim();
    Ok((
        LinearProbe {
            probe_type: ProbeType::Lr,
            weights: x[..d].to_vec(),
            bias: x[d],
            standardizer,
            degenerate: false,
        },
        trace,
    ))
}

/// Regularized mean log-loss `J(θ, b)` on the matrix as given.
pub fn lr_loss(theta: &[f64], bias: f64, m: &FeatureMatrix, lambda: f64) -> Result<f64> {
    check_dim(theta, m)?;
    let mut x = theta.to_vec();
    x.push(bias);
    let obj = Objective {
        m,
        lambda,
        fit_bias: true,
    };
    Ok(obj.eval(&x, None))
}

/// Analytic gradient `(∇θ, ∇b)` of [`lr_loss`].
pub fn lr_gradient(
    theta: &[f64],
    bias: f64,
    m: &FeatureMatrix,
    lambda: f64,
) -> Result<(Vec<f64>, f64)> {
    check_dim(theta, m)?;
    let mut x = theta.to_vec();
    x.push(bias);
    let obj = Objective {
        m,
        lambda,
        fit_bias: true,
    };
    let mut g = vec![0.0; x.len()];
    obj.eval(&x, Some(&mut g));
    let gb = g.pop().unwrap();
    Ok((g, gb))
}

fn check_dim(theta: &[f64], m: &FeatureMatrix) -> Result<()> {
    if theta.len() != m.dim() {
        return Err(Error::DimMismatch {
            expected: m.dim(),
            got: theta.len(),
        });
    }
    Ok(())
}

struct Objective<'a> {
    m: &'a FeatureMatrix,
    lambda: f64,
    fit_bias: bool,
}

impl Objective<'_> {
    /// Loss at `x = [θ; b]`; fills `grad` when given.
    fn eval(&self, x: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let d = self.m.dim();
        let (theta, b) = (&x[..d], x[d]);
        let n = self.m.rows() as f64;
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut loss = 0.0;
        for i in 0..self.m.rows() {
            let h = self.m.row(i);
            let y = f64::from(self.m.labels()[i]);
            let z = dot(theta, h) + b;
            // log(1 + e^z) − y z, evaluated without overflow
            loss += softplus(z) - y * z;
            if let Some(g) = grad.as_deref_mut() {
                let r = sigmoid(z) - y;
                for (gj, hj) in g[..d].iter_mut().zip(h) {
                    *gj += r * hj;
                }
                g[d] += r;
            }
        }
        let ridge: f64 = theta.iter().map(|t| t * t).sum();
        if let Some(g) = grad {
            for (gj, tj) in g[..d].iter_mut().zip(theta) {
                *gj = *gj / n + self.lambda * tj;
            }
            g[d] = if self.fit_bias { g[d] / n } else { 0.0 };
        }
        loss / n + 0.5 * self.lambda * ridge
    }
}

fn minimize(obj: &Objective<'_>, n: usize, cfg: &TrainConfig) -> (Vec<f64>, LrTrace) {
    let mut x = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut f = obj.eval(&x, Some(&mut g));
    let mut losses = vec![f];
    let mut history: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut prev_step: f64 = 1.0;
    let mut iterations = 0;
    let mut converged = inf_norm(&g) <= cfg.grad_tol;

    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    while !converged && iterations < cfg.max_iters {
        iterations += 1;
        let mut dir = match cfg.step {
            StepPolicy::GradientDescent => g.iter().map(|v| -v).collect(),
            StepPolicy::Lbfgs { .. } => lbfgs_direction(&g, &history),
        };
        let mut slope = dot(&g, &dir);
        if slope.is_nan() || slope >= 0.0 {
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
            history.clear();
        }
        let mut t = match cfg.step {
            StepPolicy::GradientDescent => (2.0 * prev_step).min(1e6),
            StepPolicy::Lbfgs { .. } if history.is_empty() => (1.0 / inf_norm(&g)).min(1.0),
            StepPolicy::Lbfgs { .. } => 1.0,
        };
        let accepted = loop {
            for ((xn, xi), di) in x_new.iter_mut().zip(&x).zip(&dir) {
                *xn = xi + t * di;
            }
            let f_new = obj.eval(&x_new, Some(&mut g_new));
            if f_new <= f + cfg.armijo * t * slope {
                break Some(f_new);
            }
            t *= 0.5;
            if t < 1e-20 {
                break None;
            }
        };
        let Some(f_new) = accepted else {
            // no decrease representable in floating point
            converged = inf_norm(&g) <= cfg.grad_tol;
            break;
        };
        prev_step = t;
        if let StepPolicy::Lbfgs { memory } = cfg.step {
            let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * dot(&y, &y).max(f64::MIN_POSITIVE) {
                if history.len() == memory {
                    history.remove(0);
                }
                history.push((s, y, 1.0 / sy));
            }
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        f = f_new;
        losses.push(f);
        converged = inf_norm(&g) <= cfg.grad_tol;
    }
    (
        x,
        LrTrace {
            losses,
            iterations,
            converged,
        },
    )
}

fn lbfgs_direction(g: &[f64], history: &[(Vec<f64>, Vec<f64>, f64)]) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.last() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}
