//! Discretize-then-optimize training: every pair of adjacent samples is a
//! one-step initial value problem, and the network parameters are fitted to
//! minimize the mean weighted one-step prediction error.

mod dataset;

use std::f64::consts::PI;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamVector;
use crate::densela::{least_squares, qr_reduce, DenseMatrix};
use crate::error::{Error, Result};
use crate::odeint::{differentiable_step, Method, NetField, StepOptions, VectorField};
use crate::pinet::{monomials, NetShape, PiNet, RecoveredModel};

pub use dataset::{Provenance, TrajectoryDataset};

/// Per-segment loss weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `w_i = 1 + ‖y_{i+1}‖²`.
    Segment,
    /// `w_i = 1`.
    Uniform,
}

impl Weighting {
    fn weight(&self, target: &[f64]) -> f64 {
        match self {
            Weighting::Segment => 1.0 + target.iter().map(|v| v * v).sum::<f64>(),
            Weighting::Uniform => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: String,
    pub shape: NetShape,
    /// Initial Adam learning rate, decayed on a cosine to `lr_final`.
    pub lr: f64,
    pub lr_final: f64,
    pub epochs: usize,
    pub seed: u64,
    pub init_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub newton_tol: f64,
    pub freeze_linearization: bool,
    pub weighting: Weighting,
    /// On divergence: halve the learning rate, restore the best parameters
    /// and continue, at most this many times.
    pub backoff_retries: usize,
    /// Levenberg–Marquardt iterations on the residual vector after Adam.
    pub refine_iterations: usize,
}

impl TrainConfig {
    pub fn new(method: Method, shape: NetShape) -> Self {
        TrainConfig {
            method: method.name().to_string(),
            shape,
            lr: 1e-2,
            lr_final: 1e-4,
            epochs: 20_000,
            seed: 0,
            init_scale: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            newton_tol: StepOptions::default().newton_tol,
            freeze_linearization: false,
            weighting: Weighting::Segment,
            backoff_retries: 0,
            refine_iterations: 0,
        }
    }

    pub fn method(&self) -> Result<Method> {
        self.method.parse()
    }

    pub fn step_options(&self) -> StepOptions {
        StepOptions {
            newton_tol: self.newton_tol,
            freeze_linearization: self.freeze_linearization,
            ..StepOptions::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.method()?;
        self.shape.validate()?;
        let positive = [
            ("lr", self.lr),
            ("lr_final", self.lr_final),
            ("adam_eps", self.adam_eps),
            ("newton_tol", self.newton_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::InvalidConfig("init_scale must be non-negative".into()));
        }
        Ok(())
    }

    /// Cosine-decayed learning rate at `epoch` (0-based).
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr;
        }
        let frac = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + (PI * frac).cos())
    }
}

/// Loss, gradient and work counters for one pass over all segments.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEvaluation {
    pub loss: f64,
    pub gradient: Option<Vec<f64>>,
    pub evaluations: usize,
    pub jacobian_evaluations: usize,
}

/// Pairwise sum in a fixed tree order.
fn tree_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => tree_sum(&values[..n / 2]) + tree_sum(&values[n / 2..]),
    }
}

fn tree_sum_vectors(values: &[Vec<f64>], len: usize) -> Vec<f64> {
    match values.len() {
        0 => vec![0.0; len],
        1 => values[0].clone(),
        n => {
            let mut a = tree_sum_vectors(&values[..n / 2], len);
            let b = tree_sum_vectors(&values[n / 2..], len);
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
            a
        }
    }
}

fn evaluate(
    field: &NetField,
    data: &TrajectoryDataset,
    method: Method,
    opts: &StepOptions,
    weighting: Weighting,
    order: Option<&[usize]>,
    with_gradient: bool,
) -> Result<LossEvaluation> {
    data.validate()?;
    if data.dim() != field.dim() {
        return Err(Error::ShapeMismatch(format!(
            "dataset dimension {} does not match field dimension {}",
            data.dim(),
            field.dim()
        )));
    }
    let segs = data.segments();
    let norm = 1.0 / segs as f64;
    let p = field.theta.len();
    let mut losses = vec![0.0; segs];
    let mut grads = if with_gradient {
        vec![Vec::new(); segs]
    } else {
        Vec::new()
    };
    let mut evaluations = 0;
    let mut jacobian_evaluations = 0;
    let default_order: Vec<usize> = (0..segs).collect();
    for &i in order.unwrap_or(&default_order) {
        let wrap = |e: Error| Error::Segment {
            index: i,
            source: Box::new(e),
        };
        let h = data.times[i + 1] - data.times[i];
        let step = differentiable_step(method, field, &data.states[i], h, opts).map_err(wrap)?;
        evaluations += step.result.diagnostics.evaluations;
        jacobian_evaluations += step.result.diagnostics.jacobian_evaluations;
        let target = data.states[i + 1].as_slice();
        let w = weighting.weight(target);
        let r: Vec<f64> = step
            .y_next()
            .as_slice()
            .iter()
            .zip(target)
            .map(|(a, b)| a - b)
            .collect();
        losses[i] = r.iter().map(|v| v * v).sum::<f64>() / w;
        if with_gradient {
            let v: Vec<f64> = r.iter().map(|ri| 2.0 * ri * norm / w).collect();
            let mut g = vec![0.0; p];
            step.vjp_into(field, &v, 1.0, &mut g).map_err(wrap)?;
            grads[i] = g;
        }
    }
    let loss = norm * tree_sum(&losses);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let gradient = if with_gradient {
        let g = tree_sum_vectors(&grads, p);
        if let Some(k) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(k));
        }
        Some(g)
    } else {
        None
    };
    Ok(LossEvaluation {
        loss,
        gradient,
        evaluations,
        jacobian_evaluations,
    })
}

/// `(1/(n−1)) Σ_i ‖step(y_i, t_{i+1} − t_i) − y_{i+1}‖² / w_i`.
pub fn segment_loss(
    field: &NetField,
    data: &TrajectoryDataset,
    method: Method,
    opts: &StepOptions,
    weighting: Weighting,
) -> Result<f64> {
    evaluate(field, data, method, opts, weighting, None, false).map(|e| e.loss)
}

/// Segment loss and its gradient with respect to the network parameters.
pub fn segment_loss_and_gradient(
    field: &NetField,
    data: &TrajectoryDataset,
    method: Method,
    opts: &StepOptions,
    weighting: Weighting,
) -> Result<LossEvaluation> {
    evaluate(field, data, method, opts, weighting, None, true)
}

/// Segment loss with the segments visited in the given order.
pub fn segment_loss_in_order(
    field: &NetField,
    data: &TrajectoryDataset,
    method: Method,
    opts: &StepOptions,
    weighting: Weighting,
    order: &[usize],
) -> Result<f64> {
    let mut seen = vec![false; data.segments()];
    for &i in order {
        if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidConfig(
                "order must be a permutation of the segments".into(),
            ));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::InvalidConfig(
            "order must be a permutation of the segments".into(),
        ));
    }
    evaluate(field, data, method, opts, weighting, Some(order), false).map(|e| e.loss)
}

/// Weighted residuals `r` with `loss = ‖r‖²`, entry `i·d + k` being
/// `√(1/((n−1) w_i)) (step(y_i) − y_{i+1})_k`, and optionally `∂r/∂θ` by rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub values: Vec<f64>,
    pub jacobian: Option<Vec<Vec<f64>>>,
    pub evaluations: usize,
    pub jacobian_evaluations: usize,
}

impl Residuals {
    pub fn loss(&self) -> f64 {
        tree_sum(&self.values.iter().map(|r| r * r).collect::<Vec<_>>())
    }
}

pub fn segment_residuals(
    field: &NetField,
    data: &TrajectoryDataset,
    method: Method,
    opts: &StepOptions,
    weighting: Weighting,
    with_jacobian: bool,
) -> Result<Residuals> {
    data.validate()?;
    let d = data.dim();
    if d != field.dim() {
        return Err(Error::ShapeMismatch("dataset and field dimensions differ".into()));
    }
    let segs = data.segments();
    let p = field.theta.len();
    let mut out = Residuals {
        values: Vec::with_capacity(segs * d),
        jacobian: with_jacobian.then(|| Vec::with_capacity(segs * d)),
        evaluations: 0,
        jacobian_evaluations: 0,
    };
    for i in 0..segs {
        let wrap = |e: Error| Error::Segment {
            index: i,
            source: Box::new(e),
        };
        let h = data.times[i + 1] - data.times[i];
        let step = differentiable_step(method, field, &data.states[i], h, opts).map_err(wrap)?;
        out.evaluations += step.result.diagnostics.evaluations;
        out.jacobian_evaluations += step.result.diagnostics.jacobian_evaluations;
        let target = data.states[i + 1].as_slice();
        let sw = (1.0 / (segs as f64 * weighting.weight(target))).sqrt();
        out.values
            .extend(step.y_next().as_slice().iter().zip(target).map(|(a, b)| sw * (a - b)));
        if let Some(jac) = out.jacobian.as_mut() {
            let vs: Vec<Vec<f64>> = (0..d)
                .map(|k| {
                    let mut e = vec![0.0; d];
                    e[k] = sw;
                    e
                })
                .collect();
            let mut rows = vec![vec![0.0; p]; d];
            step.vjp_many(field, &vs, 1.0, &mut rows).map_err(wrap)?;
            jac.extend(rows);
        }
    }
    if let Some(k) = out.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Segment {
            index: k / d.max(1),
            source: Box::new(Error::NonFiniteLoss),
        });
    }
    Ok(out)
}

/// Outcome of the Levenberg–Marquardt phase.
#[derive(Debug, Clone, PartialEq)]
struct Refinement {
    theta: Vec<f64>,
    history: Vec<f64>,
    evaluations: usize,
    jacobian_evaluations: usize,
}

fn net_field<'a>(net: &'a PiNet, known: Option<&'a dyn VectorField>, theta: &'a [f64]) -> NetField<'a> {
    let f = NetField::new(net, theta);
    match known {
        Some(k) => f.with_known(k),
        None => f,
    }
}

/// Damped Gauss–Newton on the residual vector with Marquardt diagonal
/// scaling. Trial points where a step diverges count as rejected.
fn levenberg_marquardt(
    net: &PiNet,
    known: Option<&dyn VectorField>,
    data: &TrajectoryDataset,
    method: Method,
    opts: &StepOptions,
    weighting: Weighting,
    theta0: &[f64],
    iterations: usize,
) -> Result<Refinement> {
    let mut theta = theta0.to_vec();
    let mut out = Refinement {
        theta: theta.clone(),
        history: Vec::new(),
        evaluations: 0,
        jacobian_evaluations: 0,
    };
    let p = theta.len();
    let mut lambda: f64 = 1e-3;
    let mut stalled = 0;
    for _ in 0..iterations {
        let res = segment_residuals(&net_field(net, known, &theta), data, method, opts, weighting, true)?;
        out.evaluations += res.evaluations;
        out.jacobian_evaluations += res.jacobian_evaluations;
        let loss = res.loss();
        if loss == 0.0 {
            break;
        }
        let rows = res.jacobian.as_ref().expect("requested");
        let jac = DenseMatrix::from_rows(rows);
        // Marquardt scaling by column norms.
        let scale: Vec<f64> = (0..p)
            .map(|a| rows.iter().map(|r| r[a] * r[a]).sum::<f64>().sqrt())
            .collect();
        let smax = scale.iter().cloned().fold(0.0, f64::max);
        if !(smax > 0.0) {
            break;
        }
        let (base, rhs) = if rows.len() > p {
            qr_reduce(&jac, &res.values)?
        } else {
            (jac, res.values.clone())
        };
        let mut accepted = None;
        while lambda < 1e16 {
            let br = base.rows();
            let mut stacked = DenseMatrix::zeros(br + p, p);
            stacked.as_mut_slice()[..br * p].copy_from_slice(base.as_slice());
            for a in 0..p {
                stacked[(br + a, a)] = lambda.sqrt() * scale[a].max(1e-9 * smax);
            }
            let mut b = rhs.clone();
            b.resize(br + p, 0.0);
            let delta = match least_squares(&stacked, &b) {
                Ok(x) => x,
                Err(Error::SingularMatrix { .. }) => {
                    lambda *= 4.0;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let trial: Vec<f64> = theta.iter().zip(&delta).map(|(t, dt)| t - dt).collect();
            match segment_residuals(&net_field(net, known, &trial), data, method, opts, weighting, false) {
                Ok(tr) => {
                    out.evaluations += tr.evaluations;
                    out.jacobian_evaluations += tr.jacobian_evaluations;
                    let tl = tr.loss();
                    if tl < loss {
                        accepted = Some((trial, tl));
                        lambda = (lambda / 3.0).max(1e-15);
                        break;
                    }
                }
                Err(e) if e.is_divergence() => {}
                Err(e) => return Err(e),
            }
            lambda *= 4.0;
        }
        let Some((trial, tl)) = accepted else { break };
        stalled = if loss - tl <= 1e-10 * loss { stalled + 1 } else { 0 };
        theta = trial;
        out.history.push(tl);
        out.theta.clone_from(&theta);
        if stalled >= 3 {
            break;
        }
    }
    Ok(out)
}

/// Adam without weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grad[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            params[k] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.t = 0;
    }
}

/// Where and why training stopped early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: usize,
    pub segment: Option<usize>,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainStatus {
    Converged,
    Diverged,
}

/// Error of one coefficient whose true value is nonzero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientError {
    pub equation: usize,
    pub monomial: Vec<u32>,
    pub truth: f64,
    pub recovered: f64,
    /// `|ĉ − c| / |c|`.
    pub relative: f64,
}

/// A coefficient whose true value is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuriousTerm {
    pub equation: usize,
    pub monomial: Vec<u32>,
    /// `|ĉ|`.
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorTable {
    pub relative: Vec<CoefficientError>,
    pub spurious: Vec<SpuriousTerm>,
}

impl ErrorTable {
    pub fn max_relative(&self) -> f64 {
        self.relative.iter().map(|e| e.relative).fold(0.0, f64::max)
    }

    pub fn max_spurious(&self) -> f64 {
        self.spurious.iter().map(|e| e.magnitude).fold(0.0, f64::max)
    }

    pub fn find(&self, equation: usize, monomial: &[u32]) -> Option<&CoefficientError> {
        self.relative
            .iter()
            .find(|e| e.equation == equation && e.monomial == monomial)
    }
}

/// Compares every monomial up to the larger of the two degrees (plus any
/// stored term of higher degree). Nonzero true coefficients get a
/// fractional relative error; zero ones an absolute spurious magnitude.
pub fn fractional_relative_error(recovered: &RecoveredModel, truth: &RecoveredModel) -> Result<ErrorTable> {
    if recovered.vars != truth.vars || recovered.equations.len() != truth.equations.len() {
        return Err(Error::ShapeMismatch(format!(
            "recovered model has {} variables and {} equations, truth has {} and {}",
            recovered.vars,
            recovered.equations.len(),
            truth.vars,
            truth.equations.len()
        )));
    }
    let degree = recovered.degree.max(truth.degree);
    let mut table = ErrorTable::default();
    for eq in 0..truth.equations.len() {
        let mut keys = monomials(truth.vars, degree);
        for e in recovered.equations[eq]
            .terms()
            .keys()
            .chain(truth.equations[eq].terms().keys())
        {
            if !keys.contains(e) {
                keys.push(e.clone());
            }
        }
        for e in keys {
            let c = truth.coefficient(eq, &e);
            let chat = recovered.coefficient(eq, &e);
            if c != 0.0 {
                table.relative.push(CoefficientError {
                    equation: eq,
                    relative: (chat - c).abs() / c.abs(),
                    monomial: e,
                    truth: c,
                    recovered: chat,
                });
            } else {
                table.spurious.push(SpuriousTerm {
                    equation: eq,
                    monomial: e,
                    magnitude: chat.abs(),
                });
            }
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub problem: String,
    pub n: usize,
    pub config: TrainConfig,
    pub status: TrainStatus,
    pub divergence: Option<Divergence>,
    /// Best loss seen; the reported parameters achieve it. `None` when the
    /// first epoch already diverged.
    pub final_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    pub refine_iterations_run: usize,
    pub retries_used: usize,
    /// One entry per Adam epoch, then one per accepted refinement step.
    pub loss_history: Vec<f64>,
    #[serde(with = "model_json")]
    pub recovered: RecoveredModel,
    pub errors: Option<ErrorTable>,
    pub params: Vec<f64>,
    pub evaluations: usize,
    pub jacobian_evaluations: usize,
    /// Excluded from the JSON so reports stay byte-reproducible.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

mod model_json {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::pinet::RecoveredModel;

    pub fn serialize<S: Serializer>(m: &RecoveredModel, s: S) -> Result<S::Ok, S::Error> {
        m.to_json().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RecoveredModel, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        RecoveredModel::from_json(&v).map_err(serde::de::Error::custom)
    }
}

impl TrainReport {
    pub fn converged(&self) -> bool {
        self.status == TrainStatus::Converged
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// `epoch,loss` rows.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,loss\n");
        for (i, l) in self.loss_history.iter().enumerate() {
            out.push_str(&format!("{i},{l:.16e}\n"));
        }
        out
    }
}

/// Optional inputs to [`fit`].
#[derive(Default, Clone, Copy)]
pub struct FitOptions<'a> {
    /// Ground truth for the error table.
    pub truth: Option<&'a RecoveredModel>,
    /// Known term added to the network output.
    pub known: Option<&'a dyn VectorField>,
    /// Starting parameters instead of a seeded initialization.
    pub initial: Option<&'a [f64]>,
}

/// Full-batch Adam on the segment loss. Returns the best-loss parameters.
/// Solver divergence ends the run (or triggers a backoff retry when
/// enabled) and is recorded in the report rather than returned as an error.
pub fn fit(data: &TrajectoryDataset, config: &TrainConfig, extra: FitOptions) -> Result<TrainReport> {
    config.validate()?;
    data.validate()?;
    let method = config.method()?;
    if config.shape.inputs != data.dim() || config.shape.outputs != data.dim() {
        return Err(Error::ShapeMismatch(format!(
            "network maps {} → {} but the data has dimension {}",
            config.shape.inputs,
            config.shape.outputs,
            data.dim()
        )));
    }
    let net = PiNet::new(config.shape);
    let mut theta = match extra.initial {
        Some(p) if p.len() != net.param_count() => {
            return Err(Error::ShapeMismatch("initial parameter vector length".into()))
        }
        Some(p) => p.to_vec(),
        None => net.init_params(config.seed, config.init_scale).0,
    };
    let opts = config.step_options();
    let start = Instant::now();
    let mut adam = Adam::new(theta.len(), config.beta1, config.beta2, config.adam_eps);
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut history = Vec::with_capacity(config.epochs);
    let mut lr_scale = 1.0;
    let mut retries = 0;
    let mut divergence = None;
    let mut evaluations = 0;
    let mut jacobian_evaluations = 0;

    let mut epoch = 0;
    while epoch < config.epochs {
        let field = net_field(&net, extra.known, &theta);
        match segment_loss_and_gradient(&field, data, method, &opts, config.weighting) {
            Ok(ev) => {
                evaluations += ev.evaluations;
                jacobian_evaluations += ev.jacobian_evaluations;
                history.push(ev.loss);
                if best.as_ref().map_or(true, |(l, _, _)| ev.loss < *l) {
                    best = Some((ev.loss, epoch, theta.clone()));
                }
                let g = ev.gradient.expect("requested");
                adam.step(&mut theta, &g, lr_scale * config.learning_rate(epoch));
                epoch += 1;
            }
            Err(e) if e.is_divergence() => {
                let segment = match &e {
                    Error::Segment { index, .. } => Some(*index),
                    _ => None,
                };
                if retries < config.backoff_retries {
                    retries += 1;
                    lr_scale *= 0.5;
                    if let Some((_, _, p)) = &best {
                        theta.clone_from(p);
                    }
                    adam.reset();
                    continue;
                }
                divergence = Some(Divergence {
                    epoch,
                    segment,
                    error: e.to_string(),
                });
                break;
            }
            Err(e) => return Err(e),
        }
    }

    let (mut final_loss, best_epoch, mut params) = match best {
        Some((l, e, p)) => (Some(l), Some(e), p),
        None => (None, None, theta),
    };
    let mut refine_iterations_run = 0;
    if divergence.is_none() && config.refine_iterations > 0 {
        let lm = levenberg_marquardt(
            &net,
            extra.known,
            data,
            method,
            &opts,
            config.weighting,
            &params,
            config.refine_iterations,
        );
        match lm {
            Ok(r) => {
                evaluations += r.evaluations;
                jacobian_evaluations += r.jacobian_evaluations;
                refine_iterations_run = r.history.len();
                if let (Some(&l), Some(best)) = (r.history.last(), final_loss) {
                    if l < best {
                        final_loss = Some(l);
                        params = r.theta;
                    }
                }
                history.extend(r.history);
            }
            Err(e) if e.is_divergence() => {
                divergence = Some(Divergence {
                    epoch: history.len(),
                    segment: match &e {
                        Error::Segment { index, .. } => Some(*index),
                        _ => None,
                    },
                    error: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    let recovered = net.extract_polynomial(&ParamVector(params.clone()))?;
    let errors = extra
        .truth
        .map(|t| fractional_relative_error(&recovered, t))
        .transpose()?;
    Ok(TrainReport {
        problem: data.provenance.problem.clone(),
        n: data.len(),
        config: config.clone(),
        status: if divergence.is_some() {
            TrainStatus::Diverged
        } else {
            TrainStatus::Converged
        },
        divergence,
        final_loss,
        best_epoch,
        epochs_run: history.len() - refine_iterations_run,
        refine_iterations_run,
        retries_used: retries,
        loss_history: history,
        recovered,
        errors,
        params,
        evaluations,
        jacobian_evaluations,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}
