//! One-step integrators for autonomous systems `y' = f(y)`.
//!
//! Explicit schemes (Euler, RK4, adaptive RKF45), implicit Runge–Kutta
//! schemes solved by Newton iteration (backward Euler, trapezoid, Radau IIA
//! of orders 3 and 5), and the integrating-factor Euler exponential scheme.
//! [`differentiable_step`] additionally records what is needed to pull a
//! cotangent on `y_{n+1}` back to the network parameters and to `y_n`.

mod explicit;
mod gradient;
mod ifeuler;
mod implicit;
mod tableau;

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{NodeId, Tape};
use crate::densela::{DenseMatrix, StateVector};
use crate::error::{Error, Result};
use crate::pinet::PiNet;

pub use explicit::{integrate_rkf45_adaptive, step_explicit_euler, step_rk4, AdaptiveTrajectory};
pub use gradient::{differentiable_step, ift_step_gradient, DifferentiableStep, StepGradient};
pub use ifeuler::step_if_euler;
pub use implicit::{implicit_residual, step_backward_euler, step_implicit, step_radau, step_trapezoid};
pub use tableau::ButcherTableau;

/// Right-hand side of an autonomous ODE.
pub trait VectorField {
    fn dim(&self) -> usize;

    fn eval(&self, y: &[f64]) -> Result<Vec<f64>>;

    /// `∂f/∂y` at `y`, exact.
    fn jacobian(&self, y: &[f64]) -> Result<DenseMatrix>;

    fn eval_with_jacobian(&self, y: &[f64]) -> Result<(Vec<f64>, DenseMatrix)> {
        Ok((self.eval(y)?, self.jacobian(y)?))
    }

    fn is_autonomous(&self) -> bool {
        true
    }
}

type EvalFn = Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
type JacFn = Box<dyn Fn(&[f64]) -> DenseMatrix + Send + Sync>;

/// Closed-form field with an analytic Jacobian.
pub struct FnField {
    dim: usize,
    f: EvalFn,
    jac: JacFn,
}

impl FnField {
    pub fn new(
        dim: usize,
        f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        jac: impl Fn(&[f64]) -> DenseMatrix + Send + Sync + 'static,
    ) -> Self {
        FnField {
            dim,
            f: Box::new(f),
            jac: Box::new(jac),
        }
    }

    /// `f(y) = A y`.
    pub fn linear(a: DenseMatrix) -> Self {
        let d = a.rows();
        let a2 = a.clone();
        FnField::new(d, move |y| a.matvec_unchecked(y), move |_| a2.clone())
    }

    /// Fields of the form `f(t, y)` are not supported.
    pub fn time_dependent(_dim: usize, _f: impl Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static) -> Result<Self> {
        Err(Error::TimeDependentField)
    }
}

impl fmt::Debug for FnField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnField").field("dim", &self.dim).finish()
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

impl VectorField for FnField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, y: &[f64]) -> Result<Vec<f64>> {
        let out = (self.f)(y);
        if out.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "field returned {} components, expected {}",
                out.len(),
                self.dim
            )));
        }
        Ok(out)
    }

    fn jacobian(&self, y: &[f64]) -> Result<DenseMatrix> {
        let j = (self.jac)(y);
        if j.shape() != (self.dim, self.dim) {
            return Err(Error::ShapeMismatch("field Jacobian".into()));
        }
        Ok(j)
    }
}

type TapeFn = Box<dyn Fn(&mut Tape, NodeId) -> Result<NodeId> + Send + Sync>;

/// Field written as a tape program; its Jacobian comes from reverse sweeps.
pub struct TapeField {
    dim: usize,
    build: TapeFn,
}

impl TapeField {
    pub fn new(dim: usize, build: impl Fn(&mut Tape, NodeId) -> Result<NodeId> + Send + Sync + 'static) -> Self {
        TapeField {
            dim,
            build: Box::new(build),
        }
    }
}

impl VectorField for TapeField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, y: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant_vec(y);
        let out = (self.build)(&mut tape, x)?;
        Ok(tape.value(out).as_slice().to_vec())
    }

    fn jacobian(&self, y: &[f64]) -> Result<DenseMatrix> {
        self.eval_with_jacobian(y).map(|(_, j)| j)
    }

    fn eval_with_jacobian(&self, y: &[f64]) -> Result<(Vec<f64>, DenseMatrix)> {
        let mut tape = Tape::new();
        let x = tape.leaf(DenseMatrix::column(y));
        let out = (self.build)(&mut tape, x)?;
        let value = tape.value(out).as_slice().to_vec();
        let d = self.dim;
        let mut jac = DenseMatrix::zeros(d, y.len());
        for i in 0..d {
            let mut seed = DenseMatrix::zeros(d, 1);
            seed[(i, 0)] = 1.0;
            let g = tape.backward(out, seed)?;
            let row = g.get_or_zero(&tape, x);
            for j in 0..y.len() {
                jac[(i, j)] = row[(j, 0)];
            }
        }
        Ok((value, jac))
    }
}

/// π-net right-hand side, optionally plus a fixed known term
/// (`f(y) = net(y; θ) + k(y)`).
#[derive(Clone, Copy)]
pub struct NetField<'a> {
    pub net: &'a PiNet,
    pub theta: &'a [f64],
    pub known: Option<&'a dyn VectorField>,
}

impl<'a> NetField<'a> {
    pub fn new(net: &'a PiNet, theta: &'a [f64]) -> Self {
        NetField {
            net,
            theta,
            known: None,
        }
    }

    pub fn with_known(mut self, known: &'a dyn VectorField) -> Self {
        self.known = Some(known);
        self
    }

    /// Accumulates `scale · uᵀ ∂f/∂θ` into `theta_bar`; returns `uᵀ ∂f/∂y`.
    pub fn vjp_into(&self, y: &[f64], u: &[f64], scale: f64, theta_bar: &mut [f64]) -> Result<Vec<f64>> {
        let mut ybar = self.net.vjp_into(y, self.theta, u, scale, theta_bar)?;
        if let Some(k) = self.known {
            let jk = k.jacobian(y)?;
            for (a, b) in ybar.iter_mut().zip(jk.tr_matvec(u)?) {
                *a += b;
            }
        }
        Ok(ybar)
    }

    /// Field value and, optionally, state Jacobian recorded on a tape.
    /// The known term enters through its local linearization, which carries
    /// exact first derivatives.
    pub fn on_tape(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        y: NodeId,
        with_jacobian: bool,
    ) -> Result<(NodeId, Option<NodeId>)> {
        let (mut out, mut jac) = self.net.forward_and_jacobian_on_tape(tape, params, y, with_jacobian)?;
        if let Some(k) = self.known {
            let yv = tape.value(y).as_slice().to_vec();
            let (kv, kj) = k.eval_with_jacobian(&yv)?;
            let lin = tape.linearized(y, kv, kj.clone())?;
            out = tape.add(out, lin)?;
            if let Some(j) = jac {
                let kc = tape.constant(kj);
                jac = Some(tape.add(j, kc)?);
            }
        }
        Ok((out, jac))
    }
}

impl VectorField for NetField<'_> {
    fn dim(&self) -> usize {
        self.net.shape().outputs
    }

    fn eval(&self, y: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.net.forward(y, self.theta)?;
        if let Some(k) = self.known {
            for (a, b) in out.iter_mut().zip(k.eval(y)?) {
                *a += b;
            }
        }
        Ok(out)
    }

    fn jacobian(&self, y: &[f64]) -> Result<DenseMatrix> {
        self.eval_with_jacobian(y).map(|(_, j)| j)
    }

    fn eval_with_jacobian(&self, y: &[f64]) -> Result<(Vec<f64>, DenseMatrix)> {
        let (mut out, mut jac) = self.net.forward_with_jacobian(y, self.theta)?;
        if let Some(k) = self.known {
            let (kv, kj) = k.eval_with_jacobian(y)?;
            for (a, b) in out.iter_mut().zip(kv) {
                *a += b;
            }
            jac = jac.add(&kj)?;
        }
        Ok((out, jac))
    }
}

/// Available one-step schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    ExplicitEuler,
    Rk4,
    BackwardEuler,
    Trapezoid,
    Radau3,
    Radau5,
    IfEuler,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::ExplicitEuler,
        Method::Rk4,
        Method::BackwardEuler,
        Method::Trapezoid,
        Method::Radau3,
        Method::Radau5,
        Method::IfEuler,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::ExplicitEuler => "explicit-euler",
            Method::Rk4 => "rk4",
            Method::BackwardEuler => "backward-euler",
            Method::Trapezoid => "trapezoid",
            Method::Radau3 => "radau3",
            Method::Radau5 => "radau5",
            Method::IfEuler => "if-euler",
        }
    }

    pub fn is_implicit(&self) -> bool {
        self.tableau().is_some()
    }

    pub fn order(&self) -> u32 {
        match self {
            Method::ExplicitEuler | Method::BackwardEuler | Method::IfEuler => 1,
            Method::Trapezoid => 2,
            Method::Radau3 => 3,
            Method::Rk4 => 4,
            Method::Radau5 => 5,
        }
    }

    /// Tableau solved by Newton iteration, for implicit methods.
    pub fn tableau(&self) -> Option<ButcherTableau> {
        match self {
            Method::BackwardEuler => Some(ButcherTableau::backward_euler()),
            Method::Trapezoid => Some(ButcherTableau::trapezoid()),
            Method::Radau3 => Some(ButcherTableau::radau3()),
            Method::Radau5 => Some(ButcherTableau::radau5()),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "method",
                name: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    /// ∞-norm tolerance on the implicit root equation.
    pub newton_tol: f64,
    pub max_iter: usize,
    /// Consecutive residual increases that count as divergence.
    pub max_increases: usize,
    /// IF Euler: treat the linearization `L` as a constant when
    /// differentiating.
    pub freeze_linearization: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            newton_tol: 1e-10,
            max_iter: 50,
            max_increases: 5,
            freeze_linearization: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepDiagnostics {
    pub newton_iterations: usize,
    /// Final ∞-norm of the implicit residual (zero for explicit schemes).
    pub residual: f64,
    pub converged: bool,
    pub evaluations: usize,
    pub jacobian_evaluations: usize,
}

impl StepDiagnostics {
    fn accumulate(&mut self, other: &StepDiagnostics) {
        self.newton_iterations += other.newton_iterations;
        self.residual = self.residual.max(other.residual);
        self.evaluations += other.evaluations;
        self.jacobian_evaluations += other.jacobian_evaluations;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub y_next: StateVector,
    pub diagnostics: StepDiagnostics,
}

fn check_step_inputs<F: VectorField + ?Sized>(f: &F, y_n: &[f64], h: f64) -> Result<()> {
    if !f.is_autonomous() {
        return Err(Error::TimeDependentField);
    }
    if y_n.len() != f.dim() {
        return Err(Error::ShapeMismatch(format!(
            "state of length {} for a field of dimension {}",
            y_n.len(),
            f.dim()
        )));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidConfig(format!("step size must be positive, got {h}")));
    }
    check_finite(y_n, "initial state")
}

/// One step of `method` from `y_n` with size `h`.
pub fn step<F: VectorField + ?Sized>(
    method: Method,
    f: &F,
    y_n: &StateVector,
    h: f64,
    opts: &StepOptions,
) -> Result<StepResult> {
    match method {
        Method::ExplicitEuler => step_explicit_euler(f, y_n, h),
        Method::Rk4 => step_rk4(f, y_n, h),
        Method::IfEuler => step_if_euler(f, y_n, h),
        _ => step_implicit(&method.tableau().expect("implicit"), f, y_n, h, opts),
    }
}

/// States on a time grid plus accumulated diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
    pub diagnostics: StepDiagnostics,
}

/// Applies `method` once per interval of `t_grid`.
pub fn integrate_fixed<F: VectorField + ?Sized>(
    method: Method,
    f: &F,
    y0: &StateVector,
    t_grid: &[f64],
    opts: &StepOptions,
) -> Result<Trajectory> {
    if t_grid.len() < 2 {
        return Err(Error::InvalidConfig("time grid needs at least two points".into()));
    }
    if t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidConfig("time grid must be strictly increasing".into()));
    }
    let mut states = Vec::with_capacity(t_grid.len());
    states.push(y0.clone());
    let mut diagnostics = StepDiagnostics {
        converged: true,
        ..Default::default()
    };
    for (i, w) in t_grid.windows(2).enumerate() {
        let r = step(method, f, states.last().expect("nonempty"), w[1] - w[0], opts).map_err(|e| Error::Interval {
            index: i,
            source: Box::new(e),
        })?;
        diagnostics.accumulate(&r.diagnostics);
        states.push(r.y_next);
    }
    Ok(Trajectory {
        times: t_grid.to_vec(),
        states,
        diagnostics,
    })
}

/// `n` uniformly spaced points from `t0` to `t1` inclusive.
pub fn uniform_grid(t0: f64, t1: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2, "a grid needs at least two points");
    let span = t1 - t0;
    (0..n)
        .map(|i| {
            if i == n - 1 {
                t1
            } else {
                t0 + span * i as f64 / (n - 1) as f64
            }
        })
        .collect()
}

#[cfg(test)]
mod tests;
