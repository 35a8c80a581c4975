//! Benchmark problems, reference trajectories and the explicit-vs-implicit
//! cost comparison on the stiff Van der Pol oscillator.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::densela::{DenseMatrix, StateVector};
use crate::error::{Error, Result};
use crate::matexp::expm;
use crate::odeint::{integrate_rkf45_adaptive, step, uniform_grid, FnField, Method, StepOptions, VectorField};
use crate::pinet::RecoveredModel;
use crate::train::{Provenance, TrajectoryDataset};

/// Names accepted by [`problem`].
pub const PROBLEM_NAMES: [&str; 4] = ["linear1d", "linear10d", "nonlinear3d", "vanderpol"];

pub struct BenchmarkProblem {
    pub name: String,
    pub dim: usize,
    pub y0: Vec<f64>,
    pub t_span: (f64, f64),
    /// Polynomial degree of the true right-hand side.
    pub degree: usize,
    pub truth: RecoveredModel,
    /// System matrix for linear constant-coefficient problems.
    pub linear: Option<DenseMatrix>,
    /// Grid sizes used for the error-vs-n studies.
    pub study_n: Vec<usize>,
    field: FnField,
}

impl fmt::Debug for BenchmarkProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BenchmarkProblem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("t_span", &self.t_span)
            .finish()
    }
}

impl BenchmarkProblem {
    pub fn field(&self) -> &FnField {
        &self.field
    }

    pub fn initial_state(&self) -> StateVector {
        StateVector::new(self.y0.clone())
    }

    pub fn uniform_times(&self, n: usize) -> Vec<f64> {
        uniform_grid(self.t_span.0, self.t_span.1, n)
    }
}

fn unit(vars: usize, powers: &[(usize, u32)]) -> Vec<u32> {
    let mut e = vec![0; vars];
    for (i, p) in powers {
        e[*i] = *p;
    }
    e
}

fn linear_problem(
    name: &str,
    a: DenseMatrix,
    y0: Vec<f64>,
    t_span: (f64, f64),
    study_n: Vec<usize>,
) -> BenchmarkProblem {
    let d = a.rows();
    let mut terms = Vec::new();
    for i in 0..d {
        for j in 0..d {
            if a[(i, j)] != 0.0 {
                terms.push((i, unit(d, &[(j, 1)]), a[(i, j)]));
            }
        }
    }
    BenchmarkProblem {
        name: name.into(),
        dim: d,
        y0,
        t_span,
        degree: 1,
        truth: RecoveredModel::from_terms(d, d, &terms),
        linear: Some(a.clone()),
        study_n,
        field: FnField::linear(a),
    }
}

/// `y' = −10000 y`, `y(0) = 1000`, `t ∈ [0, 0.01]`.
pub fn linear1d() -> BenchmarkProblem {
    linear_problem(
        "linear1d",
        DenseMatrix::from_rows(&[vec![-10000.0]]),
        vec![1000.0],
        (0.0, 0.01),
        vec![5, 10, 25, 50, 100, 200, 1000, 10000],
    )
}

/// Ten-dimensional tridiagonal system with diagonal entries from −10 to
/// −50000 and couplings 5, all components starting at 20, `t ∈ [0, 0.4]`.
pub fn linear10d() -> BenchmarkProblem {
    let diag = [
        -10.0, -20.0, -50.0, -100.0, -500.0, -1000.0, -5000.0, -10000.0, -20000.0, -50000.0,
    ];
    let mut a = DenseMatrix::diag(&diag);
    for i in 0..9 {
        a[(i, i + 1)] = 5.0;
        a[(i + 1, i)] = 5.0;
    }
    linear_problem(
        "linear10d",
        a,
        vec![20.0; 10],
        (0.0, 0.4),
        vec![10, 17, 50, 100, 250, 500, 1000],
    )
}

/// Three-dimensional quadratic system, `y(0) = (15, 7, 10)`, `t ∈ [0, 5]`.
pub fn nonlinear3d() -> BenchmarkProblem {
    let field = FnField::new(
        3,
        |y| {
            vec![
                -500.0 * y[0] + 3.8 * y[1] * y[1] + 1.35 * y[2],
                0.82 * y[0] - 24.0 * y[1] + 7.5 * y[2] * y[2],
                -0.5 * y[0] * y[0] + 1.85 * y[1] - 6.5 * y[2] * y[2],
            ]
        },
        |y| {
            DenseMatrix::from_rows(&[
                vec![-500.0, 7.6 * y[1], 1.35],
                vec![0.82, -24.0, 15.0 * y[2]],
                vec![-y[0], 1.85, -13.0 * y[2]],
            ])
        },
    );
    let terms = [
        (0, unit(3, &[(0, 1)]), -500.0),
        (0, unit(3, &[(1, 2)]), 3.8),
        (0, unit(3, &[(2, 1)]), 1.35),
        (1, unit(3, &[(0, 1)]), 0.82),
        (1, unit(3, &[(1, 1)]), -24.0),
        (1, unit(3, &[(2, 2)]), 7.5),
        (2, unit(3, &[(0, 2)]), -0.5),
        (2, unit(3, &[(1, 1)]), 1.85),
        (2, unit(3, &[(2, 2)]), -6.5),
    ];
    BenchmarkProblem {
        name: "nonlinear3d".into(),
        dim: 3,
        y0: vec![15.0, 7.0, 10.0],
        t_span: (0.0, 5.0),
        degree: 2,
        truth: RecoveredModel::from_terms(3, 3, &terms),
        linear: None,
        study_n: vec![48, 94, 369, 1467],
        field,
    }
}

/// Van der Pol oscillator `x' = y`, `y' = μ y − μ x² y − x` from `(1, 0)`
/// over `[0, 1300]`.
pub fn van_der_pol(mu: f64) -> BenchmarkProblem {
    let field = FnField::new(
        2,
        move |s| vec![s[1], mu * s[1] - mu * s[0] * s[0] * s[1] - s[0]],
        move |s| {
            DenseMatrix::from_rows(&[
                vec![0.0, 1.0],
                vec![-2.0 * mu * s[0] * s[1] - 1.0, mu - mu * s[0] * s[0]],
            ])
        },
    );
    let terms = [
        (0, vec![0, 1], 1.0),
        (1, vec![0, 1], mu),
        (1, vec![2, 1], -mu),
        (1, vec![1, 0], -1.0),
    ];
    let name = if mu == 1000.0 {
        "vanderpol".to_string()
    } else {
        format!("vanderpol-mu{mu}")
    };
    BenchmarkProblem {
        name,
        dim: 2,
        y0: vec![1.0, 0.0],
        t_span: (0.0, 1300.0),
        degree: 3,
        truth: RecoveredModel::from_terms(2, 2, &terms),
        linear: None,
        study_n: vec![100, 391, 1555, 6213, 24849],
        field,
    }
}

/// Relaxation-oscillation period estimate `(3 − 2 ln 2) μ + 7.014 μ^{-1/3}`
/// for large `μ` (the time unit of [`van_der_pol`]).
pub fn van_der_pol_period(mu: f64) -> f64 {
    (3.0 - 2.0 * std::f64::consts::LN_2) * mu + 7.014 * mu.powf(-1.0 / 3.0)
}

/// `y' = −y`, `y(0) = 1`, `t ∈ [0, 10]`: a non-stiff control.
pub fn decay() -> BenchmarkProblem {
    linear_problem(
        "decay",
        DenseMatrix::from_rows(&[vec![-1.0]]),
        vec![1.0],
        (0.0, 10.0),
        vec![],
    )
}

pub fn problem(name: &str) -> Result<BenchmarkProblem> {
    match name {
        "linear1d" => Ok(linear1d()),
        "linear10d" => Ok(linear10d()),
        "nonlinear3d" => Ok(nonlinear3d()),
        "vanderpol" => Ok(van_der_pol(1000.0)),
        "decay" => Ok(decay()),
        other => Err(Error::Unknown {
            kind: "problem",
            name: other.to_string(),
        }),
    }
}

pub fn registry() -> Vec<BenchmarkProblem> {
    PROBLEM_NAMES.iter().map(|n| problem(n).expect("registered")).collect()
}

/// How output intervals are subdivided for nonlinear references.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Refinement {
    /// Uniform sub-steps over the whole interval, doubled until two levels
    /// agree.
    Uniform,
    /// Recursive bisection: a piece is accepted when one step and two half
    /// steps agree, otherwise both halves are refined.
    Bisection,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceOptions {
    /// Componentwise relative agreement between refinement levels.
    pub tol: f64,
    pub max_halvings: u32,
    pub refinement: Refinement,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        ReferenceOptions {
            tol: 1e-10,
            max_halvings: 24,
            refinement: Refinement::Uniform,
        }
    }
}

/// Reference states on a grid plus the work spent producing them.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRun {
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
    /// Right-hand-side evaluations, including rejected refinement levels.
    pub evaluations: usize,
    pub jacobian_evaluations: usize,
    /// Radau5 steps of the emitted (finest accepted) solution.
    pub accepted_steps: usize,
    pub max_depth: u32,
}

/// Two refinement levels agree: `|a − b| ≤ tol (max(|a|, |b|) + 10⁻² ‖a‖∞)`.
/// The norm-scaled floor keeps components passing through zero from
/// demanding agreement below rounding level.
pub fn levels_agree(a: &[f64], b: &[f64], tol: f64) -> bool {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter()
        .zip(b)
        .all(|(x, y)| (x - y).abs() <= tol * (x.abs().max(y.abs()) + 1e-2 * scale))
}

struct Work {
    evaluations: usize,
    jacobian_evaluations: usize,
}

fn radau_substeps<F: VectorField + ?Sized>(
    f: &F,
    y: &StateVector,
    h: f64,
    steps: usize,
    opts: &StepOptions,
    work: &mut Work,
) -> Result<Option<StateVector>> {
    let mut cur = y.clone();
    for _ in 0..steps {
        match step(Method::Radau5, f, &cur, h, opts) {
            Ok(r) => {
                work.evaluations += r.diagnostics.evaluations;
                work.jacobian_evaluations += r.diagnostics.jacobian_evaluations;
                cur = r.y_next;
            }
            Err(e) if e.is_divergence() => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    Ok(Some(cur))
}

fn generator_step_options() -> StepOptions {
    StepOptions {
        newton_tol: 1e-13,
        ..StepOptions::default()
    }
}

fn refine_uniform<F: VectorField + ?Sized>(
    f: &F,
    y: &StateVector,
    h: f64,
    index: usize,
    ro: &ReferenceOptions,
    work: &mut Work,
) -> Result<(StateVector, usize, u32)> {
    let opts = generator_step_options();
    let mut prev: Option<StateVector> = None;
    for level in 0..=ro.max_halvings {
        let steps = 1usize << level;
        let cur = radau_substeps(f, y, h / steps as f64, steps, &opts, work)?;
        if let (Some(p), Some(c)) = (&prev, &cur) {
            if levels_agree(c.as_slice(), p.as_slice(), ro.tol) {
                return Ok((c.clone(), steps, level));
            }
        }
        prev = cur;
    }
    Err(Error::RefinementFailed(index, ro.max_halvings as usize))
}

#[allow(clippy::too_many_arguments)]
fn refine_bisect<F: VectorField + ?Sized>(
    f: &F,
    y: &StateVector,
    h: f64,
    coarse: Option<StateVector>,
    depth: u32,
    index: usize,
    ro: &ReferenceOptions,
    work: &mut Work,
) -> Result<(StateVector, usize, u32)> {
    let opts = generator_step_options();
    let coarse = match coarse {
        Some(c) => Some(c),
        None => radau_substeps(f, y, h, 1, &opts, work)?,
    };
    let half = h / 2.0;
    let first = radau_substeps(f, y, half, 1, &opts, work)?;
    let fine = match &first {
        Some(m) => radau_substeps(f, m, half, 1, &opts, work)?,
        None => None,
    };
    if let (Some(c), Some(fi)) = (&coarse, &fine) {
        if levels_agree(fi.as_slice(), c.as_slice(), ro.tol) {
            return Ok((fi.clone(), 2, depth + 1));
        }
    }
    if depth + 1 >= ro.max_halvings {
        return Err(Error::RefinementFailed(index, ro.max_halvings as usize));
    }
    let (mid, s1, d1) = refine_bisect(f, y, half, first, depth + 1, index, ro, work)?;
    let (end, s2, d2) = refine_bisect(f, &mid, half, None, depth + 1, index, ro, work)?;
    Ok((end, s1 + s2, d1.max(d2)))
}

/// Reference solution at the given times.
pub fn reference_on_grid(p: &BenchmarkProblem, times: &[f64], ro: &ReferenceOptions) -> Result<ReferenceRun> {
    reference_for_field(p.field(), p.linear.as_ref(), &p.initial_state(), times, ro)
}

fn reference_for_field<F: VectorField + ?Sized>(
    f: &F,
    linear: Option<&DenseMatrix>,
    y0: &StateVector,
    times: &[f64],
    ro: &ReferenceOptions,
) -> Result<ReferenceRun> {
    if times.len() < 2 {
        return Err(Error::InvalidConfig("reference grid needs at least 2 points".into()));
    }
    let mut run = ReferenceRun {
        times: times.to_vec(),
        states: vec![y0.clone()],
        evaluations: 0,
        jacobian_evaluations: 0,
        accepted_steps: 0,
        max_depth: 0,
    };
    if let Some(a) = linear {
        for &t in &times[1..] {
            let e = expm(&a.scale(t - times[0]))?;
            run.states.push(StateVector(e.value.matvec(y0.as_slice())?));
        }
        return Ok(run);
    }
    let mut work = Work {
        evaluations: 0,
        jacobian_evaluations: 0,
    };
    for (i, w) in times.windows(2).enumerate() {
        let h = w[1] - w[0];
        let y = run.states.last().expect("nonempty").clone();
        let (next, steps, depth) = match ro.refinement {
            Refinement::Uniform => refine_uniform(f, &y, h, i, ro, &mut work)?,
            Refinement::Bisection => refine_bisect(f, &y, h, None, 0, i, ro, &mut work)?,
        };
        run.accepted_steps += steps;
        run.max_depth = run.max_depth.max(depth);
        run.states.push(next);
    }
    run.evaluations = work.evaluations;
    run.jacobian_evaluations = work.jacobian_evaluations;
    Ok(run)
}

/// Training data on `n` uniformly spaced points of the problem's span.
/// Linear problems use `expm(A t) y₀`; nonlinear ones self-convergent
/// Radau5 sub-stepping.
pub fn generate_reference(p: &BenchmarkProblem, n: usize, ro: &ReferenceOptions) -> Result<TrajectoryDataset> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!("n must be at least 2, got {n}")));
    }
    let times = p.uniform_times(n);
    let run = reference_on_grid(p, &times, ro)?;
    let (generator, tolerance) = if p.linear.is_some() {
        ("expm-exact".to_string(), 0.0)
    } else {
        let mode = match ro.refinement {
            Refinement::Uniform => "uniform",
            Refinement::Bisection => "bisection",
        };
        (format!("radau5-{mode}-refinement"), ro.tol)
    };
    TrajectoryDataset::new(
        run.times,
        run.states,
        Provenance {
            problem: p.name.clone(),
            n,
            generator,
            tolerance,
            refinement_depth: run.max_depth,
            uniform: true,
        },
    )
}

/// Work needed by an explicit adaptive solver and by the Radau5 reference
/// generator over the same span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StiffnessRecord {
    pub problem: String,
    pub t_span: (f64, f64),
    pub rtol: f64,
    pub atol: f64,
    pub rkf45_points: usize,
    pub rkf45_evaluations: usize,
    pub rkf45_rejected: usize,
    pub radau_points: usize,
    pub radau_evaluations: usize,
    pub radau_jacobian_evaluations: usize,
    /// `rkf45_evaluations / radau_evaluations`.
    pub evaluation_ratio: f64,
    /// Largest componentwise difference between the two end states.
    pub end_state_gap: f64,
}

/// Integrates `p` over `t_span` with RKF45 (`atol = 10⁻³ rtol`) and with the
/// bisection-refined Radau5 generator at agreement tolerance `rtol`.
pub fn stiffness_demo(p: &BenchmarkProblem, t_span: (f64, f64), rtol: f64) -> Result<StiffnessRecord> {
    let atol = 1e-3 * rtol;
    let y0 = p.initial_state();
    let explicit = integrate_rkf45_adaptive(p.field(), &y0, t_span, rtol, atol)?;
    let ro = ReferenceOptions {
        tol: rtol,
        max_halvings: 40,
        refinement: Refinement::Bisection,
    };
    let implicit = reference_for_field(p.field(), None, &y0, &[t_span.0, t_span.1], &ro)?;
    let end_a = explicit.states.last().expect("nonempty");
    let end_b = implicit.states.last().expect("nonempty");
    let gap = end_a
        .as_slice()
        .iter()
        .zip(end_b.as_slice())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(StiffnessRecord {
        problem: p.name.clone(),
        t_span,
        rtol,
        atol,
        rkf45_points: explicit.times.len(),
        rkf45_evaluations: explicit.evaluations,
        rkf45_rejected: explicit.rejected,
        radau_points: implicit.accepted_steps + 1,
        radau_evaluations: implicit.evaluations,
        radau_jacobian_evaluations: implicit.jacobian_evaluations,
        evaluation_ratio: explicit.evaluations as f64 / implicit.evaluations.max(1) as f64,
        end_state_gap: gap,
    })
}
