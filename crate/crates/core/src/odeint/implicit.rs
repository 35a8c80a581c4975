use crate::densela::{lu_factor, norm_inf_vec, DenseMatrix, LuFactorization, StateVector};
use crate::error::{Error, Result};

use super::{check_finite, check_step_inputs, ButcherTableau, StepDiagnostics, StepOptions, StepResult, VectorField};

/// Converged stage values of an implicit step, with the field values and
/// Jacobians at those stages.
#[derive(Debug, Clone)]
pub(crate) struct StageSolution {
    pub stages: Vec<Vec<f64>>,
    pub jacobians: Vec<DenseMatrix>,
    pub y_next: Vec<f64>,
    pub diagnostics: StepDiagnostics,
}

/// Stacked stage residual `G_i = Y_i − y_n − h Σ_j a_ij f(Y_j)`.
fn stage_residual(t: &ButcherTableau, y_n: &[f64], h: f64, stages: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<f64> {
    let (s, d) = (t.stages(), y_n.len());
    let mut g = Vec::with_capacity(s * d);
    for i in 0..s {
        for k in 0..d {
            let mut acc = 0.0;
            for j in 0..s {
                acc += t.a[(i, j)] * values[j][k];
            }
            g.push(stages[i][k] - y_n[k] - h * acc);
        }
    }
    g
}

/// `∂G/∂Y = I − h (A ⊗ J)` with per-stage Jacobians.
pub(crate) fn stage_matrix(t: &ButcherTableau, h: f64, jacobians: &[DenseMatrix]) -> DenseMatrix {
    let s = t.stages();
    let d = jacobians[0].rows();
    let mut m = DenseMatrix::identity(s * d);
    for i in 0..s {
        for j in 0..s {
            let a = t.a[(i, j)];
            if a == 0.0 {
                continue;
            }
            for r in 0..d {
                for c in 0..d {
                    m[(i * d + r, j * d + c)] -= h * a * jacobians[j][(r, c)];
                }
            }
        }
    }
    m
}

pub(crate) fn factor_stage_matrix(t: &ButcherTableau, h: f64, jacobians: &[DenseMatrix]) -> Result<LuFactorization> {
    lu_factor(&stage_matrix(t, h, jacobians)).map_err(|e| match e {
        Error::SingularMatrix { .. } => Error::SingularJacobian,
        other => other,
    })
}

/// Newton solve of the stage system, stages initialized to `y_n`.
pub(crate) fn solve_stages<F: VectorField + ?Sized>(
    t: &ButcherTableau,
    f: &F,
    y_n: &[f64],
    h: f64,
    opts: &StepOptions,
) -> Result<StageSolution> {
    check_step_inputs(f, y_n, h)?;
    let (s, d) = (t.stages(), y_n.len());
    debug_assert!(
        (0..s).all(|j| t.a[(s - 1, j)] == t.b[j]),
        "tableau must be stiffly accurate"
    );
    let mut diag = StepDiagnostics::default();
    let mut stages: Vec<Vec<f64>> = vec![y_n.to_vec(); s];
    let mut increases = 0usize;
    let diverged = |iterations: usize, residual: f64| Error::NewtonDiverged { iterations, residual };

    for iter in 0..=opts.max_iter {
        let mut values = Vec::with_capacity(s);
        let mut jacobians = Vec::with_capacity(s);
        for y in &stages {
            let (v, j) = f.eval_with_jacobian(y)?;
            values.push(v);
            jacobians.push(j);
        }
        diag.evaluations += s;
        diag.jacobian_evaluations += s;
        let g = stage_residual(t, y_n, h, &stages, &values);
        let res = norm_inf_vec(&g);
        if !res.is_finite() {
            return Err(diverged(iter, res));
        }
        diag.newton_iterations = iter;
        diag.residual = res;
        if res < opts.newton_tol || res <= roundoff_floor(y_n, h, t, &values) {
            diag.converged = true;
            // Every tableau here has b equal to the last row of A, so the
            // last stage is y_{n+1} and satisfies the root equation directly.
            let y_next = stages[s - 1].clone();
            check_finite(&y_next, "implicit step result")?;
            return Ok(StageSolution {
                stages,
                jacobians,
                y_next,
                diagnostics: diag,
            });
        }
        if iter == opts.max_iter {
            break;
        }
        let lu = match factor_stage_matrix(t, h, &jacobians) {
            Ok(lu) => lu,
            Err(Error::SingularJacobian) => return Err(diverged(iter, res)),
            Err(e) => return Err(e),
        };
        let delta = lu.solve(&g)?;

        // Backtracking: halve until the residual decreases, otherwise keep
        // the shortest trial.
        let mut alpha = 1.0;
        let mut accepted: Option<(Vec<Vec<f64>>, f64)> = None;
        for _ in 0..10 {
            let trial: Vec<Vec<f64>> = (0..s)
                .map(|i| (0..d).map(|k| stages[i][k] - alpha * delta[i * d + k]).collect())
                .collect();
            let mut tv = Vec::with_capacity(s);
            let mut finite = true;
            for y in &trial {
                match f.eval(y) {
                    Ok(v) => tv.push(v),
                    Err(Error::NonFinite(_)) => {
                        finite = false;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            diag.evaluations += tv.len();
            let tres = if finite {
                norm_inf_vec(&stage_residual(t, y_n, h, &trial, &tv))
            } else {
                f64::INFINITY
            };
            let better = tres < res;
            if better
                || accepted
                    .as_ref()
                    .map_or(true, |(_, r)| tres.is_finite() && !r.is_finite())
            {
                accepted = Some((trial, tres));
            }
            if better {
                break;
            }
            alpha *= 0.5;
        }
        let (trial, tres) = accepted.expect("at least one trial");
        if !tres.is_finite() {
            return Err(diverged(iter + 1, tres));
        }
        if tres > res {
            increases += 1;
            if increases >= opts.max_increases {
                return Err(diverged(iter + 1, tres));
            }
        } else {
            increases = 0;
        }
        stages = trial;
    }
    Err(diverged(opts.max_iter, diag.residual))
}

/// Residual level below which rounding dominates; only exceeds the default
/// tolerance for states or increments of magnitude ~1e5 and above.
fn roundoff_floor(y_n: &[f64], h: f64, t: &ButcherTableau, values: &[Vec<f64>]) -> f64 {
    let scale_y = norm_inf_vec(y_n);
    let scale_f = values.iter().map(|v| norm_inf_vec(v)).fold(0.0, f64::max);
    let amax = t.a.max_abs() * t.stages() as f64;
    8.0 * f64::EPSILON * (scale_y + h * amax * scale_f)
}

/// Implicit Runge–Kutta step; `y_{n+1}` is the last stage, which equals
/// `y_n + h Σ b_j f(Y_j)` for stiffly accurate tableaus.
pub fn step_implicit<F: VectorField + ?Sized>(
    t: &ButcherTableau,
    f: &F,
    y_n: &StateVector,
    h: f64,
    opts: &StepOptions,
) -> Result<StepResult> {
    let sol = solve_stages(t, f, y_n.as_slice(), h, opts)?;
    Ok(StepResult {
        y_next: StateVector(sol.y_next),
        diagnostics: sol.diagnostics,
    })
}

pub fn step_backward_euler<F: VectorField + ?Sized>(
    f: &F,
    y_n: &StateVector,
    h: f64,
    opts: &StepOptions,
) -> Result<StepResult> {
    step_implicit(&ButcherTableau::backward_euler(), f, y_n, h, opts)
}

pub fn step_trapezoid<F: VectorField + ?Sized>(
    f: &F,
    y_n: &StateVector,
    h: f64,
    opts: &StepOptions,
) -> Result<StepResult> {
    step_implicit(&ButcherTableau::trapezoid(), f, y_n, h, opts)
}

pub fn step_radau<F: VectorField + ?Sized>(
    t: &ButcherTableau,
    f: &F,
    y_n: &StateVector,
    h: f64,
    opts: &StepOptions,
) -> Result<StepResult> {
    if !matches!(t.name, "radau3" | "radau5") {
        return Err(Error::InvalidConfig(format!("'{}' is not a Radau tableau", t.name)));
    }
    step_implicit(t, f, y_n, h, opts)
}

/// ∞-norm of the one-step root equation for backward Euler
/// (`g = y1 − y0 − h f(y1)`) or the trapezoid rule
/// (`g = y1 − y0 − h/2 (f(y0) + f(y1))`), evaluated at a given `y1`.
pub fn implicit_residual<F: VectorField + ?Sized>(
    trapezoid: bool,
    f: &F,
    y0: &[f64],
    y1: &[f64],
    h: f64,
) -> Result<f64> {
    let f1 = f.eval(y1)?;
    let g: Vec<f64> = if trapezoid {
        let f0 = f.eval(y0)?;
        (0..y0.len())
            .map(|k| y1[k] - y0[k] - 0.5 * h * (f0[k] + f1[k]))
            .collect()
    } else {
        (0..y0.len()).map(|k| y1[k] - y0[k] - h * f1[k]).collect()
    };
    Ok(norm_inf_vec(&g))
}
