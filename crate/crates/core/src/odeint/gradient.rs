use crate::autodiff::{NodeId, Tape};
use crate::densela::{DenseMatrix, LuFactorization, StateVector};
use crate::error::{Error, Result};

use super::implicit::{factor_stage_matrix, solve_stages, StageSolution};
use super::{
    check_finite, check_step_inputs, ButcherTableau, Method, NetField, StepDiagnostics, StepOptions, StepResult,
};

/// Cotangents pulled back through one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGradient {
    pub theta_bar: Vec<f64>,
    pub y_n_bar: Vec<f64>,
}

enum Record {
    Taped {
        tape: Tape,
        params: Vec<NodeId>,
        x: NodeId,
        out: NodeId,
    },
    Implicit {
        tableau: ButcherTableau,
        solution: StageSolution,
        h: f64,
    },
}

/// A step taken with the information needed for reverse-mode gradients.
pub struct DifferentiableStep {
    pub result: StepResult,
    record: Record,
}

fn param_nodes(tape: &mut Tape, field: &NetField, constant: bool) -> Result<Vec<NodeId>> {
    let theta = field.theta;
    if theta.len() != field.net.param_count() {
        return Err(Error::ShapeMismatch("parameter vector length".into()));
    }
    field
        .net
        .layout()
        .slots()
        .iter()
        .map(|s| {
            let m = DenseMatrix::from_row_major(s.rows, s.cols, theta[s.range()].to_vec())?;
            Ok(if constant { tape.constant(m) } else { tape.leaf(m) })
        })
        .collect()
}

fn axpy_node(tape: &mut Tape, x: NodeId, h: f64, k: NodeId) -> Result<NodeId> {
    let hk = tape.scale(k, h);
    tape.add(x, hk)
}

/// Takes one step of `method` on a π-net field and keeps what the reverse
/// pass needs: a tape for explicit and IF Euler steps, the converged stages
/// for implicit ones.
pub fn differentiable_step(
    method: Method,
    field: &NetField,
    y_n: &StateVector,
    h: f64,
    opts: &StepOptions,
) -> Result<DifferentiableStep> {
    check_step_inputs(field, y_n.as_slice(), h)?;
    if let Some(tableau) = method.tableau() {
        let solution = solve_stages(&tableau, field, y_n.as_slice(), h, opts)?;
        let result = StepResult {
            y_next: StateVector(solution.y_next.clone()),
            diagnostics: solution.diagnostics,
        };
        return Ok(DifferentiableStep {
            result,
            record: Record::Implicit { tableau, solution, h },
        });
    }

    let mut tape = Tape::new();
    let params = param_nodes(&mut tape, field, false)?;
    let x = tape.leaf(DenseMatrix::column(y_n.as_slice()));
    let mut diagnostics = StepDiagnostics {
        converged: true,
        ..Default::default()
    };
    let out = match method {
        Method::ExplicitEuler => {
            let (k, _) = field.on_tape(&mut tape, &params, x, false)?;
            diagnostics.evaluations = 1;
            axpy_node(&mut tape, x, h, k)?
        }
        Method::Rk4 => {
            let (k1, _) = field.on_tape(&mut tape, &params, x, false)?;
            let x2 = axpy_node(&mut tape, x, 0.5 * h, k1)?;
            let (k2, _) = field.on_tape(&mut tape, &params, x2, false)?;
            let x3 = axpy_node(&mut tape, x, 0.5 * h, k2)?;
            let (k3, _) = field.on_tape(&mut tape, &params, x3, false)?;
            let x4 = axpy_node(&mut tape, x, h, k3)?;
            let (k4, _) = field.on_tape(&mut tape, &params, x4, false)?;
            diagnostics.evaluations = 4;
            let k23 = tape.add(k2, k3)?;
            let k23 = tape.scale(k23, 2.0);
            let s = tape.add(k1, k23)?;
            let s = tape.add(s, k4)?;
            axpy_node(&mut tape, x, h / 6.0, s)?
        }
        Method::IfEuler => {
            let (fx, jac) = field.on_tape(&mut tape, &params, x, true)?;
            let mut l = jac.expect("requested");
            if opts.freeze_linearization {
                let v = tape.value(l).clone();
                l = tape.constant(v);
            }
            diagnostics.evaluations = 1;
            diagnostics.jacobian_evaluations = 1;
            let lx = tape.matmul(l, x)?;
            let nonlin = tape.sub(fx, lx)?;
            let z = axpy_node(&mut tape, x, h, nonlin)?;
            let hl = tape.scale(l, h);
            let e = tape.expm(hl)?;
            tape.matmul(e, z)?
        }
        _ => unreachable!("implicit methods handled above"),
    };
    let y_next = tape.value(out).as_slice().to_vec();
    check_finite(&y_next, "step result")?;
    Ok(DifferentiableStep {
        result: StepResult {
            y_next: StateVector(y_next),
            diagnostics,
        },
        record: Record::Taped { tape, params, x, out },
    })
}

impl DifferentiableStep {
    pub fn y_next(&self) -> &StateVector {
        &self.result.y_next
    }

    /// Pulls `v̄ = ∂loss/∂y_{n+1}` back, adding `scale · ∂loss/∂θ` into
    /// `theta_bar` and returning `∂loss/∂y_n`.
    ///
    /// Implicit steps use the implicit function theorem at the converged
    /// stages: one transposed solve with `∂G/∂Y`, no Newton unrolling.
    pub fn vjp_into(&self, field: &NetField, v: &[f64], scale: f64, theta_bar: &mut [f64]) -> Result<Vec<f64>> {
        self.vjp_one(field, v, scale, theta_bar, None)
    }

    /// Several cotangents at once; `theta_bars[k]` receives the parameter
    /// part for `vs[k]`. Implicit steps factor `∂G/∂Y` once.
    pub fn vjp_many(
        &self,
        field: &NetField,
        vs: &[Vec<f64>],
        scale: f64,
        theta_bars: &mut [Vec<f64>],
    ) -> Result<Vec<Vec<f64>>> {
        if vs.len() != theta_bars.len() {
            return Err(Error::ShapeMismatch("one parameter buffer per cotangent".into()));
        }
        let lu = match &self.record {
            Record::Implicit { tableau, solution, h } => Some(factor_stage_matrix(tableau, *h, &solution.jacobians)?),
            Record::Taped { .. } => None,
        };
        vs.iter()
            .zip(theta_bars.iter_mut())
            .map(|(v, tb)| self.vjp_one(field, v, scale, tb, lu.as_ref()))
            .collect()
    }

    fn vjp_one(
        &self,
        field: &NetField,
        v: &[f64],
        scale: f64,
        theta_bar: &mut [f64],
        lu: Option<&LuFactorization>,
    ) -> Result<Vec<f64>> {
        let d = self.result.y_next.dim();
        if v.len() != d {
            return Err(Error::ShapeMismatch("cotangent length".into()));
        }
        if theta_bar.len() != field.theta.len() {
            return Err(Error::ShapeMismatch("parameter cotangent length".into()));
        }
        match &self.record {
            Record::Taped { tape, params, x, out } => {
                let g = tape.backward(*out, DenseMatrix::column(v))?;
                let mut offset = 0;
                for p in params {
                    if let Some(m) = g.get(*p) {
                        for (dst, src) in theta_bar[offset..offset + m.as_slice().len()]
                            .iter_mut()
                            .zip(m.as_slice())
                        {
                            *dst += scale * src;
                        }
                    }
                    offset += tape.value(*p).as_slice().len();
                }
                Ok(g.get_or_zero(tape, *x).into_vec())
            }
            Record::Implicit { tableau, solution, h } => {
                let s = tableau.stages();
                let h = *h;
                // y_{n+1} = Y_s, so the cotangent enters through the last
                // stage; μ = (∂G/∂Y)⁻ᵀ Ȳ.
                let mut ybar = vec![0.0; s * d];
                ybar[(s - 1) * d..].copy_from_slice(v);
                let owned;
                let lu = match lu {
                    Some(lu) => lu,
                    None => {
                        owned = factor_stage_matrix(tableau, h, &solution.jacobians)?;
                        &owned
                    }
                };
                let mu = lu.solve_transpose(&ybar)?;
                let mut y_n_bar = vec![0.0; d];
                for i in 0..s {
                    for k in 0..d {
                        y_n_bar[k] += mu[i * d + k];
                    }
                }
                // ∂G_i/∂θ = −h Σ_j a_ij ∂f(Y_j)/∂θ.
                for j in 0..s {
                    let u: Vec<f64> = (0..d)
                        .map(|k| h * (0..s).map(|i| tableau.a[(i, j)] * mu[i * d + k]).sum::<f64>())
                        .collect();
                    if u.iter().all(|x| *x == 0.0) {
                        continue;
                    }
                    field
                        .net
                        .vjp_into(&solution.stages[j], field.theta, &u, scale, theta_bar)?;
                }
                Ok(y_n_bar)
            }
        }
    }
}

/// Gradient contributions `(∂loss/∂θ, ∂loss/∂y_n)` of one step for a
/// cotangent on `y_{n+1}`.
pub fn ift_step_gradient(
    method: Method,
    field: &NetField,
    y_n: &StateVector,
    h: f64,
    cotangent: &[f64],
    opts: &StepOptions,
) -> Result<(StepResult, StepGradient)> {
    let step = differentiable_step(method, field, y_n, h, opts)?;
    let mut theta_bar = vec![0.0; field.theta.len()];
    let y_n_bar = step.vjp_into(field, cotangent, 1.0, &mut theta_bar)?;
    Ok((step.result, StepGradient { theta_bar, y_n_bar }))
}
