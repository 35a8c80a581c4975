use crate::densela::StateVector;
use crate::error::Result;
use crate::matexp::expm;

use super::{check_finite, check_step_inputs, StepDiagnostics, StepResult, VectorField};

/// Integrating-factor Euler: `L = ∂f/∂y(y_n)`, `N_n = f(y_n) − L y_n`,
/// `y_{n+1} = expm(hL) (y_n + h N_n)`.
pub fn step_if_euler<F: VectorField + ?Sized>(f: &F, y_n: &StateVector, h: f64) -> Result<StepResult> {
    check_step_inputs(f, y_n.as_slice(), h)?;
    let y = y_n.as_slice();
    let (fy, l) = f.eval_with_jacobian(y)?;
    let ly = l.matvec(y)?;
    let z: Vec<f64> = (0..y.len()).map(|i| y[i] + h * (fy[i] - ly[i])).collect();
    let e = expm(&l.scale(h))?;
    let next = e.value.matvec(&z)?;
    check_finite(&next, "IF Euler step result")?;
    Ok(StepResult {
        y_next: StateVector(next),
        diagnostics: StepDiagnostics {
            converged: true,
            evaluations: 1,
            jacobian_evaluations: 1,
            ..Default::default()
        },
    })
}
