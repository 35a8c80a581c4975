use crate::densela::StateVector;
use crate::error::{Error, Result};

use super::{check_finite, check_step_inputs, StepDiagnostics, StepResult, VectorField};

fn explicit_result(y: Vec<f64>, evaluations: usize) -> Result<StepResult> {
    check_finite(&y, "explicit step result")?;
    Ok(StepResult {
        y_next: StateVector(y),
        diagnostics: StepDiagnostics {
            converged: true,
            evaluations,
            ..Default::default()
        },
    })
}

fn offset(y: &[f64], h: f64, k: &[f64]) -> Vec<f64> {
    y.iter().zip(k).map(|(a, b)| a + h * b).collect()
}

pub fn step_explicit_euler<F: VectorField + ?Sized>(f: &F, y_n: &StateVector, h: f64) -> Result<StepResult> {
    check_step_inputs(f, y_n.as_slice(), h)?;
    let k = f.eval(y_n.as_slice())?;
    explicit_result(offset(y_n.as_slice(), h, &k), 1)
}

pub fn step_rk4<F: VectorField + ?Sized>(f: &F, y_n: &StateVector, h: f64) -> Result<StepResult> {
    check_step_inputs(f, y_n.as_slice(), h)?;
    let y = y_n.as_slice();
    let k1 = f.eval(y)?;
    let k2 = f.eval(&offset(y, 0.5 * h, &k1))?;
    let k3 = f.eval(&offset(y, 0.5 * h, &k2))?;
    let k4 = f.eval(&offset(y, h, &k3))?;
    let next = (0..y.len())
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    explicit_result(next, 4)
}

/// Accepted points of an adaptive integration with work counters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
    pub evaluations: usize,
    pub accepted: usize,
    pub rejected: usize,
}

// Fehlberg 4(5) coefficients (nodes 0, 1/4, 3/8, 12/13, 1, 1/2 are implied
// by the row sums and unused for autonomous fields).
const A: [[f64; 5]; 6] = [
    [0.0, 0.0, 0.0, 0.0, 0.0],
    [0.25, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 32.0, 9.0 / 32.0, 0.0, 0.0, 0.0],
    [1932.0 / 2197.0, -7200.0 / 2197.0, 7296.0 / 2197.0, 0.0, 0.0],
    [439.0 / 216.0, -8.0, 3680.0 / 513.0, -845.0 / 4104.0, 0.0],
    [-8.0 / 27.0, 2.0, -3544.0 / 2565.0, 1859.0 / 4104.0, -11.0 / 40.0],
];
const B4: [f64; 6] = [25.0 / 216.0, 0.0, 1408.0 / 2565.0, 2197.0 / 4104.0, -0.2, 0.0];
const B5: [f64; 6] = [
    16.0 / 135.0,
    0.0,
    6656.0 / 12825.0,
    28561.0 / 56430.0,
    -9.0 / 50.0,
    2.0 / 55.0,
];

/// Runge–Kutta–Fehlberg 4(5) with an elementary step-size controller,
/// advancing the fourth-order solution.
pub fn integrate_rkf45_adaptive<F: VectorField + ?Sized>(
    f: &F,
    y0: &StateVector,
    t_span: (f64, f64),
    rtol: f64,
    atol: f64,
) -> Result<AdaptiveTrajectory> {
    let (t0, t1) = t_span;
    if !(rtol > 0.0 && atol > 0.0) {
        return Err(Error::InvalidConfig("tolerances must be positive".into()));
    }
    if !(t1 > t0) {
        return Err(Error::InvalidConfig("time span must be increasing".into()));
    }
    let span = t1 - t0;
    check_step_inputs(f, y0.as_slice(), span)?;
    let d = y0.dim();
    let h_min = 1e-14 * span;

    let mut out = AdaptiveTrajectory {
        times: vec![t0],
        states: vec![y0.clone()],
        evaluations: 0,
        accepted: 0,
        rejected: 0,
    };
    let mut t = t0;
    let mut y = y0.0.clone();
    let mut k0 = f.eval(&y)?;
    out.evaluations += 1;

    // Initial step from the scale of y and f.
    let sc: Vec<f64> = y.iter().map(|v| atol + rtol * v.abs()).collect();
    let d0 = rms(&y, &sc);
    let d1 = rms(&k0, &sc);
    let mut h = if d1 <= 1e-12 {
        span
    } else if d0 < 1e-5 {
        1e-6 * span
    } else {
        0.01 * d0 / d1
    };
    h = h.min(span);

    let mut k = vec![vec![0.0; d]; 6];
    while t < t1 {
        if t + h > t1 {
            h = t1 - t;
        }
        k[0].clone_from(&k0);
        for s in 1..6 {
            let ys: Vec<f64> = (0..d)
                .map(|i| y[i] + h * (0..s).map(|j| A[s][j] * k[j][i]).sum::<f64>())
                .collect();
            k[s] = f.eval(&ys)?;
        }
        out.evaluations += 5;
        let y4: Vec<f64> = (0..d)
            .map(|i| y[i] + h * (0..6).map(|j| B4[j] * k[j][i]).sum::<f64>())
            .collect();
        let mut err = 0.0f64;
        for i in 0..d {
            let e = h * (0..6).map(|j| (B5[j] - B4[j]) * k[j][i]).sum::<f64>();
            let scale = atol + rtol * y[i].abs().max(y4[i].abs());
            err = err.max((e / scale).abs());
        }
        if !err.is_finite() {
            err = f64::INFINITY;
        }
        if err <= 1.0 {
            t = if t1 - (t + h) <= 1e-15 * span { t1 } else { t + h };
            y = y4;
            k0 = f.eval(&y)?;
            out.evaluations += 1;
            out.accepted += 1;
            out.times.push(t);
            out.states.push(StateVector(y.clone()));
        } else {
            out.rejected += 1;
        }
        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        h *= factor;
        if t < t1 && h < h_min {
            return Err(Error::MinStepReached(h));
        }
    }
    Ok(out)
}

fn rms(v: &[f64], sc: &[f64]) -> f64 {
    (v.iter().zip(sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}
