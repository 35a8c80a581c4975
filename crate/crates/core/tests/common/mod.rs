//! Oracles shared by the integration test targets.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use stiffnode::autodiff::{collect_param_grad, param_leaves, ParamVector, Tape};
use stiffnode::densela::{DenseMatrix, StateVector};
use stiffnode::odeint::{ift_step_gradient, Method, NetField, StepOptions};
use stiffnode::pinet::PiNet;

/// Cyclic Jacobi rotations on a symmetric matrix. Returns eigenvalues and
/// the orthogonal matrix whose columns are the eigenvectors.
pub fn jacobi_eigen(a: &DenseMatrix) -> (Vec<f64>, DenseMatrix) {
    let n = a.rows();
    let mut m = a.clone();
    let mut v = DenseMatrix::identity(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += m[(i, j)] * m[(i, j)];
                }
            }
        }
        if off <= 1e-34 * m.norm_fro().powi(2) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[(i, i)]).collect(), v)
}

/// Random symmetric `d×d` matrix with ∞-norm `norm`.
pub fn random_symmetric(rng: &mut ChaCha8Rng, d: usize, norm: f64) -> DenseMatrix {
    let mut a = DenseMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let x = rng.gen_range(-1.0..1.0);
            a[(i, j)] = x;
            a[(j, i)] = x;
        }
    }
    let s = a.norm_inf().max(1e-300);
    a.scale(norm / s)
}

/// Backward-Euler parameter gradient of `v · y_next` two ways: by recording
/// two full Newton iterations on a tape and differentiating through them,
/// and by the implicit-function-theorem rule. For a network linear in the
/// state, Newton is exact after one iteration, so unrolling is stable.
pub fn ift_vs_unrolled_backward_euler(
    net: &PiNet,
    theta: &[f64],
    y0: &[f64],
    h: f64,
    v: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let d = y0.len();
    let mut tape = Tape::new();
    let leaves = param_leaves(&mut tape, net.layout(), &ParamVector(theta.to_vec())).unwrap();
    let yn = tape.constant_vec(y0);
    let eye = tape.constant(DenseMatrix::identity(d));
    let mut z = tape.constant_vec(y0);
    for _ in 0..2 {
        let (fz, jz) = net.forward_and_jacobian_on_tape(&mut tape, &leaves, z, true).unwrap();
        let hj = tape.scale(jz.unwrap(), h);
        let m = tape.sub(eye, hj).unwrap();
        let dz = tape.sub(z, yn).unwrap();
        let hf = tape.scale(fz, h);
        let r = tape.sub(dz, hf).unwrap();
        let delta = tape.solve(m, r).unwrap();
        z = tape.sub(z, delta).unwrap();
    }
    let grads = tape.backward(z, DenseMatrix::column(v)).unwrap();
    let unrolled = collect_param_grad(&tape, &grads, &leaves).0;

    let field = NetField::new(net, theta);
    let opts = StepOptions {
        newton_tol: 1e-14,
        ..StepOptions::default()
    };
    let (_, g) = ift_step_gradient(
        Method::BackwardEuler,
        &field,
        &StateVector::new(y0.to_vec()),
        h,
        v,
        &opts,
    )
    .unwrap();
    (unrolled, g.theta_bar)
}

/// Random symmetric matrix for the expm oracle: mixed-sign spectrum up to
/// norm 100, negative semidefinite beyond so that e^A stays representable.
pub fn random_expm_case(rng: &mut ChaCha8Rng, d: usize, norm: f64) -> DenseMatrix {
    if norm <= 100.0 {
        return random_symmetric(rng, d, norm);
    }
    let s = random_symmetric(rng, d, norm / 2.0);
    s.sub(&DenseMatrix::identity(d).scale(norm / 2.0)).unwrap()
}
