//! Randomized checks of the invariants each module promises.

mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{jacobi_eigen, random_expm_case, random_symmetric};
use stiffnode::autodiff::{grad, jacobian_wrt_state, ParamVector};
use stiffnode::bench;
use stiffnode::densela::{determinant, DenseMatrix, StateVector};
use stiffnode::matexp::{expm, expm_frechet};
use stiffnode::odeint::{implicit_residual, step, FnField, Method, NetField, StepOptions};
use stiffnode::pinet::{NetShape, PiNet};
use stiffnode::train::{
    segment_loss, segment_loss_and_gradient, segment_loss_in_order, Provenance, TrajectoryDataset, Weighting,
};

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig::with_cases(cases)
}

fn rel(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.sub(b).unwrap().max_abs() / b.max_abs().max(f64::MIN_POSITIVE)
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DenseMatrix {
    let data = (0..n * n).map(|_| rng.gen_range(-scale..scale)).collect();
    DenseMatrix::from_row_major(n, n, data).unwrap()
}

fn random_net(rng: &mut ChaCha8Rng, shape: NetShape, scale: f64) -> (PiNet, Vec<f64>) {
    let net = PiNet::new(shape);
    let theta = (0..net.param_count()).map(|_| rng.gen_range(-scale..scale)).collect();
    (net, theta)
}

fn shape_strategy() -> impl Strategy<Value = NetShape> {
    (1usize..=3, 1usize..=3, 1usize..=5).prop_map(|(m, d, w)| NetShape::new(m, d, w, m))
}

// ---- autodiff ----

proptest! {
    #![proptest_config(cfg(32))]

    #[test]
    fn gradient_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (net, theta) = random_net(&mut rng, NetShape::new(2, 2, 3, 2), 0.5);
        let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let at = ParamVector(theta);
        let f = |tape: &mut stiffnode::autodiff::Tape, p: &[stiffnode::autodiff::NodeId]| {
            let xn = tape.constant_vec(&x);
            let out = net.forward_on_tape(tape, p, xn)?;
            Ok(tape.sum_squares(out))
        };
        let g = |tape: &mut stiffnode::autodiff::Tape, p: &[stiffnode::autodiff::NodeId]| {
            let xn = tape.constant_vec(&x);
            let out = net.forward_on_tape(tape, p, xn)?;
            let sq = tape.hadamard(out, out)?;
            Ok(tape.sum_squares(sq))
        };
        let gf = grad(net.layout(), &at, f).unwrap();
        let gg = grad(net.layout(), &at, g).unwrap();
        let combo = grad(net.layout(), &at, |tape, p| {
            let fv = f(tape, p)?;
            let gv = g(tape, p)?;
            let fa = tape.scale(fv, a);
            let gb = tape.scale(gv, b);
            tape.add(fa, gb)
        })
        .unwrap();
        let scale = gf.0.iter().chain(&gg.0).fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..combo.len() {
            let expect = a * gf.0[i] + b * gg.0[i];
            prop_assert!((combo.0[i] - expect).abs() <= 1e-12 * scale * (a.abs() + b.abs()).max(1.0));
        }
    }

    #[test]
    fn unused_slot_gradient_is_exact_zero(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (net, theta) = random_net(&mut rng, NetShape::new(2, 2, 3, 2), 1.0);
        let g = grad(net.layout(), &ParamVector(theta), |tape, p| Ok(tape.sum_squares(p[0]))).unwrap();
        let first = net.layout().slots()[0].range();
        for (i, v) in g.0.iter().enumerate() {
            if !first.contains(&i) {
                prop_assert!(*v == 0.0);
            }
        }
    }

    #[test]
    fn linear_network_state_jacobian_is_constant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (net, theta) = random_net(&mut rng, NetShape::new(3, 1, 4, 3), 2.0);
        let theta = ParamVector(theta);
        let y1 = StateVector::new((0..3).map(|_| rng.gen_range(-5.0..5.0)).collect());
        let y2 = StateVector::new((0..3).map(|_| rng.gen_range(-5.0..5.0)).collect());
        let j1 = jacobian_wrt_state(&net, &y1, &theta).unwrap();
        let j2 = jacobian_wrt_state(&net, &y2, &theta).unwrap();
        prop_assert!(j1.sub(&j2).unwrap().max_abs() <= 1e-12 * j1.max_abs().max(1.0));
    }
}

// ---- matexp ----

proptest! {
    #![proptest_config(cfg(48))]

    #[test]
    fn expm_semigroup(seed in any::<u64>(), d in 1usize..=8, norm in 0.01f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = random_matrix(&mut rng, d, 1.0);
        a = a.scale(norm / a.norm_inf().max(1e-300));
        let e = expm(&a).unwrap().value;
        let e2 = expm(&a.scale(2.0)).unwrap().value;
        prop_assert!(rel(&e.matmul(&e).unwrap(), &e2) < 1e-10);
    }

    #[test]
    fn expm_commutes_with_transpose(seed in any::<u64>(), d in 1usize..=10, scale in 0.01f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(&mut rng, d, scale);
        let lhs = expm(&a.transpose()).unwrap().value;
        let rhs = expm(&a).unwrap().value.transpose();
        prop_assert!(rel(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn expm_determinant_is_exp_trace(seed in any::<u64>(), d in 1usize..=6, scale in 0.01f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(&mut rng, d, scale);
        let det = determinant(&expm(&a).unwrap().value).unwrap();
        let expect = a.trace().exp();
        prop_assert!(((det - expect) / expect).abs() < 1e-8);
    }

    #[test]
    fn frechet_is_linear_in_direction(seed in any::<u64>(), d in 1usize..=6, al in -2.0f64..2.0, be in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(&mut rng, d, 2.0);
        let e1 = random_matrix(&mut rng, d, 1.0);
        let e2 = random_matrix(&mut rng, d, 1.0);
        let combo = e1.scale(al).add(&e2.scale(be)).unwrap();
        let lhs = expm_frechet(&a, &combo).unwrap();
        let rhs = expm_frechet(&a, &e1).unwrap().scale(al).add(&expm_frechet(&a, &e2).unwrap().scale(be)).unwrap();
        let scale = expm_frechet(&a, &e1).unwrap().max_abs() + expm_frechet(&a, &e2).unwrap().max_abs();
        prop_assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-10 * scale.max(1.0) * (al.abs() + be.abs()).max(1.0));
    }

    #[test]
    fn expm_matches_eigendecomposition(seed in any::<u64>(), d in 1usize..=10, norm in 1e-3f64..1e4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_expm_case(&mut rng, d, norm);
        let (lambda, v) = jacobi_eigen(&a);
        let mut oracle = DenseMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                oracle[(i, j)] = (0..d).map(|k| v[(i, k)] * lambda[k].exp() * v[(j, k)]).sum();
            }
        }
        prop_assert!(rel(&expm(&a).unwrap().value, &oracle) < 1e-11);
    }
}

// ---- pinet ----

proptest! {
    #![proptest_config(cfg(48))]

    #[test]
    fn restriction_to_a_line_has_bounded_degree(shape in shape_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (net, theta) = random_net(&mut rng, shape, 1.0);
        let m = shape.inputs;
        let x0: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let along = |t: f64| {
            let x: Vec<f64> = x0.iter().zip(&v).map(|(a, b)| a + t * b).collect();
            net.forward(&x, &theta).unwrap()
        };
        // Lagrange interpolation through D+1 nodes, checked at other points.
        let d = shape.degree;
        let nodes: Vec<f64> = (0..=d).map(|i| -1.0 + 2.0 * i as f64 / d as f64).collect();
        let values: Vec<Vec<f64>> = nodes.iter().map(|t| along(*t)).collect();
        for t in [-0.77, 0.13, 0.58, 1.4] {
            let mut interp = vec![0.0; m];
            for (i, ti) in nodes.iter().enumerate() {
                let basis: f64 = nodes.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, tj)| (t - tj) / (ti - tj)).product();
                for k in 0..m {
                    interp[k] += basis * values[i][k];
                }
            }
            let actual = along(t);
            for k in 0..m {
                prop_assert!((interp[k] - actual[k]).abs() < 1e-8 * (1.0 + actual[k].abs()));
            }
        }
    }

    #[test]
    fn parameter_count_formula(shape in shape_strategy(), w in 1usize..20) {
        let shape = NetShape::new(shape.inputs, shape.degree, w, shape.outputs);
        let net = PiNet::new(shape);
        let (m, d) = (shape.inputs, shape.degree);
        let formula = d * (w * m + w) + shape.outputs * w + shape.outputs;
        prop_assert_eq!(net.param_count(), formula);
        prop_assert_eq!(net.layout().len(), formula);
        prop_assert_eq!(shape.param_count(), formula);
    }

    #[test]
    fn extraction_matches_forward(shape in shape_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (net, theta) = random_net(&mut rng, shape, 1.0);
        let model = net.extract_polynomial(&ParamVector(theta.clone())).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..shape.inputs).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let f = net.forward(&x, &theta).unwrap();
            let g = model.evaluate(&x);
            for (a, b) in f.iter().zip(&g) {
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn param_vector_roundtrip(shape in shape_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (net, theta) = random_net(&mut rng, shape, 1.0);
        let v = ParamVector(theta);
        let blocks = v.unflatten(net.layout()).unwrap();
        prop_assert_eq!(ParamVector::flatten(&blocks), v);
    }
}

// ---- odeint ----

proptest! {
    #![proptest_config(cfg(48))]

    #[test]
    fn a_stable_methods_do_not_amplify(z in -1e6f64..-1e-3) {
        let f = FnField::linear(DenseMatrix::from_rows(&[vec![-1.0]]));
        let h = -z;
        let y0 = StateVector::new(vec![1.0]);
        for m in [Method::BackwardEuler, Method::Trapezoid, Method::Radau3, Method::Radau5, Method::IfEuler] {
            let y1 = step(m, &f, &y0, h, &StepOptions::default()).unwrap().y_next[0];
            prop_assert!(y1.abs() <= 1.0 + 1e-12, "{m}: {y1}");
        }
    }

    #[test]
    fn if_euler_exact_on_linear_systems(seed in any::<u64>(), d in 1usize..=6, h in 1e-4f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Stable spectrum keeps e^{Ah} representable for large h.
        let s = random_symmetric(&mut rng, d, 5.0);
        let mut a = s.sub(&DenseMatrix::identity(d).scale(5.0 + s.norm_inf())).unwrap();
        a[(0, d - 1)] += 0.5;
        let y0: Vec<f64> = (0..d).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let f = FnField::linear(a.clone());
        let got = step(Method::IfEuler, &f, &StateVector::new(y0.clone()), h, &StepOptions::default()).unwrap().y_next;
        let exact = expm(&a.scale(h)).unwrap().value.matvec(&y0).unwrap();
        let scale = exact.iter().fold(f64::MIN_POSITIVE, |m, v| m.max(v.abs()));
        for (g, e) in got.as_slice().iter().zip(&exact) {
            prop_assert!((g - e).abs() <= 1e-11 * scale.max(1e-300) + 1e-300, "{g} vs {e}");
        }
    }

    #[test]
    fn converged_implicit_steps_satisfy_their_equation(seed in any::<u64>(), h in 1e-3f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (net, theta) = random_net(&mut rng, NetShape::new(2, 2, 4, 2), 0.4);
        let field = NetField::new(&net, &theta);
        let y0 = StateVector::new(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
        let opts = StepOptions::default();
        for (m, trap) in [(Method::BackwardEuler, false), (Method::Trapezoid, true)] {
            let Ok(r) = step(m, &field, &y0, h, &opts) else { continue };
            prop_assert!(r.diagnostics.converged);
            let g = implicit_residual(trap, &field, y0.as_slice(), r.y_next.as_slice(), h).unwrap();
            prop_assert!(g < opts.newton_tol, "{m}: {g}");
        }
        for m in [Method::Radau3, Method::Radau5] {
            if let Ok(r) = step(m, &field, &y0, h, &opts) {
                prop_assert!(r.diagnostics.converged && r.diagnostics.residual < opts.newton_tol);
            }
        }
    }

    #[test]
    fn ift_gradient_matches_unrolled_newton(seed in any::<u64>(), h in 1e-3f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (net, theta) = random_net(&mut rng, NetShape::new(2, 1, 3, 2), 0.7);
        let y0 = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let v = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let (unrolled, ift) = common::ift_vs_unrolled_backward_euler(&net, &theta, &y0, h, &v);
        let scale = ift.iter().fold(1e-12f64, |m, x| m.max(x.abs()));
        for (a, b) in unrolled.iter().zip(&ift) {
            prop_assert!((a - b).abs() <= 1e-8 * scale, "{a} vs {b}");
        }
    }
}

// ---- train ----

fn exact_linear_dataset(rng: &mut ChaCha8Rng, d: usize, n: usize) -> (DenseMatrix, TrajectoryDataset) {
    let s = random_symmetric(rng, d, 20.0);
    let a = s.sub(&DenseMatrix::identity(d).scale(1.0 + s.norm_inf())).unwrap();
    let y0: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let h = 0.05;
    let times: Vec<f64> = (0..n).map(|i| i as f64 * h).collect();
    let states = times
        .iter()
        .map(|t| StateVector::new(expm(&a.scale(*t)).unwrap().value.matvec(&y0).unwrap()))
        .collect();
    let prov = Provenance {
        problem: "random-linear".into(),
        n,
        generator: "expm-exact".into(),
        tolerance: 0.0,
        refinement_depth: 0,
        uniform: true,
    };
    (a, TrajectoryDataset::new(times, states, prov).unwrap())
}

/// Degree-1 net with A1 = A, b1 = 0, C = I, c = 0: f(y) = A y.
fn linear_params(net: &PiNet, a: &DenseMatrix) -> Vec<f64> {
    let d = a.rows();
    let mut theta = vec![0.0; net.param_count()];
    let slots = net.layout().slots().to_vec();
    theta[slots[0].range()].copy_from_slice(a.as_slice());
    let c = slots.iter().find(|s| s.name == "C").unwrap();
    for i in 0..d {
        theta[c.offset + i * d + i] = 1.0;
    }
    theta
}

proptest! {
    #![proptest_config(cfg(16))]

    #[test]
    fn segment_order_does_not_change_loss(seed in any::<u64>(), mi in 0usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, data) = exact_linear_dataset(&mut rng, 2, 12);
        let (net, theta) = random_net(&mut rng, NetShape::new(2, 2, 3, 2), 0.3);
        let field = NetField::new(&net, &theta);
        let method = Method::ALL[mi];
        let opts = StepOptions::default();
        let base = segment_loss(&field, &data, method, &opts, Weighting::Segment).unwrap();
        let mut order: Vec<usize> = (0..data.segments()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let permuted = segment_loss_in_order(&field, &data, method, &opts, Weighting::Segment, &order).unwrap();
        prop_assert!((base - permuted).abs() < 1e-12 * base.max(1.0));
    }

    #[test]
    fn if_euler_truth_is_exact_and_stationary(seed in any::<u64>(), d in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, data) = exact_linear_dataset(&mut rng, d, 8);
        let net = PiNet::new(NetShape::new(d, 1, d, d));
        let theta = linear_params(&net, &a);
        let field = NetField::new(&net, &theta);
        let e = segment_loss_and_gradient(&field, &data, Method::IfEuler, &StepOptions::default(), Weighting::Segment).unwrap();
        prop_assert!(e.loss < 1e-20, "loss {}", e.loss);
        let g = e.gradient.unwrap();
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(gmax < 1e-8, "gradient {gmax}");
    }
}

// ---- bench ----

proptest! {
    #![proptest_config(cfg(16))]

    #[test]
    fn problem_fields_match_truth(seed in any::<u64>(), idx in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = &bench::registry()[idx];
        let y: Vec<f64> = (0..p.dim).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let f = stiffnode::odeint::VectorField::eval(p.field(), &y).unwrap();
        let g = p.truth.evaluate(&y);
        for (a, b) in f.iter().zip(&g) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn linear_references_are_deterministic(n in 2usize..40, idx in 0usize..2) {
        let p = &bench::registry()[idx];
        let ro = bench::ReferenceOptions::default();
        let a = bench::generate_reference(p, n, &ro).unwrap();
        let b = bench::generate_reference(p, n, &ro).unwrap();
        prop_assert_eq!(a.to_csv_string(), b.to_csv_string());
    }
}
