//! Polynomial network (π-net, first variant): affine layers combined by
//! Hadamard products, with no activation functions.
//!
//! For stage maps `l_k(x) = A_k x + b_k` the hidden state is
//!
//! ```text
//! p_1 = l_1(x)
//! p_k = l_k(x) ∘ p_{k-1} + p_{k-1}     (k = 2..D)
//! out = C p_D + c
//! ```
//!
//! so every hidden unit is a product of `D` affine forms and the output is a
//! polynomial of total degree at most `D`. [`PiNet::extract_polynomial`]
//! recovers that polynomial exactly by pushing sparse monomial maps through
//! the same recurrence.
//!
//! Parameters live in a flat [`ParamVector`] laid out as
//! `[A_1, b_1, ..., A_D, b_D, C, c]`, each block row-major.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParamLayout, ParamVector, Tape};
use crate::densela::{DenseMatrix, StateVector};
use crate::error::{Error, Result};

/// Number of monomials of total degree `<= degree` in `vars` variables.
pub fn monomial_count(vars: usize, degree: usize) -> usize {
    // C(vars + degree, degree)
    let mut c = 1usize;
    for i in 1..=degree {
        c = c * (vars + i) / i;
    }
    c
}

/// All exponent tuples of total degree `<= degree`, in ascending key order.
pub fn monomials(vars: usize, degree: usize) -> Vec<Vec<u32>> {
    fn rec(vars: usize, left: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == vars {
            out.push(prefix.clone());
            return;
        }
        for e in 0..=left {
            prefix.push(e);
            rec(vars, left - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(vars, degree as u32, &mut Vec::new(), &mut out);
    out.sort();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    #[serde(rename = "m")]
    pub inputs: usize,
    #[serde(rename = "D")]
    pub degree: usize,
    #[serde(rename = "w")]
    pub width: usize,
    #[serde(rename = "m_out")]
    pub outputs: usize,
}

impl NetShape {
    pub fn new(inputs: usize, degree: usize, width: usize, outputs: usize) -> Self {
        NetShape {
            inputs,
            degree,
            width,
            outputs,
        }
    }

    /// Square network (`outputs = inputs`) whose width is the number of
    /// monomials of degree `<= degree`.
    pub fn for_system(dim: usize, degree: usize) -> Self {
        Self::new(dim, degree, monomial_count(dim, degree), dim)
    }

    pub fn param_count(&self) -> usize {
        self.degree * (self.width * self.inputs + self.width) + self.outputs * self.width + self.outputs
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs == 0 || self.degree == 0 || self.width == 0 || self.outputs == 0 {
            return Err(Error::InvalidConfig(format!(
                "network dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiNet {
    shape: NetShape,
    layout: ParamLayout,
}

/// Intermediate values of one forward pass, kept for reverse sweeps.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `l_k(x)` per stage.
    pub stages: Vec<Vec<f64>>,
    /// `p_k` per stage.
    pub hidden: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl PiNet {
    pub fn new(shape: NetShape) -> Self {
        let mut layout = ParamLayout::new();
        for k in 1..=shape.degree {
            layout.push(format!("A{k}"), shape.width, shape.inputs);
            layout.push(format!("b{k}"), shape.width, 1);
        }
        layout.push("C", shape.outputs, shape.width);
        layout.push("c", shape.outputs, 1);
        PiNet { shape, layout }
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    fn stage_blocks<'a>(&self, theta: &'a [f64], k: usize) -> (&'a [f64], &'a [f64]) {
        let slots = self.layout.slots();
        (&theta[slots[2 * k].range()], &theta[slots[2 * k + 1].range()])
    }

    fn output_blocks<'a>(&self, theta: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        let slots = self.layout.slots();
        let d = self.shape.degree;
        (&theta[slots[2 * d].range()], &theta[slots[2 * d + 1].range()])
    }

    fn check(&self, x: &[f64], theta: &[f64]) -> Result<()> {
        if x.len() != self.shape.inputs {
            return Err(Error::ShapeMismatch(format!(
                "input of length {} for a network with {} inputs",
                x.len(),
                self.shape.inputs
            )));
        }
        if theta.len() != self.layout.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for a network with {}",
                theta.len(),
                self.layout.len()
            )));
        }
        Ok(())
    }

    fn affine(&self, a: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
        let m = self.shape.inputs;
        b.iter()
            .enumerate()
            .map(|(j, bj)| bj + a[j * m..(j + 1) * m].iter().zip(x).map(|(p, q)| p * q).sum::<f64>())
            .collect()
    }

    pub fn forward_cached(&self, x: &[f64], theta: &[f64]) -> Result<ForwardCache> {
        self.check(x, theta)?;
        let w = self.shape.width;
        let mut stages = Vec::with_capacity(self.shape.degree);
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(self.shape.degree);
        for k in 0..self.shape.degree {
            let (a, b) = self.stage_blocks(theta, k);
            let l = self.affine(a, b, x);
            let p = match hidden.last() {
                None => l.clone(),
                Some(prev) => (0..w).map(|j| (l[j] + 1.0) * prev[j]).collect(),
            };
            stages.push(l);
            hidden.push(p);
        }
        let (c_mat, c_vec) = self.output_blocks(theta);
        let p = hidden.last().expect("degree >= 1");
        let output: Vec<f64> = (0..self.shape.outputs)
            .map(|i| c_vec[i] + c_mat[i * w..(i + 1) * w].iter().zip(p).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        Ok(ForwardCache { stages, hidden, output })
    }

    pub fn forward(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        self.forward_cached(x, theta).map(|c| c.output)
    }

    /// Forward pass returning a [`StateVector`]; non-finite output is an error.
    pub fn pinet_forward(&self, x: &StateVector, theta: &ParamVector) -> Result<StateVector> {
        let out = self.forward(x.as_slice(), theta.as_slice())?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(StateVector(out))
    }

    /// Output and `∂out/∂x` by forward-mode propagation through the stages.
    pub fn forward_with_jacobian(&self, x: &[f64], theta: &[f64]) -> Result<(Vec<f64>, DenseMatrix)> {
        self.check(x, theta)?;
        let (m, w) = (self.shape.inputs, self.shape.width);
        let mut p: Vec<f64> = Vec::new();
        let mut dp = vec![0.0; w * m];
        for k in 0..self.shape.degree {
            let (a, b) = self.stage_blocks(theta, k);
            let l = self.affine(a, b, x);
            if k == 0 {
                dp.copy_from_slice(a);
                p = l;
            } else {
                for j in 0..w {
                    let lp1 = l[j] + 1.0;
                    for i in 0..m {
                        dp[j * m + i] = a[j * m + i] * p[j] + lp1 * dp[j * m + i];
                    }
                    p[j] *= lp1;
                }
            }
        }
        let (c_mat, c_vec) = self.output_blocks(theta);
        let n_out = self.shape.outputs;
        let mut out = c_vec.to_vec();
        let mut jac = DenseMatrix::zeros(n_out, m);
        for r in 0..n_out {
            for j in 0..w {
                let c = c_mat[r * w + j];
                out[r] += c * p[j];
                for i in 0..m {
                    jac[(r, i)] += c * dp[j * m + i];
                }
            }
        }
        Ok((out, jac))
    }

    /// Reverse sweep for cotangent `v` on the output: accumulates
    /// `scale · vᵀ ∂out/∂θ` into `theta_bar` and returns `vᵀ ∂out/∂x`.
    pub fn vjp_into(&self, x: &[f64], theta: &[f64], v: &[f64], scale: f64, theta_bar: &mut [f64]) -> Result<Vec<f64>> {
        let cache = self.forward_cached(x, theta)?;
        if v.len() != self.shape.outputs || theta_bar.len() != theta.len() {
            return Err(Error::ShapeMismatch("vjp cotangent".into()));
        }
        let (m, w, d) = (self.shape.inputs, self.shape.width, self.shape.degree);
        let slots = self.layout.slots().to_vec();
        let (c_mat, _) = self.output_blocks(theta);
        let p_last = &cache.hidden[d - 1];

        let c_range = slots[2 * d].range();
        let cb_range = slots[2 * d + 1].range();
        let mut p_bar = vec![0.0; w];
        for r in 0..self.shape.outputs {
            let vr = v[r];
            if vr == 0.0 {
                continue;
            }
            theta_bar[cb_range.start + r] += scale * vr;
            for j in 0..w {
                theta_bar[c_range.start + r * w + j] += scale * vr * p_last[j];
                p_bar[j] += vr * c_mat[r * w + j];
            }
        }

        let mut x_bar = vec![0.0; m];
        for k in (0..d).rev() {
            let l_bar: Vec<f64> = if k == 0 {
                p_bar.clone()
            } else {
                let prev = &cache.hidden[k - 1];
                let l = &cache.stages[k];
                let lb: Vec<f64> = (0..w).map(|j| p_bar[j] * prev[j]).collect();
                for j in 0..w {
                    p_bar[j] *= l[j] + 1.0;
                }
                lb
            };
            let (a, _) = self.stage_blocks(theta, k);
            let a_range = slots[2 * k].range();
            let b_range = slots[2 * k + 1].range();
            for j in 0..w {
                let lb = l_bar[j];
                if lb == 0.0 {
                    continue;
                }
                theta_bar[b_range.start + j] += scale * lb;
                for i in 0..m {
                    theta_bar[a_range.start + j * m + i] += scale * lb * x[i];
                    x_bar[i] += lb * a[j * m + i];
                }
            }
        }
        Ok(x_bar)
    }

    /// Records the forward pass on a tape. `params` are nodes for the layout
    /// slots in order; `x` is an `m x 1` node.
    pub fn forward_on_tape(&self, tape: &mut Tape, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        self.forward_and_jacobian_on_tape(tape, params, x, false)
            .map(|(out, _)| out)
    }

    /// Output node and, when requested, the `m_out x m` state-Jacobian node,
    /// both differentiable in the parameters.
    pub fn forward_and_jacobian_on_tape(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        x: NodeId,
        with_jacobian: bool,
    ) -> Result<(NodeId, Option<NodeId>)> {
        if params.len() != self.layout.slots().len() {
            return Err(Error::ShapeMismatch("parameter node count".into()));
        }
        let d = self.shape.degree;
        let mut p: Option<NodeId> = None;
        let mut dp: Option<NodeId> = None;
        for k in 0..d {
            let (a, b) = (params[2 * k], params[2 * k + 1]);
            let ax = tape.matmul(a, x)?;
            let l = tape.add(ax, b)?;
            match p {
                None => {
                    p = Some(l);
                    if with_jacobian {
                        dp = Some(a);
                    }
                }
                Some(prev) => {
                    let lp1 = tape.offset(l, 1.0);
                    if with_jacobian {
                        let t1 = tape.row_scale(prev, a)?;
                        let t2 = tape.row_scale(lp1, dp.expect("set at stage 1"))?;
                        dp = Some(tape.add(t1, t2)?);
                    }
                    p = Some(tape.hadamard(lp1, prev)?);
                }
            }
        }
        let (c_mat, c_vec) = (params[2 * d], params[2 * d + 1]);
        let cp = tape.matmul(c_mat, p.expect("degree >= 1"))?;
        let out = tape.add(cp, c_vec)?;
        let jac = match dp {
            Some(dp) if with_jacobian => Some(tape.matmul(c_mat, dp)?),
            _ => None,
        };
        Ok((out, jac))
    }

    /// Deterministic initialization: weights uniform in `(-scale, scale)`,
    /// biases zero.
    pub fn init_params(&self, seed: u64, scale: f64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; self.layout.len()];
        if scale > 0.0 {
            for slot in self.layout.slots() {
                if slot.cols == 1 && (slot.name.starts_with('b') || slot.name == "c") {
                    continue;
                }
                for v in &mut theta[slot.range()] {
                    *v = rng.gen_range(-scale..scale);
                }
            }
        }
        ParamVector(theta)
    }

    /// The exact polynomial computed by the network.
    pub fn extract_polynomial(&self, theta: &ParamVector) -> Result<RecoveredModel> {
        self.check(&vec![0.0; self.shape.inputs], theta.as_slice())?;
        let (m, w, d) = (self.shape.inputs, self.shape.width, self.shape.degree);
        let th = theta.as_slice();
        let affine_polys = |k: usize| -> Vec<Polynomial> {
            let (a, b) = self.stage_blocks(th, k);
            (0..w)
                .map(|j| {
                    let mut poly = Polynomial::constant(m, b[j]);
                    for i in 0..m {
                        poly.add_term(unit_exponent(m, i), a[j * m + i]);
                    }
                    poly
                })
                .collect()
        };
        let mut hidden = affine_polys(0);
        for k in 1..d {
            let stage = affine_polys(k);
            hidden = hidden
                .iter()
                .zip(stage)
                .map(|(prev, mut l)| {
                    l.add_term(vec![0; m], 1.0);
                    l.mul(prev)
                })
                .collect();
        }
        let (c_mat, c_vec) = self.output_blocks(th);
        let mut equations = Vec::with_capacity(self.shape.outputs);
        for r in 0..self.shape.outputs {
            let mut eq = Polynomial::constant(m, c_vec[r]);
            for (j, h) in hidden.iter().enumerate() {
                eq.add_scaled(h, c_mat[r * w + j]);
            }
            assert!(eq.degree() <= d, "extracted degree exceeds network degree");
            equations.push(eq);
        }
        Ok(RecoveredModel {
            vars: m,
            degree: d,
            equations,
        })
    }

    pub fn checkpoint(&self, seed: u64, theta: &ParamVector) -> Checkpoint {
        Checkpoint {
            shape: self.shape,
            seed,
            params: theta.0.clone(),
        }
    }
}

fn unit_exponent(vars: usize, i: usize) -> Vec<u32> {
    let mut e = vec![0; vars];
    e[i] = 1;
    e
}

/// Sparse multivariate polynomial keyed by exponent tuples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    vars: usize,
    terms: BTreeMap<Vec<u32>, f64>,
}

impl Polynomial {
    pub fn zero(vars: usize) -> Self {
        Polynomial {
            vars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(vars: usize, c: f64) -> Self {
        let mut p = Self::zero(vars);
        p.terms.insert(vec![0; vars], c);
        p
    }

    pub fn vars(&self) -> usize {
        self.vars
    }

    pub fn terms(&self) -> &BTreeMap<Vec<u32>, f64> {
        &self.terms
    }

    pub fn coefficient(&self, exps: &[u32]) -> f64 {
        self.terms.get(exps).copied().unwrap_or(0.0)
    }

    /// Adds `c` to the coefficient of `exps`, creating the entry if absent.
    pub fn add_term(&mut self, exps: Vec<u32>, c: f64) {
        debug_assert_eq!(exps.len(), self.vars);
        *self.terms.entry(exps).or_insert(0.0) += c;
    }

    pub fn add_scaled(&mut self, other: &Polynomial, s: f64) {
        for (e, c) in &other.terms {
            self.add_term(e.clone(), s * c);
        }
    }

    pub fn mul(&self, other: &Polynomial) -> Polynomial {
        let mut out = Polynomial::zero(self.vars);
        for (ea, ca) in &self.terms {
            for (eb, cb) in &other.terms {
                let e: Vec<u32> = ea.iter().zip(eb).map(|(p, q)| p + q).collect();
                out.add_term(e, ca * cb);
            }
        }
        out
    }

    pub fn degree(&self) -> usize {
        self.terms
            .keys()
            .map(|e| e.iter().sum::<u32>() as usize)
            .max()
            .unwrap_or(0)
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| c * e.iter().zip(x).map(|(p, xi)| xi.powi(*p as i32)).product::<f64>())
            .sum()
    }
}

fn exponent_key(e: &[u32]) -> String {
    e.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_exponent_key(key: &str, vars: Option<usize>) -> Result<Vec<u32>> {
    let e: Vec<u32> = key
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u32>()
                .map_err(|_| Error::Parse(format!("bad exponent tuple '{key}'")))
        })
        .collect::<Result<_>>()?;
    if let Some(v) = vars {
        if e.len() != v {
            return Err(Error::Parse(format!(
                "exponent tuple '{key}' has {} entries, expected {v}",
                e.len()
            )));
        }
    }
    Ok(e)
}

/// Per-equation monomial coefficient maps.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredModel {
    pub vars: usize,
    pub degree: usize,
    pub equations: Vec<Polynomial>,
}

impl RecoveredModel {
    pub fn new(vars: usize, degree: usize, equations: Vec<Polynomial>) -> Self {
        RecoveredModel {
            vars,
            degree,
            equations,
        }
    }

    /// Builds a model from `(equation, exponents, coefficient)` triples.
    pub fn from_terms(vars: usize, n_eq: usize, terms: &[(usize, Vec<u32>, f64)]) -> Self {
        let mut equations = vec![Polynomial::zero(vars); n_eq];
        for (eq, e, c) in terms {
            equations[*eq].add_term(e.clone(), *c);
        }
        let degree = equations.iter().map(|p| p.degree()).max().unwrap_or(0);
        RecoveredModel {
            vars,
            degree,
            equations,
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> Vec<f64> {
        self.equations.iter().map(|p| p.evaluate(x)).collect()
    }

    pub fn coefficient(&self, eq: usize, exps: &[u32]) -> f64 {
        self.equations[eq].coefficient(exps)
    }

    /// JSON map: equation index → {"e1,...,em": coefficient}.
    pub fn to_json(&self) -> serde_json::Value {
        let mut root = serde_json::Map::new();
        for (i, eq) in self.equations.iter().enumerate() {
            let mut inner = serde_json::Map::new();
            for (e, c) in eq.terms() {
                inner.insert(exponent_key(e), serde_json::json!(c));
            }
            root.insert(i.to_string(), serde_json::Value::Object(inner));
        }
        serde_json::Value::Object(root)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("serializable")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        Self::from_json(&v)
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let root = v
            .as_object()
            .ok_or_else(|| Error::Parse("recovered model must be a JSON object".into()))?;
        let mut indexed: Vec<(usize, Polynomial)> = Vec::new();
        let mut vars: Option<usize> = None;
        for (k, eq) in root {
            let idx: usize = k
                .parse()
                .map_err(|_| Error::Parse(format!("bad equation index '{k}'")))?;
            let obj = eq
                .as_object()
                .ok_or_else(|| Error::Parse(format!("equation {k} must be an object")))?;
            let mut terms = BTreeMap::new();
            for (key, c) in obj {
                let e = parse_exponent_key(key, vars)?;
                vars.get_or_insert(e.len());
                let c = c
                    .as_f64()
                    .ok_or_else(|| Error::Parse(format!("coefficient for '{key}' is not a number")))?;
                terms.insert(e, c);
            }
            indexed.push((idx, Polynomial { vars: 0, terms }));
        }
        let vars = vars.ok_or_else(|| Error::Parse("recovered model has no terms".into()))?;
        indexed.sort_by_key(|(i, _)| *i);
        for (pos, (i, _)) in indexed.iter().enumerate() {
            if *i != pos {
                return Err(Error::Parse(format!("equation indices are not contiguous at {i}")));
            }
        }
        let equations: Vec<Polynomial> = indexed
            .into_iter()
            .map(|(_, mut p)| {
                p.vars = vars;
                p
            })
            .collect();
        let degree = equations.iter().map(|p| p.degree()).max().unwrap_or(0);
        Ok(RecoveredModel {
            vars,
            degree,
            equations,
        })
    }
}

impl fmt::Display for RecoveredModel {
    /// Human-readable equations, highest degree first.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, eq) in self.equations.iter().enumerate() {
            write!(f, "y{i}' =")?;
            let mut terms: Vec<(&Vec<u32>, &f64)> = eq.terms().iter().collect();
            terms.sort_by(|a, b| {
                let da: u32 = a.0.iter().sum();
                let db: u32 = b.0.iter().sum();
                db.cmp(&da).then_with(|| b.0.cmp(a.0))
            });
            for (e, c) in terms {
                let mono: Vec<String> = e
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| **p > 0)
                    .map(|(v, p)| if *p == 1 { format!("y{v}") } else { format!("y{v}^{p}") })
                    .collect();
                let sign = if *c < 0.0 { '-' } else { '+' };
                if mono.is_empty() {
                    write!(f, " {sign} {:.12e}", c.abs())?;
                } else {
                    write!(f, " {sign} {:.12e} {}", c.abs(), mono.join(" "))?;
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// On-disk network checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub shape: NetShape,
    pub seed: u64,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn into_parts(self) -> Result<(PiNet, ParamVector)> {
        self.shape.validate()?;
        let net = PiNet::new(self.shape);
        if self.params.len() != net.param_count() {
            return Err(Error::Parse(format!(
                "checkpoint has {} parameters, shape needs {}",
                self.params.len(),
                net.param_count()
            )));
        }
        Ok((net, ParamVector(self.params)))
    }
}
