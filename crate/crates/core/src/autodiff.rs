//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records matrix-valued primitives in evaluation order; every
//! node's inputs precede it, so one reverse sweep over the node list
//! accumulates cotangents for all leaves. Vectors are `n x 1` matrices.
//!
//! The matrix exponential is a single primitive whose backward rule is the
//! adjoint Fréchet derivative (see [`crate::matexp`]). Newton iterations of
//! implicit integrators never appear on a tape; their gradients are formed
//! at the converged root in [`crate::odeint::gradient`].

use serde::{Deserialize, Serialize};

use crate::densela::{lu_factor, DenseMatrix, LuFactorization, StateVector};
use crate::error::{Error, Result};
use crate::matexp::{expm, expm_frechet_adjoint};
use crate::pinet::PiNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    /// `diag(v) · M`
    RowScale(NodeId, NodeId),
    Transpose(NodeId),
    Expm(NodeId),
    /// `M⁻¹ B`, stored with the factorization of `M`.
    Solve(NodeId, NodeId, Box<LuFactorization>),
    SumSquares(NodeId),
    /// Value supplied by the caller, linearized as `J · input`.
    Linearized(NodeId, DenseMatrix),
}

#[derive(Debug, Clone)]
struct Node {
    value: DenseMatrix,
    op: Op,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseMatrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: DenseMatrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: DenseMatrix) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn constant_vec(&mut self, v: &[f64]) -> NodeId {
        self.constant(DenseMatrix::column(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Hadamard(a, b)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    /// Adds the scalar `c` to every entry.
    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::Offset(a))
    }

    /// `diag(v) · m` for a column vector `v`.
    pub fn row_scale(&mut self, v: NodeId, m: NodeId) -> Result<NodeId> {
        let (vv, mm) = (self.value(v), self.value(m));
        if vv.cols() != 1 || vv.rows() != mm.rows() {
            return Err(Error::ShapeMismatch(format!(
                "row_scale by {:?} of {:?}",
                vv.shape(),
                mm.shape()
            )));
        }
        let mut out = mm.clone();
        for i in 0..mm.rows() {
            let s = vv[(i, 0)];
            for j in 0..mm.cols() {
                out[(i, j)] *= s;
            }
        }
        Ok(self.push(out, Op::RowScale(v, m)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn expm(&mut self, a: NodeId) -> Result<NodeId> {
        let v = expm(self.value(a))?.value;
        Ok(self.push(v, Op::Expm(a)))
    }

    /// `M⁻¹ B` for square `M`.
    pub fn solve(&mut self, m: NodeId, b: NodeId) -> Result<NodeId> {
        let lu = lu_factor(self.value(m))?;
        let v = lu.solve_matrix(self.value(b))?;
        Ok(self.push(v, Op::Solve(m, b, Box::new(lu))))
    }

    /// Sum of squared entries, as a 1x1 node.
    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).as_slice().iter().map(|x| x * x).sum();
        self.push(DenseMatrix::from_rows(&[vec![s]]), Op::SumSquares(a))
    }

    /// Records an externally computed column `value` whose derivative with
    /// respect to the column `input` is `jacobian`.
    pub fn linearized(&mut self, input: NodeId, value: Vec<f64>, jacobian: DenseMatrix) -> Result<NodeId> {
        let x = self.value(input);
        if x.cols() != 1 || jacobian.cols() != x.rows() || jacobian.rows() != value.len() {
            return Err(Error::ShapeMismatch("linearized node".into()));
        }
        Ok(self.push(DenseMatrix::column(&value), Op::Linearized(input, jacobian)))
    }

    /// Reverse sweep from `output` seeded with `seed` (same shape as the
    /// output's value).
    pub fn backward(&self, output: NodeId, seed: DenseMatrix) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::ShapeMismatch("backward seed".into()));
        }
        let mut adj: Vec<Option<DenseMatrix>> = vec![None; output.0 + 1];
        adj[output.0] = Some(seed);

        fn acc(adj: &mut [Option<DenseMatrix>], id: NodeId, g: DenseMatrix) {
            match &mut adj[id.0] {
                Some(existing) => existing.add_assign_scaled(1.0, &g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Constant => {
                    adj[idx] = Some(g);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, g.scale(-1.0));
                    acc(&mut adj, *a, g);
                }
                Op::Hadamard(a, b) => {
                    let ga = g.hadamard(self.value(*b))?;
                    let gb = g.hadamard(self.value(*a))?;
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_unchecked(&self.value(*b).transpose());
                    let gb = self.value(*a).transpose().matmul_unchecked(&g);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Scale(a, s) => acc(&mut adj, *a, g.scale(*s)),
                Op::Offset(a) => acc(&mut adj, *a, g),
                Op::RowScale(v, m) => {
                    let mv = self.value(*m);
                    let vv = self.value(*v);
                    let mut gv = DenseMatrix::zeros(vv.rows(), 1);
                    let mut gm = g.clone();
                    for i in 0..mv.rows() {
                        let mut s = 0.0;
                        for j in 0..mv.cols() {
                            s += g[(i, j)] * mv[(i, j)];
                            gm[(i, j)] *= vv[(i, 0)];
                        }
                        gv[(i, 0)] = s;
                    }
                    acc(&mut adj, *v, gv);
                    acc(&mut adj, *m, gm);
                }
                Op::Transpose(a) => acc(&mut adj, *a, g.transpose()),
                Op::Expm(a) => {
                    let ga = expm_frechet_adjoint(self.value(*a), &g)?;
                    acc(&mut adj, *a, ga);
                }
                Op::Solve(m, b, lu) => {
                    // X = M⁻¹B: B̄ = M⁻ᵀ X̄, M̄ = −B̄ Xᵀ.
                    let x = &node.value;
                    let mut gb = DenseMatrix::zeros(g.rows(), g.cols());
                    for c in 0..g.cols() {
                        let col: Vec<f64> = (0..g.rows()).map(|r| g[(r, c)]).collect();
                        for (r, v) in lu.solve_transpose(&col)?.into_iter().enumerate() {
                            gb[(r, c)] = v;
                        }
                    }
                    let gm = gb.matmul_unchecked(&x.transpose()).scale(-1.0);
                    acc(&mut adj, *m, gm);
                    acc(&mut adj, *b, gb);
                }
                Op::SumSquares(a) => {
                    let s = g[(0, 0)] * 2.0;
                    acc(&mut adj, *a, self.value(*a).scale(s));
                }
                Op::Linearized(a, jac) => {
                    let gx = jac.tr_matvec(g.as_slice())?;
                    acc(&mut adj, *a, DenseMatrix::column(&gx));
                }
            }
        }
        Ok(Gradients { adj })
    }
}

/// Cotangents left on leaves (and constants) after a reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    adj: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    /// Cotangent of `id`, or `None` when the output does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&DenseMatrix> {
        self.adj.get(id.0).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but zero-filled with the node's shape.
    pub fn get_or_zero(&self, tape: &Tape, id: NodeId) -> DenseMatrix {
        match self.get(id) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.value(id).shape();
                DenseMatrix::zeros(r, c)
            }
        }
    }
}

/// A named `rows x cols` block of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Layout registry mapping weight/bias blocks to contiguous slices.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamLayout {
    slots: Vec<ParamSlot>,
    len: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> usize {
        self.slots.push(ParamSlot {
            name: name.into(),
            rows,
            cols,
            offset: self.len,
        });
        self.len += rows * cols;
        self.slots.len() - 1
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Flat parameter vector θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        ParamVector(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Split into one matrix per layout slot.
    pub fn unflatten(&self, layout: &ParamLayout) -> Result<Vec<DenseMatrix>> {
        if self.len() != layout.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter vector of length {} for layout of length {}",
                self.len(),
                layout.len()
            )));
        }
        layout
            .slots()
            .iter()
            .map(|s| DenseMatrix::from_row_major(s.rows, s.cols, self.0[s.range()].to_vec()))
            .collect()
    }

    pub fn flatten(blocks: &[DenseMatrix]) -> ParamVector {
        ParamVector(blocks.iter().flat_map(|m| m.as_slice().iter().copied()).collect())
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.0.iter().position(|v| !v.is_finite())
    }
}

/// Places every layout slot on the tape as a leaf.
pub fn param_leaves(tape: &mut Tape, layout: &ParamLayout, at: &ParamVector) -> Result<Vec<NodeId>> {
    Ok(at.unflatten(layout)?.into_iter().map(|m| tape.leaf(m)).collect())
}

/// Gathers leaf cotangents back into a flat vector (zeros for unused slots).
pub fn collect_param_grad(tape: &Tape, grads: &Gradients, leaves: &[NodeId]) -> ParamVector {
    let blocks: Vec<DenseMatrix> = leaves.iter().map(|id| grads.get_or_zero(tape, *id)).collect();
    ParamVector::flatten(&blocks)
}

/// Gradient of a scalar loss built on a tape from the parameter leaves.
pub fn grad<F>(layout: &ParamLayout, at: &ParamVector, loss_fn: F) -> Result<ParamVector>
where
    F: FnOnce(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let leaves = param_leaves(&mut tape, layout, at)?;
    let out = loss_fn(&mut tape, &leaves)?;
    if tape.value(out).shape() != (1, 1) {
        return Err(Error::ShapeMismatch("loss must be a 1x1 node".into()));
    }
    let grads = tape.backward(out, DenseMatrix::from_rows(&[vec![1.0]]))?;
    let g = collect_param_grad(&tape, &grads, &leaves);
    match g.first_non_finite() {
        Some(i) => Err(Error::NonFiniteGradient(i)),
        None => Ok(g),
    }
}

/// `∂net/∂y` at `(y, θ)`, one reverse sweep per output.
pub fn jacobian_wrt_state(net: &PiNet, y: &StateVector, theta: &ParamVector) -> Result<DenseMatrix> {
    let shape = net.shape();
    if y.dim() != shape.inputs {
        return Err(Error::ShapeMismatch(format!(
            "state of dimension {} for a network with {} inputs",
            y.dim(),
            shape.inputs
        )));
    }
    let mut tape = Tape::new();
    let params: Vec<NodeId> = theta
        .unflatten(net.layout())?
        .into_iter()
        .map(|m| tape.constant(m))
        .collect();
    let x = tape.leaf(DenseMatrix::column(y.as_slice()));
    let out = net.forward_on_tape(&mut tape, &params, x)?;
    let m_out = shape.outputs;
    let mut jac = DenseMatrix::zeros(m_out, shape.inputs);
    for i in 0..m_out {
        let mut seed = DenseMatrix::zeros(m_out, 1);
        seed[(i, 0)] = 1.0;
        let g = tape.backward(out, seed)?.get_or_zero(&tape, x);
        for j in 0..shape.inputs {
            jac[(i, j)] = g[(j, 0)];
        }
    }
    if !jac.is_finite() {
        return Err(Error::NonFinite("state Jacobian".into()));
    }
    Ok(jac)
}
