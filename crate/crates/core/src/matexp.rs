//! Matrix exponential by scaling and squaring with a degree-13 Padé
//! approximant, plus its Fréchet derivative and that derivative's adjoint.
//!
//! The derivative routines use the block-triangular identity
//!
//! ```text
//! expm([[A, E], [0, A]]) = [[expm(A), L(A, E)], [0, expm(A)]]
//! ```
//!
//! where `L(A, E)` is the directional derivative of `expm` at `A` along `E`.
//! Since `⟨W, L(A, E)⟩ = ⟨L(Aᵀ, W), E⟩`, the reverse-mode rule is the same
//! block computation applied to `Aᵀ`.

use crate::densela::{lu_factor, DenseMatrix};
use crate::error::{Error, Result};

/// Largest ∞-norm for which the degree-13 approximant is used unscaled.
pub const PADE13_THETA: f64 = 5.371920351148152;

const OVERFLOW_LIMIT: f64 = 1e300;

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

#[derive(Debug, Clone)]
pub struct ExpmResult {
    pub value: DenseMatrix,
    /// Number of squarings `s`; the approximant was evaluated at `A / 2^s`.
    pub scaling: u32,
    pub pade_order: u32,
}

fn check_overflow(m: &DenseMatrix) -> Result<()> {
    let mx = m.max_abs();
    if !mx.is_finite() || mx > OVERFLOW_LIMIT {
        return Err(Error::ExpmOverflow(mx));
    }
    Ok(())
}

/// Linear combination `Σ cᵢ Mᵢ` of same-shape matrices.
fn combine(terms: &[(f64, &DenseMatrix)]) -> DenseMatrix {
    let (r, c) = terms[0].1.shape();
    let mut out = DenseMatrix::zeros(r, c);
    for (coef, m) in terms {
        out.add_assign_scaled(*coef, m);
    }
    out
}

pub fn expm(a: &DenseMatrix) -> Result<ExpmResult> {
    if !a.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "expm of non-square {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("expm argument".into()));
    }
    let n = a.rows();
    let norm = a.norm_inf();
    let scaling = if norm > PADE13_THETA {
        (norm / PADE13_THETA).log2().ceil().max(0.0) as u32
    } else {
        0
    };
    let a = a.scale(0.5f64.powi(scaling as i32));

    let b = &PADE13;
    let ident = DenseMatrix::identity(n);
    let a2 = a.matmul_unchecked(&a);
    let a4 = a2.matmul_unchecked(&a2);
    let a6 = a4.matmul_unchecked(&a2);

    let inner_u = combine(&[(b[13], &a6), (b[11], &a4), (b[9], &a2)]);
    let u_poly = a6.matmul_unchecked(&inner_u);
    let u_poly = combine(&[(1.0, &u_poly), (b[7], &a6), (b[5], &a4), (b[3], &a2), (b[1], &ident)]);
    let u = a.matmul_unchecked(&u_poly);

    let inner_v = combine(&[(b[12], &a6), (b[10], &a4), (b[8], &a2)]);
    let v = a6.matmul_unchecked(&inner_v);
    let v = combine(&[(1.0, &v), (b[6], &a6), (b[4], &a4), (b[2], &a2), (b[0], &ident)]);
    check_overflow(&u)?;
    check_overflow(&v)?;

    let numer = v.add(&u)?;
    let denom = v.sub(&u)?;
    let mut value = lu_factor(&denom)?.solve_matrix(&numer)?;
    check_overflow(&value)?;
    for _ in 0..scaling {
        value = value.matmul_unchecked(&value);
        check_overflow(&value)?;
    }
    Ok(ExpmResult {
        value,
        scaling,
        pade_order: 13,
    })
}

/// Upper-right block of `expm([[A, E], [0, A]])`.
fn block_upper_right(a: &DenseMatrix, e: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
    if !a.is_square() || a.shape() != e.shape() {
        return Err(Error::ShapeMismatch(format!(
            "Fréchet derivative with A {:?} and E {:?}",
            a.shape(),
            e.shape()
        )));
    }
    let n = a.rows();
    let e_norm = e.norm_inf();
    if e_norm == 0.0 {
        return Ok((expm(a)?.value, DenseMatrix::zeros(n, n)));
    }
    // The derivative is linear in E; rescaling E to the size of A keeps the
    // block norm (and the number of squarings) governed by A alone.
    let rescale = a.norm_inf().max(1.0) / e_norm;
    let mut block = DenseMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            block[(i, j)] = a[(i, j)];
            block[(n + i, n + j)] = a[(i, j)];
            block[(i, n + j)] = e[(i, j)] * rescale;
        }
    }
    let big = expm(&block)?.value;
    let mut value = DenseMatrix::zeros(n, n);
    let mut deriv = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            value[(i, j)] = big[(i, j)];
            deriv[(i, j)] = big[(i, n + j)] / rescale;
        }
    }
    Ok((value, deriv))
}

/// Directional derivative `D expm(A)[E]`.
pub fn expm_frechet(a: &DenseMatrix, e: &DenseMatrix) -> Result<DenseMatrix> {
    block_upper_right(a, e).map(|(_, d)| d)
}

/// `expm(A)` together with `D expm(A)[E]` from one block evaluation.
pub fn expm_with_frechet(a: &DenseMatrix, e: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
    block_upper_right(a, e)
}

/// Vector-Jacobian product of `expm` at `A` with cotangent `W`: the matrix
/// `Ā` with `⟨Ā, E⟩ = ⟨W, D expm(A)[E]⟩` for every `E`.
pub fn expm_frechet_adjoint(a: &DenseMatrix, w: &DenseMatrix) -> Result<DenseMatrix> {
    expm_frechet(&a.transpose(), w)
}
