//! Component-wise non-expansive activation maps and the forward fixed-point
//! solvers.
//!
//! The forward pass solves `X = phi(W X A + B)` (or the multi-relation sum
//! `X = phi(sum_i W_i X A_i + B_i)`) by plain Picard iteration from `X0 = 0`.
//! Each recorded residual is the max-abs-entry of the state change, which is
//! exactly the equation residual of the iterate it was measured at, so the
//! returned state satisfies the tolerance by construction.

use crate::linalg::{matmul, rmul_sparse, DenseMatrix, LinalgError, SparseAdjacency};
use thiserror::Error;

/// Default residual tolerance for the fixed-point solvers.
pub const SOLVE_TOL: f64 = 1e-6;
/// Default iteration cap for the fixed-point solvers.
pub const SOLVE_MAX_ITER: usize = 300;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("fixed-point iteration did not reach tol {tol} within {iterations} iterations (last residual {residual}); the tuple is ill-posed or near-critical")]
    NonConvergence {
        iterations: usize,
        tol: f64,
        residual: f64,
        last_x: DenseMatrix,
        residuals: Vec<f64>,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("solver inputs disagree: {0}")]
    ShapeMismatch(String),
}

/// Component-wise non-expansive activation kinds.
///
/// Every variant satisfies |phi(a) - phi(b)| <= |a - b| with derivative
/// magnitude at most 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu(slope) => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Identity => z,
        }
    }

    /// Elementwise derivative; ReLU at exactly 0 uses 0, leaky ReLU uses its
    /// slope (the subgradient convention keeping all derivatives in [0, 1]).
    #[inline]
    pub fn deriv(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }

    /// True when phi(a*x) = a*phi(x) for a >= 0 (relu, leaky relu, identity).
    pub fn positively_homogeneous(self) -> bool {
        matches!(
            self,
            Activation::Relu | Activation::LeakyRelu(_) | Activation::Identity
        )
    }

    pub fn apply(self, z: &DenseMatrix) -> DenseMatrix {
        z.map(|v| self.eval(v))
    }

    pub fn derivative(self, z: &DenseMatrix) -> DenseMatrix {
        z.map(|v| self.deriv(v))
    }
}

/// Activation over the rows of the state, either one kind everywhere or a
/// stack of row blocks each with its own kind.
///
/// Row blocks arise when a multi-layer model is flattened into a single
/// equilibrium over the stacked state; the map still acts entrywise, so the
/// non-expansiveness analysis is unchanged.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockActivation {
    Uniform(Activation),
    Stacked(Vec<(usize, Activation)>),
}

impl BlockActivation {
    pub fn uniform(act: Activation) -> Self {
        BlockActivation::Uniform(act)
    }

    /// Total row count for stacked blocks; `None` for uniform (any height).
    pub fn stacked_rows(&self) -> Option<usize> {
        match self {
            BlockActivation::Uniform(_) => None,
            BlockActivation::Stacked(blocks) => Some(blocks.iter().map(|(r, _)| r).sum()),
        }
    }

    fn check_rows(&self, rows: usize) -> Result<(), SolveError> {
        if let Some(total) = self.stacked_rows() {
            if total != rows {
                return Err(SolveError::ShapeMismatch(format!(
                    "stacked activation covers {total} rows but the state has {rows}"
                )));
            }
        }
        Ok(())
    }

    fn map_rows(&self, z: &DenseMatrix, f: impl Fn(Activation, f64) -> f64) -> DenseMatrix {
        match self {
            BlockActivation::Uniform(act) => z.map(|v| f(*act, v)),
            BlockActivation::Stacked(blocks) => {
                let mut out = z.clone();
                let cols = z.cols();
                let mut row = 0;
                for &(count, act) in blocks {
                    for r in row..row + count {
                        for c in 0..cols {
                            out.set(r, c, f(act, z.get(r, c)));
                        }
                    }
                    row += count;
                }
                out
            }
        }
    }

    pub fn apply(&self, z: &DenseMatrix) -> DenseMatrix {
        self.map_rows(z, |act, v| act.eval(v))
    }

    pub fn derivative(&self, z: &DenseMatrix) -> DenseMatrix {
        self.map_rows(z, |act, v| act.deriv(v))
    }

    pub fn positively_homogeneous(&self) -> bool {
        match self {
            BlockActivation::Uniform(act) => act.positively_homogeneous(),
            BlockActivation::Stacked(blocks) => {
                blocks.iter().all(|(_, act)| act.positively_homogeneous())
            }
        }
    }
}

impl From<Activation> for BlockActivation {
    fn from(act: Activation) -> Self {
        BlockActivation::Uniform(act)
    }
}

/// Converged forward solve: the fixed point `X`, the elementwise activation
/// derivative `D` at the converged pre-activation, and the residual trace.
#[derive(Debug, Clone)]
pub struct EquilibriumSolution {
    pub x: DenseMatrix,
    pub d: DenseMatrix,
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

fn check_forward_shapes(
    ws: &[&DenseMatrix],
    adjs: &[&SparseAdjacency],
    bs: &[&DenseMatrix],
) -> Result<(usize, usize), SolveError> {
    if ws.is_empty() || ws.len() != adjs.len() || ws.len() != bs.len() {
        return Err(SolveError::ShapeMismatch(format!(
            "relation lists must be nonempty and of equal length ({}, {}, {})",
            ws.len(),
            adjs.len(),
            bs.len()
        )));
    }
    let m = ws[0].rows();
    let n = adjs[0].n();
    for (i, w) in ws.iter().enumerate() {
        if w.rows() != m || w.cols() != m {
            return Err(SolveError::ShapeMismatch(format!(
                "W[{i}] is {}x{}, expected {m}x{m}",
                w.rows(),
                w.cols()
            )));
        }
        if adjs[i].n() != n {
            return Err(SolveError::ShapeMismatch(format!(
                "A[{i}] is {}x{0}, expected {n}x{n}",
                adjs[i].n()
            )));
        }
        if bs[i].rows() != m || bs[i].cols() != n {
            return Err(SolveError::ShapeMismatch(format!(
                "B[{i}] is {}x{}, expected {m}x{n}",
                bs[i].rows(),
                bs[i].cols()
            )));
        }
    }
    Ok((m, n))
}

/// Solves `X = phi(W X A + B)` by Picard iteration.
///
/// `B` is the full offset term, precomputed by the caller. `x0` warm-starts
/// the iteration (the fixed point is unique under well-posedness, so the
/// start only affects iteration count). On failure the error carries the
/// last iterate and the residual trace.
pub fn solve_forward(
    w: &DenseMatrix,
    a: &SparseAdjacency,
    b: &DenseMatrix,
    phi: &BlockActivation,
    tol: f64,
    max_iter: usize,
    x0: Option<&DenseMatrix>,
) -> Result<EquilibriumSolution, SolveError> {
    solve_forward_hetero(&[w], &[a], &[b], phi, tol, max_iter, x0)
}

/// Solves `X = phi(sum_i (W_i X A_i + B_i))`; the single-relation solver is
/// the length-one case.
pub fn solve_forward_hetero(
    ws: &[&DenseMatrix],
    adjs: &[&SparseAdjacency],
    bs: &[&DenseMatrix],
    phi: &BlockActivation,
    tol: f64,
    max_iter: usize,
    x0: Option<&DenseMatrix>,
) -> Result<EquilibriumSolution, SolveError> {
    let (m, n) = check_forward_shapes(ws, adjs, bs)?;
    phi.check_rows(m)?;
    let mut b_total = bs[0].clone();
    for b in &bs[1..] {
        b_total.add_scaled_in_place(b, 1.0);
    }
    let mut x = match x0 {
        Some(start) => {
            if start.rows() != m || start.cols() != n {
                return Err(SolveError::ShapeMismatch(format!(
                    "warm start is {}x{}, expected {m}x{n}",
                    start.rows(),
                    start.cols()
                )));
            }
            start.clone()
        }
        None => DenseMatrix::zeros(m, n),
    };
    let mut residuals = Vec::new();
    for iter in 1..=max_iter {
        let mut z = b_total.clone();
        for (w, a) in ws.iter().zip(adjs) {
            let wx = matmul(w, &x)?;
            let wxa = rmul_sparse(&wx, a)?;
            z.add_scaled_in_place(&wxa, 1.0);
        }
        let x_next = phi.apply(&z);
        let residual = x_next.max_abs_diff(&x);
        residuals.push(residual);
        if residual <= tol {
            // `residual` is the equation residual at `x` itself, so `x` is
            // the certified solution and `z` its pre-activation.
            return Ok(EquilibriumSolution {
                d: phi.derivative(&z),
                x,
                residuals,
                iterations: iter,
            });
        }
        x = x_next;
    }
    let residual = *residuals.last().unwrap_or(&f64::INFINITY);
    Err(SolveError::NonConvergence {
        iterations: max_iter,
        tol,
        residual,
        last_x: x,
        residuals,
    })
}
