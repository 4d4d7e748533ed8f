//! Exact gradients through the equilibrium by an adjoint fixed-point solve.
//!
//! Instead of backpropagating through solver iterations, the loss gradient
//! with respect to the pre-activation `Z = W X A + b(U)` is itself the
//! solution of an equilibrium equation,
//!
//! ```text
//! G = D .* (W^T G A^T + grad_X)
//! ```
//!
//! with `D` the activation derivative cached from the forward solve. Once `G`
//! is known, every parameter gradient is a closed-form product:
//! `grad_W = G A^T X^T`, and the input-map gradients follow the same pattern.
//! The multi-relation case sums the transported term over relations.

use crate::equilibrium::SolveError;
use crate::linalg::{
    matmul, rmul_sparse, rmul_sparse_transposed, DenseMatrix, SparseAdjacency,
};

/// Affine input transformation shape: how the feature matrix enters the
/// equilibrium offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BForm {
    /// b(U) = Omega U A — features aggregated over the graph.
    OmegaUA,
    /// b(U) = Omega U — features injected directly.
    OmegaU,
    /// b(U) = Omega1 U A + Omega2 U.
    Split,
}

impl BForm {
    pub fn omega_count(self) -> usize {
        match self {
            BForm::OmegaUA | BForm::OmegaU => 1,
            BForm::Split => 2,
        }
    }
}

/// A concrete input map: the form tag plus its weight matrices (each m x p).
#[derive(Debug, Clone, PartialEq)]
pub struct InputMap {
    pub form: BForm,
    pub omegas: Vec<DenseMatrix>,
}

impl InputMap {
    pub fn omega_ua(omega: DenseMatrix) -> Self {
        Self {
            form: BForm::OmegaUA,
            omegas: vec![omega],
        }
    }

    pub fn omega_u(omega: DenseMatrix) -> Self {
        Self {
            form: BForm::OmegaU,
            omegas: vec![omega],
        }
    }

    pub fn split(omega_agg: DenseMatrix, omega_direct: DenseMatrix) -> Self {
        Self {
            form: BForm::Split,
            omegas: vec![omega_agg, omega_direct],
        }
    }

    pub fn state_dim(&self) -> usize {
        self.omegas[0].rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.omegas[0].cols()
    }

    /// Evaluates b(U) for this map over adjacency `a`.
    pub fn eval(&self, u: &DenseMatrix, a: &SparseAdjacency) -> Result<DenseMatrix, SolveError> {
        Ok(match self.form {
            BForm::OmegaUA => matmul(&self.omegas[0], &rmul_sparse(u, a)?)?,
            BForm::OmegaU => matmul(&self.omegas[0], u)?,
            BForm::Split => {
                let agg = matmul(&self.omegas[0], &rmul_sparse(u, a)?)?;
                let direct = matmul(&self.omegas[1], u)?;
                agg.add(&direct)
            }
        })
    }

    /// Gradients of the loss with respect to each Omega, given grad_Z.
    pub fn omega_grads(
        &self,
        grad_z: &DenseMatrix,
        u: &DenseMatrix,
        a: &SparseAdjacency,
    ) -> Result<Vec<DenseMatrix>, SolveError> {
        let ut = u.transpose();
        Ok(match self.form {
            BForm::OmegaUA => vec![matmul(&rmul_sparse_transposed(grad_z, a)?, &ut)?],
            BForm::OmegaU => vec![matmul(grad_z, &ut)?],
            BForm::Split => vec![
                matmul(&rmul_sparse_transposed(grad_z, a)?, &ut)?,
                matmul(grad_z, &ut)?,
            ],
        })
    }

    /// Gradient of the loss with respect to the input `U`, given grad_Z.
    pub fn input_grad(
        &self,
        grad_z: &DenseMatrix,
        a: &SparseAdjacency,
    ) -> Result<DenseMatrix, SolveError> {
        Ok(match self.form {
            BForm::OmegaUA => {
                rmul_sparse_transposed(&matmul(&self.omegas[0].transpose(), grad_z)?, a)?
            }
            BForm::OmegaU => matmul(&self.omegas[0].transpose(), grad_z)?,
            BForm::Split => {
                let agg =
                    rmul_sparse_transposed(&matmul(&self.omegas[0].transpose(), grad_z)?, a)?;
                let direct = matmul(&self.omegas[1].transpose(), grad_z)?;
                agg.add(&direct)
            }
        })
    }
}

/// Converged adjoint solve.
#[derive(Debug, Clone)]
pub struct BackwardSolution {
    pub grad_z: DenseMatrix,
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

/// Gradients for one equilibrium layer: per-relation weight gradients, the
/// input-map gradients, the optional gradient on the input features, and the
/// adjoint state they came from.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub grad_w: Vec<DenseMatrix>,
    pub grad_omega: Vec<Vec<DenseMatrix>>,
    pub grad_u: Option<DenseMatrix>,
    pub grad_z: DenseMatrix,
    pub iterations: usize,
}

/// Solves the adjoint equation `G = D .* (W^T G A^T + grad_X)` from `G0 = 0`.
pub fn solve_backward(
    w: &DenseMatrix,
    a: &SparseAdjacency,
    d: &DenseMatrix,
    grad_x: &DenseMatrix,
    tol: f64,
    max_iter: usize,
) -> Result<BackwardSolution, SolveError> {
    solve_backward_hetero(&[w], &[a], d, grad_x, tol, max_iter)
}

/// Adjoint solve with the relation-summed transport
/// `G = D .* (sum_i W_i^T G A_i^T + grad_X)`.
pub fn solve_backward_hetero(
    ws: &[&DenseMatrix],
    adjs: &[&SparseAdjacency],
    d: &DenseMatrix,
    grad_x: &DenseMatrix,
    tol: f64,
    max_iter: usize,
) -> Result<BackwardSolution, SolveError> {
    if ws.is_empty() || ws.len() != adjs.len() {
        return Err(SolveError::ShapeMismatch(format!(
            "relation lists must be nonempty and of equal length ({}, {})",
            ws.len(),
            adjs.len()
        )));
    }
    let (m, n) = (d.rows(), d.cols());
    if grad_x.rows() != m || grad_x.cols() != n {
        return Err(SolveError::ShapeMismatch(format!(
            "grad_X is {}x{}, expected {m}x{n}",
            grad_x.rows(),
            grad_x.cols()
        )));
    }
    for (i, w) in ws.iter().enumerate() {
        if w.rows() != m || w.cols() != m || adjs[i].n() != n {
            return Err(SolveError::ShapeMismatch(format!(
                "relation {i}: W is {}x{}, A is {}x{2}, expected W {m}x{m} and A {n}x{n}",
                w.rows(),
                w.cols(),
                adjs[i].n()
            )));
        }
    }
    let wts: Vec<DenseMatrix> = ws.iter().map(|w| w.transpose()).collect();
    let mut g = DenseMatrix::zeros(m, n);
    let mut residuals = Vec::new();
    for iter in 1..=max_iter {
        let mut inner = grad_x.clone();
        for (wt, a) in wts.iter().zip(adjs) {
            let wg = matmul(wt, &g)?;
            inner.add_scaled_in_place(&rmul_sparse_transposed(&wg, a)?, 1.0);
        }
        let g_next = d.hadamard(&inner);
        let residual = g_next.max_abs_diff(&g);
        residuals.push(residual);
        if residual <= tol {
            return Ok(BackwardSolution {
                grad_z: g,
                residuals,
                iterations: iter,
            });
        }
        g = g_next;
    }
    let residual = *residuals.last().unwrap_or(&f64::INFINITY);
    Err(SolveError::NonConvergence {
        iterations: max_iter,
        tol,
        residual,
        last_x: g,
        residuals,
    })
}

/// Closed-form parameter gradients from a converged adjoint state.
///
/// `grad_W = G A^T X^T`; the input-map gradients follow [`InputMap`].
/// `want_input_grad` additionally produces the gradient with respect to `U`
/// (needed for learnable features and for chaining stacked layers).
pub fn param_grads(
    backward: &BackwardSolution,
    x: &DenseMatrix,
    a: &SparseAdjacency,
    u: &DenseMatrix,
    input_map: &InputMap,
    want_input_grad: bool,
) -> Result<GradientBundle, SolveError> {
    param_grads_hetero(backward, x, &[a], u, &[input_map], want_input_grad)
}

/// Per-relation closed-form gradients; the shared input gradient sums over
/// relations.
pub fn param_grads_hetero(
    backward: &BackwardSolution,
    x: &DenseMatrix,
    adjs: &[&SparseAdjacency],
    u: &DenseMatrix,
    input_maps: &[&InputMap],
    want_input_grad: bool,
) -> Result<GradientBundle, SolveError> {
    if adjs.len() != input_maps.len() || adjs.is_empty() {
        return Err(SolveError::ShapeMismatch(format!(
            "relation lists must be nonempty and of equal length ({}, {})",
            adjs.len(),
            input_maps.len()
        )));
    }
    let g = &backward.grad_z;
    let xt = x.transpose();
    let mut grad_w = Vec::with_capacity(adjs.len());
    let mut grad_omega = Vec::with_capacity(adjs.len());
    let mut grad_u: Option<DenseMatrix> = None;
    for (a, imap) in adjs.iter().zip(input_maps) {
        let gat = rmul_sparse_transposed(g, a)?;
        grad_w.push(matmul(&gat, &xt)?);
        grad_omega.push(imap.omega_grads(g, u, a)?);
        if want_input_grad {
            let piece = imap.input_grad(g, a)?;
            grad_u = Some(match grad_u.take() {
                Some(acc) => acc.add(&piece),
                None => piece,
            });
        }
    }
    Ok(GradientBundle {
        grad_w,
        grad_omega,
        grad_u,
        grad_z: g.clone(),
        iterations: backward.iterations,
    })
}
