//! Well-posedness verification and the constraints that preserve it during
//! training.
//!
//! A tuple `(W, A)` admits a unique equilibrium for every offset and every
//! component-wise non-expansive activation when
//! `lambda_pf(|A^T (x) W|) = lambda_pf(A) * lambda_pf(|W|) < 1`. Because
//! `lambda_pf(|W|)` is nonconvex in `W`, training enforces the stricter
//! convex surrogate `||W||_inf <= kappa / lambda_pf(A)` instead, which is
//! losslessly tight for positively homogeneous activations thanks to the
//! diagonal rescaling implemented here. The surrogate is maintained by
//! projecting each row of `W` onto an L1 ball after every optimizer step.

use crate::linalg::{kron_materialize, pf_eigen, DenseMatrix, LinalgError, SparseAdjacency};
use crate::linalg::{PF_MAX_ITER, PF_TOL};
use thiserror::Error;

/// Largest vectorized dimension (m*n) for which the multi-relation PF value
/// is materialized exactly.
pub const HETERO_PF_MATERIALIZE_LIMIT: usize = 400;

#[derive(Debug, Error)]
pub enum WellPosedError {
    #[error("projection radius must be nonnegative, got {0}")]
    NegativeRadius(f64),
    #[error("kappa must lie in [0, 1), got {0}")]
    BadKappa(f64),
    #[error("rescaling failed: {0}")]
    RescaleFailed(String),
    #[error("{op}: expected {expected} entries, got {got}")]
    LengthMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Outcome of a well-posedness check.
///
/// For a single relation, `lambda_pf_a`, `lambda_pf_abs_w` and their
/// `product` are the factored PF quantities. For multi-relation checks the
/// factorization does not apply: `lambda_pf_a` then holds the PF value of
/// the summed vectorized operator (exact only when `pf_exact` is set),
/// `lambda_pf_abs_w` is 1, and `tractable_sum` holds
/// `sum_i ||A_i||_1 ||W_i||_inf`.
#[derive(Debug, Clone)]
pub struct WellPosedReport {
    pub lambda_pf_a: f64,
    pub lambda_pf_abs_w: f64,
    pub product: f64,
    pub inf_norm_w: f64,
    pub tractable_sum: f64,
    pub pf_holds: bool,
    /// False when `pf_holds` was inferred from the tractable bound rather
    /// than an exact PF computation.
    pub pf_exact: bool,
    pub tractable_holds: bool,
    pub condition_notes: Vec<String>,
}

impl WellPosedReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "lambda_pf(A)        = {:.8}\nlambda_pf(|W|)      = {:.8}\nproduct             = {:.8}\ninf_norm(W)         = {:.8}\ntractable bound     = {:.8}\nPF condition        = {}{}\ntractable condition = {}\n",
            self.lambda_pf_a,
            self.lambda_pf_abs_w,
            self.product,
            self.inf_norm_w,
            self.tractable_sum,
            if self.pf_holds { "holds" } else { "violated" },
            if self.pf_exact { "" } else { " (not computed exactly)" },
            if self.tractable_holds { "holds" } else { "violated" },
        ));
        for note in &self.condition_notes {
            out.push_str(&format!("note: {note}\n"));
        }
        out
    }
}

fn detect_regular(a: &SparseAdjacency) -> Option<usize> {
    if a.n() == 0 || a.nnz() == 0 {
        return None;
    }
    let mut row_sums = vec![0.0f64; a.n()];
    let mut col_sums = vec![0.0f64; a.n()];
    for (r, c, v) in a.iter() {
        if v != 1.0 {
            return None;
        }
        row_sums[r] += 1.0;
        col_sums[c] += 1.0;
    }
    let k = row_sums[0];
    if k < 1.0 || k.fract() != 0.0 {
        return None;
    }
    if row_sums.iter().chain(col_sums.iter()).all(|&s| s == k) {
        Some(k as usize)
    } else {
        None
    }
}

/// Checks the PF sufficient condition and the tractable training-time
/// surrogate for a single relation.
pub fn check(w: &DenseMatrix, a: &SparseAdjacency) -> Result<WellPosedReport, WellPosedError> {
    let (lambda_a, _) = pf_eigen(a, PF_TOL, PF_MAX_ITER)?;
    let (lambda_w, _) = pf_eigen(&w.abs(), PF_TOL, PF_MAX_ITER)?;
    let product = lambda_a * lambda_w;
    let inf_norm_w = w.inf_norm();
    let tractable_sum = a.one_norm() * inf_norm_w;
    let mut notes = Vec::new();
    if lambda_a == 0.0 {
        notes.push(
            "DAG detected: adjacency is nilpotent, so the tuple is well-posed for any W".into(),
        );
    }
    if let Some(k) = detect_regular(a) {
        notes.push(format!("k-regular graph detected (k = {k}): lambda_pf(A) = k"));
    }
    if tractable_sum < 1.0 {
        notes.push(format!(
            "contraction bound ||A||_1 ||W||_inf = {tractable_sum:.6} < 1: the forward map is a sup-norm contraction"
        ));
    }
    Ok(WellPosedReport {
        lambda_pf_a: lambda_a,
        lambda_pf_abs_w: lambda_w,
        product,
        inf_norm_w,
        tractable_sum,
        pf_holds: product < 1.0,
        pf_exact: true,
        tractable_holds: inf_norm_w * lambda_a < 1.0,
        condition_notes: notes,
    })
}

/// Multi-relation check: the tractable condition is
/// `sum_i ||A_i||_1 ||W_i||_inf <= kappa`, and the exact PF value of
/// `sum_i |A_i^T (x) W_i|` is materialized only for small instances.
pub fn check_hetero(
    ws: &[&DenseMatrix],
    adjs: &[&SparseAdjacency],
    kappa: f64,
) -> Result<WellPosedReport, WellPosedError> {
    if ws.len() != adjs.len() || ws.is_empty() {
        return Err(WellPosedError::LengthMismatch {
            op: "check_hetero",
            expected: ws.len().max(1),
            got: adjs.len(),
        });
    }
    if ws.len() == 1 {
        let mut report = check(ws[0], adjs[0])?;
        report.tractable_holds = report.tractable_sum <= kappa;
        return Ok(report);
    }
    let tractable_sum: f64 = ws
        .iter()
        .zip(adjs)
        .map(|(w, a)| a.one_norm() * w.inf_norm())
        .sum();
    let tractable_holds = tractable_sum <= kappa;
    let m = ws[0].rows();
    let n = adjs[0].n();
    let mut notes = Vec::new();
    let (pf_value, pf_holds, pf_exact) = if m * n <= HETERO_PF_MATERIALIZE_LIMIT {
        let mut sum = DenseMatrix::zeros(m * n, m * n);
        for (w, a) in ws.iter().zip(adjs) {
            let kron = kron_materialize(&a.to_dense().transpose(), w)?.abs();
            sum.add_scaled_in_place(&kron, 1.0);
        }
        let (lambda, _) = pf_eigen(&sum, PF_TOL, PF_MAX_ITER)?;
        notes.push(format!(
            "PF value of the summed vectorized operator materialized exactly over {} relations",
            ws.len()
        ));
        (lambda, lambda < 1.0, true)
    } else if tractable_holds && kappa < 1.0 {
        notes.push("PF condition implied by the tractable bound (instance too large to materialize)".into());
        (tractable_sum, true, false)
    } else {
        notes.push("PF condition unknown: instance too large to materialize and the tractable bound does not certify it".into());
        (tractable_sum, false, false)
    };
    Ok(WellPosedReport {
        lambda_pf_a: pf_value,
        lambda_pf_abs_w: 1.0,
        product: pf_value,
        inf_norm_w: tractable_sum,
        tractable_sum,
        pf_holds,
        pf_exact,
        tractable_holds,
        condition_notes: notes,
    })
}

/// The per-relation norm budgets enforced during training.
///
/// Single relation: `||W||_inf <= kappa / lambda_pf(A)` (unbounded when the
/// graph is acyclic). Multi-relation: `||W_i||_inf <= kappa_i / ||A_i||_1`,
/// which certifies well-posedness when the kappas sum below one; larger sums
/// are permitted but flagged.
#[derive(Debug, Clone)]
pub struct ConstraintSpec {
    pub kappas: Vec<f64>,
    pub radii: Vec<f64>,
}

impl ConstraintSpec {
    pub fn ordinary(kappa: f64, a: &SparseAdjacency) -> Result<Self, WellPosedError> {
        if !(0.0..1.0).contains(&kappa) {
            return Err(WellPosedError::BadKappa(kappa));
        }
        let lambda = a.lambda_pf()?;
        let radius = if lambda == 0.0 {
            f64::INFINITY
        } else {
            kappa / lambda
        };
        Ok(Self {
            kappas: vec![kappa],
            radii: vec![radius],
        })
    }

    pub fn hetero(kappas: &[f64], adjs: &[&SparseAdjacency]) -> Result<Self, WellPosedError> {
        if kappas.len() != adjs.len() || kappas.is_empty() {
            return Err(WellPosedError::LengthMismatch {
                op: "ConstraintSpec::hetero",
                expected: adjs.len().max(1),
                got: kappas.len(),
            });
        }
        let mut radii = Vec::with_capacity(kappas.len());
        for (&kappa, a) in kappas.iter().zip(adjs) {
            if !(0.0..1.0).contains(&kappa) {
                return Err(WellPosedError::BadKappa(kappa));
            }
            let one = a.one_norm();
            radii.push(if one == 0.0 { f64::INFINITY } else { kappa / one });
        }
        Ok(Self {
            kappas: kappas.to_vec(),
            radii,
        })
    }

    pub fn kappa_sum(&self) -> f64 {
        self.kappas.iter().sum()
    }

    /// True when the budgets certify the PF condition outright.
    pub fn certified(&self) -> bool {
        self.kappa_sum() < 1.0
    }
}

/// Euclidean projection of `v` onto the L1 ball of radius `r`, by the
/// sort-and-threshold rule. Stable descending sort makes ties deterministic;
/// the threshold itself is tie-invariant.
pub fn l1_ball_project(v: &[f64], r: f64) -> Result<Vec<f64>, WellPosedError> {
    if r < 0.0 {
        return Err(WellPosedError::NegativeRadius(r));
    }
    // the slack keeps re-projection of an already-projected vector a no-op
    let norm1: f64 = v.iter().map(|x| x.abs()).sum();
    if norm1 <= r + 1e-12 || r.is_infinite() {
        return Ok(v.to_vec());
    }
    if r == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut prefix = 0.0;
    let mut theta = 0.0;
    for (j, &mag) in mags.iter().enumerate() {
        prefix += mag;
        let candidate = (prefix - r) / (j + 1) as f64;
        if mag - candidate > 0.0 {
            theta = candidate;
        }
    }
    Ok(v
        .iter()
        .map(|&x| x.signum() * (x.abs() - theta).max(0.0))
        .collect())
}

/// Projects every row of `W` onto the L1 ball of the given radius, which
/// caps `||W||_inf` at the radius. Infinite radius returns `W` unchanged.
pub fn project_w(w: &DenseMatrix, radius: f64) -> Result<DenseMatrix, WellPosedError> {
    if radius < 0.0 {
        return Err(WellPosedError::NegativeRadius(radius));
    }
    if radius.is_infinite() {
        return Ok(w.clone());
    }
    let mut data = Vec::with_capacity(w.rows() * w.cols());
    for r in 0..w.rows() {
        data.extend(l1_ball_project(w.row(r), radius)?);
    }
    Ok(DenseMatrix::from_vec(w.rows(), w.cols(), data).expect("projection preserves finiteness"))
}

/// Diagonal rescaling that drives `||W||_inf` down to `lambda_pf(|W|)`.
///
/// With `v` the right PF eigenvector of `|W|` and `S = diag(v)^-1`, the
/// rescaled `W' = S W S^-1` has every absolute row sum equal to
/// `lambda_pf(|W|)`. Returns `(W', v)`; callers absorb `S^-1` into the output
/// head and `S` into the input offsets to keep predictions identical for
/// positively homogeneous activations.
pub fn rescale_weights(w: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>), WellPosedError> {
    if w.rows() != w.cols() {
        return Err(WellPosedError::RescaleFailed(format!(
            "W must be square, got {}x{}",
            w.rows(),
            w.cols()
        )));
    }
    let abs_w = w.abs();
    let (_, v) = pf_eigen(&abs_w, 1e-10, 50_000)?;
    let v = if v.iter().any(|&x| x < 1e-12) {
        // reducible |W|: nudge every entry so the eigenvector is strictly
        // positive, at a perturbation far below the reported tolerances
        let eps = 1e-10 * abs_w.inf_norm().max(1.0);
        let regularized = abs_w.map(|x| x + eps);
        let (_, v) = pf_eigen(&regularized, 1e-10, 50_000)?;
        if let Some(bad) = v.iter().position(|&x| x < 1e-12) {
            return Err(WellPosedError::RescaleFailed(format!(
                "PF eigenvector entry {bad} is below 1e-12 even after regularization"
            )));
        }
        v
    } else {
        v
    };
    let n = w.rows();
    let mut out = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, w.get(i, j) * v[j] / v[i]);
        }
    }
    Ok((out, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> DenseMatrix {
        let data = (0..rows * cols)
            .map(|_| lo + (hi - lo) * rng.random::<f64>())
            .collect();
        DenseMatrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn l1_project_inside_ball_unchanged() {
        let v = [0.2, -0.3, 0.1];
        assert_eq!(l1_ball_project(&v, 1.0).unwrap(), v.to_vec());
    }

    #[test]
    fn l1_project_zero_radius() {
        assert_eq!(l1_ball_project(&[3.0, -1.0], 0.0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn l1_project_hand_example() {
        // theta = 2 by the threshold rule
        let got = l1_ball_project(&[3.0, 1.0], 1.0).unwrap();
        assert!((got[0] - 1.0).abs() <= 1e-12);
        assert!(got[1].abs() <= 1e-12);
    }

    #[test]
    fn l1_project_negative_radius_rejected() {
        assert!(matches!(
            l1_ball_project(&[1.0], -0.5),
            Err(WellPosedError::NegativeRadius(_))
        ));
    }

    #[test]
    fn l1_project_norm_bound_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let dim = 1 + (rng.random::<u32>() % 6) as usize;
            let v: Vec<f64> = (0..dim).map(|_| 4.0 * (rng.random::<f64>() - 0.5)).collect();
            let r = 2.0 * rng.random::<f64>();
            let u = l1_ball_project(&v, r).unwrap();
            let norm: f64 = u.iter().map(|x| x.abs()).sum();
            assert!(norm <= r + 1e-12, "norm {norm} exceeds radius {r}");
            let twice = l1_ball_project(&u, r).unwrap();
            assert_eq!(twice, u, "projection is not idempotent");
        }
    }

    #[test]
    fn l1_project_matches_bisection_oracle() {
        // independent route: solve sum_i max(|v_i| - theta, 0) = r for theta
        // by bisection, then soft-threshold
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let dim = 1 + (rng.random::<u32>() % 3) as usize;
            let v: Vec<f64> = (0..dim).map(|_| 6.0 * (rng.random::<f64>() - 0.5)).collect();
            let norm1: f64 = v.iter().map(|x| x.abs()).sum();
            let r = norm1 * rng.random::<f64>();
            let got = l1_ball_project(&v, r).unwrap();

            let residual = |theta: f64| -> f64 {
                v.iter().map(|x| (x.abs() - theta).max(0.0)).sum::<f64>() - r
            };
            let (mut lo, mut hi) = (0.0, v.iter().fold(0.0f64, |m, x| m.max(x.abs())));
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if residual(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let theta = 0.5 * (lo + hi);
            for (g, x) in got.iter().zip(&v) {
                let want = x.signum() * (x.abs() - theta).max(0.0);
                assert!((g - want).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn l1_project_is_nearest_feasible_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let dim = 2 + (rng.random::<u32>() % 2) as usize;
            let v: Vec<f64> = (0..dim).map(|_| 4.0 * (rng.random::<f64>() - 0.5)).collect();
            let r = 0.8;
            let u = l1_ball_project(&v, r).unwrap();
            let d_u: f64 = u.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
            for _ in 0..50 {
                let raw: Vec<f64> = (0..dim).map(|_| 2.0 * (rng.random::<f64>() - 0.5)).collect();
                let z = l1_ball_project(&raw, r).unwrap();
                let d_z: f64 = z.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
                assert!(d_u <= d_z + 1e-9);
            }
        }
    }

    #[test]
    fn project_w_rows_and_infinite_radius() {
        let w = DenseMatrix::from_rows(&[&[3.0, 1.0], &[0.2, 0.1]]);
        let got = project_w(&w, 1.0).unwrap();
        assert!((got.get(0, 0) - 1.0).abs() <= 1e-12);
        assert!(got.get(0, 1).abs() <= 1e-12);
        assert_eq!(got.row(1), &[0.2, 0.1]);
        assert!(got.inf_norm() <= 1.0 + 1e-12);
        assert_eq!(project_w(&w, f64::INFINITY).unwrap(), w);
        let feasible = DenseMatrix::from_rows(&[&[0.3, -0.2], &[0.1, 0.05]]);
        assert_eq!(project_w(&feasible, 1.0).unwrap(), feasible);
    }

    #[test]
    fn project_w_never_increases_row_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let w = random_matrix(&mut rng, 3, 3, -2.0, 2.0);
            let r = 1.5 * rng.random::<f64>();
            let p = project_w(&w, r).unwrap();
            for row in 0..3 {
                let before: f64 = w.row(row).iter().map(|x| x.abs()).sum();
                let after: f64 = p.row(row).iter().map(|x| x.abs()).sum();
                assert!(after <= before + 1e-12);
            }
        }
    }

    #[test]
    fn check_dag_is_well_posed_for_any_w() {
        let a = SparseAdjacency::from_triplets(3, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        let w = DenseMatrix::from_rows(&[&[5.0, -3.0], &[10.0, 2.0]]);
        let report = check(&w, &a).unwrap();
        assert!(report.pf_holds);
        assert_eq!(report.product, 0.0);
        assert!(report.tractable_holds);
        assert!(report
            .condition_notes
            .iter()
            .any(|n| n.contains("DAG detected")));
    }

    #[test]
    fn check_scalar_ill_posed_example() {
        let a = SparseAdjacency::from_triplets(1, &[(0, 0, 1.0)]).unwrap();
        let w = DenseMatrix::from_rows(&[&[1.0]]);
        let report = check(&w, &a).unwrap();
        assert!((report.product - 1.0).abs() <= 1e-9);
        assert!(!report.pf_holds);
        assert!(!report.tractable_holds);
    }

    #[test]
    fn check_feasible_instance_holds_both() {
        // symmetric normalized two-node graph has lambda_pf = 1
        let a = SparseAdjacency::from_triplets(
            2,
            &[(0, 0, 0.5), (0, 1, 0.5), (1, 0, 0.5), (1, 1, 0.5)],
        )
        .unwrap();
        let w = DenseMatrix::from_rows(&[&[0.25, 0.25], &[0.25, -0.25]]);
        let report = check(&w, &a).unwrap();
        assert!((report.lambda_pf_a - 1.0).abs() <= 1e-6);
        assert!((report.inf_norm_w - 0.5).abs() <= 1e-12);
        assert!(report.pf_holds);
        assert!(report.tractable_holds);
    }

    #[test]
    fn tractable_implies_pf_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut seen_tractable = 0;
        for _ in 0..60 {
            let n = 2 + (rng.random::<u32>() % 3) as usize;
            let m = 2 + (rng.random::<u32>() % 3) as usize;
            let mut triplets = Vec::new();
            for r in 0..n {
                for c in 0..n {
                    if rng.random::<f64>() < 0.6 {
                        triplets.push((r, c, rng.random::<f64>()));
                    }
                }
            }
            let a = SparseAdjacency::from_triplets(n, &triplets).unwrap();
            let w = random_matrix(&mut rng, m, m, -0.7, 0.7);
            let report = check(&w, &a).unwrap();
            assert!(
                (report.product - report.lambda_pf_a * report.lambda_pf_abs_w).abs() <= 1e-12
            );
            if report.tractable_holds {
                seen_tractable += 1;
                assert!(report.pf_holds, "tractable held but PF did not: {report:?}");
            }
        }
        assert!(seen_tractable > 0);
    }

    #[test]
    fn check_hetero_single_relation_reduces() {
        let a = SparseAdjacency::from_triplets(2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let w = DenseMatrix::from_rows(&[&[0.3, 0.1], &[0.0, 0.2]]);
        let single = check(&w, &a).unwrap();
        let hetero = check_hetero(&[&w], &[&a], 0.95).unwrap();
        assert_eq!(single.lambda_pf_a, hetero.lambda_pf_a);
        assert_eq!(single.pf_holds, hetero.pf_holds);
    }

    #[test]
    fn check_hetero_tractable_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a1 = SparseAdjacency::from_triplets(3, &[(0, 1, 1.0), (1, 2, 1.0), (2, 0, 1.0)]).unwrap();
        let a2 = SparseAdjacency::from_triplets(3, &[(1, 0, 1.0), (2, 1, 1.0), (0, 2, 1.0)]).unwrap();
        let mut w1 = random_matrix(&mut rng, 2, 2, -1.0, 1.0);
        let mut w2 = random_matrix(&mut rng, 2, 2, -1.0, 1.0);
        w1 = w1.scale(0.4 / (w1.inf_norm() * a1.one_norm()));
        w2 = w2.scale(0.4 / (w2.inf_norm() * a2.one_norm()));
        let report = check_hetero(&[&w1, &w2], &[&a1, &a2], 0.8).unwrap();
        assert!((report.tractable_sum - 0.8).abs() <= 1e-12);
        assert!(report.tractable_holds);
        assert!(report.pf_holds);
        assert!(report.pf_exact);
        // the materialized PF value never exceeds the norm bound
        assert!(report.lambda_pf_a <= report.tractable_sum + 1e-8);
    }

    #[test]
    fn constraint_spec_radii() {
        let a = SparseAdjacency::from_triplets(2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let spec = ConstraintSpec::ordinary(0.95, &a).unwrap();
        assert!((spec.radii[0] - 0.95).abs() <= 1e-6);
        let dag = SparseAdjacency::from_triplets(2, &[(0, 1, 1.0)]).unwrap();
        let spec = ConstraintSpec::ordinary(0.5, &dag).unwrap();
        assert!(spec.radii[0].is_infinite());
        assert!(ConstraintSpec::ordinary(1.0, &a).is_err());
        let spec = ConstraintSpec::hetero(&[0.7, 0.4], &[&a, &a]).unwrap();
        assert!(!spec.certified());
        let spec = ConstraintSpec::hetero(&[0.4, 0.4], &[&a, &a]).unwrap();
        assert!(spec.certified());
        assert!((spec.radii[0] - 0.4).abs() <= 1e-12);
    }

    #[test]
    fn rescale_symmetric_already_balanced() {
        let w = DenseMatrix::from_rows(&[&[0.0, 0.5], &[0.5, 0.0]]);
        let (got, v) = rescale_weights(&w).unwrap();
        assert!(got.max_abs_diff(&w) <= 1e-8);
        assert!((v[0] - v[1]).abs() <= 1e-8);
    }

    #[test]
    fn rescale_hand_example() {
        let w = DenseMatrix::from_rows(&[&[0.0, 4.0], &[0.01, 0.0]]);
        let (got, v) = rescale_weights(&w).unwrap();
        assert!((v[0] / v[1] - 20.0).abs() <= 1e-5);
        let want = DenseMatrix::from_rows(&[&[0.0, 0.2], &[0.2, 0.0]]);
        assert!(got.max_abs_diff(&want) <= 1e-6);
        assert!((got.inf_norm() - 0.2).abs() <= 1e-6);
    }

    #[test]
    fn rescale_equalizes_row_sums_to_pf_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..20 {
            let n = 2 + (rng.random::<u32>() % 4) as usize;
            // strictly positive magnitudes keep |W| irreducible
            let w = random_matrix(&mut rng, n, n, 0.1, 1.0);
            let signs = random_matrix(&mut rng, n, n, -1.0, 1.0).map(f64::signum);
            let w = w.hadamard(&signs);
            let (lambda, _) = pf_eigen(&w.abs(), 1e-12, PF_MAX_ITER).unwrap();
            let (rescaled, _) = rescale_weights(&w).unwrap();
            assert!(
                (rescaled.inf_norm() - lambda).abs() <= 1e-6,
                "inf_norm {} vs lambda {lambda}",
                rescaled.inf_norm()
            );
            // every absolute row sum is balanced at lambda
            for r in 0..n {
                let sum: f64 = rescaled.row(r).iter().map(|x| x.abs()).sum();
                assert!((sum - lambda).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn rescale_reducible_matrix_uses_regularization() {
        let w = DenseMatrix::from_rows(&[&[0.5, 0.3], &[0.0, 0.2]]);
        let (rescaled, v) = rescale_weights(&w).unwrap();
        assert!(v.iter().all(|&x| x > 0.0));
        assert!((rescaled.inf_norm() - 0.5).abs() <= 1e-4);
    }
}
