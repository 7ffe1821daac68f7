//! Small dense factorizations: one-sided Jacobi SVD and Gauss–Jordan inverse.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative threshold under which a singular value counts as zero.
pub const RANK_TOL: f64 = 1e-9;

/// Column pairs are treated as orthogonal once |⟨a,b⟩| ≤ tol·‖a‖‖b‖.
const JACOBI_TOL: f64 = 1e-12;

/// Pivots below this multiple of ‖W‖_∞ make a matrix singular.
pub const PIVOT_TOL: f64 = 1e-12;

/// Thin SVD `W = U · diag(sigma) · Vᵀ` with `k = min(m, n)` components.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Tensor,
    pub sigma: Vec<f64>,
    pub v: Tensor,
}

impl SvdResult {
    /// Rebuilds `U[:, :r] · diag(σ[:r]) · V[:, :r]ᵀ`.
    pub fn truncated(&self, r: usize) -> Tensor {
        let (m, n) = (self.u.rows(), self.v.rows());
        let r = r.min(self.sigma.len());
        let mut out = Tensor::zeros(&[m, n]);
        for c in 0..r {
            let s = self.sigma[c];
            if s == 0.0 {
                continue;
            }
            for i in 0..m {
                let ui = s * self.u.at(i, c);
                if ui == 0.0 {
                    continue;
                }
                for j in 0..n {
                    *out.at_mut(i, j) += ui * self.v.at(j, c);
                }
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Tensor {
        self.truncated(self.sigma.len())
    }

    /// Sum of components `start..end` (zero-based, clamped).
    pub fn band(&self, start: usize, end: usize) -> Tensor {
        let full = self.truncated(end);
        if start == 0 {
            return full;
        }
        full.sub(&self.truncated(start)).expect("same shape")
    }

    /// σ_{i} with the one-based convention that σ beyond the rank is 0.
    pub fn sigma_1based(&self, i: usize) -> f64 {
        if i == 0 {
            return f64::INFINITY;
        }
        self.sigma.get(i - 1).copied().unwrap_or(0.0)
    }

    pub fn rank(&self) -> usize {
        let top = self.sigma.first().copied().unwrap_or(0.0);
        if top == 0.0 {
            return 0;
        }
        self.sigma.iter().filter(|&&s| s > RANK_TOL * top).count()
    }
}

pub fn svd(w: &Tensor) -> Result<SvdResult> {
    if !w.is_matrix() {
        return Err(Error::ShapeMismatch(format!(
            "svd needs a matrix, got {:?}",
            w.shape()
        )));
    }
    if let Some(i) = w.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let mut out = if w.rows() >= w.cols() {
        jacobi_tall(w)?
    } else {
        let t = jacobi_tall(&w.transpose())?;
        SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        }
    };
    fix_signs(&mut out);
    Ok(out)
}

/// Flips component pairs so the largest-magnitude entry of each u column is
/// positive (first index wins ties).
fn fix_signs(s: &mut SvdResult) {
    for c in 0..s.u.cols() {
        let mut best = 0;
        for i in 0..s.u.rows() {
            if s.u.at(i, c).abs() > s.u.at(best, c).abs() {
                best = i;
            }
        }
        if s.u.at(best, c) < 0.0 {
            for i in 0..s.u.rows() {
                *s.u.at_mut(i, c) *= -1.0;
            }
            for i in 0..s.v.rows() {
                *s.v.at_mut(i, c) *= -1.0;
            }
        }
    }
}

/// One-sided (Hestenes) Jacobi on a matrix with at least as many rows as columns.
fn jacobi_tall(w: &Tensor) -> Result<SvdResult> {
    let (m, n) = (w.rows(), w.cols());
    // Work column-major: cols[j] is column j.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| w.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    // Columns this small are rounding noise; rotating them never settles.
    let noise = {
        let f = f64::EPSILON * w.frobenius_norm();
        f * f
    };
    let max_sweeps = 100 * n.max(1);
    let mut converged = false;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = gram(&cols[p], &cols[q]);
                if gamma == 0.0
                    || alpha.min(beta) <= noise
                    || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence(max_sweeps));
    }

    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut vsorted: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        vsorted.push(vcols[j].clone());
        if s > 0.0 {
            ucols.push(cols[j].iter().map(|x| x / s).collect());
        } else {
            ucols.push(vec![0.0; m]);
            missing.push(slot);
        }
    }
    for slot in missing {
        ucols[slot] = complete_basis(&ucols, slot, m);
    }

    Ok(SvdResult {
        u: from_columns(&ucols, m),
        sigma,
        v: from_columns(&vsorted, n),
    })
}

fn gram(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        aa += x * x;
        bb += y * y;
        ab += x * y;
    }
    (aa, bb, ab)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// A unit vector orthogonal to every non-zero column in `cols` except `slot`.
fn complete_basis(cols: &[Vec<f64>], slot: usize, m: usize) -> Vec<f64> {
    let mut best = vec![0.0; m];
    let mut best_norm = -1.0;
    for k in 0..m {
        let mut e = vec![0.0; m];
        e[k] = 1.0;
        for _ in 0..2 {
            for (idx, c) in cols.iter().enumerate() {
                if idx == slot || c.iter().all(|x| *x == 0.0) {
                    continue;
                }
                let d: f64 = c.iter().zip(&e).map(|(a, b)| a * b).sum();
                for (x, y) in e.iter_mut().zip(c) {
                    *x -= d * y;
                }
            }
        }
        let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > best_norm + 1e-12 {
            best_norm = norm;
            best = e.iter().map(|x| x / norm).collect();
        }
    }
    best
}

fn from_columns(cols: &[Vec<f64>], rows: usize) -> Tensor {
    let n = cols.len();
    let mut t = Tensor::zeros(&[rows, n]);
    for (j, c) in cols.iter().enumerate() {
        t.set_column(j, c);
    }
    t
}

/// Gauss–Jordan inverse with partial pivoting.
pub fn inverse(w: &Tensor) -> Result<Tensor> {
    if !w.is_matrix() || w.rows() != w.cols() {
        return Err(Error::ShapeMismatch(format!(
            "inverse needs a square matrix, got {:?}",
            w.shape()
        )));
    }
    let n = w.rows();
    let threshold = PIVOT_TOL * w.matrix_inf_norm();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| w.row(i).to_vec()).collect();
    let mut inv: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        let pivot = a[piv][col];
        if pivot.abs() <= threshold || pivot == 0.0 {
            return Err(Error::Singular {
                pivot: pivot.abs(),
                threshold,
            });
        }
        a.swap(col, piv);
        inv.swap(col, piv);
        let scale = 1.0 / a[col][col];
        for j in 0..n {
            a[col][j] *= scale;
            inv[col][j] *= scale;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r][col];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                a[r][j] -= f * a[col][j];
                inv[r][j] -= f * inv[col][j];
            }
        }
    }
    Tensor::from_rows(&inv)
}

pub fn is_singular(w: &Tensor) -> bool {
    matches!(inverse(w), Err(Error::Singular { .. }))
}

/// Largest singular value.
pub fn spectral_norm(w: &Tensor) -> Result<f64> {
    Ok(svd(w)?.sigma.first().copied().unwrap_or(0.0))
}

/// Count of singular values above `RANK_TOL · σ₁`.
pub fn numerical_rank(w: &Tensor) -> Result<usize> {
    Ok(svd(w)?.rank())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn assert_orthonormal_columns(t: &Tensor) {
        let g = t.t_matmul(t).unwrap();
        assert!(g.max_abs_diff(&Tensor::eye(t.cols())).unwrap() < 1e-10);
    }

    #[test]
    fn diagonal_singular_values() {
        let s = svd(&Tensor::diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(s.sigma, vec![3.0, 2.0, 1.0]);
        let s = svd(&Tensor::diag(&[1.0, -5.0, 2.0])).unwrap();
        assert_eq!(s.sigma, vec![5.0, 2.0, 1.0]);
    }

    #[test]
    fn zero_matrix_has_zero_spectrum_and_orthonormal_factors() {
        let s = svd(&Tensor::zeros(&[3, 2])).unwrap();
        assert_eq!(s.sigma, vec![0.0, 0.0]);
        assert_orthonormal_columns(&s.u);
        assert_orthonormal_columns(&s.v);
        assert_eq!(s.rank(), 0);
    }

    #[test]
    fn reconstruction_and_sign_convention() {
        let mut rng = Rng::new(3);
        for (m, n) in [(5, 3), (3, 5), (4, 4), (1, 6), (8, 8)] {
            let w = rng.normal_tensor(&[m, n], 1.0);
            let s = svd(&w).unwrap();
            let err = s.reconstruct().sub(&w).unwrap().frobenius_norm();
            assert!(err <= 1e-9 * w.frobenius_norm().max(1.0), "{m}x{n}: {err}");
            assert!(s.sigma.windows(2).all(|p| p[0] >= p[1]));
            assert_orthonormal_columns(&s.u);
            assert_orthonormal_columns(&s.v);
            for j in 0..s.u.cols() {
                let col = s.u.column(j);
                let mut best = 0;
                for i in 0..col.len() {
                    if col[i].abs() > col[best].abs() {
                        best = i;
                    }
                }
                assert!(col[best] > 0.0);
            }
        }
    }

    #[test]
    fn rank_deficient_input() {
        let w = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let s = svd(&w).unwrap();
        assert!((s.sigma[0] - 2.0).abs() < 1e-14);
        assert!(s.sigma[1].abs() < 1e-14);
        assert_eq!(s.rank(), 1);
        assert_orthonormal_columns(&s.u);
    }

    #[test]
    fn inverse_cases() {
        assert_eq!(inverse(&Tensor::eye(3)).unwrap(), Tensor::eye(3));
        let inv = inverse(&Tensor::diag(&[2.0, 4.0])).unwrap();
        assert_eq!(inv, Tensor::diag(&[0.5, 0.25]));
        let ones = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(inverse(&ones), Err(Error::Singular { .. })));
        assert!(is_singular(&Tensor::zeros(&[2, 2])));
        assert!(inverse(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn inverse_residual_on_random_matrices() {
        let mut rng = Rng::new(11);
        for n in 1..=8 {
            let w = rng.normal_tensor(&[n, n], 1.0);
            let inv = inverse(&w).unwrap();
            let resid = w.matmul(&inv).unwrap().max_abs_diff(&Tensor::eye(n)).unwrap();
            let cond = w.matrix_inf_norm() * inv.matrix_inf_norm();
            assert!(resid <= 1e-8 * cond.max(1.0), "n={n} resid={resid}");
        }
    }
}
