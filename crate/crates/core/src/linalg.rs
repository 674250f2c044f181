//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};

/// Operator 2-norm by power iteration on `MᵀM`.
pub fn operator_norm(mat: &DMatrix<f64>) -> f64 {
    if mat.nrows() == 0 || mat.ncols() == 0 {
        return 0.0;
    }
    let n = mat.ncols();
    // Deterministic start with no exact symmetry, so it is unlikely to be
    // orthogonal to the top singular vector.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.01 * ((i % 7) as f64));
    v /= v.norm();
    let mut sigma2 = 0.0;
    for _ in 0..1000 {
        let w = mat.tr_mul(&(mat * &v));
        let nw = w.norm();
        if nw == 0.0 {
            return 0.0;
        }
        let next = nw;
        v = w / nw;
        if (next - sigma2).abs() <= 1e-13 * next {
            sigma2 = next;
            break;
        }
        sigma2 = next;
    }
    sigma2.sqrt()
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn symmetric_extremes(mat: &DMatrix<f64>) -> (f64, f64) {
    if mat.nrows() == 0 {
        return (0.0, 0.0);
    }
    let eig = mat.clone().symmetric_eigenvalues();
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn symmetric_spectral_norm(mat: &DMatrix<f64>) -> f64 {
    let (lo, hi) = symmetric_extremes(mat);
    lo.abs().max(hi.abs())
}

/// Numerical rank from singular values, relative to the largest one.
pub fn numerical_rank(mat: &DMatrix<f64>, rel_tol: f64) -> usize {
    if mat.nrows() == 0 || mat.ncols() == 0 {
        return 0;
    }
    let sv = mat.clone().singular_values();
    let top = sv.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}

/// Nonnegative least squares `min ‖G λ − r‖ s.t. λ ≥ 0` (Lawson–Hanson).
pub fn nnls(g: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
    let k = g.ncols();
    let mut lambda = DVector::zeros(k);
    if k == 0 {
        return lambda;
    }
    let mut passive = vec![false; k];
    let tol = 1e-12 * (1.0 + g.norm() * r.norm());
    for _outer in 0..(3 * k + 10) {
        let w = g.tr_mul(&(r - g * &lambda));
        let candidate = (0..k)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]));
        let Some(j) = candidate else { break };
        passive[j] = true;
        loop {
            let idx: Vec<usize> = (0..k).filter(|&j| passive[j]).collect();
            let sub = g.select_columns(idx.iter());
            let z_sub = match sub.clone().svd(true, true).solve(r, 1e-14) {
                Ok(z) => z,
                Err(_) => break,
            };
            if z_sub.iter().all(|&z| z > 0.0) {
                for (pos, &j) in idx.iter().enumerate() {
                    lambda[j] = z_sub[pos];
                }
                break;
            }
            // Step toward z until a passive coordinate hits zero.
            let mut step = 1.0f64;
            for (pos, &j) in idx.iter().enumerate() {
                if z_sub[pos] <= 0.0 {
                    let denom = lambda[j] - z_sub[pos];
                    if denom > 0.0 {
                        step = step.min(lambda[j] / denom);
                    }
                }
            }
            for (pos, &j) in idx.iter().enumerate() {
                lambda[j] += step * (z_sub[pos] - lambda[j]);
                if lambda[j] <= 1e-15 {
                    lambda[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
    }
    lambda
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn operator_norm_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -3.0, 2.0]));
        assert_relative_eq!(operator_norm(&m), 3.0, epsilon = 1e-9);
    }

    #[test]
    fn operator_norm_of_stacked_identity() {
        let mut b = DMatrix::zeros(4, 2);
        b[(0, 0)] = -1.0;
        b[(1, 1)] = -1.0;
        b[(2, 0)] = 1.0;
        b[(3, 1)] = 1.0;
        assert_relative_eq!(operator_norm(&b), 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn nnls_clamps_negative_coordinates() {
        let g = DMatrix::identity(2, 2);
        let r = DVector::from_vec(vec![2.0, -1.0]);
        let l = nnls(&g, &r);
        assert_relative_eq!(l[0], 2.0, epsilon = 1e-12);
        assert_eq!(l[1], 0.0);
    }

    #[test]
    fn nnls_matches_unconstrained_when_interior() {
        let g = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, 0.0, 1.0, 1.0, 1.0]);
        let truth = DVector::from_vec(vec![0.7, 1.3]);
        let r = &g * &truth;
        let l = nnls(&g, &r);
        assert_relative_eq!(l, truth, epsilon = 1e-10);
    }
}
