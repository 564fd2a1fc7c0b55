//! Small dense solvers for least squares, logistic regression, and expert
//! initialization.

use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// Outcome of a stabilized solve.
#[derive(Debug, Clone)]
pub struct RidgeSolve {
    pub solution: Vec<f64>,
    /// True if the plain solve failed and a ridge penalty was applied.
    pub ridge_applied: bool,
    pub ridge: f64,
}

/// Solve `A x = b` for symmetric positive definite `A` via Cholesky.
pub fn solve_spd(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(Error::Shape {
            context: "solve_spd",
            expected: n,
            actual: b.len(),
        });
    }
    let chol = cholesky(a)?;
    Ok(chol_solve(&chol, b))
}

/// Solve `A x = b`, retrying with growing ridge `A + δI` if the plain
/// factorization fails. `scale` sets δ relative to the diagonal magnitude.
pub fn solve_spd_ridge(a: &Matrix, b: &[f64], base_ridge: f64) -> Result<RidgeSolve> {
    match solve_spd(a, b) {
        Ok(solution) => Ok(RidgeSolve {
            solution,
            ridge_applied: false,
            ridge: 0.0,
        }),
        Err(_) => {
            let n = a.rows();
            let diag_scale = (0..n)
                .map(|i| a.get(i, i).abs())
                .fold(0.0f64, f64::max)
                .max(1.0);
            let mut ridge = base_ridge * diag_scale;
            for _ in 0..12 {
                let mut aa = a.clone();
                for i in 0..n {
                    aa.set(i, i, aa.get(i, i) + ridge);
                }
                if let Ok(solution) = solve_spd(&aa, b) {
                    return Ok(RidgeSolve {
                        solution,
                        ridge_applied: true,
                        ridge,
                    });
                }
                ridge *= 10.0;
            }
            Err(Error::Linalg(
                "system unsolvable even with ridge stabilization".into(),
            ))
        }
    }
}

fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::Linalg(format!(
                        "matrix not positive definite at pivot {i}"
                    )));
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(l)
}

fn chol_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    // Forward: L y = b.
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l.get(i, k) * y[k];
        }
        y[i] = sum / l.get(i, i);
    }
    // Backward: Lᵀ x = y.
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l.get(k, i) * x[k];
        }
        x[i] = sum / l.get(i, i);
    }
    x
}

/// Weighted least squares via normal equations: minimizes
/// `Σ w_j (y_j − φ_jᵀ β)²`. Returns the stabilized solve result.
pub fn weighted_least_squares(
    design: &Matrix,
    targets: &[f64],
    weights: Option<&[f64]>,
    base_ridge: f64,
) -> Result<RidgeSolve> {
    let n = design.rows();
    let q = design.cols();
    if targets.len() != n {
        return Err(Error::Shape {
            context: "weighted_least_squares targets",
            expected: n,
            actual: targets.len(),
        });
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::Shape {
                context: "weighted_least_squares weights",
                expected: n,
                actual: w.len(),
            });
        }
    }
    let mut ata = Matrix::zeros(q, q);
    let mut atb = vec![0.0; q];
    for j in 0..n {
        let row = design.row(j);
        let w = weights.map_or(1.0, |w| w[j]);
        for a in 0..q {
            let wa = w * row[a];
            atb[a] += wa * targets[j];
            for b in a..q {
                let v = wa * row[b];
                ata.set(a, b, ata.get(a, b) + v);
            }
        }
    }
    // Mirror the upper triangle.
    for a in 0..q {
        for b in 0..a {
            ata.set(a, b, ata.get(b, a));
        }
    }
    solve_spd_ridge(&ata, &atb, base_ridge)
}
