//! Small statistical helpers.

use crate::numkit::Matrix;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two
/// observations.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (xs.len() as f64 - 1.0)).sqrt()
}

/// Pearson correlation matrix of the columns of `m`. Constant columns get
/// zero correlation with everything and unit diagonal.
pub fn pearson_correlation(m: &Matrix) -> Matrix {
    let p = m.cols();
    let n = m.rows() as f64;
    let means: Vec<f64> = (0..p).map(|c| mean(&m.column(c))).collect();
    let mut cov = Matrix::zeros(p, p);
    for r in 0..m.rows() {
        let row = m.row(r);
        for a in 0..p {
            let da = row[a] - means[a];
            for b in a..p {
                cov.set(a, b, cov.get(a, b) + da * (row[b] - means[b]));
            }
        }
    }
    let mut corr = Matrix::zeros(p, p);
    for a in 0..p {
        corr.set(a, a, 1.0);
        let va = cov.get(a, a) / n;
        for b in a + 1..p {
            let vb = cov.get(b, b) / n;
            let c = if va > 0.0 && vb > 0.0 {
                (cov.get(a, b) / n) / (va.sqrt() * vb.sqrt())
            } else {
                0.0
            };
            corr.set(a, b, c);
            corr.set(b, a, c);
        }
    }
    corr
}

/// Largest absolute off-diagonal entry; 0 for 1×1 matrices.
pub fn max_abs_offdiagonal(m: &Matrix) -> f64 {
    let mut best = 0.0f64;
    for a in 0..m.rows() {
        for b in 0..m.cols() {
            if a != b {
                best = best.max(m.get(a, b).abs());
            }
        }
    }
    best
}
