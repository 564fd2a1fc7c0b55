//! Per-column standardization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// Column-wise standardizer using the sample standard deviation
/// (denominator `n - 1`). Constant columns get their sd clamped to 1 and
/// are flagged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    /// Columns whose sd was clamped to 1 because they were constant.
    pub clamped: Vec<bool>,
    /// Denominator convention used for the sd.
    pub sd_convention: SdConvention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdConvention {
    /// `n - 1` denominator.
    Sample,
}

impl Standardizer {
    pub fn fit(m: &Matrix) -> Self {
        let n = m.rows() as f64;
        let mut means = Vec::with_capacity(m.cols());
        let mut sds = Vec::with_capacity(m.cols());
        let mut clamped = Vec::with_capacity(m.cols());
        for c in 0..m.cols() {
            let col = m.column(c);
            let mean = col.iter().sum::<f64>() / n;
            let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
            let sd = if m.rows() > 1 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
            if sd > 0.0 {
                sds.push(sd);
                clamped.push(false);
            } else {
                log::warn!("constant column {c}: sd clamped to 1");
                sds.push(1.0);
                clamped.push(true);
            }
            means.push(mean);
        }
        Self {
            means,
            sds,
            clamped,
            sd_convention: SdConvention::Sample,
        }
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn transform_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.dim() {
            return Err(Error::Shape {
                context: "Standardizer::transform_row",
                expected: self.dim(),
                actual: row.len(),
            });
        }
        Ok(row
            .iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn inverse_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.dim() {
            return Err(Error::Shape {
                context: "Standardizer::inverse_row",
                expected: self.dim(),
                actual: row.len(),
            });
        }
        Ok(row
            .iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(v, (m, s))| v * s + m)
            .collect())
    }

    pub fn transform(&self, m: &Matrix) -> Result<Matrix> {
        let rows: Result<Vec<Vec<f64>>> = (0..m.rows()).map(|r| self.transform_row(m.row(r))).collect();
        Matrix::from_rows(&rows?)
    }
}

/// Scalar standardizer for a single target column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalarScaler {
    pub mean: f64,
    pub sd: f64,
    pub clamped: bool,
}

impl ScalarScaler {
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        let sd = if values.len() > 1 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
        if sd > 0.0 {
            Self { mean, sd, clamped: false }
        } else {
            log::warn!("constant target: sd clamped to 1");
            Self { mean, sd: 1.0, clamped: true }
        }
    }

    pub fn transform(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }

    pub fn inverse(&self, v: f64) -> f64 {
        v * self.sd + self.mean
    }
}
