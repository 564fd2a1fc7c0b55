//! Synthetic benchmark generator with known region-wise ground truth.
//!
//! Four covariates are driven by a single latent angle: a subject's latent
//! `Z ~ U(0, 20)` sets sinusoidal means for `X1..X4`, which then get
//! lognormal or normal observation noise. Treatment is confounded through
//! `X3`/`X4`, and the outcome adds a region-specific treatment effect where
//! regions are the four cells of the median splits of `X1` and `X2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Matrix, Rng};

/// Main-effect coefficients over `H0 = (X1, X2, X3, X4)`, constant across
/// regions.
pub const BETA1: [f64; 4] = [2.25, 1.65, 1.55, 1.25];

/// Default treatment-effect surface: a continuous piecewise-linear hinge
/// with knots at the medians of `X1` and `X2`. Each median cell gets its
/// own slopes, so the per-region coefficient vectors over `H1 = (1, X1,
/// X2)` differ and the optimal treatment flips sign across regions, while
/// the surface stays continuous at the region boundaries (a jump there
/// would not be learnable by a smooth outcome model at realistic sample
/// sizes).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HingeEffect {
    /// Effect level at the median point `(x1_med, x2_med)`.
    pub level: f64,
    /// Slope in `x1` above / below its median.
    pub x1_up: f64,
    pub x1_down: f64,
    /// Slope in `x2` above / below its median.
    pub x2_up: f64,
    pub x2_down: f64,
}

pub const DEFAULT_HINGE: HingeEffect = HingeEffect {
    level: 0.4,
    x1_up: 0.9,
    x1_down: -1.2,
    x2_up: -0.8,
    x2_down: 0.9,
};

impl HingeEffect {
    /// Per-region `(β_{1k2}, β_{2k2}, β_{3k2})` vectors implied by the
    /// hinge slopes and the median knots. Region index:
    /// 0 = (X1>med, X2>med), 1 = (X1≤med, X2>med), 2 = (X1>med, X2≤med),
    /// 3 = (X1≤med, X2≤med).
    pub fn region_coefficients(&self, x1_med: f64, x2_med: f64) -> [[f64; 3]; 4] {
        let mut out = [[0.0; 3]; 4];
        for (k, row) in out.iter_mut().enumerate() {
            let b1 = if k % 2 == 0 { self.x1_up } else { self.x1_down };
            let b2 = if k < 2 { self.x2_up } else { self.x2_down };
            *row = [self.level - b1 * x1_med - b2 * x2_med, b1, b2];
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub seed: u64,
    /// Standard deviation of the additive outcome noise.
    pub noise_sd: f64,
    /// Adds `quad_coef · X1² · T` to the treatment head.
    pub misspecified: bool,
    pub quad_coef: f64,
    /// Region treatment-effect coefficients; `None` uses the defaults.
    #[serde(default)]
    pub beta_k2: Option<[[f64; 3]; 4]>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 2_000,
            seed: 0,
            noise_sd: 1.0,
            misspecified: false,
            quad_coef: 0.35,
            beta_k2: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 8 {
            return Err(Error::Config(format!("n must be ≥ 8, got {}", self.n)));
        }
        if !(self.noise_sd > 0.0) {
            return Err(Error::Config(format!(
                "noise_sd must be > 0, got {}",
                self.noise_sd
            )));
        }
        Ok(())
    }
}

/// Rows of covariates, treatment, and outcome. The full model input for a
/// row is `d = (t, x1..xp)`, treatment first.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Matrix,
    pub t: Vec<u8>,
    pub y: Vec<f64>,
    pub column_names: Vec<String>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.t.len() != self.n() || self.y.len() != self.n() {
            return Err(Error::Data("column length mismatch".into()));
        }
        if self.t.iter().any(|t| *t > 1) {
            return Err(Error::Data("treatment must be 0/1".into()));
        }
        if self.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite outcome".into()));
        }
        Ok(())
    }

    /// Model input row `(t, x...)` for a given row index.
    pub fn d_row(&self, i: usize) -> Vec<f64> {
        let mut d = Vec::with_capacity(self.p() + 1);
        d.push(self.t[i] as f64);
        d.extend_from_slice(self.x.row(i));
        d
    }

    /// Copy of rows `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Dataset> {
        if end > self.n() || start > end {
            return Err(Error::Usage(format!(
                "slice {start}..{end} out of bounds for {} rows",
                self.n()
            )));
        }
        let rows: Vec<Vec<f64>> = (start..end).map(|i| self.x.row(i).to_vec()).collect();
        Ok(Dataset {
            x: Matrix::from_rows(&rows)?,
            t: self.t[start..end].to_vec(),
            y: self.y[start..end].to_vec(),
            column_names: self.column_names.clone(),
        })
    }
}

/// Everything the generator knows that an estimator should not see.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub beta1: [f64; 4],
    pub beta_k2: [[f64; 3]; 4],
    /// Region index (0..4) per row.
    pub region: Vec<u8>,
    /// Optimal treatment per row under the generating model (including the
    /// quadratic term when the misspecified variant is on).
    pub optimal_t: Vec<u8>,
    pub x1_med: f64,
    pub x2_med: f64,
    pub misspecified: bool,
    pub quad_coef: f64,
}

impl GroundTruth {
    /// Region of an arbitrary covariate row under this truth's medians.
    pub fn region_of(&self, x_row: &[f64]) -> u8 {
        region_index(x_row[0], x_row[1], self.x1_med, self.x2_med)
    }

    /// True treatment effect `β_{k2}ᵀ(1, X1, X2) [+ quad]` for a row.
    pub fn treatment_effect(&self, x_row: &[f64]) -> f64 {
        let k = self.region_of(x_row) as usize;
        let b = &self.beta_k2[k];
        let mut eff = b[0] + b[1] * x_row[0] + b[2] * x_row[1];
        if self.misspecified {
            eff += self.quad_coef * x_row[0] * x_row[0];
        }
        eff
    }
}

fn region_index(x1: f64, x2: f64, m1: f64, m2: f64) -> u8 {
    match (x1 > m1, x2 > m2) {
        (true, true) => 0,
        (false, true) => 1,
        (true, false) => 2,
        (false, false) => 3,
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Treatment assignment probability given `X3`, `X4`.
pub fn treatment_probability(x3: f64, x4: f64) -> f64 {
    expit(-0.65 * x3 + 0.15 * x4)
}

/// Noise-free outcome for a covariate row, treatment, and coefficient set.
/// Exposed so tests can hand-check generated outcomes.
pub fn mean_outcome(
    x_row: &[f64],
    t: u8,
    beta1: &[f64; 4],
    beta_k2_row: &[f64; 3],
    quad: f64,
) -> f64 {
    let main: f64 = beta1.iter().zip(x_row).map(|(b, x)| b * x).sum();
    let eff = beta_k2_row[0]
        + beta_k2_row[1] * x_row[0]
        + beta_k2_row[2] * x_row[1]
        + quad * x_row[0] * x_row[0];
    main + eff * t as f64
}

/// Generate a dataset and its ground truth. Medians, regions, and optimal
/// treatments are computed once over the full generated sample, so row
/// order never affects labels.
pub fn generate(config: &SimConfig) -> Result<(Dataset, GroundTruth)> {
    config.validate()?;
    let mut rng = Rng::new(config.seed).child("sim");
    let n = config.n;

    let mut rows = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    for _ in 0..n {
        let z = rng.uniform_in(0.0, 20.0);
        let x1 = rng.normal_with(1.50 * z.sin(), 0.05).exp();
        let x2 = rng.normal_with(1.25 * z.cos(), 0.55);
        let x3 = rng.normal_with(1.65 * z.sin(), 0.65);
        let x4 = rng.normal_with(1.25 * z.cos(), 0.05).exp();
        t.push(rng.bernoulli(treatment_probability(x3, x4)));
        rows.push(vec![x1, x2, x3, x4]);
    }

    let x1_med = median(&rows.iter().map(|r| r[0]).collect::<Vec<_>>());
    let x2_med = median(&rows.iter().map(|r| r[1]).collect::<Vec<_>>());
    let beta_k2 = config
        .beta_k2
        .unwrap_or_else(|| DEFAULT_HINGE.region_coefficients(x1_med, x2_med));

    let quad = if config.misspecified { config.quad_coef } else { 0.0 };
    let mut region = Vec::with_capacity(n);
    let mut optimal_t = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for (i, row) in rows.iter().enumerate() {
        let k = region_index(row[0], row[1], x1_med, x2_med);
        region.push(k);
        let b = &beta_k2[k as usize];
        let eff = b[0] + b[1] * row[0] + b[2] * row[1] + quad * row[0] * row[0];
        optimal_t.push(u8::from(eff > 0.0));
        let mean = mean_outcome(row, t[i], &BETA1, b, quad);
        y.push(mean + rng.normal_with(0.0, config.noise_sd));
    }

    let dataset = Dataset {
        x: Matrix::from_rows(&rows)?,
        t,
        y,
        column_names: vec!["x1".into(), "x2".into(), "x3".into(), "x4".into()],
    };
    dataset.validate()?;
    let truth = GroundTruth {
        beta1: BETA1,
        beta_k2,
        region,
        optimal_t,
        x1_med,
        x2_med,
        misspecified: config.misspecified,
        quad_coef: quad,
    };
    Ok((dataset, truth))
}

/// Optimal treatment for a covariate row under the generating model:
/// 1 iff the true treatment effect is positive, 0 on an exact tie.
pub fn oracle_optimal_treatment(x_row: &[f64], truth: &GroundTruth) -> u8 {
    u8::from(truth.treatment_effect(x_row) > 0.0)
}
