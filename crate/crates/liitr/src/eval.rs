//! Evaluation: coefficient bias tables, proportion of optimally treated
//! subjects, local fidelity, propensity estimation, and the
//! inverse-probability-weighted value function.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::Explanation;
use crate::numkit::{mean, sample_sd, solve_spd_ridge, Matrix};
use crate::simgen::{Dataset, GroundTruth};

/// Probability clipping bounds for inverse-probability weights.
pub const PROPENSITY_CLIP: (f64, f64) = (0.01, 0.99);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefGroup {
    Main,
    Treatment,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefficientBias {
    pub name: String,
    pub group: CoefGroup,
    /// Mean of |estimate − truth| across subjects.
    pub mean_abs_bias: f64,
    /// Sample standard deviation of the signed biases across subjects.
    pub sd_bias: f64,
    pub n_subjects: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasReport {
    pub coefficients: Vec<CoefficientBias>,
    /// Subjects skipped for missing coefficient vectors.
    pub skipped: usize,
}

impl BiasReport {
    pub fn group_mean_abs(&self, group: CoefGroup) -> f64 {
        let vals: Vec<f64> = self
            .coefficients
            .iter()
            .filter(|c| c.group == group)
            .map(|c| c.mean_abs_bias)
            .collect();
        mean(&vals)
    }

    pub fn coefficient(&self, name: &str) -> Option<&CoefficientBias> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

/// Per-coefficient bias of explanation coefficients against each subject's
/// true region coefficients. A subject's biases are
/// `estimate − truth[region(subject)]`; the table reports the mean
/// absolute bias and the standard deviation of the signed biases.
///
/// The feature specs locate the raw-covariate coefficients inside the
/// explanation vectors: main-effect comparisons use the covariates listed
/// in `h0` (extra prognostic terms such as intercept or quadratics have no
/// ground-truth counterpart and are not tabulated); treatment comparisons
/// expect `h1` to follow the `(1, X1, X2)` layout of the ground truth.
pub fn bias_table(
    explanations: &[Explanation],
    truth: &GroundTruth,
    h0: &crate::moe::FeatureSpec,
    h1: &crate::moe::FeatureSpec,
) -> Result<BiasReport> {
    if !h1.intercept || h1.indices.iter().any(|i| *i > 1) || h1.quadratic {
        return Err(Error::Usage(
            "bias_table expects the (1, X1, X2) treatment design".into(),
        ));
    }
    let n_main = h0.indices.len();
    let n_treat = 1 + h1.indices.len();
    let mut main_biases: Vec<Vec<f64>> = vec![Vec::new(); n_main];
    let mut treat_biases: Vec<Vec<f64>> = vec![Vec::new(); n_treat];
    let mut skipped = 0usize;

    for e in explanations {
        let (Some(b1), Some(b2)) = (&e.beta_k1, &e.beta_k2) else {
            skipped += 1;
            continue;
        };
        if b1.len() != h0.len() || b2.len() != h1.len() {
            skipped += 1;
            continue;
        }
        if e.subject_id >= truth.region.len() {
            return Err(Error::Usage(format!(
                "subject {} has no ground-truth region",
                e.subject_id
            )));
        }
        let k = truth.region[e.subject_id] as usize;
        for (a, &idx) in h0.indices.iter().enumerate() {
            let est = b1[h0.raw_offset() + a];
            main_biases[a].push(est - truth.beta1[idx]);
        }
        treat_biases[0].push(b2[0] - truth.beta_k2[k][0]);
        for (a, &idx) in h1.indices.iter().enumerate() {
            let est = b2[h1.raw_offset() + a];
            treat_biases[1 + a].push(est - truth.beta_k2[k][1 + idx]);
        }
    }

    let mut coefficients = Vec::new();
    for (a, biases) in main_biases.iter().enumerate() {
        coefficients.push(CoefficientBias {
            name: format!("x{}", h0.indices[a] + 1),
            group: CoefGroup::Main,
            mean_abs_bias: mean(&biases.iter().map(|b| b.abs()).collect::<Vec<_>>()),
            sd_bias: sample_sd(biases),
            n_subjects: biases.len(),
        });
    }
    for (a, biases) in treat_biases.iter().enumerate() {
        let name = if a == 0 {
            "t_1".to_string()
        } else {
            format!("t_x{}", h1.indices[a - 1] + 1)
        };
        coefficients.push(CoefficientBias {
            name,
            group: CoefGroup::Treatment,
            mean_abs_bias: mean(&biases.iter().map(|b| b.abs()).collect::<Vec<_>>()),
            sd_bias: sample_sd(biases),
            n_subjects: biases.len(),
        });
    }
    Ok(BiasReport {
        coefficients,
        skipped,
    })
}

/// Proportion of recommendations matching the oracle optimal treatments.
pub fn pcot(recommendations: &[u8], optimal: &[u8]) -> Result<f64> {
    if recommendations.len() != optimal.len() {
        return Err(Error::Shape {
            context: "pcot",
            expected: optimal.len(),
            actual: recommendations.len(),
        });
    }
    if recommendations.is_empty() {
        return Err(Error::Usage("pcot of empty recommendation list".into()));
    }
    let matches = recommendations
        .iter()
        .zip(optimal)
        .filter(|(r, o)| r == o)
        .count();
    Ok(matches as f64 / recommendations.len() as f64)
}

/// Logistic regression propensity model `P(T=1 | X)` with clipped fitted
/// probabilities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropensityModel {
    /// Intercept followed by one coefficient per covariate.
    pub coefficients: Vec<f64>,
    pub converged: bool,
}

impl PropensityModel {
    /// Clipped probability for a covariate row.
    pub fn predict(&self, x_row: &[f64]) -> f64 {
        let z = self.coefficients[0]
            + self.coefficients[1..]
                .iter()
                .zip(x_row)
                .map(|(c, x)| c * x)
                .sum::<f64>();
        crate::simgen::expit(z).clamp(PROPENSITY_CLIP.0, PROPENSITY_CLIP.1)
    }
}

/// Fit the propensity model by iteratively reweighted least squares with a
/// small ridge. Perfectly separable data stops at the iteration cap with
/// `converged = false`; clipping keeps downstream weights finite.
pub fn fit_propensity(data: &Dataset) -> Result<PropensityModel> {
    let n = data.n();
    let p = data.p();
    let n1 = data.t.iter().filter(|t| **t == 1).count();
    if n1 == 0 || n1 == n {
        return Err(Error::Data(
            "propensity fit needs both treatment arms present".into(),
        ));
    }

    let mut beta = vec![0.0; p + 1];
    let mut converged = false;
    for _ in 0..50 {
        // Gradient Xᵀ(t − p̂) and Hessian XᵀWX with W = p̂(1−p̂).
        let mut grad = vec![0.0; p + 1];
        let mut hess = Matrix::zeros(p + 1, p + 1);
        for i in 0..n {
            let x = data.x.row(i);
            let z = beta[0]
                + beta[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
            let prob = crate::simgen::expit(z);
            let w = (prob * (1.0 - prob)).max(1e-10);
            let resid = data.t[i] as f64 - prob;
            let mut row_feat = Vec::with_capacity(p + 1);
            row_feat.push(1.0);
            row_feat.extend_from_slice(x);
            for a in 0..=p {
                grad[a] += row_feat[a] * resid;
                for b in a..=p {
                    hess.set(a, b, hess.get(a, b) + w * row_feat[a] * row_feat[b]);
                }
            }
        }
        for a in 0..=p {
            for b in 0..a {
                hess.set(a, b, hess.get(b, a));
            }
        }
        let step = solve_spd_ridge(&hess, &grad, 1e-10)?;
        let mut max_step = 0.0f64;
        for (b, s) in beta.iter_mut().zip(&step.solution) {
            *b += s;
            max_step = max_step.max(s.abs());
        }
        if !beta.iter().all(|b| b.is_finite()) {
            return Err(Error::Training("propensity coefficients diverged".into()));
        }
        if max_step < 1e-8 {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("propensity IRLS hit the iteration cap (possible separation)");
    }
    Ok(PropensityModel {
        coefficients: beta,
        converged,
    })
}

/// Inverse-probability-weighted policy value:
/// `V = (1/n)·Σ 𝟙(T_i = d̂_i)·Y_i / (ê(X_i)·T_i + (1−ê(X_i))·(1−T_i))`.
pub fn value_function(
    data: &Dataset,
    recommendations: &[u8],
    propensity: &PropensityModel,
) -> Result<f64> {
    if recommendations.len() != data.n() {
        return Err(Error::Shape {
            context: "value_function",
            expected: data.n(),
            actual: recommendations.len(),
        });
    }
    let mut total = 0.0;
    for i in 0..data.n() {
        if data.t[i] == recommendations[i] {
            let e = propensity.predict(data.x.row(i));
            let denom = if data.t[i] == 1 { e } else { 1.0 - e };
            total += data.y[i] / denom;
        }
    }
    Ok(total / data.n() as f64)
}

/// Fidelity of surrogate predictions against black-box predictions over a
/// neighborhood.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fidelity {
    /// `1 − SS_res/SS_tot`; undefined (`None`) with fewer than 10 rows or a
    /// constant target.
    pub r2: Option<f64>,
    /// Mean |surrogate − black-box| in outcome units.
    pub mean_abs_diff: Option<f64>,
    pub n_rows: usize,
}

pub fn local_fidelity(surrogate_pred: &[f64], y_hat: &[f64]) -> Fidelity {
    let n = surrogate_pred.len().min(y_hat.len());
    if n == 0 {
        return Fidelity {
            r2: None,
            mean_abs_diff: None,
            n_rows: 0,
        };
    }
    let mad = surrogate_pred
        .iter()
        .zip(y_hat)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n as f64;
    if n < 10 {
        return Fidelity {
            r2: None,
            mean_abs_diff: Some(mad),
            n_rows: n,
        };
    }
    let target_mean = mean(&y_hat[..n]);
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (a, b) in surrogate_pred.iter().zip(y_hat) {
        ss_res += (a - b) * (a - b);
        ss_tot += (b - target_mean) * (b - target_mean);
    }
    let r2 = if ss_tot > 0.0 {
        Some(1.0 - ss_res / ss_tot)
    } else {
        None
    };
    Fidelity {
        r2,
        mean_abs_diff: Some(mad),
        n_rows: n,
    }
}
