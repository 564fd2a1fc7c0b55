//! Comparator methods: a LIME-style local surrogate and one-stage linear
//! Q-learning.
//!
//! The LIME explainer perturbs each standardized covariate independently
//! (deliberately ignoring correlations), weights samples by a Gaussian
//! kernel on standardized distance, and fits weighted least squares on
//! the same `(H0, T·H1)` design the mixture surrogate uses. Q-learning
//! fits one global least-squares rule on the observed data.

use serde::{Deserialize, Serialize};

use crate::blackbox::BlackboxModel;
use crate::error::{Error, Result};
use crate::eval::local_fidelity;
use crate::moe::{Explanation, FeatureSpec};
use crate::numkit::{weighted_least_squares, Matrix, Rng};
use crate::simgen::Dataset;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimeConfig {
    /// Number of perturbed samples.
    pub m: usize,
    /// Gaussian kernel width on standardized distance.
    pub kernel_width: f64,
    /// Per-feature perturbation scale in standardized units.
    pub perturb_sd: Vec<f64>,
}

impl LimeConfig {
    /// Conventional defaults for `p` covariates: unit perturbation scale
    /// and kernel width `0.75·√p`.
    pub fn default_for(p: usize) -> Self {
        Self {
            m: 20_000,
            kernel_width: 0.75 * (p as f64).sqrt(),
            perturb_sd: vec![1.0; p],
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if !(self.kernel_width > 0.0) {
            return Err(Error::Config("kernel_width must be > 0".into()));
        }
        if self.perturb_sd.len() != p || self.perturb_sd.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config(
                "perturb_sd needs one positive entry per covariate".into(),
            ));
        }
        if self.m < 10 {
            return Err(Error::Config("m must be ≥ 10".into()));
        }
        Ok(())
    }
}

/// Gaussian proximity weight `exp(−dist²/width²)`.
pub fn kernel_weight(dist_sq: f64, width: f64) -> f64 {
    (-dist_sq / (width * width)).exp()
}

/// The perturbed rows LIME generated for one subject, kept for fidelity
/// diagnostics and the plausibility guard.
pub struct LimeNeighborhood {
    /// m×(p+1) raw rows, treatment first.
    pub d_prime: Matrix,
    pub y_hat: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Fit a weighted local linear surrogate around one subject and derive its
/// treatment recommendation.
pub fn lime_explain(
    x_subject: &[f64],
    bb: &BlackboxModel,
    cfg: &LimeConfig,
    h0: &FeatureSpec,
    h1: &FeatureSpec,
    mut rng: Rng,
    subject_id: usize,
) -> Result<(Explanation, LimeNeighborhood)> {
    let p = bb.p();
    cfg.validate(p)?;
    if x_subject.len() != p {
        return Err(Error::Shape {
            context: "lime_explain",
            expected: p,
            actual: x_subject.len(),
        });
    }
    let scaler = bb.input_scaler();
    let x_std = scaler.transform_row(x_subject)?;

    let q0 = h0.len();
    let q1 = h1.len();
    let mut d_rows = Vec::with_capacity(cfg.m);
    let mut design_rows = Vec::with_capacity(cfg.m);
    let mut weights = Vec::with_capacity(cfg.m);
    let mut y_hat = Vec::with_capacity(cfg.m);
    for _ in 0..cfg.m {
        let mut dist_sq = 0.0;
        let mut xp_std = Vec::with_capacity(p);
        for (xs, sd) in x_std.iter().zip(&cfg.perturb_sd) {
            let delta = sd * rng.normal();
            dist_sq += delta * delta;
            xp_std.push(xs + delta);
        }
        let x_prime = scaler.inverse_row(&xp_std)?;
        let t_prime = rng.bernoulli(0.5) as f64;
        let mut d = Vec::with_capacity(p + 1);
        d.push(t_prime);
        d.extend_from_slice(&x_prime);
        y_hat.push(bb.predict(&d)?);
        weights.push(kernel_weight(dist_sq, cfg.kernel_width));

        let mut row = Vec::with_capacity(q0 + q1);
        row.extend(h0.eval(&x_prime));
        for h in h1.eval(&x_prime) {
            row.push(h * t_prime);
        }
        design_rows.push(row);
        d_rows.push(d);
    }
    let design = Matrix::from_rows(&design_rows)?;
    let solve = weighted_least_squares(&design, &y_hat, Some(&weights), 1e-6)?;
    if solve.ridge_applied {
        log::warn!(
            "lime subject {subject_id}: singular weighted design, ridge {:.1e} applied",
            solve.ridge
        );
    }
    let beta1 = solve.solution[..q0].to_vec();
    let beta2 = solve.solution[q0..].to_vec();

    let effect: f64 = beta2
        .iter()
        .zip(h1.eval(x_subject))
        .map(|(b, h)| b * h)
        .sum();

    // Fidelity over the surrogate's own neighborhood, unweighted.
    let preds: Vec<f64> = design_rows
        .iter()
        .map(|row| {
            row.iter()
                .zip(solve.solution.iter())
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    let fid = local_fidelity(&preds, &y_hat);

    let explanation = Explanation {
        subject_id,
        method: "lime".to_string(),
        selected_expert: None,
        beta_k1: Some(beta1),
        beta_k2: Some(beta2),
        recommended_t: u8::from(effect > 0.0),
        local_r2: fid.r2,
        gate_distribution: None,
        mean_abs_diff: fid.mean_abs_diff,
    };
    Ok((
        explanation,
        LimeNeighborhood {
            d_prime: Matrix::from_rows(&d_rows)?,
            y_hat,
            weights,
        },
    ))
}

/// One-stage linear Q-learning: a single global least-squares rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QLearningModel {
    /// Global intercept, then `H0` coefficients, then `T·H1` coefficients.
    pub coefficients: Vec<f64>,
    pub h0: FeatureSpec,
    pub h1: FeatureSpec,
    pub ridge_flagged: bool,
    pub train_r2: f64,
}

impl QLearningModel {
    pub fn beta2(&self) -> &[f64] {
        &self.coefficients[1 + self.h0.len()..]
    }

    pub fn beta1(&self) -> &[f64] {
        &self.coefficients[1..1 + self.h0.len()]
    }

    /// Global rule: treat iff the fitted treatment effect is positive.
    pub fn rule(&self, x_row: &[f64]) -> u8 {
        let effect: f64 = self
            .beta2()
            .iter()
            .zip(self.h1.eval(x_row))
            .map(|(b, h)| b * h)
            .sum();
        u8::from(effect > 0.0)
    }

    pub fn explanation(&self, subject_id: usize, x_row: &[f64]) -> Explanation {
        Explanation {
            subject_id,
            method: "qlearn".to_string(),
            selected_expert: None,
            beta_k1: Some(self.beta1().to_vec()),
            beta_k2: Some(self.beta2().to_vec()),
            recommended_t: self.rule(x_row),
            local_r2: None,
            gate_distribution: None,
            mean_abs_diff: None,
        }
    }
}

/// Least-squares fit of `Y` on `intercept + H0 + T·H1`.
pub fn q_learning_fit(data: &Dataset, h0: &FeatureSpec, h1: &FeatureSpec) -> Result<QLearningModel> {
    let n = data.n();
    let cols = 1 + h0.len() + h1.len();
    if n <= cols {
        return Err(Error::Data(format!(
            "need more rows ({n}) than design columns ({cols})"
        )));
    }
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let x = data.x.row(i);
        let t = data.t[i] as f64;
        let mut row = Vec::with_capacity(cols);
        row.push(1.0);
        row.extend(h0.eval(x));
        for h in h1.eval(x) {
            row.push(h * t);
        }
        rows.push(row);
    }
    let design = Matrix::from_rows(&rows)?;
    let solve = weighted_least_squares(&design, &data.y, None, 1e-8)?;
    if solve.ridge_applied {
        log::warn!("q-learning: rank-deficient design, ridge {:.1e} applied", solve.ridge);
    }

    let mean_y = crate::numkit::mean(&data.y);
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (i, row) in rows.iter().enumerate() {
        let pred: f64 = row.iter().zip(&solve.solution).map(|(a, b)| a * b).sum();
        ss_res += (data.y[i] - pred) * (data.y[i] - pred);
        ss_tot += (data.y[i] - mean_y) * (data.y[i] - mean_y);
    }
    Ok(QLearningModel {
        coefficients: solve.solution,
        h0: h0.clone(),
        h1: h1.clone(),
        ridge_flagged: solve.ridge_applied,
        train_r2: if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { f64::NAN },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{solve_spd, Activation, MlpModel, ScalarScaler, Standardizer};

    fn sim_specs() -> (FeatureSpec, FeatureSpec) {
        (
            FeatureSpec::new(vec![0, 1, 2, 3], false),
            FeatureSpec::new(vec![0, 1], true),
        )
    }

    #[test]
    fn kernel_weight_is_one_at_zero_distance() {
        assert_eq!(kernel_weight(0.0, 0.75), 1.0);
        assert!(kernel_weight(1.0, 0.75) < 1.0);
    }

    #[test]
    fn equal_weights_reduce_to_ordinary_least_squares() {
        let design = Matrix::from_rows(&[
            vec![1.0, 0.5],
            vec![1.0, -1.0],
            vec![1.0, 2.0],
            vec![1.0, 0.3],
        ])
        .unwrap();
        let y = vec![1.1, -0.4, 2.9, 0.8];
        let ols = weighted_least_squares(&design, &y, None, 1e-10).unwrap();
        let wls =
            weighted_least_squares(&design, &y, Some(&[0.7, 0.7, 0.7, 0.7]), 1e-10).unwrap();
        for (a, b) in ols.solution.iter().zip(&wls.solution) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    /// Black box that is exactly linear in `(t, x)` with no intercept:
    /// identity scalers and a single identity layer.
    fn linear_blackbox(coef_t: f64, coef_x: &[f64]) -> BlackboxModel {
        let p = coef_x.len();
        let mut w = vec![coef_t];
        w.extend_from_slice(coef_x);
        let net = MlpModel::from_parts(
            vec![p + 1, 1],
            vec![Activation::Identity],
            vec![Matrix::from_vec(1, p + 1, w).unwrap()],
            vec![vec![0.0]],
        )
        .unwrap();
        let scaler = Standardizer {
            means: vec![0.0; p],
            sds: vec![1.0; p],
            clamped: vec![false; p],
            sd_convention: crate::numkit::SdConvention::Sample,
        };
        let target = ScalarScaler {
            mean: 0.0,
            sd: 1.0,
            clamped: false,
        };
        BlackboxModel::from_parts(net, scaler, target).unwrap()
    }

    #[test]
    fn lime_recovers_a_globally_linear_blackbox() {
        let coef_x = [2.25, 1.65, 1.55, 1.25];
        let coef_t = 0.8;
        let bb = linear_blackbox(coef_t, &coef_x);
        let (h0, h1) = sim_specs();
        let cfg = LimeConfig {
            m: 4_000,
            ..LimeConfig::default_for(4)
        };
        let subject = [0.4, -0.2, 0.1, 0.6];
        let (expl, _) = lime_explain(
            &subject,
            &bb,
            &cfg,
            &h0,
            &h1,
            Rng::new(31).child("lime:0"),
            0,
        )
        .unwrap();
        let b1 = expl.beta_k1.unwrap();
        let b2 = expl.beta_k2.unwrap();
        for (est, tru) in b1.iter().zip(&coef_x) {
            assert!((est - tru).abs() < 0.02, "main {est} vs {tru}");
        }
        // Treatment head: pure main effect of T, no interactions.
        assert!((b2[0] - coef_t).abs() < 0.02, "t coefficient {}", b2[0]);
        assert!(b2[1].abs() < 0.02 && b2[2].abs() < 0.02);
        assert_eq!(expl.recommended_t, 1);
        assert!(expl.local_r2.unwrap() > 0.999);
    }

    #[test]
    fn lime_is_deterministic_given_seed() {
        let bb = linear_blackbox(0.5, &[1.0, -1.0, 0.3, 0.2]);
        let (h0, h1) = sim_specs();
        let cfg = LimeConfig {
            m: 500,
            ..LimeConfig::default_for(4)
        };
        let subject = [0.1, 0.2, 0.3, 0.4];
        let run = |_: ()| {
            lime_explain(
                &subject,
                &bb,
                &cfg,
                &h0,
                &h1,
                Rng::new(9).child("lime:7"),
                7,
            )
            .unwrap()
            .0
        };
        let a = run(());
        let b = run(());
        assert_eq!(a.beta_k1, b.beta_k1);
        assert_eq!(a.beta_k2, b.beta_k2);
        assert_eq!(a.local_r2, b.local_r2);
    }

    fn global_rule_dataset(n: usize, seed: u64, noise: f64) -> (Dataset, Vec<f64>) {
        // Y = 1.5 + H0·(0.5,−0.3,0.8,0.1) + T·(0.4 + 0.7·x1 − 0.2·x2).
        let mut rng = Rng::new(seed);
        let mut rows = Vec::with_capacity(n);
        let mut t = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let coefs = vec![1.5, 0.5, -0.3, 0.8, 0.1, 0.4, 0.7, -0.2];
        for _ in 0..n {
            let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let ti = rng.bernoulli(0.5) as f64;
            let val = coefs[0]
                + coefs[1] * x[0]
                + coefs[2] * x[1]
                + coefs[3] * x[2]
                + coefs[4] * x[3]
                + ti * (coefs[5] + coefs[6] * x[0] + coefs[7] * x[1]);
            y.push(val + noise * rng.normal());
            t.push(ti as u8);
            rows.push(x);
        }
        (
            Dataset {
                x: Matrix::from_rows(&rows).unwrap(),
                t,
                y,
                column_names: (1..=4).map(|i| format!("x{i}")).collect(),
            },
            coefs,
        )
    }

    #[test]
    fn qlearning_recovers_global_rule_exactly_without_noise() {
        let (data, coefs) = global_rule_dataset(400, 41, 0.0);
        let (h0, h1) = sim_specs();
        let model = q_learning_fit(&data, &h0, &h1).unwrap();
        assert!(!model.ridge_flagged);
        for (est, tru) in model.coefficients.iter().zip(&coefs) {
            assert!((est - tru).abs() < 1e-8, "{est} vs {tru}");
        }
        // Residuals vanish.
        assert!((model.train_r2 - 1.0).abs() < 1e-10);
        // Rule follows the sign of 0.4 + 0.7·x1 − 0.2·x2.
        assert_eq!(model.rule(&[1.0, 0.0, 0.0, 0.0]), 1);
        assert_eq!(model.rule(&[-1.0, 0.0, 0.0, 0.0]), 0);
    }

    #[test]
    fn pure_noise_coefficients_stay_within_sampling_bands() {
        // Y independent of everything: coefficients land within 3 standard
        // errors of zero.
        let mut rng = Rng::new(43);
        let n = 4_000;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| rng.normal()).collect())
            .collect();
        let t: Vec<u8> = (0..n).map(|_| rng.bernoulli(0.5)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let data = Dataset {
            x: Matrix::from_rows(&rows).unwrap(),
            t: t.clone(),
            y: y.clone(),
            column_names: (1..=4).map(|i| format!("x{i}")).collect(),
        };
        let (h0, h1) = sim_specs();
        let model = q_learning_fit(&data, &h0, &h1).unwrap();

        // Standard errors from the unweighted normal equations.
        let cols = model.coefficients.len();
        let mut xtx = Matrix::zeros(cols, cols);
        for i in 0..n {
            let x = data.x.row(i);
            let ti = data.t[i] as f64;
            let mut row = vec![1.0];
            row.extend(h0.eval(x));
            for h in h1.eval(x) {
                row.push(h * ti);
            }
            for a in 0..cols {
                for b in a..cols {
                    xtx.set(a, b, xtx.get(a, b) + row[a] * row[b]);
                }
            }
        }
        for a in 0..cols {
            for b in 0..a {
                xtx.set(a, b, xtx.get(b, a));
            }
        }
        let mut rss = 0.0;
        for i in 0..n {
            let x = data.x.row(i);
            let ti = data.t[i] as f64;
            let mut row = vec![1.0];
            row.extend(h0.eval(x));
            for h in h1.eval(x) {
                row.push(h * ti);
            }
            let pred: f64 = row.iter().zip(&model.coefficients).map(|(a, b)| a * b).sum();
            rss += (data.y[i] - pred) * (data.y[i] - pred);
        }
        let sigma2 = rss / (n - cols) as f64;
        for i in 0..cols {
            let mut e = vec![0.0; cols];
            e[i] = 1.0;
            let inv_col = solve_spd(&xtx, &e).unwrap();
            let se = (sigma2 * inv_col[i]).sqrt();
            assert!(
                model.coefficients[i].abs() < 3.0 * se,
                "coefficient {i}: {} vs 3·SE {}",
                model.coefficients[i],
                3.0 * se
            );
        }
    }

    #[test]
    fn duplicating_rows_leaves_coefficients_unchanged() {
        let (data, _) = global_rule_dataset(200, 44, 0.5);
        let (h0, h1) = sim_specs();
        let base = q_learning_fit(&data, &h0, &h1).unwrap();

        let mut rows: Vec<Vec<f64>> = (0..data.n()).map(|i| data.x.row(i).to_vec()).collect();
        rows.extend(rows.clone());
        let mut t = data.t.clone();
        t.extend(data.t.clone());
        let mut y = data.y.clone();
        y.extend(data.y.clone());
        let doubled = Dataset {
            x: Matrix::from_rows(&rows).unwrap(),
            t,
            y,
            column_names: data.column_names.clone(),
        };
        let twice = q_learning_fit(&doubled, &h0, &h1).unwrap();
        for (a, b) in base.coefficients.iter().zip(&twice.coefficients) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
