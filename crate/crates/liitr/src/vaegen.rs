//! β-VAE over the covariates and per-subject latent perturbation.
//!
//! The encoder maps standardized covariates to a diagonal Gaussian
//! posterior `(μ, log σ²)`; the decoder maps latents back to covariate
//! space. Training maximizes the modified evidence lower bound
//! `E[log p(x|z)] − β·KL(q(z|x) ‖ N(0, I))` with a unit-scale Gaussian
//! likelihood on standardized columns, so the reconstruction term is a
//! scaled squared error. Perturbed samples for a subject come from
//! `z' = z + min(1, α)·ε'` around the subject's posterior mean, decoded
//! through the decoder mean. The treatment column is never a VAE input;
//! synthetic treatments are fair coin flips.

use serde::{Deserialize, Serialize};

use crate::blackbox::BlackboxModel;
use crate::error::{Error, Result};
use crate::numkit::{
    adamw_step, pearson_correlation, AdamWConfig, AdamWState, Activation, Matrix, MlpGradients,
    MlpModel, Rng, Standardizer,
};
use crate::simgen::Dataset;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub beta: f64,
    pub hidden: Vec<usize>,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub learning_rate: f64,
    pub lr_decay: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            beta: 1.0,
            hidden: vec![32, 32],
            max_epochs: 400,
            patience: 40,
            batch_size: 128,
            val_fraction: 0.15,
            learning_rate: 1e-3,
            lr_decay: 1.0,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if n < 100 {
            return Err(Error::Config(format!("need n ≥ 100 rows, got {n}")));
        }
        if self.latent_dim < 1 {
            return Err(Error::Config("latent_dim must be ≥ 1".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("val_fraction must be in (0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeEpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_kl: f64,
}

/// Trained β-VAE. Immutable after fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeModel {
    encoder: MlpModel,
    decoder: MlpModel,
    pub beta: f64,
    pub latent_dim: usize,
    scaler: Standardizer,
    pub train_log: Vec<VaeEpochStat>,
    /// Set when the mean KL per latent dimension fell below 1e-4.
    pub posterior_collapsed: bool,
}

/// Closed-form KL divergence of a diagonal Gaussian to the standard
/// normal: `0.5·Σ(μ² + σ² − 1 − log σ²)`.
pub fn kl_diag_gaussian(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Modified-ELBO loss (negated, to minimize) and parameter gradients for a
/// batch of standardized rows with fixed reparameterization noise.
///
/// Returns the summed loss `Σ_j [0.5‖x̂_j − x_j‖² + β·KL_j]` and
/// accumulates gradients into the provided buffers.
pub fn elbo_loss_and_grads(
    encoder: &MlpModel,
    decoder: &MlpModel,
    rows: &[&[f64]],
    noise: &[Vec<f64>],
    beta: f64,
    enc_grads: &mut MlpGradients,
    dec_grads: &mut MlpGradients,
) -> Result<f64> {
    let latent_dim = decoder.input_dim();
    let mut total = 0.0;
    for (x, eps) in rows.iter().zip(noise) {
        let enc_cache = encoder.forward_cached(x)?;
        let enc_out = enc_cache.output();
        let (mu, lv) = enc_out.split_at(latent_dim);

        let sigma: Vec<f64> = lv.iter().map(|v| (0.5 * v).exp()).collect();
        let z: Vec<f64> = mu
            .iter()
            .zip(&sigma)
            .zip(eps)
            .map(|((m, s), e)| m + s * e)
            .collect();

        let dec_cache = decoder.forward_cached(&z)?;
        let xhat = dec_cache.output();

        let recon: f64 = xhat
            .iter()
            .zip(*x)
            .map(|(a, b)| 0.5 * (a - b) * (a - b))
            .sum();
        let kl = kl_diag_gaussian(mu, lv);
        total += recon + beta * kl;

        let d_xhat: Vec<f64> = xhat.iter().zip(*x).map(|(a, b)| a - b).collect();
        let dz = decoder.backward(&dec_cache, &d_xhat, dec_grads)?;

        let mut d_enc_out = vec![0.0; enc_out.len()];
        for d in 0..latent_dim {
            // z = μ + σ·ε with σ = exp(0.5·lv).
            d_enc_out[d] = dz[d] + beta * mu[d];
            d_enc_out[latent_dim + d] =
                dz[d] * eps[d] * 0.5 * sigma[d] + beta * 0.5 * (lv[d].exp() - 1.0);
        }
        encoder.backward(&enc_cache, &d_enc_out, enc_grads)?;
    }
    if !total.is_finite() {
        return Err(Error::Training("non-finite ELBO loss".into()));
    }
    Ok(total)
}

impl VaeModel {
    /// Train on the covariate columns of `data` (treatment is never an
    /// input). Early-stops on a deterministic validation loss that uses the
    /// posterior mean instead of a sampled latent.
    pub fn fit(data: &Dataset, config: &VaeConfig, mut rng: Rng) -> Result<Self> {
        config.validate(data.n())?;
        let n = data.n();
        let p = data.p();

        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let n_val = ((n as f64 * config.val_fraction).round() as usize).clamp(1, n - 1);
        let val_idx = order[..n_val].to_vec();
        let train_idx = order[n_val..].to_vec();

        let train_rows: Vec<Vec<f64>> = train_idx.iter().map(|&i| data.x.row(i).to_vec()).collect();
        let scaler = Standardizer::fit(&Matrix::from_rows(&train_rows)?);
        let std_rows: Vec<Vec<f64>> = (0..n)
            .map(|i| scaler.transform_row(data.x.row(i)))
            .collect::<Result<_>>()?;

        let mut enc_sizes = vec![p];
        enc_sizes.extend_from_slice(&config.hidden);
        enc_sizes.push(2 * config.latent_dim);
        let mut enc_acts = vec![Activation::Relu; config.hidden.len()];
        enc_acts.push(Activation::Identity);
        let mut encoder = MlpModel::new(&enc_sizes, &enc_acts, &mut rng)?;

        let mut dec_sizes = vec![config.latent_dim];
        dec_sizes.extend_from_slice(&config.hidden);
        dec_sizes.push(p);
        let mut dec_acts = vec![Activation::Relu; config.hidden.len()];
        dec_acts.push(Activation::Identity);
        let mut decoder = MlpModel::new(&dec_sizes, &dec_acts, &mut rng)?;

        let mut state = AdamWState::new(
            encoder.param_count() + decoder.param_count(),
            AdamWConfig::with_learning_rate(config.learning_rate),
        )?;
        let mut enc_grads = MlpGradients::zeros_like(&encoder);
        let mut dec_grads = MlpGradients::zeros_like(&decoder);

        // Deterministic validation loss: z = μ, no sampling.
        let val_loss = |enc: &MlpModel, dec: &MlpModel| -> Result<(f64, f64)> {
            let mut loss = 0.0;
            let mut kl_sum = 0.0;
            for &i in &val_idx {
                let out = enc.forward(&std_rows[i])?;
                let (mu, lv) = out.split_at(config.latent_dim);
                let xhat = dec.forward(mu)?;
                let recon: f64 = xhat
                    .iter()
                    .zip(&std_rows[i])
                    .map(|(a, b)| 0.5 * (a - b) * (a - b))
                    .sum();
                let kl = kl_diag_gaussian(mu, lv);
                loss += recon + config.beta * kl;
                kl_sum += kl;
            }
            Ok((loss / val_idx.len() as f64, kl_sum / val_idx.len() as f64))
        };

        let mut shuffled = train_idx.clone();
        let mut best_val = f64::INFINITY;
        let mut best_params: (Vec<f64>, Vec<f64>) =
            (encoder.export_params(), decoder.export_params());
        let mut since_best = 0usize;
        let mut train_log = Vec::new();
        let mut last_val_kl = f64::NAN;

        for epoch in 0..config.max_epochs {
            rng.shuffle(&mut shuffled);
            let mut epoch_loss = 0.0;
            for batch in shuffled.chunks(config.batch_size) {
                enc_grads.zero();
                dec_grads.zero();
                let rows: Vec<&[f64]> = batch.iter().map(|&i| std_rows[i].as_slice()).collect();
                let noise: Vec<Vec<f64>> = batch
                    .iter()
                    .map(|_| (0..config.latent_dim).map(|_| rng.normal()).collect())
                    .collect();
                let loss = elbo_loss_and_grads(
                    &encoder,
                    &decoder,
                    &rows,
                    &noise,
                    config.beta,
                    &mut enc_grads,
                    &mut dec_grads,
                )
                .map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;
                epoch_loss += loss;
                let scale = 1.0 / batch.len() as f64;
                enc_grads.scale(scale);
                dec_grads.scale(scale);
                adamw_step(
                    encoder.params_mut().chain(decoder.params_mut()),
                    enc_grads.params().chain(dec_grads.params()),
                    &mut state,
                )
                .map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;
            }
            let train_loss = epoch_loss / shuffled.len() as f64;
            let (v_loss, v_kl) = val_loss(&encoder, &decoder)?;
            last_val_kl = v_kl;
            train_log.push(VaeEpochStat {
                epoch,
                train_loss,
                val_loss: v_loss,
                val_kl: v_kl,
            });
            if v_loss < best_val - 1e-9 {
                best_val = v_loss;
                best_params = (encoder.export_params(), decoder.export_params());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    break;
                }
            }
            state.config.learning_rate *= config.lr_decay;
        }
        encoder.import_params(&best_params.0)?;
        decoder.import_params(&best_params.1)?;

        let posterior_collapsed = (last_val_kl / config.latent_dim as f64) < 1e-4;
        if posterior_collapsed {
            log::warn!(
                "posterior collapse: mean KL per dim {:.2e}",
                last_val_kl / config.latent_dim as f64
            );
        }

        Ok(Self {
            encoder,
            decoder,
            beta: config.beta,
            latent_dim: config.latent_dim,
            scaler,
            train_log,
            posterior_collapsed,
        })
    }

    pub fn from_parts(
        encoder: MlpModel,
        decoder: MlpModel,
        beta: f64,
        latent_dim: usize,
        scaler: Standardizer,
    ) -> Result<Self> {
        if encoder.output_dim() != 2 * latent_dim || decoder.input_dim() != latent_dim {
            return Err(Error::Config("encoder/decoder latent dims disagree".into()));
        }
        Ok(Self {
            encoder,
            decoder,
            beta,
            latent_dim,
            scaler,
            train_log: Vec::new(),
            posterior_collapsed: false,
        })
    }

    pub fn p(&self) -> usize {
        self.scaler.dim()
    }

    pub fn encoder(&self) -> &MlpModel {
        &self.encoder
    }

    pub fn decoder(&self) -> &MlpModel {
        &self.decoder
    }

    pub fn scaler(&self) -> &Standardizer {
        &self.scaler
    }

    /// Posterior mean latent for a raw covariate row.
    pub fn encode_mean(&self, x_raw: &[f64]) -> Result<Vec<f64>> {
        let std = self.scaler.transform_row(x_raw)?;
        let out = self.encoder.forward(&std)?;
        Ok(out[..self.latent_dim].to_vec())
    }

    /// Posterior `(μ, log σ²)` for a raw covariate row.
    pub fn encode_posterior(&self, x_raw: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let std = self.scaler.transform_row(x_raw)?;
        let out = self.encoder.forward(&std)?;
        let (mu, lv) = out.split_at(self.latent_dim);
        Ok((mu.to_vec(), lv.to_vec()))
    }

    /// Decoder mean for a latent vector, in raw covariate units.
    pub fn decode_mean(&self, z: &[f64]) -> Result<Vec<f64>> {
        let std = self.decoder.forward(z)?;
        let raw = self.scaler.inverse_row(&std)?;
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training("non-finite decode".into()));
        }
        Ok(raw)
    }

    /// Deterministic round trip `decode(encode_mean(x))` in raw units.
    pub fn reconstruct(&self, x_raw: &[f64]) -> Result<Vec<f64>> {
        let mu = self.encode_mean(x_raw)?;
        self.decode_mean(&mu)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSchedule {
    Fixed,
    /// `α_j = α·(j+1)/m` across the m draws.
    LinearRamp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbConfig {
    /// Perturbation scale in latent units; effective scale is `min(1, α)`.
    pub alpha: f64,
    /// Number of synthetic samples.
    pub m: usize,
    pub schedule: AlphaSchedule,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            m: 20_000,
            schedule: AlphaSchedule::Fixed,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "alpha must be in (0,1], got {}",
                self.alpha
            )));
        }
        if self.m < 100 {
            return Err(Error::Config(format!("m must be ≥ 100, got {}", self.m)));
        }
        Ok(())
    }
}

/// Synthetic rows `(t', x')` centered on one subject, plus black-box
/// predictions once attached.
#[derive(Debug, Clone)]
pub struct PerturbationSet {
    pub subject_id: usize,
    /// m×(p+1) matrix; column 0 is the synthetic treatment.
    pub d_prime: Matrix,
    /// Black-box predictions, empty until [`attach_predictions`] runs.
    pub y_hat: Vec<f64>,
    /// Predictions under the flipped treatment, filled alongside `y_hat`;
    /// used for effect-aware initialization heuristics downstream.
    pub y_hat_flipped: Vec<f64>,
    pub alpha: f64,
    pub schedule: AlphaSchedule,
    pub seed_label: String,
}

impl PerturbationSet {
    pub fn m(&self) -> usize {
        self.d_prime.rows()
    }

    pub fn p(&self) -> usize {
        self.d_prime.cols() - 1
    }

    /// Covariate part of row `j`.
    pub fn x_row(&self, j: usize) -> &[f64] {
        &self.d_prime.row(j)[1..]
    }

    pub fn t_row(&self, j: usize) -> f64 {
        self.d_prime.row(j)[0]
    }
}

/// Generate a subject's perturbation set (without predictions).
///
/// The subject's latent position is the posterior mean; each draw adds
/// `min(1, α_j)·ε'` in latent space, decodes through the decoder mean, and
/// flips a fair coin for the synthetic treatment.
pub fn perturb_latent(
    vae: &VaeModel,
    x_subject: &[f64],
    config: &PerturbConfig,
    mut rng: Rng,
    subject_id: usize,
) -> Result<PerturbationSet> {
    config.validate()?;
    if x_subject.len() != vae.p() {
        return Err(Error::Shape {
            context: "perturb_latent",
            expected: vae.p(),
            actual: x_subject.len(),
        });
    }
    let z = vae.encode_mean(x_subject)?;
    let mut rows = Vec::with_capacity(config.m);
    for j in 0..config.m {
        let alpha_j = match config.schedule {
            AlphaSchedule::Fixed => config.alpha,
            AlphaSchedule::LinearRamp => config.alpha * (j + 1) as f64 / config.m as f64,
        };
        let scale = alpha_j.min(1.0);
        let z_prime: Vec<f64> = z.iter().map(|zd| zd + scale * rng.normal()).collect();
        let x_prime = vae.decode_mean(&z_prime)?;
        let t_prime = rng.bernoulli(0.5);
        let mut row = Vec::with_capacity(x_prime.len() + 1);
        row.push(t_prime as f64);
        row.extend(x_prime);
        rows.push(row);
    }
    Ok(PerturbationSet {
        subject_id,
        d_prime: Matrix::from_rows(&rows)?,
        y_hat: Vec::new(),
        y_hat_flipped: Vec::new(),
        alpha: config.alpha,
        schedule: config.schedule,
        seed_label: format!("perturb:{subject_id}"),
    })
}

/// Fill `y_hat` with black-box predictions for every synthetic row, plus
/// the counterfactual predictions under the flipped treatment.
pub fn attach_predictions(pset: &mut PerturbationSet, bb: &BlackboxModel) -> Result<()> {
    if !pset.y_hat.is_empty() {
        return Err(Error::Usage("predictions already attached".into()));
    }
    let mut y = Vec::with_capacity(pset.m());
    let mut y_cf = Vec::with_capacity(pset.m());
    for j in 0..pset.m() {
        let row = pset.d_prime.row(j);
        y.push(bb.predict(row)?);
        let mut flipped = row.to_vec();
        flipped[0] = 1.0 - flipped[0];
        y_cf.push(bb.predict(&flipped)?);
    }
    pset.y_hat = y;
    pset.y_hat_flipped = y_cf;
    Ok(())
}

/// Correlation structure of the encoded latent means over a covariate
/// matrix.
#[derive(Debug, Clone)]
pub struct DecorrelationReport {
    pub latent_corr: Matrix,
    pub max_offdiagonal: f64,
}

pub fn latent_decorrelation_report(vae: &VaeModel, x: &Matrix) -> Result<DecorrelationReport> {
    let rows: Vec<Vec<f64>> = (0..x.rows())
        .map(|i| vae.encode_mean(x.row(i)))
        .collect::<Result<_>>()?;
    let latents = Matrix::from_rows(&rows)?;
    let corr = pearson_correlation(&latents);
    let max = crate::numkit::max_abs_offdiagonal(&corr);
    Ok(DecorrelationReport {
        latent_corr: corr,
        max_offdiagonal: max,
    })
}

/// Per-column plausibility box `[min − 3·sd, max + 3·sd]` from training
/// covariates.
pub fn sanity_box(x: &Matrix) -> Vec<(f64, f64)> {
    (0..x.cols())
        .map(|c| {
            let col = x.column(c);
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sd = crate::numkit::sample_sd(&col);
            (lo - 3.0 * sd, hi + 3.0 * sd)
        })
        .collect()
}

/// Fraction of perturbation rows with any covariate outside the box.
pub fn fraction_outside_box(pset: &PerturbationSet, bounds: &[(f64, f64)]) -> f64 {
    let mut outside = 0usize;
    for j in 0..pset.m() {
        let x = pset.x_row(j);
        if x.iter()
            .zip(bounds)
            .any(|(v, (lo, hi))| v < lo || v > hi)
        {
            outside += 1;
        }
    }
    outside as f64 / pset.m() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{finite_diff_gradient, gradient_rel_error};
    use crate::simgen::{self, SimConfig};

    #[test]
    fn kl_of_standard_normal_is_zero() {
        assert_eq!(kl_diag_gaussian(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn kl_closed_form_unit_mean_case() {
        // μ=(1,0), σ=(1,1) → KL = 0.5·Σμ² = 0.5.
        let kl = kl_diag_gaussian(&[1.0, 0.0], &[0.0, 0.0]);
        assert!((kl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_is_nonnegative_on_random_posteriors() {
        let mut rng = Rng::new(2);
        for _ in 0..200 {
            let mu: Vec<f64> = (0..3).map(|_| 2.0 * rng.normal()).collect();
            let lv: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            assert!(kl_diag_gaussian(&mu, &lv) >= 0.0);
        }
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        // Frozen noise; joint check over encoder and decoder parameters.
        for seed in 0..3u64 {
            let mut rng = Rng::new(seed);
            let p = 3;
            let latent = 2;
            let encoder = MlpModel::new(
                &[p, 5, 2 * latent],
                &[Activation::Tanh, Activation::Identity],
                &mut rng,
            )
            .unwrap();
            let decoder = MlpModel::new(
                &[latent, 5, p],
                &[Activation::Tanh, Activation::Identity],
                &mut rng,
            )
            .unwrap();
            let rows_owned: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..p).map(|_| rng.normal()).collect())
                .collect();
            let rows: Vec<&[f64]> = rows_owned.iter().map(|r| r.as_slice()).collect();
            let noise: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..latent).map(|_| rng.normal()).collect())
                .collect();

            let mut eg = MlpGradients::zeros_like(&encoder);
            let mut dg = MlpGradients::zeros_like(&decoder);
            elbo_loss_and_grads(&encoder, &decoder, &rows, &noise, 1.3, &mut eg, &mut dg)
                .unwrap();
            let analytic: Vec<f64> = eg
                .export()
                .into_iter()
                .chain(dg.export())
                .collect();

            let flat: Vec<f64> = encoder
                .export_params()
                .into_iter()
                .chain(decoder.export_params())
                .collect();
            let enc_len = encoder.param_count();
            let mut enc_probe = encoder.clone();
            let mut dec_probe = decoder.clone();
            let fd = finite_diff_gradient(&flat, 1e-5, |params| {
                enc_probe.import_params(&params[..enc_len]).unwrap();
                dec_probe.import_params(&params[enc_len..]).unwrap();
                let mut eg = MlpGradients::zeros_like(&enc_probe);
                let mut dg = MlpGradients::zeros_like(&dec_probe);
                elbo_loss_and_grads(
                    &enc_probe, &dec_probe, &rows, &noise, 1.3, &mut eg, &mut dg,
                )
                .unwrap()
            });
            let err = gradient_rel_error(&analytic, &fd);
            assert!(err < 1e-4, "seed {seed}: rel error {err}");
        }
    }

    fn sim_vae(n: usize, seed: u64, epochs: usize) -> (Dataset, VaeModel) {
        let (data, _) = simgen::generate(&SimConfig {
            n,
            seed,
            ..SimConfig::default()
        })
        .unwrap();
        let cfg = VaeConfig {
            max_epochs: epochs,
            ..VaeConfig::default()
        };
        let vae = VaeModel::fit(&data, &cfg, Rng::new(seed).child("vae")).unwrap();
        (data, vae)
    }

    #[test]
    fn perturbation_rule_arithmetic() {
        // α=0.3, Z=(1,−1), ε'=(0.5,0.5) → Z'=(1.15,−0.85).
        let alpha = 0.3f64;
        let z = [1.0, -1.0];
        let eps = [0.5, 0.5];
        let z_prime: Vec<f64> = z
            .iter()
            .zip(&eps)
            .map(|(zd, e)| zd + alpha.min(1.0) * e)
            .collect();
        assert!((z_prime[0] - 1.15).abs() < 1e-15);
        assert!((z_prime[1] + 0.85).abs() < 1e-15);
    }

    #[test]
    fn synthetic_treatment_is_balanced_and_alpha_zero_collapses() {
        let (data, vae) = sim_vae(400, 5, 40);
        let subject = data.x.row(0);
        let cfg = PerturbConfig {
            alpha: 0.5,
            m: 10_000,
            schedule: AlphaSchedule::Fixed,
        };
        let pset =
            perturb_latent(&vae, subject, &cfg, Rng::new(5).child("perturb:0"), 0).unwrap();
        let mean_t: f64 = (0..pset.m()).map(|j| pset.t_row(j)).sum::<f64>() / pset.m() as f64;
        assert!((mean_t - 0.5).abs() < 0.02, "mean T' = {mean_t}");

        // Shrinking α collapses every row onto decode(z).
        let center = vae.decode_mean(&vae.encode_mean(subject).unwrap()).unwrap();
        let tiny = PerturbConfig {
            alpha: 1e-9,
            m: 200,
            schedule: AlphaSchedule::Fixed,
        };
        let pset =
            perturb_latent(&vae, subject, &tiny, Rng::new(5).child("perturb:0"), 0).unwrap();
        let max_dist = (0..pset.m())
            .map(|j| {
                pset.x_row(j)
                    .iter()
                    .zip(&center)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max)
            })
            .fold(0.0f64, f64::max);
        assert!(max_dist < 1e-6, "max dist {max_dist}");
    }

    #[test]
    fn linear_ramp_reaches_full_alpha_only_at_the_end() {
        let (data, vae) = sim_vae(400, 6, 30);
        let cfg = PerturbConfig {
            alpha: 0.8,
            m: 2_000,
            schedule: AlphaSchedule::LinearRamp,
        };
        let pset = perturb_latent(&vae, data.x.row(3), &cfg, Rng::new(6).child("perturb:3"), 3)
            .unwrap();
        let center = vae.decode_mean(&vae.encode_mean(data.x.row(3)).unwrap()).unwrap();
        // Average displacement in the first tenth is far below the last tenth.
        let disp = |j: usize| -> f64 {
            pset.x_row(j)
                .iter()
                .zip(&center)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let head: f64 = (0..200).map(disp).sum::<f64>() / 200.0;
        let tail: f64 = (1_800..2_000).map(disp).sum::<f64>() / 200.0;
        assert!(head < 0.5 * tail, "head {head} vs tail {tail}");
    }

    #[test]
    fn attach_predictions_fills_every_row_and_sees_treatment() {
        let (data, vae) = sim_vae(400, 7, 30);
        let bb = crate::blackbox::BlackboxModel::fit(
            &data,
            &crate::blackbox::BlackboxConfig {
                hidden: vec![16],
                max_epochs: 60,
                ..Default::default()
            },
            Rng::new(7).child("blackbox"),
        )
        .unwrap();
        let cfg = PerturbConfig {
            alpha: 0.5,
            m: 300,
            schedule: AlphaSchedule::Fixed,
        };
        let mut pset =
            perturb_latent(&vae, data.x.row(1), &cfg, Rng::new(7).child("perturb:1"), 1).unwrap();
        attach_predictions(&mut pset, &bb).unwrap();
        assert_eq!(pset.y_hat.len(), 300);
        assert!(matches!(
            attach_predictions(&mut pset, &bb),
            Err(Error::Usage(_))
        ));

        // Flipping T' moves the prediction on a treatment-sensitive model.
        let mut flipped = pset.d_prime.row(0).to_vec();
        flipped[0] = 1.0 - flipped[0];
        let orig = bb.predict(pset.d_prime.row(0)).unwrap();
        let alt = bb.predict(&flipped).unwrap();
        assert!((orig - alt).abs() > 1e-8);
    }

    #[test]
    fn constant_blackbox_gives_constant_predictions() {
        let (data, vae) = sim_vae(400, 8, 20);
        // Hand-built constant model: zero first layer, bias-only output.
        let p = data.p();
        let w1 = Matrix::zeros(4, p + 1);
        let w2 = Matrix::from_vec(1, 4, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let net = MlpModel::from_parts(
            vec![p + 1, 4, 1],
            vec![Activation::Relu, Activation::Identity],
            vec![w1, w2],
            vec![vec![0.0; 4], vec![0.25]],
        )
        .unwrap();
        let scaler = Standardizer::fit(&data.x);
        let target = crate::numkit::ScalarScaler { mean: 1.0, sd: 2.0, clamped: false };
        let bb = crate::blackbox::BlackboxModel::from_parts(net, scaler, target).unwrap();
        let cfg = PerturbConfig {
            alpha: 0.4,
            m: 150,
            schedule: AlphaSchedule::Fixed,
        };
        let mut pset =
            perturb_latent(&vae, data.x.row(2), &cfg, Rng::new(8).child("perturb:2"), 2).unwrap();
        attach_predictions(&mut pset, &bb).unwrap();
        let first = pset.y_hat[0];
        assert!(pset.y_hat.iter().all(|v| (v - first).abs() < 1e-12));
    }

    #[test]
    fn decorrelation_report_is_symmetric_and_vacuous_for_one_dim() {
        let (data, vae) = sim_vae(500, 9, 40);
        let report = latent_decorrelation_report(&vae, &data.x).unwrap();
        let c = &report.latent_corr;
        for a in 0..c.rows() {
            assert_eq!(c.get(a, a), 1.0);
            for b in 0..c.cols() {
                assert_eq!(c.get(a, b), c.get(b, a));
            }
        }

        let cfg = VaeConfig {
            latent_dim: 1,
            max_epochs: 10,
            ..VaeConfig::default()
        };
        let (small, _) = simgen::generate(&SimConfig {
            n: 200,
            seed: 9,
            ..SimConfig::default()
        })
        .unwrap();
        let vae1 = VaeModel::fit(&small, &cfg, Rng::new(9).child("vae")).unwrap();
        let rep1 = latent_decorrelation_report(&vae1, &small.x).unwrap();
        assert_eq!(rep1.max_offdiagonal, 0.0);
    }

    #[test]
    fn perturbations_stay_inside_training_box() {
        let (data, vae) = sim_vae(1_000, 10, 80);
        let bounds = sanity_box(&data.x);
        let cfg = PerturbConfig {
            alpha: 0.5,
            m: 2_000,
            schedule: AlphaSchedule::Fixed,
        };
        for sid in [0usize, 11, 42] {
            let pset = perturb_latent(
                &vae,
                data.x.row(sid),
                &cfg,
                Rng::new(10).child(&format!("perturb:{sid}")),
                sid,
            )
            .unwrap();
            let frac = fraction_outside_box(&pset, &bounds);
            assert!(frac <= 0.01, "subject {sid}: {frac} outside");
        }
    }

    #[test]
    fn perturbation_is_deterministic_per_seed() {
        let (data, vae) = sim_vae(300, 12, 20);
        let cfg = PerturbConfig {
            alpha: 0.5,
            m: 120,
            schedule: AlphaSchedule::Fixed,
        };
        let a = perturb_latent(&vae, data.x.row(4), &cfg, Rng::new(3).child("perturb:4"), 4)
            .unwrap();
        let b = perturb_latent(&vae, data.x.row(4), &cfg, Rng::new(3).child("perturb:4"), 4)
            .unwrap();
        assert_eq!(a.d_prime.data(), b.d_prime.data());
    }
}
