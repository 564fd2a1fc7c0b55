//! Mixture of interpretable linear experts over a subject's perturbation
//! set, with an entropy-penalized likelihood and straight-through hard
//! gating.
//!
//! Each expert is a linear mean model
//! `μ_k = β_{k1}ᵀH0 + (β_{k2}ᵀH1)·T'` with a Gaussian scale `σ_k`; a small
//! network over the covariates produces gate logits whose softmax gives
//! per-sample responsibilities. Training maximizes
//! `Σ_j log Σ_k π_jk·N(Ŷ_j | μ_k, σ_k²) + λ·Σ_j π_jᵀ log π_j`
//! jointly over experts and gate. After a soft warmup the forward pass
//! switches to a hard one-hot gate while gradients keep flowing through
//! the soft responsibilities (straight-through estimator). The subject's
//! explanation is the expert its own covariates select.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval;
use crate::numkit::{
    adamw_step, weighted_least_squares, AdamWConfig, AdamWState, Activation, Matrix,
    MlpGradients, MlpModel, Rng, Standardizer,
};
use crate::vaegen::PerturbationSet;

const LN_2PI: f64 = 1.8378770664093453;
/// Cap on log-density ratios in the straight-through backward pass so a
/// badly mis-gated sample cannot overflow the gate gradient.
const STE_LOG_RATIO_CAP: f64 = 200.0;

/// Feature subset: optional intercept, the listed covariate indices, and
/// optionally all degree-two terms (squares and pairwise products) of
/// those indices. The quadratic expansion gives a prognostic head enough
/// capacity to absorb smooth curvature of the black box, which keeps the
/// gate focused on treatment-effect structure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub indices: Vec<usize>,
    pub intercept: bool,
    #[serde(default)]
    pub quadratic: bool,
}

impl FeatureSpec {
    pub fn new(indices: Vec<usize>, intercept: bool) -> Self {
        Self {
            indices,
            intercept,
            quadratic: false,
        }
    }

    pub fn quadratic(indices: Vec<usize>, intercept: bool) -> Self {
        Self {
            indices,
            intercept,
            quadratic: true,
        }
    }

    fn quad_terms(&self) -> usize {
        if self.quadratic {
            let k = self.indices.len();
            k * (k + 1) / 2
        } else {
            0
        }
    }

    pub fn len(&self) -> usize {
        usize::from(self.intercept) + self.indices.len() + self.quad_terms()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Position of the first raw covariate coefficient within the
    /// evaluated feature vector.
    pub fn raw_offset(&self) -> usize {
        usize::from(self.intercept)
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut h = Vec::with_capacity(self.len());
        if self.intercept {
            h.push(1.0);
        }
        for &i in &self.indices {
            h.push(x[i]);
        }
        if self.quadratic {
            for (a, &i) in self.indices.iter().enumerate() {
                for &j in &self.indices[a..] {
                    h.push(x[i] * x[j]);
                }
            }
        }
        h
    }

    /// Human-readable names, `1` for the intercept and `x<i+1>` otherwise.
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.len());
        if self.intercept {
            out.push("1".to_string());
        }
        for &i in &self.indices {
            out.push(format!("x{}", i + 1));
        }
        if self.quadratic {
            for (a, &i) in self.indices.iter().enumerate() {
                for &j in &self.indices[a..] {
                    out.push(format!("x{}*x{}", i + 1, j + 1));
                }
            }
        }
        out
    }
}

/// One linear expert: prognostic head over `H0`, prescriptive head over
/// `H1`, log-parameterized Gaussian scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertModel {
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub log_sigma: f64,
}

impl ExpertModel {
    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    #[inline]
    pub fn mu(&self, h0: &[f64], h1: &[f64], t: f64) -> f64 {
        let main: f64 = self.beta1.iter().zip(h0).map(|(b, h)| b * h).sum();
        let effect: f64 = self.beta2.iter().zip(h1).map(|(b, h)| b * h).sum();
        main + effect * t
    }

    /// Treatment effect `β₂ᵀH1` at a covariate row.
    pub fn effect(&self, h1: &[f64]) -> f64 {
        self.beta2.iter().zip(h1).map(|(b, h)| b * h).sum()
    }

    fn param_count(&self) -> usize {
        self.beta1.len() + self.beta2.len() + 1
    }
}

/// Gating network producing K logits from raw covariates. Standardization
/// of the input is internal so the gate is self-contained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatingModel {
    pub net: MlpModel,
    pub scaler: Option<Standardizer>,
}

impl GatingModel {
    pub fn k(&self) -> usize {
        self.net.output_dim()
    }

    pub fn logits(&self, x_raw: &[f64]) -> Result<Vec<f64>> {
        match &self.scaler {
            Some(s) => self.net.forward(&s.transform_row(x_raw)?),
            None => self.net.forward(x_raw),
        }
    }
}

/// Numerically stable softmax (max-logit subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|g| (g - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Gate responsibilities `π_k = exp(h_k)/Σ exp(h_l)` for a raw covariate
/// row.
pub fn responsibilities(gate: &GatingModel, x_raw: &[f64]) -> Result<Vec<f64>> {
    Ok(softmax(&gate.logits(x_raw)?))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_index(pi: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in pi.iter().enumerate().skip(1) {
        if *v > pi[best] {
            best = i;
        }
    }
    best
}

/// Hard one-hot selection of the argmax responsibility.
pub fn hard_gate(pi: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; pi.len()];
    out[argmax_index(pi)] = 1.0;
    out
}

/// Backward pass of the straight-through hard gate composed with the
/// softmax: upstream gradients with respect to the hard output pass
/// through unchanged to the soft responsibilities, then through the
/// softmax Jacobian to the logits. `∂ℓ/∂g_c = π_c·(u_c − Σ_b u_b π_b)`.
pub fn ste_gate_backward(pi: &[f64], upstream: &[f64]) -> Vec<f64> {
    let dot: f64 = pi.iter().zip(upstream).map(|(p, u)| p * u).sum();
    pi.iter()
        .zip(upstream)
        .map(|(p, u)| p * (u - dot))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Mixture weights are the soft responsibilities.
    Soft,
    /// Forward uses the one-hot argmax; gradients flow through the soft
    /// responsibilities (straight-through estimator).
    Hard,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoEConfig {
    /// Number of experts.
    pub k: usize,
    /// Entropy penalty weight λ ≥ 0.
    pub lambda: f64,
    /// Epochs of soft gating before the straight-through hard phase.
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub expert_lr: f64,
    pub gate_lr: f64,
    /// Per-epoch multiplicative decay applied to both learning rates.
    pub lr_decay: f64,
    /// Decoupled weight decay on expert coefficients.
    pub weight_decay: f64,
    pub patience: usize,
    pub gate_hidden: Vec<usize>,
    /// Scale of the coefficient jitter around the global least-squares
    /// initialization.
    pub init_jitter: f64,
    /// Lower bound on σ_k.
    pub min_sigma: f64,
    /// Epochs of gate pre-training toward a k-means partition of the
    /// covariates before joint optimization. A spatially coherent start
    /// keeps early expert specialization aligned with contiguous patches.
    pub gate_pretrain_epochs: usize,
    /// Number of independent fits; the one with the best final penalized
    /// log-likelihood wins.
    pub restarts: usize,
    pub h0: FeatureSpec,
    pub h1: FeatureSpec,
}

impl Default for MoEConfig {
    fn default() -> Self {
        Self {
            k: 4,
            lambda: 0.1,
            warmup_epochs: 50,
            max_epochs: 400,
            batch_size: 512,
            expert_lr: 1e-2,
            gate_lr: 3e-3,
            lr_decay: 0.99,
            weight_decay: 0.0,
            patience: 30,
            gate_hidden: vec![32, 32],
            init_jitter: 0.02,
            min_sigma: 1e-3,
            gate_pretrain_epochs: 30,
            restarts: 2,
            h0: FeatureSpec::new(vec![0, 1, 2, 3], true),
            h1: FeatureSpec::new(vec![0, 1], true),
        }
    }
}

impl MoEConfig {
    pub fn validate(&self, m: usize) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("k must be ≥ 1".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be ≥ 0".into()));
        }
        if self.h1.is_empty() {
            return Err(Error::Config("h1 spec must be non-empty".into()));
        }
        if m < 50 * self.k {
            return Err(Error::Config(format!(
                "need m ≥ 50·K = {} rows, got {m}",
                50 * self.k
            )));
        }
        Ok(())
    }
}

/// Cached per-row views of a perturbation set: features, treatment,
/// target.
struct MoEData {
    h0: Matrix,
    h1: Matrix,
    t: Vec<f64>,
    y: Vec<f64>,
    x: Matrix,
}

impl MoEData {
    fn build(pset: &PerturbationSet, cfg: &MoEConfig) -> Result<Self> {
        if pset.y_hat.len() != pset.m() {
            return Err(Error::Usage(
                "perturbation set has no attached predictions".into(),
            ));
        }
        let m = pset.m();
        let mut h0_rows = Vec::with_capacity(m);
        let mut h1_rows = Vec::with_capacity(m);
        let mut x_rows = Vec::with_capacity(m);
        let mut t = Vec::with_capacity(m);
        for j in 0..m {
            let x = pset.x_row(j);
            h0_rows.push(cfg.h0.eval(x));
            h1_rows.push(cfg.h1.eval(x));
            x_rows.push(x.to_vec());
            t.push(pset.t_row(j));
        }
        Ok(Self {
            h0: Matrix::from_rows(&h0_rows)?,
            h1: Matrix::from_rows(&h1_rows)?,
            t,
            y: pset.y_hat.clone(),
            x: Matrix::from_rows(&x_rows)?,
        })
    }
}

/// Gradients for the expert parameters, flat per expert:
/// `(β₁, β₂, log σ)`.
struct ExpertGrads {
    flat: Vec<f64>,
    q0: usize,
    q1: usize,
}

impl ExpertGrads {
    fn zeros(k: usize, q0: usize, q1: usize) -> Self {
        Self {
            flat: vec![0.0; k * (q0 + q1 + 1)],
            q0,
            q1,
        }
    }

    fn zero(&mut self) {
        self.flat.fill(0.0);
    }

    fn span(&self) -> usize {
        self.q0 + self.q1 + 1
    }

    fn add_mu_grad(&mut self, k: usize, d_mu: f64, h0: &[f64], h1: &[f64], t: f64) {
        let base = k * self.span();
        for (g, h) in self.flat[base..base + self.q0].iter_mut().zip(h0) {
            *g += d_mu * h;
        }
        let b2 = base + self.q0;
        for (g, h) in self.flat[b2..b2 + self.q1].iter_mut().zip(h1) {
            *g += d_mu * h * t;
        }
    }

    fn add_log_sigma_grad(&mut self, k: usize, d: f64) {
        let base = k * self.span();
        self.flat[base + self.q0 + self.q1] = self.flat[base + self.q0 + self.q1] + d;
    }

    fn scale(&mut self, s: f64) {
        for g in &mut self.flat {
            *g *= s;
        }
    }
}

fn expert_params_mut<'a>(
    experts: &'a mut [ExpertModel],
) -> impl Iterator<Item = &'a mut f64> {
    experts.iter_mut().flat_map(|e| {
        e.beta1
            .iter_mut()
            .chain(e.beta2.iter_mut())
            .chain(std::iter::once(&mut e.log_sigma))
    })
}

fn expert_param_count(experts: &[ExpertModel]) -> usize {
    experts.iter().map(|e| e.param_count()).sum()
}

/// Penalized log-likelihood and (optionally) ascent gradients for a row
/// subset. Internal core shared by the public objective and the trainer.
///
/// Returns `Σ_j [log p(ŷ_j) + λ·Σ_k π_jk log π_jk]` over the given rows.
fn loglik_core(
    data: &MoEData,
    experts: &[ExpertModel],
    gate: &GatingModel,
    lambda: f64,
    mode: GateMode,
    rows: &[usize],
    mut grads: Option<(&mut ExpertGrads, &mut MlpGradients)>,
) -> Result<f64> {
    let k = experts.len();
    let mut total = 0.0;
    let mut log_pi = vec![0.0; k];
    let mut pi = vec![0.0; k];
    let mut log_phi = vec![0.0; k];
    let mut resid = vec![0.0; k];

    for &j in rows {
        let x = data.x.row(j);
        let h0 = data.h0.row(j);
        let h1 = data.h1.row(j);
        let t = data.t[j];
        let y = data.y[j];

        // Gate forward (cached only when gradients are needed).
        let std_x;
        let gate_input: &[f64] = match &gate.scaler {
            Some(s) => {
                std_x = s.transform_row(x)?;
                &std_x
            }
            None => x,
        };
        let cache = gate.net.forward_cached(gate_input)?;
        let logits = cache.output();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut expsum = 0.0;
        for c in 0..k {
            let e = (logits[c] - max).exp();
            pi[c] = e;
            expsum += e;
        }
        let log_expsum = expsum.ln();
        for c in 0..k {
            pi[c] /= expsum;
            log_pi[c] = logits[c] - max - log_expsum;
        }

        for (c, ex) in experts.iter().enumerate() {
            let mu = ex.mu(h0, h1, t);
            let inv_sigma = (-ex.log_sigma).exp();
            let r = (y - mu) * inv_sigma;
            resid[c] = r;
            log_phi[c] = -0.5 * LN_2PI - ex.log_sigma - 0.5 * r * r;
        }

        let entropy: f64 = pi
            .iter()
            .zip(&log_pi)
            .map(|(p, lp)| if *p > 0.0 { p * lp } else { 0.0 })
            .sum();

        match mode {
            GateMode::Soft => {
                // log p = logsumexp(log π + log φ).
                let mut m = f64::NEG_INFINITY;
                for c in 0..k {
                    m = m.max(log_pi[c] + log_phi[c]);
                }
                let mut s = 0.0;
                for c in 0..k {
                    s += (log_pi[c] + log_phi[c] - m).exp();
                }
                let log_p = m + s.ln();
                total += log_p + lambda * entropy;

                if let Some((eg, gg)) = grads.as_mut() {
                    // Posterior responsibilities r_c.
                    let mut d_logits = vec![0.0; k];
                    let mut r_sum_pi = 0.0;
                    let mut r = vec![0.0; k];
                    for c in 0..k {
                        r[c] = (log_pi[c] + log_phi[c] - log_p).exp();
                        r_sum_pi += r[c];
                    }
                    let _ = r_sum_pi;
                    for c in 0..k {
                        let d_mu = r[c] * resid[c] * (-experts[c].log_sigma).exp();
                        eg.add_mu_grad(c, d_mu, h0, h1, t);
                        eg.add_log_sigma_grad(c, r[c] * (resid[c] * resid[c] - 1.0));
                        // log p part: r_c − π_c; entropy part: λ·π_c(log π_c − E).
                        d_logits[c] =
                            (r[c] - pi[c]) + lambda * pi[c] * (log_pi[c] - entropy);
                    }
                    gate.net.backward(&cache, &d_logits, gg)?;
                }
            }
            GateMode::Hard => {
                let sel = argmax_index(&pi);
                let log_p = log_phi[sel];
                total += log_p + lambda * entropy;

                if let Some((eg, gg)) = grads.as_mut() {
                    let d_mu = resid[sel] * (-experts[sel].log_sigma).exp();
                    eg.add_mu_grad(sel, d_mu, h0, h1, t);
                    eg.add_log_sigma_grad(sel, resid[sel] * resid[sel] - 1.0);

                    // Straight-through: d log p / d π̃_c = φ_c/φ_sel,
                    // passed to the soft responsibilities unchanged.
                    let mut upstream = vec![0.0; k];
                    for c in 0..k {
                        let ratio = (log_phi[c] - log_phi[sel]).min(STE_LOG_RATIO_CAP);
                        upstream[c] = ratio.exp();
                    }
                    let mut d_logits = ste_gate_backward(&pi, &upstream);
                    for c in 0..k {
                        d_logits[c] += lambda * pi[c] * (log_pi[c] - entropy);
                    }
                    gate.net.backward(&cache, &d_logits, gg)?;
                }
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::Training("non-finite penalized log-likelihood".into()));
    }
    Ok(total)
}

/// Entropy-penalized mixture log-likelihood of a perturbation set:
/// `Σ_j log Σ_k π_jk·N(ŷ_j | μ_k, σ_k²) + λ·Σ_j π_jᵀ log π_j`.
/// In hard mode the mixture collapses to the selected expert's density
/// while the entropy term stays soft.
pub fn penalized_loglik(
    pset: &PerturbationSet,
    experts: &[ExpertModel],
    gate: &GatingModel,
    cfg: &MoEConfig,
    mode: GateMode,
) -> Result<f64> {
    let data = MoEData::build(pset, cfg)?;
    let rows: Vec<usize> = (0..pset.m()).collect();
    loglik_core(&data, experts, gate, cfg.lambda, mode, &rows, None)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Final mean penalized log-likelihood per sample (hard mode).
    pub final_loglik: f64,
    /// Fraction of rows hard-assigned to each expert.
    pub usage: Vec<f64>,
    /// Experts with zero usage after training.
    pub collapsed: Vec<usize>,
    /// R² of the hard-gated mixture mean against the predictions over the
    /// full perturbation set.
    pub local_r2: f64,
    pub epochs_run: usize,
    pub warnings: Vec<String>,
}

/// Trained surrogate: experts, gate, and the feature specs that built the
/// design rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoESurrogate {
    pub experts: Vec<ExpertModel>,
    pub gate: GatingModel,
    pub h0: FeatureSpec,
    pub h1: FeatureSpec,
    pub lambda: f64,
    pub diagnostics: FitDiagnostics,
}

impl MoESurrogate {
    /// Mean prediction of the hard-selected expert for a raw `(t, x)` row.
    pub fn predict_hard(&self, t: f64, x: &[f64]) -> Result<f64> {
        let pi = responsibilities(&self.gate, x)?;
        let sel = argmax_index(&pi);
        let ex = &self.experts[sel];
        Ok(ex.mu(&self.h0.eval(x), &self.h1.eval(x), t))
    }
}

/// Swap expert labels together with the matching gate output units. The
/// penalized log-likelihood is invariant under this relabeling.
pub fn permute_experts(surrogate: &mut MoESurrogate, perm: &[usize]) -> Result<()> {
    if perm.len() != surrogate.experts.len() {
        return Err(Error::Shape {
            context: "permute_experts",
            expected: surrogate.experts.len(),
            actual: perm.len(),
        });
    }
    surrogate.experts = perm.iter().map(|&i| surrogate.experts[i].clone()).collect();
    surrogate.gate.net.permute_output_units(perm)?;
    Ok(())
}

/// Seeded k-means over standardized rows; returns per-row cluster labels.
/// Empty clusters are re-seeded at the row farthest from its center.
fn kmeans_labels(x: &Matrix, k: usize, rng: &mut Rng) -> Vec<usize> {
    let m = x.rows();
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
    };

    // k-means++ seeding.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = (rng.uniform() * m as f64) as usize % m;
    centers.push(x.row(first).to_vec());
    let mut d2 = vec![f64::INFINITY; m];
    while centers.len() < k {
        let latest = centers.last().unwrap();
        let mut total = 0.0;
        for j in 0..m {
            d2[j] = d2[j].min(dist2(x.row(j), latest));
            total += d2[j];
        }
        let mut target = rng.uniform() * total;
        let mut pick = m - 1;
        for (j, w) in d2.iter().enumerate() {
            target -= w;
            if target <= 0.0 {
                pick = j;
                break;
            }
        }
        centers.push(x.row(pick).to_vec());
    }

    let mut labels = vec![0usize; m];
    for _ in 0..8 {
        for j in 0..m {
            let row = x.row(j);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = dist2(row, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            labels[j] = best;
        }
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; x.cols()]; k];
        for j in 0..m {
            counts[labels[j]] += 1;
            for (s, v) in sums[labels[j]].iter_mut().zip(x.row(j)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed at the row farthest from its own center.
                let far = (0..m)
                    .max_by(|&a, &b| {
                        dist2(x.row(a), &centers[labels[a]])
                            .partial_cmp(&dist2(x.row(b), &centers[labels[b]]))
                            .unwrap()
                    })
                    .unwrap();
                centers[c] = x.row(far).to_vec();
            } else {
                for (cc, s) in centers[c].iter_mut().zip(&sums[c]) {
                    *cc = s / counts[c] as f64;
                }
            }
        }
    }
    labels
}

/// Initialization partition used by one restart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitPartition {
    /// k-means on the standardized covariates.
    Spatial,
    /// k-means on the standardized covariates lifted with the black-box
    /// treatment contrast, so clusters respect effect regimes.
    EffectLifted,
}

/// Fit the mixture of experts on a subject's perturbation set.
///
/// Runs `restarts` independent fits (distinct child streams, alternating
/// initialization partitions) and keeps the one with the best final
/// penalized log-likelihood.
pub fn fit_surrogate(pset: &PerturbationSet, cfg: &MoEConfig, rng: Rng) -> Result<MoESurrogate> {
    cfg.validate(pset.m())?;
    let restarts = cfg.restarts.max(1);
    let has_contrast = pset.y_hat_flipped.len() == pset.m();
    let mut best: Option<MoESurrogate> = None;
    for r in 0..restarts {
        let partition = if has_contrast && r % 2 == 0 {
            InitPartition::EffectLifted
        } else {
            InitPartition::Spatial
        };
        let fit =
            fit_surrogate_once(pset, cfg, rng.child(&format!("restart:{r}")), partition)?;
        let better = best
            .as_ref()
            .map(|b| fit.diagnostics.final_loglik > b.diagnostics.final_loglik)
            .unwrap_or(true);
        if better {
            best = Some(fit);
        }
    }
    Ok(best.unwrap())
}

/// One mixture fit: experts initialize from per-patch least squares over a
/// k-means partition (falling back to the global fit for thin patches);
/// the gate pre-trains toward the same partition, then everything
/// optimizes jointly — soft gating for `warmup_epochs`, straight-through
/// hard gating afterwards. Early-stops on the epoch loss within the hard
/// phase.
fn fit_surrogate_once(
    pset: &PerturbationSet,
    cfg: &MoEConfig,
    mut rng: Rng,
    partition: InitPartition,
) -> Result<MoESurrogate> {
    let data = MoEData::build(pset, cfg)?;
    let m = pset.m();
    let p = pset.p();
    let q0 = cfg.h0.len();
    let q1 = cfg.h1.len();

    // Design rows [H0 | T·H1] for the least-squares initializations.
    let mut design_rows = Vec::with_capacity(m);
    for j in 0..m {
        let mut row = Vec::with_capacity(q0 + q1);
        row.extend_from_slice(data.h0.row(j));
        for h in data.h1.row(j) {
            row.push(h * data.t[j]);
        }
        design_rows.push(row);
    }
    let design = Matrix::from_rows(&design_rows)?;
    let global_ls = weighted_least_squares(&design, &data.y, None, 1e-8)?;
    if global_ls.ridge_applied {
        log::warn!("global least-squares init needed ridge {:.1e}", global_ls.ridge);
    }

    let scaler = Standardizer::fit(&data.x);
    let x_std = scaler.transform(&data.x)?;
    let labels = if cfg.k > 1 {
        match partition {
            InitPartition::Spatial => kmeans_labels(&x_std, cfg.k, &mut rng),
            InitPartition::EffectLifted => {
                // Contrast Δ̂_j in the direction treated-minus-control,
                // standardized and upweighted so clusters track effect
                // regimes as well as position.
                let deltas: Vec<f64> = (0..m)
                    .map(|j| {
                        let signed = data.y[j] - pset.y_hat_flipped[j];
                        if data.t[j] == 1.0 {
                            signed
                        } else {
                            -signed
                        }
                    })
                    .collect();
                let sd = crate::numkit::sample_sd(&deltas).max(1e-12);
                let mean = crate::numkit::mean(&deltas);
                let mut lifted_rows = Vec::with_capacity(m);
                for j in 0..m {
                    let mut row = x_std.row(j).to_vec();
                    row.push(2.0 * (deltas[j] - mean) / sd);
                    lifted_rows.push(row);
                }
                kmeans_labels(&Matrix::from_rows(&lifted_rows)?, cfg.k, &mut rng)
            }
        }
    } else {
        vec![0; m]
    };

    // Experts start at the least-squares fit of their own spatial patch
    // (falling back to the global fit for thin patches), plus jitter.
    let mut experts: Vec<ExpertModel> = Vec::with_capacity(cfg.k);
    for c in 0..cfg.k {
        let members: Vec<usize> = (0..m).filter(|&j| labels[j] == c).collect();
        let solution = if members.len() >= 10 * (q0 + q1) {
            let rows: Vec<Vec<f64>> =
                members.iter().map(|&j| design_rows[j].clone()).collect();
            let ys: Vec<f64> = members.iter().map(|&j| data.y[j]).collect();
            match weighted_least_squares(&Matrix::from_rows(&rows)?, &ys, None, 1e-8) {
                Ok(fit) => fit.solution,
                Err(_) => global_ls.solution.clone(),
            }
        } else {
            global_ls.solution.clone()
        };
        experts.push(ExpertModel {
            beta1: solution[..q0]
                .iter()
                .map(|b| b + cfg.init_jitter * rng.normal())
                .collect(),
            beta2: solution[q0..]
                .iter()
                .map(|b| b + cfg.init_jitter * rng.normal())
                .collect(),
            log_sigma: 0.0,
        });
    }

    let mut gate_sizes = vec![p];
    gate_sizes.extend_from_slice(&cfg.gate_hidden);
    gate_sizes.push(cfg.k);
    let mut gate_acts = vec![Activation::Relu; cfg.gate_hidden.len()];
    gate_acts.push(Activation::Identity);
    let gate_net = MlpModel::new(&gate_sizes, &gate_acts, &mut rng)?;
    let mut gate = GatingModel {
        net: gate_net,
        scaler: Some(scaler),
    };

    if cfg.gate_pretrain_epochs > 0 && cfg.k > 1 {
        // Warm the gate toward the same spatial partition so early expert
        // specialization happens on contiguous patches.
        let mut state = AdamWState::new(
            gate.net.param_count(),
            AdamWConfig::with_learning_rate(cfg.gate_lr),
        )?;
        let mut grads = MlpGradients::zeros_like(&gate.net);
        let mut order: Vec<usize> = (0..m).collect();
        for epoch in 0..cfg.gate_pretrain_epochs {
            rng.shuffle(&mut order);
            for batch in order.chunks(cfg.batch_size) {
                grads.zero();
                for &j in batch {
                    let cache = gate.net.forward_cached(x_std.row(j))?;
                    let mut d_logits = softmax(cache.output());
                    d_logits[labels[j]] -= 1.0;
                    gate.net.backward(&cache, &d_logits, &mut grads)?;
                }
                grads.scale(1.0 / batch.len() as f64);
                adamw_step(gate.net.params_mut(), grads.params(), &mut state)
                    .map_err(|e| Error::Training(format!("gate pretrain {epoch}: {e}")))?;
            }
        }
    }

    let mut expert_state = AdamWState::new(
        expert_param_count(&experts),
        AdamWConfig {
            learning_rate: cfg.expert_lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    )?;
    let mut gate_state = AdamWState::new(
        gate.net.param_count(),
        AdamWConfig::with_learning_rate(cfg.gate_lr),
    )?;
    let mut expert_grads = ExpertGrads::zeros(cfg.k, q0, q1);
    let mut gate_grads = MlpGradients::zeros_like(&gate.net);

    let min_log_sigma = cfg.min_sigma.ln();
    let mut order: Vec<usize> = (0..m).collect();
    let mut best_loss = f64::INFINITY;
    let mut since_best = 0usize;
    let mut in_hard_phase = false;
    let mut epochs_run = 0;
    let mut warnings = Vec::new();

    for epoch in 0..cfg.max_epochs {
        let mode = if epoch < cfg.warmup_epochs {
            GateMode::Soft
        } else {
            GateMode::Hard
        };
        if mode == GateMode::Hard && !in_hard_phase {
            // Phase switch changes the objective; restart the stopper.
            in_hard_phase = true;
            best_loss = f64::INFINITY;
            since_best = 0;
        }
        // Ramp the entropy penalty in across the warmup so the gate cannot
        // commit to a single expert before the experts differentiate.
        let lambda_eff = if cfg.warmup_epochs > 0 {
            cfg.lambda * (epoch as f64 / cfg.warmup_epochs as f64).min(1.0)
        } else {
            cfg.lambda
        };

        rng.shuffle(&mut order);
        let mut epoch_loglik = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            expert_grads.zero();
            gate_grads.zero();
            let ll = loglik_core(
                &data,
                &experts,
                &gate,
                lambda_eff,
                mode,
                batch,
                Some((&mut expert_grads, &mut gate_grads)),
            )
            .map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;
            epoch_loglik += ll;
            // Ascent gradients, negated and averaged for the minimizer.
            let s = -1.0 / batch.len() as f64;
            expert_grads.scale(s);
            gate_grads.scale(s);
            adamw_step(
                expert_params_mut(&mut experts),
                expert_grads.flat.iter(),
                &mut expert_state,
            )
            .map_err(|e| Error::Training(format!("epoch {epoch} experts: {e}")))?;
            adamw_step(gate.net.params_mut(), gate_grads.params(), &mut gate_state)
                .map_err(|e| Error::Training(format!("epoch {epoch} gate: {e}")))?;
            for ex in &mut experts {
                if ex.log_sigma < min_log_sigma {
                    ex.log_sigma = min_log_sigma;
                }
            }
        }
        epochs_run = epoch + 1;
        let epoch_loss = -epoch_loglik / m as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Training(format!(
                "diverged at epoch {epoch}: non-finite loss"
            )));
        }
        if epoch_loss < best_loss - 1e-7 * best_loss.abs().max(1.0) {
            best_loss = epoch_loss;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience && in_hard_phase {
                break;
            }
        }
        expert_state.config.learning_rate *= cfg.lr_decay;
        gate_state.config.learning_rate *= cfg.lr_decay;
    }

    // Diagnostics on the full set in hard mode.
    let rows_all: Vec<usize> = (0..m).collect();
    let final_loglik =
        loglik_core(&data, &experts, &gate, cfg.lambda, GateMode::Hard, &rows_all, None)?
            / m as f64;
    let mut counts = vec![0usize; cfg.k];
    let mut preds = Vec::with_capacity(m);
    for j in 0..m {
        let pi = responsibilities(&gate, data.x.row(j))?;
        let sel = argmax_index(&pi);
        counts[sel] += 1;
        preds.push(experts[sel].mu(data.h0.row(j), data.h1.row(j), data.t[j]));
    }
    let usage: Vec<f64> = counts.iter().map(|c| *c as f64 / m as f64).collect();
    let collapsed: Vec<usize> = usage
        .iter()
        .enumerate()
        .filter(|(_, u)| **u == 0.0)
        .map(|(i, _)| i)
        .collect();
    for &c in &collapsed {
        let w = format!("expert {c} collapsed (zero usage after training)");
        log::warn!("{w}");
        warnings.push(w);
    }
    let fid = eval::local_fidelity(&preds, &data.y);
    let diagnostics = FitDiagnostics {
        final_loglik,
        usage,
        collapsed,
        local_r2: fid.r2.unwrap_or(f64::NAN),
        epochs_run,
        warnings,
    };

    Ok(MoESurrogate {
        experts,
        gate,
        h0: cfg.h0.clone(),
        h1: cfg.h1.clone(),
        lambda: cfg.lambda,
        diagnostics,
    })
}

/// Subject-level explanation: selected expert, its coefficients, the
/// recommended treatment, and neighborhood fidelity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Explanation {
    pub subject_id: usize,
    pub method: String,
    pub selected_expert: Option<usize>,
    pub beta_k1: Option<Vec<f64>>,
    pub beta_k2: Option<Vec<f64>>,
    pub recommended_t: u8,
    pub local_r2: Option<f64>,
    pub gate_distribution: Option<Vec<f64>>,
    /// Mean |surrogate − black-box| over the fidelity rows, outcome units.
    pub mean_abs_diff: Option<f64>,
}

/// Build the explanation for a subject from its fitted surrogate.
///
/// The subject's own covariates pick the expert through the gate; the
/// recommendation is `1` iff the selected expert's treatment effect at the
/// subject is positive (ties to 0). Fidelity is measured on the rows of
/// the subject's perturbation set hard-gated to the selected expert.
pub fn explain_subject(
    x_subject: &[f64],
    surrogate: &MoESurrogate,
    pset: &PerturbationSet,
) -> Result<Explanation> {
    let pi = responsibilities(&surrogate.gate, x_subject)?;
    let sel = argmax_index(&pi);
    let expert = &surrogate.experts[sel];
    let h1_subject = surrogate.h1.eval(x_subject);
    let recommended_t = u8::from(expert.effect(&h1_subject) > 0.0);

    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for j in 0..pset.m() {
        let x = pset.x_row(j);
        let row_pi = responsibilities(&surrogate.gate, x)?;
        if argmax_index(&row_pi) == sel {
            preds.push(expert.mu(
                &surrogate.h0.eval(x),
                &surrogate.h1.eval(x),
                pset.t_row(j),
            ));
            targets.push(pset.y_hat[j]);
        }
    }
    let fid = eval::local_fidelity(&preds, &targets);

    Ok(Explanation {
        subject_id: pset.subject_id,
        method: "li-itr".to_string(),
        selected_expert: Some(sel),
        beta_k1: Some(expert.beta1.clone()),
        beta_k2: Some(expert.beta2.clone()),
        recommended_t,
        local_r2: fid.r2,
        gate_distribution: Some(pi),
        mean_abs_diff: fid.mean_abs_diff,
    })
}
