//! Feed-forward networks with reverse-mode gradients.
//!
//! Layer `l` maps an activation vector of size `layer_sizes[l]` to
//! `layer_sizes[l+1]` via `act(W x + b)`. Weights are row-major with shape
//! `(out, in)`. Backward passes accumulate into a caller-owned
//! [`MlpGradients`] so minibatch loops reuse buffers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through pre-activation `x` and output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Multilayer perceptron.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpModel {
    layer_sizes: Vec<usize>,
    activations: Vec<Activation>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

impl MlpModel {
    /// Random initialization: He-uniform for relu layers, Xavier-uniform
    /// otherwise.
    pub fn new(layer_sizes: &[usize], activations: &[Activation], rng: &mut Rng) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        if activations.len() != layer_sizes.len() - 1 {
            return Err(Error::Shape {
                context: "MlpModel::new activations",
                expected: layer_sizes.len() - 1,
                actual: activations.len(),
            });
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, act) in activations.iter().enumerate() {
            let fan_in = layer_sizes[l];
            let fan_out = layer_sizes[l + 1];
            let limit = match act {
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            let mut w = Matrix::zeros(fan_out, fan_in);
            for v in w.data_mut() {
                *v = rng.uniform_in(-limit, limit);
            }
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            activations: activations.to_vec(),
            weights,
            biases,
        })
    }

    /// Build from explicit weights and biases (used by tests and loading).
    pub fn from_parts(
        layer_sizes: Vec<usize>,
        activations: Vec<Activation>,
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if activations.len() + 1 != layer_sizes.len()
            || weights.len() != activations.len()
            || biases.len() != activations.len()
        {
            return Err(Error::Config("inconsistent layer counts".into()));
        }
        for l in 0..weights.len() {
            if weights[l].rows() != layer_sizes[l + 1]
                || weights[l].cols() != layer_sizes[l]
                || biases[l].len() != layer_sizes[l + 1]
            {
                return Err(Error::Shape {
                    context: "MlpModel::from_parts",
                    expected: layer_sizes[l + 1],
                    actual: weights[l].rows(),
                });
            }
        }
        Ok(Self {
            layer_sizes,
            activations,
            weights,
            biases,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .map(|w| w.rows() * w.cols())
            .sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Mutable iteration over every parameter in a fixed order
    /// (per layer: weights row-major, then bias).
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.data_mut().iter_mut().chain(b.iter_mut()))
    }

    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .zip(self.biases.iter())
            .flat_map(|(w, b)| w.data().iter().chain(b.iter()))
            .copied()
    }

    pub fn export_params(&self) -> Vec<f64> {
        self.params().collect()
    }

    pub fn import_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape {
                context: "MlpModel::import_params",
                expected: self.param_count(),
                actual: flat.len(),
            });
        }
        for (p, v) in self.params_mut().zip(flat) {
            *p = *v;
        }
        Ok(())
    }

    /// Reorder the output units: unit `i` of the permuted network is unit
    /// `perm[i]` of the original. Used for label-switching checks on
    /// networks whose outputs are exchangeable.
    pub fn permute_output_units(&mut self, perm: &[usize]) -> Result<()> {
        let last = self.weights.len() - 1;
        let w = &self.weights[last];
        if perm.len() != w.rows() {
            return Err(Error::Shape {
                context: "permute_output_units",
                expected: w.rows(),
                actual: perm.len(),
            });
        }
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| w.row(i).to_vec()).collect();
        self.weights[last] = Matrix::from_rows(&rows)?;
        let b = &self.biases[last];
        self.biases[last] = perm.iter().map(|&i| b[i]).collect();
        Ok(())
    }

    /// Zero the final layer's weights and bias so the network starts as a
    /// constant zero map. With standardized targets this is the mean
    /// predictor, which keeps early training stable and makes degenerate
    /// constant-target fits exact.
    pub fn zero_output_layer(&mut self) {
        if let Some(w) = self.weights.last_mut() {
            w.fill(0.0);
        }
        if let Some(b) = self.biases.last_mut() {
            b.fill(0.0);
        }
    }

    /// Layer index owning the parameter at the given flat position.
    pub fn layer_of_param(&self, mut index: usize) -> usize {
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let span = w.rows() * w.cols() + b.len();
            if index < span {
                return l;
            }
            index -= span;
        }
        self.weights.len().saturating_sub(1)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape {
                context: "MlpModel::forward",
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        let mut cur = input.to_vec();
        for (l, act) in self.activations.iter().enumerate() {
            let mut next = vec![0.0; self.layer_sizes[l + 1]];
            self.weights[l].mul_vec_into(&cur, &mut next);
            for (v, b) in next.iter_mut().zip(&self.biases[l]) {
                *v = act.apply(*v + b);
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Forward pass retaining pre-activations and activations for backward.
    pub fn forward_cached(&self, input: &[f64]) -> Result<MlpCache> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape {
                context: "MlpModel::forward_cached",
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        let mut acts = Vec::with_capacity(self.activations.len() + 1);
        let mut preacts = Vec::with_capacity(self.activations.len());
        acts.push(input.to_vec());
        for (l, act) in self.activations.iter().enumerate() {
            let mut pre = vec![0.0; self.layer_sizes[l + 1]];
            self.weights[l].mul_vec_into(acts.last().unwrap(), &mut pre);
            for (v, b) in pre.iter_mut().zip(&self.biases[l]) {
                *v += b;
            }
            let out: Vec<f64> = pre.iter().map(|&x| act.apply(x)).collect();
            preacts.push(pre);
            acts.push(out);
        }
        Ok(MlpCache { preacts, acts })
    }

    /// Backpropagate `output_grad` (gradient of the loss with respect to
    /// the network output) through a cached forward pass. Accumulates
    /// parameter gradients into `grads` and returns the gradient with
    /// respect to the input.
    pub fn backward(
        &self,
        cache: &MlpCache,
        output_grad: &[f64],
        grads: &mut MlpGradients,
    ) -> Result<Vec<f64>> {
        if cache.acts.len() != self.activations.len() + 1
            || cache.acts[0].len() != self.input_dim()
        {
            return Err(Error::Usage(
                "cache does not match this network (stale or from another model)".into(),
            ));
        }
        if output_grad.len() != self.output_dim() {
            return Err(Error::Shape {
                context: "MlpModel::backward",
                expected: self.output_dim(),
                actual: output_grad.len(),
            });
        }
        if grads.weights.len() != self.weights.len() {
            return Err(Error::Usage("gradient buffer shape mismatch".into()));
        }

        let mut delta = output_grad.to_vec();
        for l in (0..self.activations.len()).rev() {
            let act = self.activations[l];
            let pre = &cache.preacts[l];
            let out = &cache.acts[l + 1];
            for ((d, &x), &y) in delta.iter_mut().zip(pre).zip(out) {
                *d *= act.derivative(x, y);
            }
            grads.weights[l].add_outer(&delta, &cache.acts[l]);
            for (g, d) in grads.biases[l].iter_mut().zip(&delta) {
                *g += d;
            }
            let mut prev = vec![0.0; self.layer_sizes[l]];
            self.weights[l].tmul_vec_into(&delta, &mut prev);
            delta = prev;
        }
        Ok(delta)
    }
}

/// Intermediate activations from [`MlpModel::forward_cached`]. The cache
/// carries its own input (`acts[0]`), so it is always consistent with the
/// pass that produced it.
#[derive(Debug, Clone)]
pub struct MlpCache {
    preacts: Vec<Vec<f64>>,
    acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    pub fn input(&self) -> &[f64] {
        &self.acts[0]
    }
}

/// Parameter gradients shaped like an [`MlpModel`].
#[derive(Debug, Clone)]
pub struct MlpGradients {
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

impl MlpGradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        for w in &mut self.weights {
            w.fill(0.0);
        }
        for b in &mut self.biases {
            b.fill(0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            for v in w.data_mut() {
                *v *= s;
            }
        }
        for b in &mut self.biases {
            for v in b {
                *v *= s;
            }
        }
    }

    /// Iteration order matches [`MlpModel::params_mut`].
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(self.biases.iter())
            .flat_map(|(w, b)| w.data().iter().chain(b.iter()))
    }

    pub fn export(&self) -> Vec<f64> {
        self.params().copied().collect()
    }
}

/// Central finite-difference gradient of `f` at `params` with step `h`.
pub fn finite_diff_gradient<F: FnMut(&[f64]) -> f64>(
    params: &[f64],
    h: f64,
    mut f: F,
) -> Vec<f64> {
    let mut work = params.to_vec();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + h;
        let up = f(&work);
        work[i] = orig - h;
        let down = f(&work);
        work[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Max over coordinates of `|a - b| / (1 + |b|)`.
pub fn gradient_rel_error(analytic: &[f64], reference: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
        .fold(0.0, f64::max)
}
