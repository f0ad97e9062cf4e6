//! The base classifier: a softmax-output MLP with hand-written
//! backpropagation and minibatch SGD.
//!
//! The network predicts clean-class probabilities. When a noise layer sits
//! on top, its gradient with respect to those probabilities is threaded in
//! through [`Upstream::ProbGrad`]; plain cross-entropy training against
//! labels uses [`Upstream::Labels`]. Both variants funnel through the same
//! softmax backward pass, so a run with the noise layer pinned to the
//! identity reproduces plain training bit for bit.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::rng::RunRng;
use crate::{Error, Result};

/// Clamp inside every `log`: keeps losses and gradients finite when a
/// probability underflows to zero.
pub const LOG_EPS: f64 = 1e-12;

/// `-ln(max(x, LOG_EPS))`.
#[inline]
pub(crate) fn neg_log(x: f64) -> f64 {
    -x.max(LOG_EPS).ln()
}

/// SGD hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Weights and biases of the MLP; `weights[l]` maps layer `l`'s input to
/// its output, stored `(in, out)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Gradients (or momentum velocities) shaped like an [`Mlp`].
#[derive(Debug, Clone)]
pub struct Grads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Grads {
    pub fn zeros_like(model: &Mlp) -> Self {
        Grads {
            weights: model.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: model.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }
}

/// What drives the backward pass.
pub enum Upstream<'a> {
    /// Plain cross-entropy against these class labels.
    Labels(&'a [usize]),
    /// Per-sample gradient of the loss with respect to the output
    /// probabilities (already divided by the batch size).
    ProbGrad(&'a Array2<f64>),
}

/// Activations recorded during a forward pass, consumed by `backward`.
pub struct ForwardCache {
    /// `acts[l]` is the input to layer `l`; `acts[0]` is the batch itself.
    acts: Vec<Array2<f64>>,
    pub probs: Array2<f64>,
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
    out
}

impl Mlp {
    /// Fresh network with layer sizes `dims = [input, hidden.., output]`.
    /// Weights start uniform in `[-a, a]` with `a = sqrt(6/(fan_in+fan_out))`,
    /// biases at zero.
    pub fn init(dims: &[usize], rng: &mut RunRng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("need at least input and output dims"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| {
                rng.uniform_in(-a, a)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Mlp { weights, biases })
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().expect("at least one layer").ncols()
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.weights.iter().map(|w| w.ncols()));
        dims
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "batch has {} features, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass keeping the per-layer activations for `backward`.
    pub fn forward_cache(&self, x: &Array2<f64>) -> Result<ForwardCache> {
        self.check_input(x)?;
        let mut acts = vec![x.clone()];
        let last = self.weights.len() - 1;
        for l in 0..last {
            let z = acts[l].dot(&self.weights[l]) + &self.biases[l];
            acts.push(z.mapv(|v| v.max(0.0)));
        }
        let logits = acts[last].dot(&self.weights[last]) + &self.biases[last];
        Ok(ForwardCache {
            acts,
            probs: softmax_rows(&logits),
        })
    }

    /// Class probabilities for a batch; each row lies on the simplex.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cache(x)?.probs)
    }

    /// Persist as JSON; shapes and values round-trip exactly.
    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Mlp> {
        let text = std::fs::read_to_string(path)?;
        let model: Mlp = serde_json::from_str(&text)?;
        if model.weights.is_empty() || model.weights.len() != model.biases.len() {
            return Err(Error::Parse("model layers are inconsistent".into()));
        }
        for l in 0..model.weights.len() {
            if model.biases[l].len() != model.weights[l].ncols() {
                return Err(Error::Parse(format!("bias {l} does not match its weight")));
            }
            if l + 1 < model.weights.len()
                && model.weights[l].ncols() != model.weights[l + 1].nrows()
            {
                return Err(Error::Parse(format!("weights {l} and {} do not chain", l + 1)));
            }
            if !model.weights[l].iter().all(|x| x.is_finite()) {
                return Err(Error::Parse(format!("weight {l} has non-finite entries")));
            }
        }
        Ok(model)
    }

    /// Exact gradients of the batch-mean loss selected by `upstream`.
    pub fn backward(&self, cache: &ForwardCache, upstream: Upstream<'_>) -> Result<Grads> {
        let probs = &cache.probs;
        let (n, k) = probs.dim();
        let prob_grad_storage;
        let prob_grad = match upstream {
            Upstream::Labels(labels) => {
                if labels.len() != n {
                    return Err(Error::invalid("label count does not match batch"));
                }
                let mut g = Array2::zeros((n, k));
                for (row, &y) in labels.iter().enumerate() {
                    if y >= k {
                        return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
                    }
                    // Samples on the loss clamp contribute zero gradient,
                    // mirroring the noise layer's backward pass.
                    if probs[[row, y]] > LOG_EPS {
                        g[[row, y]] = -1.0 / (probs[[row, y]] * n as f64);
                    }
                }
                prob_grad_storage = g;
                &prob_grad_storage
            }
            Upstream::ProbGrad(g) => {
                if g.dim() != (n, k) {
                    return Err(Error::invalid(format!(
                        "upstream gradient shape {:?} does not match probabilities {:?}",
                        g.dim(),
                        probs.dim()
                    )));
                }
                g
            }
        };

        // Softmax backward: dz_k = p_k * (g_k - sum_j g_j p_j) per row.
        let mut dz = Array2::zeros((n, k));
        for row in 0..n {
            let mut dot = 0.0;
            for j in 0..k {
                dot += prob_grad[[row, j]] * probs[[row, j]];
            }
            for j in 0..k {
                dz[[row, j]] = probs[[row, j]] * (prob_grad[[row, j]] - dot);
            }
        }

        let mut grads = Grads::zeros_like(self);
        for l in (0..self.weights.len()).rev() {
            grads.weights[l] = cache.acts[l].t().dot(&dz);
            grads.biases[l] = dz.sum_axis(Axis(0));
            if l > 0 {
                let da = dz.dot(&self.weights[l].t());
                // ReLU gate: acts[l] is the post-activation output of layer l-1.
                dz = da * cache.acts[l].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            }
        }
        Ok(grads)
    }
}

/// Mean negative log-likelihood of `labels` under `probs`.
pub fn nll_loss(probs: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let (n, k) = probs.dim();
    if labels.len() != n {
        return Err(Error::invalid("label count does not match batch"));
    }
    let mut total = 0.0;
    for (row, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
        }
        total += neg_log(probs[[row, y]]);
    }
    Ok(total / n as f64)
}

/// One SGD step with momentum and weight decay:
/// `v <- momentum*v - lr*(grad + wd*param); param <- param + v`.
pub fn sgd_step(
    params: &mut Mlp,
    grads: &Grads,
    hyper: &TrainHyper,
    velocity: &mut Grads,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Diverged("non-finite parameter gradient".into()));
    }
    let lr = hyper.learning_rate;
    let mu = hyper.momentum;
    let wd = hyper.weight_decay;
    for l in 0..params.weights.len() {
        azip_update(&mut params.weights[l], &grads.weights[l], &mut velocity.weights[l], lr, mu, wd);
        let (b, g, v) = (&mut params.biases[l], &grads.biases[l], &mut velocity.biases[l]);
        for i in 0..b.len() {
            v[i] = mu * v[i] - lr * (g[i] + wd * b[i]);
            b[i] += v[i];
        }
    }
    Ok(())
}

fn azip_update(p: &mut Array2<f64>, g: &Array2<f64>, v: &mut Array2<f64>, lr: f64, mu: f64, wd: f64) {
    ndarray::Zip::from(p).and(g).and(v).for_each(|p, &g, v| {
        *v = mu * *v - lr * (g + wd * *p);
        *p += *v;
    });
}
