//! Feed-forward networks and the two optimizers used on them.
//!
//! Networks are tanh-hidden multilayer perceptrons with either identity or softplus
//! output. Weights are initialized (and given Gaussian priors) at the Glorot scale
//! `sigma = g * sqrt(2 / (fan_in + fan_out))`; biases start at exactly zero and share
//! their layer's prior scale.
//!
//! [`adam_step`] is the standard Adam descent step (defaults `beta1 = 0.9`,
//! `beta2 = 0.999`, `eps = 1e-8`, `alpha = 1e-4`), used to fit the hedge network.
//! [`sgld_step`] is the Langevin ascent step on a log posterior,
//! `delta = (eps/2) (grad log p + grad log l) + eta`, `eta ~ N(0, eps)` i.i.d. per
//! coordinate; with noise disabled it degrades to plain gradient ascent with the
//! same half-step convention.

use crate::diffkit::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

/// Output-layer activation; hidden layers are always tanh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Softplus,
}

/// Glorot scale `g * sqrt(2 / (fan_in + fan_out))`.
pub fn glorot_sigma(fan_in: usize, fan_out: usize, gain: f64) -> f64 {
    gain * (2.0 / (fan_in + fan_out) as f64).sqrt()
}

/// A multilayer perceptron over row-major dense matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    output_activation: OutputActivation,
}

/// Graph bindings for one tape: the node ids of every layer's weight and bias leaf.
#[derive(Debug, Clone)]
pub struct MlpHandle {
    weight_ids: Vec<NodeId>,
    bias_ids: Vec<NodeId>,
}

impl Mlp {
    /// Builds a zero-initialized network with the given layer widths
    /// (`[input, hidden..., output]`).
    pub fn new(widths: &[usize], output_activation: OutputActivation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!(
                "network needs at least input and output widths, got {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!("zero layer width in {widths:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            weights.push(Tensor::zeros(&[pair[0], pair[1]]));
            biases.push(Tensor::zeros(&[pair[1]]));
        }
        Ok(Mlp {
            widths: widths.to_vec(),
            weights,
            biases,
            output_activation,
        })
    }

    /// Single-layer network that ignores its inputs and returns the given
    /// outputs at every row: all weights are zero and the biases solve the
    /// output activation. Pins a coefficient to known dynamics (for instance a
    /// constant volatility) inside the same machinery as trained networks.
    pub fn constant(input_dim: usize, outputs: &[f64], activation: OutputActivation) -> Result<Self> {
        let mut net = Mlp::new(&[input_dim, outputs.len()], activation)?;
        let mut flat = vec![0.0; net.param_count()];
        let wlen = input_dim * outputs.len();
        for (j, &out) in outputs.iter().enumerate() {
            flat[wlen + j] = match activation {
                OutputActivation::Softplus => {
                    if out <= 0.0 {
                        return Err(Error::NonPositive {
                            what: "softplus output level".to_string(),
                            value: out,
                        });
                    }
                    crate::diffkit::inv_softplus(out)
                }
                OutputActivation::Identity => out,
            };
        }
        net.set_flat_params(&flat)?;
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output_activation
    }

    /// Draws weights from `N(0, glorot_sigma^2)` per layer and zeroes biases.
    pub fn init_glorot(&mut self, gain: f64, rng: &mut impl Rng) {
        for (w, pair) in self.weights.iter_mut().zip(self.widths.windows(2)) {
            let sigma = glorot_sigma(pair[0], pair[1], gain);
            let normal = Normal::new(0.0, sigma).expect("positive sigma");
            for slot in w.data_mut() {
                *slot = normal.sample(rng);
            }
        }
        for b in &mut self.biases {
            for slot in b.data_mut() {
                *slot = 0.0;
            }
        }
    }

    /// Binds all parameters onto a tape; `trainable` controls whether gradients flow
    /// to them.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> MlpHandle {
        let weight_ids = self
            .weights
            .iter()
            .map(|w| g.leaf_as(w, trainable))
            .collect();
        let bias_ids = self
            .biases
            .iter()
            .map(|b| g.leaf_as(b, trainable))
            .collect();
        MlpHandle {
            weight_ids,
            bias_ids,
        }
    }

    /// Forward pass through bound parameters; `x` has shape `[rows, input_dim]`.
    pub fn forward(&self, g: &mut Graph, handle: &MlpHandle, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let last = self.weights.len() - 1;
        for l in 0..=last {
            h = g.affine(h, handle.weight_ids[l], handle.bias_ids[l])?;
            if l < last {
                h = g.tanh(h);
            }
        }
        Ok(match self.output_activation {
            OutputActivation::Identity => h,
            OutputActivation::Softplus => g.softplus_node(h),
        })
    }

    /// Plain inference on `rows` stacked inputs, bit-identical to the graph forward
    /// pass (same accumulation order).
    pub fn eval_rows(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        let din = self.input_dim();
        if x.len() != rows * din {
            return Err(Error::InvalidShape {
                op: "Mlp::eval_rows",
                shape: vec![rows, din],
                detail: format!("{} input values", x.len()),
            });
        }
        let mut cur = x.to_vec();
        let last = self.weights.len() - 1;
        let mut width_in = din;
        for l in 0..=last {
            let width_out = self.widths[l + 1];
            let w = self.weights[l].data();
            let b = self.biases[l].data();
            let mut next = vec![0.0; rows * width_out];
            crate::par::rowwise(&mut next, width_out, |r, row| {
                row.copy_from_slice(b);
                let xrow = &cur[r * width_in..(r + 1) * width_in];
                for (kk, &a) in xrow.iter().enumerate() {
                    let wrow = &w[kk * width_out..(kk + 1) * width_out];
                    for (o, &wj) in row.iter_mut().zip(wrow) {
                        *o += a * wj;
                    }
                }
            });
            if l < last {
                for v in &mut next {
                    *v = v.tanh();
                }
            } else if self.output_activation == OutputActivation::Softplus {
                for v in &mut next {
                    *v = crate::diffkit::softplus(*v);
                }
            }
            cur = next;
            width_in = width_out;
        }
        Ok(cur)
    }

    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .chain(self.biases.iter())
            .map(|t| t.len())
            .sum()
    }

    /// Flattens parameters layer by layer, weights before biases within a layer.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in 0..self.weights.len() {
            out.extend_from_slice(self.weights[l].data());
            out.extend_from_slice(self.biases[l].data());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::InvalidShape {
                op: "Mlp::set_flat_params",
                shape: vec![self.param_count()],
                detail: format!("{} values", flat.len()),
            });
        }
        let mut offset = 0;
        for l in 0..self.weights.len() {
            for t in [&mut self.weights[l], &mut self.biases[l]] {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    /// Reads the tape gradients for bound parameters in flat order; parameters that
    /// received no gradient contribute zeros.
    pub fn flat_grads(&self, g: &Graph, handle: &MlpHandle) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in 0..self.weights.len() {
            for (id, len) in [
                (handle.weight_ids[l], self.weights[l].len()),
                (handle.bias_ids[l], self.biases[l].len()),
            ] {
                match g.grad(id) {
                    Some(grad) => out.extend_from_slice(grad),
                    None => out.extend(std::iter::repeat(0.0).take(len)),
                }
            }
        }
        out
    }

    /// Per-parameter prior standard deviations in flat order: `override_sigma` if
    /// given, otherwise each layer's Glorot scale (biases share their layer's scale).
    pub fn prior_sigmas(&self, gain: f64, override_sigma: Option<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (l, pair) in self.widths.windows(2).enumerate() {
            let sigma = override_sigma.unwrap_or_else(|| glorot_sigma(pair[0], pair[1], gain));
            out.extend(std::iter::repeat(sigma).take(self.weights[l].len() + self.biases[l].len()));
        }
        out
    }

    /// Iterates the bound leaf ids in flat-order tensor pairs (weight, bias) per layer.
    pub fn handle_ids<'a>(&self, handle: &'a MlpHandle) -> impl Iterator<Item = NodeId> + 'a {
        handle
            .weight_ids
            .iter()
            .zip(handle.bias_ids.iter())
            .flat_map(|(w, b)| [*w, *b])
    }

    pub fn to_json(&self) -> MlpJson {
        MlpJson {
            layers: (0..self.weights.len())
                .map(|l| LayerJson {
                    rows: self.widths[l],
                    cols: self.widths[l + 1],
                    weights: self.weights[l].data().to_vec(),
                    biases: self.biases[l].data().to_vec(),
                })
                .collect(),
            hidden_activation: "tanh".to_string(),
            output_activation: match self.output_activation {
                OutputActivation::Identity => "identity".to_string(),
                OutputActivation::Softplus => "softplus".to_string(),
            },
        }
    }

    pub fn from_json(json: &MlpJson) -> Result<Self> {
        if json.hidden_activation != "tanh" {
            return Err(Error::Config(format!(
                "unsupported hidden activation {:?}",
                json.hidden_activation
            )));
        }
        let output_activation = match json.output_activation.as_str() {
            "identity" => OutputActivation::Identity,
            "softplus" => OutputActivation::Softplus,
            other => {
                return Err(Error::Config(format!(
                    "unsupported output activation {other:?}"
                )))
            }
        };
        if json.layers.is_empty() {
            return Err(Error::Config("network has no layers".to_string()));
        }
        let mut widths = vec![json.layers[0].rows];
        for layer in &json.layers {
            if layer.rows != *widths.last().unwrap() {
                return Err(Error::Config(format!(
                    "layer input width {} does not chain with previous output {}",
                    layer.rows,
                    widths.last().unwrap()
                )));
            }
            widths.push(layer.cols);
        }
        let mut mlp = Mlp::new(&widths, output_activation)?;
        for (l, layer) in json.layers.iter().enumerate() {
            if layer.weights.len() != layer.rows * layer.cols || layer.biases.len() != layer.cols {
                return Err(Error::Config(format!(
                    "layer {l} has {} weights and {} biases for shape {}x{}",
                    layer.weights.len(),
                    layer.biases.len(),
                    layer.rows,
                    layer.cols
                )));
            }
            mlp.weights[l].data_mut().copy_from_slice(&layer.weights);
            mlp.biases[l].data_mut().copy_from_slice(&layer.biases);
        }
        Ok(mlp)
    }
}

/// Serialized network: row-major weight matrices per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpJson {
    pub layers: Vec<LayerJson>,
    pub hidden_activation: String,
    pub output_activation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerJson {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Adam moment buffers and hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(dim: usize, alpha: f64) -> Self {
        AdamState {
            alpha,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }
}

/// One Adam descent step in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), state.m.len()],
        });
    }
    state.t += 1;
    let b1t = 1.0 - state.beta1.powi(state.t as i32);
    let b2t = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / b1t;
        let v_hat = state.v[i] / b2t;
        params[i] -= state.alpha * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Langevin step size and noise switch; `eps` is halved whenever a step is skipped
/// on a non-finite gradient.
#[derive(Debug, Clone)]
pub struct SgldState {
    pub eps: f64,
    pub noise: bool,
    pub skipped: u64,
}

impl SgldState {
    pub fn new(eps: f64) -> Self {
        SgldState {
            eps,
            noise: true,
            skipped: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgldOutcome {
    Applied,
    SkippedNonFinite,
}

/// One Langevin ascent step on a log posterior,
/// `theta += (eps/2) * grad + N(0, eps)`. A non-finite gradient skips the update,
/// halves `eps` and logs the event.
pub fn sgld_step(
    params: &mut [f64],
    grad_log_post: &[f64],
    state: &mut SgldState,
    rng: &mut impl Rng,
) -> Result<SgldOutcome> {
    if params.len() != grad_log_post.len() {
        return Err(Error::ShapeMismatch {
            op: "sgld_step",
            lhs: vec![params.len()],
            rhs: vec![grad_log_post.len()],
        });
    }
    if grad_log_post.iter().any(|g| !g.is_finite()) {
        state.eps *= 0.5;
        state.skipped += 1;
        log::warn!(
            "sgld_step: non-finite gradient, skipping update and halving step to {}",
            state.eps
        );
        return Ok(SgldOutcome::SkippedNonFinite);
    }
    let half = 0.5 * state.eps;
    let noise_std = state.eps.sqrt();
    for i in 0..params.len() {
        let mut delta = half * grad_log_post[i];
        if state.noise {
            let z: f64 = StandardNormal.sample(rng);
            delta += noise_std * z;
        }
        params[i] += delta;
    }
    Ok(SgldOutcome::Applied)
}
