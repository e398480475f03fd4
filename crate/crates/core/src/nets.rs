//! Small fully-connected networks with explicit dropout masks and exact
//! per-example gradients.
//!
//! Parameters live in one flat vector so that optimizers and the bilevel
//! code can take dot products directly. Layout, for each layer `l` in
//! order: the weight matrix `W_l` (`out × in`, row-major) followed by its
//! bias vector (`out`).
//!
//! Dropout multiplies hidden activations by a raw `{0,1}` mask. There is no
//! inverted `1/keep` rescaling, so a masked pass is exactly the network
//! with the corresponding outgoing weight rows zeroed.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RevarError};
use crate::numkit::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// Identity head; regression with squared error.
    Linear,
    /// Probability vector; classification with cross-entropy.
    Softmax,
    /// Scalar in (0, 1). Used by the weighting network.
    Sigmoid,
}

/// Network architecture plus its flattened parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    output: OutputKind,
    dropout_rate: f64,
    params: Vec<f64>,
}

/// Per hidden layer keep flags for one stochastic pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropoutMask {
    pub layers: Vec<Vec<bool>>,
}

impl DropoutMask {
    /// Mask that keeps every unit.
    pub fn ones(net: &NetParams) -> Self {
        DropoutMask {
            layers: net.hidden_sizes().iter().map(|&h| vec![true; h]).collect(),
        }
    }

    fn matches(&self, net: &NetParams) -> bool {
        let hidden = net.hidden_sizes();
        self.layers.len() == hidden.len()
            && self.layers.iter().zip(hidden).all(|(m, &h)| m.len() == h)
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Activations recorded during a forward pass, needed for backprop.
struct Trace {
    /// `inputs[l]` is the (masked) input vector of layer `l`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    hidden_pre: Vec<Vec<f64>>,
    /// Pre-activation of the last layer.
    logits: Vec<f64>,
}

impl NetParams {
    /// Randomly initialised network with layer widths `sizes`
    /// (input, hidden..., output). Weights are uniform with fan-in
    /// scaling, biases zero.
    pub fn new(
        sizes: &[usize],
        activation: Activation,
        output: OutputKind,
        dropout_rate: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes, activation, output, dropout_rate)?;
        let n_layers = net.n_layers();
        for l in 0..n_layers {
            let (fan_in, _) = net.layer_shape(l);
            let gain = if l + 1 == n_layers { 3.0 } else { 6.0 };
            let bound = (gain / fan_in as f64).sqrt();
            let (w, _) = net.layer_ranges(l);
            for p in &mut net.params[w] {
                *p = rng.uniform_range(-bound, bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(
        sizes: &[usize],
        activation: Activation,
        output: OutputKind,
        dropout_rate: f64,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(RevarError::param("a network needs input and output sizes"));
        }
        if sizes.contains(&0) {
            return Err(RevarError::param("layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(RevarError::param(format!(
                "dropout_rate must lie in [0, 1), got {dropout_rate}"
            )));
        }
        let out = *sizes.last().unwrap();
        match output {
            OutputKind::Sigmoid if out != 1 => {
                return Err(RevarError::param("sigmoid head must have one output"))
            }
            OutputKind::Softmax if out < 2 => {
                return Err(RevarError::param("softmax head needs at least two classes"))
            }
            _ => {}
        }
        let n_params = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(NetParams {
            sizes: sizes.to_vec(),
            activations: vec![activation; sizes.len() - 2],
            output,
            dropout_rate,
            params: vec![0.0; n_params],
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn hidden_sizes(&self) -> &[usize] {
        &self.sizes[1..self.sizes.len() - 1]
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn output_kind(&self) -> OutputKind {
        self.output
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(RevarError::param(format!(
                "dropout_rate must lie in [0, 1), got {rate}"
            )));
        }
        self.dropout_rate = rate;
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(RevarError::Dimension {
                context: "NetParams::set_params",
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Copy of `self` with different parameter values.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        let mut out = self.clone();
        if params.len() != self.params.len() {
            return Err(RevarError::Dimension {
                context: "NetParams::with_params",
                expected: self.params.len(),
                got: params.len(),
            });
        }
        out.params = params;
        Ok(out)
    }

    /// `(in, out)` of layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.sizes[l], self.sizes[l + 1])
    }

    /// Flat index ranges of the weights and the bias of layer `l`.
    pub fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let offset: usize = self.sizes[..l + 1]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        let (i, o) = self.layer_shape(l);
        (offset..offset + i * o, offset + i * o..offset + i * o + o)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(RevarError::Dimension {
                context: "network input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_mask(&self, mask: Option<&DropoutMask>) -> Result<()> {
        match mask {
            Some(m) if !m.matches(self) => Err(RevarError::param(
                "dropout mask shape does not match the network",
            )),
            _ => Ok(()),
        }
    }

    fn trace(&self, x: &[f64], mask: Option<&DropoutMask>) -> Trace {
        let n_layers = self.n_layers();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut hidden_pre = Vec::with_capacity(n_layers - 1);
        let mut current = x.to_vec();
        for l in 0..n_layers {
            let (n_in, n_out) = self.layer_shape(l);
            let (wr, br) = self.layer_ranges(l);
            let w = &self.params[wr];
            let b = &self.params[br];
            let mut z = b.to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *zo += row.iter().zip(&current).map(|(a, c)| a * c).sum::<f64>();
            }
            inputs.push(current);
            if l + 1 == n_layers {
                return Trace {
                    inputs,
                    hidden_pre,
                    logits: z,
                };
            }
            let act = self.activations[l];
            let mut a: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
            if let Some(m) = mask {
                for (av, &keep) in a.iter_mut().zip(&m.layers[l]) {
                    if !keep {
                        *av = 0.0;
                    }
                }
            }
            debug_assert_eq!(a.len(), n_out);
            hidden_pre.push(z);
            current = a;
        }
        unreachable!("network has at least one layer")
    }

    fn head(&self, logits: &[f64]) -> Vec<f64> {
        match self.output {
            OutputKind::Linear => logits.to_vec(),
            OutputKind::Softmax => softmax(logits),
            OutputKind::Sigmoid => vec![sigmoid(logits[0])],
        }
    }

    /// Gradient w.r.t. parameters given the gradient w.r.t. the last-layer
    /// pre-activation.
    fn backprop(&self, trace: &Trace, mask: Option<&DropoutMask>, d_logits: Vec<f64>) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        let mut dz = d_logits;
        for l in (0..self.n_layers()).rev() {
            let (n_in, _) = self.layer_shape(l);
            let (wr, br) = self.layer_ranges(l);
            let input = &trace.inputs[l];
            {
                let gw = &mut grad[wr.clone()];
                for (o, &d) in dz.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &mut gw[o * n_in..(o + 1) * n_in];
                    for (g, &a) in row.iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
            }
            for (g, &d) in grad[br].iter_mut().zip(&dz) {
                *g += d;
            }
            if l == 0 {
                break;
            }
            let w = &self.params[wr];
            let mut da = vec![0.0; n_in];
            for (o, &d) in dz.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * n_in..(o + 1) * n_in];
                for (acc, &wv) in da.iter_mut().zip(row) {
                    *acc += d * wv;
                }
            }
            let act = self.activations[l - 1];
            let pre = &trace.hidden_pre[l - 1];
            dz = da
                .iter()
                .zip(pre)
                .enumerate()
                .map(|(u, (&g, &z))| {
                    let kept = mask.is_none_or(|m| m.layers[l - 1][u]);
                    if kept {
                        g * act.derivative(z)
                    } else {
                        0.0
                    }
                })
                .collect();
        }
        grad
    }

    fn class_index(&self, y: f64) -> Result<usize> {
        let k = self.output_dim();
        if !(y >= 0.0) || y.fract() != 0.0 || y as usize >= k {
            return Err(RevarError::param(format!(
                "class label {y} out of range for {k} classes"
            )));
        }
        Ok(y as usize)
    }
}

/// Network output: raw values for a linear head, probabilities for softmax,
/// a scalar in (0, 1) for sigmoid.
pub fn forward(net: &NetParams, x: &[f64], mask: Option<&DropoutMask>) -> Result<Vec<f64>> {
    net.check_input(x)?;
    net.check_mask(mask)?;
    let trace = net.trace(x, mask);
    Ok(net.head(&trace.logits))
}

/// Per-example loss: `½‖f(x) − y‖²` for a linear head (single output),
/// `−log p_y` for softmax where `y` holds the class index.
pub fn loss(net: &NetParams, x: &[f64], y: f64) -> Result<f64> {
    loss_masked(net, x, y, None)
}

pub fn loss_masked(net: &NetParams, x: &[f64], y: f64, mask: Option<&DropoutMask>) -> Result<f64> {
    net.check_input(x)?;
    net.check_mask(mask)?;
    let trace = net.trace(x, mask);
    match net.output {
        OutputKind::Linear => {
            if net.output_dim() != 1 {
                return Err(RevarError::Unsupported(
                    "squared-error loss needs a single-output network".into(),
                ));
            }
            let r = trace.logits[0] - y;
            Ok(0.5 * r * r)
        }
        OutputKind::Softmax => {
            let c = net.class_index(y)?;
            Ok((log_sum_exp(&trace.logits) - trace.logits[c]).max(0.0))
        }
        OutputKind::Sigmoid => Err(RevarError::Unsupported(
            "no training loss is defined for a sigmoid head".into(),
        )),
    }
}

/// Exact gradient of `scale · loss(net, x, y)` w.r.t. the flat parameters.
pub fn grad(net: &NetParams, x: &[f64], y: f64, scale: f64) -> Result<Vec<f64>> {
    grad_masked(net, x, y, scale, None)
}

pub fn grad_masked(
    net: &NetParams,
    x: &[f64],
    y: f64,
    scale: f64,
    mask: Option<&DropoutMask>,
) -> Result<Vec<f64>> {
    Ok(loss_grad_masked(net, x, y, scale, mask)?.1)
}

/// Loss and the gradient of `scale · loss` from a single forward pass.
pub fn loss_grad(net: &NetParams, x: &[f64], y: f64, scale: f64) -> Result<(f64, Vec<f64>)> {
    loss_grad_masked(net, x, y, scale, None)
}

pub fn loss_grad_masked(
    net: &NetParams,
    x: &[f64],
    y: f64,
    scale: f64,
    mask: Option<&DropoutMask>,
) -> Result<(f64, Vec<f64>)> {
    net.check_input(x)?;
    net.check_mask(mask)?;
    let trace = net.trace(x, mask);
    let (value, d_logits) = match net.output {
        OutputKind::Linear => {
            if net.output_dim() != 1 {
                return Err(RevarError::Unsupported(
                    "squared-error loss needs a single-output network".into(),
                ));
            }
            let r = trace.logits[0] - y;
            (0.5 * r * r, vec![scale * r])
        }
        OutputKind::Softmax => {
            let c = net.class_index(y)?;
            let value = (log_sum_exp(&trace.logits) - trace.logits[c]).max(0.0);
            let mut p = softmax(&trace.logits);
            p[c] -= 1.0;
            p.iter_mut().for_each(|v| *v *= scale);
            (value, p)
        }
        OutputKind::Sigmoid => {
            return Err(RevarError::Unsupported(
                "no training loss is defined for a sigmoid head".into(),
            ))
        }
    };
    if scale == 0.0 {
        return Ok((value, vec![0.0; net.n_params()]));
    }
    Ok((value, net.backprop(&trace, mask, d_logits)))
}

/// Vector-Jacobian product: gradient of `⟨upstream, forward(net, x, mask)⟩`
/// w.r.t. the parameters, where `upstream` is indexed like the head output.
pub fn vjp_output(
    net: &NetParams,
    x: &[f64],
    mask: Option<&DropoutMask>,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    net.check_input(x)?;
    net.check_mask(mask)?;
    if upstream.len() != net.output_dim() {
        return Err(RevarError::Dimension {
            context: "vjp_output upstream",
            expected: net.output_dim(),
            got: upstream.len(),
        });
    }
    let trace = net.trace(x, mask);
    let d_logits = match net.output {
        OutputKind::Linear => upstream.to_vec(),
        OutputKind::Softmax => {
            let p = softmax(&trace.logits);
            let inner: f64 = p.iter().zip(upstream).map(|(a, b)| a * b).sum();
            p.iter().zip(upstream).map(|(pi, ui)| pi * (ui - inner)).collect()
        }
        OutputKind::Sigmoid => {
            let s = sigmoid(trace.logits[0]);
            vec![upstream[0] * s * (1.0 - s)]
        }
    };
    Ok(net.backprop(&trace, mask, d_logits))
}

/// I.i.d. Bernoulli keep flags with probability `1 − dropout_rate` for every
/// hidden unit.
pub fn sample_mask(net: &NetParams, rng: &mut Rng) -> DropoutMask {
    sample_mask_with_rate(net, net.dropout_rate, rng)
}

/// As [`sample_mask`] with an explicit dropout rate.
pub fn sample_mask_with_rate(net: &NetParams, dropout_rate: f64, rng: &mut Rng) -> DropoutMask {
    let keep = 1.0 - dropout_rate;
    DropoutMask {
        layers: net
            .hidden_sizes()
            .iter()
            .map(|&h| (0..h).map(|_| rng.bernoulli(keep)).collect())
            .collect(),
    }
}

/// Serialised network: layer shapes and row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetCheckpoint {
    pub sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    pub output: OutputKind,
    pub dropout_rate: f64,
    pub layers: Vec<LayerCheckpoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerCheckpoint {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl NetParams {
    pub fn to_checkpoint(&self) -> NetCheckpoint {
        let layers = (0..self.n_layers())
            .map(|l| {
                let (i, o) = self.layer_shape(l);
                let (wr, br) = self.layer_ranges(l);
                LayerCheckpoint {
                    rows: o,
                    cols: i,
                    weights: self.params[wr].to_vec(),
                    bias: self.params[br].to_vec(),
                }
            })
            .collect();
        NetCheckpoint {
            sizes: self.sizes.clone(),
            activations: self.activations.clone(),
            output: self.output,
            dropout_rate: self.dropout_rate,
            layers,
        }
    }

    pub fn from_checkpoint(ck: &NetCheckpoint) -> Result<Self> {
        let act = ck.activations.first().copied().unwrap_or(Activation::Relu);
        let mut net = NetParams::zeros(&ck.sizes, act, ck.output, ck.dropout_rate)?;
        if ck.activations.len() != net.activations.len() {
            return Err(RevarError::Validation(format!(
                "checkpoint lists {} activations for {} hidden layers",
                ck.activations.len(),
                net.activations.len()
            )));
        }
        net.activations = ck.activations.clone();
        if ck.layers.len() != net.n_layers() {
            return Err(RevarError::Validation(format!(
                "checkpoint has {} layers, sizes imply {}",
                ck.layers.len(),
                net.n_layers()
            )));
        }
        for (l, layer) in ck.layers.iter().enumerate() {
            let (i, o) = net.layer_shape(l);
            if layer.rows != o
                || layer.cols != i
                || layer.weights.len() != i * o
                || layer.bias.len() != o
            {
                return Err(RevarError::Validation(format!(
                    "checkpoint layer {l} does not have shape {o}x{i}"
                )));
            }
            let (wr, br) = net.layer_ranges(l);
            net.params[wr].copy_from_slice(&layer.weights);
            net.params[br].copy_from_slice(&layer.bias);
        }
        Ok(net)
    }
}
