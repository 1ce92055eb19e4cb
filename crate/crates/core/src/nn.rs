//! Dense feed-forward decoder `f_θ : {0,1}^K → R^D` with hand-written reverse
//! pass and an ADAM optimizer.
//!
//! Weights are stored row-major (`out × in`), so `weight[o * in + i]` connects
//! input `i` to output `o`.

use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::SparseCode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    ReLU,
    Sigmoid,
    Softmax,
    Identity,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::ReLU => 0,
            Activation::Sigmoid => 1,
            Activation::Softmax => 2,
            Activation::Identity => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Activation::ReLU,
            1 => Activation::Sigmoid,
            2 => Activation::Softmax,
            3 => Activation::Identity,
            _ => return None,
        })
    }

    fn apply(self, pre: &[f64], out: &mut Vec<f64>) {
        out.clear();
        match self {
            Activation::ReLU => out.extend(pre.iter().map(|&v| v.max(0.0))),
            Activation::Sigmoid => out.extend(pre.iter().map(|&v| sigmoid(v))),
            Activation::Identity => out.extend_from_slice(pre),
            Activation::Softmax => {
                let max = pre.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                out.extend(pre.iter().map(|&v| (v - max).exp()));
                let total: f64 = out.iter().sum();
                for v in out.iter_mut() {
                    *v /= total;
                }
            }
        }
    }

    /// Maps `d L / d out` to `d L / d pre`.
    fn backward(self, pre: &[f64], out: &[f64], upstream: &[f64]) -> Vec<f64> {
        match self {
            Activation::ReLU => pre
                .iter()
                .zip(upstream)
                .map(|(&p, &u)| if p > 0.0 { u } else { 0.0 })
                .collect(),
            Activation::Sigmoid => out
                .iter()
                .zip(upstream)
                .map(|(&s, &u)| u * s * (1.0 - s))
                .collect(),
            Activation::Identity => upstream.to_vec(),
            Activation::Softmax => {
                let dot: f64 = out.iter().zip(upstream).map(|(s, u)| s * u).sum();
                out.iter()
                    .zip(upstream)
                    .map(|(&s, &u)| s * (u - dot))
                    .collect()
            }
        }
    }
}

/// Logistic function in the branch form that never overflows `exp`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut layer = Self::zeros(in_dim, out_dim, activation);
        for w in &mut layer.weight {
            *w = rng.random_range(-limit..limit);
        }
        layer
    }

    fn affine(&self, input: &[f64], pre: &mut Vec<f64>) {
        pre.clear();
        pre.extend_from_slice(&self.bias);
        for (o, p) in pre.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            *p += row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
    }

    /// Pre-activation for a binary input given by its active indices.
    fn affine_sparse(&self, active: &[usize], pre: &mut Vec<f64>) {
        pre.clear();
        pre.extend_from_slice(&self.bias);
        for (o, p) in pre.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for &j in active {
                *p += row[j];
            }
        }
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderNetwork {
    layers: Vec<DenseLayer>,
}

/// Per-layer intermediates from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

impl DecoderNetwork {
    /// Validates that consecutive widths agree.
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("decoder needs at least one layer"));
        }
        for layer in &layers {
            check_len("layer weight", layer.in_dim * layer.out_dim, layer.weight.len())?;
            check_len("layer bias", layer.out_dim, layer.bias.len())?;
        }
        for pair in layers.windows(2) {
            check_len("layer input width", pair[0].out_dim, pair[1].in_dim)?;
        }
        Ok(Self { layers })
    }

    /// ReLU hidden layers of the given widths followed by an output layer with
    /// `final_activation`.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        final_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden.contains(&0) {
            return Err(Error::invalid("decoder widths must be positive"));
        }
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = input_dim;
        for &h in hidden {
            layers.push(DenseLayer::glorot(width, h, Activation::ReLU, rng));
            width = h;
        }
        layers.push(DenseLayer::glorot(width, output_dim, final_activation, rng));
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn final_activation(&self) -> Activation {
        self.layers[self.layers.len() - 1].activation
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameter tensors in declaration order: layer 0 weight, layer 0 bias,
    /// layer 1 weight, and so on.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn tensor_shapes(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.len()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(DenseLayer::is_finite)
    }

    fn check_input(&self, z: &[f64]) -> Result<()> {
        check_len("decoder input", self.input_dim(), z.len())?;
        if let Some((index, &value)) = z
            .iter()
            .enumerate()
            .find(|(_, &v)| v != 0.0 && v != 1.0)
        {
            return Err(Error::NonBinaryInput { index, value });
        }
        Ok(())
    }

    fn finish_from(&self, first_pre: &[f64]) -> Vec<f64> {
        let mut act = Vec::with_capacity(first_pre.len());
        self.layers[0].activation.apply(first_pre, &mut act);
        let mut pre = Vec::new();
        for layer in &self.layers[1..] {
            layer.affine(&act, &mut pre);
            layer.activation.apply(&pre, &mut act);
        }
        act
    }

    /// `f_θ(z)` for a binary input vector.
    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_input(z)?;
        let active: Vec<usize> = (0..z.len()).filter(|&j| z[j] == 1.0).collect();
        let mut pre = Vec::new();
        self.layers[0].affine_sparse(&active, &mut pre);
        Ok(self.finish_from(&pre))
    }

    pub fn forward_code(&self, code: &SparseCode) -> Result<Vec<f64>> {
        check_len("decoder input", self.input_dim(), code.width())?;
        let mut pre = Vec::new();
        self.layers[0].affine_sparse(&code.active(), &mut pre);
        Ok(self.finish_from(&pre))
    }

    /// Outputs for `base ∪ {j}` for every `j` in `candidates`, sharing the
    /// first-layer pre-activation of `base`.
    pub fn forward_additions(
        &self,
        base: &SparseCode,
        candidates: &[usize],
    ) -> Result<Vec<Vec<f64>>> {
        check_len("decoder input", self.input_dim(), base.width())?;
        let first = &self.layers[0];
        let mut base_pre = Vec::new();
        first.affine_sparse(&base.active(), &mut base_pre);
        let mut pre = Vec::with_capacity(base_pre.len());
        let mut outputs = Vec::with_capacity(candidates.len());
        for &j in candidates {
            if j >= first.in_dim {
                return Err(Error::DimensionMismatch {
                    what: "candidate bit",
                    expected: first.in_dim,
                    actual: j,
                });
            }
            pre.clear();
            pre.extend(
                base_pre
                    .iter()
                    .enumerate()
                    .map(|(o, &p)| p + first.weight[o * first.in_dim + j]),
            );
            outputs.push(self.finish_from(&pre));
        }
        Ok(outputs)
    }

    pub fn forward_trace(&self, z: &[f64]) -> Result<ForwardTrace> {
        self.check_input(z)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut act = z.to_vec();
        for layer in &self.layers {
            let mut pre = Vec::new();
            layer.affine(&act, &mut pre);
            let mut out = Vec::new();
            layer.activation.apply(&pre, &mut out);
            inputs.push(std::mem::replace(&mut act, out));
            pres.push(pre);
        }
        Ok(ForwardTrace {
            inputs,
            pre: pres,
            output: act,
        })
    }

    /// Gradient of `upstream · f_θ(z)` with respect to every parameter.
    pub fn backward(&self, z: &[f64], upstream: &[f64]) -> Result<GradientBuffer> {
        let mut grads = GradientBuffer::zeros_for(self);
        self.backward_into(z, upstream, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates the gradient into `grads` and bumps its counter.
    pub fn backward_into(
        &self,
        z: &[f64],
        upstream: &[f64],
        grads: &mut GradientBuffer,
    ) -> Result<()> {
        check_len("upstream gradient", self.output_dim(), upstream.len())?;
        grads.check_congruent(self)?;
        let trace = self.forward_trace(z)?;
        let mut delta = upstream.to_vec();
        let outputs: Vec<&[f64]> = trace
            .inputs
            .iter()
            .skip(1)
            .map(|v| v.as_slice())
            .chain(std::iter::once(trace.output.as_slice()))
            .collect();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let dpre = layer.activation.backward(&trace.pre[l], outputs[l], &delta);
            let input = &trace.inputs[l];
            let gw = &mut grads.weights[l];
            for (o, &d) in dpre.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (g, &x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            for (g, &d) in grads.biases[l].iter_mut().zip(&dpre) {
                *g += d;
            }
            if l > 0 {
                let mut next = vec![0.0; layer.in_dim];
                for (o, &d) in dpre.iter().enumerate() {
                    let row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (n, &w) in next.iter_mut().zip(row) {
                        *n += w * d;
                    }
                }
                delta = next;
            }
        }
        grads.count += 1;
        Ok(())
    }
}

/// Parameter-shaped gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBuffer {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub count: usize,
}

impl GradientBuffer {
    pub fn zeros_for(net: &DecoderNetwork) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            count: 0,
        }
    }

    pub fn check_congruent(&self, net: &DecoderNetwork) -> Result<()> {
        check_len("gradient layer count", net.layers.len(), self.weights.len())?;
        for (l, layer) in net.layers.iter().enumerate() {
            check_len("weight gradient", layer.weight.len(), self.weights[l].len())?;
            check_len("bias gradient", layer.bias.len(), self.biases[l].len())?;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &GradientBuffer) -> Result<()> {
        check_len("gradient layer count", self.weights.len(), other.weights.len())?;
        for (mine, theirs) in self
            .weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .zip(other.weights.iter().chain(&other.biases))
        {
            check_len("gradient tensor", mine.len(), theirs.len())?;
            for (a, b) in mine.iter_mut().zip(theirs) {
                *a += b;
            }
        }
        self.count += other.count;
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            for v in t.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// Same order as [`DecoderNetwork::tensors`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub rho: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            rho: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// ADAM moments for a list of parameter tensors.
///
/// Updates *ascend* the objective whose gradient is supplied.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(shapes: &[usize], config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_network(net: &DecoderNetwork, config: AdamConfig) -> Self {
        Self::new(&net.tensor_shapes(), config)
    }

    /// Rejects the whole update if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        check_len("adam tensor count", self.m.len(), params.len())?;
        check_len("adam tensor count", self.m.len(), grads.len())?;
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            check_len("adam tensor", m.len(), p.len())?;
            check_len("adam tensor", m.len(), g.len())?;
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("adam gradient".into()));
        }
        let AdamConfig {
            rho,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powf(self.t as f64);
        let bc2 = 1.0 - beta2.powf(self.t as f64);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] += rho * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One ADAM ascent step on the decoder parameters.
pub fn adam_step(
    net: &mut DecoderNetwork,
    grads: &GradientBuffer,
    state: &mut AdamState,
) -> Result<()> {
    grads.check_congruent(net)?;
    let g = grads.tensors();
    let mut params = net.tensors_mut();
    state.step(&mut params, &g)
}
