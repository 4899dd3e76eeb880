//! MLP architectures, flat parameter layout, and forward evaluation.
//!
//! Layers are numbered `1..=K` as usual for MLP notation: layer 1 is the
//! input layer and carries no parameters, layers `2..=K-1` are hidden, and
//! layer `K` is the linear output layer. The flat parameter vector stores all
//! weights first, then all biases, both in layer-major, neuron-major,
//! input-minor order:
//!
//! ```text
//! (w_211, ..., w_{K M_K M_{K-1}}, b_21, ..., b_{K M_K})
//! ```
//!
//! This ordering is the canonical serialization for sample files.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Hidden-layer activation function. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the post-activation value `z = a(o)`.
    ///
    /// For tanh this is `1 - z^2`; for ReLU it is the 0/1 gate (taking the
    /// derivative at the kink to be 0).
    #[inline]
    pub fn grad_from_output(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - z * z,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// An MLP architecture: layer widths plus the hidden activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Widths `M_1..M_K`; `M_1` is the input dimension, `M_K` the output.
    #[serde(rename = "layers")]
    pub layer_widths: Vec<usize>,
    #[serde(rename = "activation")]
    pub hidden_activation: Activation,
}

impl Architecture {
    pub fn new(layer_widths: Vec<usize>, hidden_activation: Activation) -> Result<Self> {
        let arch = Self {
            layer_widths,
            hidden_activation,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidArchitecture(format!(
                "need at least input and output layers, got {} layer(s)",
                self.layer_widths.len()
            )));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArchitecture(
                "all layer widths must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Number of layers `K`.
    pub fn num_layers(&self) -> usize {
        self.layer_widths.len()
    }

    /// Input dimension `M_1`.
    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    /// Output dimension `M_K`.
    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    /// Width `M_l` of layer `l` (1-based).
    pub fn width(&self, layer: usize) -> usize {
        self.layer_widths[layer - 1]
    }

    /// 1-based indices of the hidden layers, `2..=K-1`.
    pub fn hidden_layers(&self) -> std::ops::RangeInclusive<usize> {
        2..=self.num_layers().saturating_sub(1)
    }

    pub fn num_hidden_layers(&self) -> usize {
        self.num_layers().saturating_sub(2)
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("architecture serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let arch: Architecture = serde_json::from_str(s)?;
        arch.validate()?;
        Ok(arch)
    }
}

/// Bijection between `(layer, neuron, input)` coordinates and flat positions.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    widths: Vec<usize>,
    /// `weight_offsets[l-2]` is the flat position of `w_{l11}`.
    weight_offsets: Vec<usize>,
    /// `bias_offsets[l-2]` is the flat position of `b_{l1}`.
    bias_offsets: Vec<usize>,
    dim: usize,
}

impl ParamLayout {
    pub fn new(arch: &Architecture) -> Self {
        let widths = arch.layer_widths.clone();
        let k = widths.len();
        let mut weight_offsets = Vec::with_capacity(k - 1);
        let mut off = 0;
        for l in 1..k {
            weight_offsets.push(off);
            off += widths[l] * widths[l - 1];
        }
        let total_weights = off;
        let mut bias_offsets = Vec::with_capacity(k - 1);
        let mut boff = total_weights;
        for l in 1..k {
            bias_offsets.push(boff);
            boff += widths[l];
        }
        Self {
            widths,
            weight_offsets,
            bias_offsets,
            dim: boff,
        }
    }

    /// Total parameter dimension `d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Flat position of weight `w_{lij}` (all indices 1-based, `l >= 2`).
    #[inline]
    pub fn weight_pos(&self, layer: usize, neuron: usize, input: usize) -> usize {
        let prev_width = self.widths[layer - 2];
        self.weight_offsets[layer - 2] + (neuron - 1) * prev_width + (input - 1)
    }

    /// Flat position of bias `b_{li}` (1-based, `l >= 2`).
    #[inline]
    pub fn bias_pos(&self, layer: usize, neuron: usize) -> usize {
        self.bias_offsets[layer - 2] + (neuron - 1)
    }

    /// Offset of layer `l`'s weight block (row-major `M_l x M_{l-1}`).
    #[inline]
    pub fn weight_block(&self, layer: usize) -> usize {
        self.weight_offsets[layer - 2]
    }

    /// Offset of layer `l`'s bias block (length `M_l`).
    #[inline]
    pub fn bias_block(&self, layer: usize) -> usize {
        self.bias_offsets[layer - 2]
    }
}

/// Total parameter dimension `d = sum_l (M_l * M_{l-1} + M_l)`.
pub fn param_dim(arch: &Architecture) -> usize {
    ParamLayout::new(arch).dim()
}

fn check_theta_len(arch: &Architecture, theta: &[f64]) -> Result<()> {
    let d = param_dim(arch);
    if theta.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "parameter vector has length {}, architecture needs {d}",
            theta.len()
        )));
    }
    Ok(())
}

/// Reusable forward-pass scratch space (two ping-pong activation buffers).
#[derive(Debug, Clone, Default)]
pub struct ForwardScratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

/// Evaluates the MLP, writing the output into `out`.
///
/// `out` must have length `M_K`. Pre-activations are
/// `o_li = sum_j w_lij z_(l-1)j + b_li`; hidden layers apply the activation,
/// the output layer is the identity.
pub fn forward_into(
    arch: &Architecture,
    layout: &ParamLayout,
    theta: &[f64],
    x: &[f64],
    out: &mut [f64],
    scratch: &mut ForwardScratch,
) -> Result<()> {
    if x.len() != arch.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "input has length {}, architecture expects {}",
            x.len(),
            arch.input_dim()
        )));
    }
    if out.len() != arch.output_dim() {
        return Err(Error::DimensionMismatch(format!(
            "output buffer has length {}, architecture produces {}",
            out.len(),
            arch.output_dim()
        )));
    }
    check_theta_len(arch, theta)?;

    let k = arch.num_layers();
    scratch.a.clear();
    scratch.a.extend_from_slice(x);
    for l in 2..=k {
        let width = arch.width(l);
        let prev_width = arch.width(l - 1);
        let w0 = layout.weight_block(l);
        let b0 = layout.bias_block(l);
        scratch.b.clear();
        for i in 0..width {
            let mut pre = theta[b0 + i];
            let row = w0 + i * prev_width;
            for (j, &z) in scratch.a.iter().enumerate() {
                pre += theta[row + j] * z;
            }
            let z = if l < k {
                arch.hidden_activation.apply(pre)
            } else {
                pre
            };
            scratch.b.push(z);
        }
        std::mem::swap(&mut scratch.a, &mut scratch.b);
    }
    out.copy_from_slice(&scratch.a);
    Ok(())
}

/// Evaluates the MLP and returns the output vector `y_hat`.
pub fn forward(arch: &Architecture, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let layout = arch.layout();
    let mut out = vec![0.0; arch.output_dim()];
    let mut scratch = ForwardScratch::default();
    forward_into(arch, &layout, theta, x, &mut out, &mut scratch)?;
    Ok(out)
}

/// A hidden neuron's parameter subspace: incoming weights, outgoing weights,
/// and bias, together with the `(layer, neuron)` coordinates it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronParamVector {
    /// `w_{li1}..w_{liM_(l-1)}`.
    pub incoming: Vec<f64>,
    /// `w_{(l+1)1i}..w_{(l+1)M_(l+1)i}`.
    pub outgoing: Vec<f64>,
    /// `b_{li}`.
    pub bias: f64,
    /// Hidden layer index `l` (1-based; `2 <= l <= K-1`).
    pub layer: usize,
    /// Neuron index `i` within the layer (1-based).
    pub neuron: usize,
}

impl NeuronParamVector {
    /// Total dimension `M_(l-1) + M_(l+1) + 1`.
    pub fn dim(&self) -> usize {
        self.incoming.len() + self.outgoing.len() + 1
    }

    /// The vector as one flat slice: incoming, outgoing, bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.incoming);
        v.extend_from_slice(&self.outgoing);
        v.push(self.bias);
        v
    }

    /// The sign-flipped vector (the tanh-related equioutput image).
    pub fn negated(&self) -> Self {
        Self {
            incoming: self.incoming.iter().map(|v| -v).collect(),
            outgoing: self.outgoing.iter().map(|v| -v).collect(),
            bias: -self.bias,
            layer: self.layer,
            neuron: self.neuron,
        }
    }
}

fn check_hidden_index(arch: &Architecture, layer: usize, neuron: usize) -> Result<()> {
    let k = arch.num_layers();
    if layer < 2 || layer > k - 1 {
        return Err(Error::IndexOutOfRange(format!(
            "layer {layer} is not a hidden layer (valid: 2..={})",
            k - 1
        )));
    }
    if neuron < 1 || neuron > arch.width(layer) {
        return Err(Error::IndexOutOfRange(format!(
            "neuron {neuron} out of range for layer {layer} of width {}",
            arch.width(layer)
        )));
    }
    Ok(())
}

/// Reads the neuron parameter vector of hidden neuron `(layer, neuron)`.
pub fn extract_neuron_vector(
    arch: &Architecture,
    theta: &[f64],
    layer: usize,
    neuron: usize,
) -> Result<NeuronParamVector> {
    check_hidden_index(arch, layer, neuron)?;
    check_theta_len(arch, theta)?;
    let layout = arch.layout();
    let prev_width = arch.width(layer - 1);
    let next_width = arch.width(layer + 1);
    let mut incoming = Vec::with_capacity(prev_width);
    for j in 1..=prev_width {
        incoming.push(theta[layout.weight_pos(layer, neuron, j)]);
    }
    let mut outgoing = Vec::with_capacity(next_width);
    for k in 1..=next_width {
        outgoing.push(theta[layout.weight_pos(layer + 1, k, neuron)]);
    }
    let bias = theta[layout.bias_pos(layer, neuron)];
    Ok(NeuronParamVector {
        incoming,
        outgoing,
        bias,
        layer,
        neuron,
    })
}

/// Writes a neuron parameter vector back into `theta` at its origin
/// coordinates. All other entries are untouched.
pub fn write_neuron_vector(
    arch: &Architecture,
    theta: &mut [f64],
    phi: &NeuronParamVector,
) -> Result<()> {
    check_hidden_index(arch, phi.layer, phi.neuron)?;
    check_theta_len(arch, theta)?;
    let prev_width = arch.width(phi.layer - 1);
    let next_width = arch.width(phi.layer + 1);
    if phi.incoming.len() != prev_width || phi.outgoing.len() != next_width {
        return Err(Error::DimensionMismatch(format!(
            "neuron vector has shape ({}, {}), layer {} expects ({prev_width}, {next_width})",
            phi.incoming.len(),
            phi.outgoing.len(),
            phi.layer
        )));
    }
    let layout = arch.layout();
    for (j, &v) in phi.incoming.iter().enumerate() {
        theta[layout.weight_pos(phi.layer, phi.neuron, j + 1)] = v;
    }
    for (k, &v) in phi.outgoing.iter().enumerate() {
        theta[layout.weight_pos(phi.layer + 1, k + 1, phi.neuron)] = v;
    }
    theta[layout.bias_pos(phi.layer, phi.neuron)] = phi.bias;
    Ok(())
}

/// Reorders (and optionally sign-flips) the neurons of hidden layer `layer`
/// in place.
///
/// `perm[new] = old` gives the source neuron for each new position and
/// `signs[new]` in `{-1, +1}` is applied after the move. Incoming weight
/// rows, biases, and outgoing weight columns move together, which is exactly
/// the block-diagonal orthogonal action of an equioutput transformation on
/// one layer.
pub fn permute_hidden_neurons(
    arch: &Architecture,
    theta: &mut [f64],
    layer: usize,
    perm: &[usize],
    signs: &[f64],
) -> Result<()> {
    check_hidden_index(arch, layer, 1)?;
    check_theta_len(arch, theta)?;
    let width = arch.width(layer);
    if perm.len() != width || signs.len() != width {
        return Err(Error::InvalidTransform(format!(
            "permutation/sign length {}/{} does not match layer width {width}",
            perm.len(),
            signs.len()
        )));
    }
    let mut seen = vec![false; width];
    for &src in perm {
        if src >= width || seen[src] {
            return Err(Error::InvalidTransform(format!(
                "permutation {perm:?} is not a bijection on 0..{width}"
            )));
        }
        seen[src] = true;
    }
    if signs.iter().any(|&s| s != 1.0 && s != -1.0) {
        return Err(Error::InvalidTransform(
            "sign entries must be -1 or +1".into(),
        ));
    }

    let layout = arch.layout();
    let prev_width = arch.width(layer - 1);
    let next_width = arch.width(layer + 1);
    let w_in0 = layout.weight_block(layer);
    let b0 = layout.bias_block(layer);
    let w_out0 = layout.weight_block(layer + 1);

    let snap_in = theta[w_in0..w_in0 + width * prev_width].to_vec();
    let snap_bias = theta[b0..b0 + width].to_vec();
    let snap_out = theta[w_out0..w_out0 + next_width * width].to_vec();

    for new in 0..width {
        let old = perm[new];
        let s = signs[new];
        for j in 0..prev_width {
            theta[w_in0 + new * prev_width + j] = s * snap_in[old * prev_width + j];
        }
        theta[b0 + new] = s * snap_bias[old];
        for k in 0..next_width {
            theta[w_out0 + k * width + new] = s * snap_out[k * width + old];
        }
    }
    Ok(())
}
