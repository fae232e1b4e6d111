//! Layers whose effective weights are conditioned on the trade-off weight
//! `beta` through a per-row (dense) or per-block (conv) multiplicative scale
//! `sigmoid(u * ln(beta) + v)`. The `(u, v)` pairs are the only parameters a
//! conditioned model adds on top of its unconditioned counterpart.

use serde::{Deserialize, Serialize};

use crate::diffcore::{
    conv2d_sample_raw, sigmoid_scalar, Bindings, Graph, NodeId, RandomStream, Tensor,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply_graph(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Identity => x,
        }
    }

    fn apply_eager(self, x: Tensor) -> Tensor {
        match self {
            Activation::Sigmoid => x.map(sigmoid_scalar),
            Activation::Identity => x,
        }
    }
}

/// Shape-level description of one trainable layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    Conv { in_channels: usize, out_channels: usize, kernel: usize },
}

/// Ordered stack of layer descriptors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn new(layers: Vec<LayerSpec>) -> Architecture {
        Architecture { layers }
    }

    /// Checks that consecutive layer widths line up (dense chains only; conv
    /// stacks are validated spatially when a model is instantiated).
    pub fn validate(&self) -> Result<()> {
        for pair in self.layers.windows(2) {
            let out_width = match pair[0] {
                LayerSpec::Dense { output, .. } => Some(output),
                LayerSpec::Conv { .. } => None,
            };
            let in_width = match pair[1] {
                LayerSpec::Dense { input, .. } => Some(input),
                LayerSpec::Conv { .. } => None,
            };
            if let (Some(o), Some(i)) = (out_width, in_width) {
                if o != i {
                    return Err(Error::shape(
                        "Architecture::validate",
                        format!("layer output width {o} feeds layer input width {i}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Additional parameters the beta adjustment introduces over the plain model:
/// `2 * output` per dense layer and `2 * out_channels * (in_channels + 1)` per
/// conv layer.
pub fn extra_parameter_count(arch: &Architecture) -> usize {
    arch.layers
        .iter()
        .map(|layer| match *layer {
            LayerSpec::Dense { output, .. } => 2 * output,
            LayerSpec::Conv { in_channels, out_channels, .. } => {
                2 * out_channels * (in_channels + 1)
            }
        })
        .sum()
}

/// The scale vector `sigmoid(u * ln(beta) + v)`, componentwise in `(0, 1)`.
///
/// The logarithm is natural; `u` and `v` must have equal length.
pub fn beta_scale(u: &[f64], v: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Domain(format!("beta must be positive and finite, got {beta}")));
    }
    if u.len() != v.len() {
        return Err(Error::shape(
            "beta_scale",
            format!("u has {} components, v has {}", u.len(), v.len()),
        ));
    }
    let lb = beta.ln();
    Ok(u.iter().zip(v).map(|(&ui, &vi)| sigmoid_scalar(ui * lb + vi)).collect())
}

/// Scales row `i` of a matrix by `s[i]`.
pub fn scale_rows(w: &Tensor, s: &[f64]) -> Result<Tensor> {
    if w.rank() != 2 || w.shape()[0] != s.len() {
        return Err(Error::shape(
            "scale_rows",
            format!("matrix {:?} with {} scales", w.shape(), s.len()),
        ));
    }
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = w.data()[r * cols + c] * s[r];
        }
    }
    Tensor::matrix(rows, cols, out)
}

fn fan_in_uniform(rng: &mut RandomStream, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    rng.uniform_tensor(shape, -bound, bound).with_requires_grad(true)
}

// ---------------------------------------------------------------------------
// Dense layers
// ---------------------------------------------------------------------------

/// Unconditioned fully connected layer: `activation(W x + b)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
    pub activation: Activation,
}

impl Dense {
    pub fn init(input: usize, output: usize, activation: Activation, rng: &mut RandomStream) -> Dense {
        Dense {
            w: fan_in_uniform(rng, vec![output, input], input),
            b: fan_in_uniform(rng, vec![output], input),
            activation,
        }
    }

    pub fn forward_eager(&self, input: &Tensor) -> Result<Tensor> {
        let lin = affine_eager(&self.w, &self.b, input)?;
        Ok(self.activation.apply_eager(lin))
    }
}

/// Fully connected layer with beta-conditioned scaling of rows of `W` and of
/// `b`: output `s(beta) ⊙ (W x + b)` with `s = sigmoid(u ln(beta) + v)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BetaAdjustedDense {
    pub w: Tensor,
    pub b: Tensor,
    pub u: Tensor,
    pub v: Tensor,
    pub activation: Activation,
}

impl BetaAdjustedDense {
    pub fn init(
        input: usize,
        output: usize,
        activation: Activation,
        init_v: f64,
        rng: &mut RandomStream,
    ) -> BetaAdjustedDense {
        BetaAdjustedDense {
            w: fan_in_uniform(rng, vec![output, input], input),
            b: fan_in_uniform(rng, vec![output], input),
            u: Tensor::zeros(vec![output]).with_requires_grad(true),
            v: Tensor::from_vec(vec![output], vec![init_v; output])
                .expect("shape matches data")
                .with_requires_grad(true),
            activation,
        }
    }

    /// Effective parameters at a fixed beta: `(s ⊙_row W, s ⊙ b)`.
    pub fn adjusted_params(&self, beta: f64) -> Result<(Tensor, Tensor)> {
        let s = beta_scale(self.u.data(), self.v.data(), beta)?;
        let w = scale_rows(&self.w, &s)?;
        let b = Tensor::vector(self.b.data().iter().zip(&s).map(|(&bi, &si)| bi * si).collect());
        Ok((w, b))
    }

    /// Fused forward `s(beta) ⊙ (W x + b)` for a single vector or a batch
    /// with one sample per row; the same scale vector applies to every row.
    pub fn forward_eager(&self, beta: f64, input: &Tensor) -> Result<Tensor> {
        let s = beta_scale(self.u.data(), self.v.data(), beta)?;
        let lin = affine_eager(&self.w, &self.b, input)?;
        let scaled = if lin.rank() == 1 {
            Tensor::vector(lin.data().iter().zip(&s).map(|(&x, &si)| x * si).collect())
        } else {
            scale_cols_of_rows(&lin, &s)?
        };
        Ok(self.activation.apply_eager(scaled))
    }
}

/// `W x + b` for a `[input]` vector or `[m, input]` batch.
fn affine_eager(w: &Tensor, b: &Tensor, input: &Tensor) -> Result<Tensor> {
    let (output, width) = (w.shape()[0], w.shape()[1]);
    match input.rank() {
        1 => {
            if input.shape()[0] != width {
                return Err(Error::shape(
                    "dense forward",
                    format!("input width {} does not match layer width {width}", input.shape()[0]),
                ));
            }
            let mut out = vec![0.0; output];
            for (r, slot) in out.iter_mut().enumerate() {
                let mut acc = b.data()[r];
                for c in 0..width {
                    acc += w.data()[r * width + c] * input.data()[c];
                }
                *slot = acc;
            }
            Ok(Tensor::vector(out))
        }
        2 => {
            if input.shape()[1] != width {
                return Err(Error::shape(
                    "dense forward",
                    format!("batch width {} does not match layer width {width}", input.shape()[1]),
                ));
            }
            let m = input.shape()[0];
            let mut out = vec![0.0; m * output];
            for s in 0..m {
                for r in 0..output {
                    let mut acc = b.data()[r];
                    for c in 0..width {
                        acc += w.data()[r * width + c] * input.data()[s * width + c];
                    }
                    out[s * output + r] = acc;
                }
            }
            Tensor::matrix(m, output, out)
        }
        rank => Err(Error::shape("dense forward", format!("input rank {rank} unsupported"))),
    }
}

/// Multiplies column `j` of every row by `s[j]`.
fn scale_cols_of_rows(batch: &Tensor, s: &[f64]) -> Result<Tensor> {
    let (m, cols) = (batch.shape()[0], batch.shape()[1]);
    if cols != s.len() {
        return Err(Error::shape(
            "scale_cols_of_rows",
            format!("batch {:?} with {} scales", batch.shape(), s.len()),
        ));
    }
    let mut out = vec![0.0; m * cols];
    for r in 0..m {
        for c in 0..cols {
            out[r * cols + c] = batch.data()[r * cols + c] * s[c];
        }
    }
    Tensor::matrix(m, cols, out)
}

/// Spec op: fused beta-conditioned dense forward.
pub fn dense_adjusted_forward(layer: &BetaAdjustedDense, beta: f64, input: &Tensor) -> Result<Tensor> {
    layer.forward_eager(beta, input)
}

// ---------------------------------------------------------------------------
// Convolutional layers
// ---------------------------------------------------------------------------

/// Unconditioned convolution: valid cross-correlation, stride 1.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv {
    /// `[out_channels, in_channels, k, k]`
    pub kernels: Tensor,
    /// `[out_channels]`
    pub bias: Tensor,
    pub activation: Activation,
}

impl Conv {
    pub fn init(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        activation: Activation,
        rng: &mut RandomStream,
    ) -> Conv {
        let fan_in = in_channels * kernel * kernel;
        Conv {
            kernels: fan_in_uniform(rng, vec![out_channels, in_channels, kernel, kernel], fan_in),
            bias: fan_in_uniform(rng, vec![out_channels], fan_in),
            activation,
        }
    }

    pub fn forward_eager(&self, input: &Tensor) -> Result<Tensor> {
        let out = conv_forward(&self.kernels, &self.bias, input)?;
        Ok(self.activation.apply_eager(out))
    }
}

/// Convolution whose kernels are scaled one `k x k` block at a time by
/// `sigmoid(u1 ln(beta) + v1)` (per filter, per input channel) and whose bias
/// is scaled by `sigmoid(u2 ln(beta) + v2)` (per filter).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BetaAdjustedConv {
    /// `[out_channels, in_channels, k, k]`
    pub kernels: Tensor,
    /// `[out_channels]`
    pub bias: Tensor,
    /// `[out_channels, in_channels]`
    pub u1: Tensor,
    /// `[out_channels, in_channels]`
    pub v1: Tensor,
    /// `[out_channels]`
    pub u2: Tensor,
    /// `[out_channels]`
    pub v2: Tensor,
    pub activation: Activation,
}

impl BetaAdjustedConv {
    pub fn init(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        activation: Activation,
        init_v: f64,
        rng: &mut RandomStream,
    ) -> BetaAdjustedConv {
        let fan_in = in_channels * kernel * kernel;
        BetaAdjustedConv {
            kernels: fan_in_uniform(rng, vec![out_channels, in_channels, kernel, kernel], fan_in),
            bias: fan_in_uniform(rng, vec![out_channels], fan_in),
            u1: Tensor::zeros(vec![out_channels, in_channels]).with_requires_grad(true),
            v1: Tensor::from_vec(
                vec![out_channels, in_channels],
                vec![init_v; out_channels * in_channels],
            )
            .expect("shape matches data")
            .with_requires_grad(true),
            u2: Tensor::zeros(vec![out_channels]).with_requires_grad(true),
            v2: Tensor::from_vec(vec![out_channels], vec![init_v; out_channels])
                .expect("shape matches data")
                .with_requires_grad(true),
            activation,
        }
    }

    pub fn forward_eager(&self, beta: f64, input: &Tensor) -> Result<Tensor> {
        let (k, b) = conv_adjusted_params(self, beta)?;
        let out = conv_forward(&k, &b, input)?;
        Ok(self.activation.apply_eager(out))
    }
}

/// Spec op: effective kernels and biases of a beta-conditioned conv layer at
/// a fixed beta. Each `k x k` block shares one scale.
pub fn conv_adjusted_params(layer: &BetaAdjustedConv, beta: f64) -> Result<(Tensor, Tensor)> {
    let s1 = beta_scale(layer.u1.data(), layer.v1.data(), beta)?;
    let s2 = beta_scale(layer.u2.data(), layer.v2.data(), beta)?;
    let shape = layer.kernels.shape();
    let block = shape[2] * shape[3];
    let mut kernels = vec![0.0; layer.kernels.numel()];
    for (bi, &scale) in s1.iter().enumerate() {
        for p in 0..block {
            kernels[bi * block + p] = layer.kernels.data()[bi * block + p] * scale;
        }
    }
    let bias = Tensor::vector(
        layer.bias.data().iter().zip(&s2).map(|(&b, &s)| b * s).collect(),
    );
    Ok((Tensor::from_vec(shape.to_vec(), kernels)?, bias))
}

/// Valid cross-correlation with explicit kernels and bias, for a `[ci, h, w]`
/// sample or a `[m, ci, h, w]` batch.
pub fn conv_forward(kernels: &Tensor, bias: &Tensor, input: &Tensor) -> Result<Tensor> {
    let (batched, shape) = match input.rank() {
        3 => (false, vec![1, input.shape()[0], input.shape()[1], input.shape()[2]]),
        4 => (true, input.shape().to_vec()),
        rank => {
            return Err(Error::shape("conv_forward", format!("input rank {rank} unsupported")))
        }
    };
    let (m, ci, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (co, kci, k) = (kernels.shape()[0], kernels.shape()[1], kernels.shape()[2]);
    if kci != ci || k > h || k > w {
        return Err(Error::shape(
            "conv_forward",
            format!("kernels {:?} incompatible with input {:?}", kernels.shape(), input.shape()),
        ));
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = vec![0.0; m * co * oh * ow];
    for s in 0..m {
        conv2d_sample_raw(
            &input.data()[s * ci * h * w..(s + 1) * ci * h * w],
            kernels.data(),
            bias.data(),
            ci,
            h,
            w,
            co,
            k,
            &mut out[s * co * oh * ow..(s + 1) * co * oh * ow],
        );
    }
    if batched {
        Tensor::from_vec(vec![m, co, oh, ow], out)
    } else {
        Tensor::from_vec(vec![co, oh, ow], out)
    }
}

// ---------------------------------------------------------------------------
// Unified layer handling
// ---------------------------------------------------------------------------

/// One trainable layer of either family, conditioned or not.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Layer {
    Dense(Dense),
    BetaDense(BetaAdjustedDense),
    Conv(Conv),
    BetaConv(BetaAdjustedConv),
}

impl Layer {
    /// Instantiates `spec`, conditioned on beta when `hyper` is true.
    pub fn init(
        spec: LayerSpec,
        activation: Activation,
        hyper: bool,
        init_v: f64,
        rng: &mut RandomStream,
    ) -> Layer {
        match (spec, hyper) {
            (LayerSpec::Dense { input, output }, false) => {
                Layer::Dense(Dense::init(input, output, activation, rng))
            }
            (LayerSpec::Dense { input, output }, true) => {
                Layer::BetaDense(BetaAdjustedDense::init(input, output, activation, init_v, rng))
            }
            (LayerSpec::Conv { in_channels, out_channels, kernel }, false) => {
                Layer::Conv(Conv::init(in_channels, out_channels, kernel, activation, rng))
            }
            (LayerSpec::Conv { in_channels, out_channels, kernel }, true) => Layer::BetaConv(
                BetaAdjustedConv::init(in_channels, out_channels, kernel, activation, init_v, rng),
            ),
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense(l) => LayerSpec::Dense { input: l.w.shape()[1], output: l.w.shape()[0] },
            Layer::BetaDense(l) => {
                LayerSpec::Dense { input: l.w.shape()[1], output: l.w.shape()[0] }
            }
            Layer::Conv(l) => LayerSpec::Conv {
                in_channels: l.kernels.shape()[1],
                out_channels: l.kernels.shape()[0],
                kernel: l.kernels.shape()[2],
            },
            Layer::BetaConv(l) => LayerSpec::Conv {
                in_channels: l.kernels.shape()[1],
                out_channels: l.kernels.shape()[0],
                kernel: l.kernels.shape()[2],
            },
        }
    }

    /// Named parameter views, in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::Dense(l) => vec![("w", &l.w), ("b", &l.b)],
            Layer::BetaDense(l) => vec![("w", &l.w), ("b", &l.b), ("u", &l.u), ("v", &l.v)],
            Layer::Conv(l) => vec![("k", &l.kernels), ("b", &l.bias)],
            Layer::BetaConv(l) => vec![
                ("k", &l.kernels),
                ("b", &l.bias),
                ("u1", &l.u1),
                ("v1", &l.v1),
                ("u2", &l.u2),
                ("v2", &l.v2),
            ],
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Layer::Dense(l) => vec![("w", &mut l.w), ("b", &mut l.b)],
            Layer::BetaDense(l) => {
                vec![("w", &mut l.w), ("b", &mut l.b), ("u", &mut l.u), ("v", &mut l.v)]
            }
            Layer::Conv(l) => vec![("k", &mut l.kernels), ("b", &mut l.bias)],
            Layer::BetaConv(l) => vec![
                ("k", &mut l.kernels),
                ("b", &mut l.bias),
                ("u1", &mut l.u1),
                ("v1", &mut l.v1),
                ("u2", &mut l.u2),
                ("v2", &mut l.v2),
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Copies this layer's parameters into `out` under `prefix.name` keys.
    pub fn bind(&self, prefix: &str, out: &mut Bindings) {
        for (suffix, tensor) in self.params() {
            out.insert(format!("{prefix}.{suffix}"), tensor.clone());
        }
    }

    /// Builds the forward graph for a batch input node.
    ///
    /// Dense layers expect `[m, input]`, conv layers `[m, ci, h, w]`.
    /// `ln_beta` is the `[1]` node holding `ln(beta)`; it is only consulted by
    /// conditioned layers.
    pub fn build_graph(
        &self,
        g: &mut Graph,
        prefix: &str,
        input: NodeId,
        ln_beta: Option<NodeId>,
    ) -> Result<NodeId> {
        let need_beta = || {
            ln_beta.ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "layer '{prefix}' is beta-conditioned but no ln(beta) node was supplied"
                ))
            })
        };
        match self {
            Layer::Dense(l) => {
                let w = g.input(&format!("{prefix}.w"));
                let b = g.input(&format!("{prefix}.b"));
                let wt = g.transpose(w);
                let lin = g.matmul(input, wt);
                let linb = g.row_add(lin, b);
                Ok(l.activation.apply_graph(g, linb))
            }
            Layer::BetaDense(l) => {
                let lb = need_beta()?;
                let w = g.input(&format!("{prefix}.w"));
                let b = g.input(&format!("{prefix}.b"));
                let u = g.input(&format!("{prefix}.u"));
                let v = g.input(&format!("{prefix}.v"));
                let wt = g.transpose(w);
                let lin = g.matmul(input, wt);
                let linb = g.row_add(lin, b);
                let ul = g.mul(u, lb);
                let aff = g.add(ul, v);
                let s = g.sigmoid(aff);
                let scaled = g.row_mul(linb, s);
                Ok(l.activation.apply_graph(g, scaled))
            }
            Layer::Conv(l) => {
                let k = g.input(&format!("{prefix}.k"));
                let b = g.input(&format!("{prefix}.b"));
                let out = g.conv2d(input, k, b);
                Ok(l.activation.apply_graph(g, out))
            }
            Layer::BetaConv(l) => {
                let lb = need_beta()?;
                let k = g.input(&format!("{prefix}.k"));
                let b = g.input(&format!("{prefix}.b"));
                let u1 = g.input(&format!("{prefix}.u1"));
                let v1 = g.input(&format!("{prefix}.v1"));
                let u2 = g.input(&format!("{prefix}.u2"));
                let v2 = g.input(&format!("{prefix}.v2"));
                let u1l = g.mul(u1, lb);
                let aff1 = g.add(u1l, v1);
                let s1 = g.sigmoid(aff1);
                let keff = g.block_mul(k, s1);
                let u2l = g.mul(u2, lb);
                let aff2 = g.add(u2l, v2);
                let s2 = g.sigmoid(aff2);
                let beff = g.mul(b, s2);
                let out = g.conv2d(input, keff, beff);
                Ok(l.activation.apply_graph(g, out))
            }
        }
    }

    /// Eager forward mirroring `build_graph` through the same kernels.
    pub fn forward_eager(&self, beta: f64, input: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(l) => l.forward_eager(input),
            Layer::BetaDense(l) => l.forward_eager(beta, input),
            Layer::Conv(l) => l.forward_eager(input),
            Layer::BetaConv(l) => l.forward_eager(beta, input),
        }
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        for (_, t) in self.params_mut() {
            t.set_requires_grad(requires_grad);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_scale_is_half_at_zero_affine() {
        let s = beta_scale(&[0.0, 0.0], &[0.0, 0.0], 17.3).unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
    }

    #[test]
    fn beta_scale_matches_rational_form_for_unit_b() {
        // u = -1, v = ln 2 gives ||B||^2 / (||B||^2 + beta/2) with ||B|| = 1.
        let s = beta_scale(&[-1.0], &[2.0_f64.ln()], 2.0).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15);
        for &beta in &[1e-5, 1e-2, 0.5, 3.0, 10.0] {
            let s = beta_scale(&[-1.0], &[2.0_f64.ln()], beta).unwrap();
            let expect = 1.0 / (1.0 + 0.5 * beta);
            assert!((s[0] - expect).abs() < 1e-14, "beta={beta}");
        }
    }

    #[test]
    fn beta_scale_saturates() {
        let s = beta_scale(&[0.0], &[20.0], 1.0).unwrap();
        assert!((s[0] - (1.0 - 2.06e-9)).abs() < 1e-10);
    }

    #[test]
    fn beta_scale_rejects_nonpositive_beta() {
        assert!(beta_scale(&[0.0], &[0.0], 0.0).is_err());
        assert!(beta_scale(&[0.0], &[0.0], -1.0).is_err());
    }

    #[test]
    fn adjusted_dense_identity_case() {
        let layer = BetaAdjustedDense {
            w: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            b: Tensor::zeros(vec![2]),
            u: Tensor::zeros(vec![2]),
            v: Tensor::zeros(vec![2]),
            activation: Activation::Identity,
        };
        let out = dense_adjusted_forward(&layer, 0.7, &Tensor::vector(vec![2.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn adjusted_dense_approaches_plain_when_scale_saturates() {
        let mut rng = RandomStream::new(11);
        let mut layer = BetaAdjustedDense::init(4, 3, Activation::Identity, 0.0, &mut rng);
        layer.v = Tensor::from_vec(vec![3], vec![20.0; 3]).unwrap();
        let plain = Dense { w: layer.w.clone(), b: layer.b.clone(), activation: Activation::Identity };
        let x = rng.normal_tensor(vec![5, 4], 1.0);
        let a = layer.forward_eager(1.3, &x).unwrap();
        let b = plain.forward_eager(&x).unwrap();
        for (ai, bi) in a.data().iter().zip(b.data()) {
            assert!((ai - bi).abs() <= 1e-8 * bi.abs().max(1.0));
        }
    }

    #[test]
    fn conv_adjusted_halves_kernels_at_neutral_parameters() {
        let mut rng = RandomStream::new(5);
        let layer = BetaAdjustedConv::init(2, 1, 3, Activation::Identity, 0.0, &mut rng);
        let (k, _) = conv_adjusted_params(&layer, 42.0).unwrap();
        for (scaled, orig) in k.data().iter().zip(layer.kernels.data()) {
            assert!((scaled - 0.5 * orig).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_adjusted_saturation_keeps_or_kills_blocks() {
        let mut rng = RandomStream::new(6);
        let mut layer = BetaAdjustedConv::init(2, 1, 3, Activation::Identity, 0.0, &mut rng);
        layer.u1 = Tensor::from_vec(vec![1, 2], vec![20.0, -20.0]).unwrap();
        // ln(beta) = 1 drives the affine input to +-20.
        let (k, _) = conv_adjusted_params(&layer, std::f64::consts::E).unwrap();
        for p in 0..9 {
            assert!((k.data()[p] - layer.kernels.data()[p]).abs() < 1e-8);
            assert!(k.data()[9 + p].abs() < 1e-8);
        }
    }

    #[test]
    fn extra_parameter_count_matches_stated_formulas() {
        let dense = Architecture::new(vec![LayerSpec::Dense { input: 10, output: 5 }]);
        assert_eq!(extra_parameter_count(&dense), 10);
        let conv = Architecture::new(vec![LayerSpec::Conv {
            in_channels: 3,
            out_channels: 8,
            kernel: 3,
        }]);
        assert_eq!(extra_parameter_count(&conv), 64);
        let stack = Architecture::new(vec![
            LayerSpec::Dense { input: 784, output: 128 },
            LayerSpec::Dense { input: 128, output: 10 },
        ]);
        assert_eq!(extra_parameter_count(&stack), 276);
    }

    #[test]
    fn architecture_validation_catches_width_breaks() {
        let bad = Architecture::new(vec![
            LayerSpec::Dense { input: 4, output: 7 },
            LayerSpec::Dense { input: 8, output: 2 },
        ]);
        assert!(bad.validate().is_err());
    }
}
