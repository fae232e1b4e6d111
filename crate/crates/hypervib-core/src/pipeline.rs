//! The device -> channel -> network inference chain: a probabilistic encoder
//! producing a diagonal Gaussian feature code, an additive-noise channel, and
//! a decoder that sees only the received feature. The decoder takes nothing
//! but `(z_hat, beta)`, and the channel nothing but `z`, so the chain's
//! conditional structure is enforced by the interfaces themselves.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Bindings, Graph, NodeId, RandomStream, Tensor};
use crate::error::{Error, Result};
use crate::hyperlayers::{Activation, Architecture, Layer, LayerSpec};

/// Per-sample parameters of the encoder distribution: mean and per-component
/// standard deviation of an independent Gaussian over the feature space.
/// Batched codes hold one row per sample.
#[derive(Clone, Debug)]
pub struct GaussianCode {
    pub mu: Tensor,
    pub theta: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderMode {
    /// Reparameterized sampling `z = mu + theta .* eta`.
    Stochastic,
    /// `theta = 0`, `z = mu` exactly, no noise draw.
    Deterministic,
}

/// Additive white Gaussian noise channel with variance `sigma2` per component.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Channel {
    pub sigma2: f64,
}

impl Channel {
    pub fn new(sigma2: f64) -> Result<Channel> {
        if !(sigma2 >= 0.0) || !sigma2.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "channel variance must be finite and nonnegative, got {sigma2}"
            )));
        }
        Ok(Channel { sigma2 })
    }

    /// `z + eps` with `eps ~ N(0, sigma2 I)`; a zero-variance channel returns
    /// `z` unchanged without consuming randomness.
    pub fn transmit(&self, z: &Tensor, rng: &mut RandomStream) -> Tensor {
        if self.sigma2 == 0.0 {
            return z.clone();
        }
        let std = self.sigma2.sqrt();
        let data = z.data().iter().map(|&v| v + std * rng.standard_normal()).collect();
        Tensor::from_vec(z.shape().to_vec(), data).expect("shape preserved")
    }
}

/// Noise variance for a signal-to-noise ratio in dB, under the convention of
/// unit per-dimension signal power (the standard-normal feature prior pulls
/// transmitted features toward unit power).
pub fn snr_to_noise_variance(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// Device-side model: hidden stack plus mean and (optionally) std heads.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    pub hidden: Vec<Layer>,
    pub mu_head: Layer,
    /// Absent in deterministic mode.
    pub theta_head: Option<Layer>,
    pub mode: EncoderMode,
    /// Lower bound on every component of theta.
    pub theta_min: f64,
}

/// Network-side model: hidden stack plus the output head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Decoder {
    pub hidden: Vec<Layer>,
    pub out_head: Layer,
}

/// Shape-level description of a full device/network model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Flattened input width.
    pub input_dim: usize,
    /// `[channels, height, width]` when the encoder starts with conv layers.
    pub input_image: Option<[usize; 3]>,
    pub encoder_hidden: Vec<LayerSpec>,
    /// Transmitted feature dimension `d`.
    pub feature_dim: usize,
    pub decoder_hidden: Vec<LayerSpec>,
    /// Class count for classification, target width for regression.
    pub output_dim: usize,
    pub hidden_activation: Activation,
    /// Whether the mu/theta/output heads are beta-conditioned too.
    pub beta_adjust_heads: bool,
    pub deterministic_encoder: bool,
    pub theta_min: f64,
    /// Initial value of every `v` (scale offset) parameter.
    pub init_v: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            input_dim: 784,
            input_image: None,
            encoder_hidden: vec![LayerSpec::Dense { input: 784, output: 256 }],
            feature_dim: 64,
            decoder_hidden: vec![LayerSpec::Dense { input: 64, output: 128 }],
            output_dim: 10,
            hidden_activation: Activation::Sigmoid,
            beta_adjust_heads: true,
            deterministic_encoder: false,
            theta_min: 1e-6,
            init_v: 0.0,
        }
    }
}

/// Tracks the tensor shape flowing through a layer stack.
enum Width {
    Flat(usize),
    Image(usize, usize, usize),
}

impl ModelSpec {
    fn trace_stack(&self, start: Width, layers: &[LayerSpec], what: &str) -> Result<usize> {
        let mut cur = start;
        for (i, spec) in layers.iter().enumerate() {
            cur = match (*spec, cur) {
                (LayerSpec::Dense { input, output }, Width::Flat(wd)) => {
                    if input != wd {
                        return Err(Error::shape(
                            "ModelSpec",
                            format!("{what} layer {i} expects width {input}, gets {wd}"),
                        ));
                    }
                    Width::Flat(output)
                }
                (LayerSpec::Dense { input, output }, Width::Image(c, h, w)) => {
                    if input != c * h * w {
                        return Err(Error::shape(
                            "ModelSpec",
                            format!(
                                "{what} layer {i} expects width {input}, image flattens to {}",
                                c * h * w
                            ),
                        ));
                    }
                    Width::Flat(output)
                }
                (LayerSpec::Conv { in_channels, out_channels, kernel }, Width::Image(c, h, w)) => {
                    if in_channels != c || kernel > h || kernel > w {
                        return Err(Error::shape(
                            "ModelSpec",
                            format!(
                                "{what} layer {i} conv ({in_channels} ch, k={kernel}) \
                                 incompatible with image {c}x{h}x{w}"
                            ),
                        ));
                    }
                    Width::Image(out_channels, h - kernel + 1, w - kernel + 1)
                }
                (LayerSpec::Conv { .. }, Width::Flat(_)) => {
                    return Err(Error::shape(
                        "ModelSpec",
                        format!("{what} layer {i} is conv but the input is already flat"),
                    ));
                }
            };
        }
        Ok(match cur {
            Width::Flat(wd) => wd,
            Width::Image(c, h, w) => c * h * w,
        })
    }

    /// Width entering the mu/theta heads.
    fn encoder_tail_width(&self) -> Result<usize> {
        let start = match self.input_image {
            Some([c, h, w]) => {
                if c * h * w != self.input_dim {
                    return Err(Error::shape(
                        "ModelSpec",
                        format!("image {c}x{h}x{w} does not flatten to input_dim {}", self.input_dim),
                    ));
                }
                Width::Image(c, h, w)
            }
            None => Width::Flat(self.input_dim),
        };
        self.trace_stack(start, &self.encoder_hidden, "encoder")
    }

    fn decoder_tail_width(&self) -> Result<usize> {
        self.trace_stack(Width::Flat(self.feature_dim), &self.decoder_hidden, "decoder")
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        self.encoder_tail_width()?;
        self.decoder_tail_width()?;
        Ok(())
    }
}

/// A full device/network model instance with named parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub encoder: Encoder,
    pub decoder: Decoder,
    /// True when layers carry beta adjustment parameters.
    pub hyper: bool,
}

impl Model {
    /// Instantiates a model; `hyper` selects beta-conditioned layers.
    pub fn init(spec: &ModelSpec, hyper: bool, rng: &mut RandomStream) -> Result<Model> {
        spec.validate()?;
        let act = spec.hidden_activation;
        let head_hyper = hyper && spec.beta_adjust_heads;
        let enc_tail = spec.encoder_tail_width()?;
        let dec_tail = spec.decoder_tail_width()?;

        let hidden = spec
            .encoder_hidden
            .iter()
            .map(|l| Layer::init(*l, act, hyper, spec.init_v, rng))
            .collect();
        let mu_head = Layer::init(
            LayerSpec::Dense { input: enc_tail, output: spec.feature_dim },
            Activation::Identity,
            head_hyper,
            spec.init_v,
            rng,
        );
        let theta_head = if spec.deterministic_encoder {
            None
        } else {
            Some(Layer::init(
                LayerSpec::Dense { input: enc_tail, output: spec.feature_dim },
                Activation::Identity,
                head_hyper,
                spec.init_v,
                rng,
            ))
        };
        let dec_hidden = spec
            .decoder_hidden
            .iter()
            .map(|l| Layer::init(*l, act, hyper, spec.init_v, rng))
            .collect();
        let out_head = Layer::init(
            LayerSpec::Dense { input: dec_tail, output: spec.output_dim },
            Activation::Identity,
            head_hyper,
            spec.init_v,
            rng,
        );

        Ok(Model {
            spec: spec.clone(),
            encoder: Encoder {
                hidden,
                mu_head,
                theta_head,
                mode: if spec.deterministic_encoder {
                    EncoderMode::Deterministic
                } else {
                    EncoderMode::Stochastic
                },
                theta_min: spec.theta_min,
            },
            decoder: Decoder { hidden: dec_hidden, out_head },
            hyper,
        })
    }

    /// All trainable layers in order, with their binding prefixes.
    pub fn layers(&self) -> Vec<(String, &Layer)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.hidden.iter().enumerate() {
            out.push((format!("enc.h{i}"), l));
        }
        out.push(("enc.mu".to_string(), &self.encoder.mu_head));
        if let Some(th) = &self.encoder.theta_head {
            out.push(("enc.th".to_string(), th));
        }
        for (i, l) in self.decoder.hidden.iter().enumerate() {
            out.push((format!("dec.h{i}"), l));
        }
        out.push(("dec.out".to_string(), &self.decoder.out_head));
        out
    }

    pub fn layers_mut(&mut self) -> Vec<(String, &mut Layer)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.hidden.iter_mut().enumerate() {
            out.push((format!("enc.h{i}"), l));
        }
        out.push(("enc.mu".to_string(), &mut self.encoder.mu_head));
        if let Some(th) = &mut self.encoder.theta_head {
            out.push(("enc.th".to_string(), th));
        }
        for (i, l) in self.decoder.hidden.iter_mut().enumerate() {
            out.push((format!("dec.h{i}"), l));
        }
        out.push(("dec.out".to_string(), &mut self.decoder.out_head));
        out
    }

    /// Copies every parameter into `out` under `prefix.tensor` names.
    pub fn bind_params(&self, out: &mut Bindings) {
        for (prefix, layer) in self.layers() {
            layer.bind(&prefix, out);
        }
    }

    /// Flat list of named parameter tensors for an optimizer.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (prefix, layer) in self.layers_mut() {
            for (suffix, t) in layer.params_mut() {
                out.push((format!("{prefix}.{suffix}"), t));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(_, l)| l.param_count()).sum()
    }

    /// Architecture of every trainable layer (hidden stacks and heads).
    pub fn architecture(&self) -> Architecture {
        Architecture::new(self.layers().iter().map(|(_, l)| l.spec()).collect())
    }

    /// Excludes the decoder from gradients and optimizer updates.
    pub fn freeze_decoder(&mut self) {
        for l in &mut self.decoder.hidden {
            l.set_requires_grad(false);
        }
        self.decoder.out_head.set_requires_grad(false);
    }

    /// Replaces the decoder output head with a plain dense layer carrying the
    /// given fixed weights (e.g. a pinned linear network-side map). The new
    /// head is frozen.
    pub fn set_decoder_weights(&mut self, w: Tensor, b: Tensor) -> Result<()> {
        let expected = match self.decoder.out_head.spec() {
            LayerSpec::Dense { input, output } => (output, input),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "decoder output head is {other:?}, expected dense"
                )))
            }
        };
        if w.shape() != [expected.0, expected.1] || b.shape() != [expected.0] {
            return Err(Error::shape(
                "set_decoder_weights",
                format!(
                    "expected [{}, {}] weights and [{}] bias, got {:?}/{:?}",
                    expected.0,
                    expected.1,
                    expected.0,
                    w.shape(),
                    b.shape()
                ),
            ));
        }
        self.decoder.out_head = Layer::Dense(crate::hyperlayers::Dense {
            w: w.with_requires_grad(false),
            b: b.with_requires_grad(false),
            activation: Activation::Identity,
        });
        Ok(())
    }

    /// Lifts a flat batch node to image shape if the encoder is convolutional.
    fn shape_input(&self, g: &mut Graph, x: NodeId, batch: usize) -> NodeId {
        match self.spec.input_image {
            Some([c, h, w]) => g.reshape(x, vec![batch, c, h, w]),
            None => x,
        }
    }

    /// Builds the encoder graph over a `[m, input_dim]` batch node.
    ///
    /// Returns `(mu, theta)` nodes, theta being `softplus(raw) + theta_min`
    /// (absent in deterministic mode).
    pub fn build_encoder_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        ln_beta: Option<NodeId>,
        batch: usize,
    ) -> Result<(NodeId, Option<NodeId>)> {
        let mut h = self.shape_input(g, x, batch);
        let mut image = self.spec.input_image.map(|[c, ih, iw]| (c, ih, iw));
        for (i, layer) in self.encoder.hidden.iter().enumerate() {
            match (layer.spec(), image) {
                (LayerSpec::Dense { .. }, Some((c, ih, iw))) => {
                    h = g.reshape(h, vec![batch, c * ih * iw]);
                    image = None;
                }
                (LayerSpec::Conv { out_channels, kernel, .. }, Some((_, ih, iw))) => {
                    image = Some((out_channels, ih - kernel + 1, iw - kernel + 1));
                }
                _ => {}
            }
            h = layer.build_graph(g, &format!("enc.h{i}"), h, ln_beta)?;
        }
        if let Some((c, ih, iw)) = image {
            h = g.reshape(h, vec![batch, c * ih * iw]);
        }
        let mu = self.encoder.mu_head.build_graph(g, "enc.mu", h, ln_beta)?;
        let theta = match &self.encoder.theta_head {
            Some(head) => {
                let raw = head.build_graph(g, "enc.th", h, ln_beta)?;
                let sp = g.softplus(raw);
                let floor = g.scalar(self.encoder.theta_min);
                Some(g.add(sp, floor))
            }
            None => None,
        };
        Ok((mu, theta))
    }

    /// Builds the decoder graph over a `[m, feature_dim]` received batch.
    pub fn build_decoder_graph(
        &self,
        g: &mut Graph,
        z_hat: NodeId,
        ln_beta: Option<NodeId>,
    ) -> Result<NodeId> {
        let mut h = z_hat;
        for (i, layer) in self.decoder.hidden.iter().enumerate() {
            h = layer.build_graph(g, &format!("dec.h{i}"), h, ln_beta)?;
        }
        self.decoder.out_head.build_graph(g, "dec.out", h, ln_beta)
    }

    /// Encoder distribution parameters and a sampled (or deterministic)
    /// feature vector for a `[input_dim]` sample or `[m, input_dim]` batch.
    pub fn encode(
        &self,
        x: &Tensor,
        beta: f64,
        rng: &mut RandomStream,
    ) -> Result<(GaussianCode, Tensor)> {
        if !(beta > 0.0) {
            return Err(Error::Domain(format!("beta must be positive, got {beta}")));
        }
        let mut h = self.eager_input(x)?;
        let mut image = self.spec.input_image.is_some();
        for layer in &self.encoder.hidden {
            if image && matches!(layer.spec(), LayerSpec::Dense { .. }) {
                h = flatten_batch(&h)?;
                image = false;
            }
            h = layer.forward_eager(beta, &h)?;
        }
        if image {
            h = flatten_batch(&h)?;
        }
        let mu = self.encoder.mu_head.forward_eager(beta, &h)?;
        let (theta, z) = match &self.encoder.theta_head {
            Some(head) => {
                let raw = head.forward_eager(beta, &h)?;
                let theta = raw.map(|t| crate::diffcore::softplus_scalar(t) + self.encoder.theta_min);
                let z_data = mu
                    .data()
                    .iter()
                    .zip(theta.data())
                    .map(|(&m, &t)| m + t * rng.standard_normal())
                    .collect();
                let z = Tensor::from_vec(mu.shape().to_vec(), z_data)?;
                (theta, z)
            }
            None => (Tensor::zeros(mu.shape().to_vec()), mu.clone()),
        };
        let (mu, theta, z) = if x.rank() == 1 {
            (drop_batch(mu), drop_batch(theta), drop_batch(z))
        } else {
            (mu, theta, z)
        };
        Ok((GaussianCode { mu, theta }, z))
    }

    /// Decoder output for a received feature vector or batch. A pure function
    /// of `(z_hat, beta)` and the network-side parameters.
    pub fn decode(&self, z_hat: &Tensor, beta: f64) -> Result<Tensor> {
        if !(beta > 0.0) {
            return Err(Error::Domain(format!("beta must be positive, got {beta}")));
        }
        let mut h = if z_hat.rank() == 1 {
            Tensor::matrix(1, z_hat.shape()[0], z_hat.data().to_vec())?
        } else {
            z_hat.clone()
        };
        for layer in &self.decoder.hidden {
            h = layer.forward_eager(beta, &h)?;
        }
        let out = self.decoder.out_head.forward_eager(beta, &h)?;
        Ok(if z_hat.rank() == 1 { drop_batch(out) } else { out })
    }

    fn eager_input(&self, x: &Tensor) -> Result<Tensor> {
        let lifted = if x.rank() == 1 {
            Tensor::matrix(1, x.shape()[0], x.data().to_vec())?
        } else {
            x.clone()
        };
        if lifted.shape()[1] != self.spec.input_dim {
            return Err(Error::shape(
                "Model::encode",
                format!("input width {} does not match model input {}", lifted.shape()[1], self.spec.input_dim),
            ));
        }
        match self.spec.input_image {
            Some([c, h, w]) => {
                Tensor::from_vec(vec![lifted.shape()[0], c, h, w], lifted.data().to_vec())
            }
            None => Ok(lifted),
        }
    }
}

fn flatten_batch(t: &Tensor) -> Result<Tensor> {
    let m = t.shape()[0];
    let rest: usize = t.shape()[1..].iter().product();
    Tensor::from_vec(vec![m, rest], t.data().to_vec())
}

fn drop_batch(t: Tensor) -> Tensor {
    if t.rank() == 2 && t.shape()[0] == 1 {
        let n = t.shape()[1];
        Tensor::from_vec(vec![n], t.data().to_vec()).expect("shape preserved")
    } else {
        t
    }
}
