//! The variational bottleneck loss: a distortion term (negative
//! log-likelihood of the target given the received feature) plus `beta`
//! times a rate term (closed-form KL between the post-channel feature
//! distribution and a standard normal prior), and its Monte Carlo average
//! over `beta` draws used to fit hypernetworks.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Bindings, Gradients, Graph, NodeId, RandomStream, Tensor};
use crate::error::{Error, Result};
use crate::pipeline::{Channel, GaussianCode, Model};

/// Loss family used for the distortion term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistortionKind {
    /// Classification: `-log softmax(logits)[label]`, in nats.
    CrossEntropy,
    /// Regression: squared Euclidean distance.
    SquaredError,
}

/// Decomposed bottleneck loss over one batch, all terms in nats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateDistortion {
    pub distortion: f64,
    pub rate: f64,
    pub beta: f64,
    pub total: f64,
}

impl RateDistortion {
    pub fn new(distortion: f64, rate: f64, beta: f64) -> RateDistortion {
        RateDistortion { distortion, rate, beta, total: distortion + beta * rate }
    }
}

/// Closed-form KL between the post-channel code distribution
/// `N(mu, diag(theta^2) + sigma2 I)` and the standard normal prior:
///
/// `0.5 * (||mu||^2 + sum(theta_i^2 + sigma2) - sum(log(theta_i^2 + sigma2)) - d)`
///
/// For a batched code (one row per sample) the mean over rows is returned.
pub fn kl_to_standard_prior(code: &GaussianCode, sigma2: f64) -> Result<f64> {
    if code.mu.shape() != code.theta.shape() {
        return Err(Error::shape(
            "kl_to_standard_prior",
            format!("mu {:?} vs theta {:?}", code.mu.shape(), code.theta.shape()),
        ));
    }
    match code.mu.rank() {
        1 => kl_row(code.mu.data(), code.theta.data(), sigma2),
        2 => {
            let (m, d) = (code.mu.shape()[0], code.mu.shape()[1]);
            let mut acc = 0.0;
            for r in 0..m {
                acc += kl_row(&code.mu.data()[r * d..(r + 1) * d], &code.theta.data()[r * d..(r + 1) * d], sigma2)?;
            }
            Ok(acc / m as f64)
        }
        rank => Err(Error::shape("kl_to_standard_prior", format!("rank {rank} unsupported"))),
    }
}

fn kl_row(mu: &[f64], theta: &[f64], sigma2: f64) -> Result<f64> {
    let d = mu.len() as f64;
    let mut acc = 0.0;
    for (&m, &t) in mu.iter().zip(theta) {
        let s = t * t + sigma2;
        if s <= 0.0 {
            return Err(Error::Domain(
                "theta^2 + sigma2 must be positive (theta = 0 requires sigma2 > 0)".into(),
            ));
        }
        acc += m * m + s - s.ln();
    }
    Ok(0.5 * (acc - d))
}

/// A single-sample target for [`distortion`].
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Label(usize),
    Values(&'a [f64]),
}

/// Distortion between one prediction and one target.
pub fn distortion(y_hat: &Tensor, y: Target<'_>, kind: DistortionKind) -> Result<f64> {
    match (kind, y) {
        (DistortionKind::CrossEntropy, Target::Label(label)) => {
            if y_hat.rank() != 1 {
                return Err(Error::shape(
                    "distortion",
                    format!("cross-entropy expects a logits vector, got {:?}", y_hat.shape()),
                ));
            }
            let k = y_hat.shape()[0];
            if label >= k {
                return Err(Error::InvalidArgument(format!(
                    "label {label} out of range for {k} classes"
                )));
            }
            let row = y_hat.data();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            Ok(lse - row[label])
        }
        (DistortionKind::SquaredError, Target::Values(values)) => {
            if y_hat.numel() != values.len() {
                return Err(Error::shape(
                    "distortion",
                    format!("prediction has {} entries, target {}", y_hat.numel(), values.len()),
                ));
            }
            Ok(y_hat.data().iter().zip(values).map(|(&a, &b)| (a - b) * (a - b)).sum())
        }
        _ => Err(Error::InvalidArgument(
            "distortion kind does not match the target form".into(),
        )),
    }
}

/// One minibatch: inputs with one sample per row, plus matching targets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub targets: BatchTargets,
}

#[derive(Clone, Debug)]
pub enum BatchTargets {
    Labels(Vec<usize>),
    Values(Tensor),
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> DistortionKind {
        match self.targets {
            BatchTargets::Labels(_) => DistortionKind::CrossEntropy,
            BatchTargets::Values(_) => DistortionKind::SquaredError,
        }
    }
}

/// Reusable loss graph for a fixed model shape, batch size and draw count.
///
/// Build once, then `bind` fresh tensors and `evaluate`/`backward` per step.
pub struct VibLossGraph {
    graph: Graph,
    distortion: NodeId,
    rate: NodeId,
    total: NodeId,
    batch_size: usize,
    noise_draws: usize,
    kind: DistortionKind,
    hyper: bool,
    stochastic: bool,
    feature_dim: usize,
}

impl VibLossGraph {
    pub fn build(
        model: &Model,
        batch_size: usize,
        noise_draws: usize,
        kind: DistortionKind,
        sigma2: f64,
    ) -> Result<VibLossGraph> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if noise_draws == 0 {
            return Err(Error::InvalidArgument("noise draw count must be >= 1".into()));
        }
        let stochastic = model.encoder.theta_head.is_some();
        if !stochastic && sigma2 == 0.0 {
            return Err(Error::Domain(
                "deterministic encoder with a noiseless channel leaves the rate term undefined"
                    .into(),
            ));
        }
        let d = model.spec.feature_dim;
        let m = batch_size;
        let mut g = Graph::new();

        let x = g.input("x");
        let beta = g.input("beta");
        let ln_beta = if model.hyper { Some(g.log(beta)) } else { None };

        let (mu, theta) = model.build_encoder_graph(&mut g, x, ln_beta, m)?;
        let z = match theta {
            Some(theta_node) => {
                let eta = g.input("noise.repar");
                let scaled = g.mul(theta_node, eta);
                g.add(mu, scaled)
            }
            None => mu,
        };

        let mut dist_acc: Option<NodeId> = None;
        for l in 0..noise_draws {
            let eps = g.input(&format!("noise.ch{l}"));
            let z_hat = g.add(z, eps);
            let y_hat = model.build_decoder_graph(&mut g, z_hat, ln_beta)?;
            let d_l = match kind {
                DistortionKind::CrossEntropy => {
                    let labels = g.input("y");
                    g.softmax_xent(y_hat, labels)
                }
                DistortionKind::SquaredError => {
                    let target = g.input("y");
                    g.square_error(y_hat, target)
                }
            };
            dist_acc = Some(match dist_acc {
                Some(acc) => g.add(acc, d_l),
                None => d_l,
            });
        }
        let inv_l = g.scalar(1.0 / noise_draws as f64);
        let distortion = {
            let acc = dist_acc.expect("at least one draw");
            g.mul(acc, inv_l)
        };

        let rate = match theta {
            Some(theta_node) => {
                let mu_sq = g.square(mu);
                let mu_term = g.sum(mu_sq);
                let th_sq = g.square(theta_node);
                let s2 = g.scalar(sigma2);
                let var = g.add(th_sq, s2);
                let var_sum = g.sum(var);
                let var_log = g.log(var);
                let log_sum = g.sum(var_log);
                let a = g.add(mu_term, var_sum);
                let b = g.sub(a, log_sum);
                let md = g.scalar((m * d) as f64);
                let c = g.sub(b, md);
                let half_inv_m = g.scalar(0.5 / m as f64);
                g.mul(c, half_inv_m)
            }
            None => {
                // theta = 0: KL per sample is 0.5 (||mu||^2 + d (s2 - ln s2 - 1)).
                let mu_sq = g.square(mu);
                let mu_term = g.sum(mu_sq);
                let half_inv_m = g.scalar(0.5 / m as f64);
                let mu_part = g.mul(mu_term, half_inv_m);
                let constant = g.scalar(0.5 * d as f64 * (sigma2 - sigma2.ln() - 1.0));
                g.add(mu_part, constant)
            }
        };

        let weighted = g.mul(beta, rate);
        let total = g.add(distortion, weighted);

        Ok(VibLossGraph {
            graph: g,
            distortion,
            rate,
            total,
            batch_size,
            noise_draws,
            kind,
            hyper: model.hyper,
            stochastic,
            feature_dim: d,
        })
    }

    /// Assembles bindings for one step: parameters, batch, beta and noise.
    ///
    /// Draw order is fixed (reparameterization noise first, then one channel
    /// block per draw index) so a seed pins the entire step.
    pub fn bind(
        &self,
        model: &Model,
        batch: &Batch,
        beta: f64,
        channel: &Channel,
        rng: &mut RandomStream,
    ) -> Result<Bindings> {
        if batch.len() != self.batch_size {
            return Err(Error::shape(
                "VibLossGraph::bind",
                format!("graph was built for batch {}, got {}", self.batch_size, batch.len()),
            ));
        }
        if batch.kind() != self.kind {
            return Err(Error::InvalidArgument("batch target kind mismatch".into()));
        }
        if self.hyper && !(beta > 0.0) {
            return Err(Error::Domain(format!(
                "beta-conditioned model requires beta > 0, got {beta}"
            )));
        }
        if !(beta >= 0.0) {
            return Err(Error::Domain(format!("beta must be nonnegative, got {beta}")));
        }
        let (m, d) = (self.batch_size, self.feature_dim);
        let mut binds = Bindings::new();
        model.bind_params(&mut binds);
        binds.insert("x".into(), batch.x.clone());
        binds.insert("beta".into(), Tensor::scalar(beta));
        match &batch.targets {
            BatchTargets::Labels(labels) => {
                binds.insert(
                    "y".into(),
                    Tensor::vector(labels.iter().map(|&l| l as f64).collect()),
                );
            }
            BatchTargets::Values(values) => {
                binds.insert("y".into(), values.clone());
            }
        }
        if self.stochastic {
            binds.insert("noise.repar".into(), rng.normal_tensor(vec![m, d], 1.0));
        }
        let ch_std = channel.sigma2.sqrt();
        for l in 0..self.noise_draws {
            let eps = if channel.sigma2 == 0.0 {
                Tensor::zeros(vec![m, d])
            } else {
                rng.normal_tensor(vec![m, d], ch_std)
            };
            binds.insert(format!("noise.ch{l}"), eps);
        }
        Ok(binds)
    }

    pub fn evaluate(&mut self, bindings: &Bindings) -> Result<RateDistortion> {
        self.graph.evaluate(bindings)?;
        let distortion = self.graph.value(self.distortion)?.item()?;
        let rate = self.graph.value(self.rate)?.item()?;
        let beta = bindings["beta"].item()?;
        let total = self.graph.value(self.total)?.item()?;
        debug_assert_eq!(total.to_bits(), (distortion + beta * rate).to_bits());
        Ok(RateDistortion { distortion, rate, beta, total })
    }

    pub fn backward(&mut self) -> Result<Gradients> {
        self.graph.backward(self.total)
    }

    pub fn set_check_finite(&mut self, check: bool) {
        self.graph.set_check_finite(check);
    }
}

/// Bottleneck loss of one model over one batch.
///
/// The distortion averages `noise_draws` independent channel draws per
/// sample; the rate term is the batch-mean closed-form KL at the channel's
/// variance. Differentiable end to end when driven through [`VibLossGraph`].
pub fn vib_batch_loss(
    model: &Model,
    batch: &Batch,
    beta: f64,
    channel: &Channel,
    rng: &mut RandomStream,
    noise_draws: usize,
) -> Result<RateDistortion> {
    let mut loss = VibLossGraph::build(model, batch.len(), noise_draws, batch.kind(), channel.sigma2)?;
    let binds = loss.bind(model, batch, beta, channel, rng)?;
    loss.evaluate(&binds)
}

/// How `beta` is drawn during hypernetwork training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BetaSampling {
    /// `beta ~ U[a, b]` in linear space (the estimator the objective states).
    Uniform,
    /// `ln(beta) ~ U[ln a, ln b]`; spreads training effort evenly over decades.
    LogUniform,
}

pub fn sample_beta(range: (f64, f64), sampling: BetaSampling, rng: &mut RandomStream) -> f64 {
    let (a, b) = range;
    match sampling {
        BetaSampling::Uniform => rng.uniform_in(a, b),
        BetaSampling::LogUniform => rng.uniform_in(a.ln(), b.ln()).exp(),
    }
}

/// Monte Carlo estimate of the hypernetwork objective: the mean over `t_samples`
/// draws of `beta` (each with a fresh minibatch) of the per-batch total loss.
///
/// With `BetaSampling::Uniform` this is an unbiased estimator of the expected
/// loss under `beta ~ U[a, b]`.
pub fn hyper_vib_step_loss(
    model: &Model,
    t_samples: usize,
    beta_range: (f64, f64),
    mut next_batch: impl FnMut(&mut RandomStream) -> Batch,
    channel: &Channel,
    rng: &mut RandomStream,
    noise_draws: usize,
    sampling: BetaSampling,
) -> Result<f64> {
    let (a, b) = beta_range;
    if !(a > 0.0) || a >= b {
        return Err(Error::InvalidArgument(format!(
            "beta range must satisfy 0 < a < b, got [{a}, {b}]"
        )));
    }
    if t_samples == 0 {
        return Err(Error::InvalidArgument("t_samples must be >= 1".into()));
    }
    let mut acc = 0.0;
    for _ in 0..t_samples {
        let beta = sample_beta(beta_range, sampling, rng);
        let batch = next_batch(rng);
        acc += vib_batch_loss(model, &batch, beta, channel, rng, noise_draws)?.total;
    }
    Ok(acc / t_samples as f64)
}
