//! Shared independent oracles for the integration tests: quadrature rules,
//! direct numerical integration of the Gaussian rate term, and plain-loop
//! reimplementations of forward paths. Nothing here calls into the graph
//! engine's adjoints or the closed-form expressions under test.

#![allow(dead_code)]

use hypervib_core::hyperlayers::{Activation, LayerSpec};
use hypervib_core::pipeline::ModelSpec;
use hypervib_core::{LinearInstance, Model, RandomStream, Tensor};

/// KL(N(mu, s2) || N(0, 1)) for one dimension by Simpson integration of the
/// defining integral.
pub fn kl_1d_by_integration(mu: f64, s2: f64) -> f64 {
    let s = s2.sqrt();
    let lo = mu - 12.0 * s;
    let hi = mu + 12.0 * s;
    let n = 4000; // even
    let h = (hi - lo) / n as f64;
    let integrand = |z: f64| {
        let p = (-0.5 * (z - mu) * (z - mu) / s2).exp() / (2.0 * std::f64::consts::PI * s2).sqrt();
        if p == 0.0 {
            return 0.0;
        }
        let log_p = -0.5 * (z - mu) * (z - mu) / s2 - 0.5 * (2.0 * std::f64::consts::PI * s2).ln();
        let log_q = -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln();
        p * (log_p - log_q)
    };
    let mut acc = integrand(lo) + integrand(hi);
    for i in 1..n {
        let z = lo + i as f64 * h;
        acc += integrand(z) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

/// KL between diagonal Gaussians `N(mu, diag(theta^2) + sigma2 I)` and the
/// standard prior, by per-dimension integration.
pub fn kl_by_integration(mu: &[f64], theta: &[f64], sigma2: f64) -> f64 {
    mu.iter()
        .zip(theta)
        .map(|(&m, &t)| kl_1d_by_integration(m, t * t + sigma2))
        .sum()
}

/// Monte Carlo estimate of the same KL via E_p[log p - log q].
pub fn kl_by_monte_carlo(
    mu: &[f64],
    theta: &[f64],
    sigma2: f64,
    draws: usize,
    rng: &mut RandomStream,
) -> f64 {
    let d = mu.len();
    let mut acc = 0.0;
    for _ in 0..draws {
        let mut log_p = 0.0;
        let mut log_q = 0.0;
        for i in 0..d {
            let s2 = theta[i] * theta[i] + sigma2;
            let z = mu[i] + s2.sqrt() * rng.standard_normal();
            log_p += -0.5 * (z - mu[i]) * (z - mu[i]) / s2 - 0.5 * (2.0 * std::f64::consts::PI * s2).ln();
            log_q += -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
        acc += log_p - log_q;
    }
    acc / draws as f64
}

/// Gauss-Legendre nodes and weights on `[a, b]` (Newton iteration on the
/// Legendre recurrence).
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        // Initial guess: Chebyshev-like.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_and_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_and_derivative(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (b - a) * x + 0.5 * (a + b), 0.5 * (b - a) * w));
    }
    out
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Stable `-log softmax(logits)[label]` with plain loops.
pub fn nll_scalar(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// The linear-task model shape: a two-layer linear device chain with a
/// deterministic encoder and a single linear network-side map.
pub fn linear_model_spec(n: usize, d: usize) -> ModelSpec {
    ModelSpec {
        input_dim: n,
        input_image: None,
        encoder_hidden: vec![LayerSpec::Dense { input: n, output: d }],
        feature_dim: d,
        decoder_hidden: vec![],
        output_dim: 1,
        hidden_activation: Activation::Identity,
        beta_adjust_heads: true,
        deterministic_encoder: true,
        theta_min: 1e-6,
        init_v: 0.0,
    }
}

/// Pins the decoder of a linear-task model to `y = B^T z` and freezes it,
/// and keeps the device purely linear by zeroing and freezing the encoder
/// biases (the linear system model has no offset terms).
pub fn pin_linear_decoder(model: &mut Model, inst: &LinearInstance) {
    let d = inst.feature_dim();
    let w = Tensor::matrix(1, d, inst.b.data().to_vec()).unwrap();
    model.set_decoder_weights(w, Tensor::zeros(vec![1])).unwrap();
    model.freeze_decoder();
    for (name, t) in model.named_params_mut() {
        if name.starts_with("enc.") && name.ends_with(".b") {
            for v in t.data_mut() {
                *v = 0.0;
            }
            t.set_requires_grad(false);
        }
    }
}

/// Exact objective value of a deterministic affine device with a pinned
/// linear decoder, taking the channel-noise expectation analytically.
pub fn cvib_of_device(model: &Model, inst: &LinearInstance, beta: f64) -> f64 {
    let big_n = inst.sample_count();
    let d = inst.feature_dim() as f64;
    let x_batch = inst.x.transposed().unwrap();
    let mut rng = RandomStream::new(0);
    let (code, _) = model.encode(&x_batch, beta, &mut rng).unwrap();
    let mu = code.mu;
    let btb: f64 = inst.b.data().iter().map(|v| v * v).sum();
    let mut dist = 0.0;
    let mut klsum = 0.0;
    for i in 0..big_n {
        let row = mu.row(i);
        let pred: f64 = row.iter().zip(inst.b.data()).map(|(&m, &b)| m * b).sum();
        let r = inst.y.data()[i] - pred;
        dist += r * r;
        klsum += 0.5
            * (row.iter().map(|&m| m * m).sum::<f64>()
                + d * (inst.sigma2 - inst.sigma2.ln() - 1.0));
    }
    dist / big_n as f64 + inst.sigma2 * btb + beta * klsum / big_n as f64
}
