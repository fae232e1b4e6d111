//! Oracle checks of the loss machinery: the closed-form rate term against
//! direct numerical integration and Monte Carlo, the batch loss against a
//! plain-loop reimplementation, and the beta-averaged objective against
//! Gauss-Legendre quadrature.

mod common;

use common::{
    cvib_of_device, gauss_legendre, kl_by_integration, kl_by_monte_carlo, linear_model_spec,
    nll_scalar, pin_linear_decoder,
};
use hypervib_core::data_io::gen_linear_instance;
use hypervib_core::diffcore::{RandomStream, Tensor};
use hypervib_core::hyperlayers::{Activation, Layer, LayerSpec};
use hypervib_core::objective::{
    hyper_vib_step_loss, kl_to_standard_prior, vib_batch_loss, Batch, BatchTargets, BetaSampling,
    VibLossGraph,
};
use hypervib_core::pipeline::{Channel, GaussianCode, Model, ModelSpec};

fn code(mu: Vec<f64>, theta: Vec<f64>) -> GaussianCode {
    GaussianCode { mu: Tensor::vector(mu), theta: Tensor::vector(theta) }
}

#[test]
fn kl_closed_form_matches_integration_on_frozen_cases() {
    // KL(N(1, 1) || N(0, 1)) = 0.5.
    let direct = kl_to_standard_prior(&code(vec![1.0], vec![1.0]), 0.0).unwrap();
    let integrated = kl_by_integration(&[1.0], &[1.0], 0.0);
    assert!((direct - 0.5).abs() < 1e-15);
    assert!((integrated - 0.5).abs() < 1e-9, "{integrated}");

    // Two dimensions, theta = 1, unit channel noise: 1 - ln 2.
    let direct = kl_to_standard_prior(&code(vec![0.0, 0.0], vec![1.0, 1.0]), 1.0).unwrap();
    let integrated = kl_by_integration(&[0.0, 0.0], &[1.0, 1.0], 1.0);
    let expect = 1.0 - 2.0_f64.ln();
    assert!((direct - expect).abs() < 1e-15);
    assert!((integrated - expect).abs() < 1e-9, "{integrated}");
}

#[test]
fn kl_closed_form_matches_integration_on_random_codes() {
    let mut rng = RandomStream::new(31);
    for _ in 0..20 {
        let d = 1 + rng.index(4);
        let mu: Vec<f64> = (0..d).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let theta: Vec<f64> = (0..d).map(|_| rng.uniform_in(0.05, 2.0)).collect();
        let sigma2 = rng.uniform_in(0.0, 1.5);
        let closed = kl_to_standard_prior(&code(mu.clone(), theta.clone()), sigma2).unwrap();
        let integrated = kl_by_integration(&mu, &theta, sigma2);
        assert!(
            (closed - integrated).abs() < 1e-3,
            "closed {closed} vs integrated {integrated}"
        );
    }
}

#[test]
fn kl_closed_form_matches_monte_carlo() {
    let mut rng = RandomStream::new(32);
    for _ in 0..3 {
        let d = 1 + rng.index(3);
        let mu: Vec<f64> = (0..d).map(|_| rng.uniform_in(-1.5, 1.5)).collect();
        let theta: Vec<f64> = (0..d).map(|_| rng.uniform_in(0.1, 1.5)).collect();
        let sigma2 = rng.uniform_in(0.0, 1.0);
        let closed = kl_to_standard_prior(&code(mu.clone(), theta.clone()), sigma2).unwrap();
        let mc = kl_by_monte_carlo(&mu, &theta, sigma2, 1_000_000, &mut rng);
        assert!((closed - mc).abs() < 1e-2, "closed {closed} vs mc {mc}");
    }
}

#[test]
fn kl_is_nonnegative_over_random_draws() {
    let mut rng = RandomStream::new(33);
    for _ in 0..10_000 {
        let d = 1 + rng.index(4);
        let mu: Vec<f64> = (0..d).map(|_| rng.uniform_in(-3.0, 3.0)).collect();
        let theta: Vec<f64> = (0..d).map(|_| rng.uniform_in(0.0, 3.0)).collect();
        let sigma2 = rng.uniform_in(1e-4, 3.0);
        let kl = kl_to_standard_prior(&code(mu, theta), sigma2).unwrap();
        assert!(kl >= 0.0, "negative kl {kl}");
    }
    // Equality exactly at mu = 0, theta^2 + sigma2 = 1.
    assert_eq!(kl_to_standard_prior(&code(vec![0.0; 3], vec![0.0; 3]), 1.0).unwrap(), 0.0);
}

fn toy_classifier_spec(hyper_heads: bool) -> ModelSpec {
    ModelSpec {
        input_dim: 3,
        input_image: None,
        encoder_hidden: vec![LayerSpec::Dense { input: 3, output: 5 }],
        feature_dim: 4,
        decoder_hidden: vec![LayerSpec::Dense { input: 4, output: 5 }],
        output_dim: 3,
        hidden_activation: Activation::Sigmoid,
        beta_adjust_heads: hyper_heads,
        deterministic_encoder: false,
        theta_min: 1e-6,
        init_v: 0.0,
    }
}

fn toy_batch(rng: &mut RandomStream, m: usize) -> Batch {
    Batch {
        x: rng.normal_tensor(vec![m, 3], 1.0),
        targets: BatchTargets::Labels((0..m).map(|_| rng.index(3)).collect()),
    }
}

#[test]
fn zero_beta_total_is_exactly_the_distortion() {
    let mut rng = RandomStream::new(40);
    let model = Model::init(&toy_classifier_spec(false), false, &mut rng).unwrap();
    let batch = toy_batch(&mut rng, 4);
    let channel = Channel::new(0.04).unwrap();
    let rd = vib_batch_loss(&model, &batch, 0.0, &channel, &mut rng, 1).unwrap();
    assert_eq!(rd.total.to_bits(), rd.distortion.to_bits());
    assert!(rd.rate > 0.0);
}

#[test]
fn centered_deterministic_encoder_with_unit_channel_has_zero_rate() {
    let mut rng = RandomStream::new(41);
    let spec = ModelSpec { deterministic_encoder: true, ..toy_classifier_spec(false) };
    let mut model = Model::init(&spec, false, &mut rng).unwrap();
    for (name, t) in model.named_params_mut() {
        if name.starts_with("enc.mu") {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
    }
    let batch = toy_batch(&mut rng, 4);
    let channel = Channel::new(1.0).unwrap();
    let rd = vib_batch_loss(&model, &batch, 0.7, &channel, &mut rng, 1).unwrap();
    assert_eq!(rd.rate, 0.0);
    assert_eq!(rd.total.to_bits(), rd.distortion.to_bits());
}

/// Plain-loop reimplementation of the whole batch loss for a dense
/// beta-conditioned classifier; shares only the model's parameter tensors
/// and the bound noise realizations with the implementation under test.
fn scalar_loop_loss(
    model: &Model,
    batch: &Batch,
    beta: f64,
    sigma2: f64,
    repar: &Tensor,
    channel_noise: &[&Tensor],
) -> (f64, f64, f64) {
    let layers = model.layers();
    let lb = beta.ln();
    let dense = |prefix: &str, input: &[f64]| -> Vec<f64> {
        let (_, layer) = layers.iter().find(|(n, _)| n == prefix).unwrap();
        match layer {
            Layer::BetaDense(l) => {
                let (dout, din) = (l.w.shape()[0], l.w.shape()[1]);
                let mut out = vec![0.0; dout];
                for j in 0..dout {
                    let mut acc = l.b.data()[j];
                    for k in 0..din {
                        acc += l.w.at2(j, k) * input[k];
                    }
                    let s = 1.0 / (1.0 + (-(l.u.data()[j] * lb + l.v.data()[j])).exp());
                    out[j] = s * acc;
                    if matches!(l.activation, Activation::Sigmoid) {
                        out[j] = 1.0 / (1.0 + (-out[j]).exp());
                    }
                }
                out
            }
            Layer::Dense(l) => {
                let (dout, din) = (l.w.shape()[0], l.w.shape()[1]);
                let mut out = vec![0.0; dout];
                for j in 0..dout {
                    let mut acc = l.b.data()[j];
                    for k in 0..din {
                        acc += l.w.at2(j, k) * input[k];
                    }
                    out[j] = acc;
                    if matches!(l.activation, Activation::Sigmoid) {
                        out[j] = 1.0 / (1.0 + (-out[j]).exp());
                    }
                }
                out
            }
            _ => panic!("dense-only model expected"),
        }
    };
    let softplus = |x: f64| {
        if x > 30.0 {
            x
        } else if x < -30.0 {
            x.exp()
        } else {
            x.exp().ln_1p()
        }
    };
    let m = batch.len();
    let l_draws = channel_noise.len();
    let d = model.spec.feature_dim;
    let labels = match &batch.targets {
        BatchTargets::Labels(l) => l,
        _ => panic!("classification batch expected"),
    };
    let mut dist = 0.0;
    let mut rate = 0.0;
    for s in 0..m {
        let h = dense("enc.h0", batch.x.row(s));
        let mu = dense("enc.mu", &h);
        let theta: Vec<f64> =
            dense("enc.th", &h).iter().map(|&r| softplus(r) + 1e-6).collect();
        let z: Vec<f64> = (0..d)
            .map(|i| mu[i] + theta[i] * repar.at2(s, i))
            .collect();
        let mut sample_dist = 0.0;
        for eps in channel_noise {
            let z_hat: Vec<f64> = (0..d).map(|i| z[i] + eps.at2(s, i)).collect();
            let hidden = dense("dec.h0", &z_hat);
            let logits = dense("dec.out", &hidden);
            sample_dist += nll_scalar(&logits, labels[s]);
        }
        dist += sample_dist / l_draws as f64;
        let mut kl = 0.0;
        for i in 0..d {
            let v = theta[i] * theta[i] + sigma2;
            kl += mu[i] * mu[i] + v - v.ln();
        }
        rate += 0.5 * (kl - d as f64);
    }
    dist /= m as f64;
    rate /= m as f64;
    (dist, rate, dist + beta * rate)
}

#[test]
fn batch_loss_matches_scalar_loop_reimplementation() {
    let mut rng = RandomStream::new(42);
    let model = Model::init(&toy_classifier_spec(true), true, &mut rng).unwrap();
    let batch = toy_batch(&mut rng, 4);
    let channel = Channel::new(0.09).unwrap();
    let beta = 0.037;
    let l_draws = 2;

    let mut graph =
        VibLossGraph::build(&model, batch.len(), l_draws, batch.kind(), channel.sigma2).unwrap();
    let binds = graph.bind(&model, &batch, beta, &channel, &mut rng).unwrap();
    let rd = graph.evaluate(&binds).unwrap();

    let repar = &binds["noise.repar"];
    let eps: Vec<&Tensor> = (0..l_draws).map(|l| &binds[&format!("noise.ch{l}")]).collect();
    let (dist, rate, total) = scalar_loop_loss(&model, &batch, beta, channel.sigma2, repar, &eps);

    assert!((rd.distortion - dist).abs() <= 1e-12 * dist.abs().max(1.0), "{} vs {dist}", rd.distortion);
    assert!((rd.rate - rate).abs() <= 1e-12 * rate.abs().max(1.0), "{} vs {rate}", rd.rate);
    assert!((rd.total - total).abs() <= 1e-12 * total.abs().max(1.0), "{} vs {total}", rd.total);
}

#[test]
fn doubling_beta_doubles_the_rate_share_exactly() {
    // Holds for an unconditioned model, whose rate term does not move with
    // beta; conditioned layers change their effective weights instead.
    let mut rng = RandomStream::new(43);
    let model = Model::init(&toy_classifier_spec(false), false, &mut rng).unwrap();
    let batch = toy_batch(&mut rng, 5);
    let channel = Channel::new(0.04).unwrap();
    for &beta in &[1e-4, 0.02, 0.4] {
        let mut r1 = RandomStream::new(99);
        let mut r2 = RandomStream::new(99);
        let a = vib_batch_loss(&model, &batch, beta, &channel, &mut r1, 1).unwrap();
        let b = vib_batch_loss(&model, &batch, 2.0 * beta, &channel, &mut r2, 1).unwrap();
        // Same noise, same parameters: both terms are bitwise equal, and
        // doubling beta doubles the weighted rate share exactly (scaling by
        // two commutes with rounding).
        assert_eq!(a.distortion.to_bits(), b.distortion.to_bits(), "beta {beta}");
        assert_eq!(a.rate.to_bits(), b.rate.to_bits(), "beta {beta}");
        let reconstructed = a.distortion + 2.0 * (a.beta * a.rate);
        assert_eq!(reconstructed.to_bits(), b.total.to_bits(), "beta {beta}");
    }
}

#[test]
fn step_loss_with_one_sample_equals_the_single_batch_loss() {
    let mut rng = RandomStream::new(44);
    let model = Model::init(&toy_classifier_spec(true), true, &mut rng).unwrap();
    let channel = Channel::new(0.04).unwrap();
    let batch = toy_batch(&mut rng, 4);

    let mut run_rng = RandomStream::new(7);
    let loss = hyper_vib_step_loss(
        &model,
        1,
        (1e-5, 1.0),
        |_| batch.clone(),
        &channel,
        &mut run_rng,
        1,
        BetaSampling::Uniform,
    )
    .unwrap();

    let mut replay = RandomStream::new(7);
    let beta = replay.uniform_in(1e-5, 1.0);
    let expect = vib_batch_loss(&model, &batch, beta, &channel, &mut replay, 1).unwrap().total;
    assert_eq!(loss.to_bits(), expect.to_bits());
}

#[test]
fn step_loss_with_two_samples_is_the_arithmetic_mean() {
    let mut rng = RandomStream::new(45);
    let model = Model::init(&toy_classifier_spec(true), true, &mut rng).unwrap();
    let channel = Channel::new(0.04).unwrap();
    let batch = toy_batch(&mut rng, 4);

    let mut run_rng = RandomStream::new(8);
    let loss = hyper_vib_step_loss(
        &model,
        2,
        (1e-5, 1.0),
        |_| batch.clone(),
        &channel,
        &mut run_rng,
        1,
        BetaSampling::Uniform,
    )
    .unwrap();

    let mut replay = RandomStream::new(8);
    let beta1 = replay.uniform_in(1e-5, 1.0);
    let a = vib_batch_loss(&model, &batch, beta1, &channel, &mut replay, 1).unwrap().total;
    let beta2 = replay.uniform_in(1e-5, 1.0);
    let b = vib_batch_loss(&model, &batch, beta2, &channel, &mut replay, 1).unwrap().total;
    assert_eq!(loss.to_bits(), ((a + b) / 2.0).to_bits());
}

#[test]
fn averaged_step_loss_matches_quadrature_of_the_beta_integral() {
    // Frozen linear hyper model: the per-beta objective has a closed form,
    // so its uniform average over [a, b] can be computed by quadrature and
    // compared against the Monte Carlo estimator.
    let (mut inst, data) = gen_linear_instance(3, 4, 192, 0.2, 77).unwrap();
    inst.sigma2 = 0.01;
    let mut rng = RandomStream::new(78);
    let mut model = Model::init(&linear_model_spec(3, 4), true, &mut rng).unwrap();
    pin_linear_decoder(&mut model, &inst);

    let (a, b) = (1e-5, 1.0);
    let quadrature: f64 = gauss_legendre(64, a, b)
        .into_iter()
        .map(|(beta, w)| w * cvib_of_device(&model, &inst, beta))
        .sum::<f64>()
        / (b - a);

    let channel = Channel::new(inst.sigma2).unwrap();
    let batch = data.full_batch();
    let steps = 10_000;
    let mut acc = 0.0;
    let mut mc_rng = RandomStream::new(79);
    for _ in 0..steps {
        acc += hyper_vib_step_loss(
            &model,
            1,
            (a, b),
            |_| batch.clone(),
            &channel,
            &mut mc_rng,
            1,
            BetaSampling::Uniform,
        )
        .unwrap();
    }
    let mc = acc / steps as f64;
    let rel = (mc - quadrature).abs() / quadrature;
    assert!(rel < 0.01, "mc {mc} vs quadrature {quadrature} (rel {rel:.4})");
}
