//! Self-check suites behind the `gradcheck` and `verify-theorem` commands:
//! finite-difference validation of every layer kind and loss term, and the
//! linear-case representability identity on random instances.

use crate::data_io::gen_linear_instance;
use crate::diffcore::{grad_check, Bindings, Graph, NodeId, RandomStream, Tensor};
use crate::error::Result;
use crate::hyperlayers::{Activation, Layer, LayerSpec};
use crate::linear_oracle::{build_theorem_construction, verify_construction};

const THETA_MIN: f64 = 1e-6;

fn bind_layer(layer: &Layer, prefix: &str, binds: &mut Bindings) {
    layer.bind(prefix, binds);
    for (_, t) in binds.iter_mut() {
        t.set_requires_grad(true);
    }
}

fn with_beta(binds: &mut Bindings, beta: f64) {
    binds.insert("beta".into(), Tensor::scalar(beta));
}

type Case = (&'static str, Box<dyn Fn(&mut Graph) -> NodeId>, Bindings);

fn dense_case(rng: &mut RandomStream, hyper: bool) -> Result<Case> {
    let layer = Layer::init(
        LayerSpec::Dense { input: 5, output: 4 },
        Activation::Sigmoid,
        hyper,
        0.3,
        rng,
    );
    let mut binds = Bindings::new();
    bind_layer(&layer, "l", &mut binds);
    binds.insert("x".into(), rng.normal_tensor(vec![3, 5], 1.0));
    with_beta(&mut binds, rng.uniform_in(0.02, 2.0));
    let name = if hyper { "beta-adjusted dense" } else { "dense" };
    let build = move |g: &mut Graph| {
        let x = g.input("x");
        let beta = g.input("beta");
        let lb = g.log(beta);
        let out = layer
            .build_graph(g, "l", x, Some(lb))
            .expect("dense graph builds");
        let sq = g.square(out);
        g.sum(sq)
    };
    Ok((name, Box::new(build), binds))
}

fn conv_case(rng: &mut RandomStream) -> Result<Case> {
    let layer = Layer::init(
        LayerSpec::Conv { in_channels: 2, out_channels: 3, kernel: 3 },
        Activation::Sigmoid,
        true,
        -0.2,
        rng,
    );
    let mut binds = Bindings::new();
    bind_layer(&layer, "c", &mut binds);
    binds.insert("x".into(), rng.normal_tensor(vec![2, 2, 5, 5], 1.0));
    with_beta(&mut binds, rng.uniform_in(0.02, 2.0));
    let build = move |g: &mut Graph| {
        let x = g.input("x");
        let beta = g.input("beta");
        let lb = g.log(beta);
        let out = layer
            .build_graph(g, "c", x, Some(lb))
            .expect("conv graph builds");
        let sq = g.square(out);
        g.sum(sq)
    };
    Ok(("beta-adjusted conv", Box::new(build), binds))
}

fn encoder_heads_case(rng: &mut RandomStream) -> Result<Case> {
    let mu_head = Layer::init(
        LayerSpec::Dense { input: 4, output: 3 },
        Activation::Identity,
        true,
        0.0,
        rng,
    );
    let th_head = Layer::init(
        LayerSpec::Dense { input: 4, output: 3 },
        Activation::Identity,
        true,
        0.0,
        rng,
    );
    let mut binds = Bindings::new();
    bind_layer(&mu_head, "mu", &mut binds);
    bind_layer(&th_head, "th", &mut binds);
    binds.insert("h".into(), rng.normal_tensor(vec![2, 4], 1.0));
    binds.insert("eta".into(), rng.normal_tensor(vec![2, 3], 1.0));
    with_beta(&mut binds, rng.uniform_in(0.02, 2.0));
    let build = move |g: &mut Graph| {
        let h = g.input("h");
        let beta = g.input("beta");
        let lb = g.log(beta);
        let mu = mu_head.build_graph(g, "mu", h, Some(lb)).expect("mu head builds");
        let raw = th_head.build_graph(g, "th", h, Some(lb)).expect("theta head builds");
        let sp = g.softplus(raw);
        let floor = g.scalar(THETA_MIN);
        let theta = g.add(sp, floor);
        let eta = g.input("eta");
        let noise = g.mul(theta, eta);
        let z = g.add(mu, noise);
        let sq = g.square(z);
        g.sum(sq)
    };
    Ok(("encoder heads with reparameterized draw", Box::new(build), binds))
}

fn cross_entropy_case(rng: &mut RandomStream) -> Result<Case> {
    let layer = Layer::init(
        LayerSpec::Dense { input: 4, output: 5 },
        Activation::Identity,
        false,
        0.0,
        rng,
    );
    let mut binds = Bindings::new();
    bind_layer(&layer, "l", &mut binds);
    binds.insert("x".into(), rng.normal_tensor(vec![3, 4], 1.0));
    let labels: Vec<f64> = (0..3).map(|_| rng.index(5) as f64).collect();
    binds.insert("y".into(), Tensor::vector(labels));
    let build = move |g: &mut Graph| {
        let x = g.input("x");
        let out = layer.build_graph(g, "l", x, None).expect("dense graph builds");
        let y = g.input("y");
        g.softmax_xent(out, y)
    };
    Ok(("cross-entropy distortion", Box::new(build), binds))
}

fn squared_error_case(rng: &mut RandomStream) -> Result<Case> {
    let layer = Layer::init(
        LayerSpec::Dense { input: 4, output: 2 },
        Activation::Identity,
        false,
        0.0,
        rng,
    );
    let mut binds = Bindings::new();
    bind_layer(&layer, "l", &mut binds);
    binds.insert("x".into(), rng.normal_tensor(vec![3, 4], 1.0));
    binds.insert("y".into(), rng.normal_tensor(vec![3, 2], 1.0));
    let build = move |g: &mut Graph| {
        let x = g.input("x");
        let out = layer.build_graph(g, "l", x, None).expect("dense graph builds");
        let y = g.input("y");
        g.square_error(out, y)
    };
    Ok(("squared-error distortion", Box::new(build), binds))
}

fn kl_case(rng: &mut RandomStream) -> Result<Case> {
    let sigma2 = rng.uniform_in(0.005, 0.5);
    let (m, d) = (3, 4);
    let mut binds = Bindings::new();
    binds.insert("mu".into(), rng.normal_tensor(vec![m, d], 1.0).with_requires_grad(true));
    binds.insert(
        "theta_raw".into(),
        rng.normal_tensor(vec![m, d], 1.0).with_requires_grad(true),
    );
    let build = move |g: &mut Graph| {
        let mu = g.input("mu");
        let raw = g.input("theta_raw");
        let sp = g.softplus(raw);
        let floor = g.scalar(THETA_MIN);
        let theta = g.add(sp, floor);
        let mu_sq = g.square(mu);
        let mu_term = g.sum(mu_sq);
        let th_sq = g.square(theta);
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
    };
    Ok(("closed-form rate term", Box::new(build), binds))
}

/// Runs the finite-difference gradient suite: every layer kind, both
/// distortion kinds, the encoder heads and the rate term, at `points` random
/// configurations each. Returns the worst symmetric relative error.
pub fn gradcheck_suite(seed: u64, points: usize) -> Result<f64> {
    let mut rng = RandomStream::new(seed);
    let mut worst = 0.0_f64;
    for _ in 0..points {
        let cases: Vec<Case> = vec![
            dense_case(&mut rng, false)?,
            dense_case(&mut rng, true)?,
            conv_case(&mut rng)?,
            encoder_heads_case(&mut rng)?,
            cross_entropy_case(&mut rng)?,
            squared_error_case(&mut rng)?,
            kl_case(&mut rng)?,
        ];
        for (name, build, binds) in cases {
            let err = grad_check(|g| build(g), &binds, 1e-5)?;
            if err > worst {
                worst = err;
            }
            let _ = name;
        }
    }
    Ok(worst)
}

/// Draws a random full-rank instance and checks the representability
/// identity over the grid. Returns the worst relative Frobenius deviation.
pub fn theorem_check(d: usize, n: usize, seed: u64, beta_grid: &[f64]) -> Result<f64> {
    let (inst, _) = gen_linear_instance(n, d, 64 * n, 0.1, seed)?;
    let constr = build_theorem_construction(&inst)?;
    verify_construction(&constr, &inst, beta_grid)
}

/// Log-spaced grid of `points` values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..points)
        .map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp())
        .collect()
}
