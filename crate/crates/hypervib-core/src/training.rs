//! Training loops for the hypernetwork objective and the fixed-beta
//! baseline, the per-beta grid search the hypernetwork amortizes away, the
//! post-training beta sweep, and evaluation metrics.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data_io::{Dataset, DatasetTargets};
use crate::diffcore::{Gradients, RandomStream, Tensor};
use crate::error::{Error, Result};
use crate::objective::{
    kl_to_standard_prior, sample_beta, BetaSampling, DistortionKind, VibLossGraph,
};
use crate::pipeline::{Channel, Model, ModelSpec};

/// Knobs of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Optimizer step budget.
    pub steps: usize,
    /// Minibatch size M.
    pub batch_size: usize,
    /// Beta draws (each with a fresh minibatch) averaged per step.
    pub t_samples: usize,
    /// Channel noise draws averaged inside the distortion term.
    pub noise_draws: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub beta_sampling: BetaSampling,
    /// Channel noise variance.
    pub sigma2: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Per-node finite checks during training (disable only for timed runs).
    pub check_finite: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 64,
            t_samples: 1,
            noise_draws: 1,
            beta_min: 1e-5,
            beta_max: 1.0,
            beta_sampling: BetaSampling::Uniform,
            sigma2: 0.01,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            check_finite: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("step budget must be >= 1".into()));
        }
        if self.batch_size == 0 || self.t_samples == 0 || self.noise_draws == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, t_samples and noise_draws must be >= 1".into(),
            ));
        }
        if !(self.beta_min > 0.0) || self.beta_min >= self.beta_max {
            return Err(Error::InvalidArgument(format!(
                "beta range must satisfy 0 < min < max, got [{}, {}]",
                self.beta_min, self.beta_max
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be > 0".into()));
        }
        if !(self.sigma2 >= 0.0) {
            return Err(Error::InvalidArgument("sigma2 must be >= 0".into()));
        }
        Ok(())
    }

    pub fn channel(&self) -> Result<Channel> {
        Channel::new(self.sigma2)
    }
}

/// First-order optimizer with bias-corrected moment estimates.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    steps: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: &TrainConfig) -> Adam {
        Adam {
            lr: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            epsilon: config.adam_epsilon,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Steps taken so far; exactly one per optimizer invocation.
    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every parameter that has a gradient entry.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>, grads: &BTreeMap<String, Vec<f64>>) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, tensor) in params {
            let Some(grad) = grads.get(&name) else { continue };
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.second.entry(name).or_insert_with(|| vec![0.0; grad.len()]);
            let data = tensor.data_mut();
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// How beta is chosen during one training run.
#[derive(Clone, Copy, Debug)]
pub enum TrainMode {
    /// Draw beta fresh per sample from the configured range.
    Hyper,
    /// Classical fixed-beta training.
    Fixed(f64),
}

/// One emitted training log record.
#[derive(Clone, Copy, Debug)]
pub struct StepLog {
    pub step: usize,
    pub beta: f64,
    pub distortion: f64,
    pub rate: f64,
    pub total: f64,
}

/// A finished training run.
pub struct Trained {
    pub model: Model,
    pub optimizer_steps: u64,
    /// Wall-clock seconds of the optimization loop only (data generation and
    /// model construction excluded), from a monotonic clock.
    pub wall_seconds: f64,
    /// Mean total loss per optimizer step.
    pub loss_history: Vec<f64>,
}

/// Trains a prepared model in place. The caller controls initialization (and
/// can freeze or pin parts of the model beforehand); all randomness flows
/// from `rng`.
pub fn train_model(
    dataset: &Dataset,
    mut model: Model,
    mode: TrainMode,
    config: &TrainConfig,
    rng: &mut RandomStream,
    mut observer: Option<&mut dyn FnMut(StepLog)>,
) -> Result<Trained> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    if let TrainMode::Fixed(beta) = mode {
        if model.hyper && !(beta > 0.0) {
            return Err(Error::Domain(format!(
                "beta-conditioned model requires beta > 0, got {beta}"
            )));
        }
    }
    let channel = config.channel()?;
    let kind = dataset.kind();
    let n = dataset.len();
    let effective_batch = config.batch_size.min(n);
    let mut loss =
        VibLossGraph::build(&model, effective_batch, config.noise_draws, kind, config.sigma2)?;
    loss.set_check_finite(config.check_finite);
    let mut adam = Adam::new(config);
    let mut history = Vec::with_capacity(config.steps);
    let inv_t = 1.0 / config.t_samples as f64;

    let clock = Instant::now();
    for step in 0..config.steps {
        let mut grad_acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut step_total = 0.0;
        for _ in 0..config.t_samples {
            let beta = match mode {
                TrainMode::Hyper => {
                    sample_beta((config.beta_min, config.beta_max), config.beta_sampling, rng)
                }
                TrainMode::Fixed(beta) => beta,
            };
            // Minibatches are drawn i.i.d. with replacement; a batch size at
            // least the dataset size means a deterministic full-batch pass.
            let indices: Vec<usize> = if effective_batch == n {
                (0..n).collect()
            } else {
                (0..effective_batch).map(|_| rng.index(n)).collect()
            };
            let batch = dataset.batch(&indices);
            let binds = loss.bind(&model, &batch, beta, &channel, rng)?;
            let rd = loss.evaluate(&binds).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { step },
                other => other,
            })?;
            if !rd.total.is_finite() {
                return Err(Error::Diverged { step });
            }
            let grads = loss.backward()?;
            accumulate_grads(&mut grad_acc, &grads, inv_t);
            step_total += rd.total * inv_t;
            if let Some(obs) = observer.as_deref_mut() {
                obs(StepLog {
                    step,
                    beta,
                    distortion: rd.distortion,
                    rate: rd.rate,
                    total: rd.total,
                });
            }
        }
        adam.step(model.named_params_mut(), &grad_acc);
        history.push(step_total);
    }
    let wall_seconds = clock.elapsed().as_secs_f64();

    Ok(Trained {
        model,
        optimizer_steps: adam.steps_taken(),
        wall_seconds,
        loss_history: history,
    })
}

fn accumulate_grads(acc: &mut BTreeMap<String, Vec<f64>>, grads: &Gradients, scale: f64) {
    for (name, grad) in grads {
        let slot = acc.entry(name.clone()).or_insert_with(|| vec![0.0; grad.numel()]);
        for (s, g) in slot.iter_mut().zip(grad.data()) {
            *s += scale * g;
        }
    }
}

/// Initializes and trains a beta-conditioned model over the configured range.
pub fn train_hyper(
    dataset: &Dataset,
    spec: &ModelSpec,
    config: &TrainConfig,
    rng: &mut RandomStream,
) -> Result<Trained> {
    train_hyper_with(dataset, spec, config, rng, None)
}

pub fn train_hyper_with(
    dataset: &Dataset,
    spec: &ModelSpec,
    config: &TrainConfig,
    rng: &mut RandomStream,
    observer: Option<&mut dyn FnMut(StepLog)>,
) -> Result<Trained> {
    let mut init_rng = rng.split();
    let model = Model::init(spec, true, &mut init_rng)?;
    train_model(dataset, model, TrainMode::Hyper, config, rng, observer)
}

/// Initializes and trains an unconditioned model at one fixed beta.
pub fn train_vib(
    dataset: &Dataset,
    spec: &ModelSpec,
    beta: f64,
    config: &TrainConfig,
    rng: &mut RandomStream,
) -> Result<Trained> {
    train_vib_with(dataset, spec, beta, config, rng, None)
}

pub fn train_vib_with(
    dataset: &Dataset,
    spec: &ModelSpec,
    beta: f64,
    config: &TrainConfig,
    rng: &mut RandomStream,
    observer: Option<&mut dyn FnMut(StepLog)>,
) -> Result<Trained> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
    }
    let mut init_rng = rng.split();
    let model = Model::init(spec, false, &mut init_rng)?;
    train_model(dataset, model, TrainMode::Fixed(beta), config, rng, observer)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Task metrics of one model at one beta.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub mse: Option<f64>,
    pub distortion: f64,
    pub rate: f64,
    pub total: f64,
    pub wall_seconds: f64,
    pub param_count: usize,
}

/// Evaluates a model over a dataset at one beta: top-1 accuracy for
/// classification, mean squared error for regression, plus the mean
/// distortion, rate and total loss. One channel draw per sample.
pub fn evaluate(
    model: &Model,
    beta: f64,
    dataset: &Dataset,
    channel: &Channel,
    rng: &mut RandomStream,
) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let batch = dataset.full_batch();
    let (code, z) = model.encode(&batch.x, beta, rng)?;
    let z_hat = channel.transmit(&z, rng);
    let y_hat = model.decode(&z_hat, beta)?;
    let rate = kl_to_standard_prior(&code, channel.sigma2)?;
    let n = dataset.len();

    let (accuracy, mse, distortion) = match &dataset.targets {
        DatasetTargets::Labels { labels, classes } => {
            let k = *classes;
            let mut correct = 0usize;
            let mut nll = 0.0;
            for r in 0..n {
                let row = y_hat.row(r);
                let mut arg = 0;
                for c in 1..k {
                    if row[c] > row[arg] {
                        arg = c;
                    }
                }
                if arg == labels[r] {
                    correct += 1;
                }
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
                nll += lse - row[labels[r]];
            }
            (Some(correct as f64 / n as f64), None, nll / n as f64)
        }
        DatasetTargets::Values(values) => {
            let width = values.shape()[1];
            let mut ss = 0.0;
            for r in 0..n {
                for c in 0..width {
                    let diff = y_hat.at2(r, c) - values.at2(r, c);
                    ss += diff * diff;
                }
            }
            // Distortion sums squared error over output components per
            // sample; the reported mse additionally averages over components.
            (None, Some(ss / (n * width) as f64), ss / n as f64)
        }
    };

    Ok(Metrics {
        accuracy,
        mse,
        distortion,
        rate,
        total: distortion + beta * rate,
        wall_seconds: 0.0,
        param_count: model.param_count(),
    })
}

/// Evaluation curve over a beta grid.
#[derive(Clone, Debug)]
pub struct SweepCurve {
    pub points: Vec<(f64, Metrics)>,
}

/// Evaluates a trained model at every grid beta by materializing the
/// beta-conditioned parameters directly; no retraining, no state mutation.
/// Each grid point consumes its own split of `rng`.
pub fn sweep(
    model: &Model,
    beta_grid: &[f64],
    dataset: &Dataset,
    channel: &Channel,
    rng: &mut RandomStream,
) -> Result<SweepCurve> {
    let mut points = Vec::with_capacity(beta_grid.len());
    for &beta in beta_grid {
        let mut point_rng = rng.split();
        let metrics = evaluate(model, beta, dataset, channel, &mut point_rng)?;
        points.push((beta, metrics));
    }
    Ok(SweepCurve { points })
}

/// The default evaluation grid: half-decade steps from `1e-5` to `1`.
pub fn default_beta_grid() -> Vec<f64> {
    (0..=10).map(|i| 10f64.powf(-5.0 + 0.5 * i as f64)).collect()
}

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

/// One grid-search entry.
pub struct GridRun {
    pub beta: f64,
    pub trained: Trained,
    pub metrics: Metrics,
}

pub struct GridSearchOutcome {
    pub best_beta: f64,
    pub runs: Vec<GridRun>,
    /// Wall seconds of the whole search (all trainings plus evaluations).
    pub total_wall_seconds: f64,
}

/// Trains one fixed-beta model per grid point and returns the best by task
/// metric (highest accuracy or lowest mse), ties broken toward smaller beta.
///
/// Each grid point gets its own pre-split random stream, so results are
/// identical for any `workers` count; `workers > 1` trains points on that
/// many threads.
pub fn grid_search(
    train_data: &Dataset,
    eval_data: &Dataset,
    beta_grid: &[f64],
    spec: &ModelSpec,
    config: &TrainConfig,
    rng: &mut RandomStream,
    workers: usize,
) -> Result<GridSearchOutcome> {
    if beta_grid.is_empty() {
        return Err(Error::InvalidArgument("beta grid must be nonempty".into()));
    }
    let channel = config.channel()?;
    let clock = Instant::now();
    let streams = rng.split_n(beta_grid.len());

    let run_one = |beta: f64, mut stream: RandomStream| -> Result<GridRun> {
        let trained = train_vib(train_data, spec, beta, config, &mut stream)?;
        let mut eval_rng = stream.split();
        let mut metrics = evaluate(&trained.model, beta, eval_data, &channel, &mut eval_rng)?;
        metrics.wall_seconds = trained.wall_seconds;
        Ok(GridRun { beta, trained, metrics })
    };

    let workers = workers.max(1).min(beta_grid.len());
    let mut runs: Vec<Option<GridRun>> = Vec::new();
    for _ in 0..beta_grid.len() {
        runs.push(None);
    }
    if workers == 1 {
        for (i, (&beta, stream)) in beta_grid.iter().zip(streams).enumerate() {
            runs[i] = Some(run_one(beta, stream)?);
        }
    } else {
        let jobs: Vec<(usize, f64, RandomStream)> = beta_grid
            .iter()
            .zip(streams)
            .enumerate()
            .map(|(i, (&beta, stream))| (i, beta, stream))
            .collect();
        let mut partitions: Vec<Vec<(usize, f64, RandomStream)>> =
            (0..workers).map(|_| Vec::new()).collect();
        for (j, job) in jobs.into_iter().enumerate() {
            partitions[j % workers].push(job);
        }
        let results = std::thread::scope(|scope| {
            let handles: Vec<_> = partitions
                .into_iter()
                .map(|part| {
                    scope.spawn(move || {
                        part.into_iter()
                            .map(|(i, beta, stream)| (i, run_one(beta, stream)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect::<Vec<_>>()
        });
        for (i, run) in results {
            runs[i] = Some(run?);
        }
    }
    let runs: Vec<GridRun> = runs.into_iter().map(|r| r.expect("all grid points ran")).collect();

    let classification = matches!(train_data.kind(), DistortionKind::CrossEntropy);
    let mut order: Vec<usize> = (0..runs.len()).collect();
    order.sort_by(|&a, &b| runs[a].beta.partial_cmp(&runs[b].beta).expect("finite betas"));
    let mut best = order[0];
    for &i in &order[1..] {
        let better = if classification {
            runs[i].metrics.accuracy > runs[best].metrics.accuracy
        } else {
            runs[i].metrics.mse < runs[best].metrics.mse
        };
        if better {
            best = i;
        }
    }

    Ok(GridSearchOutcome {
        best_beta: runs[best].beta,
        runs,
        total_wall_seconds: clock.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Small statistics helpers
// ---------------------------------------------------------------------------

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Trailing moving average with the given window.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len() - window + 1);
    let mut acc: f64 = values[..window].iter().sum();
    out.push(acc / window as f64);
    for i in window..values.len() {
        acc += values[i] - values[i - window];
        out.push(acc / window as f64);
    }
    out
}
