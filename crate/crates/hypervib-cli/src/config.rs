use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hypervib_core::data_io::{
    gen_blobs_split, gen_linear_instance, load_idx, Dataset, DatasetTargets, Split,
};
use hypervib_core::hyperlayers::{Activation, LayerSpec};
use hypervib_core::objective::BetaSampling;
use hypervib_core::pipeline::{snr_to_noise_variance, ModelSpec};
use hypervib_core::training::TrainConfig;
use hypervib_core::{Error, LinearInstance, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Blobs,
    Linear,
    Mnist,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Blobs => "blobs",
            TaskKind::Linear => "linear",
            TaskKind::Mnist => "mnist",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobsConfig {
    pub classes: usize,
    pub dim: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub spread: f64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        BlobsConfig { classes: 4, dim: 16, per_class_train: 128, per_class_test: 64, spread: 0.25 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearTaskConfig {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub samples: usize,
    pub noise_std: f64,
}

impl Default for LinearTaskConfig {
    fn default() -> Self {
        LinearTaskConfig { input_dim: 3, feature_dim: 4, samples: 192, noise_std: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MnistConfig {
    /// Directory holding train-images-idx3-ubyte, train-labels-idx1-ubyte,
    /// t10k-images-idx3-ubyte and t10k-labels-idx1-ubyte.
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Hidden widths of the device-side dense stack.
    pub encoder_hidden: Vec<usize>,
    /// Transmitted feature dimension.
    pub feature_dim: usize,
    /// Hidden widths of the network-side dense stack.
    pub decoder_hidden: Vec<usize>,
    pub beta_adjust_heads: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            encoder_hidden: vec![32],
            feature_dim: 8,
            decoder_hidden: vec![32],
            beta_adjust_heads: true,
        }
    }
}

/// Full run configuration: JSON file fields mirror this struct exactly, and
/// unknown keys are rejected. Command-line flags override file values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskKind,
    pub steps: usize,
    pub batch_size: usize,
    pub t_samples: usize,
    pub noise_draws: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Draw ln(beta) uniformly instead of beta itself during training.
    pub log_uniform_beta: bool,
    pub snr_db: f64,
    pub learning_rate: f64,
    pub blobs: BlobsConfig,
    pub linear: LinearTaskConfig,
    pub mnist: MnistConfig,
    pub arch: ArchConfig,
    pub workers: usize,
    /// Emit a training log record every this many steps (0 silences them).
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            task: TaskKind::Blobs,
            steps: 600,
            batch_size: 64,
            t_samples: 1,
            noise_draws: 1,
            beta_min: 1e-5,
            beta_max: 1.0,
            log_uniform_beta: false,
            snr_db: 20.0,
            learning_rate: 1e-2,
            blobs: BlobsConfig::default(),
            linear: LinearTaskConfig::default(),
            mnist: MnistConfig::default(),
            arch: ArchConfig::default(),
            workers: 1,
            log_every: 100,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidArgument(format!("cannot read config {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.workers == 0 {
            return Err(Error::InvalidArgument("workers must be >= 1".into()));
        }
        Ok(())
    }

    pub fn sigma2(&self) -> f64 {
        snr_to_noise_variance(self.snr_db)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            t_samples: self.t_samples,
            noise_draws: self.noise_draws,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
            beta_sampling: if self.log_uniform_beta {
                BetaSampling::LogUniform
            } else {
                BetaSampling::Uniform
            },
            sigma2: self.sigma2(),
            learning_rate: self.learning_rate,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    /// Train and test datasets, plus the exact instance for the linear task.
    pub fn datasets(&self) -> Result<(Dataset, Dataset, Option<LinearInstance>)> {
        match self.task {
            TaskKind::Blobs => {
                let b = &self.blobs;
                let (train, test) = gen_blobs_split(
                    b.classes,
                    b.dim,
                    b.per_class_train,
                    b.per_class_test,
                    b.spread,
                    self.seed,
                )?;
                Ok((train, test, None))
            }
            TaskKind::Linear => {
                let l = &self.linear;
                let (mut inst, data) =
                    gen_linear_instance(l.input_dim, l.feature_dim, l.samples, l.noise_std, self.seed)?;
                inst.sigma2 = self.sigma2();
                // The exact linear analysis is defined on the training set
                // itself, so evaluation reuses it.
                Ok((data.clone(), data, Some(inst)))
            }
            TaskKind::Mnist => {
                let dir = self.mnist.dir.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("mnist task requires mnist.dir in the config".into())
                })?;
                let train = mnist_split(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte", Split::Train)?;
                let test = mnist_split(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", Split::Test)?;
                Ok((train, test, None))
            }
        }
    }

    /// Model shape for the configured task.
    pub fn model_spec(&self, input_dim: usize, output_dim: usize) -> ModelSpec {
        match self.task {
            TaskKind::Linear => {
                // Two-layer linear device chain with a deterministic encoder;
                // the decoder is a single linear map pinned after init.
                let d = self.arch.feature_dim;
                ModelSpec {
                    input_dim,
                    input_image: None,
                    encoder_hidden: vec![LayerSpec::Dense { input: input_dim, output: d }],
                    feature_dim: d,
                    decoder_hidden: vec![],
                    output_dim,
                    hidden_activation: Activation::Identity,
                    beta_adjust_heads: true,
                    deterministic_encoder: true,
                    theta_min: 1e-6,
                    init_v: 0.0,
                }
            }
            _ => {
                let mut encoder_hidden = Vec::new();
                let mut width = input_dim;
                for &h in &self.arch.encoder_hidden {
                    encoder_hidden.push(LayerSpec::Dense { input: width, output: h });
                    width = h;
                }
                let mut decoder_hidden = Vec::new();
                let mut dwidth = self.arch.feature_dim;
                for &h in &self.arch.decoder_hidden {
                    decoder_hidden.push(LayerSpec::Dense { input: dwidth, output: h });
                    dwidth = h;
                }
                ModelSpec {
                    input_dim,
                    input_image: None,
                    encoder_hidden,
                    feature_dim: self.arch.feature_dim,
                    decoder_hidden,
                    output_dim,
                    hidden_activation: Activation::Sigmoid,
                    beta_adjust_heads: self.arch.beta_adjust_heads,
                    deterministic_encoder: false,
                    theta_min: 1e-6,
                    init_v: 0.0,
                }
            }
        }
    }
}

fn mnist_split(dir: &Path, images: &str, labels: &str, split: Split) -> Result<Dataset> {
    let images = load_idx(&dir.join(images))?;
    let labels_tensor = load_idx(&dir.join(labels))?;
    let labels: Vec<usize> = labels_tensor.data().iter().map(|&v| v as usize).collect();
    Dataset::new(images, DatasetTargets::Labels { labels, classes: 10 }, split)
}

/// Pins the decoder of a linear-task model to the instance's fixed map
/// `y = B^T z_hat` and freezes it.
pub fn pin_linear_decoder(
    model: &mut hypervib_core::Model,
    inst: &LinearInstance,
) -> Result<()> {
    let d = inst.feature_dim();
    let w = Tensor::matrix(1, d, inst.b.data().to_vec())?;
    let b = Tensor::zeros(vec![1]);
    model.set_decoder_weights(w, b)?;
    model.freeze_decoder();
    Ok(())
}
