//! Synthetic dataset generators, IDX-format ingestion for MNIST-style files,
//! and CSV persistence of run results.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{RandomStream, Tensor};
use crate::error::{Error, Result};
use crate::linear_oracle::{spd_min_eig, LinearInstance};
use crate::objective::{Batch, BatchTargets, DistortionKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// A supervised dataset with one flattened sample per row.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[N, n]`
    pub inputs: Tensor,
    pub targets: DatasetTargets,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub enum DatasetTargets {
    Labels { labels: Vec<usize>, classes: usize },
    Values(Tensor),
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: DatasetTargets, split: Split) -> Result<Dataset> {
        if !inputs.is_finite() {
            return Err(Error::InvalidArgument("dataset inputs contain non-finite values".into()));
        }
        let n = inputs.shape()[0];
        match &targets {
            DatasetTargets::Labels { labels, classes } => {
                if labels.len() != n {
                    return Err(Error::shape(
                        "Dataset::new",
                        format!("{n} inputs but {} labels", labels.len()),
                    ));
                }
                if let Some(bad) = labels.iter().find(|&&l| l >= *classes) {
                    return Err(Error::InvalidArgument(format!(
                        "label {bad} out of range for {classes} classes"
                    )));
                }
            }
            DatasetTargets::Values(values) => {
                if values.shape()[0] != n {
                    return Err(Error::shape(
                        "Dataset::new",
                        format!("{n} inputs but {} target rows", values.shape()[0]),
                    ));
                }
                if !values.is_finite() {
                    return Err(Error::InvalidArgument(
                        "dataset targets contain non-finite values".into(),
                    ));
                }
            }
        }
        Ok(Dataset { inputs, targets, split })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn kind(&self) -> DistortionKind {
        match self.targets {
            DatasetTargets::Labels { .. } => DistortionKind::CrossEntropy,
            DatasetTargets::Values(_) => DistortionKind::SquaredError,
        }
    }

    /// Width of the model output this dataset calls for.
    pub fn output_dim(&self) -> usize {
        match &self.targets {
            DatasetTargets::Labels { classes, .. } => *classes,
            DatasetTargets::Values(values) => values.shape()[1],
        }
    }

    /// Gathers the given rows into a minibatch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let width = self.input_dim();
        let mut x = vec![0.0; indices.len() * width];
        for (r, &idx) in indices.iter().enumerate() {
            x[r * width..(r + 1) * width].copy_from_slice(self.inputs.row(idx));
        }
        let x = Tensor::matrix(indices.len(), width, x).expect("shape matches data");
        let targets = match &self.targets {
            DatasetTargets::Labels { labels, .. } => {
                BatchTargets::Labels(indices.iter().map(|&i| labels[i]).collect())
            }
            DatasetTargets::Values(values) => {
                let w = values.shape()[1];
                let mut t = vec![0.0; indices.len() * w];
                for (r, &idx) in indices.iter().enumerate() {
                    t[r * w..(r + 1) * w].copy_from_slice(values.row(idx));
                }
                BatchTargets::Values(Tensor::matrix(indices.len(), w, t).expect("shape matches data"))
            }
        };
        Batch { x, targets }
    }

    /// The whole dataset as one batch.
    pub fn full_batch(&self) -> Batch {
        let indices: Vec<usize> = (0..self.len()).collect();
        self.batch(&indices)
    }
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

/// Generates a full-rank linear-model instance and its dataset view.
///
/// Inputs are i.i.d. standard normal; targets follow a hidden linear map plus
/// `noise_std` Gaussian noise; `b` is drawn at unit norm. The instance's
/// channel variance defaults to `0.01` (a 20 dB signal-to-noise ratio at unit
/// signal power); adjust the field for other settings. Regenerates on rank
/// deficiency, failing after ten attempts.
pub fn gen_linear_instance(
    n: usize,
    d: usize,
    samples: usize,
    noise_std: f64,
    seed: u64,
) -> Result<(LinearInstance, Dataset)> {
    if n < 1 || d < 1 {
        return Err(Error::InvalidArgument("dimensions must be at least 1".into()));
    }
    if samples < 64 * n {
        return Err(Error::InvalidArgument(format!(
            "need at least 64 * n = {} samples, got {samples}",
            64 * n
        )));
    }
    let mut rng = RandomStream::new(seed);
    let mut x = None;
    for _ in 0..10 {
        let candidate = rng.normal_tensor(vec![n, samples], 1.0);
        let xt = candidate.transposed()?;
        let gram = candidate.matmul(&xt)?;
        // Smallest singular value of X is sqrt of the Gram's smallest eigenvalue.
        if let Some(min_eig) = spd_min_eig(&gram) {
            if min_eig.sqrt() > 1e-8 {
                x = Some(candidate);
                break;
            }
        }
    }
    let x = x.ok_or_else(|| {
        Error::Singular("failed to draw a full-rank input matrix in 10 attempts".into())
    })?;

    let hidden_w = rng.normal_vec(n, 1.0);
    let mut y = vec![0.0; samples];
    for (s, slot) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..n {
            acc += hidden_w[j] * x.data()[j * samples + s];
        }
        *slot = acc + noise_std * rng.standard_normal();
    }
    let b_raw = rng.normal_vec(d, 1.0);
    let b_norm = b_raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let b = Tensor::vector(b_raw.iter().map(|v| v / b_norm).collect());

    let y_row = Tensor::matrix(1, samples, y.clone())?;
    let inst = LinearInstance::new(x.clone(), y_row, b, 0.01)?;

    let inputs = x.transposed()?;
    let targets = DatasetTargets::Values(Tensor::matrix(samples, 1, y)?);
    let dataset = Dataset::new(inputs, targets, Split::Train)?;
    Ok((inst, dataset))
}

fn place_centers(
    k: usize,
    dim: usize,
    spread: f64,
    rng: &mut RandomStream,
) -> Result<Vec<Vec<f64>>> {
    let min_dist = 4.0 * spread;
    let extent = min_dist * (k as f64).max(2.0);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut placed = false;
        for _ in 0..200 {
            let cand: Vec<f64> = (0..dim).map(|_| rng.uniform_in(-extent, extent)).collect();
            let ok = centers.iter().all(|c| {
                let d2: f64 = c.iter().zip(&cand).map(|(&a, &b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= min_dist
            });
            if ok {
                centers.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InvalidArgument(format!(
                "failed to place {k} cluster centers at pairwise distance {min_dist}"
            )));
        }
    }
    Ok(centers)
}

fn blobs_from_centers(
    centers: &[Vec<f64>],
    per_class: usize,
    spread: f64,
    split: Split,
    rng: &mut RandomStream,
) -> Result<Dataset> {
    let k = centers.len();
    let dim = centers[0].len();
    let total = k * per_class;
    let mut order: Vec<usize> = (0..total).collect();
    rng.shuffle(&mut order);

    let mut inputs = vec![0.0; total * dim];
    let mut labels = vec![0usize; total];
    for (slot, &flat) in order.iter().enumerate() {
        let class = flat / per_class;
        for j in 0..dim {
            inputs[slot * dim + j] = centers[class][j] + spread * rng.standard_normal();
        }
        labels[slot] = class;
    }
    Dataset::new(
        Tensor::matrix(total, dim, inputs)?,
        DatasetTargets::Labels { labels, classes: k },
        split,
    )
}

/// Balanced Gaussian clusters with centers at pairwise distance at least
/// `4 * spread`. Deterministic by seed.
pub fn gen_blobs(k: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if k < 2 || per_class < 1 || !(spread > 0.0) {
        return Err(Error::InvalidArgument(
            "blobs need k >= 2, per_class >= 1, spread > 0".into(),
        ));
    }
    let mut rng = RandomStream::new(seed);
    let centers = place_centers(k, dim, spread, &mut rng)?;
    blobs_from_centers(&centers, per_class, spread, Split::Train, &mut rng)
}

/// Train and test sets drawn around the same centers; the point draws are
/// disjoint by construction.
pub fn gen_blobs_split(
    k: usize,
    dim: usize,
    per_class_train: usize,
    per_class_test: usize,
    spread: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if k < 2 || per_class_train < 1 || per_class_test < 1 || !(spread > 0.0) {
        return Err(Error::InvalidArgument(
            "blobs need k >= 2, per_class >= 1, spread > 0".into(),
        ));
    }
    let mut rng = RandomStream::new(seed);
    let centers = place_centers(k, dim, spread, &mut rng)?;
    let train = blobs_from_centers(&centers, per_class_train, spread, Split::Train, &mut rng)?;
    let test = blobs_from_centers(&centers, per_class_test, spread, Split::Test, &mut rng)?;
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// IDX ingestion
// ---------------------------------------------------------------------------

const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

/// Parses an IDX file of unsigned bytes.
///
/// Image files (magic `0x00000803`, dims `N x rows x cols`) load as an
/// `[N, rows * cols]` tensor scaled to `[0, 1]`; label files (magic
/// `0x00000801`) load as an `[N]` tensor of integer-valued floats.
pub fn load_idx(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 {
        return Err(Error::Parse(format!("{}: shorter than an IDX header", path.display())));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let ndim = match magic {
        IDX_MAGIC_IMAGES => 3,
        IDX_MAGIC_LABELS => 1,
        other => {
            // Same layout but a non-u8 element type gets its own diagnostic.
            if bytes[0] == 0 && bytes[1] == 0 && bytes[2] != 0x08 && (bytes[3] == 1 || bytes[3] == 3)
            {
                return Err(Error::Parse(format!(
                    "{}: unsupported element type 0x{:02x} (only unsigned bytes are supported)",
                    path.display(),
                    bytes[2]
                )));
            }
            return Err(Error::Parse(format!(
                "{}: bad magic 0x{other:08x} (expected 0x00000803 images or 0x00000801 labels)",
                path.display()
            )));
        }
    };
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Parse(format!("{}: truncated dimension header", path.display())));
    }
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let o = 4 + 4 * i;
        dims.push(u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize);
    }
    let payload: usize = dims.iter().product();
    if bytes.len() != header + payload {
        return Err(Error::Parse(format!(
            "{}: payload has {} bytes, dimensions {:?} require {payload}",
            path.display(),
            bytes.len() - header,
            dims
        )));
    }
    let body = &bytes[header..];
    match magic {
        IDX_MAGIC_LABELS => Ok(Tensor::vector(body.iter().map(|&b| b as f64).collect())),
        _ => {
            let n = dims[0];
            let width = dims[1] * dims[2];
            let data = body.iter().map(|&b| b as f64 / 255.0).collect();
            Tensor::matrix(n, width, data)
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Versioned, textual key -> tensor checkpoint of a full model. Tensors carry
/// explicit shape headers; floats round-trip exactly (shortest-representation
/// JSON encoding).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub task: String,
    pub model: crate::pipeline::Model,
}

pub const CHECKPOINT_FORMAT: &str = "hypervib-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, task: &str, model: &crate::pipeline::Model) -> Result<()> {
    let ckpt = Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        task: task.to_string(),
        model: model.clone(),
    };
    let text = serde_json::to_string_pretty(&ckpt)
        .map_err(|e| Error::Parse(format!("checkpoint serialization failed: {e}")))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::Parse(format!(
            "{}: format '{}' is not '{CHECKPOINT_FORMAT}'",
            path.display(),
            ckpt.format
        )));
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            ckpt.version
        )));
    }
    Ok(ckpt)
}

// ---------------------------------------------------------------------------
// Result persistence
// ---------------------------------------------------------------------------

/// One evaluated run, as written to results CSV files.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRecord {
    pub run_id: String,
    pub method: String,
    pub task: String,
    pub beta: f64,
    pub accuracy: Option<f64>,
    pub mse: Option<f64>,
    pub distortion: f64,
    pub rate: f64,
    pub total: f64,
    pub wall_seconds: f64,
    pub param_count: usize,
    pub seed: u64,
}

pub const RESULT_HEADER: [&str; 12] = [
    "run_id",
    "method",
    "task",
    "beta",
    "accuracy",
    "mse",
    "distortion",
    "rate",
    "total",
    "wall_seconds",
    "param_count",
    "seed",
];

/// Nine significant digits in scientific notation; round-trips through
/// `f64::from_str`.
fn fmt_float(v: f64) -> String {
    format!("{v:.8e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

/// Writes records in the fixed column order, one row per record.
pub fn write_results(records: &[ResultRecord], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer
        .write_record(RESULT_HEADER)
        .map_err(|e| Error::Parse(e.to_string()))?;
    for r in records {
        writer
            .write_record([
                r.run_id.as_str(),
                r.method.as_str(),
                r.task.as_str(),
                &fmt_float(r.beta),
                &fmt_opt(r.accuracy),
                &fmt_opt(r.mse),
                &fmt_float(r.distortion),
                &fmt_float(r.rate),
                &fmt_float(r.total),
                &fmt_float(r.wall_seconds),
                &r.param_count.to_string(),
                &r.seed.to_string(),
            ])
            .map_err(|e| Error::Parse(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(raw: &str, column: &str, line: usize) -> Result<T> {
    raw.parse().map_err(|_| {
        Error::Parse(format!("row {line}: cannot parse '{raw}' in column '{column}'"))
    })
}

fn parse_opt(raw: &str, column: &str, line: usize) -> Result<Option<f64>> {
    if raw.is_empty() {
        Ok(None)
    } else {
        parse_field(raw, column, line).map(Some)
    }
}

/// Reads a results CSV, validating the exact header order.
pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    for (i, expected) in RESULT_HEADER.iter().enumerate() {
        let got = headers.get(i).unwrap_or("");
        if got != *expected {
            return Err(Error::Parse(format!(
                "{}: header column {i} is '{got}', expected '{expected}'",
                path.display()
            )));
        }
    }
    if headers.len() != RESULT_HEADER.len() {
        return Err(Error::Parse(format!(
            "{}: {} header columns, expected {}",
            path.display(),
            headers.len(),
            RESULT_HEADER.len()
        )));
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Parse(e.to_string()))?;
        let line = i + 2;
        let field = |j: usize| row.get(j).unwrap_or("");
        out.push(ResultRecord {
            run_id: field(0).to_string(),
            method: field(1).to_string(),
            task: field(2).to_string(),
            beta: parse_field(field(3), "beta", line)?,
            accuracy: parse_opt(field(4), "accuracy", line)?,
            mse: parse_opt(field(5), "mse", line)?,
            distortion: parse_field(field(6), "distortion", line)?,
            rate: parse_field(field(7), "rate", line)?,
            total: parse_field(field(8), "total", line)?,
            wall_seconds: parse_field(field(9), "wall_seconds", line)?,
            param_count: parse_field(field(10), "param_count", line)?,
            seed: parse_field(field(11), "seed", line)?,
        });
    }
    Ok(out)
}
