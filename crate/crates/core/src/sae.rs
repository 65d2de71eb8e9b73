//! Sparse-autoencoder baselines: ReLU with an L1 penalty, per-sample TopK
//! and batch-level BatchTopK, all in an expanded latent space and trained on
//! standardized inputs.
//!
//! Layout follows the usual TopK-SAE design: a pre-encoder bias subtracted
//! before encoding and added back after decoding, tied initialization
//! (`W_enc = W_dec^T`) and decoder columns renormalized to unit length after
//! every update.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, CedarError, Result};
use crate::io::{read_f64s, read_header_u32, read_magic, write_f64s};
use crate::linalg::{gemm, norm2, Matrix};
use crate::model::topk_support;
use crate::optim::Adam;
use crate::train::{column_mean, BatchSampler, StepRecord, TrainConfig, TrainHistory};

pub const SAE_MAGIC: &[u8; 4] = b"CSAE";
pub const SAE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaeVariant {
    Relu,
    TopK,
    BatchTopK,
}

impl SaeVariant {
    fn tag(self) -> u32 {
        match self {
            SaeVariant::Relu => 0,
            SaeVariant::TopK => 1,
            SaeVariant::BatchTopK => 2,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(SaeVariant::Relu),
            1 => Ok(SaeVariant::TopK),
            2 => Ok(SaeVariant::BatchTopK),
            other => Err(CedarError::Format {
                field: "variant",
                detail: format!("unknown SAE variant tag {other}"),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SaeVariant::Relu => "relu",
            SaeVariant::TopK => "topk",
            SaeVariant::BatchTopK => "batchtopk",
        }
    }

    /// Baseline sparsity for the k-based variants.
    pub fn default_k(self) -> usize {
        match self {
            SaeVariant::Relu => 0,
            SaeVariant::TopK => 64,
            SaeVariant::BatchTopK => 32,
        }
    }
}

impl std::str::FromStr for SaeVariant {
    type Err = CedarError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(SaeVariant::Relu),
            "topk" => Ok(SaeVariant::TopK),
            "batchtopk" => Ok(SaeVariant::BatchTopK),
            other => Err(CedarError::Argument(format!(
                "unknown SAE variant {other:?}"
            ))),
        }
    }
}

pub const DEFAULT_EXPANSION: usize = 8;
pub const DEFAULT_RELU_LAMBDA: f64 = 0.01;
pub const DEFAULT_SAE_LEARNING_RATE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeConfig {
    pub input_dim: usize,
    pub expansion: usize,
    pub variant: SaeVariant,
    /// Active latents per sample (topk) or average per sample (batchtopk).
    pub k: usize,
    /// L1 penalty weight (relu).
    pub lambda: f64,
    /// Optimizer and schedule; `tau` is unused here.
    pub train: TrainConfig,
}

impl SaeConfig {
    pub fn new(input_dim: usize, variant: SaeVariant) -> Self {
        let train = TrainConfig {
            learning_rate: DEFAULT_SAE_LEARNING_RATE,
            ..Default::default()
        };
        Self {
            input_dim,
            expansion: DEFAULT_EXPANSION,
            variant,
            k: variant.default_k(),
            lambda: if variant == SaeVariant::Relu {
                DEFAULT_RELU_LAMBDA
            } else {
                0.0
            },
            train,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.input_dim * self.expansion
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.expansion < 1 {
            return Err(CedarError::Argument(
                "input_dim and expansion must be >= 1".into(),
            ));
        }
        match self.variant {
            SaeVariant::Relu if !(self.lambda >= 0.0 && self.lambda.is_finite()) => {
                return Err(CedarError::Argument(format!(
                    "invalid lambda {}",
                    self.lambda
                )));
            }
            SaeVariant::TopK | SaeVariant::BatchTopK if self.k < 1 => {
                return Err(CedarError::Argument(
                    "k must be >= 1 for top-k variants".into(),
                ));
            }
            _ => {}
        }
        self.train.validate()
    }
}

/// Affine map `z -> s (z - mu)` with `s` chosen so the mean row norm of the
/// training data becomes `sqrt(D)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mu: Vec<f64>,
    pub scale: f64,
}

impl Standardizer {
    pub fn fit(z: &Matrix) -> Result<Self> {
        if z.rows() == 0 {
            return Err(CedarError::Data(
                "cannot standardize an empty dataset".into(),
            ));
        }
        let mu = column_mean(z);
        let mean_norm = z
            .row_iter()
            .map(|r| norm2(&r.iter().zip(&mu).map(|(a, b)| a - b).collect::<Vec<_>>()))
            .sum::<f64>()
            / z.rows() as f64;
        if !(mean_norm > 0.0) {
            return Err(CedarError::Degenerate("all rows identical".into()));
        }
        let scale = (z.cols() as f64).sqrt() / mean_norm;
        if !scale.is_finite() {
            return Err(CedarError::Degenerate(format!("scale {scale} not finite")));
        }
        Ok(Self { mu, scale })
    }

    pub fn apply(&self, z: &Matrix) -> Result<Matrix> {
        self.check(z)?;
        let mut out = z.clone();
        for i in 0..out.rows() {
            for (v, m) in out.row_mut(i).iter_mut().zip(&self.mu) {
                *v = self.scale * (*v - m);
            }
        }
        Ok(out)
    }

    pub fn inverse(&self, x: &Matrix) -> Result<Matrix> {
        self.check(x)?;
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (v, m) in out.row_mut(i).iter_mut().zip(&self.mu) {
                *v = *v / self.scale + m;
            }
        }
        Ok(out)
    }

    fn check(&self, z: &Matrix) -> Result<()> {
        if z.cols() != self.mu.len() {
            return Err(dim_err(format!(
                "width {} for a standardizer of dimension {}",
                z.cols(),
                self.mu.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaeModel {
    pub variant: SaeVariant,
    pub k: usize,
    pub lambda: f64,
    /// `m x D`
    pub w_enc: Matrix,
    pub b_enc: Vec<f64>,
    /// `D x m`
    pub w_dec: Matrix,
    pub b_pre: Vec<f64>,
}

/// Activations and reconstruction from one forward pass, plus the
/// pre-encoder-centered input reused by the backward pass.
pub struct SaeForward {
    pub h: Matrix,
    pub xhat: Matrix,
    centered: Matrix,
}

impl SaeModel {
    /// All-zero parameters of the configured shape.
    pub fn zeros(cfg: &SaeConfig) -> Self {
        let (d, m) = (cfg.input_dim, cfg.latent_dim());
        Self {
            variant: cfg.variant,
            k: cfg.k,
            lambda: cfg.lambda,
            w_enc: Matrix::zeros(m, d),
            b_enc: vec![0.0; m],
            w_dec: Matrix::zeros(d, m),
            b_pre: vec![0.0; d],
        }
    }

    /// Unit-norm random decoder columns with `W_enc = W_dec^T`.
    pub fn init(cfg: &SaeConfig, seed: u64) -> Self {
        let mut model = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        for v in model.w_dec.data_mut() {
            *v = normal.sample(&mut rng);
        }
        model.normalize_decoder();
        model.w_enc = model.w_dec.transpose();
        model
    }

    pub fn input_dim(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn latent_dim(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn normalize_decoder(&mut self) {
        let (d, m) = self.w_dec.shape();
        for j in 0..m {
            let norm = (0..d)
                .map(|i| self.w_dec.get(i, j).powi(2))
                .sum::<f64>()
                .sqrt();
            if norm > 0.0 {
                for i in 0..d {
                    let v = self.w_dec.get(i, j) / norm;
                    self.w_dec.set(i, j, v);
                }
            }
        }
    }

    pub fn decoder_column_norms(&self) -> Vec<f64> {
        let (d, m) = self.w_dec.shape();
        (0..m)
            .map(|j| {
                (0..d)
                    .map(|i| self.w_dec.get(i, j).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    /// Sparse activations for standardized inputs.
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.h)
    }

    /// `H W_dec^T + b_pre`, in standardized space.
    pub fn decode(&self, h: &Matrix) -> Result<Matrix> {
        if h.cols() != self.latent_dim() {
            return Err(dim_err(format!(
                "codes of width {} for {} latents",
                h.cols(),
                self.latent_dim()
            )));
        }
        let mut xhat = gemm(h, false, &self.w_dec, true)?;
        for i in 0..xhat.rows() {
            for (v, b) in xhat.row_mut(i).iter_mut().zip(&self.b_pre) {
                *v += b;
            }
        }
        Ok(xhat)
    }

    pub fn forward(&self, x: &Matrix) -> Result<SaeForward> {
        if x.cols() != self.input_dim() {
            return Err(dim_err(format!(
                "input of width {} for an SAE over {} dims",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut centered = x.clone();
        for i in 0..centered.rows() {
            for (v, b) in centered.row_mut(i).iter_mut().zip(&self.b_pre) {
                *v -= b;
            }
        }
        let mut h = gemm(&centered, false, &self.w_enc, true)?;
        for i in 0..h.rows() {
            for (v, b) in h.row_mut(i).iter_mut().zip(&self.b_enc) {
                *v = (*v + b).max(0.0);
            }
        }
        match self.variant {
            SaeVariant::Relu => {}
            SaeVariant::TopK => {
                for i in 0..h.rows() {
                    let row = h.row_mut(i);
                    let keep = topk_support(row, self.k);
                    let mut masked = vec![0.0; row.len()];
                    for j in keep {
                        masked[j] = row[j];
                    }
                    row.copy_from_slice(&masked);
                }
            }
            SaeVariant::BatchTopK => {
                let budget = self.k.saturating_mul(h.rows());
                let keep = topk_support(h.data(), budget);
                let mut masked = vec![0.0; h.data().len()];
                for j in keep {
                    masked[j] = h.data()[j];
                }
                h.data_mut().copy_from_slice(&masked);
            }
        }
        let xhat = self.decode(&h)?;
        Ok(SaeForward { h, xhat, centered })
    }

    /// Mean squared row error, plus `lambda * mean ‖h‖₁` for the ReLU variant.
    pub fn loss(&self, x: &Matrix, h: &Matrix, xhat: &Matrix) -> Result<f64> {
        if x.shape() != xhat.shape() || h.rows() != x.rows() {
            return Err(dim_err("inconsistent SAE loss operands"));
        }
        let n = x.rows().max(1) as f64;
        let mse: f64 = x
            .data()
            .iter()
            .zip(xhat.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n;
        let penalty = match self.variant {
            SaeVariant::Relu => self.lambda * h.data().iter().map(|v| v.abs()).sum::<f64>() / n,
            _ => 0.0,
        };
        Ok(mse + penalty)
    }

    /// Gradients of [`Self::loss`] for `(w_enc, b_enc, w_dec, b_pre)`, with
    /// the sparsity mask treated as constant.
    fn gradients(&self, x: &Matrix, fwd: &SaeForward) -> Result<[Vec<f64>; 4]> {
        let n = x.rows().max(1) as f64;
        let mut r = fwd.xhat.sub(x)?;
        for v in r.data_mut() {
            *v *= 2.0 / n;
        }
        let g_dec = gemm(&r, true, &fwd.h, false)?;
        let mut g_pre: Vec<f64> = column_sum(&r);

        let mut dh = r.matmul(&self.w_dec)?;
        let l1 = if self.variant == SaeVariant::Relu {
            self.lambda / n
        } else {
            0.0
        };
        for (g, &h) in dh.data_mut().iter_mut().zip(fwd.h.data()) {
            *g = if h > 0.0 { *g + l1 } else { 0.0 };
        }
        let g_enc = gemm(&dh, true, &fwd.centered, false)?;
        let g_benc = column_sum(&dh);
        let through_enc = dh.matmul(&self.w_enc)?;
        for (g, c) in g_pre.iter_mut().zip(column_sum(&through_enc)) {
            *g -= c;
        }
        Ok([g_enc.into_data(), g_benc, g_dec.into_data(), g_pre])
    }

    pub fn write_to(&self, std: &Standardizer, mut w: impl Write) -> Result<()> {
        w.write_all(SAE_MAGIC)?;
        w.write_all(&SAE_VERSION.to_le_bytes())?;
        w.write_all(&self.variant.tag().to_le_bytes())?;
        w.write_all(&(self.input_dim() as u32).to_le_bytes())?;
        w.write_all(&(self.latent_dim() as u32).to_le_bytes())?;
        w.write_all(&(self.k as u32).to_le_bytes())?;
        write_f64s(&mut w, &[self.lambda])?;
        write_f64s(&mut w, self.w_enc.data())?;
        write_f64s(&mut w, &self.b_enc)?;
        write_f64s(&mut w, self.w_dec.data())?;
        write_f64s(&mut w, &self.b_pre)?;
        write_f64s(&mut w, &std.mu)?;
        write_f64s(&mut w, &[std.scale])?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<(Self, Standardizer)> {
        read_magic(&mut r, SAE_MAGIC)?;
        let version = read_header_u32(&mut r, "version")?;
        if version != SAE_VERSION {
            return Err(CedarError::Format {
                field: "version",
                detail: format!("unsupported SAE version {version}"),
            });
        }
        let variant = SaeVariant::from_tag(read_header_u32(&mut r, "variant")?)?;
        let d = read_header_u32(&mut r, "input_dim")? as usize;
        let m = read_header_u32(&mut r, "latent_dim")? as usize;
        let k = read_header_u32(&mut r, "k")? as usize;
        let lambda = read_f64s(&mut r, 1, "lambda")?[0];
        let w_enc = Matrix::new(m, d, read_f64s(&mut r, m * d, "w_enc")?)?;
        let b_enc = read_f64s(&mut r, m, "b_enc")?;
        let w_dec = Matrix::new(d, m, read_f64s(&mut r, d * m, "w_dec")?)?;
        let b_pre = read_f64s(&mut r, d, "b_pre")?;
        let mu = read_f64s(&mut r, d, "std_mu")?;
        let scale = read_f64s(&mut r, 1, "std_scale")?[0];
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(CedarError::Format {
                field: "payload",
                detail: "trailing bytes after standardizer".into(),
            });
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(CedarError::Format {
                field: "std_scale",
                detail: format!("scale {scale} must be positive"),
            });
        }
        let model = Self {
            variant,
            k,
            lambda,
            w_enc,
            b_enc,
            w_dec,
            b_pre,
        };
        Ok((model, Standardizer { mu, scale }))
    }

    pub fn save(&self, std: &Standardizer, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(std, &mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Standardizer)> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn column_sum(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in m.row_iter() {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    out
}

/// Fits the standardizer, then trains the autoencoder on standardized rows.
pub fn train_sae(z: &Matrix, cfg: &SaeConfig) -> Result<(SaeModel, Standardizer, TrainHistory)> {
    cfg.validate()?;
    if z.rows() == 0 {
        return Err(CedarError::Data("empty training set".into()));
    }
    if z.cols() != cfg.input_dim {
        return Err(dim_err(format!(
            "data of width {} for input_dim {}",
            z.cols(),
            cfg.input_dim
        )));
    }
    z.check_finite()?;
    let std = Standardizer::fit(z)?;
    let x = std.apply(z)?;

    let tc = &cfg.train;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut model = SaeModel::init(cfg, tc.seed.wrapping_add(1));
    let (d, m) = (cfg.input_dim, cfg.latent_dim());
    let mut opts = [
        Adam::new(m * d, tc.adam()),
        Adam::new(m, tc.adam()),
        Adam::new(d * m, tc.adam()),
        Adam::new(d, tc.adam()),
    ];
    let mut sampler = BatchSampler::new(x.rows(), tc.batch_size, &mut rng);
    let mut history = TrainHistory::default();

    for step in 0..tc.total_steps {
        let batch = x.select_rows(&sampler.next(&mut rng));
        let fwd = model.forward(&batch)?;
        let loss = model.loss(&batch, &fwd.h, &fwd.xhat)?;
        if !loss.is_finite() {
            return Err(CedarError::Diverged { step });
        }
        let grads = model.gradients(&batch, &fwd)?;
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(CedarError::Diverged { step });
        }
        opts[0].step(model.w_enc.data_mut(), &grads[0]);
        opts[1].step(&mut model.b_enc, &grads[1]);
        opts[2].step(model.w_dec.data_mut(), &grads[2]);
        opts[3].step(&mut model.b_pre, &grads[3]);
        model.normalize_decoder();

        let mut fired = vec![false; m];
        for r in fwd.h.row_iter() {
            for (f, v) in fired.iter_mut().zip(r) {
                *f |= *v > 0.0;
            }
        }
        history.push(StepRecord {
            step,
            k: model.k,
            loss,
            ortho_residual: None,
            dead_latents: Some(fired.iter().filter(|f| !**f).count()),
        });
    }
    Ok((model, std, history))
}
