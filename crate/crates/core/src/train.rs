//! Fitting the rotation generator `A` by minimizing the mean L1
//! reconstruction error under a dense-to-sparse curriculum on `k`.
//!
//! For `t <= tau` the sparsity level interpolates linearly from `D` down to
//! `k_target`; afterwards one `k` per batch is drawn uniformly from
//! `1..=k_max`, with `k_max = 2 k_target - 1` by default so the expected
//! level stays at `k_target`.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, CedarError, Result};
use crate::linalg::{expm_grad_adjoint, gemm, skew_from, Matrix};
use crate::model::{topk_support, CedarModel};
use crate::optim::{Adam, AdamConfig};

pub const DEFAULT_K_TARGET: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub tau: usize,
    pub k_target: usize,
    /// Upper end of the random-k regime. May exceed `dim`; the top-k
    /// operator clamps it.
    pub k_max: usize,
    pub dim: usize,
}

impl CurriculumSchedule {
    /// Schedule with `k_max = 2 k_target - 1`.
    pub fn new(dim: usize, tau: usize, k_target: usize) -> Result<Self> {
        let s = Self {
            tau,
            k_target,
            k_max: (2 * k_target).saturating_sub(1),
            dim,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau < 1 {
            return Err(CedarError::Argument("tau must be >= 1".into()));
        }
        if self.k_target < 1 || self.k_target > self.dim {
            return Err(CedarError::Argument(format!(
                "k_target must lie in [1, {}], got {}",
                self.dim, self.k_target
            )));
        }
        if self.k_max < self.k_target {
            return Err(CedarError::Argument(format!(
                "k_max {} below k_target {}",
                self.k_max, self.k_target
            )));
        }
        Ok(())
    }

    /// Homotopy level `round(D + t/tau (k_target - D))`, rounded half up and
    /// clamped to `[k_target, D]`.
    pub fn k_of_t(&self, t: usize) -> usize {
        let t = t.min(self.tau) as f64;
        let d = self.dim as f64;
        let k = d + t / self.tau as f64 * (self.k_target as f64 - d);
        ((k + 0.5).floor() as usize).clamp(self.k_target, self.dim)
    }

    /// Uniform draw from `1..=k_max`.
    pub fn sample_k(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(1..=self.k_max)
    }

    pub fn k_for_step(&self, t: usize, rng: &mut impl Rng) -> usize {
        if t <= self.tau {
            self.k_of_t(t)
        } else {
            self.sample_k(rng)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub tau: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

pub const DEFAULT_TOTAL_STEPS: usize = 4000;
/// At 1e-3 the generator stays trapped near `A = 0` on sparse synthetic data.
pub const DEFAULT_LEARNING_RATE: f64 = 1e-2;

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_steps(DEFAULT_TOTAL_STEPS)
    }
}

impl TrainConfig {
    /// Defaults with `tau` at 30% of the step budget.
    pub fn with_steps(total_steps: usize) -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: 256,
            total_steps,
            tau: ((total_steps as f64) * 0.3).round().max(1.0) as usize,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CedarError::Argument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 1 {
            return Err(CedarError::Argument("batch_size must be >= 1".into()));
        }
        if self.tau < 1 || self.total_steps < self.tau {
            return Err(CedarError::Argument(format!(
                "need 1 <= tau <= total_steps, got tau={} total_steps={}",
                self.tau, self.total_steps
            )));
        }
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.adam_beta1) || !unit(self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(CedarError::Argument(
                "invalid Adam moment parameters".into(),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub k: usize,
    pub loss: f64,
    /// `‖U^T U - I‖_max` after the update (CEDAR only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ortho_residual: Option<f64>,
    /// Latents that never fired in the batch (SAE only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dead_latents: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
}

impl TrainHistory {
    pub fn push(&mut self, rec: StepRecord) {
        debug_assert!(self.records.last().is_none_or(|r| r.step < rec.step));
        self.records.push(rec);
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One JSON object per line.
    pub fn write_ndjson(&self, mut w: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_ndjson(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ndjson(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Mean over rows of `‖z - ẑ‖₁`.
pub fn l1_batch_loss(z: &Matrix, zhat: &Matrix) -> Result<f64> {
    if z.shape() != zhat.shape() {
        return Err(dim_err(format!("{:?} vs {:?}", z.shape(), zhat.shape())));
    }
    if z.rows() == 0 {
        return Ok(0.0);
    }
    let total: f64 = z
        .row_iter()
        .zip(zhat.row_iter())
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .sum();
    Ok(total / z.rows() as f64)
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Batch L1 loss and its gradient with respect to the generator `A`.
///
/// The top-k mask is held fixed (straight-through on the retained
/// coordinates), the L1 subgradient is zero at exact zeros, and both
/// occurrences of `U` (forward rotation and transposed inverse) are
/// differentiated before pulling back through `expm`.
pub fn loss_and_grad(model: &CedarModel, z: &Matrix, k: usize) -> Result<(f64, Matrix)> {
    let d = model.dim();
    if z.cols() != d {
        return Err(dim_err(format!(
            "batch of width {} for dimension {d}",
            z.cols()
        )));
    }
    let n = z.rows();
    if n == 0 {
        return Ok((0.0, Matrix::zeros(d, d)));
    }
    let u = model.rotation();
    let centered = model.center(z);
    let rotated = gemm(&centered, false, u, true)?;

    let mut kept = Matrix::zeros(n, d);
    let mut supports = Vec::with_capacity(n);
    for i in 0..n {
        let row = rotated.row(i);
        let support = topk_support(row, k);
        let out = kept.row_mut(i);
        for &j in &support {
            out[j] = row[j];
        }
        supports.push(support);
    }
    let recon = kept.matmul(u)?;

    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut signs = Matrix::zeros(n, d);
    for i in 0..n {
        let (x, r) = (centered.row(i), recon.row(i));
        let g = signs.row_mut(i);
        for j in 0..d {
            let res = x[j] - r[j];
            loss += res.abs();
            g[j] = sign(res) * scale;
        }
    }
    loss *= scale;

    // dL/dU = -(W^T G + (M ⊙ G U^T)^T Xc)
    let mut back = gemm(&signs, false, u, true)?;
    for (i, support) in supports.iter().enumerate() {
        let row = back.row_mut(i);
        let mut masked = vec![0.0; d];
        for &j in support {
            masked[j] = row[j];
        }
        row.copy_from_slice(&masked);
    }
    let mut grad_u = gemm(&kept, true, &signs, false)?;
    grad_u.axpy(1.0, &gemm(&back, true, &centered, false)?);
    let grad_u = grad_u.scale(-1.0);

    let m = expm_grad_adjoint(&skew_from(model.generator())?, &grad_u)?;
    let grad_a = skew_from(&m)?;
    Ok((loss, grad_a))
}

/// Gradient of the batch L1 loss with respect to `A`.
pub fn loss_grad_a(model: &CedarModel, z: &Matrix, k: usize) -> Result<Matrix> {
    Ok(loss_and_grad(model, z, k)?.1)
}

/// Column mean of a non-empty matrix.
pub fn column_mean(z: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; z.cols()];
    for r in z.row_iter() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    let n = z.rows().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Draws fixed-size batches from per-epoch shuffles, carrying the
/// remainder of one permutation into the next.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl BatchSampler {
    pub(crate) fn new(n: usize, batch: usize, rng: &mut impl Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self {
            order,
            cursor: 0,
            batch: batch.min(n),
        }
    }

    pub(crate) fn next(&mut self, rng: &mut impl Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            let take = (self.batch - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}

/// Trains a model from scratch: `b` is the column mean, `A` starts at zero.
pub fn fit(
    z: &Matrix,
    cfg: &TrainConfig,
    sched: &CurriculumSchedule,
) -> Result<(CedarModel, TrainHistory)> {
    cfg.validate()?;
    sched.validate()?;
    if z.rows() == 0 {
        return Err(CedarError::Data("empty training set".into()));
    }
    if sched.dim != z.cols() {
        return Err(dim_err(format!(
            "schedule for dimension {} with data of width {}",
            sched.dim,
            z.cols()
        )));
    }
    if sched.tau != cfg.tau {
        return Err(CedarError::Argument(format!(
            "schedule tau {} disagrees with config tau {}",
            sched.tau, cfg.tau
        )));
    }
    z.check_finite()?;

    let d = z.cols();
    let mut model = CedarModel::identity(column_mean(z));
    let mut params = model.generator().clone();
    let mut opt = Adam::new(d * d, cfg.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = BatchSampler::new(z.rows(), cfg.batch_size, &mut rng);
    let mut history = TrainHistory::default();

    for step in 0..cfg.total_steps {
        let k = sched.k_for_step(step, &mut rng);
        let batch = z.select_rows(&sampler.next(&mut rng));
        let (loss, grad) = loss_and_grad(&model, &batch, k)?;
        if !loss.is_finite() || grad.check_finite().is_err() {
            return Err(CedarError::Diverged { step });
        }
        opt.step(params.data_mut(), grad.data());
        model
            .set_generator(params.clone())
            .map_err(|_| CedarError::Diverged { step })?;
        history.push(StepRecord {
            step,
            k,
            loss,
            ortho_residual: Some(model.orthogonality_residual()),
            dead_latents: None,
        });
    }
    Ok((model, history))
}
