//! Reconstruction and representation-quality metrics, and the binary search
//! that matches a target fraction of variance unexplained (FVU) by
//! thresholding activations.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{dim_err, CedarError, Result};
use crate::linalg::{dot, gemm, norm2, Matrix};
use crate::optim::{Adam, AdamConfig};
use crate::train::column_mean;

fn same_shape(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `Σ‖z_i - ẑ_i‖² / Σ‖z_i - z̄‖²`.
pub fn fvu(z: &Matrix, zhat: &Matrix) -> Result<f64> {
    same_shape(z, zhat)?;
    if z.rows() < 2 {
        return Err(CedarError::Data("FVU needs at least two rows".into()));
    }
    let mean = column_mean(z);
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in z.row_iter().zip(zhat.row_iter()) {
        for ((x, y), m) in a.iter().zip(b).zip(&mean) {
            num += (x - y) * (x - y);
            den += (x - m) * (x - m);
        }
    }
    if den == 0.0 {
        return Err(CedarError::Degenerate(
            "constant dataset has zero variance".into(),
        ));
    }
    Ok(num / den)
}

/// Per-row count of `|h| > threshold`.
pub fn active_counts(h: &Matrix, threshold: f64) -> Vec<usize> {
    h.row_iter()
        .map(|r| r.iter().filter(|v| v.abs() > threshold).count())
        .collect()
}

/// Mean number of activations with `|h| > threshold`.
pub fn active_count(h: &Matrix, threshold: f64) -> f64 {
    if h.rows() == 0 {
        return 0.0;
    }
    active_counts(h, threshold).iter().sum::<usize>() as f64 / h.rows() as f64
}

/// `ln C(n, k)` through log-gamma; `k` may be fractional.
pub fn ln_binomial(n: f64, k: f64) -> f64 {
    if k <= 0.0 || k >= n {
        return 0.0;
    }
    ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)
}

/// Information capacity: mean over rows of `ln C(n_latent, k_i)` with
/// `k_i` the row's own active count.
pub fn ic(n_latent: usize, h: &Matrix, threshold: f64) -> f64 {
    if h.rows() == 0 {
        return 0.0;
    }
    let n = n_latent as f64;
    let total: f64 = active_counts(h, threshold)
        .into_iter()
        .map(|k| ln_binomial(n, k.min(n_latent) as f64))
        .sum();
    total / h.rows() as f64
}

/// Mean row cosine between originals and reconstructions. A zero
/// reconstruction row scores 0; a zero original row is an error.
pub fn cosine_mean(z: &Matrix, zhat: &Matrix) -> Result<f64> {
    same_shape(z, zhat)?;
    if z.rows() == 0 {
        return Err(CedarError::Data("cosine over an empty set".into()));
    }
    let mut total = 0.0;
    for (i, (a, b)) in z.row_iter().zip(zhat.row_iter()).enumerate() {
        let na = norm2(a);
        if na == 0.0 {
            return Err(CedarError::Data(format!("row {i} of the original is zero")));
        }
        let nb = norm2(b);
        if nb > 0.0 {
            total += dot(a, b) / (na * nb);
        }
    }
    Ok(total / z.rows() as f64)
}

fn centered_kernel(z: &Matrix) -> Result<Matrix> {
    let mean = column_mean(z);
    let mut c = z.clone();
    for i in 0..c.rows() {
        for (v, m) in c.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    gemm(&c, false, &c, true)
}

/// `H K H` with `H = I - 11^T / n`.
fn double_center(k: &mut Matrix) {
    let n = k.rows();
    let row_means: Vec<f64> = k
        .row_iter()
        .map(|r| r.iter().sum::<f64>() / n as f64)
        .collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    // K is symmetric, so column means equal row means.
    for i in 0..n {
        let ri = row_means[i];
        for (j, v) in k.row_mut(i).iter_mut().enumerate() {
            *v += grand - ri - row_means[j];
        }
    }
}

/// For each row, the `k` most similar other rows (ties to the lower index).
fn knn_sets(kernel: &Matrix, k: usize) -> Vec<Vec<usize>> {
    (0..kernel.rows())
        .into_par_iter()
        .map(|i| {
            let row = kernel.row(i);
            let mut idx: Vec<usize> = (0..row.len()).filter(|&j| j != i).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.truncate(k);
            idx.sort_unstable();
            idx
        })
        .collect()
}

/// Sum of `K'_ij L'_ij` over pairs where `j` is in both `a[i]` and `b[i]`.
fn masked_inner(k: &Matrix, l: &Matrix, a: &[Vec<usize>], b: &[Vec<usize>]) -> (f64, usize) {
    let (mut total, mut pairs) = (0.0, 0);
    for i in 0..k.rows() {
        // both lists are sorted
        let (a, b) = (&a[i], &b[i]);
        let (mut p, mut q) = (0, 0);
        while p < a.len() && q < b.len() {
            match a[p].cmp(&b[q]) {
                std::cmp::Ordering::Less => p += 1,
                std::cmp::Ordering::Greater => q += 1,
                std::cmp::Ordering::Equal => {
                    total += k.get(i, a[p]) * l.get(i, a[p]);
                    pairs += 1;
                    p += 1;
                    q += 1;
                }
            }
        }
    }
    (total, pairs)
}

/// Centered kernel alignment restricted to mutual k-nearest-neighbour pairs.
///
/// Inner-product kernels on column-centered features are double-centered.
/// The cross term sums over pairs that are neighbours under both kernels;
/// each self term sums over that kernel's own neighbour pairs, so unrelated
/// spaces score near zero rather than near one.
pub fn cknna(z: &Matrix, zhat: &Matrix, k_nn: usize) -> Result<f64> {
    if z.rows() != zhat.rows() {
        return Err(dim_err(format!("{} vs {} rows", z.rows(), zhat.rows())));
    }
    let n = z.rows();
    if k_nn < 1 || n <= k_nn {
        return Err(CedarError::Argument(format!(
            "need N > k_nn >= 1, got N={n}, k_nn={k_nn}"
        )));
    }
    let mut kx = centered_kernel(z)?;
    let mut ky = centered_kernel(zhat)?;
    let nx = knn_sets(&kx, k_nn);
    let ny = knn_sets(&ky, k_nn);
    double_center(&mut kx);
    double_center(&mut ky);

    let (cross, pairs) = masked_inner(&kx, &ky, &nx, &ny);
    let (sx, _) = masked_inner(&kx, &kx, &nx, &nx);
    let (sy, _) = masked_inner(&ky, &ky, &ny, &ny);
    let denom = (sx * sy).sqrt();
    if pairs == 0 || denom == 0.0 {
        return Err(CedarError::UndefinedMetric(
            "no mutual nearest-neighbour pairs with nonzero kernel mass".into(),
        ));
    }
    Ok(cross / denom)
}

/// Linear softmax classifier `logits = W z + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeModel {
    /// `C x D`
    pub w: Matrix,
    pub bias: Vec<f64>,
}

impl ProbeModel {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            w: Matrix::zeros(classes, dim),
            bias: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    /// Per-row log-softmax probabilities.
    fn log_probs(&self, z: &Matrix) -> Result<Matrix> {
        let mut logits = gemm(z, false, &self.w, true)?;
        for i in 0..logits.rows() {
            let row = logits.row_mut(i);
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(logits)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-2,
            seed: 0,
        }
    }
}

fn check_labels(labels: &[u32], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(dim_err(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(CedarError::Data(format!(
            "label {bad} outside [0, {classes})"
        )));
    }
    Ok(())
}

/// Trains on original embeddings; returns the probe and its final
/// full-data cross-entropy.
pub fn probe_train(z: &Matrix, labels: &[u32], cfg: &ProbeConfig) -> Result<(ProbeModel, f64)> {
    if z.rows() == 0 {
        return Err(CedarError::Data("probe needs training rows".into()));
    }
    let classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
    check_labels(labels, z.rows(), classes)?;
    let mut seen = vec![false; classes];
    labels.iter().for_each(|&l| seen[l as usize] = true);
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(CedarError::Data(format!(
            "class {missing} has no training sample"
        )));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(CedarError::Argument("invalid probe configuration".into()));
    }

    let d = z.cols();
    let mut probe = ProbeModel::zeros(classes, d);
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..Default::default()
    };
    let mut opt_w = Adam::new(classes * d, adam);
    let mut opt_b = Adam::new(classes, adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..z.rows()).collect();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = z.select_rows(chunk);
            let mut g = probe.log_probs(&xb)?;
            let scale = 1.0 / chunk.len() as f64;
            for (i, &row) in chunk.iter().enumerate() {
                let target = labels[row] as usize;
                for (c, v) in g.row_mut(i).iter_mut().enumerate() {
                    let p = v.exp();
                    *v = (p - if c == target { 1.0 } else { 0.0 }) * scale;
                }
            }
            let gw = gemm(&g, true, &xb, false)?;
            let mut gb = vec![0.0; classes];
            for r in g.row_iter() {
                for (b, v) in gb.iter_mut().zip(r) {
                    *b += v;
                }
            }
            opt_w.step(probe.w.data_mut(), gw.data());
            opt_b.step(&mut probe.bias, &gb);
        }
    }
    let final_loss = probe_eval(&probe, z, labels)?;
    Ok((probe, final_loss))
}

/// Mean cross-entropy (nats) of a frozen probe on the given rows.
pub fn probe_eval(probe: &ProbeModel, zhat: &Matrix, labels: &[u32]) -> Result<f64> {
    if zhat.cols() != probe.w.cols() {
        return Err(dim_err(format!(
            "probe over {} dims applied to width {}",
            probe.w.cols(),
            zhat.cols()
        )));
    }
    check_labels(labels, zhat.rows(), probe.classes())?;
    if zhat.rows() == 0 {
        return Err(CedarError::Data("probe evaluation on an empty set".into()));
    }
    let lp = probe.log_probs(zhat)?;
    let total: f64 = lp
        .row_iter()
        .zip(labels)
        .map(|(r, &l)| -r[l as usize])
        .sum();
    Ok(total / zhat.rows() as f64)
}

/// Zeroes every entry with `|h| <= threshold`.
pub fn zero_below(h: &Matrix, threshold: f64) -> Matrix {
    let mut out = h.clone();
    for v in out.data_mut() {
        if v.abs() <= threshold {
            *v = 0.0;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSearch {
    pub threshold: f64,
    pub fvu: f64,
    pub iterations: usize,
    /// False when the search stopped at a bracket endpoint outside `tol`.
    pub reached: bool,
}

pub const MAX_SEARCH_ITERATIONS: usize = 60;

/// Bisects a threshold in `[0, upper]` so that `fvu(z, reconstruct(t))`
/// lands within `tol` of `target`.
///
/// `reconstruct(t)` must zero activations with `|h| <= t` before decoding.
pub fn threshold_for_fvu(
    mut reconstruct: impl FnMut(f64) -> Result<Matrix>,
    z: &Matrix,
    upper: f64,
    target: f64,
    tol: f64,
) -> Result<ThresholdSearch> {
    if !(tol > 0.0) || !target.is_finite() {
        return Err(CedarError::Argument(format!(
            "invalid target {target} / tol {tol}"
        )));
    }
    let mut eval = |t: f64| -> Result<f64> { fvu(z, &reconstruct(t)?) };
    let f_lo = eval(0.0)?;
    if (f_lo - target).abs() <= tol {
        return Ok(ThresholdSearch {
            threshold: 0.0,
            fvu: f_lo,
            iterations: 1,
            reached: true,
        });
    }
    if f_lo > target {
        return Err(CedarError::Unreachable {
            target,
            closest: f_lo,
        });
    }
    let upper = upper.max(0.0);
    let f_hi = eval(upper)?;
    if (f_hi - target).abs() <= tol {
        return Ok(ThresholdSearch {
            threshold: upper,
            fvu: f_hi,
            iterations: 2,
            reached: true,
        });
    }
    if f_hi < target {
        return Err(CedarError::Unreachable {
            target,
            closest: f_hi,
        });
    }

    let (mut lo, mut hi) = ((0.0, f_lo), (upper, f_hi));
    let mut iterations = 2;
    while iterations < MAX_SEARCH_ITERATIONS {
        let mid = 0.5 * (lo.0 + hi.0);
        let f = eval(mid)?;
        iterations += 1;
        if (f - target).abs() <= tol {
            return Ok(ThresholdSearch {
                threshold: mid,
                fvu: f,
                iterations,
                reached: true,
            });
        }
        if f < target {
            lo = (mid, f);
        } else {
            hi = (mid, f);
        }
    }
    let best = if (lo.1 - target).abs() <= (hi.1 - target).abs() {
        lo
    } else {
        hi
    };
    Ok(ThresholdSearch {
        threshold: best.0,
        fvu: best.1,
        iterations,
        reached: false,
    })
}

/// One row of the matched-FVU comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub target_fvu: Option<f64>,
    pub threshold: f64,
    pub fvu: f64,
    pub k_mean: f64,
    pub ic_nats: f64,
    pub cs_mean: f64,
    pub lp_ce: Option<f64>,
    pub cknna: Option<f64>,
    pub n_latent: usize,
    pub reached: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl MetricsReport {
    pub const CSV_HEADER: [&'static str; 11] = [
        "model",
        "K",
        "IC",
        "CS",
        "LP",
        "CKNNA",
        "target_fvu",
        "fvu",
        "threshold",
        "n_latent",
        "reached",
    ];

    pub fn csv_record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        // non-finite values become empty cells, as they become null in JSON
        let num = |v: f64| {
            if v.is_finite() {
                v.to_string()
            } else {
                String::new()
            }
        };
        vec![
            self.model.clone(),
            num(self.k_mean),
            num(self.ic_nats),
            num(self.cs_mean),
            opt(self.lp_ce),
            opt(self.cknna),
            opt(self.target_fvu),
            num(self.fvu),
            num(self.threshold),
            self.n_latent.to_string(),
            self.reached.to_string(),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{expm, skew_from};
    use rand_distr::{Distribution, Normal};

    fn gaussian(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        Matrix::from_fn(n, d, |_, _| normal.sample(&mut rng))
    }

    fn mean_predictor(z: &Matrix) -> Matrix {
        let mean = column_mean(z);
        Matrix::from_fn(z.rows(), z.cols(), |_, j| mean[j])
    }

    #[test]
    fn fvu_examples() {
        let z = gaussian(30, 4, 1);
        assert_eq!(fvu(&z, &z).unwrap(), 0.0);
        assert!((fvu(&z, &mean_predictor(&z)).unwrap() - 1.0).abs() < 1e-15);
        let z = Matrix::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let zhat = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(fvu(&z, &zhat).unwrap(), 0.5);
        let constant = Matrix::from_fn(3, 2, |_, _| 1.0);
        assert!(matches!(
            fvu(&constant, &constant),
            Err(CedarError::Degenerate(_))
        ));
        assert!(fvu(&z.select_rows(&[0]), &zhat.select_rows(&[0])).is_err());
    }

    #[test]
    fn fvu_is_rotation_invariant() {
        let z = gaussian(40, 5, 2);
        let zhat = z.add(&gaussian(40, 5, 3).scale(0.3)).unwrap();
        let r = expm(&skew_from(&gaussian(5, 5, 4)).unwrap()).unwrap();
        let a = fvu(&z, &zhat).unwrap();
        let b = fvu(&z.matmul(&r).unwrap(), &zhat.matmul(&r).unwrap()).unwrap();
        assert!((a - b).abs() <= 1e-8 * a);
    }

    #[test]
    fn active_count_examples() {
        assert_eq!(active_count(&Matrix::zeros(3, 4), 0.0), 0.0);
        let row = Matrix::from_rows(&[vec![0.0, 3.0, -2.0]]).unwrap();
        assert_eq!(active_count(&row, 0.0), 2.0);
        assert_eq!(active_count(&row, 2.5), 1.0);
    }

    #[test]
    fn ic_examples() {
        assert_eq!(ic(16, &Matrix::zeros(5, 16), 0.0), 0.0);
        let h = Matrix::from_rows(&[vec![1.0, 0.0, -1.0, 0.0]]).unwrap();
        assert!((ic(4, &h, 0.0) - 6f64.ln()).abs() < 1e-12);
        // per-row counts, not the count of the mean
        let h = Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![1.0, 1.0, 1.0, 0.0]]).unwrap();
        assert!((ic(4, &h, 0.0) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ic_uses_natural_log_at_reference_scale() {
        // Integer counts 11 and 12 mixed to a mean of 11.549 over a 768-wide basis.
        let (n, rows) = (768, 1000);
        let twelves = 549;
        let h = Matrix::from_fn(rows, n, |i, j| {
            let k = if i < twelves { 12 } else { 11 };
            if j < k {
                1.0
            } else {
                0.0
            }
        });
        assert!((active_count(&h, 0.0) - 11.549).abs() < 1e-12);
        let v = ic(n, &h, 0.0);
        assert!((v - 57.381).abs() / 57.381 < 0.05, "ic {v}");
        let twelve = ln_binomial(768.0, 12.0);
        assert!((twelve - 59.65).abs() < 0.01, "ln C(768, 12) = {twelve}");
    }

    #[test]
    fn ic_grows_with_k_up_to_half() {
        let n = 40;
        let mut prev = -1.0;
        for k in 0..=n / 2 {
            let h = Matrix::from_fn(1, n, |_, j| if j < k { 1.0 } else { 0.0 });
            let v = ic(n, &h, 0.0);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn cosine_examples() {
        let z = gaussian(10, 3, 5);
        assert!((cosine_mean(&z, &z).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_mean(&z, &z.scale(-1.0)).unwrap() + 1.0).abs() < 1e-12);
        assert!((cosine_mean(&z, &z.scale(2.0)).unwrap() - 1.0).abs() < 1e-12);
        let zero_recon = Matrix::zeros(10, 3);
        assert_eq!(cosine_mean(&z, &zero_recon).unwrap(), 0.0);
        assert!(matches!(
            cosine_mean(&zero_recon, &z),
            Err(CedarError::Data(_))
        ));
    }

    #[test]
    fn cknna_identities() {
        let z = gaussian(60, 6, 6);
        assert!((cknna(&z, &z, 10).unwrap() - 1.0).abs() < 1e-12);
        let r = expm(&skew_from(&gaussian(6, 6, 7)).unwrap()).unwrap();
        let zr = z.matmul(&r).unwrap();
        assert!((cknna(&z, &zr, 10).unwrap() - 1.0).abs() < 1e-8);

        let other = z.add(&gaussian(60, 6, 8).scale(0.5)).unwrap();
        let (ab, ba) = (cknna(&z, &other, 5).unwrap(), cknna(&other, &z, 5).unwrap());
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab < 1.0 && ab > 0.0);
        assert!(cknna(&z, &z, 60).is_err());
        assert!(cknna(&z, &z, 0).is_err());
    }

    #[test]
    fn cknna_null_distribution() {
        for seed in 0..5 {
            let a = gaussian(200, 32, 100 + 2 * seed);
            let b = gaussian(200, 32, 101 + 2 * seed);
            let v = cknna(&a, &b, 10).unwrap();
            assert!(v.abs() < 0.2, "independent cknna {v}");
        }
    }

    #[test]
    fn uniform_probe_scores_ln_c() {
        let z = gaussian(25, 4, 11);
        let labels: Vec<u32> = (0..25).map(|i| (i % 5) as u32).collect();
        let ce = probe_eval(&ProbeModel::zeros(5, 4), &z, &labels).unwrap();
        assert!((ce - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn probe_on_separable_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let labels: Vec<u32> = (0..400).map(|i| (i % 2) as u32).collect();
        let z = Matrix::from_fn(400, 8, |i, j| {
            let shift = if j == 0 {
                if labels[i] == 1 {
                    5.0
                } else {
                    -5.0
                }
            } else {
                0.0
            };
            shift + normal.sample(&mut rng)
        });
        let (probe, train_loss) = probe_train(&z, &labels, &ProbeConfig::default()).unwrap();
        assert!(train_loss < 0.1, "cross-entropy {train_loss}");
        assert!((probe_eval(&probe, &z, &labels).unwrap() - train_loss).abs() < 1e-12);
    }

    #[test]
    fn probe_rejects_missing_classes() {
        let z = gaussian(4, 2, 13);
        assert!(matches!(
            probe_train(&z, &[0, 2, 2, 0], &ProbeConfig::default()),
            Err(CedarError::Data(_))
        ));
        let probe = ProbeModel::zeros(2, 2);
        assert!(probe_eval(&probe, &z, &[0, 1, 2, 0]).is_err());
    }

    #[test]
    fn threshold_search_on_a_scaled_identity() {
        // Codes are the centered data itself; thresholding trades FVU for sparsity.
        let z = gaussian(2000, 6, 14);
        let mean = column_mean(&z);
        let codes = Matrix::from_fn(z.rows(), 6, |i, j| z.get(i, j) - mean[j]);
        let recon = |t: f64| -> Result<Matrix> {
            let h = zero_below(&codes, t);
            Ok(Matrix::from_fn(h.rows(), 6, |i, j| h.get(i, j) + mean[j]))
        };
        let upper = codes.max_abs();
        let first = threshold_for_fvu(recon, &z, upper, 0.0, 0.005).unwrap();
        assert_eq!(first.threshold, 0.0);

        let mut last_k = f64::INFINITY;
        for target in [0.25, 0.30, 0.35] {
            let s = threshold_for_fvu(recon, &z, upper, target, 0.005).unwrap();
            assert!(s.reached && (s.fvu - target).abs() <= 0.005);
            assert!(s.iterations <= MAX_SEARCH_ITERATIONS);
            let k = active_count(&zero_below(&codes, s.threshold), 0.0);
            assert!(k <= last_k);
            last_k = k;
        }
        assert!(matches!(
            threshold_for_fvu(recon, &z, upper, 1.5, 0.005),
            Err(CedarError::Unreachable { .. })
        ));
        let noisy = |_t: f64| -> Result<Matrix> { Ok(z.scale(0.0)) };
        assert!(matches!(
            threshold_for_fvu(noisy, &z, upper, 0.3, 0.005),
            Err(CedarError::Unreachable { .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn fvu_nonnegative_and_cknna_bounded(seed in 0u64..1000, scale in 0.0f64..2.0) {
            let z = gaussian(30, 4, seed);
            let zhat = z.add(&gaussian(30, 4, seed + 1).scale(scale)).unwrap();
            proptest::prop_assert!(fvu(&z, &zhat).unwrap() >= 0.0);
            let ab = cknna(&z, &zhat, 5).unwrap();
            let ba = cknna(&zhat, &z, 5).unwrap();
            proptest::prop_assert!(ab.abs() <= 1.0 + 1e-12);
            proptest::prop_assert!((ab - ba).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_columns_lead_with_table_order() {
        assert_eq!(
            &MetricsReport::CSV_HEADER[..6],
            &["model", "K", "IC", "CS", "LP", "CKNNA"]
        );
    }
}
