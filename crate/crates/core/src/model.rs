//! The orthogonal sparse transform: `z -> U (z - b)`, top-k masking in the
//! rotated basis and the inverse map back to embedding space.

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{dim_err, CedarError, Result};
use crate::io::{read_f64s, read_header_u32, read_magic, write_f64s};
use crate::linalg::{expm, gemm, orthogonality_residual, skew_from, Matrix};

pub const MODEL_MAGIC: &[u8; 4] = b"CEDM";
pub const MODEL_VERSION: u32 = 1;

/// Indices of the `k` largest-magnitude entries of `v`, ascending.
/// Ties on magnitude go to the lower index; `k` is clamped to `v.len()`.
pub fn topk_support(v: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(v.len());
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    if k < v.len() {
        let by_magnitude = |&a: &usize, &b: &usize| -> Ordering {
            v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b))
        };
        idx.select_nth_unstable_by(k - 1, by_magnitude);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

/// Keeps the `k` largest-magnitude coordinates of `v` and zeroes the rest.
pub fn topk(v: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for i in topk_support(v, k) {
        out[i] = v[i];
    }
    out
}

/// A `k`-sparse code in the rotated basis.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SparseCode {
    dim: usize,
    support: Vec<usize>,
    values: Vec<f64>,
    k: usize,
}

impl SparseCode {
    /// Validates ordering, range, size and nonzero-ness of the entries.
    pub fn new(dim: usize, support: Vec<usize>, values: Vec<f64>, k: usize) -> Result<Self> {
        if support.len() != values.len() {
            return Err(dim_err("support and values differ in length"));
        }
        if support.len() > k.min(dim) {
            return Err(CedarError::Data(format!(
                "{} entries exceed sparsity {}",
                support.len(),
                k.min(dim)
            )));
        }
        if support.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CedarError::Data("support not strictly increasing".into()));
        }
        if let Some(&bad) = support.iter().find(|&&i| i >= dim) {
            return Err(CedarError::Index { index: bad, dim });
        }
        if values.iter().any(|v| *v == 0.0 || !v.is_finite()) {
            return Err(CedarError::Data(
                "code values must be finite and nonzero".into(),
            ));
        }
        Ok(Self {
            dim,
            support,
            values,
            k,
        })
    }

    pub fn empty(dim: usize, k: usize) -> Self {
        Self {
            dim,
            support: Vec::new(),
            values: Vec::new(),
            k,
        }
    }

    /// Sparse form of `topk(v, k)`; exactly-zero coordinates are dropped.
    pub fn from_dense_topk(v: &[f64], k: usize) -> Self {
        let (support, values) = topk_support(v, k)
            .into_iter()
            .filter(|&i| v[i] != 0.0)
            .map(|i| (i, v[i]))
            .unzip();
        Self {
            dim: v.len(),
            support,
            values,
            k,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.support
            .iter()
            .copied()
            .zip(self.values.iter().copied())
    }

    pub fn dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }
}

/// Learned orthogonal reparameterization. `U = expm(A - A^T)` is kept in
/// sync with the generator `A`; `b` is the training-set mean.
#[derive(Clone, Debug)]
pub struct CedarModel {
    generator: Matrix,
    rotation: Matrix,
    mean: Vec<f64>,
}

impl CedarModel {
    pub fn new(generator: Matrix, mean: Vec<f64>) -> Result<Self> {
        if !generator.is_square() || generator.rows() != mean.len() {
            return Err(dim_err(format!(
                "generator {:?} with mean of length {}",
                generator.shape(),
                mean.len()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(CedarError::Numeric(
                "mean vector has non-finite entries".into(),
            ));
        }
        let rotation = expm(&skew_from(&generator)?)?;
        Ok(Self {
            generator,
            rotation,
            mean,
        })
    }

    /// `U = I` with the given mean.
    pub fn identity(mean: Vec<f64>) -> Self {
        let d = mean.len();
        Self {
            generator: Matrix::zeros(d, d),
            rotation: Matrix::identity(d),
            mean,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn generator(&self) -> &Matrix {
        &self.generator
    }

    pub fn rotation(&self) -> &Matrix {
        &self.rotation
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Replaces `A` and recomputes the cached rotation.
    pub fn set_generator(&mut self, generator: Matrix) -> Result<()> {
        if generator.shape() != self.generator.shape() {
            return Err(dim_err("generator shape changed"));
        }
        self.rotation = expm(&skew_from(&generator)?)?;
        self.generator = generator;
        Ok(())
    }

    pub fn orthogonality_residual(&self) -> f64 {
        orthogonality_residual(&self.rotation)
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(dim_err(format!(
                "input of dimension {len} for a model of dimension {}",
                self.dim()
            )));
        }
        Ok(())
    }

    /// `U (z - b)`.
    pub fn transform(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z.len())?;
        let centered: Vec<f64> = z.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        self.rotation.mul_vec(&centered)
    }

    /// Row-wise `U (z - b)` for a whole batch.
    pub fn transform_batch(&self, z: &Matrix) -> Result<Matrix> {
        self.check_dim(z.cols())?;
        let centered = self.center(z);
        gemm(&centered, false, &self.rotation, true)
    }

    pub(crate) fn center(&self, z: &Matrix) -> Matrix {
        let mut c = z.clone();
        for i in 0..c.rows() {
            for (v, m) in c.row_mut(i).iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        c
    }

    pub fn encode(&self, z: &[f64], k: usize) -> Result<SparseCode> {
        Ok(SparseCode::from_dense_topk(&self.transform(z)?, k))
    }

    /// `U^T dense(c) + b`.
    pub fn decode(&self, code: &SparseCode) -> Result<Vec<f64>> {
        self.check_dim(code.dim())?;
        let mut out = self.mean.clone();
        for (d, alpha) in code.iter() {
            for (o, u) in out.iter_mut().zip(self.rotation.row(d)) {
                *o += alpha * u;
            }
        }
        Ok(out)
    }

    /// Maps dense rotated-basis coordinates back: rows of `Y U + 1 b^T`.
    pub fn decode_dense_batch(&self, y: &Matrix) -> Result<Matrix> {
        self.check_dim(y.cols())?;
        let mut out = y.matmul(&self.rotation)?;
        for i in 0..out.rows() {
            for (v, m) in out.row_mut(i).iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        Ok(out)
    }

    pub fn reconstruct(&self, z: &[f64], k: usize) -> Result<Vec<f64>> {
        self.decode(&self.encode(z, k)?)
    }

    /// `decode(encode(z, k))` applied to every row independently.
    pub fn reconstruct_batch(&self, z: &Matrix, k: usize) -> Result<Matrix> {
        let mut y = self.transform_batch(z)?;
        for i in 0..y.rows() {
            let row = y.row_mut(i);
            let kept = topk(row, k);
            row.copy_from_slice(&kept);
        }
        self.decode_dense_batch(&y)
    }

    /// Direction in embedding space contributed per unit of coordinate `d`:
    /// `decode(e_d) - b`, i.e. row `d` of `U`.
    pub fn semantic_axis(&self, d: usize) -> Result<Vec<f64>> {
        if d >= self.dim() {
            return Err(CedarError::Index {
                index: d,
                dim: self.dim(),
            });
        }
        Ok(self.rotation.row(d).to_vec())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        write_f64s(&mut w, self.generator.data())?;
        write_f64s(&mut w, &self.mean)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        read_magic(&mut r, MODEL_MAGIC)?;
        let version = read_header_u32(&mut r, "version")?;
        if version != MODEL_VERSION {
            return Err(CedarError::Format {
                field: "version",
                detail: format!("unsupported model version {version}"),
            });
        }
        let d = read_header_u32(&mut r, "dim")? as usize;
        let a = read_f64s(&mut r, d * d, "generator")?;
        let b = read_f64s(&mut r, d, "mean")?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(CedarError::Format {
                field: "payload",
                detail: "trailing bytes after mean vector".into(),
            });
        }
        Self::new(Matrix::new(d, d, a)?, b)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
