//! Embedding and label files, the synthetic sparse-source generator and
//! dataset splitting.
//!
//! Embedding file layout (little-endian):
//!
//! ```text
//! "EMB1" | version u32 | N u64 | D u32 | dtype u32 (0 = f32, 1 = f64) | N*D values, row-major
//! ```
//!
//! Label file layout: `"LBL1" | version u32 | N u64 | N x u32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, CedarError, Result};
use crate::linalg::{expm, Matrix};
use crate::model::CedarModel;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"EMB1";
pub const LABEL_MAGIC: &[u8; 4] = b"LBL1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> u32 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(CedarError::Format {
                field: "dtype",
                detail: format!("unknown dtype tag {other}"),
            }),
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

fn truncated(field: &'static str) -> impl Fn(std::io::Error) -> CedarError {
    move |e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            CedarError::Format {
                field,
                detail: "file truncated".into(),
            }
        } else {
            CedarError::Io(e)
        }
    }
}

pub(crate) fn read_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(truncated("magic"))?;
    if &buf != magic {
        return Err(CedarError::Format {
            field: "magic",
            detail: format!(
                "expected {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&buf)
            ),
        });
    }
    Ok(())
}

pub(crate) fn read_header_u32(r: &mut impl Read, field: &'static str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(truncated(field))?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_header_u64(r: &mut impl Read, field: &'static str) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(truncated(field))?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn read_f64s(r: &mut impl Read, n: usize, field: &'static str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(truncated(field))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub(crate) fn write_f64s(w: &mut impl Write, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn check_version(version: u32) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(CedarError::Format {
            field: "version",
            detail: format!("unsupported version {version}"),
        });
    }
    Ok(())
}

fn ensure_eof(r: &mut impl Read) -> Result<()> {
    let mut one = [0u8; 1];
    if r.read(&mut one)? != 0 {
        return Err(CedarError::Format {
            field: "payload",
            detail: "trailing bytes after payload".into(),
        });
    }
    Ok(())
}

pub fn write_embeddings(z: &Matrix, dtype: DType, mut w: impl Write) -> Result<()> {
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(z.rows() as u64).to_le_bytes())?;
    w.write_all(&(z.cols() as u32).to_le_bytes())?;
    w.write_all(&dtype.tag().to_le_bytes())?;
    match dtype {
        DType::F64 => write_f64s(&mut w, z.data())?,
        DType::F32 => {
            for v in z.data() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Reads an embedding matrix, widening `f32` payloads to `f64`.
///
/// `available` is the number of bytes left in the source, when known; it lets
/// a short file be rejected from the header alone.
pub fn read_embeddings(mut r: impl Read, available: Option<u64>) -> Result<Matrix> {
    read_magic(&mut r, EMBEDDING_MAGIC)?;
    check_version(read_header_u32(&mut r, "version")?)?;
    let n = read_header_u64(&mut r, "rows")?;
    let d = read_header_u32(&mut r, "dim")? as u64;
    let dtype = DType::from_tag(read_header_u32(&mut r, "dtype")?)?;
    let payload = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(dtype.size() as u64))
        .ok_or_else(|| CedarError::Format {
            field: "rows",
            detail: format!("{n} x {d} overflows"),
        })?;
    if let Some(avail) = available {
        let needed = 24 + payload;
        if avail != needed {
            return Err(CedarError::Format {
                field: "payload",
                detail: format!("header promises {needed} bytes, file has {avail}"),
            });
        }
    }
    let (n, d) = (n as usize, d as usize);
    let data = match dtype {
        DType::F64 => read_f64s(&mut r, n * d, "payload")?,
        DType::F32 => {
            let mut bytes = vec![0u8; n * d * 4];
            r.read_exact(&mut bytes).map_err(truncated("payload"))?;
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
                .collect()
        }
    };
    ensure_eof(&mut r)?;
    Matrix::new(n, d, data)
}

pub fn save_embeddings(z: &Matrix, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_embeddings(z, dtype, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Matrix> {
    let f = File::open(path)?;
    let len = f.metadata()?.len();
    read_embeddings(BufReader::new(f), Some(len))
}

pub fn write_labels(labels: &[u32], mut w: impl Write) -> Result<()> {
    w.write_all(LABEL_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(labels.len() as u64).to_le_bytes())?;
    for l in labels {
        w.write_all(&l.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_labels(mut r: impl Read, available: Option<u64>) -> Result<Vec<u32>> {
    read_magic(&mut r, LABEL_MAGIC)?;
    check_version(read_header_u32(&mut r, "version")?)?;
    let n = read_header_u64(&mut r, "rows")?;
    if let Some(avail) = available {
        if Some(avail) != n.checked_mul(4).and_then(|p| p.checked_add(16)) {
            return Err(CedarError::Format {
                field: "payload",
                detail: format!("header promises {n} labels, file has {avail} bytes"),
            });
        }
    }
    let mut bytes = vec![0u8; n as usize * 4];
    r.read_exact(&mut bytes).map_err(truncated("payload"))?;
    ensure_eof(&mut r)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect())
}

pub fn save_labels(labels: &[u32], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_labels(labels, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let f = File::open(path)?;
    let len = f.metadata()?.len();
    read_labels(BufReader::new(f), Some(len))
}

/// Reads one concept name per line, ignoring a trailing empty line.
pub fn load_names(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Parameters of the sparse-sources-in-a-rotated-basis generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub n: usize,
    pub k_true: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Magnitude range of nonzero source coefficients; signs are random.
    pub value_range: (f64, f64),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            n: 5000,
            k_true: 3,
            noise_sigma: 0.01,
            seed: 0,
            value_range: (0.5, 1.5),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k_true < 1 || self.k_true > self.dim {
            return Err(CedarError::Argument(format!(
                "k_true must lie in [1, {}], got {}",
                self.dim, self.k_true
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(CedarError::Argument(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        let (lo, hi) = self.value_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(CedarError::Argument(format!(
                "value_range must satisfy 0 < lo <= hi, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

/// Everything the generator drew, kept for oracle checks.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    /// Skew matrix `G` with `Q = expm(G)`.
    pub skew: Matrix,
    pub q: Matrix,
    pub b0: Vec<f64>,
    /// Dense `N x D` source codes `s` with `z = Q^T s + b0 + noise`.
    pub sources: Matrix,
    /// Index of the largest-magnitude source per row.
    pub labels: Vec<u32>,
}

impl GroundTruth {
    /// The model that inverts the generator exactly: `A = G / 2`, `b = b0`.
    pub fn true_model(&self) -> Result<CedarModel> {
        CedarModel::new(self.skew.scale(0.5), self.b0.clone())
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Matrix, GroundTruth)> {
    spec.validate()?;
    let d = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut skew = Matrix::zeros(d, d);
    for i in 0..d {
        for j in i + 1..d {
            let g = normal.sample(&mut rng);
            skew.set(i, j, g);
            skew.set(j, i, -g);
        }
    }
    let q = expm(&skew)?;
    let b0: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();

    let (lo, hi) = spec.value_range;
    let mut sources = Matrix::zeros(spec.n, d);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let row = sources.row_mut(i);
        for j in index::sample(&mut rng, d, spec.k_true) {
            let mag = if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            };
            row[j] = if rng.random::<bool>() { mag } else { -mag };
        }
        let dominant = (0..d)
            .max_by(|&a, &b| row[a].abs().total_cmp(&row[b].abs()).then(b.cmp(&a)))
            .expect("dim >= 1");
        labels.push(dominant as u32);
    }

    // z = Q^T s + b0, row-wise: Z = S Q + 1 b0^T
    let mut z = sources.matmul(&q)?;
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("sigma > 0");
    for i in 0..spec.n {
        for (v, b) in z.row_mut(i).iter_mut().zip(&b0) {
            *v += b;
            if spec.noise_sigma > 0.0 {
                *v += noise.sample(&mut rng);
            }
        }
    }
    Ok((
        z,
        GroundTruth {
            skew,
            q,
            b0,
            sources,
            labels,
        },
    ))
}

/// Embedding rows with optional integer class labels.
#[derive(Clone, Debug)]
pub struct EmbeddingDataset {
    pub embeddings: Matrix,
    pub labels: Option<Vec<u32>>,
}

impl EmbeddingDataset {
    pub fn new(embeddings: Matrix, labels: Option<Vec<u32>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != embeddings.rows() {
                return Err(dim_err(format!(
                    "{} labels for {} rows",
                    l.len(),
                    embeddings.rows()
                )));
            }
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            embeddings: self.embeddings.select_rows(idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Seeded shuffle, then the first `round(fraction * N)` rows go to the
    /// training side.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(CedarError::Argument(format!(
                "split fraction must lie in (0, 1), got {fraction}"
            )));
        }
        let n = self.len();
        let n_train = (fraction * n as f64).round() as usize;
        if n_train == 0 || n_train == n {
            return Err(CedarError::Argument(format!(
                "fraction {fraction} of {n} rows leaves one side empty"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok((
            self.select(&order[..n_train]),
            self.select(&order[n_train..]),
        ))
    }
}
