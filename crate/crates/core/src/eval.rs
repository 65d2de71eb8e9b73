//! Matched-FVU evaluation shared by every sparse coder.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, CedarError, Result};
use crate::linalg::Matrix;
use crate::metrics::{
    active_count, cknna, cosine_mean, ic, probe_eval, threshold_for_fvu, zero_below, MetricsReport,
    ProbeModel,
};
use crate::model::{topk, CedarModel, MODEL_MAGIC};
use crate::sae::{SaeModel, Standardizer, SAE_MAGIC};
use crate::train::DEFAULT_K_TARGET;

/// A trained model viewed as `codes(z)` plus a decoder back to the input space.
#[derive(Clone, Debug)]
pub enum SparseCoder {
    /// Rotated codes with a per-row top-`k` mask.
    Cedar { model: CedarModel, k: usize },
    /// Codes live in standardized space; reconstructions are de-standardized.
    Sae {
        model: SaeModel,
        standardizer: Standardizer,
    },
}

impl SparseCoder {
    /// Reads either model file, dispatching on its magic bytes.
    pub fn load(path: impl AsRef<Path>, cedar_k: usize) -> Result<Self> {
        let path = path.as_ref();
        let mut magic = [0u8; 4];
        std::fs::File::open(path)?
            .read_exact(&mut magic)
            .map_err(|_| CedarError::Format {
                field: "magic",
                detail: "file too short".into(),
            })?;
        if &magic == MODEL_MAGIC {
            Ok(Self::Cedar {
                model: CedarModel::load(path)?,
                k: cedar_k,
            })
        } else if &magic == SAE_MAGIC {
            let (model, standardizer) = SaeModel::load(path)?;
            Ok(Self::Sae {
                model,
                standardizer,
            })
        } else {
            Err(CedarError::Format {
                field: "magic",
                detail: format!("unknown model {magic:?}"),
            })
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::Cedar { .. } => "cedar".into(),
            Self::Sae { model, .. } => format!("{}-sae", model.variant.name()),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::Cedar { model, .. } => model.dim(),
            Self::Sae { model, .. } => model.input_dim(),
        }
    }

    pub fn n_latent(&self) -> usize {
        match self {
            Self::Cedar { model, .. } => model.dim(),
            Self::Sae { model, .. } => model.latent_dim(),
        }
    }

    pub fn codes(&self, z: &Matrix) -> Result<Matrix> {
        if z.cols() != self.input_dim() {
            return Err(dim_err(format!(
                "data of width {} for a {}-dim model",
                z.cols(),
                self.input_dim()
            )));
        }
        match self {
            Self::Cedar { model, k } => {
                let mut y = model.transform_batch(z)?;
                for i in 0..y.rows() {
                    let kept = topk(y.row(i), *k);
                    y.row_mut(i).copy_from_slice(&kept);
                }
                Ok(y)
            }
            Self::Sae {
                model,
                standardizer,
            } => Ok(model.forward(&standardizer.apply(z)?)?.h),
        }
    }

    pub fn decode(&self, h: &Matrix) -> Result<Matrix> {
        match self {
            Self::Cedar { model, .. } => model.decode_dense_batch(h),
            Self::Sae {
                model,
                standardizer,
            } => standardizer.inverse(&model.decode(h)?),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub targets: Vec<f64>,
    pub tol: f64,
    pub cknna_k: usize,
    /// CKNNA runs on the first `cknna_samples` rows; 0 disables it.
    pub cknna_samples: usize,
}

pub const DEFAULT_FVU_TARGETS: [f64; 3] = [0.25, 0.30, 0.35];
pub const DEFAULT_CEDAR_EVAL_K: usize = DEFAULT_K_TARGET;

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            targets: DEFAULT_FVU_TARGETS.to_vec(),
            tol: 0.005,
            cknna_k: 10,
            cknna_samples: 1000,
        }
    }
}

/// One report per target. An unreachable target yields a row with `error`
/// set instead of failing the whole evaluation.
pub fn evaluate(
    coder: &SparseCoder,
    z: &Matrix,
    probe: Option<(&ProbeModel, &[u32])>,
    cfg: &EvalConfig,
) -> Result<Vec<MetricsReport>> {
    let h = coder.codes(z)?;
    let upper = h.max_abs();
    let recon = |t: f64| coder.decode(&zero_below(&h, t));
    let cknna_rows: Vec<usize> = (0..z.rows().min(cfg.cknna_samples)).collect();
    let z_sub = z.select_rows(&cknna_rows);

    let mut out = Vec::with_capacity(cfg.targets.len());
    for &target in &cfg.targets {
        let mut report = MetricsReport {
            model: coder.name(),
            target_fvu: Some(target),
            threshold: 0.0,
            fvu: f64::NAN,
            k_mean: f64::NAN,
            ic_nats: f64::NAN,
            cs_mean: f64::NAN,
            lp_ce: None,
            cknna: None,
            n_latent: coder.n_latent(),
            reached: false,
            error: None,
        };
        let search = match threshold_for_fvu(recon, z, upper, target, cfg.tol) {
            Ok(s) => s,
            Err(e @ (CedarError::Unreachable { .. } | CedarError::Degenerate(_))) => {
                report.error = Some(e.to_string());
                out.push(report);
                continue;
            }
            Err(e) => return Err(e),
        };
        let kept = zero_below(&h, search.threshold);
        let zhat = coder.decode(&kept)?;
        report.threshold = search.threshold;
        report.fvu = search.fvu;
        report.reached = search.reached;
        report.k_mean = active_count(&kept, 0.0);
        report.ic_nats = ic(coder.n_latent(), &kept, 0.0);
        report.cs_mean = cosine_mean(z, &zhat)?;
        if let Some((p, labels)) = probe {
            report.lp_ce = Some(probe_eval(p, &zhat, labels)?);
        }
        if cknna_rows.len() > cfg.cknna_k {
            report.cknna = match cknna(&z_sub, &zhat.select_rows(&cknna_rows), cfg.cknna_k) {
                Ok(v) => Some(v),
                Err(CedarError::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            };
        }
        out.push(report);
    }
    Ok(out)
}
