//! Naming learned axes after the closest entry of a concept vocabulary.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, CedarError, Result};
use crate::io::{load_embeddings, load_names};
use crate::linalg::{dot, norm2, Matrix};
use crate::model::CedarModel;

/// Concept names with one embedding row each.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptVocabulary {
    names: Vec<String>,
    embeddings: Matrix,
}

impl ConceptVocabulary {
    pub fn new(names: Vec<String>, embeddings: Matrix) -> Result<Self> {
        if names.len() != embeddings.rows() {
            return Err(dim_err(format!(
                "{} names for {} concept rows",
                names.len(),
                embeddings.rows()
            )));
        }
        if names.is_empty() {
            return Err(CedarError::Data("empty vocabulary".into()));
        }
        if let Some(j) = embeddings.row_iter().position(|r| norm2(r) == 0.0) {
            return Err(CedarError::Data(format!(
                "concept {j} ({}) has a zero embedding",
                names[j]
            )));
        }
        Ok(Self { names, embeddings })
    }

    /// Embedding file plus a names file with one name per line.
    pub fn load(embeddings: impl AsRef<Path>, names: impl AsRef<Path>) -> Result<Self> {
        Self::new(load_names(names)?, load_embeddings(embeddings)?)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisMatch {
    pub axis: usize,
    pub concept: usize,
    pub name: String,
    pub cosine: f64,
}

/// Best concept for every axis, indexed by axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisConceptMap {
    pub axes: Vec<AxisMatch>,
}

impl AxisConceptMap {
    pub fn get(&self, axis: usize) -> Option<&AxisMatch> {
        self.axes.get(axis)
    }
}

/// Argmax of cosine between each axis `c_d` (row `d` of `U`) and every
/// concept; ties go to the lower concept index.
pub fn match_axes(model: &CedarModel, vocab: &ConceptVocabulary) -> Result<AxisConceptMap> {
    if vocab.dim() != model.dim() {
        return Err(dim_err(format!(
            "vocabulary of width {} for a {}-dim model",
            vocab.dim(),
            model.dim()
        )));
    }
    let norms: Vec<f64> = vocab.embeddings.row_iter().map(norm2).collect();
    let u = model.rotation();
    let axes = (0..model.dim())
        .map(|d| {
            let c = u.row(d);
            let cn = norm2(c);
            let mut best = (0, f64::NEG_INFINITY);
            for (j, t) in vocab.embeddings.row_iter().enumerate() {
                let cos = (dot(c, t) / (cn * norms[j])).clamp(-1.0, 1.0);
                if cos > best.1 {
                    best = (j, cos);
                }
            }
            AxisMatch {
                axis: d,
                concept: best.0,
                name: vocab.names[best.0].clone(),
                cosine: best.1,
            }
        })
        .collect();
    Ok(AxisConceptMap { axes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationEntry {
    pub axis: usize,
    pub concept: String,
    pub coefficient: f64,
    pub cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub sample: usize,
    pub entries: Vec<ExplanationEntry>,
}

/// Active axes of the top-`k` code of `z`, labelled with their concepts and
/// ordered by `|coefficient|` (ties by axis).
pub fn explain(
    model: &CedarModel,
    map: &AxisConceptMap,
    z: &[f64],
    k: usize,
    sample: usize,
) -> Result<Explanation> {
    if map.axes.len() != model.dim() {
        return Err(dim_err(format!(
            "map over {} axes for a {}-dim model",
            map.axes.len(),
            model.dim()
        )));
    }
    let code = model.encode(z, k)?;
    let mut entries: Vec<ExplanationEntry> = code
        .iter()
        .map(|(axis, coefficient)| {
            let m = &map.axes[axis];
            ExplanationEntry {
                axis,
                concept: m.name.clone(),
                coefficient,
                cosine: m.cosine,
            }
        })
        .collect();
    entries.sort_by(|a, b| {
        b.coefficient
            .abs()
            .total_cmp(&a.coefficient.abs())
            .then(a.axis.cmp(&b.axis))
    });
    Ok(Explanation { sample, entries })
}

/// The `count` rows with the largest signed coordinate `axis` of `U(z - b)`,
/// descending, ties by row.
pub fn top_activating(
    model: &CedarModel,
    z: &Matrix,
    axis: usize,
    count: usize,
) -> Result<Vec<(usize, f64)>> {
    if axis >= model.dim() {
        return Err(CedarError::Index {
            index: axis,
            dim: model.dim(),
        });
    }
    if count == 0 {
        return Err(CedarError::Argument("count must be >= 1".into()));
    }
    let c = model.semantic_axis(axis)?;
    if z.cols() != model.dim() {
        return Err(dim_err(format!(
            "data of width {} for a {}-dim model",
            z.cols(),
            model.dim()
        )));
    }
    let b = model.mean();
    let mut scored: Vec<(usize, f64)> = z
        .row_iter()
        .enumerate()
        .map(|(i, r)| {
            (
                i,
                r.iter().zip(b).zip(&c).map(|((x, m), u)| (x - m) * u).sum(),
            )
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(count);
    Ok(scored)
}
