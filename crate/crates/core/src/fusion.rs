//! Entity representations, entity-aware cross-modal attention, prototype
//! similarity scoring and the margin ranking loss.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::EmbeddedSample;
use crate::numerics::{Graph, NumericsError, Tensor, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FusionError {
    #[error("sample `{0}` has no E2 marker, required for MRE")]
    MissingMarker(String),
    #[error("sample `{sample}`: marker {marker} = {index} out of range for |T| = {tokens}")]
    MarkerOutOfRange {
        sample: String,
        marker: &'static str,
        index: usize,
        tokens: usize,
    },
    #[error("duplicate category name `{0}`")]
    DuplicateName(String),
    #[error("{names} names for {rows} prototype rows")]
    RowCount { names: usize, rows: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    /// Multimodal entity typing.
    #[default]
    #[serde(rename = "MET")]
    Met,
    /// Multimodal relation extraction.
    #[serde(rename = "MRE")]
    Mre,
}

impl TaskKind {
    /// Width of the entity representation for embedding width `d`.
    pub fn entity_width(self, d: usize) -> usize {
        match self {
            TaskKind::Met => 2 * d,
            TaskKind::Mre => 3 * d,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Met => "MET",
            TaskKind::Mre => "MRE",
        })
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "MET" => Ok(TaskKind::Met),
            "MRE" => Ok(TaskKind::Mre),
            other => Err(format!("unknown task `{other}` (expected MET or MRE)")),
        }
    }
}

/// Category names with one prototype embedding row each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    names: Vec<String>,
    embeddings: Tensor,
}

impl PrototypeSet {
    pub fn new(names: Vec<String>, embeddings: Tensor) -> Result<Self, FusionError> {
        let embeddings = embeddings.as_matrix();
        if names.len() != embeddings.rows() {
            return Err(FusionError::RowCount {
                names: names.len(),
                rows: embeddings.rows(),
            });
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(FusionError::DuplicateName(n.clone()));
            }
        }
        Ok(Self { names, embeddings })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn width(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.embeddings.row_slice(i)
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> PrototypeSet {
        let w = self.width();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        PrototypeSet {
            names: indices.iter().map(|&i| self.names[i].clone()).collect(),
            embeddings: Tensor::matrix(indices.len(), w, data).expect("subset shape"),
        }
    }
}

fn marker_row<'a>(sample: &'a EmbeddedSample, marker: &'static str, index: usize) -> Result<&'a [f64], FusionError> {
    if index >= sample.token_count() {
        return Err(FusionError::MarkerOutOfRange {
            sample: sample.sample_id.clone(),
            marker,
            index,
            tokens: sample.token_count(),
        });
    }
    Ok(sample.token_row(index))
}

pub(crate) fn e2_row(sample: &EmbeddedSample) -> Result<&[f64], FusionError> {
    let e2 = sample
        .marker_e2
        .ok_or_else(|| FusionError::MissingMarker(sample.sample_id.clone()))?;
    marker_row(sample, "e2", e2)
}

pub(crate) fn e1_row(sample: &EmbeddedSample) -> Result<&[f64], FusionError> {
    marker_row(sample, "e1", sample.marker_e1)
}

/// `[t_CLS ; t_E1]` for MET, `[t_CLS ; t_E1 ; t_E2]` for MRE, as a `1 x |e|` row.
pub fn entity_representation(sample: &EmbeddedSample, task: TaskKind) -> Result<Tensor, FusionError> {
    let mut e = marker_row(sample, "cls", sample.marker_cls)?.to_vec();
    e.extend_from_slice(e1_row(sample)?);
    if task == TaskKind::Mre {
        e.extend_from_slice(e2_row(sample)?);
    }
    Ok(Tensor::row(e))
}

/// Attention pooling of the fused sequence `u` (`n x h`) guided by the
/// entity row `e` (`1 x |e|`). `w_a` is `1 x (h + |e|)`, `b_a` is `1 x 1`.
///
/// Returns the pooled row `1 x h` and the weights `1 x n`.
pub fn cross_modal_attention(g: &mut Graph, u: Var, e: Var, w_a: Var, b_a: Var) -> Result<(Var, Var), NumericsError> {
    let n = g.value(u).rows();
    let e_rep = g.repeat_rows(e, n)?;
    let joint = g.concat_cols(&[u, e_rep])?;
    let scores = g.affine(joint, w_a, b_a)?;
    let scores = g.transpose(scores);
    let weights = g.softmax_rows(scores);
    let pooled = g.matmul(weights, u)?;
    Ok((pooled, weights))
}

/// `[u_bar ; e]`.
pub fn sample_feature(g: &mut Graph, pooled: Var, e: Var) -> Result<Var, NumericsError> {
    g.concat_cols(&[pooled, e])
}

/// Weight `out x in` and bias `1 x out` of an affine map.
pub struct Projection {
    pub w: Var,
    pub b: Var,
}

/// Affine projections of both sides to a shared width, then all pairwise
/// dot products: `features (B x F)`, `prototypes (C x d)` to `B x C`.
pub fn similarity_scores(
    g: &mut Graph,
    features: Var,
    prototypes: Var,
    theta_e: &Projection,
    theta_p: &Projection,
) -> Result<Var, NumericsError> {
    let fe = g.affine(features, theta_e.w, theta_e.b)?;
    let fp = g.affine(prototypes, theta_p.w, theta_p.b)?;
    if g.value(fe).cols() != g.value(fp).cols() {
        return Err(NumericsError::ShapeMismatch {
            op: "similarity_scores",
            detail: format!("projected widths {} and {}", g.value(fe).cols(), g.value(fp).cols()),
        });
    }
    g.matmul_t(fe, fp)
}

/// Per-row hinge sums `sum_i max(1 - o_true + o_i, 0)` as a `B x 1` column.
///
/// The sum includes the true label, which always contributes exactly 1,
/// unless `exclude_true` is set.
pub fn ranking_loss(g: &mut Graph, scores: Var, targets: &[usize], exclude_true: bool) -> Result<Var, NumericsError> {
    let (rows, cols) = (g.value(scores).rows(), g.value(scores).cols());
    if cols == 0 || rows == 0 {
        return Err(NumericsError::ShapeMismatch {
            op: "ranking_loss",
            detail: "empty score matrix".into(),
        });
    }
    let positive = g.gather(scores, targets)?;
    let neg_positive = g.neg(positive);
    let shifted = g.add_col(scores, neg_positive)?;
    let margins = g.add_scalar(shifted, 1.0);
    let mut hinge = g.relu(margins);
    if exclude_true {
        let mut mask = Tensor::full(&[rows, cols], 1.0);
        for (i, &t) in targets.iter().enumerate() {
            mask.set(i, t, 0.0);
        }
        let mask = g.constant(mask);
        hinge = g.mul(hinge, mask)?;
    }
    Ok(g.sum_cols(hinge))
}
