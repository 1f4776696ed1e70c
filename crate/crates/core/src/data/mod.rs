//! Embedding bundles: the ingested stand-in for text/vision encoder outputs.
//!
//! A [`Bundle`] holds one [`EmbeddedSample`] per text/image pair (token and
//! patch embedding matrices plus entity-marker positions) and the prototype
//! embedding of every category. Bundles come from the binary HMGB format,
//! a JSON manifest for small fixtures, or the synthetic generator.

mod format;
mod generator;
mod split;

pub use format::{
    decode_bundle, encode_bundle, read_bundle, read_manifest, write_bundle, write_manifest, FORMAT_VERSION, MAGIC,
};
pub use generator::{generate_synthetic_corpus, GeneratorSpec};
pub use split::{gzsl_split, GzslSplit, Part, SplitConfig};

use std::collections::HashSet;

use crate::fusion::{PrototypeSet, TaskKind};
use crate::numerics::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("bad magic bytes: expected \"HMGB\"")]
    BadMagic,
    #[error("unsupported format version {0}")]
    VersionMismatch(u32),
    #[error("truncated file while reading {0}")]
    Truncated(String),
    #[error("inconsistent embedding width: {0}")]
    InconsistentWidth(String),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid `{field}`: {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("split error: {0}")]
    Split(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            DataError::BadMagic => "bad_magic",
            DataError::VersionMismatch(_) => "version_mismatch",
            DataError::Truncated(_) => "truncated",
            DataError::InconsistentWidth(_) => "inconsistent_width",
            DataError::BadHeader(_) => "bad_header",
            DataError::InvalidRecord(_) => "invalid_record",
            DataError::InvalidSpec { .. } => "invalid_spec",
            DataError::Split(_) => "split",
            DataError::Io { .. } => "io",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedSample {
    pub sample_id: String,
    pub label: usize,
    /// `|T| x d` token embeddings.
    pub tokens: Tensor,
    /// `|V| x d` patch embeddings.
    pub patches: Tensor,
    pub marker_cls: usize,
    pub marker_e1: usize,
    pub marker_e2: Option<usize>,
}

impl EmbeddedSample {
    pub fn token_count(&self) -> usize {
        self.tokens.rows()
    }

    pub fn patch_count(&self) -> usize {
        self.patches.rows()
    }

    pub fn token_row(&self, i: usize) -> &[f64] {
        self.tokens.row_slice(i)
    }

    pub fn validate(&self, task: TaskKind, d: usize) -> Result<(), DataError> {
        let id = &self.sample_id;
        let bad = |msg: String| DataError::InvalidRecord(format!("sample `{id}`: {msg}"));
        if self.tokens.shape().len() != 2 || self.patches.shape().len() != 2 {
            return Err(bad("embedding matrices must be rank 2".into()));
        }
        if self.token_count() == 0 {
            return Err(bad("|T| = 0 leaves no room for entity markers".into()));
        }
        if self.patch_count() == 0 {
            return Err(bad("|V| = 0".into()));
        }
        if self.tokens.cols() != d || self.patches.cols() != d {
            return Err(DataError::InconsistentWidth(format!(
                "sample `{id}` has widths {}/{}, bundle d = {d}",
                self.tokens.cols(),
                self.patches.cols()
            )));
        }
        let t = self.token_count();
        for (name, m) in [("cls", Some(self.marker_cls)), ("e1", Some(self.marker_e1)), ("e2", self.marker_e2)] {
            if let Some(m) = m {
                if m >= t {
                    return Err(bad(format!("marker {name} = {m} out of range for |T| = {t}")));
                }
            }
        }
        match (task, self.marker_e2) {
            (TaskKind::Mre, None) => return Err(bad("MRE sample without an E2 marker".into())),
            (TaskKind::Met, Some(_)) => return Err(bad("MET sample carries an E2 marker".into())),
            _ => {}
        }
        if !self.tokens.is_finite() || !self.patches.is_finite() {
            return Err(bad("non-finite embedding values".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub task: TaskKind,
    pub d: usize,
    pub samples: Vec<EmbeddedSample>,
    /// One row per category, indexed by sample label.
    pub prototypes: PrototypeSet,
}

impl Bundle {
    pub fn num_categories(&self) -> usize {
        self.prototypes.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.d == 0 {
            return Err(DataError::InconsistentWidth("d = 0".into()));
        }
        if self.prototypes.width() != self.d {
            return Err(DataError::InconsistentWidth(format!(
                "prototype width {} vs d = {}",
                self.prototypes.width(),
                self.d
            )));
        }
        let mut ids = HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            s.validate(self.task, self.d)?;
            if s.label >= self.num_categories() {
                return Err(DataError::InvalidRecord(format!(
                    "sample `{}` has label {} without a prototype",
                    s.sample_id, s.label
                )));
            }
            if !ids.insert(s.sample_id.as_str()) {
                return Err(DataError::InvalidRecord(format!("duplicate sample id `{}`", s.sample_id)));
            }
        }
        Ok(())
    }

    /// Sample indices grouped by label.
    pub fn indices_by_category(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_categories()];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.label].push(i);
        }
        out
    }
}
