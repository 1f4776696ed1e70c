//! HMGB binary bundle format and the JSON manifest alternative.
//!
//! Binary layout, all integers and floats little-endian:
//!
//! ```text
//! "HMGB"                      4 bytes magic
//! version                     u32 (currently 1)
//! header_len                  u32
//! header                      header_len bytes of JSON:
//!                             {"task","d","categories","num_samples","num_categories"}
//! num_samples x record:
//!   id_len u32, id bytes (UTF-8)
//!   label u32, |T| u32, |V| u32
//!   cls u32, e1 u32, e2 u32   (0xFFFFFFFF = no E2)
//!   |T|*d f32 tokens, |V|*d f32 patches (row-major)
//! num_categories*d f32        prototype matrix
//! ```
//!
//! Values are stored as `f32` and widened to `f64` on read.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Bundle, DataError, EmbeddedSample};
use crate::fusion::{PrototypeSet, TaskKind};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"HMGB";
pub const FORMAT_VERSION: u32 = 1;
const NO_MARKER: u32 = u32::MAX;

#[derive(Serialize, Deserialize)]
struct Header {
    task: TaskKind,
    d: usize,
    categories: Vec<String>,
    num_samples: usize,
    num_categories: usize,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_floats(buf: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32, DataError> {
    u32::try_from(v).map_err(|_| DataError::InvalidRecord(format!("{what} = {v} does not fit in u32")))
}

pub fn encode_bundle(bundle: &Bundle) -> Result<Vec<u8>, DataError> {
    bundle.validate()?;
    let header = Header {
        task: bundle.task,
        d: bundle.d,
        categories: bundle.prototypes.names().to_vec(),
        num_samples: bundle.samples.len(),
        num_categories: bundle.num_categories(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| DataError::BadHeader(e.to_string()))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_u32(&mut buf, to_u32(header.len(), "header length")?);
    buf.extend_from_slice(&header);
    for s in &bundle.samples {
        put_u32(&mut buf, to_u32(s.sample_id.len(), "id length")?);
        buf.extend_from_slice(s.sample_id.as_bytes());
        put_u32(&mut buf, to_u32(s.label, "label")?);
        put_u32(&mut buf, to_u32(s.token_count(), "|T|")?);
        put_u32(&mut buf, to_u32(s.patch_count(), "|V|")?);
        put_u32(&mut buf, to_u32(s.marker_cls, "cls")?);
        put_u32(&mut buf, to_u32(s.marker_e1, "e1")?);
        put_u32(&mut buf, s.marker_e2.map(|m| to_u32(m, "e2")).transpose()?.unwrap_or(NO_MARKER));
        put_floats(&mut buf, &s.tokens);
        put_floats(&mut buf, &s.patches);
    }
    put_floats(&mut buf, bundle.prototypes.embeddings());
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(DataError::Truncated(what.to_string())),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn floats(&mut self, rows: usize, cols: usize, what: &str) -> Result<Tensor, DataError> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| DataError::Truncated(what.to_string()))?;
        let bytes = self.take(n, what)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Tensor::matrix(rows, cols, data).expect("rows*cols floats"))
    }
}

pub fn decode_bundle(bytes: &[u8]) -> Result<Bundle, DataError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| DataError::BadMagic)? != MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(DataError::VersionMismatch(version));
    }
    let header_len = r.u32("header length")? as usize;
    let header: Header =
        serde_json::from_slice(r.take(header_len, "header")?).map_err(|e| DataError::BadHeader(e.to_string()))?;
    if header.categories.len() != header.num_categories {
        return Err(DataError::BadHeader(format!(
            "{} category names for num_categories = {}",
            header.categories.len(),
            header.num_categories
        )));
    }
    let d = header.d;
    if d == 0 {
        return Err(DataError::InconsistentWidth("header declares d = 0".into()));
    }

    let mut samples = Vec::with_capacity(header.num_samples.min(1 << 20));
    for i in 0..header.num_samples {
        let ctx = |f: &str| format!("record {i} {f}");
        let id_len = r.u32(&ctx("id length"))? as usize;
        let sample_id = String::from_utf8(r.take(id_len, &ctx("id"))?.to_vec())
            .map_err(|_| DataError::InvalidRecord(ctx("id is not UTF-8")))?;
        let label = r.u32(&ctx("label"))? as usize;
        let t = r.u32(&ctx("|T|"))? as usize;
        let v = r.u32(&ctx("|V|"))? as usize;
        let cls = r.u32(&ctx("cls"))? as usize;
        let e1 = r.u32(&ctx("e1"))? as usize;
        let e2 = r.u32(&ctx("e2"))?;
        if t == 0 {
            return Err(DataError::InvalidRecord(format!(
                "record {i} (`{sample_id}`) claims |T| = 0; entity markers cannot exist"
            )));
        }
        let tokens = r.floats(t, d, &ctx("tokens"))?;
        let patches = r.floats(v, d, &ctx("patches"))?;
        samples.push(EmbeddedSample {
            sample_id,
            label,
            tokens,
            patches,
            marker_cls: cls,
            marker_e1: e1,
            marker_e2: (e2 != NO_MARKER).then_some(e2 as usize),
        });
    }
    let protos = r.floats(header.num_categories, d, "prototype matrix")?;
    if r.pos != bytes.len() {
        return Err(DataError::InconsistentWidth(format!(
            "{} trailing bytes after the prototype block (width does not match d = {d})",
            bytes.len() - r.pos
        )));
    }
    let prototypes = PrototypeSet::new(header.categories, protos)
        .map_err(|e| DataError::BadHeader(e.to_string()))?;
    let bundle = Bundle {
        task: header.task,
        d,
        samples,
        prototypes,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_bundle(bundle: &Bundle, path: &Path) -> Result<(), DataError> {
    if path.extension().is_some_and(|e| e == "json") {
        return write_manifest(bundle, path);
    }
    let bytes = encode_bundle(bundle)?;
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads an HMGB file, or a JSON manifest when the path ends in `.json`.
pub fn read_bundle(path: &Path) -> Result<Bundle, DataError> {
    if path.extension().is_some_and(|e| e == "json") {
        return read_manifest(path);
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_bundle(&bytes)
}

#[derive(Serialize, Deserialize)]
struct ManifestSample {
    id: String,
    label: usize,
    tokens: Vec<Vec<f64>>,
    patches: Vec<Vec<f64>>,
    cls: usize,
    e1: usize,
    #[serde(default)]
    e2: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    task: TaskKind,
    d: usize,
    categories: Vec<String>,
    prototypes: Vec<Vec<f64>>,
    samples: Vec<ManifestSample>,
}

fn rows_to_tensor(rows: &[Vec<f64>], d: usize, what: &str) -> Result<Tensor, DataError> {
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(DataError::InconsistentWidth(format!("{what}: row of width {} with d = {d}", r.len())));
    }
    let data = rows.iter().flatten().copied().collect();
    Ok(Tensor::matrix(rows.len(), d, data).expect("validated widths"))
}

fn tensor_to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
}

pub fn write_manifest(bundle: &Bundle, path: &Path) -> Result<(), DataError> {
    bundle.validate()?;
    let manifest = Manifest {
        task: bundle.task,
        d: bundle.d,
        categories: bundle.prototypes.names().to_vec(),
        prototypes: tensor_to_rows(bundle.prototypes.embeddings()),
        samples: bundle
            .samples
            .iter()
            .map(|s| ManifestSample {
                id: s.sample_id.clone(),
                label: s.label,
                tokens: tensor_to_rows(&s.tokens),
                patches: tensor_to_rows(&s.patches),
                cls: s.marker_cls,
                e1: s.marker_e1,
                e2: s.marker_e2,
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| DataError::BadHeader(e.to_string()))?;
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Bundle, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| DataError::BadHeader(e.to_string()))?;
    if m.d == 0 {
        return Err(DataError::InconsistentWidth("manifest declares d = 0".into()));
    }
    let mut samples = Vec::with_capacity(m.samples.len());
    for s in m.samples {
        if s.tokens.is_empty() {
            return Err(DataError::InvalidRecord(format!("sample `{}` has |T| = 0", s.id)));
        }
        samples.push(EmbeddedSample {
            tokens: rows_to_tensor(&s.tokens, m.d, &s.id)?,
            patches: rows_to_tensor(&s.patches, m.d, &s.id)?,
            sample_id: s.id,
            label: s.label,
            marker_cls: s.cls,
            marker_e1: s.e1,
            marker_e2: s.e2,
        });
    }
    let protos = rows_to_tensor(&m.prototypes, m.d, "prototypes")?;
    let prototypes = PrototypeSet::new(m.categories, protos).map_err(|e| DataError::BadHeader(e.to_string()))?;
    let bundle = Bundle {
        task: m.task,
        d: m.d,
        samples,
        prototypes,
    };
    bundle.validate()?;
    Ok(bundle)
}
