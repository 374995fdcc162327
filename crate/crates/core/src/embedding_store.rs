//! Precomputed embedding matrices and the MMEB1 file format.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic        6 bytes  "MMEB1\0"
//! n_rows       u32
//! dim          u32
//! normalized   u8       0 or 1
//! id_table_len u32      byte length of the id table
//! id table     n_rows × (u16 len + UTF-8 bytes)
//! payload      n_rows × dim × f32
//! ```
//!
//! The order of IDs in the file defines the row indices.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 6] = b"MMEB1\0";
/// Fixed-size prefix before the id table.
pub const HEADER_LEN: usize = 6 + 4 + 4 + 1 + 4;
/// Allowed deviation of a row norm from 1.0 when the normalized flag is set.
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic at byte 0: expected \"MMEB1\\0\"")]
    BadMagic,
    #[error("truncated input at byte {offset}: need {needed} more bytes, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("invalid normalized flag {value} at byte {offset}")]
    BadFlag { offset: usize, value: u8 },
    #[error("id table length mismatch: header declares {declared} bytes, ids occupy {actual}")]
    IdTableMismatch { declared: usize, actual: usize },
    #[error("id at byte {offset} is not valid UTF-8")]
    InvalidUtf8 { offset: usize },
    #[error("{extra} trailing bytes after payload at byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("duplicate id {id:?}")]
    DuplicateId { id: String },
    #[error("row {id:?} has norm {norm}, expected 1.0 ± {NORM_TOLERANCE}")]
    NormViolation { id: String, norm: f64 },
    #[error("row {id:?} is all zeros")]
    ZeroRow { id: String },
    #[error("row {id:?} contains a non-finite value")]
    NonFinite { id: String },
    #[error("matrix has no rows")]
    Empty,
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("data length {len} does not equal {n_rows} rows × {dim} dims")]
    Shape { len: usize, n_rows: usize, dim: usize },
    #[error("id {id:?} is {len} bytes, longer than the u16 length prefix allows")]
    IdTooLong { id: String, len: usize },
    #[error("unknown id {id:?}")]
    UnknownId { id: String },
    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// Dense row-major `f32` matrix whose rows are keyed by record ID.
///
/// Immutable once constructed; every constructor validates the invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    normalized: bool,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>, normalized: bool) -> Result<Self> {
        if dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        if ids.is_empty() {
            return Err(StoreError::Empty);
        }
        if data.len() != ids.len() * dim {
            return Err(StoreError::Shape {
                len: data.len(),
                n_rows: ids.len(),
                dim,
            });
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), row).is_some() {
                return Err(StoreError::DuplicateId { id: id.clone() });
            }
        }
        let m = Self {
            ids,
            index,
            dim,
            normalized,
            data,
        };
        for (row, id) in m.ids.iter().enumerate() {
            let v = m.row(row);
            if v.iter().any(|x| !x.is_finite()) {
                return Err(StoreError::NonFinite { id: id.clone() });
            }
            if normalized {
                let norm = l2_norm(v);
                if norm == 0.0 {
                    return Err(StoreError::ZeroRow { id: id.clone() });
                }
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(StoreError::NormViolation { id: id.clone(), norm });
                }
            }
        }
        Ok(m)
    }

    pub fn n_rows(&self) -> usize {
        self.ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Borrowed row for `id`.
    pub fn lookup(&self, id: &str) -> Result<&[f32]> {
        self.row_index(id)
            .map(|i| self.row(i))
            .ok_or_else(|| StoreError::UnknownId { id: id.to_owned() })
    }

    /// Returns a copy with every row scaled to unit L2 norm.
    ///
    /// Norms are accumulated in `f64`.
    pub fn normalize(&self) -> Result<Self> {
        let mut data = Vec::with_capacity(self.data.len());
        for (row, id) in self.ids.iter().enumerate() {
            let v = self.row(row);
            let norm = l2_norm(v);
            if norm == 0.0 {
                return Err(StoreError::ZeroRow { id: id.clone() });
            }
            data.extend(v.iter().map(|&x| (f64::from(x) / norm) as f32));
        }
        Self::new(self.ids.clone(), self.dim, data, true)
    }

    /// Serialized MMEB1 bytes.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let id_table_len: usize = self.ids.iter().map(|id| 2 + id.len()).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + id_table_len + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.n_rows() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.push(u8::from(self.normalized));
        out.extend_from_slice(&(id_table_len as u32).to_le_bytes());
        for id in &self.ids {
            let len = u16::try_from(id.len()).map_err(|_| StoreError::IdTooLong {
                id: id.clone(),
                len: id.len(),
            })?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    /// Parses and validates MMEB1 bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(MAGIC.len()).map_err(|_| StoreError::BadMagic)? != MAGIC {
            return Err(StoreError::BadMagic);
        }
        let n_rows = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let flag_offset = cur.pos;
        let normalized = match cur.u8()? {
            0 => false,
            1 => true,
            value => {
                return Err(StoreError::BadFlag {
                    offset: flag_offset,
                    value,
                })
            }
        };
        let id_table_len = cur.u32()? as usize;
        if n_rows == 0 {
            return Err(StoreError::Empty);
        }
        if dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        let table_start = cur.pos;
        let mut ids = Vec::with_capacity(n_rows.min(1 << 20));
        for _ in 0..n_rows {
            let len = cur.u16()? as usize;
            let offset = cur.pos;
            let raw = cur.take(len)?;
            let id = std::str::from_utf8(raw).map_err(|_| StoreError::InvalidUtf8 { offset })?;
            ids.push(id.to_owned());
        }
        let actual = cur.pos - table_start;
        if actual != id_table_len {
            return Err(StoreError::IdTableMismatch {
                declared: id_table_len,
                actual,
            });
        }
        let payload_len = n_rows
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or(StoreError::Truncated {
                offset: cur.pos,
                needed: usize::MAX,
                available: cur.remaining(),
            })?;
        let payload = cur.take(payload_len)?;
        if cur.remaining() != 0 {
            return Err(StoreError::TrailingBytes {
                offset: cur.pos,
                extra: cur.remaining(),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(ids, dim, data, normalized)
    }
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(StoreError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| StoreError::Io {
        path: path.to_owned(),
        source,
    })?;
    EmbeddingMatrix::decode(&bytes)
}

pub fn write_matrix(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, m.encode()?).map_err(|source| StoreError::Io {
        path: path.to_owned(),
        source,
    })
}

/// JSON manifest naming the matrix files of one experiment.
///
/// Relative paths are resolved against the manifest's directory. The
/// optional query matrices let queries come from a separate encoder run;
/// they default to the support matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreManifest {
    pub visual_path: PathBuf,
    pub textual_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blank_image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_visual_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_textual_path: Option<PathBuf>,
}

impl StoreManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| StoreError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut manifest: Self = serde_json::from_str(&text).map_err(|e| StoreError::Manifest {
            path: path.to_owned(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut manifest.visual_path);
        resolve(&mut manifest.textual_path);
        if let Some(p) = manifest.query_visual_path.as_mut() {
            resolve(p);
        }
        if let Some(p) = manifest.query_textual_path.as_mut() {
            resolve(p);
        }
        Ok(manifest)
    }
}

/// Loaded, normalized matrices for one experiment.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    pub visual: std::sync::Arc<EmbeddingMatrix>,
    pub textual: std::sync::Arc<EmbeddingMatrix>,
    pub query_visual: std::sync::Arc<EmbeddingMatrix>,
    pub query_textual: std::sync::Arc<EmbeddingMatrix>,
    pub blank_image_id: Option<String>,
}

impl EmbeddingStore {
    /// Loads every matrix the manifest names and normalizes rows at ingest.
    pub fn open(manifest: &StoreManifest) -> Result<Self> {
        use std::sync::Arc;
        let load = |p: &Path| -> Result<Arc<EmbeddingMatrix>> {
            let m = load_matrix(p)?;
            Ok(Arc::new(if m.is_normalized() { m } else { m.normalize()? }))
        };
        let visual = load(&manifest.visual_path)?;
        let textual = load(&manifest.textual_path)?;
        let query_visual = match &manifest.query_visual_path {
            Some(p) => load(p)?,
            None => Arc::clone(&visual),
        };
        let query_textual = match &manifest.query_textual_path {
            Some(p) => load(p)?,
            None => Arc::clone(&textual),
        };
        if let Some(blank) = &manifest.blank_image_id {
            if !visual.contains(blank) {
                return Err(StoreError::UnknownId { id: blank.clone() });
            }
        }
        Ok(Self {
            visual,
            textual,
            query_visual,
            query_textual,
            blank_image_id: manifest.blank_image_id.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn identity_fixture_loads() {
        let m = EmbeddingMatrix::new(ids(&["a", "b"]), 3, vec![1., 0., 0., 0., 1., 0.], true).unwrap();
        let back = EmbeddingMatrix::decode(&m.encode().unwrap()).unwrap();
        assert_eq!(back.n_rows(), 2);
        assert_eq!(back.dim(), 3);
        assert!(back.is_normalized());
    }

    #[test]
    fn short_payload_is_truncation() {
        let m = EmbeddingMatrix::new(ids(&["a", "b", "c", "d", "e"]), 2, vec![1.0; 10], false).unwrap();
        let bytes = m.encode().unwrap();
        // Drop the last row's 8 payload bytes: header says 5 rows, payload holds 4.
        let cut = &bytes[..bytes.len() - 8];
        match EmbeddingMatrix::decode(cut) {
            Err(StoreError::Truncated { needed, available, .. }) => {
                assert_eq!(needed, 40);
                assert_eq!(available, 32);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn one_by_one_length() {
        let m = EmbeddingMatrix::new(ids(&["r0"]), 1, vec![1.0], true).unwrap();
        let bytes = m.encode().unwrap();
        // 19-byte fixed header + (2-byte prefix + 2-byte id) + one f32.
        assert_eq!(HEADER_LEN, 19);
        assert_eq!(bytes.len(), 19 + 4 + 4);
        assert_eq!(&bytes[..6], b"MMEB1\0");
        assert_eq!(&bytes[15..19], &4u32.to_le_bytes());
    }

    #[test]
    fn raw_rows_round_trip_unchanged() {
        let m = EmbeddingMatrix::new(ids(&["x"]), 2, vec![3.0, 4.0], false).unwrap();
        let back = EmbeddingMatrix::decode(&m.encode().unwrap()).unwrap();
        assert_eq!(back.lookup("x").unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(EmbeddingMatrix::new(vec![], 2, vec![], false), Err(StoreError::Empty)));
        assert!(matches!(
            EmbeddingMatrix::new(ids(&["a", "a"]), 1, vec![1.0, 1.0], false),
            Err(StoreError::DuplicateId { id }) if id == "a"
        ));
        assert!(matches!(
            EmbeddingMatrix::new(ids(&["a"]), 2, vec![3.0, 4.0], true),
            Err(StoreError::NormViolation { id, .. }) if id == "a"
        ));
        assert!(matches!(
            EmbeddingMatrix::new(ids(&["z"]), 2, vec![0.0, 0.0], true),
            Err(StoreError::ZeroRow { .. })
        ));
        assert!(matches!(EmbeddingMatrix::decode(b"MMEB2\0rest"), Err(StoreError::BadMagic)));
        assert!(matches!(EmbeddingMatrix::decode(b"MM"), Err(StoreError::BadMagic)));
    }

    #[test]
    fn decode_reports_duplicate_ids() {
        let mut bytes = EmbeddingMatrix::new(ids(&["ab", "cd"]), 1, vec![1.0, 2.0], false)
            .unwrap()
            .encode()
            .unwrap();
        // Overwrite the second id with the first.
        bytes[HEADER_LEN + 6] = b'a';
        bytes[HEADER_LEN + 7] = b'b';
        assert!(matches!(EmbeddingMatrix::decode(&bytes), Err(StoreError::DuplicateId { id }) if id == "ab"));
    }

    #[test]
    fn normalize_rows() {
        let m = EmbeddingMatrix::new(ids(&["a", "b"]), 2, vec![3.0, 4.0, 1.0, 0.0], false).unwrap();
        let n = m.normalize().unwrap();
        assert!(n.is_normalized());
        assert!((n.row(0)[0] - 0.6).abs() < 1e-7);
        assert!((n.row(0)[1] - 0.8).abs() < 1e-7);
        assert_eq!(n.row(1), &[1.0, 0.0]);
        assert_eq!(n.ids(), m.ids());

        let zero = EmbeddingMatrix::new(ids(&["ok", "bad"]), 2, vec![1.0, 0.0, 0.0, 0.0], false).unwrap();
        assert!(matches!(zero.normalize(), Err(StoreError::ZeroRow { id }) if id == "bad"));
    }

    #[test]
    fn lookup_rows() {
        let m = EmbeddingMatrix::new(ids(&["a", "b"]), 2, vec![3.0, 4.0, 0.0, 2.0], false).unwrap();
        assert_eq!(m.lookup("a").unwrap(), m.row(0));
        assert!(matches!(m.lookup("nope"), Err(StoreError::UnknownId { .. })));
        let n = m.normalize().unwrap();
        let r = n.lookup("b").unwrap();
        assert!((l2_norm(r) - 1.0).abs() < 1e-7);
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let m = EmbeddingMatrix::new(ids(&["a", "blank"]), 2, vec![1.0, 0.0, 0.0, 1.0], true).unwrap();
        write_matrix(&m, dir.path().join("v.mmeb")).unwrap();
        write_matrix(&m, dir.path().join("t.mmeb")).unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(
            &path,
            r#"{"visual_path":"v.mmeb","textual_path":"t.mmeb","blank_image_id":"blank"}"#,
        )
        .unwrap();
        let manifest = StoreManifest::load(&path).unwrap();
        let store = EmbeddingStore::open(&manifest).unwrap();
        assert_eq!(store.visual.n_rows(), 2);
        assert_eq!(store.blank_image_id.as_deref(), Some("blank"));

        fs::write(&path, r#"{"visual_path":"v.mmeb","textual_path":"t.mmeb","blank_image_id":"gone"}"#).unwrap();
        let manifest = StoreManifest::load(&path).unwrap();
        assert!(matches!(EmbeddingStore::open(&manifest), Err(StoreError::UnknownId { .. })));
    }
}
