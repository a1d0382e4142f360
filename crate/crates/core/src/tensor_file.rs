//! Versioned container of named tensors plus string metadata.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes   "VPTF"
//! format     u32       container format version (currently 1)
//! kind       str       payload kind, e.g. "encoder" or "prompt-state"
//! version    u32       payload schema version
//! n_meta     u32       followed by n_meta × (key: str, value: str)
//! n_tensors  u32       followed by n_tensors × (name: str, rows: u32, cols: u32, rows·cols × f64)
//! checksum   u64       FNV-1a over every preceding byte
//! ```
//!
//! `str` is a `u32` byte length followed by UTF-8 bytes. Values are stored as
//! raw IEEE-754 bits, so a save/load round trip is exact.

use std::path::Path;

use thiserror::Error;

use crate::autodiff::Tensor;

const MAGIC: &[u8; 4] = b"VPTF";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("{kind} version mismatch: expected {expected}, found {found}")]
    VersionMismatch {
        kind: String,
        expected: u32,
        found: u32,
    },
    #[error("file holds `{found}`, expected `{expected}`")]
    KindMismatch { expected: String, found: String },
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("field `{field}`: {message}")]
    BadField { field: String, message: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub kind: String,
    pub version: u32,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn new(kind: impl Into<String>, version: u32) -> Self {
        Self {
            kind: kind.into(),
            version,
            meta: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.push((key.into(), value.into()));
        self
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn meta(&self, key: &str) -> Result<&str, FormatError> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| FormatError::MissingField(key.to_string()))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, FormatError> {
        let raw = self.meta(key)?;
        raw.parse().map_err(|_| FormatError::BadField {
            field: key.to_string(),
            message: format!("cannot parse `{raw}`"),
        })
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, FormatError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| FormatError::MissingField(name.to_string()))
    }

    /// Looks up `name` and checks its shape.
    pub fn tensor_shaped(&self, name: &str, rows: usize, cols: usize) -> Result<Tensor, FormatError> {
        let t = self.tensor(name)?;
        if t.shape() != [rows, cols] {
            return Err(FormatError::BadField {
                field: name.to_string(),
                message: format!("expected shape {rows}x{cols}, found {:?}", t.shape()),
            });
        }
        if !t.is_finite() {
            return Err(FormatError::BadField {
                field: name.to_string(),
                message: "non-finite entries".into(),
            });
        }
        Ok(t.clone())
    }

    /// Checks kind and payload version.
    pub fn expect(&self, kind: &str, version: u32) -> Result<(), FormatError> {
        if self.kind != kind {
            return Err(FormatError::KindMismatch {
                expected: kind.to_string(),
                found: self.kind.clone(),
            });
        }
        if self.version != version {
            return Err(FormatError::VersionMismatch {
                kind: kind.to_string(),
                expected: version,
                found: self.version,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < 12 {
            return Err(FormatError::Corrupt("file too short".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(FormatError::Corrupt("bad magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8-byte tail"));
        let mut r = Reader { buf: body, pos: 4 };
        let format = r.u32()?;
        if format != FORMAT_VERSION {
            return Err(FormatError::VersionMismatch {
                kind: "container".into(),
                expected: FORMAT_VERSION,
                found: format,
            });
        }
        if fnv1a(body) != stored {
            return Err(FormatError::Corrupt("checksum mismatch (truncated or modified)".into()));
        }
        let kind = r.string()?;
        let version = r.u32()?;
        let n_meta = r.u32()? as usize;
        let mut meta = Vec::with_capacity(n_meta.min(1024));
        for _ in 0..n_meta {
            meta.push((r.string()?, r.string()?));
        }
        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors.min(1024));
        for _ in 0..n_tensors {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let count = rows
                .checked_mul(cols)
                .ok_or_else(|| FormatError::Corrupt(format!("tensor `{name}` shape overflow")))?;
            let mut data = Vec::with_capacity(count.min(1 << 20));
            for _ in 0..count {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
            }
            tensors.push((name, Tensor::new(rows, cols, data)));
        }
        if r.pos != body.len() {
            return Err(FormatError::Corrupt("trailing bytes".into()));
        }
        Ok(Self {
            kind,
            version,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> crate::Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| crate::Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> crate::Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| FormatError::Corrupt("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String, FormatError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| FormatError::Corrupt("invalid utf-8 string".into()))
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
