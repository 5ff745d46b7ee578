//! Binary weight files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  "LSDAWGT\n"
//! version      u32
//! kind         u8       0 = network, 1 = single matrix (delta sidecar)
//! width        u8       native scalar width in bytes (4 or 8)
//! payload_len  u64
//! payload      payload_len bytes
//! checksum     32 bytes SHA-256 of everything above
//! ```
//!
//! Matrices are stored as `rows u64, cols u64`, then `rows * cols` row-major
//! `f64` weights, then `rows` `f64` biases. Values are widened to `f64`, so a
//! round trip is bit-exact for both `f32` and `f64` networks.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{
    layer_alias, layer_name, CategoryPartition, HeadState, ModelError, NetworkParams, OutputHead,
    WeightMatrix,
};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"LSDAWGT\n";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 1 + 1 + 8;
const CHECKSUM_LEN: usize = 32;

const KIND_NETWORK: u8 = 0;
const KIND_MATRIX: u8 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a weight file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("file is truncated")]
    Truncated,
    #[error("checksum mismatch: file is corrupted")]
    Checksum,
    #[error("wrong file kind: expected {expected}, found {found}")]
    Kind { expected: &'static str, found: &'static str },
    #[error("scalar width mismatch: file stores {found}-byte values, caller expects {expected}")]
    ScalarWidth { found: u8, expected: u8 },
    #[error("malformed weight file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn kind_name(kind: u8) -> &'static str {
    match kind {
        KIND_NETWORK => "network",
        KIND_MATRIX => "matrix",
        _ => "unknown",
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn matrix<T: Scalar>(&mut self, m: &WeightMatrix<T>) {
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        for v in m.weights().iter() {
            self.f64(v.as_f64());
        }
        for v in m.bias().iter() {
            self.f64(v.as_f64());
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PersistError> {
        let end = self.pos.checked_add(n).ok_or(PersistError::Truncated)?;
        if end > self.data.len() {
            return Err(PersistError::Malformed("payload ends early".into()));
        }
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, PersistError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, PersistError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, PersistError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, PersistError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String, PersistError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| PersistError::Malformed("invalid utf-8 string".into()))
    }
    fn count(&mut self) -> Result<usize, PersistError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| PersistError::Malformed(format!("count {v} too large")))
    }
    fn matrix<T: Scalar>(&mut self) -> Result<WeightMatrix<T>, PersistError> {
        let rows = self.count()?;
        let cols = self.count()?;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.saturating_add(rows).saturating_mul(8) <= self.data.len() - self.pos)
            .ok_or_else(|| PersistError::Malformed(format!("matrix {rows}x{cols} exceeds payload")))?;
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            weights.push(T::of(self.f64()?));
        }
        let mut bias = Vec::with_capacity(rows);
        for _ in 0..rows {
            bias.push(T::of(self.f64()?));
        }
        let weights = Array2::from_shape_vec((rows, cols), weights).expect("length computed");
        Ok(WeightMatrix::new(weights, Array1::from(bias))?)
    }
}

fn seal(kind: u8, width: u8, payload: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + CHECKSUM_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind);
    out.push(width);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Validates the envelope and returns `(kind, width, payload)`.
fn unseal(bytes: &[u8]) -> Result<(u8, u8, &[u8]), PersistError> {
    if bytes.len() < MAGIC.len() {
        return Err(PersistError::Truncated);
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(PersistError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(PersistError::Truncated);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(PersistError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let kind = bytes[12];
    let width = bytes[13];
    let payload_len = u64::from_le_bytes(bytes[14..22].try_into().unwrap());
    let body_end = usize::try_from(payload_len)
        .ok()
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or(PersistError::Truncated)?;
    let total = body_end.checked_add(CHECKSUM_LEN).ok_or(PersistError::Truncated)?;
    if bytes.len() < total {
        return Err(PersistError::Truncated);
    }
    if bytes.len() > total {
        return Err(PersistError::Malformed("trailing bytes after checksum".into()));
    }
    let digest = Sha256::digest(&bytes[..body_end]);
    if digest.as_slice() != &bytes[body_end..] {
        return Err(PersistError::Checksum);
    }
    Ok((kind, width, &bytes[HEADER_LEN..body_end]))
}

fn check_kind<T: Scalar>(kind: u8, width: u8, expected: u8) -> Result<(), PersistError> {
    if kind != expected {
        return Err(PersistError::Kind {
            expected: kind_name(expected),
            found: kind_name(kind),
        });
    }
    if width != T::WIDTH {
        return Err(PersistError::ScalarWidth {
            found: width,
            expected: T::WIDTH,
        });
    }
    Ok(())
}

/// Serializes a network to the on-disk byte layout.
pub fn encode_network<T: Scalar>(params: &NetworkParams<T>) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.u8(match params.state() {
        HeadState::Classification => 0,
        HeadState::Detector => 1,
    });
    w.u64(params.input_dim() as u64);
    let partition = params.partition();
    w.u32(partition.k() as u32);
    w.u32(partition.m() as u32);
    for name in partition.names() {
        w.str(name);
    }
    let depth = params.layers().len();
    w.u32(depth as u32);
    for (i, layer) in params.layers().iter().enumerate() {
        w.str(&layer_name(i));
        w.str(layer_alias(i, depth).unwrap_or(""));
        w.matrix(layer);
    }
    let head = params.head();
    w.matrix(head.fc_a());
    w.matrix(head.fc_b());
    w.matrix(head.delta_b());
    w.matrix(head.transfer_a());
    match head.background() {
        Some(bg) => {
            w.u8(1);
            w.matrix(bg);
        }
        None => w.u8(0),
    }
    seal(KIND_NETWORK, T::WIDTH, w.buf)
}

pub fn decode_network<T: Scalar>(bytes: &[u8]) -> Result<NetworkParams<T>, PersistError> {
    let (kind, width, payload) = unseal(bytes)?;
    check_kind::<T>(kind, width, KIND_NETWORK)?;
    let mut r = Reader { data: payload, pos: 0 };
    let state = match r.u8()? {
        0 => HeadState::Classification,
        1 => HeadState::Detector,
        other => return Err(PersistError::Malformed(format!("unknown state tag {other}"))),
    };
    let input_dim = r.count()?;
    let k = r.u32()? as usize;
    let m = r.u32()? as usize;
    let names = (0..k).map(|_| r.str()).collect::<Result<Vec<_>, _>>()?;
    let partition = CategoryPartition::new(names, m)?;
    let depth = r.u32()? as usize;
    let mut layers = Vec::with_capacity(depth);
    for i in 0..depth {
        let name = r.str()?;
        let alias = r.str()?;
        if name != layer_name(i) || alias != layer_alias(i, depth).unwrap_or("") {
            return Err(PersistError::Malformed(format!(
                "layer {i} is named `{name}` (`{alias}`)"
            )));
        }
        layers.push(r.matrix()?);
    }
    let fc_a = r.matrix()?;
    let fc_b = r.matrix()?;
    let delta_b = r.matrix()?;
    let transfer_a = r.matrix()?;
    let background = match r.u8()? {
        0 => None,
        1 => Some(r.matrix()?),
        other => return Err(PersistError::Malformed(format!("bad background flag {other}"))),
    };
    if r.pos != payload.len() {
        return Err(PersistError::Malformed("unread payload bytes".into()));
    }
    let head = OutputHead::from_parts(fc_a, fc_b, delta_b, transfer_a, background)?;
    if head.state() != state {
        return Err(PersistError::Malformed("state tag disagrees with head contents".into()));
    }
    Ok(NetworkParams::new(input_dim, layers, head, partition)?)
}

pub fn encode_matrix<T: Scalar>(m: &WeightMatrix<T>) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.matrix(m);
    seal(KIND_MATRIX, T::WIDTH, w.buf)
}

pub fn decode_matrix<T: Scalar>(bytes: &[u8]) -> Result<WeightMatrix<T>, PersistError> {
    let (kind, width, payload) = unseal(bytes)?;
    check_kind::<T>(kind, width, KIND_MATRIX)?;
    let mut r = Reader { data: payload, pos: 0 };
    let m = r.matrix()?;
    if r.pos != payload.len() {
        return Err(PersistError::Malformed("unread payload bytes".into()));
    }
    Ok(m)
}

fn read(path: &Path) -> Result<Vec<u8>, PersistError> {
    fs::read(path).map_err(|source| PersistError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), PersistError> {
    let io = |source| PersistError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(path, bytes).map_err(io)
}

pub fn save_weights<T: Scalar>(params: &NetworkParams<T>, path: &Path) -> Result<(), PersistError> {
    write(path, &encode_network(params))
}

pub fn load_weights<T: Scalar>(path: &Path) -> Result<NetworkParams<T>, PersistError> {
    decode_network(&read(path)?)
}

/// Writes a single matrix, used for the `delta_b` sidecar.
pub fn save_matrix<T: Scalar>(m: &WeightMatrix<T>, path: &Path) -> Result<(), PersistError> {
    write(path, &encode_matrix(m))
}

pub fn load_matrix<T: Scalar>(path: &Path) -> Result<WeightMatrix<T>, PersistError> {
    decode_matrix(&read(path)?)
}
