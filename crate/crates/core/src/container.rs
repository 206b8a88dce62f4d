//! `BCQ1` checkpoint container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "BCQ1"
//! 4       4     version, u32 LE (currently 1)
//! 8       8     metadata length M, u64 LE
//! 16      M     metadata, UTF-8 JSON
//! 16+M    ...   payload: tensor payloads back to back
//! ```
//!
//! Metadata is `{"tensors": [entry...], "attributes": {string: string}}`.
//! Each entry carries `name`, `kind` (`"dense"` or `"quantized"`), `rows`,
//! `cols`, `offset` and `length` (both relative to the payload start) and,
//! for quantized tensors, `clusters` as a list of `[row_count, bits]` plus an
//! optional `row_order` permutation.
//!
//! A dense payload is row-major little-endian f32. A quantized payload is,
//! for each plane `i` in `1..=q_max` and each stored row owning plane `i`,
//! `ceil(cols/32)` little-endian u32 words; then every scale as little-endian
//! f32, row-major and plane-minor. Payloads are contiguous, so the file size
//! is exactly `16 + M + Σ length`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bcq::{BitCluster, QuantizedTensor};
use crate::error::{Error, Result};
use crate::kernel::{words_per_row, PackedBitPlane};
use crate::tensor::DenseTensor;

pub const MAGIC: [u8; 4] = *b"BCQ1";
pub const VERSION: u32 = 1;
const FIXED_HEADER: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub enum Tensor {
    Dense(DenseTensor),
    Quantized(QuantizedTensor),
}

impl Tensor {
    pub fn name(&self) -> &str {
        match self {
            Tensor::Dense(t) => &t.name,
            Tensor::Quantized(t) => &t.name,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Tensor::Dense(t) => (t.rows, t.cols),
            Tensor::Quantized(t) => (t.rows, t.cols),
        }
    }

    pub fn payload_len(&self) -> usize {
        match self {
            Tensor::Dense(t) => t.data.len() * 4,
            Tensor::Quantized(t) => {
                let words: usize = t.planes().iter().map(|p| p.words.len()).sum();
                (words + t.scales().len()) * 4
            }
        }
    }

    pub fn as_dense(&self) -> Option<&DenseTensor> {
        match self {
            Tensor::Dense(t) => Some(t),
            Tensor::Quantized(_) => None,
        }
    }

    pub fn as_quantized(&self) -> Option<&QuantizedTensor> {
        match self {
            Tensor::Quantized(t) => Some(t),
            Tensor::Dense(_) => None,
        }
    }
}

impl From<DenseTensor> for Tensor {
    fn from(t: DenseTensor) -> Self {
        Tensor::Dense(t)
    }
}

impl From<QuantizedTensor> for Tensor {
    fn from(t: QuantizedTensor) -> Self {
        Tensor::Quantized(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Dense,
    Quantized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub rows: usize,
    pub cols: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clusters: Option<Vec<(usize, u8)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_order: Option<Vec<u32>>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

/// A set of named tensors plus free-form string attributes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<Tensor>,
    pub attributes: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        Self { tensors, attributes: BTreeMap::new() }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name() == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = std::collections::HashSet::new();
        for t in &self.tensors {
            if !seen.insert(t.name()) {
                return Err(Error::DuplicateName(t.name().to_string()));
            }
            match t {
                Tensor::Dense(d) => d.validate()?,
                Tensor::Quantized(q) => {
                    if q.scales().iter().any(|s| !s.is_finite()) {
                        return Err(Error::NonFinite(format!("{} scales", q.name)));
                    }
                }
            }
        }

        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for t in &self.tensors {
            let (rows, cols) = t.shape();
            let length = t.payload_len() as u64;
            let (kind, clusters, row_order) = match t {
                Tensor::Dense(_) => (TensorKind::Dense, None, None),
                Tensor::Quantized(q) => (
                    TensorKind::Quantized,
                    Some(q.clusters.iter().map(|c| (c.rows, c.bits)).collect()),
                    q.row_order.clone(),
                ),
            };
            entries.push(TensorEntry {
                name: t.name().to_string(),
                kind,
                rows,
                cols,
                clusters,
                row_order,
                offset,
                length,
            });
            offset += length;
        }
        let meta = serde_json::to_vec(&Metadata { tensors: entries, attributes: self.attributes.clone() })?;

        let mut out = Vec::with_capacity(FIXED_HEADER + meta.len() + offset as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for t in &self.tensors {
            match t {
                Tensor::Dense(d) => {
                    for v in &d.data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Tensor::Quantized(q) => {
                    for p in q.planes() {
                        for w in &p.words {
                            out.extend_from_slice(&w.to_le_bytes());
                        }
                    }
                    for s in q.scales() {
                        out.extend_from_slice(&s.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated("file shorter than magic".into()));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        if bytes.len() < FIXED_HEADER {
            return Err(Error::Truncated("incomplete fixed header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::VersionMismatch(version));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let meta_end = (FIXED_HEADER as u64)
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| Error::Truncated(format!("metadata of {meta_len} bytes exceeds file")))?
            as usize;
        let meta: Metadata = serde_json::from_slice(&bytes[FIXED_HEADER..meta_end])?;
        let payload = &bytes[meta_end..];

        let mut spans: Vec<(u64, u64, &str)> =
            meta.tensors.iter().map(|e| (e.offset, e.length, e.name.as_str())).collect();
        spans.sort_unstable();
        let mut cursor = 0u64;
        for &(off, len, name) in &spans {
            if off < cursor {
                return Err(Error::Bounds(format!("{name} overlaps the previous payload")));
            }
            let end = off
                .checked_add(len)
                .ok_or_else(|| Error::Bounds(format!("{name}: offset overflow")))?;
            if end > payload.len() as u64 {
                return Err(Error::Truncated(format!(
                    "{name} ends at payload byte {end}, payload has {}",
                    payload.len()
                )));
            }
            cursor = end;
        }
        if cursor != payload.len() as u64 {
            return Err(Error::Bounds(format!(
                "payload has {} bytes, entries account for {cursor}",
                payload.len()
            )));
        }

        let mut seen = std::collections::HashSet::new();
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        for e in meta.tensors {
            if !seen.insert(e.name.clone()) {
                return Err(Error::DuplicateName(e.name));
            }
            let body = &payload[e.offset as usize..(e.offset + e.length) as usize];
            tensors.push(decode_entry(e, body)?);
        }
        Ok(Self { tensors, attributes: meta.attributes })
    }

    /// Writes the container and returns the number of bytes written.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<u64> {
        let bytes = self.to_bytes()?;
        fs::write(path, &bytes)?;
        Ok(bytes.len() as u64)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn f32s(body: &[u8]) -> Vec<f32> {
    body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

fn decode_entry(e: TensorEntry, body: &[u8]) -> Result<Tensor> {
    let length_err = |expected: usize| {
        Error::Metadata(format!("{}: declared length {} but shape needs {expected}", e.name, e.length))
    };
    match e.kind {
        TensorKind::Dense => {
            let expected = e.rows * e.cols * 4;
            if body.len() != expected {
                return Err(length_err(expected));
            }
            let t = DenseTensor::new(e.name.clone(), e.rows, e.cols, f32s(body))?;
            t.validate()?;
            Ok(Tensor::Dense(t))
        }
        TensorKind::Quantized => {
            let clusters: Vec<BitCluster> = e
                .clusters
                .as_ref()
                .ok_or_else(|| Error::Metadata(format!("{}: quantized entry without clusters", e.name)))?
                .iter()
                .map(|&(rows, bits)| BitCluster { rows, bits })
                .collect();
            let row_bits: Vec<usize> =
                clusters.iter().flat_map(|c| std::iter::repeat_n(c.bits as usize, c.rows)).collect();
            let q_max = row_bits.iter().copied().max().unwrap_or(0);
            let wpr = words_per_row(e.cols);
            let plane_rows: Vec<usize> =
                (0..q_max).map(|i| row_bits.iter().filter(|&&b| b > i).count()).collect();
            let n_words: usize = plane_rows.iter().map(|r| r * wpr).sum();
            let n_scales: usize = row_bits.iter().sum();
            let expected = (n_words + n_scales) * 4;
            if body.len() != expected {
                return Err(length_err(expected));
            }
            let mut planes = Vec::with_capacity(q_max);
            let mut at = 0;
            for &rows in &plane_rows {
                let len = rows * wpr * 4;
                let words = body[at..at + len]
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                planes.push(PackedBitPlane::new(rows, e.cols, words)?);
                at += len;
            }
            let scales = f32s(&body[at..]);
            let t = QuantizedTensor::from_parts(e.name, e.rows, e.cols, clusters, e.row_order, planes, scales)?;
            Ok(Tensor::Quantized(t))
        }
    }
}

pub fn write_checkpoint(tensors: &[Tensor], path: impl AsRef<Path>) -> Result<u64> {
    Checkpoint::new(tensors.to_vec()).write(path)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    Ok(Checkpoint::read(path)?.tensors)
}

/// Reads only the fixed header and metadata block.
pub fn read_metadata(bytes: &[u8]) -> Result<Metadata> {
    if bytes.len() < FIXED_HEADER {
        return Err(Error::Truncated("incomplete fixed header".into()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = FIXED_HEADER
        .checked_add(meta_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Truncated("metadata exceeds file".into()))?;
    Ok(serde_json::from_slice(&bytes[FIXED_HEADER..end])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bcq::quantize_matrix;

    #[test]
    fn empty_container_is_header_only() {
        let bytes = Checkpoint::default().to_bytes().unwrap();
        let meta = read_metadata(&bytes).unwrap();
        assert!(meta.tensors.is_empty());
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 16 + meta_len);
        assert_eq!(&bytes[..8], b"BCQ1\x01\x00\x00\x00");
        assert!(Checkpoint::from_bytes(&bytes).unwrap().tensors.is_empty());
    }

    #[test]
    fn single_zero_scalar_payload() {
        let t = DenseTensor::new("z", 1, 1, vec![0.0]).unwrap();
        let bytes = Checkpoint::new(vec![t.into()]).to_bytes().unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 0, 0, 0]);
        let meta = read_metadata(&bytes).unwrap();
        assert_eq!(meta.tensors[0].length, 4);
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 16 + meta_len + 4);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = Checkpoint::default().to_bytes().unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = Checkpoint::default().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::VersionMismatch(2))));
    }

    #[test]
    fn truncated_payload() {
        let t = DenseTensor::new("w", 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = Checkpoint::new(vec![t.into()]).to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::from_bytes(cut), Err(Error::Truncated(_))));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let t = DenseTensor::new("w", 1, 2, vec![1.0, 2.0]).unwrap();
        let mut bytes = Checkpoint::new(vec![t.into()]).to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Bounds(_))));
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = DenseTensor::zeros("w", 1, 1);
        let err = Checkpoint::new(vec![t.clone().into(), t.into()]).to_bytes().unwrap_err();
        assert!(matches!(err, Error::DuplicateName(n) if n == "w"));
    }

    #[test]
    fn non_finite_rejected_on_write_and_read() {
        let t = DenseTensor::new("w", 1, 2, vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(Checkpoint::new(vec![t.into()]).to_bytes(), Err(Error::NonFinite(_))));

        let t = DenseTensor::new("w", 1, 2, vec![1.0, 2.0]).unwrap();
        let mut bytes = Checkpoint::new(vec![t.into()]).to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::NonFinite(_))));
    }

    #[test]
    fn quantized_payload_layout() {
        // rows: [1-bit, 2-bit], 3 columns → plane 1 has both rows, plane 2 one
        let w = DenseTensor::new("q", 2, 3, vec![1.0, -1.0, 1.0, 2.0, 0.5, -3.0]).unwrap();
        let clusters = [BitCluster { rows: 1, bits: 1 }, BitCluster { rows: 1, bits: 2 }];
        let q = quantize_matrix(&w, &clusters).unwrap();
        let bytes = Checkpoint::new(vec![q.clone().into()]).to_bytes().unwrap();
        let meta = read_metadata(&bytes).unwrap();
        assert_eq!(meta.tensors[0].clusters, Some(vec![(1, 1), (1, 2)]));
        assert_eq!(meta.tensors[0].length, (3 + 3) * 4);
        let payload = &bytes[bytes.len() - 24..];
        let word = |i: usize| u32::from_le_bytes(payload[i * 4..i * 4 + 4].try_into().unwrap());
        assert_eq!(word(0), 0b101);
        assert_eq!(word(1), q.row_plane_words(1, 0)[0]);
        assert_eq!(word(2), q.row_plane_words(1, 1)[0]);
        let scale = |i: usize| f32::from_le_bytes(payload[i * 4..i * 4 + 4].try_into().unwrap());
        assert_eq!(scale(3), 1.0);
        assert_eq!([scale(4), scale(5)], [q.row_scales(1)[0], q.row_scales(1)[1]]);
    }

    #[test]
    fn overlapping_entries_rejected() {
        let a = DenseTensor::new("a", 1, 1, vec![1.0]).unwrap();
        let b = DenseTensor::new("b", 1, 1, vec![2.0]).unwrap();
        let bytes = Checkpoint::new(vec![a.into(), b.into()]).to_bytes().unwrap();
        let mut meta = read_metadata(&bytes).unwrap();
        meta.tensors[1].offset = 0;
        let meta_bytes = serde_json::to_vec(&meta).unwrap();
        let mut forged = Vec::new();
        forged.extend_from_slice(&bytes[..8]);
        forged.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
        forged.extend_from_slice(&meta_bytes);
        forged.extend_from_slice(&bytes[bytes.len() - 8..]);
        assert!(matches!(Checkpoint::from_bytes(&forged), Err(Error::Bounds(_))));
    }
}
