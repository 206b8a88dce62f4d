//! Packed bit-plane storage and quantized matrix-vector products.
//!
//! A binary code `b ∈ {−1,+1}ᵖ` is stored one bit per entry, 32 entries per
//! little-endian `u32`. Column `j` lives at bit `j % 32` (LSB first) of word
//! `j / 32`; a set bit means `+1`, a clear bit `−1`. Padding bits past the
//! last column are zero.
//!
//! Both kernels evaluate `b·x` through the subset-sum identity
//! `b·x = 2·Σ_{j: bit set} xⱼ − Σⱼ xⱼ`, so they differ only in how the
//! subset sum is obtained: [`gemv_direct`] walks the set bits, [`gemv_lut`]
//! looks the sum up µ bits at a time in a table precomputed from `x`.

use serde::{Deserialize, Serialize};

use crate::bcq::{BitCluster, QuantizedTensor};
use crate::error::{Error, Result};

/// Block length used by [`gemv_lut`] when the caller has no preference.
pub const DEFAULT_MU: usize = 8;
pub const MAX_MU: usize = 16;

#[inline]
pub fn words_per_row(cols: usize) -> usize {
    cols.div_ceil(32)
}

/// One bit-plane `Bᵢ` for the rows that own it, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedBitPlane {
    pub rows: usize,
    pub cols: usize,
    pub words: Vec<u32>,
}

impl PackedBitPlane {
    pub fn new(rows: usize, cols: usize, words: Vec<u32>) -> Result<Self> {
        let wpr = words_per_row(cols);
        if words.len() != rows * wpr {
            return Err(Error::ShapeMismatch(format!(
                "bit-plane with {rows}x{cols} needs {} words, got {}",
                rows * wpr,
                words.len()
            )));
        }
        let plane = Self { rows, cols, words };
        if cols % 32 != 0 {
            let pad_mask = !((1u32 << (cols % 32)) - 1);
            for r in 0..rows {
                if plane.row(r)[wpr - 1] & pad_mask != 0 {
                    return Err(Error::InvalidInput(format!(
                        "row {r} of bit-plane has non-zero padding bits"
                    )));
                }
            }
        }
        Ok(plane)
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[u32] {
        let wpr = words_per_row(self.cols);
        &self.words[r * wpr..(r + 1) * wpr]
    }
}

/// Packs a ±1 vector into LSB-first 32-bit words.
pub fn pack_row(b: &[i8]) -> Result<Vec<u32>> {
    let mut words = vec![0u32; words_per_row(b.len())];
    for (j, &v) in b.iter().enumerate() {
        match v {
            1 => words[j / 32] |= 1 << (j % 32),
            -1 => {}
            other => {
                return Err(Error::InvalidInput(format!(
                    "code entry {j} is {other}, expected -1 or +1"
                )))
            }
        }
    }
    Ok(words)
}

pub fn unpack_row(words: &[u32], len: usize) -> Vec<i8> {
    (0..len)
        .map(|j| if words[j / 32] >> (j % 32) & 1 == 1 { 1 } else { -1 })
        .collect()
}

/// Packs `sign(r)` with `sign(0) = +1`.
pub(crate) fn pack_signs(r: &[f64]) -> Vec<u32> {
    let mut words = vec![0u32; words_per_row(r.len())];
    for (j, &v) in r.iter().enumerate() {
        if v >= 0.0 {
            words[j / 32] |= 1 << (j % 32);
        }
    }
    words
}

/// Sum of `x[j]` over the set bits of `words`, left to right.
#[inline]
fn subset_sum(words: &[u32], x: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (wi, &w) in words.iter().enumerate() {
        let base = wi * 32;
        let mut bits = w;
        while bits != 0 {
            let j = bits.trailing_zeros() as usize;
            s += x[base + j] as f64;
            bits &= bits - 1;
        }
    }
    s
}

fn check_input(t: &QuantizedTensor, x: &[f32]) -> Result<()> {
    if x.len() != t.cols {
        return Err(Error::ShapeMismatch(format!(
            "{}: x has {} entries, expected {}",
            t.name,
            x.len(),
            t.cols
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gemv input".into()));
    }
    Ok(())
}

/// `y = Σᵢ αᵢ ∘ (Bᵢ·x)` evaluated straight from the packed planes.
pub fn gemv_direct(t: &QuantizedTensor, x: &[f32]) -> Result<Vec<f32>> {
    check_input(t, x)?;
    let total: f64 = x.iter().map(|&v| v as f64).sum();
    let mut y = vec![0.0f32; t.rows];
    for k in 0..t.rows {
        let scales = t.row_scales(k);
        let mut acc = 0.0f64;
        for (plane, &alpha) in scales.iter().enumerate() {
            let s = subset_sum(t.row_plane_words(k, plane), x);
            acc += alpha as f64 * (2.0 * s - total);
        }
        y[t.logical_row(k)] = acc as f32;
    }
    Ok(y)
}

/// Subset-sum tables for one activation vector.
///
/// `x` is split into blocks of µ entries (zero-padded at the end). For block
/// `k`, `table(k)[m]` is the sum of the block entries whose bit is set in `m`.
/// Sums are held in f64 so `2S − Σx` does not lose the small differences
/// of long rows.
#[derive(Clone, Debug)]
pub struct LutTable {
    pub mu: usize,
    pub cols: usize,
    tables: Vec<f64>,
    block_sums: Vec<f64>,
    total: f64,
    additions: usize,
}

impl LutTable {
    pub fn blocks(&self) -> usize {
        self.block_sums.len()
    }

    #[inline]
    pub fn table(&self, block: usize) -> &[f64] {
        let n = 1 << self.mu;
        &self.tables[block * n..(block + 1) * n]
    }

    pub fn block_sum(&self, block: usize) -> f64 {
        self.block_sums[block]
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    /// Number of floating-point additions spent filling the tables.
    pub fn additions(&self) -> usize {
        self.additions
    }
}

/// Fills `table` with all subset sums of `xs` using one addition per
/// non-empty subset. Returns the number of additions.
fn fill_block(table: &mut [f64], xs: &[f64]) -> usize {
    table[0] = 0.0;
    let mut adds = 0;
    for (k, &v) in xs.iter().enumerate() {
        let half = 1 << k;
        for m in 0..half {
            table[m | half] = table[m] + v;
            adds += 1;
        }
    }
    adds
}

pub fn build_lut(x: &[f32], mu: usize) -> Result<LutTable> {
    if !(1..=MAX_MU).contains(&mu) {
        return Err(Error::InvalidInput(format!("block length µ={mu} outside 1..={MAX_MU}")));
    }
    let n = 1usize << mu;
    let blocks = x.len().div_ceil(mu);
    let mut tables = vec![0.0f64; blocks * n];
    let mut block_sums = Vec::with_capacity(blocks);
    let mut additions = 0;
    let mut padded = vec![0.0f64; mu];
    for (k, table) in tables.chunks_exact_mut(n).enumerate() {
        let chunk = &x[k * mu..((k + 1) * mu).min(x.len())];
        padded.fill(0.0);
        for (p, &v) in padded.iter_mut().zip(chunk) {
            *p = v as f64;
        }
        additions += fill_block(table, &padded);
        block_sums.push(table[n - 1]);
    }
    let total = x.iter().map(|&v| v as f64).sum();
    Ok(LutTable { mu, cols: x.len(), tables, block_sums, total, additions })
}

/// Reads `len ≤ 32` bits starting at bit `start` of an LSB-first word stream.
#[inline]
fn extract_bits(words: &[u32], start: usize, len: usize) -> usize {
    let w = start / 32;
    let sh = start % 32;
    let lo = words[w] as u64;
    let hi = words.get(w + 1).copied().unwrap_or(0) as u64;
    let window = (lo | hi << 32) >> sh;
    (window & ((1u64 << len) - 1)) as usize
}

/// Quantized GEMV through precomputed subset-sum tables.
pub fn gemv_lut(t: &QuantizedTensor, x: &[f32], mu: usize) -> Result<Vec<f32>> {
    check_input(t, x)?;
    let lut = build_lut(x, mu)?;
    gemv_with_lut(t, &lut)
}

/// Same as [`gemv_lut`] with a table built once by the caller for this `x`.
pub fn gemv_with_lut(t: &QuantizedTensor, lut: &LutTable) -> Result<Vec<f32>> {
    if lut.cols != t.cols {
        return Err(Error::ShapeMismatch(format!(
            "{}: table built for {} columns, tensor has {}",
            t.name, lut.cols, t.cols
        )));
    }
    let mu = lut.mu;
    let blocks = lut.blocks();
    let mut y = vec![0.0f32; t.rows];
    for k in 0..t.rows {
        let scales = t.row_scales(k);
        let mut acc = 0.0f64;
        for (plane, &alpha) in scales.iter().enumerate() {
            let words = t.row_plane_words(k, plane);
            let mut s = 0.0f64;
            for blk in 0..blocks {
                let pattern = extract_bits(words, blk * mu, mu);
                s += lut.table(blk)[pattern];
            }
            acc += alpha as f64 * (2.0 * s - lut.total);
        }
        y[t.logical_row(k)] = acc as f32;
    }
    Ok(y)
}

/// Bytes held by packed planes plus f32 scales:
/// `Σ_rows q(row)·(ceil(cols/32)·4 + 4)`.
pub fn memory_footprint(t: &QuantizedTensor) -> usize {
    footprint_for(t.cols, &t.clusters)
}

/// [`memory_footprint`] of a tensor that would have these clusters.
pub fn footprint_for(cols: usize, clusters: &[BitCluster]) -> usize {
    let per_plane = words_per_row(cols) * 4 + 4;
    clusters.iter().map(|c| c.rows * c.bits as usize * per_plane).sum()
}
