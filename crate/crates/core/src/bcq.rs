//! Greedy binary-code quantization.
//!
//! A vector `w` is approximated by `q` pairs `(αᵢ, bᵢ)` built from the
//! running residual: `r₁ = w`, `bᵢ = sign(rᵢ)`, `αᵢ = mean|rᵢ|`,
//! `rᵢ₊₁ = rᵢ − αᵢ bᵢ`. Matrices are quantized row by row.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{pack_signs, unpack_row, words_per_row, PackedBitPlane};
use crate::tensor::DenseTensor;

pub const MAX_BITS: usize = 8;

fn check_bits(bits: usize) -> Result<()> {
    if (1..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::BitsOutOfRange(bits))
    }
}

/// `q` scaled binary codes approximating one vector.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedRow {
    pub len: usize,
    /// `αᵢ`, one per plane.
    pub scales: Vec<f32>,
    /// `bᵢ`, packed LSB-first.
    pub planes: Vec<Vec<u32>>,
}

impl QuantizedRow {
    pub fn from_codes(len: usize, scales: Vec<f32>, codes: Vec<Vec<i8>>) -> Result<Self> {
        check_bits(scales.len())?;
        if codes.len() != scales.len() || codes.iter().any(|c| c.len() != len) {
            return Err(Error::ShapeMismatch("codes do not match scales/length".into()));
        }
        let planes = codes.iter().map(|c| crate::kernel::pack_row(c)).collect::<Result<_>>()?;
        Ok(Self { len, scales, planes })
    }

    pub fn bits(&self) -> usize {
        self.scales.len()
    }

    /// Unpacked `bᵢ` for plane `i` (0-based).
    pub fn code(&self, i: usize) -> Vec<i8> {
        unpack_row(&self.planes[i], self.len)
    }

    /// `Σᵢ αᵢ bᵢ`, summed in f64 and rounded once.
    pub fn reconstruct(&self) -> Vec<f32> {
        let mut out = vec![0.0f64; self.len];
        for (&alpha, words) in self.scales.iter().zip(&self.planes) {
            let alpha = alpha as f64;
            for (j, o) in out.iter_mut().enumerate() {
                let bit = words[j / 32] >> (j % 32) & 1;
                *o += if bit == 1 { alpha } else { -alpha };
            }
        }
        out.into_iter().map(|v| v as f32).collect()
    }
}

/// Greedy binary-code approximation of `w` with `bits` planes.
pub fn greedy_quantize_vector(w: &[f32], bits: usize) -> Result<QuantizedRow> {
    if w.is_empty() {
        return Err(Error::InvalidInput("cannot quantize an empty vector".into()));
    }
    check_bits(bits)?;
    if let Some(j) = w.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("vector entry {j}")));
    }
    Ok(greedy(w, bits))
}

fn greedy(w: &[f32], bits: usize) -> QuantizedRow {
    // The residual is tracked in f64 against the f32 scales actually stored.
    let mut residual: Vec<f64> = w.iter().map(|&v| v as f64).collect();
    let n = w.len() as f64;
    let mut scales = Vec::with_capacity(bits);
    let mut planes = Vec::with_capacity(bits);
    for _ in 0..bits {
        let words = pack_signs(&residual);
        let alpha = (residual.iter().map(|v| v.abs()).sum::<f64>() / n) as f32;
        let a = alpha as f64;
        for r in residual.iter_mut() {
            if *r >= 0.0 {
                *r -= a;
            } else {
                *r += a;
            }
        }
        scales.push(alpha);
        planes.push(words);
    }
    QuantizedRow { len: w.len(), scales, planes }
}

/// A run of consecutive stored rows sharing one bit width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitCluster {
    pub rows: usize,
    pub bits: u8,
}

impl BitCluster {
    pub fn uniform(rows: usize, bits: usize) -> Vec<BitCluster> {
        vec![BitCluster { rows, bits: bits as u8 }]
    }
}

/// Row-wise binary-code quantized matrix.
///
/// Rows are stored grouped into [`BitCluster`]s. When `row_order` is set,
/// stored row `k` holds logical row `row_order[k]` of the original matrix
/// (embedding rows are stored in frequency order); otherwise stored and
/// logical order coincide.
///
/// Plane `i` holds, in stored order, the codes of every row with more than
/// `i` bits. Scales are row-major, plane-minor.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub clusters: Vec<BitCluster>,
    pub row_order: Option<Vec<u32>>,
    planes: Vec<PackedBitPlane>,
    scales: Vec<f32>,
    // row-major, plane-minor slot of each (row, plane) inside its plane
    plane_slots: Vec<u32>,
    scale_offsets: Vec<usize>,
}

impl QuantizedTensor {
    /// Builds a tensor from per-row quantizations in stored order. Adjacent
    /// rows of equal width are merged into one cluster.
    pub fn from_rows(
        name: impl Into<String>,
        cols: usize,
        rows: Vec<QuantizedRow>,
        row_order: Option<Vec<u32>>,
    ) -> Result<Self> {
        let mut clusters: Vec<BitCluster> = Vec::new();
        for r in &rows {
            if r.len != cols {
                return Err(Error::ShapeMismatch(format!("row of length {} in {cols}-column tensor", r.len)));
            }
            check_bits(r.bits())?;
            match clusters.last_mut() {
                Some(c) if c.bits as usize == r.bits() => c.rows += 1,
                _ => clusters.push(BitCluster { rows: 1, bits: r.bits() as u8 }),
            }
        }
        let q_max = rows.iter().map(|r| r.bits()).max().unwrap_or(0);
        let mut planes = Vec::with_capacity(q_max);
        for i in 0..q_max {
            let owners: Vec<&QuantizedRow> = rows.iter().filter(|r| r.bits() > i).collect();
            let words = owners.iter().flat_map(|r| r.planes[i].iter().copied()).collect();
            planes.push(PackedBitPlane::new(owners.len(), cols, words)?);
        }
        let scales = rows.iter().flat_map(|r| r.scales.iter().copied()).collect();
        Self::from_parts(name, rows.len(), cols, clusters, row_order, planes, scales)
    }

    /// Assembles a tensor from its serialized pieces, validating every
    /// structural invariant.
    pub fn from_parts(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        clusters: Vec<BitCluster>,
        row_order: Option<Vec<u32>>,
        planes: Vec<PackedBitPlane>,
        scales: Vec<f32>,
    ) -> Result<Self> {
        let name = name.into();
        let covered: usize = clusters.iter().map(|c| c.rows).sum();
        if covered != rows {
            return Err(Error::ShapeMismatch(format!(
                "{name}: clusters cover {covered} rows, tensor has {rows}"
            )));
        }
        for c in &clusters {
            check_bits(c.bits as usize)?;
        }
        if let Some(order) = &row_order {
            if order.len() != rows {
                return Err(Error::ShapeMismatch(format!("{name}: row order has {} entries", order.len())));
            }
            let mut seen = vec![false; rows];
            for &o in order {
                let o = o as usize;
                if o >= rows || std::mem::replace(&mut seen[o], true) {
                    return Err(Error::InvalidInput(format!("{name}: row order is not a permutation")));
                }
            }
        }
        let row_bits: Vec<usize> =
            clusters.iter().flat_map(|c| std::iter::repeat_n(c.bits as usize, c.rows)).collect();
        let q_max = row_bits.iter().copied().max().unwrap_or(0);
        if planes.len() != q_max {
            return Err(Error::ShapeMismatch(format!("{name}: {} planes, expected {q_max}", planes.len())));
        }
        for (i, p) in planes.iter().enumerate() {
            let owners = row_bits.iter().filter(|&&b| b > i).count();
            if p.rows != owners || p.cols != cols {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: plane {i} is {}x{}, expected {owners}x{cols}",
                    p.rows, p.cols
                )));
            }
        }
        let total_bits: usize = row_bits.iter().sum();
        if scales.len() != total_bits {
            return Err(Error::ShapeMismatch(format!(
                "{name}: {} scales, expected {total_bits}",
                scales.len()
            )));
        }
        if scales.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("{name} scales")));
        }
        let mut cursor = vec![0u32; q_max];
        let mut plane_slots = Vec::with_capacity(total_bits);
        let mut scale_offsets = Vec::with_capacity(rows + 1);
        let mut off = 0;
        for &b in &row_bits {
            scale_offsets.push(off);
            off += b;
            for c in cursor.iter_mut().take(b) {
                plane_slots.push(*c);
                *c += 1;
            }
        }
        scale_offsets.push(off);
        Ok(Self { name, rows, cols, clusters, row_order, planes, scales, plane_slots, scale_offsets })
    }

    pub fn planes(&self) -> &[PackedBitPlane] {
        &self.planes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn max_bits(&self) -> usize {
        self.planes.len()
    }

    /// Bit width of stored row `k`.
    pub fn row_bits(&self, k: usize) -> usize {
        self.scale_offsets[k + 1] - self.scale_offsets[k]
    }

    pub fn row_scales(&self, k: usize) -> &[f32] {
        &self.scales[self.scale_offsets[k]..self.scale_offsets[k + 1]]
    }

    /// Packed words of stored row `k` in plane `plane`.
    #[inline]
    pub fn row_plane_words(&self, k: usize, plane: usize) -> &[u32] {
        let slot = self.plane_slots[self.scale_offsets[k] + plane] as usize;
        self.planes[plane].row(slot)
    }

    /// Logical (original) row index of stored row `k`.
    #[inline]
    pub fn logical_row(&self, k: usize) -> usize {
        match &self.row_order {
            Some(order) => order[k] as usize,
            None => k,
        }
    }

    /// Stored row `k` as a standalone [`QuantizedRow`].
    pub fn stored_row(&self, k: usize) -> QuantizedRow {
        let bits = self.row_bits(k);
        QuantizedRow {
            len: self.cols,
            scales: self.row_scales(k).to_vec(),
            planes: (0..bits).map(|i| self.row_plane_words(k, i).to_vec()).collect(),
        }
    }

    /// Mean bits per weight over all rows.
    pub fn average_bits(&self) -> f64 {
        if self.rows == 0 {
            return 0.0;
        }
        self.scales.len() as f64 / self.rows as f64
    }

    pub fn words_per_row(&self) -> usize {
        words_per_row(self.cols)
    }
}

/// Quantizes every row of `w` with the width of the cluster it falls in.
pub fn quantize_matrix(w: &DenseTensor, clusters: &[BitCluster]) -> Result<QuantizedTensor> {
    quantize_rows(w, clusters, None)
}

/// Like [`quantize_matrix`], but stored row `k` is logical row `order[k]`;
/// clusters apply to stored positions.
pub fn quantize_matrix_ordered(
    w: &DenseTensor,
    clusters: &[BitCluster],
    order: Vec<u32>,
) -> Result<QuantizedTensor> {
    quantize_rows(w, clusters, Some(order))
}

fn quantize_rows(
    w: &DenseTensor,
    clusters: &[BitCluster],
    order: Option<Vec<u32>>,
) -> Result<QuantizedTensor> {
    w.validate()?;
    if w.cols == 0 {
        return Err(Error::InvalidInput(format!("{}: zero columns", w.name)));
    }
    let covered: usize = clusters.iter().map(|c| c.rows).sum();
    if covered != w.rows {
        return Err(Error::ShapeMismatch(format!(
            "{}: cluster spec covers {covered} rows, matrix has {}",
            w.name, w.rows
        )));
    }
    for c in clusters {
        check_bits(c.bits as usize)?;
    }
    if let Some(o) = &order {
        if o.len() != w.rows || o.iter().any(|&i| i as usize >= w.rows) {
            return Err(Error::InvalidInput(format!("{}: bad row order", w.name)));
        }
    }
    let jobs: Vec<(usize, usize)> = clusters
        .iter()
        .flat_map(|c| std::iter::repeat_n(c.bits as usize, c.rows))
        .enumerate()
        .map(|(k, bits)| (order.as_ref().map_or(k, |o| o[k] as usize), bits))
        .collect();
    let rows: Vec<QuantizedRow> = jobs.par_iter().map(|&(r, bits)| greedy(w.row(r), bits)).collect();
    QuantizedTensor::from_rows(w.name.clone(), w.cols, rows, order)
}

/// `Σᵢ αᵢ bᵢ` for every row, in logical row order.
pub fn dequantize(t: &QuantizedTensor) -> DenseTensor {
    let mut out = DenseTensor::zeros(t.name.clone(), t.rows, t.cols);
    for k in 0..t.rows {
        let row = t.stored_row(k).reconstruct();
        out.row_mut(t.logical_row(k)).copy_from_slice(&row);
    }
    out
}

/// `‖W − dequantize(t)‖_F`, accumulated in f64.
pub fn quantization_error(w: &DenseTensor, t: &QuantizedTensor) -> Result<f64> {
    if w.rows != t.rows || w.cols != t.cols {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} dense vs {}x{} quantized",
            w.rows, w.cols, t.rows, t.cols
        )));
    }
    let approx = dequantize(t);
    let sq: f64 = w
        .data
        .iter()
        .zip(&approx.data)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sq.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_vector_one_bit() {
        let q = greedy_quantize_vector(&[2.0; 4], 1).unwrap();
        assert_eq!(q.scales, vec![2.0]);
        assert_eq!(q.code(0), vec![1, 1, 1, 1]);
        assert_eq!(q.reconstruct(), vec![2.0; 4]);
    }

    #[test]
    fn alternating_vector_is_exact() {
        let w = [1.0, -1.0, 1.0, -1.0];
        let q = greedy_quantize_vector(&w, 1).unwrap();
        assert_eq!(q.scales, vec![1.0]);
        assert_eq!(q.code(0), vec![1, -1, 1, -1]);
        assert_eq!(q.reconstruct(), w.to_vec());
    }

    #[test]
    fn two_bit_worked_example() {
        // hand-executed recursion:
        //   α₁ = (3+1+2+0.5)/4 = 1.625, b₁ = [+,+,−,+]
        //   r₂ = [1.375, −0.625, −0.375, −1.125], α₂ = 3.5/4 = 0.875
        let q = greedy_quantize_vector(&[3.0, 1.0, -2.0, 0.5], 2).unwrap();
        assert_eq!(q.scales, vec![1.625, 0.875]);
        assert_eq!(q.code(0), vec![1, 1, -1, 1]);
        assert_eq!(q.code(1), vec![1, -1, -1, -1]);
        assert_eq!(q.reconstruct(), vec![2.5, 0.75, -2.5, 0.75]);
    }

    #[test]
    fn zero_vector_any_bits() {
        for bits in 1..=MAX_BITS {
            let q = greedy_quantize_vector(&[0.0; 5], bits).unwrap();
            assert!(q.scales.iter().all(|&a| a == 0.0));
            assert_eq!(q.reconstruct(), vec![0.0; 5]);
            assert_eq!(q.code(bits - 1), vec![1; 5]);
        }
    }

    #[test]
    fn single_entry_is_exact_at_one_bit() {
        for v in [-3.5f32, 0.0, 1e-20, 7.25] {
            let q = greedy_quantize_vector(&[v], 1).unwrap();
            assert_eq!(q.scales[0], v.abs());
            assert_eq!(q.reconstruct(), vec![v]);
        }
    }

    #[test]
    fn sparse_vector_breaks_scale_ordering() {
        // With sign(0) = +1 the first residual is [3, −1, −1, −1] whose mean
        // magnitude exceeds α₁; ordering of scales is not universal.
        let q = greedy_quantize_vector(&[4.0, 0.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(q.scales, vec![1.0, 1.5]);
    }

    #[test]
    fn one_bit_requantization_is_exact() {
        let w = [0.3f32, -1.7, 2.2, 0.01, -0.4];
        let once = greedy_quantize_vector(&w, 1).unwrap().reconstruct();
        let twice = greedy_quantize_vector(&once, 1).unwrap().reconstruct();
        assert_eq!(once, twice);
    }

    #[test]
    fn two_bit_requantization_can_move() {
        let once = greedy_quantize_vector(&[4.0, 1.0, 1.0, 1.0], 2).unwrap().reconstruct();
        assert_eq!(once, vec![2.875, 0.625, 0.625, 0.625]);
        let twice = greedy_quantize_vector(&once, 2).unwrap().reconstruct();
        assert_ne!(twice, once);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(greedy_quantize_vector(&[], 1), Err(Error::InvalidInput(_))));
        assert!(matches!(greedy_quantize_vector(&[1.0], 0), Err(Error::BitsOutOfRange(0))));
        assert!(matches!(greedy_quantize_vector(&[1.0], 9), Err(Error::BitsOutOfRange(9))));
        assert!(matches!(greedy_quantize_vector(&[f32::INFINITY], 1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn matrix_rows_match_vector_quantizer() {
        let w = DenseTensor::new("w", 2, 4, vec![3.0, 1.0, -2.0, 0.5, -1.0, 4.0, 0.25, 2.0]).unwrap();
        let t = quantize_matrix(&w, &BitCluster::uniform(2, 1)).unwrap();
        for r in 0..2 {
            assert_eq!(t.stored_row(r), greedy_quantize_vector(w.row(r), 1).unwrap());
        }
    }

    #[test]
    fn identity_like_rows() {
        let w = DenseTensor::new(
            "w",
            3,
            4,
            vec![2.0, 0.0, 0.0, 0.0, 0.0, -8.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        let t = quantize_matrix(&w, &BitCluster::uniform(3, 1)).unwrap();
        assert_eq!(t.scales(), &[0.5, 2.0, 0.25]);
    }

    #[test]
    fn cluster_spec_mismatch() {
        let w = DenseTensor::zeros("w", 3, 4);
        let err = quantize_matrix(&w, &[BitCluster { rows: 2, bits: 1 }]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn mixed_widths_layout() {
        let w = DenseTensor::new("w", 3, 3, (0..9).map(|i| i as f32 - 4.0).collect()).unwrap();
        let clusters = [BitCluster { rows: 1, bits: 3 }, BitCluster { rows: 2, bits: 1 }];
        let t = quantize_matrix(&w, &clusters).unwrap();
        assert_eq!(t.planes().len(), 3);
        assert_eq!(t.planes()[0].rows, 3);
        assert_eq!(t.planes()[1].rows, 1);
        assert_eq!(t.scales().len(), 5);
        assert_eq!(t.row_bits(0), 3);
        assert_eq!(t.row_bits(2), 1);
        assert_eq!(t.average_bits(), 5.0 / 3.0);
    }

    #[test]
    fn ordered_quantization_dequantizes_in_logical_order() {
        let w = DenseTensor::new("e", 3, 2, vec![1.0, 1.0, -2.0, 2.0, 3.0, -3.0]).unwrap();
        let clusters = [BitCluster { rows: 1, bits: 2 }, BitCluster { rows: 2, bits: 1 }];
        let t = quantize_matrix_ordered(&w, &clusters, vec![2, 0, 1]).unwrap();
        assert_eq!(t.row_bits(0), 2);
        assert_eq!(t.logical_row(0), 2);
        assert_eq!(dequantize(&t), DenseTensor { name: "e".into(), ..w.clone() });
    }

    #[test]
    fn worked_example_error() {
        let w = DenseTensor::new("w", 1, 4, vec![3.0, 1.0, -2.0, 0.5]).unwrap();
        let t = quantize_matrix(&w, &BitCluster::uniform(1, 2)).unwrap();
        assert_eq!(dequantize(&t).data, vec![2.5, 0.75, -2.5, 0.75]);
        let e = quantization_error(&w, &t).unwrap();
        assert!((e - 0.625f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn exact_representation_has_zero_error() {
        let w = DenseTensor::new("w", 2, 4, vec![1.5, -1.5, 1.5, 1.5, -0.25, -0.25, 0.25, 0.25]).unwrap();
        let t = quantize_matrix(&w, &BitCluster::uniform(2, 1)).unwrap();
        assert_eq!(quantization_error(&w, &t).unwrap(), 0.0);
    }

    #[test]
    fn error_shape_mismatch() {
        let w = DenseTensor::zeros("w", 2, 4);
        let t = quantize_matrix(&DenseTensor::zeros("v", 2, 3), &BitCluster::uniform(2, 1)).unwrap();
        assert!(quantization_error(&w, &t).is_err());
    }

    #[test]
    fn from_parts_rejects_bad_scale_count() {
        let w = DenseTensor::zeros("w", 2, 4);
        let t = quantize_matrix(&w, &BitCluster::uniform(2, 2)).unwrap();
        let err = QuantizedTensor::from_parts(
            "w",
            2,
            4,
            t.clusters.clone(),
            None,
            t.planes().to_vec(),
            vec![0.0; 3],
        );
        assert!(err.is_err());
    }
}
