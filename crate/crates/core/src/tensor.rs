use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Full-precision row-major matrix. Vectors are stored as `1 × n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl DenseTensor {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{name}: {} values for shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { name, rows, cols, data })
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self { name: name.into(), rows, cols, data: vec![0.0; rows * cols] }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::ShapeMismatch(format!(
                "{}: {} values for shape {}x{}",
                self.name,
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{}[{i}]", self.name)));
        }
        Ok(())
    }

    /// Dense `W·x` accumulated in f32, the naive baseline the packed kernels
    /// are compared against.
    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "{}: x has {} entries, expected {}",
                self.name,
                x.len(),
                self.cols
            )));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(w, v)| w * v).sum())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_is_checked() {
        assert!(DenseTensor::new("w", 2, 3, vec![0.0; 5]).is_err());
        let t = DenseTensor::new("w", 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.row(1), &[4.0, 5.0, 6.0]);
        assert_eq!(t.matvec(&[1.0, 0.0, -1.0]).unwrap(), vec![-2.0, -2.0]);
    }

    #[test]
    fn non_finite_rejected() {
        let t = DenseTensor::new("w", 1, 2, vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(t.validate(), Err(Error::NonFinite(_))));
    }
}
