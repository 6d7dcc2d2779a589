use crate::error::{Error, Result};

/// Dense row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: "matrix data",
                expected: (rows, cols),
                found: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    context: "matrix rows",
                    expected: (rows.len(), cols),
                    found: (rows.len(), r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f32) {
        self.data[r * self.cols + c] = value;
    }

    pub fn to_rows(&self) -> Vec<Vec<f32>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    /// New matrix whose row `i` is row `order[i]` of `self`.
    pub fn gather_rows(&self, order: &[usize]) -> Result<Matrix> {
        if order.len() != self.rows {
            return Err(Error::ShapeMismatch {
                context: "row permutation",
                expected: (self.rows, self.cols),
                found: (order.len(), self.cols),
            });
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &src in order {
            if src >= self.rows {
                return Err(Error::TokenOutOfRange {
                    index: src,
                    len: self.rows,
                });
            }
            data.extend_from_slice(self.row(src));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Inverse of [`Matrix::gather_rows`]: row `i` of `self` lands at row `order[i]`.
    pub fn scatter_rows(&self, order: &[usize]) -> Result<Matrix> {
        if order.len() != self.rows {
            return Err(Error::ShapeMismatch {
                context: "row permutation",
                expected: (self.rows, self.cols),
                found: (order.len(), self.cols),
            });
        }
        let mut out = Matrix::zeros(self.rows, self.cols);
        for (i, &dst) in order.iter().enumerate() {
            if dst >= self.rows {
                return Err(Error::TokenOutOfRange {
                    index: dst,
                    len: self.rows,
                });
            }
            out.data[dst * self.cols..(dst + 1) * self.cols].copy_from_slice(self.row(i));
        }
        Ok(out)
    }

    pub(crate) fn check_finite(&self, context: &'static str) -> Result<()> {
        match self.data.iter().find(|v| !v.is_finite()) {
            Some(&value) => Err(Error::NonFinite { value, context }),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gather_then_scatter_is_identity() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let order = [2, 0, 1];
        let g = m.gather_rows(&order).unwrap();
        assert_eq!(g.row(0), &[5.0, 6.0]);
        assert_eq!(g.scatter_rows(&order).unwrap(), m);
    }

    #[test]
    fn ragged_rows_rejected() {
        let rows: Vec<Vec<f32>> = vec![vec![1.0, 2.0], vec![3.0]];
        assert!(Matrix::from_rows(&rows).is_err());
    }
}
