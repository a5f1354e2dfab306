//! Minimal row-major `f64` matrix with the three product shapes the
//! classifier needs. Kept deliberately small: the largest operand here is a
//! 128x196 minibatch, so loop order matters more than anything clever.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds from a flat row-major buffer.
    ///
    /// # Panics
    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix shape mismatch");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// True when the stored buffer is consistent with the declared shape.
    pub fn shape_consistent(&self) -> bool {
        self.data.len() == self.rows * self.cols
    }

    /// `self * other^T`;`self` is `m x k`, `other` is `n x k`, result `m x n`.
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            let dst = out.row_mut(i);
            for (j, d) in dst.iter_mut().enumerate() {
                let b = other.row(j);
                let mut acc = 0.0;
                for (x, y) in a.iter().zip(b) {
                    acc += x * y;
                }
                *d = acc;
            }
        }
        out
    }

    /// `self * other`; `self` is `m x k`, `other` is `k x n`, result `m x n`.
    pub fn matmul_nn(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            for (k, &aik) in a.iter().enumerate() {
                let b = other.row(k);
                let dst = out.row_mut(i);
                for (d, &bkj) in dst.iter_mut().zip(b) {
                    *d += aik * bkj;
                }
            }
        }
        out
    }

    /// `self^T * other`; `self` is `k x m`, `other` is `k x n`, result `m x n`.
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "inner dimension mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a = self.row(k);
            let b = other.row(k);
            for (i, &aki) in a.iter().enumerate() {
                let dst = out.row_mut(i);
                for (d, &bkj) in dst.iter_mut().zip(b) {
                    *d += aki * bkj;
                }
            }
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_shapes_agree() {
        // a: 2x3, b: 4x3, c: 3x4
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Matrix::from_vec(4, 3, (0..12).map(f64::from).collect());
        let nt = a.matmul_nt(&b);
        assert_eq!((nt.rows(), nt.cols()), (2, 4));
        // row 0 of a against row 1 of b: [1,2,3]·[3,4,5] = 26
        assert_eq!(nt[(0, 1)], 26.0);

        let c = Matrix::from_vec(3, 4, (0..12).map(f64::from).collect());
        let nn = a.matmul_nn(&c);
        assert_eq!((nn.rows(), nn.cols()), (2, 4));
        // [1,2,3]·[0,4,8] = 32
        assert_eq!(nn[(0, 0)], 32.0);

        let tn = a.matmul_tn(&a);
        assert_eq!((tn.rows(), tn.cols()), (3, 3));
        assert_eq!(tn[(0, 0)], 17.0); // 1*1 + 4*4
    }

    #[test]
    fn transpose_products_match_naive() {
        let a = Matrix::from_vec(3, 2, vec![1.0, -2.0, 0.5, 3.0, -1.0, 2.0]);
        let b = Matrix::from_vec(3, 4, (0..12).map(|i| f64::from(i) * 0.25).collect());
        let tn = a.matmul_tn(&b);
        for i in 0..2 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += a[(k, i)] * b[(k, j)];
                }
                assert!((tn[(i, j)] - acc).abs() < 1e-12);
            }
        }
    }
}
