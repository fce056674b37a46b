use serde::{Deserialize, Serialize};

/// Dense row-major 2-D float64 array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows*cols");
        Tensor2 { rows, cols, data }
    }

    /// Single-row matrix borrowing shape semantics from a slice.
    pub fn from_row(row: &[f64]) -> Self {
        Tensor2::from_vec(1, row.len(), row.to_vec())
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

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    /// self * other^T. `other` is [n x k] with k == self.cols.
    pub fn matmul_nt(&self, other: &Tensor2) -> Tensor2 {
        assert_eq!(self.cols, other.cols, "inner dims must match (nt)");
        let mut out = Tensor2::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            let dst = out.row_mut(i);
            for (j, d) in dst.iter_mut().enumerate() {
                let b = other.row(j);
                let mut acc = 0.0;
                for k in 0..a.len() {
                    acc += a[k] * b[k];
                }
                *d = acc;
            }
        }
        out
    }

    /// self * other. `other` is [k x n] with k == self.cols.
    pub fn matmul_nn(&self, other: &Tensor2) -> Tensor2 {
        assert_eq!(self.cols, other.rows, "inner dims must match (nn)");
        let mut out = Tensor2::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let b = other.row(k);
                for j in 0..b.len() {
                    dst[j] += aik * b[j];
                }
            }
        }
        out
    }

    /// self^T * other. Both have self.rows == other.rows.
    pub fn matmul_tn(&self, other: &Tensor2) -> Tensor2 {
        assert_eq!(self.rows, other.rows, "outer dims must match (tn)");
        let mut out = Tensor2::zeros(self.cols, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let b = other.row(i);
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let dst = out.row_mut(k);
                for j in 0..b.len() {
                    dst[j] += aik * b[j];
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor2) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
