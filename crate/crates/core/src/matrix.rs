use serde::{Deserialize, Serialize};

/// Dense row-major `f64` matrix. Vectors are 1×n or n×1 matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape {rows}x{cols} does not match data");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Mat {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Mat::from_vec(1, 1, vec![v])
    }

    pub fn column(v: Vec<f64>) -> Self {
        let n = v.len();
        Mat::from_vec(n, 1, v)
    }

    pub fn row_vector(v: Vec<f64>) -> Self {
        let n = v.len();
        Mat::from_vec(1, n, v)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Single value of a 1×1 matrix.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a {}x{} matrix", self.rows, self.cols);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self @ other`
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        matmul_acc(self, other, &mut out);
        out
    }

    /// `self @ otherᵀ`
    pub fn matmul_bt(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_bt shape mismatch");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (j, oj) in o.iter_mut().enumerate() {
                let b = &other.data[j * other.cols..(j + 1) * other.cols];
                *oj = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    /// `selfᵀ @ other`
    pub fn matmul_at(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "matmul_at shape mismatch");
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a = self.row(k);
            let b = other.row(k);
            for (i, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (oj, bj) in o.iter_mut().zip(b) {
                    *oj += aik * bj;
                }
            }
        }
        out
    }
}

/// `out += a @ b`
pub(crate) fn matmul_acc(a: &Mat, b: &Mat, out: &mut Mat) {
    let n = b.cols;
    for i in 0..a.rows {
        let arow = &a.data[i * a.cols..(i + 1) * a.cols];
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * n..(k + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let b = Mat::from_rows(&[vec![1.0, 0.5], vec![-1.0, 2.0], vec![0.0, 1.0]]);
        let c = a.matmul(&b);
        assert_eq!(c, Mat::from_rows(&[vec![-1.0, 7.5], vec![-1.0, 18.0]]));
        assert_eq!(a.matmul_bt(&b.transpose()), c);
        assert_eq!(a.transpose().matmul_at(&b), c);
    }
}
