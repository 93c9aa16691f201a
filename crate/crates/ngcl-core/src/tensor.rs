//! Dense row-major 2-D float64 tensor, the sole numeric carrier.
//!
//! Tensors are immutable after construction in all public pipelines; ops
//! return fresh tensors. Rank is fixed at 2 and there is no broadcasting.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Entry count above which matmul fans out row-wise. Row-parallel
/// execution is bit-identical to sequential: each output row is
/// accumulated by exactly one worker in the same order.
const PAR_MATMUL_FLOPS: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "new",
                format!("data length {} != {rows}x{cols}", data.len()),
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Panicking constructor for literals whose shape is known correct.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::new(rows, cols, data).expect("from_vec: shape/length mismatch")
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::shape("from_rows", "ragged row lengths"));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(r, c, data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value of a 1x1 tensor.
    pub fn scalar(&self) -> Result<f64> {
        if self.rows * self.cols != 1 {
            return Err(Error::shape(
                "scalar",
                format!("expected 1x1, got {}x{}", self.rows, self.cols),
            ));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul_elem(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| c * x)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{}x{} . {}x{}: inner dimensions differ",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let (n, m, p) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(n, p);
        let work = n * m * p;
        let body = |i: usize, out_row: &mut [f64]| {
            let a_row = &self.data[i * m..(i + 1) * m];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * p..(k + 1) * p];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        };
        if work >= PAR_MATMUL_FLOPS {
            out.data
                .par_chunks_mut(p)
                .enumerate()
                .for_each(|(i, row)| body(i, row));
        } else {
            for (i, row) in out.data.chunks_mut(p).enumerate() {
                body(i, row);
            }
        }
        Ok(out)
    }

    /// Per-row sums as an n x 1 tensor.
    pub fn row_sums(&self) -> Tensor {
        let data = (0..self.rows)
            .map(|i| self.row(i).iter().sum())
            .collect();
        Tensor {
            rows: self.rows,
            cols: 1,
            data,
        }
    }

    pub fn mean_all(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Row-wise log-sum-exp with max-shift stabilization, as an n x 1 tensor.
    pub fn logsumexp_rows(&self) -> Tensor {
        let data = (0..self.rows)
            .map(|i| {
                let row = self.row(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
                m + s.ln()
            })
            .collect();
        Tensor {
            rows: self.rows,
            cols: 1,
            data,
        }
    }

    pub fn row_norm(&self, i: usize) -> f64 {
        self.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Rows rescaled to unit L2 norm. Rows with norm <= `tiny` are left as
    /// zero rows (the gated-everything-off case); see the matching backward
    /// rule in the graph.
    pub fn l2_normalize_rows(&self, tiny: f64) -> Tensor {
        let mut out = self.clone();
        for i in 0..self.rows {
            let n = self.row_norm(i);
            let row = out.row_mut(i);
            if n > tiny {
                for x in row.iter_mut() {
                    *x /= n;
                }
            } else {
                for x in row.iter_mut() {
                    *x = 0.0;
                }
            }
        }
        out
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn first_nonfinite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|x| !x.is_finite())
            .map(|p| (p / self.cols, p % self.cols))
    }

    /// Largest absolute elementwise difference; test helper.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Numerically stable logistic function, branching on sign.
#[inline]
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_vec(3, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let i = Tensor::identity(3);
        assert_eq!(i.matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&i).unwrap(), a);
    }

    #[test]
    fn matmul_shape_error_names_dims() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("2x3"), "{err}");
    }

    #[test]
    fn matmul_parallel_matches_sequential() {
        // Big enough to take the parallel path; compare against a naive loop.
        let n = 70;
        let a = Tensor::from_vec(
            n,
            n,
            (0..n * n).map(|i| ((i * 37 % 101) as f64) - 50.0).collect(),
        );
        let b = Tensor::from_vec(
            n,
            n,
            (0..n * n).map(|i| ((i * 53 % 97) as f64) / 7.0).collect(),
        );
        let c = a.matmul(&b).unwrap();
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += a.get(i, k) * b.get(k, j);
                }
                // Same accumulation order is not guaranteed by the naive
                // jik loop, so allow rounding noise here.
                assert!((c.get(i, j) - s).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn logsumexp_is_shift_stable() {
        let t = Tensor::from_vec(1, 2, vec![1000.0, 1000.0]);
        let l = t.logsumexp_rows();
        assert!((l.get(0, 0) - (1000.0 + 2.0_f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn l2_normalize_rows_unit_norm() {
        let t = Tensor::from_vec(2, 2, vec![3.0, 4.0, 0.0, 0.0]);
        let n = t.l2_normalize_rows(1e-30);
        assert!((n.row_norm(0) - 1.0).abs() < 1e-12);
        assert_eq!(n.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn stable_sigmoid_extremes() {
        assert_eq!(stable_sigmoid(0.0), 0.5);
        assert!(stable_sigmoid(-745.0) > 0.0);
        assert!(stable_sigmoid(40.0) <= 1.0);
        assert!((stable_sigmoid(3.0) + stable_sigmoid(-3.0) - 1.0).abs() < 1e-15);
    }
}
