use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
///
/// No broadcasting: every binary op requires identical shapes (or the
/// matmul contract) and reports a [`Error::Dimension`] otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor2D {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor2D::from_vec(raw.rows, raw.cols, raw.data)
    }
}

fn check_finite(data: &[f64], op: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2D {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor2D {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "buffer of length {} cannot hold a {rows}x{cols} tensor",
                data.len()
            )));
        }
        check_finite(&data, "from_vec")?;
        Ok(Tensor2D { rows, cols, data })
    }

    /// Builds a tensor from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has length {} but row 0 has length {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers are responsible for keeping
    /// entries finite; the optimizer and finite-difference probes use this.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Gathers the given rows (in order) into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor2D {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor2D {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn matmul(&self, other: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "matmul of {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (n, m) = (self.rows, other.cols);
        let mut out = vec![0.0; n * m];
        // i-k-j order keeps the inner loop contiguous in both `other` and `out`.
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * m..(k + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        check_finite(&out, "matmul")?;
        Ok(Tensor2D {
            rows: n,
            cols: m,
            data: out,
        })
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor2D {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    fn zip_with(&self, other: &Tensor2D, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor2D> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "{op} of {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data: Vec<f64> = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        check_finite(&data, op)?;
        Ok(Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Tensor2D) -> Result<Tensor2D> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor2D) -> Result<Tensor2D> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor2D) -> Result<Tensor2D> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor2D> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        check_finite(&data, "map")?;
        Ok(Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Result<Tensor2D> {
        self.map(|v| v * s)
    }

    /// In-place `self += other`, used by gradient accumulation.
    pub fn add_assign(&mut self, other: &Tensor2D) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "add_assign of {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        check_finite(&self.data, "add_assign")
    }

    /// Adds the 1xcols `row` to every row.
    pub fn add_row(&self, row: &Tensor2D) -> Result<Tensor2D> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::Dimension(format!(
                "add_row of {}x{} and {}x{}",
                self.rows, self.cols, row.rows, row.cols
            )));
        }
        let mut data = self.data.clone();
        for chunk in data.chunks_mut(self.cols.max(1)) {
            for (a, b) in chunk.iter_mut().zip(&row.data) {
                *a += b;
            }
        }
        check_finite(&data, "add_row")?;
        Ok(Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Per-row sums as a rows x 1 column.
    pub fn row_sum(&self) -> Tensor2D {
        let data = (0..self.rows).map(|r| self.row(r).iter().sum()).collect();
        Tensor2D {
            rows: self.rows,
            cols: 1,
            data,
        }
    }

    /// Per-column sums as a 1 x cols row.
    pub fn col_sum(&self) -> Tensor2D {
        let mut data = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (d, v) in data.iter_mut().zip(self.row(r)) {
                *d += v;
            }
        }
        Tensor2D {
            rows: 1,
            cols: self.cols,
            data,
        }
    }

    /// Per-column means as a 1 x cols row. Errors on an empty tensor.
    pub fn col_mean(&self) -> Result<Tensor2D> {
        if self.rows == 0 {
            return Err(Error::Dimension("col_mean of a tensor with zero rows".into()));
        }
        self.col_sum().scale(1.0 / self.rows as f64)
    }

    /// Per-row maxima as a rows x 1 column.
    pub fn row_max(&self) -> Tensor2D {
        let data = (0..self.rows)
            .map(|r| self.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        Tensor2D {
            rows: self.rows,
            cols: 1,
            data,
        }
    }

    /// Row-wise softmax with max-shift.
    pub fn softmax_rows(&self) -> Result<Tensor2D> {
        let mut data = self.data.clone();
        for chunk in data.chunks_mut(self.cols.max(1)) {
            let m = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in chunk.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in chunk.iter_mut() {
                *v /= z;
            }
        }
        check_finite(&data, "softmax_rows")?;
        Ok(Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Row-wise log-sum-exp as a rows x 1 column.
    pub fn logsumexp_rows(&self) -> Result<Tensor2D> {
        let data: Vec<f64> = (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        check_finite(&data, "logsumexp_rows")?;
        Ok(Tensor2D {
            rows: self.rows,
            cols: 1,
            data,
        })
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Natural log clamped away from zero so probabilities that underflow do not
/// produce infinities.
pub fn stable_ln(p: f64) -> f64 {
    p.max(f64::MIN_POSITIVE).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn triple_loop(a: &Tensor2D, b: &Tensor2D) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out[i * b.cols() + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let m = Tensor2D::from_rows(&[[1.5, -2.0], [0.25, 7.0]]).unwrap();
        assert_eq!(Tensor2D::identity(2).matmul(&m).unwrap(), m);

        let a = Tensor2D::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Tensor2D::from_rows(&[[1.0], [1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(7);
        let a = rng.normal(5, 7, 0.0, 1.0).unwrap();
        let b = rng.normal(7, 3, 0.0, 1.0).unwrap();
        let got = a.matmul(&b).unwrap();
        assert_eq!(got.shape(), (5, 3));
        for (g, e) in got.data().iter().zip(triple_loop(&a, &b)) {
            assert!((g - e).abs() <= 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor2D::zeros(2, 3);
        let b = Tensor2D::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("2x3 by 2x3"), "{err}");
    }

    #[test]
    fn non_finite_is_an_error() {
        let a = Tensor2D::filled(1, 1, 1e308);
        assert!(matches!(a.scale(10.0), Err(Error::NonFinite(_))));
        assert!(Tensor2D::from_vec(1, 1, vec![f64::NAN]).is_err());
        assert!(Tensor2D::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let t = Tensor2D::from_rows(&[[1000.0, 1000.0], [0.0, 3f64.ln()]]).unwrap();
        let p = t.softmax_rows().unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);
        assert!((p.get(1, 0) - 0.25).abs() < 1e-15);
        assert!((p.get(1, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn reductions() {
        let t = Tensor2D::from_rows(&[[1.0, 2.0], [3.0, -4.0]]).unwrap();
        assert_eq!(t.row_sum().data(), &[3.0, -1.0]);
        assert_eq!(t.col_sum().data(), &[4.0, -2.0]);
        assert_eq!(t.col_mean().unwrap().data(), &[2.0, -1.0]);
        assert_eq!(t.row_max().data(), &[2.0, 3.0]);
        assert!(Tensor2D::zeros(0, 3).col_mean().is_err());
    }

    proptest! {
        #[test]
        fn transpose_is_involutive(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let m = Rng::new(seed).normal(rows, cols, 0.0, 3.0).unwrap();
            prop_assert_eq!(m.transpose().transpose(), m);
        }

        #[test]
        fn ops_leave_inputs_untouched(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let a = rng.normal(3, 4, 0.0, 1.0).unwrap();
            let b = rng.normal(3, 4, 0.0, 1.0).unwrap();
            let (a0, b0) = (a.clone(), b.clone());
            let _ = a.add(&b).unwrap();
            let _ = a.mul(&b).unwrap();
            let _ = a.matmul(&b.transpose()).unwrap();
            prop_assert_eq!(a, a0);
            prop_assert_eq!(b, b0);
        }

        #[test]
        fn softmax_rows_sum_to_one(seed in any::<u64>(), mag in 0.0f64..1000.0) {
            let l = Rng::new(seed).normal(4, 5, 0.0, mag).unwrap();
            let p = l.softmax_rows().unwrap();
            for r in 0..4 {
                let s: f64 = p.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }
}
