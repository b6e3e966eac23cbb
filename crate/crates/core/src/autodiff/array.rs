//! Dense row-major 2-D arrays of `f64` and the kernels the tape is built on.
//!
//! Every array is rank 2. Vectors are `1 × n` rows and scalars are `1 × 1`.

use super::AutodiffError;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: [usize; 2], data: Vec<f64>) -> Result<Self, AutodiffError> {
        let [rows, cols] = shape;
        if rows == 0 || cols == 0 {
            return Err(AutodiffError::Contract(format!(
                "array extents must be positive, got {rows}x{cols}"
            )));
        }
        if rows * cols != data.len() {
            return Err(AutodiffError::Contract(format!(
                "shape {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Array { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "array extents must be positive");
        Array { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn scalar(value: f64) -> Self {
        Array { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "row vector must be non-empty");
        Array { rows: 1, cols: data.len(), data }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, AutodiffError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(AutodiffError::Contract("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new([rows.len(), cols], data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Array { rows, cols, data }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single value of a `1 × 1` array.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar array {:?}", self.shape());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Array {
        Array::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Array) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// `out = a · b` for row-major `a (m×k)`, `b (k×n)`.
pub(crate) fn matmul(a: &Array, b: &Array) -> Array {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    debug_assert_eq!(k, b.rows);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a.data[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Array { rows: m, cols: n, data: out }
}

/// `acc += g · bᵀ` where `g (m×n)`, `b (k×n)`, `acc (m×k)`.
pub(crate) fn matmul_nt_acc(g: &Array, b: &Array, acc: &mut Array) {
    let (m, n, k) = (g.rows, g.cols, b.rows);
    for i in 0..m {
        let grow = &g.data[i * n..(i + 1) * n];
        let arow = &mut acc.data[i * k..(i + 1) * k];
        for (kk, a) in arow.iter_mut().enumerate() {
            let brow = &b.data[kk * n..(kk + 1) * n];
            let mut s = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            *a += s;
        }
    }
}

/// `acc += aᵀ · g` where `a (m×k)`, `g (m×n)`, `acc (k×n)`.
pub(crate) fn matmul_tn_acc(a: &Array, g: &Array, acc: &mut Array) {
    let (m, k, n) = (a.rows, a.cols, g.cols);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let grow = &g.data[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let drow = &mut acc.data[kk * n..(kk + 1) * n];
            for (d, &gv) in drow.iter_mut().zip(grow) {
                *d += av * gv;
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub(crate) fn row_softmax(x: &Array) -> Array {
    let mut out = x.clone();
    for r in 0..x.rows {
        let row = &mut out.data[r * x.cols..(r + 1) * x.cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_of_ones_sums_inner_extent() {
        let a = Array::filled(2, 3, 1.0);
        let b = Array::filled(3, 2, 1.0);
        assert_eq!(matmul(&a, &b), Array::filled(2, 2, 3.0));
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = Array::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Array::from_rows(&[[5.0, 6.0, 7.0], [8.0, 9.0, 10.0]]).unwrap();
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[21.0, 24.0, 27.0, 47.0, 54.0, 61.0]);
    }

    #[test]
    fn transposed_accumulators_agree_with_explicit_transpose() {
        let a = Array::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.5 - 2.0);
        let g = Array::from_fn(3, 5, |r, c| (r as f64 - c as f64) * 0.25);
        let b = Array::from_fn(4, 5, |r, c| ((r + 2 * c) % 7) as f64 - 3.0);
        let mut da = Array::zeros(3, 4);
        matmul_nt_acc(&g, &b, &mut da);
        assert_eq!(da, matmul(&g, &b.transpose()));
        let mut db = Array::zeros(4, 5);
        matmul_tn_acc(&a, &g, &mut db);
        assert_eq!(db, matmul(&a.transpose(), &g));
    }

    #[test]
    fn shape_and_length_are_validated() {
        assert!(Array::new([2, 2], vec![1.0; 3]).is_err());
        assert!(Array::new([0, 2], vec![]).is_err());
        assert!(Array::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn softmax_survives_large_logits() {
        let x = Array::row_vector(vec![1000.0, 1000.0, -1000.0]);
        let y = row_softmax(&x);
        assert!(y.is_finite());
        assert!((y.get(0, 0) - 0.5).abs() < 1e-15);
    }
}
