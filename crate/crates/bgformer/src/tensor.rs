use std::sync::atomic::{AtomicU64, Ordering};

/// Counter for floating-point work done by matrix products and softmax
/// normalization. Matrix products count 2*m*k*n (multiply + add per entry of
/// the inner loop); a row softmax over r x c counts 5*r*c (max scan, shift,
/// exp, sum, divide). Elementwise arithmetic is not counted.
pub mod flops {
    use super::*;

    static COUNTER: AtomicU64 = AtomicU64::new(0);

    pub fn reset() {
        COUNTER.store(0, Ordering::Relaxed);
    }

    pub fn total() -> u64 {
        COUNTER.load(Ordering::Relaxed)
    }

    pub(crate) fn add(n: u64) {
        COUNTER.fetch_add(n, Ordering::Relaxed);
    }

    /// Runs `f` and returns its result together with the flops it accrued.
    pub fn counted<T>(f: impl FnOnce() -> T) -> (T, u64) {
        let before = total();
        let out = f();
        (out, total() - before)
    }
}

/// Dense row-major f64 matrix.
#[derive(Clone, Debug, PartialEq)]
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

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor2::zeros(n, n);
        for i in 0..n {
            t.set(i, i, 1.0);
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match shape");
        Tensor2 { rows, cols, data }
    }

    pub fn from_nested(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor2 { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// self (m x k) times other (k x n).
    pub fn matmul(&self, other: &Tensor2) -> Tensor2 {
        assert_eq!(self.cols, other.rows, "matmul inner dims");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Tensor2::zeros(m, n);
        if m > 0 && k > 0 && n > 0 {
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    self.data.as_ptr(),
                    k as isize,
                    1,
                    other.data.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    out.data.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        flops::add(2 * (m * k * n) as u64);
        out
    }

    /// self (m x k) times otherᵀ where other is (n x k).
    pub fn matmul_bt(&self, other: &Tensor2) -> Tensor2 {
        assert_eq!(self.cols, other.cols, "matmul_bt inner dims");
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Tensor2::zeros(m, n);
        if m > 0 && k > 0 && n > 0 {
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    self.data.as_ptr(),
                    k as isize,
                    1,
                    other.data.as_ptr(),
                    1,
                    k as isize,
                    0.0,
                    out.data.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        flops::add(2 * (m * k * n) as u64);
        out
    }

    /// selfᵀ times other where self is (m x k) and other (m x n), giving (k x n).
    pub fn matmul_ta(&self, other: &Tensor2) -> Tensor2 {
        assert_eq!(self.rows, other.rows, "matmul_ta inner dims");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Tensor2::zeros(k, n);
        if m > 0 && k > 0 && n > 0 {
            unsafe {
                matrixmultiply::dgemm(
                    k,
                    m,
                    n,
                    1.0,
                    self.data.as_ptr(),
                    1,
                    k as isize,
                    other.data.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    out.data.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        flops::add(2 * (m * k * n) as u64);
        out
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn add(&self, other: &Tensor2) -> Tensor2 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor2) -> Tensor2 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.zip(other, |a, b| a - b)
    }

    pub fn mul_elem(&self, other: &Tensor2) -> Tensor2 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor2 {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor2, f: impl Fn(f64, f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Broadcasts a length-cols vector over every row.
    pub fn add_row_vec(&self, v: &[f64]) -> Tensor2 {
        assert_eq!(v.len(), self.cols);
        let mut out = self.clone();
        for i in 0..self.rows {
            for (x, b) in out.row_mut(i).iter_mut().zip(v) {
                *x += b;
            }
        }
        out
    }

    /// Numerically stable softmax applied independently to each row.
    pub fn row_softmax(&self) -> Tensor2 {
        assert!(self.cols > 0, "softmax over empty row");
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = out.row_mut(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        flops::add(5 * (self.rows * self.cols) as u64);
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor2) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0_f64, |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the listed rows (in order, repeats allowed) into a new matrix.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor2 {
        let mut out = Tensor2::zeros(idx.len(), self.cols);
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < self.rows, "row index out of range");
            out.row_mut(r).copy_from_slice(self.row(i));
        }
        out
    }

    /// Stacks blocks side by side; all blocks must share a row count.
    pub fn concat_cols(blocks: &[&Tensor2]) -> Tensor2 {
        assert!(!blocks.is_empty());
        let rows = blocks[0].rows;
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut out = Tensor2::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for b in blocks {
                assert_eq!(b.rows, rows, "concat_cols row mismatch");
                out.row_mut(i)[off..off + b.cols].copy_from_slice(b.row(i));
                off += b.cols;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor2, b: &Tensor2) -> Tensor2 {
        let mut c = Tensor2::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                c.set(i, j, s);
            }
        }
        c
    }

    fn arange(rows: usize, cols: usize) -> Tensor2 {
        Tensor2::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|i| (i as f64) * 0.37 - 4.0).collect(),
        )
    }

    #[test]
    fn test_matmul_matches_naive() {
        let a = arange(5, 7);
        let b = arange(7, 3);
        let c = a.matmul(&b);
        let oracle = naive_matmul(&a, &b);
        assert!(c.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn test_matmul_bt_matches_transpose() {
        let a = arange(4, 6);
        let b = arange(9, 6);
        let direct = a.matmul_bt(&b);
        let via_t = a.matmul(&b.transpose());
        assert!(direct.max_abs_diff(&via_t) < 1e-12);
    }

    #[test]
    fn test_matmul_ta_matches_transpose() {
        let a = arange(8, 5);
        let b = arange(8, 4);
        let direct = a.matmul_ta(&b);
        let via_t = a.transpose().matmul(&b);
        assert!(direct.max_abs_diff(&via_t) < 1e-12);
    }

    #[test]
    fn test_identity_is_neutral() {
        let a = arange(3, 3);
        let i = Tensor2::identity(3);
        assert!(a.matmul(&i).max_abs_diff(&a) < 1e-15);
        assert!(i.matmul(&a).max_abs_diff(&a) < 1e-15);
    }

    #[test]
    fn test_row_softmax_oracle() {
        // softmax([1, 2, 3]) computed to 20 digits with arbitrary precision
        let t = Tensor2::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        let s = t.row_softmax();
        let expect = [
            0.090030573170380457998,
            0.24472847105479765247,
            0.66524095577482188953,
        ];
        for j in 0..3 {
            assert!((s.get(0, j) - expect[j]).abs() < 1e-15);
        }
        let row_sum: f64 = s.row(0).iter().sum();
        assert!((row_sum - 1.0).abs() < 1e-15);
    }

    #[test]
    fn test_row_softmax_uniform_on_equal_logits() {
        let t = Tensor2::zeros(2, 4);
        let s = t.row_softmax();
        for i in 0..2 {
            for j in 0..4 {
                assert!((s.get(i, j) - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn test_row_softmax_shift_invariant() {
        let t = arange(3, 5);
        let shifted = t.map(|v| v + 123.456);
        assert!(t.row_softmax().max_abs_diff(&shifted.row_softmax()) < 1e-12);
    }

    #[test]
    fn test_row_softmax_large_logits_stay_finite() {
        let t = Tensor2::from_vec(1, 2, vec![1000.0, 999.0]);
        let s = t.row_softmax();
        assert!(s.all_finite());
        assert!(s.get(0, 0) > s.get(0, 1));
    }

    #[test]
    fn test_flop_count_matmul_exact() {
        flops::reset();
        let a = arange(5, 7);
        let b = arange(7, 3);
        let (_c, used) = flops::counted(|| a.matmul(&b));
        assert_eq!(used, 2 * 5 * 7 * 3);
    }

    #[test]
    fn test_flop_count_doubles_with_rows() {
        let b = arange(7, 3);
        let (_x, f1) = flops::counted(|| arange(10, 7).matmul(&b));
        let (_y, f2) = flops::counted(|| arange(20, 7).matmul(&b));
        assert_eq!(f2, 2 * f1);
    }

    #[test]
    fn test_gather_and_concat() {
        let a = arange(4, 3);
        let g = a.gather_rows(&[2, 0, 2]);
        assert_eq!(g.rows(), 3);
        assert_eq!(g.row(0), a.row(2));
        assert_eq!(g.row(1), a.row(0));
        let c = Tensor2::concat_cols(&[&a, &a]);
        assert_eq!(c.cols(), 6);
        assert_eq!(&c.row(1)[0..3], a.row(1));
        assert_eq!(&c.row(1)[3..6], a.row(1));
    }

    #[test]
    fn test_add_row_vec_broadcasts() {
        let a = Tensor2::zeros(2, 3);
        let out = a.add_row_vec(&[1.0, 2.0, 3.0]);
        assert_eq!(out.row(0), &[1.0, 2.0, 3.0]);
        assert_eq!(out.row(1), &[1.0, 2.0, 3.0]);
    }
}
