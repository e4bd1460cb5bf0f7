//! Minimal row-major f64 matrix used by the model and the training loop.
//!
//! Everything is deliberately plain: flat `Vec<f64>` storage, `ikj` loop
//! order so the inner loop streams rows of the right-hand operand, no
//! threading inside a single matmul (parallelism lives at the batch/item
//! level where it cannot change reduction order).

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match rows*cols");
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.rows, other.rows);
        debug_assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Mean over the rows selected by `mask` (true = keep). Returns a length-`cols` vector.
    pub fn masked_row_mean(&self, mask: &[bool]) -> Option<Vec<f64>> {
        debug_assert_eq!(mask.len(), self.rows);
        let n = mask.iter().filter(|&&m| m).count();
        if n == 0 {
            return None;
        }
        let mut mean = vec![0.0; self.cols];
        for (r, &keep) in mask.iter().enumerate() {
            if keep {
                for (m, v) in mean.iter_mut().zip(self.row(r)) {
                    *m += v;
                }
            }
        }
        let inv = 1.0 / n as f64;
        for m in &mut mean {
            *m *= inv;
        }
        Some(mean)
    }
}

/// c = a @ b, a: [n,k], b: [k,m]
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul inner dims");
    let mut c = Mat::zeros(a.rows, b.cols);
    matmul_into(a, b, &mut c);
    c
}

/// Four output rows are built at once so every streamed row of `b` feeds
/// four fused multiply-adds.
pub fn matmul_into(a: &Mat, b: &Mat, c: &mut Mat) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(c.rows, a.rows);
    assert_eq!(c.cols, b.cols);
    c.data.fill(0.0);
    let (ar, ac, bc) = (a.rows, a.cols, b.cols);
    let mut i = 0;
    while i + 4 <= ar {
        let (c0, rest) = c.data[i * bc..].split_at_mut(bc);
        let (c1, rest) = rest.split_at_mut(bc);
        let (c2, rest) = rest.split_at_mut(bc);
        let c3 = &mut rest[..bc];
        for kk in 0..ac {
            let b_row = &b.data[kk * bc..(kk + 1) * bc];
            let x0 = a.data[i * ac + kk];
            let x1 = a.data[(i + 1) * ac + kk];
            let x2 = a.data[(i + 2) * ac + kk];
            let x3 = a.data[(i + 3) * ac + kk];
            for ((((v0, v1), v2), v3), &bv) in c0
                .iter_mut()
                .zip(c1.iter_mut())
                .zip(c2.iter_mut())
                .zip(c3.iter_mut())
                .zip(b_row)
            {
                *v0 = bv.mul_add(x0, *v0);
                *v1 = bv.mul_add(x1, *v1);
                *v2 = bv.mul_add(x2, *v2);
                *v3 = bv.mul_add(x3, *v3);
            }
        }
        i += 4;
    }
    while i < ar {
        let c_row = &mut c.data[i * bc..(i + 1) * bc];
        let a_row = &a.data[i * ac..(i + 1) * ac];
        for (kk, &x) in a_row.iter().enumerate() {
            let b_row = &b.data[kk * bc..(kk + 1) * bc];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = bv.mul_add(x, *cv);
            }
        }
        i += 1;
    }
}

/// c += a^T @ b, a: [n,r], b: [n,m], c: [r,m]. Used for weight gradients.
/// Four `n` rows per pass so `c` is streamed a quarter as often.
pub fn matmul_tn_acc(a: &Mat, b: &Mat, c: &mut Mat) {
    assert_eq!(a.rows, b.rows);
    assert_eq!(c.rows, a.cols);
    assert_eq!(c.cols, b.cols);
    let (n, r_dim, m) = (a.rows, a.cols, b.cols);
    let mut nn = 0;
    while nn + 4 <= n {
        let b0 = &b.data[nn * m..(nn + 1) * m];
        let b1 = &b.data[(nn + 1) * m..(nn + 2) * m];
        let b2 = &b.data[(nn + 2) * m..(nn + 3) * m];
        let b3 = &b.data[(nn + 3) * m..(nn + 4) * m];
        for r in 0..r_dim {
            let x0 = a.data[nn * r_dim + r];
            let x1 = a.data[(nn + 1) * r_dim + r];
            let x2 = a.data[(nn + 2) * r_dim + r];
            let x3 = a.data[(nn + 3) * r_dim + r];
            let c_row = &mut c.data[r * m..(r + 1) * m];
            for ((((cv, &v0), &v1), &v2), &v3) in
                c_row.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3)
            {
                let s = v0.mul_add(x0, v1.mul_add(x1, v2.mul_add(x2, v3 * x3)));
                *cv += s;
            }
        }
        nn += 4;
    }
    while nn < n {
        let b_row = &b.data[nn * m..(nn + 1) * m];
        for r in 0..r_dim {
            let x = a.data[nn * r_dim + r];
            let c_row = &mut c.data[r * m..(r + 1) * m];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = bv.mul_add(x, *cv);
            }
        }
        nn += 1;
    }
}

/// c = a @ b^T, a: [n,m], b: [r,m], c: [n,r]. Used for input gradients.
pub fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols);
    let mut c = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let c_row = c.row_mut(i);
        for (r, cv) in c_row.iter_mut().enumerate() {
            let b_row = b.row(r);
            *cv = dot(a_row, b_row);
        }
    }
    c
}

/// Four-accumulator fused dot product.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let o = i * 4;
        acc[0] = a[o].mul_add(b[o], acc[0]);
        acc[1] = a[o + 1].mul_add(b[o + 1], acc[1]);
        acc[2] = a[o + 2].mul_add(b[o + 2], acc[2]);
        acc[3] = a[o + 3].mul_add(b[o + 3], acc[3]);
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail = a[i].mul_add(b[i], tail);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Numerically stable softmax over a slice, in place.
pub fn softmax_inplace(x: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in x.iter_mut() {
        *v *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_tn_matches_explicit_transpose() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(2, 2, vec![1.0, -1.0, 0.5, 2.0]);
        let mut c = Mat::zeros(3, 2);
        matmul_tn_acc(&a, &b, &mut c);
        // a^T is [3,2]; recompute by hand
        let at = Mat::from_vec(3, 2, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let expect = matmul(&at, &b);
        assert_eq!(c.data, expect.data);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(4, 3, (0..12).map(|v| v as f64).collect());
        let c = matmul_nt(&a, &b);
        let bt = Mat::from_vec(3, 4, vec![0.0, 3.0, 6.0, 9.0, 1.0, 4.0, 7.0, 10.0, 2.0, 5.0, 8.0, 11.0]);
        let expect = matmul(&a, &bt);
        assert_eq!(c.data, expect.data);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut x = vec![1.0, 2.0, 3.0, -5.0];
        softmax_inplace(&mut x);
        let s: f64 = x.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_mean_skips_rows() {
        let m = Mat::from_vec(3, 2, vec![1.0, 2.0, 100.0, 200.0, 3.0, 4.0]);
        let mean = m.masked_row_mean(&[true, false, true]).unwrap();
        assert_eq!(mean, vec![2.0, 3.0]);
        assert!(m.masked_row_mean(&[false, false, false]).is_none());
    }
}
