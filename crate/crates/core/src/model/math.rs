//! Dense row-major matrix kernels and activation functions.
//!
//! Everything is written as plain loops over contiguous rows so that a given
//! input produces bit-identical results regardless of thread count; no kernel
//! here reorders its accumulation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · other`, shapes (m,k)·(k,n).
    pub fn matmul(&self, other: &Mat<F>) -> Mat<F> {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (t, &a) in a_row.iter().enumerate() {
                let b_row = other.row(t);
                for j in 0..b_row.len() {
                    out_row[j] += a * b_row[j];
                }
            }
        }
        out
    }

    /// `self · otherᵀ`, shapes (m,k)·(n,k)ᵀ.
    pub fn matmul_bt(&self, other: &Mat<F>) -> Mat<F> {
        assert_eq!(self.cols, other.cols, "matmul_bt inner dimensions");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for j in 0..other.rows {
                let b_row = other.row(j);
                let mut acc = F::zero();
                for t in 0..a_row.len() {
                    acc += a_row[t] * b_row[t];
                }
                out_row[j] = acc;
            }
        }
        out
    }

    pub fn scale(&mut self, s: F) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Mat<F>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `x · Wᵀ + b` where `w` is a row-major (d_out, d_in) slice and `b` has
/// length d_out. Pass an empty `b` for a bias-free product.
pub fn affine<F: Scalar>(x: &Mat<F>, w: &[F], b: &[F], d_out: usize) -> Mat<F> {
    let d_in = x.cols;
    assert_eq!(w.len(), d_out * d_in, "weight slice shape");
    assert!(b.is_empty() || b.len() == d_out, "bias length");
    let mut out = Mat::zeros(x.rows, d_out);
    for i in 0..x.rows {
        let x_row = x.row(i);
        let out_row = out.row_mut(i);
        for j in 0..d_out {
            let w_row = &w[j * d_in..(j + 1) * d_in];
            let mut acc = if b.is_empty() { F::zero() } else { b[j] };
            for t in 0..d_in {
                acc += x_row[t] * w_row[t];
            }
            out_row[j] = acc;
        }
    }
    out
}

/// `dy · W` where `w` is row-major (d_out, d_in): the input gradient of the
/// affine map above.
pub fn matmul_w<F: Scalar>(dy: &Mat<F>, w: &[F], d_in: usize) -> Mat<F> {
    let d_out = dy.cols;
    assert_eq!(w.len(), d_out * d_in, "weight slice shape");
    let mut out = Mat::zeros(dy.rows, d_in);
    for i in 0..dy.rows {
        let dy_row = dy.row(i);
        let out_row = out.row_mut(i);
        for (t, &g) in dy_row.iter().enumerate() {
            let w_row = &w[t * d_in..(t + 1) * d_in];
            for j in 0..d_in {
                out_row[j] += g * w_row[j];
            }
        }
    }
    out
}

/// `out += aᵀ · b` flattened row-major, shapes (k,m)ᵀ·(k,n) into m*n values.
/// This is the weight gradient `dW += dYᵀ·X` with `a = dY`, `b = X`.
pub fn tmul_acc<F: Scalar>(a: &Mat<F>, b: &Mat<F>, out: &mut [F]) {
    assert_eq!(a.rows, b.rows, "tmul_acc outer dimensions");
    assert_eq!(out.len(), a.cols * b.cols, "tmul_acc output length");
    for t in 0..a.rows {
        let a_row = a.row(t);
        let b_row = b.row(t);
        for (i, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[i * b.cols..(i + 1) * b.cols];
            for j in 0..b_row.len() {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

/// `aᵀ · b` as a fresh matrix; see [`tmul_acc`].
pub fn tmul<F: Scalar>(a: &Mat<F>, b: &Mat<F>) -> Mat<F> {
    let mut out = Mat::zeros(a.cols, b.cols);
    tmul_acc(a, b, &mut out.data);
    out
}

/// `out += column sums of a`: the bias gradient.
pub fn colsum_acc<F: Scalar>(a: &Mat<F>, out: &mut [F]) {
    assert_eq!(out.len(), a.cols, "colsum_acc output length");
    for i in 0..a.rows {
        for (o, &v) in out.iter_mut().zip(a.row(i)) {
            *o += v;
        }
    }
}

/// Per-row mean and reciprocal standard deviation saved for the backward pass.
#[derive(Debug, Clone)]
pub struct LnCache<F> {
    pub mean: Vec<F>,
    pub rstd: Vec<F>,
}

pub const LN_EPS: f64 = 1e-5;

/// Layer normalization over each row: `g ⊙ (x − μ)/σ + b` with biased variance.
pub fn layernorm_fwd<F: Scalar>(x: &Mat<F>, g: &[F], b: &[F]) -> (Mat<F>, LnCache<F>) {
    assert_eq!(g.len(), x.cols);
    assert_eq!(b.len(), x.cols);
    let d = F::from_f64(x.cols as f64);
    let eps = F::from_f64(LN_EPS);
    let mut out = Mat::zeros(x.rows, x.cols);
    let mut cache = LnCache {
        mean: Vec::with_capacity(x.rows),
        rstd: Vec::with_capacity(x.rows),
    };
    for i in 0..x.rows {
        let row = x.row(i);
        let mut mean = F::zero();
        for &v in row {
            mean += v;
        }
        mean /= d;
        let mut var = F::zero();
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var /= d;
        let rstd = (var + eps).sqrt().recip();
        let out_row = out.row_mut(i);
        for j in 0..row.len() {
            out_row[j] = g[j] * (row[j] - mean) * rstd + b[j];
        }
        cache.mean.push(mean);
        cache.rstd.push(rstd);
    }
    (out, cache)
}

/// Input gradient of [`layernorm_fwd`]; gain and bias gradients accumulate
/// into `dg` and `db`.
pub fn layernorm_bwd<F: Scalar>(
    dy: &Mat<F>,
    x: &Mat<F>,
    g: &[F],
    cache: &LnCache<F>,
    dg: &mut [F],
    db: &mut [F],
) -> Mat<F> {
    assert_eq!((dy.rows, dy.cols), (x.rows, x.cols));
    assert_eq!(dg.len(), x.cols);
    assert_eq!(db.len(), x.cols);
    let d = F::from_f64(x.cols as f64);
    let mut dx = Mat::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let mean = cache.mean[i];
        let rstd = cache.rstd[i];
        let x_row = x.row(i);
        let dy_row = dy.row(i);
        // dxhat = dy ⊙ g; two row means fold the normalization Jacobian.
        let mut sum_dxhat = F::zero();
        let mut sum_dxhat_xhat = F::zero();
        for j in 0..x_row.len() {
            let xhat = (x_row[j] - mean) * rstd;
            let dxhat = dy_row[j] * g[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dg[j] += dy_row[j] * xhat;
            db[j] += dy_row[j];
        }
        let m1 = sum_dxhat / d;
        let m2 = sum_dxhat_xhat / d;
        let dx_row = dx.row_mut(i);
        for j in 0..x_row.len() {
            let xhat = (x_row[j] - mean) * rstd;
            let dxhat = dy_row[j] * g[j];
            dx_row[j] = rstd * (dxhat - m1 - xhat * m2);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximation GELU; smooth everywhere, which keeps finite-difference
/// gradient checks clean.
pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (F::one() + inner.tanh())
}

/// d gelu / dx.
pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a3 = F::from_f64(3.0 * GELU_A);
    let half = F::from_f64(0.5);
    let inner = c * (x + F::from_f64(GELU_A) * x * x * x);
    let t = inner.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + a3 * x * x)
}

pub fn gelu_mat<F: Scalar>(z: &Mat<F>) -> Mat<F> {
    let mut out = z.clone();
    for v in &mut out.data {
        *v = gelu(*v);
    }
    out
}

/// `dz = du ⊙ gelu'(z)`.
pub fn gelu_bwd<F: Scalar>(du: &Mat<F>, z: &Mat<F>) -> Mat<F> {
    assert_eq!((du.rows, du.cols), (z.rows, z.cols));
    let mut out = Mat::zeros(z.rows, z.cols);
    for ((o, &d), &zv) in out.data.iter_mut().zip(&du.data).zip(&z.data) {
        *o = d * gelu_grad(zv);
    }
    out
}

/// Numerically stable softmax over `row[..limit]`; entries past `limit` are
/// set to zero.
pub fn softmax_prefix<F: Scalar>(row: &mut [F], limit: usize) {
    debug_assert!(limit >= 1 && limit <= row.len());
    let mut max = F::neg_infinity();
    for &v in &row[..limit] {
        if v > max {
            max = v;
        }
    }
    let mut sum = F::zero();
    for v in &mut row[..limit] {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in &mut row[..limit] {
        *v /= sum;
    }
    for v in &mut row[limit..] {
        *v = F::zero();
    }
}

/// In-place causal softmax: row `i` normalizes over columns `0..=i`.
pub fn causal_softmax<F: Scalar>(scores: &mut Mat<F>) {
    assert_eq!(scores.rows, scores.cols, "causal softmax wants square scores");
    for i in 0..scores.rows {
        softmax_prefix(scores.row_mut(i), i + 1);
    }
}

/// Given probabilities `p` and upstream `dp`, the score gradient
/// `ds = p ⊙ (dp − Σ_t dp_t·p_t)` per row. Masked columns carry p = 0 and come
/// out zero.
pub fn softmax_bwd<F: Scalar>(dp: &Mat<F>, p: &Mat<F>) -> Mat<F> {
    assert_eq!((dp.rows, dp.cols), (p.rows, p.cols));
    let mut ds = Mat::zeros(p.rows, p.cols);
    for i in 0..p.rows {
        let p_row = p.row(i);
        let dp_row = dp.row(i);
        let mut dot = F::zero();
        for t in 0..p_row.len() {
            dot += dp_row[t] * p_row[t];
        }
        let ds_row = ds.row_mut(i);
        for j in 0..p_row.len() {
            ds_row[j] = p_row[j] * (dp_row[j] - dot);
        }
    }
    ds
}

/// Copies of the per-head column blocks of a (n, heads·hd) matrix.
pub fn split_heads<F: Scalar>(m: &Mat<F>, n_heads: usize) -> Vec<Mat<F>> {
    assert_eq!(m.cols % n_heads, 0);
    let hd = m.cols / n_heads;
    (0..n_heads)
        .map(|h| {
            Mat::from_fn(m.rows, hd, |i, j| m.row(i)[h * hd + j])
        })
        .collect()
}

/// Inverse of [`split_heads`].
pub fn merge_heads<F: Scalar>(heads: &[Mat<F>]) -> Mat<F> {
    let rows = heads[0].rows;
    let hd = heads[0].cols;
    let mut out = Mat::zeros(rows, heads.len() * hd);
    for (h, m) in heads.iter().enumerate() {
        assert_eq!((m.rows, m.cols), (rows, hd));
        for i in 0..rows {
            out.row_mut(i)[h * hd..(h + 1) * hd].copy_from_slice(m.row(i));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m64(rows: usize, cols: usize, v: &[f64]) -> Mat<f64> {
        Mat::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let a = m64(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = m64(3, 2, &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_bt_matches_matmul_with_transpose() {
        let a = m64(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bt = m64(2, 3, &[7.0, 9.0, 11.0, 8.0, 10.0, 12.0]);
        let c = a.matmul_bt(&bt);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn affine_applies_weights_and_bias() {
        // y = x·Wᵀ + b with W = [[1,0],[0,1],[1,1]] (3 outputs of 2 inputs).
        let x = m64(1, 2, &[2.0, 3.0]);
        let w = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let b = [10.0, 20.0, 30.0];
        let y = affine(&x, &w, &b, 3);
        assert_eq!(y.data, vec![12.0, 23.0, 35.0]);
        let y2 = affine(&x, &w, &[], 3);
        assert_eq!(y2.data, vec![2.0, 3.0, 5.0]);
    }

    #[test]
    fn affine_gradients_match_finite_differences() {
        let x = m64(2, 3, &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]);
        let w: Vec<f64> = (0..6).map(|i| 0.1 * (i as f64) - 0.25).collect();
        let b = vec![0.05, -0.1];
        // Scalar objective: sum of squares of y.
        let loss = |w: &[f64], b: &[f64], x: &Mat<f64>| -> f64 {
            affine(x, w, b, 2).data.iter().map(|v| v * v).sum()
        };
        let y = affine(&x, &w, &b, 2);
        let mut dy = y.clone();
        dy.scale(2.0);

        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; b.len()];
        tmul_acc(&dy, &x, &mut dw);
        colsum_acc(&dy, &mut db);
        let dx = matmul_w(&dy, &w, 3);

        let h = 1e-6;
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (loss(&wp, &b, &x) - loss(&wm, &b, &x)) / (2.0 * h);
            assert_abs_diff_eq!(dw[i], fd, epsilon = 1e-6);
        }
        for i in 0..b.len() {
            let mut bp = b.clone();
            bp[i] += h;
            let mut bm = b.clone();
            bm[i] -= h;
            let fd = (loss(&w, &bp, &x) - loss(&w, &bm, &x)) / (2.0 * h);
            assert_abs_diff_eq!(db[i], fd, epsilon = 1e-6);
        }
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (loss(&w, &b, &xp) - loss(&w, &b, &xm)) / (2.0 * h);
            assert_abs_diff_eq!(dx.data[i], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn layernorm_normalizes_rows() {
        let x = m64(1, 3, &[1.0, 2.0, 3.0]);
        let g = vec![1.0; 3];
        let b = vec![0.0; 3];
        let (y, cache) = layernorm_fwd(&x, &g, &b);
        assert_abs_diff_eq!(cache.mean[0], 2.0, epsilon = 1e-12);
        // var = 2/3, rstd = 1/sqrt(2/3 + 1e-5)
        let rstd = 1.0 / (2.0f64 / 3.0 + 1e-5).sqrt();
        assert_abs_diff_eq!(cache.rstd[0], rstd, epsilon = 1e-12);
        assert_abs_diff_eq!(y.data[0], -rstd, epsilon = 1e-12);
        assert_abs_diff_eq!(y.data[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y.data[2], rstd, epsilon = 1e-12);
        let mean: f64 = y.data.iter().sum::<f64>() / 3.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn layernorm_gradients_match_finite_differences() {
        let x = m64(2, 4, &[0.3, -1.2, 0.8, 0.1, 2.0, 0.5, -0.7, 1.1]);
        let g = vec![1.1, 0.9, -0.3, 0.7];
        let b = vec![0.0, 0.2, -0.1, 0.4];
        let loss = |x: &Mat<f64>, g: &[f64], b: &[f64]| -> f64 {
            let (y, _) = layernorm_fwd(x, g, b);
            y.data.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum()
        };
        let (y, cache) = layernorm_fwd(&x, &g, &b);
        let dy = Mat::from_fn(2, 4, |i, j| 2.0 * (i as f64 * 4.0 + j as f64 + 1.0) * y.row(i)[j]);
        let mut dg = vec![0.0; 4];
        let mut db = vec![0.0; 4];
        let dx = layernorm_bwd(&dy, &x, &g, &cache, &mut dg, &mut db);

        let h = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (loss(&xp, &g, &b) - loss(&xm, &g, &b)) / (2.0 * h);
            assert_abs_diff_eq!(dx.data[i], fd, epsilon = 1e-5);
        }
        for i in 0..4 {
            let mut gp = g.clone();
            gp[i] += h;
            let mut gm = g.clone();
            gm[i] -= h;
            let fd = (loss(&x, &gp, &b) - loss(&x, &gm, &b)) / (2.0 * h);
            assert_abs_diff_eq!(dg[i], fd, epsilon = 1e-5);
            let mut bp = b.clone();
            bp[i] += h;
            let mut bm = b.clone();
            bm[i] -= h;
            let fd = (loss(&x, &g, &bp) - loss(&x, &g, &bm)) / (2.0 * h);
            assert_abs_diff_eq!(db[i], fd, epsilon = 1e-5);
        }
    }

    #[test]
    fn gelu_known_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        // Tanh approximation at 1.0 (the exact erf form gives 0.841345).
        assert_abs_diff_eq!(gelu(1.0f64), 0.841192, epsilon = 1e-6);
        assert_abs_diff_eq!(gelu(6.0f64), 6.0, epsilon = 1e-6);
        assert_abs_diff_eq!(gelu(-6.0f64), 0.0, epsilon = 1e-6);
        // Reflection identity: gelu(x) - gelu(-x) = x.
        for &x in &[0.3, 1.7, 2.5] {
            assert_abs_diff_eq!(gelu(x) - gelu(-x), x, epsilon = 1e-12);
        }
    }

    #[test]
    fn gelu_grad_matches_finite_differences() {
        let h = 1e-6;
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.4, 1.0, 2.7f64] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(gelu_grad(x), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn causal_softmax_masks_future_columns() {
        let mut s = m64(3, 3, &[5.0, 99.0, 99.0, 1.0, 1.0, 99.0, 1.0, 2.0, 3.0]);
        causal_softmax(&mut s);
        assert_eq!(s.row(0), &[1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(s.row(1)[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s.row(1)[1], 0.5, epsilon = 1e-12);
        assert_eq!(s.row(1)[2], 0.0);
        let sum: f64 = s.row(2).iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        assert!(s.row(2)[2] > s.row(2)[1] && s.row(2)[1] > s.row(2)[0]);
    }

    #[test]
    fn softmax_bwd_matches_finite_differences() {
        let logits = m64(2, 3, &[0.2, -0.5, 1.0, 2.0, 0.0, -1.0]);
        let weights = [0.7, -0.3, 0.9, 0.1, 0.5, -0.8];
        let loss = |logits: &Mat<f64>| -> f64 {
            let mut p = logits.clone();
            for i in 0..p.rows {
                let cols = p.cols;
                softmax_prefix(p.row_mut(i), cols);
            }
            p.data.iter().zip(&weights).map(|(v, w)| v * w).sum()
        };
        let mut p = logits.clone();
        for i in 0..p.rows {
            let cols = p.cols;
            softmax_prefix(p.row_mut(i), cols);
        }
        let dp = Mat::from_vec(2, 3, weights.to_vec()).unwrap();
        let ds = softmax_bwd(&dp, &p);
        let h = 1e-6;
        for i in 0..logits.data.len() {
            let mut lp = logits.clone();
            lp.data[i] += h;
            let mut lm = logits.clone();
            lm.data[i] -= h;
            let fd = (loss(&lp) - loss(&lm)) / (2.0 * h);
            assert_abs_diff_eq!(ds.data[i], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn split_and_merge_heads_round_trip() {
        let m = Mat::from_fn(3, 8, |i, j| (i * 8 + j) as f64);
        let heads = split_heads(&m, 4);
        assert_eq!(heads.len(), 4);
        assert_eq!(heads[1].row(0), &[2.0, 3.0]);
        assert_eq!(heads[3].row(2), &[22.0, 23.0]);
        assert_eq!(merge_heads(&heads), m);
    }
}
