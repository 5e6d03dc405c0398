//! Dense 64-bit primitives with hand-written forward and backward passes.
//!
//! Every differentiable op here comes as a forward function plus a matching
//! `*_backward`. Composite models record per-step caches on a [`Tape`] and
//! replay them in reverse.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `out += self · x`, no shape checks.
    #[inline]
    pub(crate) fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += dot(row, x);
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return shape_err(format!(
                "matvec: matrix has {} cols, vector has {}",
                self.cols,
                x.len()
            ));
        }
        let mut out = vec![0.0; self.rows];
        self.matvec_acc(x, &mut out);
        Ok(out)
    }

    /// `out += selfᵀ · y`, no shape checks.
    #[inline]
    pub(crate) fn tmatvec_acc(&self, y: &[f64], out: &mut [f64]) {
        for (&yi, row) in y.iter().zip(self.data.chunks_exact(self.cols)) {
            if yi != 0.0 {
                axpy(yi, row, out);
            }
        }
    }

    /// `self += alpha · a bᵀ`, no shape checks.
    #[inline]
    pub(crate) fn add_outer(&mut self, alpha: f64, a: &[f64], b: &[f64]) {
        for (&ai, row) in a.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            let s = alpha * ai;
            if s != 0.0 {
                axpy(s, b, row);
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Ordered record of primitive applications.
///
/// Records are pushed during the forward pass and consumed last-in first-out
/// by [`Tape::backward`].
#[derive(Debug)]
pub struct Tape<R> {
    records: Vec<R>,
}

impl<R> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R> Tape<R> {
    pub fn new() -> Self {
        Self {
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: R) -> usize {
        self.records.push(record);
        self.records.len() - 1
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, idx: usize) -> Option<&R> {
        self.records.get(idx)
    }

    pub fn iter(&self) -> impl Iterator<Item = &R> {
        self.records.iter()
    }

    /// Visit every record in exact reverse order of recording.
    pub fn backward<F: FnMut(usize, &R)>(&self, mut visit: F) {
        for (idx, rec) in self.records.iter().enumerate().rev() {
            visit(idx, rec);
        }
    }
}

pub fn affine(x: &[f64], w: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != x.len() || w.rows() != b.len() {
        return shape_err(format!(
            "affine: W is {}x{}, x has {}, b has {}",
            w.rows(),
            w.cols(),
            x.len(),
            b.len()
        ));
    }
    let mut out = b.to_vec();
    w.matvec_acc(x, &mut out);
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct AffineGrad {
    pub dx: Vec<f64>,
    pub dw: Matrix,
    pub db: Vec<f64>,
}

pub fn affine_backward(x: &[f64], w: &Matrix, dy: &[f64]) -> AffineGrad {
    let mut dx = vec![0.0; w.cols()];
    w.tmatvec_acc(dy, &mut dx);
    let mut dw = Matrix::zeros(w.rows(), w.cols());
    dw.add_outer(1.0, dy, x);
    AffineGrad {
        dx,
        dw,
        db: dy.to_vec(),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return shape_err("softmax of an empty vector");
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    Ok(softmax_unchecked(z))
}

pub(crate) fn softmax_unchecked(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    for v in &mut p {
        *v /= sum;
    }
    p
}

/// Vector-Jacobian product of softmax: `dz_i = p_i (dp_i - Σ_j p_j dp_j)`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let s = dot(p, dp);
    p.iter().zip(dp).map(|(pi, dpi)| pi * (dpi - s)).collect()
}

/// Gate-stacked LSTM weights. Rows are laid out as `[input; forget; cell; output]`,
/// each block `hidden` rows tall.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmWeights {
    pub w_x: Matrix,
    pub w_h: Matrix,
    pub b: Vec<f64>,
}

impl LstmWeights {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_x: Matrix::zeros(4 * hidden, input),
            w_h: Matrix::zeros(4 * hidden, hidden),
            b: vec![0.0; 4 * hidden],
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.cols()
    }

    pub fn input(&self) -> usize {
        self.w_x.cols()
    }

    pub fn num_params(&self) -> usize {
        self.w_x.data().len() + self.w_h.data().len() + self.b.len()
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden();
        if self.w_h.rows() != 4 * h || self.w_x.rows() != 4 * h || self.b.len() != 4 * h {
            return shape_err("lstm weights are not gate-stacked 4*hidden rows");
        }
        Ok(())
    }
}

/// Forward values of one LSTM cell application, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LstmCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

pub fn lstm_cell(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    w: &LstmWeights,
) -> Result<(Vec<f64>, Vec<f64>, LstmCache)> {
    w.check()?;
    let hs = w.hidden();
    if x.len() != w.input() || h_prev.len() != hs || c_prev.len() != hs {
        return shape_err(format!(
            "lstm_cell: input {} (want {}), h {} / c {} (want {hs})",
            x.len(),
            w.input(),
            h_prev.len(),
            c_prev.len()
        ));
    }
    Ok(lstm_cell_unchecked(x, h_prev, c_prev, w))
}

pub(crate) fn lstm_cell_unchecked(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    w: &LstmWeights,
) -> (Vec<f64>, Vec<f64>, LstmCache) {
    let hs = w.hidden();
    let mut pre = w.b.clone();
    w.w_x.matvec_acc(x, &mut pre);
    w.w_h.matvec_acc(h_prev, &mut pre);
    let i: Vec<f64> = pre[..hs].iter().map(|&v| sigmoid(v)).collect();
    let f: Vec<f64> = pre[hs..2 * hs].iter().map(|&v| sigmoid(v)).collect();
    let g: Vec<f64> = pre[2 * hs..3 * hs].iter().map(|v| v.tanh()).collect();
    let o: Vec<f64> = pre[3 * hs..].iter().map(|&v| sigmoid(v)).collect();
    let c: Vec<f64> = (0..hs).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<f64> = (0..hs).map(|k| o[k] * tanh_c[k]).collect();
    let cache = LstmCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        i,
        f,
        g,
        o,
        c: c.clone(),
        tanh_c,
    };
    (h, c, cache)
}

/// Cache-free cell update used on sampling hot paths. `pre` is scratch space
/// of length `4 * hidden`.
pub(crate) fn lstm_cell_inplace(
    x: &[f64],
    h: &mut [f64],
    c: &mut [f64],
    w: &LstmWeights,
    pre: &mut Vec<f64>,
) {
    let hs = w.hidden();
    pre.clear();
    pre.extend_from_slice(&w.b);
    w.w_x.matvec_acc(x, pre);
    w.w_h.matvec_acc(h, pre);
    for k in 0..hs {
        let i = sigmoid(pre[k]);
        let f = sigmoid(pre[hs + k]);
        let g = pre[2 * hs + k].tanh();
        let o = sigmoid(pre[3 * hs + k]);
        c[k] = f * c[k] + i * g;
        h[k] = o * c[k].tanh();
    }
}

/// Gradient of a cell application. Parameter gradients are accumulated into
/// `grad`; returns `(dx, dh_prev, dc_prev)`.
pub fn lstm_cell_backward(
    w: &LstmWeights,
    cache: &LstmCache,
    dh: &[f64],
    dc: &[f64],
    grad: &mut LstmWeights,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hs = w.hidden();
    let mut dpre = vec![0.0; 4 * hs];
    let mut dc_prev = vec![0.0; hs];
    for k in 0..hs {
        let do_ = dh[k] * cache.tanh_c[k];
        let dct = dc[k] + dh[k] * cache.o[k] * (1.0 - cache.tanh_c[k] * cache.tanh_c[k]);
        let di = dct * cache.g[k];
        let dg = dct * cache.i[k];
        let df = dct * cache.c_prev[k];
        dc_prev[k] = dct * cache.f[k];
        dpre[k] = di * cache.i[k] * (1.0 - cache.i[k]);
        dpre[hs + k] = df * cache.f[k] * (1.0 - cache.f[k]);
        dpre[2 * hs + k] = dg * (1.0 - cache.g[k] * cache.g[k]);
        dpre[3 * hs + k] = do_ * cache.o[k] * (1.0 - cache.o[k]);
    }
    grad.w_x.add_outer(1.0, &dpre, &cache.x);
    grad.w_h.add_outer(1.0, &dpre, &cache.h_prev);
    axpy(1.0, &dpre, &mut grad.b);
    let mut dx = vec![0.0; w.input()];
    w.w_x.tmatvec_acc(&dpre, &mut dx);
    let mut dh_prev = vec![0.0; hs];
    w.w_h.tmatvec_acc(&dpre, &mut dh_prev);
    (dx, dh_prev, dc_prev)
}

/// Valid 1-D convolution over time: entry `i` is `<kernel, M[i..i+l)> + b`.
pub fn conv1d(m: &Matrix, kernel: &Matrix, b: f64) -> Result<Vec<f64>> {
    if kernel.cols() != m.cols() {
        return shape_err(format!(
            "conv1d: kernel width {} vs embedding width {}",
            kernel.cols(),
            m.cols()
        ));
    }
    if kernel.rows() == 0 || kernel.rows() > m.rows() {
        return shape_err(format!(
            "conv1d: window {} does not fit sequence of length {}",
            kernel.rows(),
            m.rows()
        ));
    }
    Ok(conv1d_unchecked(m, kernel, b))
}

pub(crate) fn conv1d_unchecked(m: &Matrix, kernel: &Matrix, b: f64) -> Vec<f64> {
    let l = kernel.rows();
    let span = l * m.cols();
    let n_out = m.rows() - l + 1;
    (0..n_out)
        .map(|i| {
            let window = &m.data()[i * m.cols()..i * m.cols() + span];
            dot(window, kernel.data()) + b
        })
        .collect()
}

/// Returns `(dM, dKernel, db)` for upstream gradient `dout`.
pub fn conv1d_backward(m: &Matrix, kernel: &Matrix, dout: &[f64]) -> (Matrix, Matrix, f64) {
    let cols = m.cols();
    let span = kernel.rows() * cols;
    let mut dm = Matrix::zeros(m.rows(), cols);
    let mut dk = Matrix::zeros(kernel.rows(), cols);
    let mut db = 0.0;
    for (i, &g) in dout.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        db += g;
        let off = i * cols;
        axpy(g, &m.data()[off..off + span], dk.data_mut());
        axpy(g, kernel.data(), &mut dm.data_mut()[off..off + span]);
    }
    (dm, dk, db)
}

/// Max-over-time pooling. Ties resolve to the earliest position.
pub fn max_over_time(v: &[f64]) -> Result<(f64, usize)> {
    if v.is_empty() {
        return shape_err("max_over_time of an empty feature map");
    }
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    Ok((v[best], best))
}

/// Finite-difference step used by [`grad_check`].
pub const GRAD_CHECK_EPS: f64 = 1e-5;

/// Denominator floor for [`grad_check`]. Central differences at this step carry
/// roundoff near `1e-16 * |f| / GRAD_CHECK_EPS`, so gradients far below `1e-6`
/// cannot be resolved relatively.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Largest per-coordinate relative disagreement between `analytic` and a
/// central difference of `f` at `theta0`.
///
/// Relative error is `|a - n| / max(GRAD_CHECK_FLOOR, |a| + |n|)`.
pub fn grad_check<F>(mut f: F, theta0: &[f64], analytic: &[f64]) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != theta0.len() {
        return shape_err(format!(
            "grad_check: {} analytic entries for {} parameters",
            analytic.len(),
            theta0.len()
        ));
    }
    let mut theta = theta0.to_vec();
    let mut worst = 0.0_f64;
    for k in 0..theta.len() {
        let orig = theta[k];
        theta[k] = orig + GRAD_CHECK_EPS;
        let fp = f(&theta);
        theta[k] = orig - GRAD_CHECK_EPS;
        let fm = f(&theta);
        theta[k] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "grad_check: non-finite objective at coordinate {k}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * GRAD_CHECK_EPS);
        let a = analytic[k];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn affine_identity_and_zero_weights() {
        let y = affine(&[3.0, -1.0], &Matrix::identity(2), &[0.0, 0.0]).unwrap();
        assert_eq!(y, vec![3.0, -1.0]);
        let y = affine(&[7.0, 9.0], &Matrix::zeros(2, 2), &[1.0, 2.0]).unwrap();
        assert_eq!(y, vec![1.0, 2.0]);
    }

    #[test]
    fn affine_shape_mismatch() {
        let err = affine(&[1.0], &Matrix::zeros(2, 2), &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn affine_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_vec(&mut rng, 3);
        let w = rand_matrix(&mut rng, 4, 3);
        let b = rand_vec(&mut rng, 4);
        let r = rand_vec(&mut rng, 4);
        let g = affine_backward(&x, &w, &r);
        let mut theta = x.clone();
        theta.extend_from_slice(w.data());
        theta.extend_from_slice(&b);
        let mut analytic = g.dx.clone();
        analytic.extend_from_slice(g.dw.data());
        analytic.extend_from_slice(&g.db);
        let f = |t: &[f64]| {
            let w = Matrix::from_vec(4, 3, t[3..15].to_vec()).unwrap();
            dot(&affine(&t[..3], &w, &t[15..]).unwrap(), &r)
        };
        assert!(grad_check(f, &theta, &analytic).unwrap() < 1e-6);
    }

    #[test]
    fn softmax_closed_forms() {
        assert_eq!(softmax(&[0.0; 4]).unwrap(), vec![0.25; 4]);
        let p = softmax(&[0.0, 2f64.ln()]).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(softmax(&[]), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = rand_vec(&mut rng, 5);
        let r = rand_vec(&mut rng, 5);
        let p = softmax(&z).unwrap();
        let analytic = softmax_backward(&p, &r);
        let f = |t: &[f64]| dot(&softmax(t).unwrap(), &r);
        assert!(grad_check(f, &z, &analytic).unwrap() < 1e-6);
    }

    #[test]
    fn lstm_zero_weights_fixed_point() {
        let w = LstmWeights::zeros(2, 3);
        let (h, c, _) = lstm_cell(&[5.0, -3.0], &[0.0; 3], &[0.0; 3], &w).unwrap();
        assert_eq!(h, vec![0.0; 3]);
        assert_eq!(c, vec![0.0; 3]);
    }

    #[test]
    fn lstm_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = LstmWeights {
            w_x: rand_matrix(&mut rng, 12, 2),
            w_h: rand_matrix(&mut rng, 12, 3),
            b: rand_vec(&mut rng, 12),
        };
        let x = rand_vec(&mut rng, 2);
        let h = rand_vec(&mut rng, 3);
        let c = rand_vec(&mut rng, 3);
        let a = lstm_cell(&x, &h, &c, &w).unwrap();
        let b = lstm_cell(&x, &h, &c, &w).unwrap();
        assert_eq!((a.0, a.1), (b.0, b.1));
    }

    #[test]
    fn lstm_shape_error() {
        let w = LstmWeights::zeros(2, 3);
        assert!(matches!(
            lstm_cell(&[1.0], &[0.0; 3], &[0.0; 3], &w),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn conv1d_lengths_and_zero_kernel() {
        let m = Matrix::zeros(20, 4);
        assert_eq!(conv1d(&m, &Matrix::zeros(3, 4), 0.0).unwrap().len(), 18);
        let m = Matrix::from_fn(6, 2, |i, j| (i * 2 + j) as f64);
        assert_eq!(conv1d(&m, &Matrix::zeros(2, 2), 0.5).unwrap(), vec![0.5; 5]);
        assert!(matches!(
            conv1d(&Matrix::zeros(2, 2), &Matrix::zeros(3, 2), 0.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn conv1d_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = rand_matrix(&mut rng, 6, 2);
        let k = rand_matrix(&mut rng, 2, 2);
        let out = conv1d(&m, &k, 0.25).unwrap();
        for (i, &o) in out.iter().enumerate() {
            let mut acc = 0.25;
            for r in 0..2 {
                for c in 0..2 {
                    acc += k.get(r, c) * m.get(i + r, c);
                }
            }
            assert!((o - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_quadratic() {
        let theta = [1.0, 2.0];
        let analytic = [2.0, 4.0];
        let err = grad_check(|t| dot(t, t), &theta, &analytic).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_rejects_nan() {
        let res = grad_check(|_| f64::NAN, &[1.0], &[0.0]);
        assert!(matches!(res, Err(Error::Numeric(_))));
    }

    #[test]
    fn tape_replays_in_reverse() {
        let mut tape = Tape::new();
        for k in 0..5 {
            tape.push(k);
        }
        let mut seen = Vec::new();
        tape.backward(|idx, &r| {
            assert_eq!(idx, r);
            seen.push(r);
        });
        assert_eq!(seen, vec![4, 3, 2, 1, 0]);
    }
}
