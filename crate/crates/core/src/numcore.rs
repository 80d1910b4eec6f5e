//! Dense f64 kernels and the two layer types the model is built from.
//!
//! Every reduction goes through [`dot`], whose summation order depends only on
//! the vector length. A matrix product over a batch of rows therefore yields,
//! row for row, the same bits as the corresponding matrix-vector product, which
//! is what lets a batched pass be compared exactly against a sequential one.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat64 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Mat64::from_vec",
                rows * cols,
                data.len(),
            ));
        }
        Ok(Mat64 { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat64 { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Mat64::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
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

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Copies column `c` into a new vector.
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }
}

const LANES: usize = 8;

/// Dot product with a fixed, length-determined summation order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let chunks = a.len() / LANES;
    let (a_body, a_tail) = a.split_at(chunks * LANES);
    let (b_body, b_tail) = b.split_at(chunks * LANES);
    for (ca, cb) in a_body.chunks_exact(LANES).zip(b_body.chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in a_tail.iter().zip(b_tail) {
        s += x * y;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn l2_dist(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("l2_dist", a.len(), b.len()));
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s.sqrt())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) const PAR_ROWS: usize = 32;
/// Rows per cache block in batched kernels.
pub(crate) const ROW_BLOCK: usize = 16;

/// `out[r][o] = dot(a[r], w[o])`, i.e. `a · wᵀ`. Rows are split across the
/// rayon pool when the batch is large enough; each element is computed by the
/// same [`dot`] call either way.
pub fn gemm_nt(a: &Mat64, w: &Mat64) -> Mat64 {
    assert_eq!(a.cols, w.cols, "gemm_nt inner dimension");
    let mut out = Mat64::zeros(a.rows, w.rows);
    let o = w.rows;
    if o == 0 {
        return out;
    }
    let kernel = |(r, out_row): (usize, &mut [f64])| {
        let ar = a.row(r);
        for (j, y) in out_row.iter_mut().enumerate() {
            *y = dot(ar, w.row(j));
        }
    };
    if a.rows >= PAR_ROWS {
        out.data.par_chunks_mut(o).enumerate().for_each(kernel);
    } else {
        out.data.chunks_mut(o).enumerate().for_each(kernel);
    }
    out
}

/// `out = a · w` where `a` is `B×o` and `w` is `o×k`.
pub fn gemm_nn(a: &Mat64, w: &Mat64) -> Mat64 {
    assert_eq!(a.cols, w.rows, "gemm_nn inner dimension");
    let mut out = Mat64::zeros(a.rows, w.cols);
    let k = w.cols;
    if k == 0 {
        return out;
    }
    let kernel = |(r, out_row): (usize, &mut [f64])| {
        for (j, &coef) in a.row(r).iter().enumerate() {
            if coef != 0.0 {
                axpy(coef, w.row(j), out_row);
            }
        }
    };
    if a.rows >= PAR_ROWS {
        out.data.par_chunks_mut(k).enumerate().for_each(kernel);
    } else {
        out.data.chunks_mut(k).enumerate().for_each(kernel);
    }
    out
}

/// `g += aᵀ · x` where `a` is `B×o`, `x` is `B×k` and `g` is `o×k`.
/// Rows of the batch are accumulated in ascending order.
pub fn gemm_tn_acc(a: &Mat64, x: &Mat64, g: &mut Mat64) {
    assert_eq!(a.rows, x.rows, "gemm_tn_acc batch dimension");
    assert_eq!(g.rows, a.cols);
    assert_eq!(g.cols, x.cols);
    let k = g.cols;
    if k == 0 {
        return;
    }
    let kernel = |(j, g_row): (usize, &mut [f64])| {
        for r in 0..a.rows {
            let coef = a.get(r, j);
            if coef != 0.0 {
                axpy(coef, x.row(r), g_row);
            }
        }
    };
    if g.rows >= PAR_ROWS && a.rows > 1 {
        g.data.par_chunks_mut(k).enumerate().for_each(kernel);
    } else {
        g.data.chunks_mut(k).enumerate().for_each(kernel);
    }
}

/// Fully connected layer `y = Wx + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Mat64,
    pub bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub grad_x: Vec<f64>,
    pub grad_weight: Mat64,
    pub grad_bias: Option<Vec<f64>>,
}

impl LinearLayer {
    pub fn zeros(out_dim: usize, in_dim: usize, with_bias: bool) -> Self {
        LinearLayer {
            weight: Mat64::zeros(out_dim, in_dim),
            bias: with_bias.then(|| vec![0.0; out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::shape("linear_forward", self.in_dim(), x.len()));
        }
        let mut y: Vec<f64> = (0..self.out_dim())
            .map(|o| dot(self.weight.row(o), x))
            .collect();
        if let Some(b) = &self.bias {
            y.iter_mut().zip(b).for_each(|(yi, bi)| *yi += bi);
        }
        debug_assert!(y.iter().all(|v| v.is_finite()) || !x.iter().all(|v| v.is_finite()));
        Ok(y)
    }

    pub fn backward(&self, x: &[f64], grad_out: &[f64]) -> Result<LinearGrads> {
        if x.len() != self.in_dim() {
            return Err(Error::shape("linear_backward", self.in_dim(), x.len()));
        }
        if grad_out.len() != self.out_dim() {
            return Err(Error::shape("linear_backward", self.out_dim(), grad_out.len()));
        }
        let mut grad_x = vec![0.0; self.in_dim()];
        let mut grad_weight = Mat64::zeros(self.out_dim(), self.in_dim());
        for (o, &g) in grad_out.iter().enumerate() {
            axpy(g, self.weight.row(o), &mut grad_x);
            axpy(g, x, grad_weight.row_mut(o));
        }
        Ok(LinearGrads {
            grad_x,
            grad_weight,
            grad_bias: self.bias.as_ref().map(|_| grad_out.to_vec()),
        })
    }
}

/// Single-layer tanh recurrent cell: `s' = tanh(W_s s + W_x x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnCell {
    pub w_state: Mat64,
    pub w_input: Mat64,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RnnGrads {
    pub grad_state: Vec<f64>,
    pub grad_input: Vec<f64>,
    pub params: RnnCell,
}

impl RnnCell {
    pub fn zeros(state_dim: usize, input_dim: usize) -> Self {
        RnnCell {
            w_state: Mat64::zeros(state_dim, state_dim),
            w_input: Mat64::zeros(state_dim, input_dim),
            bias: vec![0.0; state_dim],
        }
    }

    pub fn state_dim(&self) -> usize {
        self.w_state.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_input.cols()
    }

    fn check(&self, op: &'static str, state: usize, input: usize) -> Result<()> {
        if state != self.state_dim() {
            return Err(Error::shape(op, format!("state {}", self.state_dim()), state));
        }
        if input != self.input_dim() {
            return Err(Error::shape(op, format!("input {}", self.input_dim()), input));
        }
        Ok(())
    }

    #[inline]
    fn unit(&self, o: usize, state: &[f64], input: &[f64]) -> f64 {
        (dot(self.w_state.row(o), state) + dot(self.w_input.row(o), input) + self.bias[o]).tanh()
    }

    pub fn forward(&self, state: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        self.check("rnn_forward", state.len(), input.len())?;
        Ok((0..self.state_dim())
            .map(|o| self.unit(o, state, input))
            .collect())
    }

    /// Gradients of a scalar loss given `grad_out = dL/d new_state`.
    pub fn backward(
        &self,
        state: &[f64],
        input: &[f64],
        new_state: &[f64],
        grad_out: &[f64],
    ) -> Result<RnnGrads> {
        self.check("rnn_backward", state.len(), input.len())?;
        if new_state.len() != self.state_dim() || grad_out.len() != self.state_dim() {
            return Err(Error::shape("rnn_backward", self.state_dim(), grad_out.len()));
        }
        let mut params = RnnCell::zeros(self.state_dim(), self.input_dim());
        let mut grad_state = vec![0.0; self.state_dim()];
        let mut grad_input = vec![0.0; self.input_dim()];
        for o in 0..self.state_dim() {
            let delta = grad_out[o] * (1.0 - new_state[o] * new_state[o]);
            params.bias[o] = delta;
            axpy(delta, state, params.w_state.row_mut(o));
            axpy(delta, input, params.w_input.row_mut(o));
            axpy(delta, self.w_state.row(o), &mut grad_state);
            axpy(delta, self.w_input.row(o), &mut grad_input);
        }
        Ok(RnnGrads {
            grad_state,
            grad_input,
            params,
        })
    }

    /// Row-wise forward over a batch; row `r` equals `forward(states[r], inputs[r])` bitwise.
    pub fn forward_batch(&self, states: &Mat64, inputs: &Mat64) -> Result<Mat64> {
        self.check("rnn_forward_batch", states.cols(), inputs.cols())?;
        if states.rows() != inputs.rows() {
            return Err(Error::shape("rnn_forward_batch", states.rows(), inputs.rows()));
        }
        let n = self.state_dim();
        let mut out = Mat64::zeros(states.rows(), n);
        if n == 0 {
            return Ok(out);
        }
        // blocks of rows share each loaded weight row
        let kernel = |(blk, chunk): (usize, &mut [f64])| {
            let r0 = blk * ROW_BLOCK;
            for o in 0..n {
                for (k, y) in chunk.iter_mut().skip(o).step_by(n).enumerate() {
                    *y = self.unit(o, states.row(r0 + k), inputs.row(r0 + k));
                }
            }
        };
        if states.rows() >= PAR_ROWS {
            out.data.par_chunks_mut(ROW_BLOCK * n).enumerate().for_each(kernel);
        } else {
            out.data.chunks_mut(ROW_BLOCK * n).enumerate().for_each(kernel);
        }
        Ok(out)
    }

    /// Batched backward. Parameter gradients are accumulated into `grads`;
    /// returns `(dL/d states, dL/d inputs)`.
    pub fn backward_batch(
        &self,
        states: &Mat64,
        inputs: &Mat64,
        outputs: &Mat64,
        grad_out: &Mat64,
        grads: &mut RnnCell,
    ) -> (Mat64, Mat64) {
        let mut delta = grad_out.clone();
        for (d, y) in delta.data.iter_mut().zip(&outputs.data) {
            *d *= 1.0 - y * y;
        }
        gemm_tn_acc(&delta, states, &mut grads.w_state);
        gemm_tn_acc(&delta, inputs, &mut grads.w_input);
        for r in 0..delta.rows() {
            axpy(1.0, delta.row(r), &mut grads.bias);
        }
        (gemm_nn(&delta, &self.w_state), gemm_nn(&delta, &self.w_input))
    }
}

/// Central finite-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let plus = f(&probe);
            probe[i] = x[i] - step;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat64 {
        Mat64::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let scale = l2_norm(a).max(l2_norm(b));
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    #[test]
    fn dot_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [0, 1, 7, 8, 9, 33] {
            let a = random_vec(&mut rng, n);
            let b = random_vec(&mut rng, n);
            let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((dot(&a, &b) - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = LinearLayer {
            weight: Mat64::identity(3),
            bias: Some(vec![0.0; 3]),
        };
        let x = [0.5, -2.0, 3.25];
        assert_eq!(layer.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn zero_weight_layer_outputs_bias() {
        let layer = LinearLayer {
            weight: Mat64::zeros(2, 3),
            bias: Some(vec![1.5, -0.5]),
        };
        assert_eq!(layer.forward(&[9.0, 9.0, 9.0]).unwrap(), vec![1.5, -0.5]);
        let g = layer.backward(&[9.0, 9.0, 9.0], &[1.0, 1.0]).unwrap();
        assert_eq!(g.grad_x, vec![0.0; 3]);
    }

    #[test]
    fn linear_shape_mismatch_is_an_error() {
        let layer = LinearLayer::zeros(2, 3, true);
        assert!(matches!(layer.forward(&[1.0]), Err(Error::Shape { .. })));
        assert!(layer.backward(&[1.0, 2.0, 3.0], &[1.0]).is_err());
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = LinearLayer {
            weight: random_mat(&mut rng, 4, 3),
            bias: Some(random_vec(&mut rng, 4)),
        };
        let x = random_vec(&mut rng, 3);
        let probe = random_vec(&mut rng, 4);
        let loss = |l: &LinearLayer, x: &[f64]| dot(&l.forward(x).unwrap(), &probe);
        let g = layer.backward(&x, &probe).unwrap();

        let fd_x = finite_diff_grad(|v| loss(&layer, v), &x, 1e-6);
        assert!(rel_err(&g.grad_x, &fd_x) < 1e-6);

        let fd_w = finite_diff_grad(
            |w| {
                let mut l = layer.clone();
                l.weight.as_mut_slice().copy_from_slice(w);
                loss(&l, &x)
            },
            layer.weight.as_slice(),
            1e-6,
        );
        assert!(rel_err(g.grad_weight.as_slice(), &fd_w) < 1e-6);

        let b = layer.bias.clone().unwrap();
        let fd_b = finite_diff_grad(
            |bv| {
                let mut l = layer.clone();
                l.bias = Some(bv.to_vec());
                loss(&l, &x)
            },
            &b,
            1e-6,
        );
        assert!(rel_err(g.grad_bias.as_ref().unwrap(), &fd_b) < 1e-6);
    }

    #[test]
    fn rnn_zero_everything_gives_zero_state() {
        let cell = RnnCell::zeros(3, 2);
        assert_eq!(cell.forward(&[0.0; 3], &[0.0; 2]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn rnn_output_is_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cell = RnnCell {
            w_state: random_mat(&mut rng, 5, 5),
            w_input: random_mat(&mut rng, 5, 4),
            bias: random_vec(&mut rng, 5),
        };
        let s = random_vec(&mut rng, 5);
        let x: Vec<f64> = random_vec(&mut rng, 4).iter().map(|v| v * 3.0).collect();
        assert!(cell.forward(&s, &x).unwrap().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn rnn_backward_matches_finite_differences_over_many_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let cell = RnnCell {
                w_state: random_mat(&mut rng, 4, 4),
                w_input: random_mat(&mut rng, 4, 3),
                bias: random_vec(&mut rng, 4),
            };
            let s = random_vec(&mut rng, 4);
            let x = random_vec(&mut rng, 3);
            let probe = random_vec(&mut rng, 4);
            let loss = |c: &RnnCell, s: &[f64], x: &[f64]| dot(&c.forward(s, x).unwrap(), &probe);
            let out = cell.forward(&s, &x).unwrap();
            let g = cell.backward(&s, &x, &out, &probe).unwrap();
            let h = 1e-5;

            assert!(rel_err(&g.grad_state, &finite_diff_grad(|v| loss(&cell, v, &x), &s, h)) < 1e-4);
            assert!(rel_err(&g.grad_input, &finite_diff_grad(|v| loss(&cell, &s, v), &x, h)) < 1e-4);
            let fd_ws = finite_diff_grad(
                |w| {
                    let mut c = cell.clone();
                    c.w_state.as_mut_slice().copy_from_slice(w);
                    loss(&c, &s, &x)
                },
                cell.w_state.as_slice(),
                h,
            );
            assert!(rel_err(g.params.w_state.as_slice(), &fd_ws) < 1e-4);
            let fd_wi = finite_diff_grad(
                |w| {
                    let mut c = cell.clone();
                    c.w_input.as_mut_slice().copy_from_slice(w);
                    loss(&c, &s, &x)
                },
                cell.w_input.as_slice(),
                h,
            );
            assert!(rel_err(g.params.w_input.as_slice(), &fd_wi) < 1e-4);
            let fd_b = finite_diff_grad(
                |b| {
                    let mut c = cell.clone();
                    c.bias = b.to_vec();
                    loss(&c, &s, &x)
                },
                &cell.bias,
                h,
            );
            assert!(rel_err(&g.params.bias, &fd_b) < 1e-4);
        }
    }

    #[test]
    fn batched_rnn_agrees_with_single_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cell = RnnCell {
            w_state: random_mat(&mut rng, 6, 6),
            w_input: random_mat(&mut rng, 6, 11),
            bias: random_vec(&mut rng, 6),
        };
        let states = random_mat(&mut rng, 40, 6);
        let inputs = random_mat(&mut rng, 40, 11);
        let grad_out = random_mat(&mut rng, 40, 6);
        let out = cell.forward_batch(&states, &inputs).unwrap();
        let mut acc = RnnCell::zeros(6, 11);
        let (gs, gx) = cell.backward_batch(&states, &inputs, &out, &grad_out, &mut acc);
        let mut expect = RnnCell::zeros(6, 11);
        for r in 0..40 {
            let single = cell.forward(states.row(r), inputs.row(r)).unwrap();
            assert_eq!(single.as_slice(), out.row(r));
            let g = cell
                .backward(states.row(r), inputs.row(r), &single, grad_out.row(r))
                .unwrap();
            assert!(rel_err(&g.grad_state, gs.row(r)) < 1e-12);
            assert!(rel_err(&g.grad_input, gx.row(r)) < 1e-12);
            axpy(1.0, g.params.w_state.as_slice(), expect.w_state.as_mut_slice());
            axpy(1.0, g.params.w_input.as_slice(), expect.w_input.as_mut_slice());
            axpy(1.0, &g.params.bias, &mut expect.bias);
        }
        assert!(rel_err(acc.w_state.as_slice(), expect.w_state.as_slice()) < 1e-12);
        assert!(rel_err(acc.w_input.as_slice(), expect.w_input.as_slice()) < 1e-12);
        assert!(rel_err(&acc.bias, &expect.bias) < 1e-12);
    }

    #[test]
    fn gemm_nt_rows_equal_matvec_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_mat(&mut rng, 50, 19);
        let w = random_mat(&mut rng, 7, 19);
        let out = gemm_nt(&a, &w);
        for r in 0..50 {
            for o in 0..7 {
                assert_eq!(out.get(r, o), dot(a.row(r), w.row(o)));
            }
        }
    }

    #[test]
    fn finite_diff_of_squared_norm() {
        let g = finite_diff_grad(|v| dot(v, v), &[1.0, 2.0], 1e-6);
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_of_constant_is_zero() {
        assert_eq!(finite_diff_grad(|_| 3.0, &[1.0, -1.0, 0.5], 1e-5), vec![0.0; 3]);
    }

    #[test]
    fn scalar_helpers() {
        let x = [0.3, -1.2];
        assert_eq!(l2_dist(&x, &x).unwrap(), 0.0);
        assert_eq!(l2_dist(&[0.0, 3.0], &[4.0, 0.0]).unwrap(), 5.0);
        assert!(l2_dist(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cell = RnnCell {
            w_state: random_mat(&mut rng, 3, 3),
            w_input: random_mat(&mut rng, 3, 2),
            bias: random_vec(&mut rng, 3),
        };
        let a = cell.forward(&[0.1, 0.2, 0.3], &[1.0, -1.0]).unwrap();
        let b = cell.forward(&[0.1, 0.2, 0.3], &[1.0, -1.0]).unwrap();
        assert_eq!(a, b);
    }
}
