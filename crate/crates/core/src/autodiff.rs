//! Reverse-mode differentiation for the model layers.
//!
//! The differentiable surface is small and fixed — affine maps, elementwise
//! tanh, one convolution + pooling stage, per-oscillator normalization, and
//! the fused softmax-cross-entropy loss — so reverse mode is implemented as
//! explicit batched backward rules per primitive rather than a scalar
//! graph. A forward pass records a [`Tape`] of per-layer caches; the
//! backward pass walks it in reverse.
//!
//! Gradients flow *through* the fixed backbones but never *into* them:
//! backbone weights have no gradient slot anywhere in this module. For
//! continuous backbones two independent routes are provided and
//! cross-checked in tests:
//!
//! - [`bptt_backward_batch`] differentiates the RK4 discretization exactly
//!   (reverse-stage sweeps, the transpose of the variational propagator);
//! - [`adjoint_backward_batch`] integrates the continuous adjoint equation
//!   `dlambda/dt = -(df/dx)^T lambda` backward in time with the same RK4
//!   steps, restarting each step from the stored forward checkpoint so no
//!   re-integration error accumulates.
//!
//! Batches are row-major matrices (rows are samples) throughout.

use alloc::string::String;
use alloc::vec::Vec;

use crate::dynamics::{step_plan, VectorField};
use crate::error::{invalid_arg, Error, Result};
use crate::fmath;
use crate::matrix::Matrix;

/// Floor under per-oscillator norms; below it normalization is undefined.
pub const NORM_FLOOR: f64 = 1e-12;

// ── losses ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SoftmaxCrossEntropy,
    Mse,
}

/// Mean softmax-cross-entropy over the batch with its fused gradient
/// `(softmax(z) - onehot(y)) / batch`.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[u8]) -> (f64, Matrix) {
    assert_eq!(logits.rows(), labels.len());
    let b = logits.rows();
    let c = logits.cols();
    let mut grad = Matrix::zeros(b, c);
    let mut loss = 0.0;
    for i in 0..b {
        let row = logits.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let mut z = 0.0;
        for &v in row {
            z += fmath::exp(v - m);
        }
        let y = labels[i] as usize;
        loss += -(row[y] - m - fmath::ln(z));
        let g = grad.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            let p = fmath::exp(v - m) / z;
            g[j] = (p - if j == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    (loss / b as f64, grad)
}

/// Mean squared error against one-hot targets with gradient
/// `2 (z - onehot(y)) / batch`.
pub fn mse_loss(logits: &Matrix, labels: &[u8]) -> (f64, Matrix) {
    assert_eq!(logits.rows(), labels.len());
    let b = logits.rows();
    let mut grad = Matrix::zeros(b, logits.cols());
    let mut loss = 0.0;
    for i in 0..b {
        let y = labels[i] as usize;
        let row = logits.row(i);
        let g = grad.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            let t = if j == y { 1.0 } else { 0.0 };
            loss += (v - t) * (v - t);
            g[j] = 2.0 * (v - t) / b as f64;
        }
    }
    (loss / b as f64, grad)
}

pub fn loss_with_grad(kind: LossKind, logits: &Matrix, labels: &[u8]) -> (f64, Matrix) {
    match kind {
        LossKind::SoftmaxCrossEntropy => softmax_cross_entropy(logits, labels),
        LossKind::Mse => mse_loss(logits, labels),
    }
}

// ── affine ─────────────────────────────────────────────────────────────

/// `Y = X W + b` with `W` stored input x output.
pub fn affine_forward(x: &Matrix, w: &Matrix, b: Option<&Matrix>) -> Matrix {
    let mut y = x.matmul(w);
    if let Some(b) = b {
        for i in 0..y.rows() {
            for (v, &bv) in y.row_mut(i).iter_mut().zip(b.row(0)) {
                *v += bv;
            }
        }
    }
    y
}

/// Backward of [`affine_forward`]: returns `(dX, dW, db)`.
pub fn affine_backward(
    x: &Matrix,
    w: &Matrix,
    has_bias: bool,
    upstream: &Matrix,
) -> (Matrix, Matrix, Option<Matrix>) {
    let (dw, db) = affine_backward_params(x, has_bias, upstream);
    let dx = upstream.matmul_nt(w); // dY W^T
    (dx, dw, db)
}

/// Parameter gradients only; used at the first trainable layer where the
/// input cotangent would be discarded.
pub fn affine_backward_params(
    x: &Matrix,
    has_bias: bool,
    upstream: &Matrix,
) -> (Matrix, Option<Matrix>) {
    let dw = x.matmul_tn(upstream); // X^T dY
    let db = if has_bias {
        let mut db = Matrix::zeros(1, upstream.cols());
        for i in 0..upstream.rows() {
            for (d, &u) in db.row_mut(0).iter_mut().zip(upstream.row(i)) {
                *d += u;
            }
        }
        Some(db)
    } else {
        None
    };
    (dw, db)
}

// ── elementwise tanh ───────────────────────────────────────────────────

pub fn tanh_forward(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = fmath::tanh(*v);
    }
    y
}

/// Backward through tanh given the cached *output*.
pub fn tanh_backward(output: &Matrix, upstream: &Matrix) -> Matrix {
    let mut dx = upstream.clone();
    for (d, &y) in dx.data_mut().iter_mut().zip(output.data()) {
        *d *= 1.0 - y * y;
    }
    dx
}

// ── per-oscillator normalization ───────────────────────────────────────

/// Normalizes each 3-block of every row onto the unit sphere.
pub fn norm_triplets_forward(x: &Matrix) -> Result<Matrix> {
    if x.cols() % 3 != 0 {
        return Err(invalid_arg("norm_triplets: width must be a multiple of 3"));
    }
    let mut y = x.clone();
    for i in 0..y.rows() {
        let row = y.row_mut(i);
        for k in 0..row.len() / 3 {
            let m = &mut row[3 * k..3 * k + 3];
            let n = fmath::hypot3(m[0], m[1], m[2]);
            if n < NORM_FLOOR {
                return Err(Error::InvalidState(String::from(
                    "norm_triplets: block norm below floor",
                )));
            }
            m[0] /= n;
            m[1] /= n;
            m[2] /= n;
        }
    }
    Ok(y)
}

/// Backward through the block normalization given the cached *input*:
/// the tangential projection `(I - y y^T)/|m|` per block.
pub fn norm_triplets_backward(input: &Matrix, upstream: &Matrix) -> Matrix {
    let mut dx = Matrix::zeros(input.rows(), input.cols());
    for i in 0..input.rows() {
        let xr = input.row(i);
        let ur = upstream.row(i);
        let dr = dx.row_mut(i);
        for k in 0..xr.len() / 3 {
            let m = [xr[3 * k], xr[3 * k + 1], xr[3 * k + 2]];
            let u = [ur[3 * k], ur[3 * k + 1], ur[3 * k + 2]];
            let n = fmath::hypot3(m[0], m[1], m[2]);
            let mh = [m[0] / n, m[1] / n, m[2] / n];
            let radial = u[0] * mh[0] + u[1] * mh[1] + u[2] * mh[2];
            for d in 0..3 {
                dr[3 * k + d] = (u[d] - radial * mh[d]) / n;
            }
        }
    }
    dx
}

// ── convolution + average pooling ──────────────────────────────────────

/// Shape bookkeeping for the single convolution stage: valid convolution
/// with an odd square kernel, stride 1, followed by tanh and 2x2 average
/// pooling with stride 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub channels: usize,
}

impl ConvShape {
    pub fn conv_h(&self) -> usize {
        self.in_h - self.k + 1
    }
    pub fn conv_w(&self) -> usize {
        self.in_w - self.k + 1
    }
    pub fn pool_h(&self) -> usize {
        self.conv_h() / 2
    }
    pub fn pool_w(&self) -> usize {
        self.conv_w() / 2
    }
    pub fn input_dim(&self) -> usize {
        self.in_h * self.in_w
    }
    pub fn conv_dim(&self) -> usize {
        self.channels * self.conv_h() * self.conv_w()
    }
    pub fn output_dim(&self) -> usize {
        self.channels * self.pool_h() * self.pool_w()
    }
}

/// Valid convolution of single-channel images (rows of `x`) with
/// `channels` kernels; output is channel-major `[c][i][j]` per row.
pub fn conv_forward(x: &Matrix, kernel: &Matrix, bias: &Matrix, shape: ConvShape) -> Matrix {
    debug_assert_eq!(kernel.rows(), shape.channels);
    debug_assert_eq!(kernel.cols(), shape.k * shape.k);
    let (oh, ow) = (shape.conv_h(), shape.conv_w());
    let mut out = Matrix::zeros(x.rows(), shape.conv_dim());
    for s in 0..x.rows() {
        let img = x.row(s);
        let orow = out.row_mut(s);
        for c in 0..shape.channels {
            let ker = kernel.row(c);
            let b = bias.get(0, c);
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = b;
                    for a in 0..shape.k {
                        let irow = &img[(oi + a) * shape.in_w + oj..];
                        let krow = &ker[a * shape.k..(a + 1) * shape.k];
                        for (kv, iv) in krow.iter().zip(irow) {
                            acc += kv * iv;
                        }
                    }
                    orow[c * oh * ow + oi * ow + oj] = acc;
                }
            }
        }
    }
    out
}

/// Backward of [`conv_forward`]: returns `(dX, dKernel, dBias)`.
pub fn conv_backward(
    x: &Matrix,
    kernel: &Matrix,
    shape: ConvShape,
    upstream: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let (oh, ow) = (shape.conv_h(), shape.conv_w());
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    let mut dk = Matrix::zeros(shape.channels, shape.k * shape.k);
    let mut db = Matrix::zeros(1, shape.channels);
    for s in 0..x.rows() {
        let img = x.row(s);
        let urow = upstream.row(s);
        for c in 0..shape.channels {
            let ker = kernel.row(c);
            for oi in 0..oh {
                for oj in 0..ow {
                    let g = urow[c * oh * ow + oi * ow + oj];
                    if g == 0.0 {
                        continue;
                    }
                    db.data_mut()[c] += g;
                    for a in 0..shape.k {
                        for bcol in 0..shape.k {
                            let idx = (oi + a) * shape.in_w + (oj + bcol);
                            dk.data_mut()[c * shape.k * shape.k + a * shape.k + bcol] +=
                                g * img[idx];
                            dx.row_mut(s)[idx] += g * ker[a * shape.k + bcol];
                        }
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

/// 2x2 average pooling with stride 2 over channel-major feature maps.
pub fn avgpool_forward(x: &Matrix, shape: ConvShape) -> Matrix {
    let (ih, iw) = (shape.conv_h(), shape.conv_w());
    let (oh, ow) = (shape.pool_h(), shape.pool_w());
    let mut out = Matrix::zeros(x.rows(), shape.output_dim());
    for s in 0..x.rows() {
        let xr = x.row(s);
        let orow = out.row_mut(s);
        for c in 0..shape.channels {
            for oi in 0..oh {
                for oj in 0..ow {
                    let base = c * ih * iw + 2 * oi * iw + 2 * oj;
                    let acc = xr[base] + xr[base + 1] + xr[base + iw] + xr[base + iw + 1];
                    orow[c * oh * ow + oi * ow + oj] = 0.25 * acc;
                }
            }
        }
    }
    out
}

pub fn avgpool_backward(shape: ConvShape, upstream: &Matrix) -> Matrix {
    let (ih, iw) = (shape.conv_h(), shape.conv_w());
    let (oh, ow) = (shape.pool_h(), shape.pool_w());
    let mut dx = Matrix::zeros(upstream.rows(), shape.conv_dim());
    for s in 0..upstream.rows() {
        let urow = upstream.row(s);
        let dr = dx.row_mut(s);
        for c in 0..shape.channels {
            for oi in 0..oh {
                for oj in 0..ow {
                    let g = 0.25 * urow[c * oh * ow + oi * ow + oj];
                    let base = c * ih * iw + 2 * oi * iw + 2 * oj;
                    dr[base] += g;
                    dr[base + 1] += g;
                    dr[base + iw] += g;
                    dr[base + iw + 1] += g;
                }
            }
        }
    }
    dx
}

// ── batched trajectories for continuous backbones ──────────────────────

/// Forward trajectory of a whole batch, stored at RK4 step resolution;
/// rows of every entry are samples. These checkpoints are what both
/// backward routes consume.
#[derive(Debug, Clone)]
pub struct BatchTrajectory {
    pub states: Vec<Matrix>,
    n_full: usize,
    rem: f64,
    dt: f64,
}

fn field_batch<F: VectorField + ?Sized>(f: &F, xs: &Matrix, out: &mut Matrix) {
    f.field_batch(xs, out);
}

fn jvp_batch<F: VectorField + ?Sized>(f: &F, xs: &Matrix, vs: &Matrix, out: &mut Matrix) {
    f.jvp_batch(xs, vs, out);
}

fn vjp_batch<F: VectorField + ?Sized>(f: &F, xs: &Matrix, vs: &Matrix, out: &mut Matrix) {
    f.vjp_batch(xs, vs, out);
}

impl BatchTrajectory {
    /// Integrates every row of `x0s` for `total_t` with step `dt`.
    pub fn integrate<F: VectorField + ?Sized>(
        f: &F,
        x0s: &Matrix,
        total_t: f64,
        dt: f64,
    ) -> Result<Self> {
        if x0s.cols() != f.dim() {
            return Err(invalid_arg("BatchTrajectory: state dimension mismatch"));
        }
        if total_t < 0.0 || !(dt > 0.0) {
            return Err(invalid_arg("BatchTrajectory: require total_t >= 0, dt > 0"));
        }
        let (n_full, rem) = step_plan(total_t, dt);
        let steps = n_full + if rem > 0.0 { 1 } else { 0 };
        let mut states = Vec::with_capacity(steps + 1);
        states.push(x0s.clone());
        let b = x0s.rows();
        let n = x0s.cols();
        let mut k1 = Matrix::zeros(b, n);
        let mut k2 = Matrix::zeros(b, n);
        let mut k3 = Matrix::zeros(b, n);
        let mut k4 = Matrix::zeros(b, n);
        let mut tmp = Matrix::zeros(b, n);
        for step in 0..steps {
            let h = if step < n_full { dt } else { rem };
            let x = states.last().expect("nonempty");
            field_batch(f, x, &mut k1);
            for (t, (xv, kv)) in tmp
                .data_mut()
                .iter_mut()
                .zip(x.data().iter().zip(k1.data()))
            {
                *t = xv + 0.5 * h * kv;
            }
            field_batch(f, &tmp, &mut k2);
            for (t, (xv, kv)) in tmp
                .data_mut()
                .iter_mut()
                .zip(x.data().iter().zip(k2.data()))
            {
                *t = xv + 0.5 * h * kv;
            }
            field_batch(f, &tmp, &mut k3);
            for (t, (xv, kv)) in tmp
                .data_mut()
                .iter_mut()
                .zip(x.data().iter().zip(k3.data()))
            {
                *t = xv + h * kv;
            }
            field_batch(f, &tmp, &mut k4);
            let mut next = Matrix::zeros(b, n);
            for (i, nv) in next.data_mut().iter_mut().enumerate() {
                *nv = x.data()[i]
                    + h / 6.0
                        * (k1.data()[i]
                            + 2.0 * k2.data()[i]
                            + 2.0 * k3.data()[i]
                            + k4.data()[i]);
            }
            for i in 0..b {
                f.post_step(next.row_mut(i));
            }
            if !next.is_finite() {
                return Err(Error::Divergence {
                    t: step as f64 * dt,
                    last_state: x.row(0).to_vec(),
                });
            }
            states.push(next);
        }
        Ok(BatchTrajectory {
            states,
            n_full,
            rem,
            dt,
        })
    }

    pub fn step_count(&self) -> usize {
        self.n_full + if self.rem > 0.0 { 1 } else { 0 }
    }

    fn step_size(&self, step: usize) -> f64 {
        if step < self.n_full {
            self.dt
        } else {
            self.rem
        }
    }

    pub fn final_states(&self) -> &Matrix {
        self.states.last().expect("nonempty")
    }

    /// Recomputes the four stage-state matrices and the pre-projection
    /// endpoint of one step from its checkpoint.
    fn stages<F: VectorField + ?Sized>(
        &self,
        f: &F,
        step: usize,
    ) -> ([Matrix; 4], [Matrix; 4], Matrix) {
        let x = &self.states[step];
        let h = self.step_size(step);
        let b = x.rows();
        let n = x.cols();
        let mut k1 = Matrix::zeros(b, n);
        let mut k2 = Matrix::zeros(b, n);
        let mut k3 = Matrix::zeros(b, n);
        let mut k4 = Matrix::zeros(b, n);
        let mut y2 = Matrix::zeros(b, n);
        let mut y3 = Matrix::zeros(b, n);
        let mut y4 = Matrix::zeros(b, n);
        field_batch(f, x, &mut k1);
        for (i, v) in y2.data_mut().iter_mut().enumerate() {
            *v = x.data()[i] + 0.5 * h * k1.data()[i];
        }
        field_batch(f, &y2, &mut k2);
        for (i, v) in y3.data_mut().iter_mut().enumerate() {
            *v = x.data()[i] + 0.5 * h * k2.data()[i];
        }
        field_batch(f, &y3, &mut k3);
        for (i, v) in y4.data_mut().iter_mut().enumerate() {
            *v = x.data()[i] + h * k3.data()[i];
        }
        field_batch(f, &y4, &mut k4);
        let mut endpoint = Matrix::zeros(b, n);
        for (i, v) in endpoint.data_mut().iter_mut().enumerate() {
            *v = x.data()[i]
                + h / 6.0
                    * (k1.data()[i] + 2.0 * k2.data()[i] + 2.0 * k3.data()[i] + k4.data()[i]);
        }
        ([x.clone(), y2, y3, y4], [k1, k2, k3, k4], endpoint)
    }
}

/// Exact reverse of the RK4 discretization: pulls the upstream cotangent
/// rows back through every step (discretize-then-differentiate).
pub fn bptt_backward_batch<F: VectorField + ?Sized>(
    f: &F,
    traj: &BatchTrajectory,
    upstream: &Matrix,
) -> Matrix {
    let b = upstream.rows();
    let n = upstream.cols();
    let mut g = upstream.clone();
    let mut buf = Matrix::zeros(b, n);
    for step in (0..traj.step_count()).rev() {
        let h = traj.step_size(step);
        let ([y1, y2, y3, y4], _k, endpoint) = traj.stages(f, step);
        for i in 0..b {
            f.post_step_tangent(endpoint.row(i), g.row_mut(i));
        }
        let mut g_k1 = g.scale(h / 6.0);
        let mut g_k2 = g.scale(h / 3.0);
        let mut g_k3 = g.scale(h / 3.0);
        let g_k4 = g.scale(h / 6.0);
        let mut g_v = g.clone();
        vjp_batch(f, &y4, &g_k4, &mut buf);
        g_v.add_scaled(1.0, &buf);
        g_k3.add_scaled(h, &buf);
        vjp_batch(f, &y3, &g_k3, &mut buf);
        g_v.add_scaled(1.0, &buf);
        g_k2.add_scaled(0.5 * h, &buf);
        vjp_batch(f, &y2, &g_k2, &mut buf);
        g_v.add_scaled(1.0, &buf);
        g_k1.add_scaled(0.5 * h, &buf);
        vjp_batch(f, &y1, &g_k1, &mut buf);
        g_v.add_scaled(1.0, &buf);
        g = g_v;
    }
    g
}

/// Continuous adjoint route: integrates `dlambda/dt = -(df/dx)^T lambda`
/// backward with RK4, re-deriving the state within each step from the
/// stored checkpoint (the state is reset at every step boundary, so the
/// chaotic backward drift never compounds).
pub fn adjoint_backward_batch<F: VectorField + ?Sized>(
    f: &F,
    traj: &BatchTrajectory,
    upstream: &Matrix,
) -> Matrix {
    let b = upstream.rows();
    let n = upstream.cols();
    let mut lambda = upstream.clone();
    let mut kx = [
        Matrix::zeros(b, n),
        Matrix::zeros(b, n),
        Matrix::zeros(b, n),
        Matrix::zeros(b, n),
    ];
    let mut kl = [
        Matrix::zeros(b, n),
        Matrix::zeros(b, n),
        Matrix::zeros(b, n),
        Matrix::zeros(b, n),
    ];
    let mut xs = Matrix::zeros(b, n);
    let mut ls = Matrix::zeros(b, n);
    for step in (0..traj.step_count()).rev() {
        let h = -traj.step_size(step); // backward in time
        // Chain the step's projection first (it acted after the flow).
        let (_, _, endpoint) = traj.stages(f, step);
        for i in 0..b {
            f.post_step_tangent(endpoint.row(i), lambda.row_mut(i));
        }
        let x1 = &traj.states[step + 1];
        // Stage 1 at (x_{i+1}, lambda).
        field_batch(f, x1, &mut kx[0]);
        vjp_batch(f, x1, &lambda, &mut kl[0]);
        kl[0].scale_mut(-1.0);
        // Stage 2.
        stage_combine(&mut xs, x1, &kx[0], 0.5 * h);
        stage_combine(&mut ls, &lambda, &kl[0], 0.5 * h);
        field_batch(f, &xs, &mut kx[1]);
        vjp_batch(f, &xs, &ls, &mut kl[1]);
        kl[1].scale_mut(-1.0);
        // Stage 3.
        stage_combine(&mut xs, x1, &kx[1], 0.5 * h);
        stage_combine(&mut ls, &lambda, &kl[1], 0.5 * h);
        field_batch(f, &xs, &mut kx[2]);
        vjp_batch(f, &xs, &ls, &mut kl[2]);
        kl[2].scale_mut(-1.0);
        // Stage 4.
        stage_combine(&mut xs, x1, &kx[2], h);
        stage_combine(&mut ls, &lambda, &kl[2], h);
        field_batch(f, &xs, &mut kx[3]);
        vjp_batch(f, &xs, &ls, &mut kl[3]);
        kl[3].scale_mut(-1.0);
        for (i, v) in lambda.data_mut().iter_mut().enumerate() {
            *v += h / 6.0
                * (kl[0].data()[i]
                    + 2.0 * kl[1].data()[i]
                    + 2.0 * kl[2].data()[i]
                    + kl[3].data()[i]);
        }
        // The x part of the augmented system is discarded: the next step
        // restarts from the stored checkpoint.
    }
    lambda
}

fn stage_combine(out: &mut Matrix, base: &Matrix, k: &Matrix, hc: f64) {
    for (o, (b, kv)) in out
        .data_mut()
        .iter_mut()
        .zip(base.data().iter().zip(k.data()))
    {
        *o = b + hc * kv;
    }
}

/// Push tangent rows forward along the cached batch trajectory (the
/// action of `J_T` per row); the forward mirror of
/// [`bptt_backward_batch`], used by the batched FTMLE engine.
pub fn tangent_forward_batch<F: VectorField + ?Sized>(
    f: &F,
    traj: &BatchTrajectory,
    tangents: &Matrix,
) -> Matrix {
    let b = tangents.rows();
    let n = tangents.cols();
    let mut v = tangents.clone();
    let mut kv = Matrix::zeros(b, n);
    let mut u = Matrix::zeros(b, n);
    for step in 0..traj.step_count() {
        let h = traj.step_size(step);
        let ([y1, y2, y3, y4], _k, endpoint) = traj.stages(f, step);
        jvp_batch(f, &y1, &v, &mut kv);
        let kv1 = kv.clone();
        stage_combine(&mut u, &v, &kv1, 0.5 * h);
        jvp_batch(f, &y2, &u, &mut kv);
        let kv2 = kv.clone();
        stage_combine(&mut u, &v, &kv2, 0.5 * h);
        jvp_batch(f, &y3, &u, &mut kv);
        let kv3 = kv.clone();
        stage_combine(&mut u, &v, &kv3, h);
        jvp_batch(f, &y4, &u, &mut kv);
        for (i, vv) in v.data_mut().iter_mut().enumerate() {
            *vv += h / 6.0
                * (kv1.data()[i] + 2.0 * kv2.data()[i] + 2.0 * kv3.data()[i] + kv.data()[i]);
        }
        for i in 0..b {
            f.post_step_tangent(endpoint.row(i), v.row_mut(i));
        }
    }
    v
}

// ── the tape ───────────────────────────────────────────────────────────

/// One recorded primitive application with the forward values its
/// backward rule needs.
#[derive(Debug, Clone)]
pub enum Record {
    /// Cached layer input.
    Affine { input: Matrix },
    /// Cached layer output (tanh' is recovered from the output).
    Tanh { output: Matrix },
    /// Cached layer input.
    NormTriplets { input: Matrix },
    /// Cached image batch plus the post-conv (pre-tanh) and post-tanh maps.
    Conv {
        input: Matrix,
        activated: Matrix,
        shape: ConvShape,
    },
    /// Orbit of a discrete backbone: `orbit[i]` is the batch state after
    /// `i` steps; `orbit[0]` is the backbone input.
    DiscreteBackbone { orbit: Vec<Matrix> },
    /// Checkpointed batch trajectory of a continuous backbone.
    ContinuousBackbone { trajectory: BatchTrajectory },
}

/// Ordered record of one forward pass with the final output. Replaying
/// the recorded inputs through the same model reproduces `output`
/// bitwise (forward passes are pure).
#[derive(Debug, Clone, Default)]
pub struct Tape {
    pub records: Vec<Record>,
    pub output: Option<Matrix>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            records: Vec::new(),
            output: None,
        }
    }

    pub fn push(&mut self, r: Record) {
        self.records.push(r);
    }

    pub fn output(&self) -> Result<&Matrix> {
        self.output
            .as_ref()
            .ok_or_else(|| Error::Usage(String::from("backward before forward")))
    }
}

/// Gradients of a chaos model's trainable parameters. Fixed backbone
/// weights deliberately have no slot here.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub d_w_in: Matrix,
    pub d_w_out: Matrix,
    pub d_b_out: Option<Matrix>,
    pub d_conv_kernel: Option<Matrix>,
    pub d_conv_bias: Option<Matrix>,
    /// Inter-stage weights of the deep architecture, in stage order.
    pub d_w_k: Vec<Matrix>,
}
