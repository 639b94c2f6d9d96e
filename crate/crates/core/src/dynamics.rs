//! Backbone dynamical systems and their integration.
//!
//! Three systems are provided: the discrete echo-state map
//! `x(i+1) = f(W' x(i))`, the cyclic Lorenz-96 flow, and coupled
//! spin-torque oscillators under the Landau-Lifshitz-Gilbert equation in
//! explicit form. Continuous systems implement [`VectorField`], which also
//! exposes exact Jacobian-vector and vector-Jacobian products so tangent
//! propagation, Benettin runs, and backward passes never fall back to
//! finite differences.
//!
//! Integration is classical fixed-step RK4; the last step is shortened so
//! the total time is exactly `T`. Per-step renormalization of the STO
//! magnetizations is applied through the [`VectorField::post_step`] hook,
//! with the matching tangent-space projection in
//! [`VectorField::post_step_tangent`].

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid_arg, Error, Result};
use crate::fmath;
use crate::matrix::{all_finite, Matrix};
use crate::rng::RngStream;

// ── small 3-vector helpers ─────────────────────────────────────────────

#[inline]
fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
fn scale3(a: [f64; 3], c: f64) -> [f64; 3] {
    [a[0] * c, a[1] * c, a[2] * c]
}

#[inline]
fn vec3(s: &[f64]) -> [f64; 3] {
    [s[0], s[1], s[2]]
}

// ── discrete echo-state map ────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => fmath::tanh(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the post-activation value `y = f(z)`.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// The fixed map `x(i+1) = f(W' x(i))`. `W'` is never mutated after
/// construction; its transpose is cached for backward passes.
#[derive(Debug, Clone)]
pub struct DiscreteMapSystem {
    w: Matrix,
    w_t: Matrix,
    activation: Activation,
}

impl DiscreteMapSystem {
    pub fn new(w: Matrix, activation: Activation) -> Result<Self> {
        if w.rows() != w.cols() {
            return Err(invalid_arg(
                "DiscreteMapSystem: internal weight must be square",
            ));
        }
        let w_t = w.transpose();
        Ok(DiscreteMapSystem { w, w_t, activation })
    }

    pub fn dim(&self) -> usize {
        self.w.rows()
    }

    pub fn weight(&self) -> &Matrix {
        &self.w
    }

    pub fn weight_t(&self) -> &Matrix {
        &self.w_t
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// One map application (no dimension check; see [`esn_step`]).
    pub fn step(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.w.matvec(x);
        for v in &mut z {
            *v = self.activation.apply(*v);
        }
        z
    }

    /// Batched map application; rows are samples.
    pub fn step_batch(&self, x: &Matrix) -> Matrix {
        let mut z = x.matmul(&self.w_t);
        for v in z.data_mut() {
            *v = self.activation.apply(*v);
        }
        z
    }

    /// One tangent step: `J <- diag(f'(z)) W' J`, with `f'` recovered from
    /// the post-activation state `x_next`.
    pub fn tangent_step(&self, x_next: &[f64], j: &Matrix) -> Matrix {
        let mut out = self.w.matmul(j);
        for (i, &y) in x_next.iter().enumerate() {
            let d = self.activation.derivative_from_output(y);
            for v in out.row_mut(i) {
                *v *= d;
            }
        }
        out
    }

    /// Tangent push-forward: `v <- diag(f'(x_next)) W' v`.
    pub fn tangent_jvp(&self, x_next: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = self.w.matvec(v);
        for (o, &y) in out.iter_mut().zip(x_next) {
            *o *= self.activation.derivative_from_output(y);
        }
        out
    }

    /// Tangent pull-back: `v <- W'^T (f'(x_next) . v)`.
    pub fn tangent_vjp(&self, x_next: &[f64], v: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = v
            .iter()
            .zip(x_next)
            .map(|(&g, &y)| g * self.activation.derivative_from_output(y))
            .collect();
        self.w_t.matvec(&scaled)
    }
}

/// `f(W' x)` with dimension validation.
pub fn esn_step(system: &DiscreteMapSystem, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != system.dim() {
        return Err(invalid_arg("esn_step: state dimension mismatch"));
    }
    Ok(system.step(x))
}

// ── continuous vector fields ───────────────────────────────────────────

/// A continuous-time system with exact tangent operations.
pub trait VectorField {
    fn dim(&self) -> usize;

    /// `out = f(x)`.
    fn field(&self, x: &[f64], out: &mut [f64]);

    /// `out = (df/dx)(x) . v`.
    fn jvp(&self, x: &[f64], v: &[f64], out: &mut [f64]);

    /// `out = (df/dx)(x)^T . v`.
    fn vjp(&self, x: &[f64], v: &[f64], out: &mut [f64]);

    /// Dense Jacobian, assembled column-by-column from `jvp` by default.
    fn jacobian(&self, x: &[f64]) -> Matrix {
        let n = self.dim();
        let mut j = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        for c in 0..n {
            e[c] = 1.0;
            self.jvp(x, &e, &mut col);
            e[c] = 0.0;
            for (r, &v) in col.iter().enumerate() {
                j.set(r, c, v);
            }
        }
        j
    }

    /// State projection applied by the integrator after every step.
    fn post_step(&self, _x: &mut [f64]) {}

    /// Tangent projection matching [`VectorField::post_step`], evaluated at
    /// the pre-projection state.
    fn post_step_tangent(&self, _x_pre: &[f64], _v: &mut [f64]) {}

    /// Batched field over sample rows; overridden where the coupling
    /// structure turns into one matrix product for the whole batch.
    fn field_batch(&self, xs: &Matrix, out: &mut Matrix) {
        for i in 0..xs.rows() {
            self.field(xs.row(i), out.row_mut(i));
        }
    }

    fn jvp_batch(&self, xs: &Matrix, vs: &Matrix, out: &mut Matrix) {
        for i in 0..xs.rows() {
            self.jvp(xs.row(i), vs.row(i), out.row_mut(i));
        }
    }

    fn vjp_batch(&self, xs: &Matrix, vs: &Matrix, out: &mut Matrix) {
        for i in 0..xs.rows() {
            self.vjp(xs.row(i), vs.row(i), out.row_mut(i));
        }
    }
}

/// `dx/dt = A x + b`; handy for closed-form checks and the trivial
/// bifurcation family `dx/dt = -x + F`.
#[derive(Debug, Clone)]
pub struct AffineSystem {
    pub a: Matrix,
    pub b: Vec<f64>,
}

impl AffineSystem {
    pub fn new(a: Matrix, b: Vec<f64>) -> Result<Self> {
        if a.rows() != a.cols() || a.rows() != b.len() {
            return Err(invalid_arg("AffineSystem: shape mismatch"));
        }
        Ok(AffineSystem { a, b })
    }
}

impl VectorField for AffineSystem {
    fn dim(&self) -> usize {
        self.a.rows()
    }

    fn field(&self, x: &[f64], out: &mut [f64]) {
        let y = self.a.matvec(x);
        for ((o, y), b) in out.iter_mut().zip(y).zip(&self.b) {
            *o = y + b;
        }
    }

    fn jvp(&self, _x: &[f64], v: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.a.matvec(v));
    }

    fn vjp(&self, _x: &[f64], v: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.a.matvec_t(v));
    }

    fn jacobian(&self, _x: &[f64]) -> Matrix {
        self.a.clone()
    }
}

// ── Lorenz-96 ──────────────────────────────────────────────────────────

/// Cyclic Lorenz-96 flow: `dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F`.
#[derive(Debug, Clone, Copy)]
pub struct Lorenz96System {
    forcing: f64,
    dim: usize,
}

impl Lorenz96System {
    pub fn new(forcing: f64, dim: usize) -> Result<Self> {
        if dim < 4 {
            return Err(invalid_arg("Lorenz96System: dimension must be >= 4"));
        }
        Ok(Lorenz96System { forcing, dim })
    }

    pub fn forcing(&self) -> f64 {
        self.forcing
    }
}

impl VectorField for Lorenz96System {
    fn dim(&self) -> usize {
        self.dim
    }

    fn field(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim;
        for i in 0..n {
            let ip1 = if i + 1 == n { 0 } else { i + 1 };
            let im1 = if i == 0 { n - 1 } else { i - 1 };
            let im2 = if i < 2 { n + i - 2 } else { i - 2 };
            out[i] = (x[ip1] - x[im2]) * x[im1] - x[i] + self.forcing;
        }
    }

    fn jvp(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        let n = self.dim;
        for i in 0..n {
            let ip1 = if i + 1 == n { 0 } else { i + 1 };
            let im1 = if i == 0 { n - 1 } else { i - 1 };
            let im2 = if i < 2 { n + i - 2 } else { i - 2 };
            out[i] = x[im1] * (v[ip1] - v[im2]) + (x[ip1] - x[im2]) * v[im1] - v[i];
        }
    }

    fn vjp(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        let n = self.dim;
        for o in out.iter_mut() {
            *o = 0.0;
        }
        // Transposed accumulation of the four bands used in jvp.
        for i in 0..n {
            let ip1 = if i + 1 == n { 0 } else { i + 1 };
            let im1 = if i == 0 { n - 1 } else { i - 1 };
            let im2 = if i < 2 { n + i - 2 } else { i - 2 };
            out[ip1] += x[im1] * v[i];
            out[im2] -= x[im1] * v[i];
            out[im1] += (x[ip1] - x[im2]) * v[i];
            out[i] -= v[i];
        }
    }
}

/// Field evaluation with validation.
pub fn lorenz96_field(system: &Lorenz96System, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != system.dim() {
        return Err(invalid_arg("lorenz96_field: state dimension mismatch"));
    }
    let mut out = vec![0.0; x.len()];
    system.field(x, &mut out);
    Ok(out)
}

// ── coupled spin-torque oscillators ────────────────────────────────────

/// Physical parameters of one spin-torque oscillator, CGS-Gaussian units:
/// fields in Oe, magnetization in emu/cc, volume in cm^3, time in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct StoParams {
    /// Saturation magnetization (emu/cc).
    pub m_s: f64,
    /// Interfacial anisotropy field (Oe).
    pub h_k: f64,
    /// Applied field along z (Oe).
    pub h_appl: f64,
    /// Free-layer volume (cm^3).
    pub volume: f64,
    /// Spin polarization.
    pub eta: f64,
    /// Spin-transfer-torque asymmetry.
    pub lambda: f64,
    /// Gyromagnetic ratio (rad / (Oe s)).
    pub gamma: f64,
    /// Gilbert damping constant.
    pub alpha: f64,
    /// Charge current (A).
    pub current: f64,
    /// Unit pinned-layer direction.
    pub p: [f64; 3],
    /// Reduced Planck constant (erg s); kept explicit so the spin-torque
    /// prefactor is auditable.
    pub hbar: f64,
    /// Elementary charge (C).
    pub e_charge: f64,
}

impl Default for StoParams {
    fn default() -> Self {
        StoParams {
            m_s: 1448.3,
            h_k: 18.616e3,
            h_appl: 200.0,
            volume: fmath::PI * 60.0 * 60.0 * 2.0 * 1e-21,
            eta: 0.537,
            lambda: 0.288,
            gamma: 1.764e7,
            alpha: 0.005,
            current: 2.5e-3,
            p: [1.0, 0.0, 0.0],
            hbar: 1.054_571_817e-27,
            e_charge: 1.602_176_634e-19,
        }
    }
}

impl StoParams {
    pub fn validate(&self) -> Result<()> {
        let pn = fmath::hypot3(self.p[0], self.p[1], self.p[2]);
        if fmath::abs(pn - 1.0) > 1e-9 {
            return Err(invalid_arg("StoParams: pinned-layer direction must be unit"));
        }
        for (name, v) in [
            ("m_s", self.m_s),
            ("volume", self.volume),
            ("eta", self.eta),
            ("gamma", self.gamma),
            ("alpha", self.alpha),
            ("hbar", self.hbar),
            ("e_charge", self.e_charge),
        ] {
            if !(v > 0.0) {
                return Err(invalid_arg(alloc::format!(
                    "StoParams: {name} must be positive"
                )));
            }
        }
        if self.h_k < 0.0 || self.h_appl < 0.0 {
            return Err(invalid_arg("StoParams: fields must be non-negative"));
        }
        Ok(())
    }

    /// Effective perpendicular anisotropy `H_K - 4 pi M_s` (Oe).
    pub fn kappa(&self) -> f64 {
        self.h_k - 4.0 * fmath::PI * self.m_s
    }

    /// Spin-torque field prefactor `hbar eta I / (2 e M V)` (Oe).
    pub fn h_s0(&self) -> f64 {
        self.hbar * self.eta * self.current / (2.0 * self.e_charge * self.m_s * self.volume)
    }

    /// Angle-dependent spin-torque field `H_s(m) = h_s0 / (1 + lambda m.p)`.
    pub fn h_s(&self, m: [f64; 3]) -> f64 {
        self.h_s0() / (1.0 + self.lambda * dot3(m, self.p))
    }
}

/// `n_osc` spin-torque oscillators coupled through the x-components of
/// their magnetizations; the state is `3 * n_osc` reals in blocks of three,
/// each block on the unit sphere.
#[derive(Debug, Clone)]
pub struct CoupledStoSystem {
    n_osc: usize,
    params: StoParams,
    a_cp: f64,
    w_cp: Matrix,
    w_cp_t: Matrix,
    renormalize: bool,
}

impl CoupledStoSystem {
    pub fn new(params: StoParams, a_cp: f64, w_cp: Matrix) -> Result<Self> {
        params.validate()?;
        if w_cp.rows() != w_cp.cols() || w_cp.rows() == 0 {
            return Err(invalid_arg(
                "CoupledStoSystem: coupling matrix must be square",
            ));
        }
        let rho = crate::linalg::spectral_radius(&w_cp, 1e-12, 200_000)?;
        if fmath::abs(rho - 1.0) > 1e-8 {
            return Err(invalid_arg(alloc::format!(
                "CoupledStoSystem: coupling spectral radius is {rho}, expected 1"
            )));
        }
        let w_cp_t = w_cp.transpose();
        Ok(CoupledStoSystem {
            n_osc: w_cp.rows(),
            params,
            a_cp,
            w_cp,
            w_cp_t,
            renormalize: true,
        })
    }

    /// Uniform [-1, 1] coupling weights rescaled to unit spectral radius.
    pub fn random_coupling(n_osc: usize, rng: &RngStream) -> Result<Matrix> {
        crate::linalg::sparse_random_matrix(n_osc, 1.0, 1.0, rng)
    }

    pub fn n_osc(&self) -> usize {
        self.n_osc
    }

    pub fn params(&self) -> &StoParams {
        &self.params
    }

    pub fn coupling_magnitude(&self) -> f64 {
        self.a_cp
    }

    pub fn coupling_weights(&self) -> &Matrix {
        &self.w_cp
    }

    pub fn renormalizing(&self) -> bool {
        self.renormalize
    }

    pub fn set_renormalize(&mut self, on: bool) {
        self.renormalize = on;
    }

    /// Total field per oscillator (applied + effective anisotropy along z,
    /// coupling along x), flattened in blocks of three.
    pub fn effective_field(&self, state: &[f64]) -> Vec<f64> {
        let n = self.n_osc;
        let kappa = self.params.kappa();
        let coupling = self.coupling_terms(state);
        let mut h = vec![0.0; 3 * n];
        for k in 0..n {
            h[3 * k] = self.a_cp * coupling[k];
            h[3 * k + 2] = self.params.h_appl + kappa * state[3 * k + 2];
        }
        h
    }

    /// `c_k = sum_i w_cp(k, i) m_{i,x}`.
    fn coupling_terms(&self, state: &[f64]) -> Vec<f64> {
        let mx: Vec<f64> = (0..self.n_osc).map(|k| state[3 * k]).collect();
        self.w_cp.matvec(&mx)
    }

    /// Explicit LLG right-hand side for one oscillator given its coupling
    /// field component.
    #[inline]
    fn osc_field(&self, m: [f64; 3], h_cp_x: f64) -> [f64; 3] {
        let p = self.params.p;
        let h = [h_cp_x, 0.0, self.params.h_appl + self.params.kappa() * m[2]];
        let hs = self.params.h_s(m);
        let pxm = cross(p, m);
        let u = add3(cross(m, h), scale3(cross(m, pxm), hs));
        let gamma_eff = self.params.gamma / (1.0 + self.params.alpha * self.params.alpha);
        scale3(add3(u, scale3(cross(m, u), self.params.alpha)), -gamma_eff)
    }

    /// Directional derivative of [`Self::osc_field`] in direction `v` with
    /// coupling-field perturbation `dh_x` (already scaled by `A_cp`).
    #[inline]
    fn osc_jvp(&self, m: [f64; 3], h_cp_x: f64, v: [f64; 3], dh_x: f64) -> [f64; 3] {
        let p = self.params.p;
        let kappa = self.params.kappa();
        let h = [h_cp_x, 0.0, self.params.h_appl + kappa * m[2]];
        let dh = [dh_x, 0.0, kappa * v[2]];
        let s = dot3(m, p);
        let hs = self.params.h_s0() / (1.0 + self.params.lambda * s);
        let dhs = -hs * self.params.lambda * dot3(v, p) / (1.0 + self.params.lambda * s);
        let pxm = cross(p, m);
        let dpxm = cross(p, v);
        let t2 = cross(m, pxm);
        let dt1 = add3(cross(v, h), cross(m, dh));
        let dt2 = add3(cross(v, pxm), cross(m, dpxm));
        let u = add3(cross(m, h), scale3(t2, hs));
        let du = add3(add3(dt1, scale3(t2, dhs)), scale3(dt2, hs));
        let dmxu = add3(cross(v, u), cross(m, du));
        let gamma_eff = self.params.gamma / (1.0 + self.params.alpha * self.params.alpha);
        scale3(add3(du, scale3(dmxu, self.params.alpha)), -gamma_eff)
    }

    /// Sensitivity of one oscillator's field to its coupling-field
    /// x-component (used to assemble vector-Jacobian products).
    #[inline]
    fn osc_coupling_gradient(&self, m: [f64; 3]) -> [f64; 3] {
        let ex = [1.0, 0.0, 0.0];
        let du = cross(m, ex);
        let dmxu = cross(m, du);
        let gamma_eff = self.params.gamma / (1.0 + self.params.alpha * self.params.alpha);
        scale3(add3(du, scale3(dmxu, self.params.alpha)), -gamma_eff)
    }
}

impl VectorField for CoupledStoSystem {
    fn dim(&self) -> usize {
        3 * self.n_osc
    }

    fn field(&self, x: &[f64], out: &mut [f64]) {
        let coupling = self.coupling_terms(x);
        for k in 0..self.n_osc {
            let m = vec3(&x[3 * k..]);
            let f = self.osc_field(m, self.a_cp * coupling[k]);
            out[3 * k..3 * k + 3].copy_from_slice(&f);
        }
    }

    fn jvp(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        let coupling = self.coupling_terms(x);
        let vx: Vec<f64> = (0..self.n_osc).map(|k| v[3 * k]).collect();
        let dcoupling = self.w_cp.matvec(&vx);
        for k in 0..self.n_osc {
            let m = vec3(&x[3 * k..]);
            let vk = vec3(&v[3 * k..]);
            let d = self.osc_jvp(m, self.a_cp * coupling[k], vk, self.a_cp * dcoupling[k]);
            out[3 * k..3 * k + 3].copy_from_slice(&d);
        }
    }

    fn vjp(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        let coupling = self.coupling_terms(x);
        let mut a = vec![0.0; self.n_osc];
        for k in 0..self.n_osc {
            let m = vec3(&x[3 * k..]);
            let vk = vec3(&v[3 * k..]);
            // Local block transpose: rows are unit-direction jvps with no
            // coupling perturbation.
            let hx = self.a_cp * coupling[k];
            let jx = self.osc_jvp(m, hx, [1.0, 0.0, 0.0], 0.0);
            let jy = self.osc_jvp(m, hx, [0.0, 1.0, 0.0], 0.0);
            let jz = self.osc_jvp(m, hx, [0.0, 0.0, 1.0], 0.0);
            out[3 * k] = dot3(jx, vk);
            out[3 * k + 1] = dot3(jy, vk);
            out[3 * k + 2] = dot3(jz, vk);
            a[k] = dot3(self.osc_coupling_gradient(m), vk);
        }
        // Coupling part: (J^T v)_{j,x} += A_cp * sum_k w_cp(k, j) a_k.
        let back = self.w_cp_t.matvec(&a);
        for j in 0..self.n_osc {
            out[3 * j] += self.a_cp * back[j];
        }
    }

    fn post_step(&self, x: &mut [f64]) {
        if self.renormalize {
            for k in 0..self.n_osc {
                let m = &mut x[3 * k..3 * k + 3];
                let n = fmath::hypot3(m[0], m[1], m[2]);
                if n > 0.0 {
                    m[0] /= n;
                    m[1] /= n;
                    m[2] /= n;
                }
            }
        }
    }

    fn post_step_tangent(&self, x_pre: &[f64], v: &mut [f64]) {
        if self.renormalize {
            for k in 0..self.n_osc {
                let m = vec3(&x_pre[3 * k..]);
                let n = fmath::hypot3(m[0], m[1], m[2]);
                if n > 0.0 {
                    let mhat = scale3(m, 1.0 / n);
                    let vk = vec3(&v[3 * k..]);
                    let radial = dot3(vk, mhat);
                    for d in 0..3 {
                        v[3 * k + d] = (vk[d] - radial * mhat[d]) / n;
                    }
                }
            }
        }
    }

    // Batched overrides: the coupling sums of the whole batch collapse to
    // one matrix product each (bit-identical accumulation order to the
    // per-row matvecs).

    fn field_batch(&self, xs: &Matrix, out: &mut Matrix) {
        let b = xs.rows();
        let n = self.n_osc;
        let mx = Matrix::from_fn(b, n, |i, k| xs.get(i, 3 * k));
        let coupling = mx.matmul(&self.w_cp_t);
        for i in 0..b {
            let row = xs.row(i);
            let orow = out.row_mut(i);
            for k in 0..n {
                let f = self.osc_field(vec3(&row[3 * k..]), self.a_cp * coupling.get(i, k));
                orow[3 * k..3 * k + 3].copy_from_slice(&f);
            }
        }
    }

    fn jvp_batch(&self, xs: &Matrix, vs: &Matrix, out: &mut Matrix) {
        let b = xs.rows();
        let n = self.n_osc;
        let mx = Matrix::from_fn(b, n, |i, k| xs.get(i, 3 * k));
        let vx = Matrix::from_fn(b, n, |i, k| vs.get(i, 3 * k));
        let coupling = mx.matmul(&self.w_cp_t);
        let dcoupling = vx.matmul(&self.w_cp_t);
        for i in 0..b {
            let row = xs.row(i);
            let vrow = vs.row(i);
            let orow = out.row_mut(i);
            for k in 0..n {
                let d = self.osc_jvp(
                    vec3(&row[3 * k..]),
                    self.a_cp * coupling.get(i, k),
                    vec3(&vrow[3 * k..]),
                    self.a_cp * dcoupling.get(i, k),
                );
                orow[3 * k..3 * k + 3].copy_from_slice(&d);
            }
        }
    }

    fn vjp_batch(&self, xs: &Matrix, vs: &Matrix, out: &mut Matrix) {
        let b = xs.rows();
        let n = self.n_osc;
        let mx = Matrix::from_fn(b, n, |i, k| xs.get(i, 3 * k));
        let coupling = mx.matmul(&self.w_cp_t);
        let mut a = Matrix::zeros(b, n);
        for i in 0..b {
            let row = xs.row(i);
            let vrow = vs.row(i);
            let orow = out.row_mut(i);
            for k in 0..n {
                let m = vec3(&row[3 * k..]);
                let vk = vec3(&vrow[3 * k..]);
                let hx = self.a_cp * coupling.get(i, k);
                let jx = self.osc_jvp(m, hx, [1.0, 0.0, 0.0], 0.0);
                let jy = self.osc_jvp(m, hx, [0.0, 1.0, 0.0], 0.0);
                let jz = self.osc_jvp(m, hx, [0.0, 0.0, 1.0], 0.0);
                orow[3 * k] = dot3(jx, vk);
                orow[3 * k + 1] = dot3(jy, vk);
                orow[3 * k + 2] = dot3(jz, vk);
                a.set(i, k, dot3(self.osc_coupling_gradient(m), vk));
            }
        }
        let back = a.matmul(&self.w_cp);
        for i in 0..b {
            let orow = out.row_mut(i);
            for j in 0..n {
                orow[3 * j] += self.a_cp * back.get(i, j);
            }
        }
    }
}

/// Explicit LLG right-hand side with state validation: every `m_k` must be
/// finite and unit within 1e-6.
pub fn llg_field(system: &CoupledStoSystem, state: &[f64]) -> Result<Vec<f64>> {
    if state.len() != system.dim() {
        return Err(invalid_arg("llg_field: state dimension mismatch"));
    }
    for k in 0..system.n_osc() {
        let m = &state[3 * k..3 * k + 3];
        if !all_finite(m) {
            return Err(Error::InvalidState(String::from(
                "non-finite magnetization",
            )));
        }
        let n = fmath::hypot3(m[0], m[1], m[2]);
        if n == 0.0 {
            return Err(Error::InvalidState(String::from("zero magnetization")));
        }
        if fmath::abs(n - 1.0) > 1e-6 {
            return Err(Error::InvalidState(alloc::format!(
                "magnetization {k} has norm {n}, expected 1"
            )));
        }
    }
    let mut out = vec![0.0; state.len()];
    system.field(state, &mut out);
    Ok(out)
}

// ── RK4 integration ────────────────────────────────────────────────────

/// A fixed-step trajectory: `states[i]` is the state at `times[i]`, with
/// `states[0] = x0` and the final entry exactly at the requested horizon.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states
            .last()
            .expect("trajectory has at least the initial state")
    }
}

/// Splits a horizon into full steps plus an optional shortened final step
/// so the step times sum to exactly `total_t`.
pub(crate) fn step_plan(total_t: f64, dt: f64) -> (usize, f64) {
    let n_full = fmath::floor(total_t / dt + 1e-9) as usize;
    let rem = total_t - n_full as f64 * dt;
    if rem > dt * 1e-9 {
        (n_full, rem)
    } else {
        (n_full, 0.0)
    }
}

fn rk4_step<F: VectorField + ?Sized>(f: &F, x: &[f64], h: f64, out: &mut Vec<f64>) {
    let n = x.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    f.field(x, &mut k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    f.field(&tmp, &mut k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    f.field(&tmp, &mut k3);
    for i in 0..n {
        tmp[i] = x[i] + h * k3[i];
    }
    f.field(&tmp, &mut k4);
    out.clear();
    out.extend((0..n).map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])));
}

/// Classical RK4 with a fixed step; the final partial step is shortened so
/// the total integration time is exactly `total_t`. The system's
/// `post_step` hook runs after every step (per-oscillator renormalization
/// for the STO system). A non-finite state aborts with
/// [`Error::Divergence`] carrying the last finite state.
pub fn integrate_rk4<F: VectorField + ?Sized>(
    f: &F,
    x0: &[f64],
    total_t: f64,
    dt: f64,
) -> Result<Trajectory> {
    if x0.len() != f.dim() {
        return Err(invalid_arg("integrate_rk4: state dimension mismatch"));
    }
    if total_t < 0.0 || !(dt > 0.0) {
        return Err(invalid_arg(
            "integrate_rk4: require total_t >= 0 and dt > 0",
        ));
    }
    let (n_full, rem) = step_plan(total_t, dt);
    let mut times = Vec::with_capacity(n_full + 2);
    let mut states = Vec::with_capacity(n_full + 2);
    times.push(0.0);
    states.push(x0.to_vec());
    let mut x = x0.to_vec();
    let mut next = Vec::new();
    let mut step = 0usize;
    loop {
        let h = if step < n_full {
            dt
        } else if step == n_full && rem > 0.0 {
            rem
        } else {
            break;
        };
        rk4_step(f, &x, h, &mut next);
        f.post_step(&mut next);
        if !all_finite(&next) {
            return Err(Error::Divergence {
                t: *times.last().expect("nonempty"),
                last_state: x,
            });
        }
        let t = if step < n_full {
            (step + 1) as f64 * dt
        } else {
            total_t
        };
        core::mem::swap(&mut x, &mut next);
        times.push(t);
        states.push(x.clone());
        step += 1;
    }
    if let Some(last) = times.last_mut() {
        *last = total_t;
    }
    Ok(Trajectory { times, states })
}

// ── tangent propagation ────────────────────────────────────────────────

/// `J_n` for a discrete map: the ordered product of per-step Jacobians
/// `diag(f'(W' x_i)) W'` along the orbit of `x0`.
pub fn tangent_propagate_discrete(
    system: &DiscreteMapSystem,
    x0: &[f64],
    steps: usize,
) -> Result<Matrix> {
    if x0.len() != system.dim() {
        return Err(invalid_arg("tangent_propagate_discrete: dimension mismatch"));
    }
    let mut j = Matrix::identity(system.dim());
    let mut x = x0.to_vec();
    for s in 0..steps {
        let next = system.step(&x);
        if !all_finite(&next) {
            return Err(Error::Divergence {
                t: s as f64,
                last_state: x,
            });
        }
        j = system.tangent_step(&next, &j);
        x = next;
    }
    Ok(j)
}

fn jvp_matrix<F: VectorField + ?Sized>(f: &F, x: &[f64], m: &Matrix) -> Matrix {
    let n = f.dim();
    let mut out = Matrix::zeros(n, m.cols());
    let mut col = vec![0.0; n];
    let mut res = vec![0.0; n];
    for c in 0..m.cols() {
        for r in 0..n {
            col[r] = m.get(r, c);
        }
        f.jvp(x, &col, &mut res);
        out.set_col(c, &res);
    }
    out
}

/// `J_T` for a continuous system: integrates the variational equation
/// `dJ/dt = (df/dx) J` alongside the trajectory with the same RK4 steps,
/// starting from the identity. Per-step state projections are chained into
/// the tangent through `post_step_tangent`.
pub fn tangent_propagate<F: VectorField + ?Sized>(
    f: &F,
    x0: &[f64],
    total_t: f64,
    dt: f64,
) -> Result<Matrix> {
    if x0.len() != f.dim() {
        return Err(invalid_arg("tangent_propagate: state dimension mismatch"));
    }
    if total_t < 0.0 || !(dt > 0.0) {
        return Err(invalid_arg(
            "tangent_propagate: require total_t >= 0 and dt > 0",
        ));
    }
    let n = f.dim();
    let (n_full, rem) = step_plan(total_t, dt);
    let mut x = x0.to_vec();
    let mut j = Matrix::identity(n);
    let mut next = vec![0.0; n];
    let mut step = 0usize;
    loop {
        let h = if step < n_full {
            dt
        } else if step == n_full && rem > 0.0 {
            rem
        } else {
            break;
        };
        // Stage states.
        let mut k1 = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        let mut k3 = vec![0.0; n];
        let mut k4 = vec![0.0; n];
        let mut y2 = vec![0.0; n];
        let mut y3 = vec![0.0; n];
        let mut y4 = vec![0.0; n];
        f.field(&x, &mut k1);
        for i in 0..n {
            y2[i] = x[i] + 0.5 * h * k1[i];
        }
        f.field(&y2, &mut k2);
        for i in 0..n {
            y3[i] = x[i] + 0.5 * h * k2[i];
        }
        f.field(&y3, &mut k3);
        for i in 0..n {
            y4[i] = x[i] + h * k3[i];
        }
        f.field(&y4, &mut k4);
        // Stage tangents: K_i = A(y_i) (J + c_i h K_{i-1}).
        let kj1 = jvp_matrix(f, &x, &j);
        let mut tmp = j.clone();
        tmp.add_scaled(0.5 * h, &kj1);
        let kj2 = jvp_matrix(f, &y2, &tmp);
        let mut tmp = j.clone();
        tmp.add_scaled(0.5 * h, &kj2);
        let kj3 = jvp_matrix(f, &y3, &tmp);
        let mut tmp = j.clone();
        tmp.add_scaled(h, &kj3);
        let kj4 = jvp_matrix(f, &y4, &tmp);
        j.add_scaled(h / 6.0, &kj1);
        j.add_scaled(h / 3.0, &kj2);
        j.add_scaled(h / 3.0, &kj3);
        j.add_scaled(h / 6.0, &kj4);
        // Advance the state, chaining the projection into the tangent.
        for i in 0..n {
            next[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let mut col = vec![0.0; n];
        for c in 0..j.cols() {
            for r in 0..n {
                col[r] = j.get(r, c);
            }
            f.post_step_tangent(&next, &mut col);
            j.set_col(c, &col);
        }
        f.post_step(&mut next);
        if !all_finite(&next) || !j.is_finite() {
            return Err(Error::Divergence {
                t: step as f64 * dt,
                last_state: x,
            });
        }
        x.copy_from_slice(&next);
        step += 1;
    }
    Ok(j)
}

/// Pushes a single tangent vector through the flow alongside the state,
/// returning `(x(T), v(T))`. Vector version of [`tangent_propagate`];
/// used by the Benettin estimator and the matrix-free FTMLE engine.
pub fn flow_with_tangent<F: VectorField + ?Sized>(
    f: &F,
    x0: &[f64],
    v0: &[f64],
    total_t: f64,
    dt: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = f.dim();
    if x0.len() != n || v0.len() != n {
        return Err(invalid_arg("flow_with_tangent: dimension mismatch"));
    }
    let (n_full, rem) = step_plan(total_t, dt);
    let mut x = x0.to_vec();
    let mut v = v0.to_vec();
    let mut step = 0usize;
    let mut k = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut kv = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut y = vec![0.0; n];
    let mut yv = vec![0.0; n];
    loop {
        let h = if step < n_full {
            dt
        } else if step == n_full && rem > 0.0 {
            rem
        } else {
            break;
        };
        f.field(&x, &mut k[0]);
        f.jvp(&x, &v, &mut kv[0]);
        for i in 0..n {
            y[i] = x[i] + 0.5 * h * k[0][i];
            yv[i] = v[i] + 0.5 * h * kv[0][i];
        }
        f.field(&y, &mut k[1]);
        f.jvp(&y, &yv, &mut kv[1]);
        for i in 0..n {
            y[i] = x[i] + 0.5 * h * k[1][i];
            yv[i] = v[i] + 0.5 * h * kv[1][i];
        }
        f.field(&y, &mut k[2]);
        f.jvp(&y, &yv, &mut kv[2]);
        for i in 0..n {
            y[i] = x[i] + h * k[2][i];
            yv[i] = v[i] + h * kv[2][i];
        }
        f.field(&y, &mut k[3]);
        f.jvp(&y, &yv, &mut kv[3]);
        let mut x_next = vec![0.0; n];
        for i in 0..n {
            x_next[i] = x[i] + h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
            v[i] += h / 6.0 * (kv[0][i] + 2.0 * kv[1][i] + 2.0 * kv[2][i] + kv[3][i]);
        }
        f.post_step_tangent(&x_next, &mut v);
        f.post_step(&mut x_next);
        if !all_finite(&x_next) || !all_finite(&v) {
            return Err(Error::Divergence {
                t: step as f64 * dt,
                last_state: x,
            });
        }
        x = x_next;
        step += 1;
    }
    Ok((x, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sparse_random_matrix;
    use crate::matrix::normalize;

    fn unit_sto_state(n_osc: usize, rng: &mut RngStream) -> Vec<f64> {
        let mut x = vec![0.0; 3 * n_osc];
        for k in 0..n_osc {
            let mut m = [rng.normal(), rng.normal(), rng.normal()];
            let nm = fmath::hypot3(m[0], m[1], m[2]);
            for d in 0..3 {
                m[d] /= nm;
            }
            x[3 * k..3 * k + 3].copy_from_slice(&m);
        }
        x
    }

    fn small_sto(n_osc: usize, a_cp: f64, seed: u64) -> CoupledStoSystem {
        let rng = RngStream::new(seed, 0);
        let w_cp = CoupledStoSystem::random_coupling(n_osc, &rng).unwrap();
        CoupledStoSystem::new(StoParams::default(), a_cp, w_cp).unwrap()
    }

    #[test]
    fn esn_step_zero_fixed_point() {
        let mut rng = RngStream::new(1, 0);
        let w = Matrix::from_fn(8, 8, |_, _| rng.uniform(-1.0, 1.0));
        let sys = DiscreteMapSystem::new(w, Activation::Tanh).unwrap();
        let out = esn_step(&sys, &vec![0.0; 8]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn esn_step_zero_map() {
        let sys = DiscreteMapSystem::new(Matrix::zeros(5, 5), Activation::Tanh).unwrap();
        let mut rng = RngStream::new(2, 0);
        let x: Vec<f64> = (0..5).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let out = esn_step(&sys, &x).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn esn_step_matches_composition_oracle() {
        let mut rng = RngStream::new(3, 0);
        let w = Matrix::from_fn(6, 6, |_, _| rng.uniform(-1.0, 1.0));
        let sys = DiscreteMapSystem::new(w.clone(), Activation::Tanh).unwrap();
        let x: Vec<f64> = (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let out = esn_step(&sys, &x).unwrap();
        let oracle: Vec<f64> = w.matvec(&x).iter().map(|&z| fmath::tanh(z)).collect();
        for (a, b) in out.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn esn_step_dimension_check() {
        let sys = DiscreteMapSystem::new(Matrix::zeros(4, 4), Activation::Tanh).unwrap();
        assert!(esn_step(&sys, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn esn_step_batch_matches_single() {
        let mut rng = RngStream::new(4, 0);
        let w = Matrix::from_fn(7, 7, |_, _| rng.uniform(-1.0, 1.0));
        let sys = DiscreteMapSystem::new(w, Activation::Tanh).unwrap();
        let xs = Matrix::from_fn(3, 7, |_, _| rng.uniform(-1.0, 1.0));
        let batch = sys.step_batch(&xs);
        for i in 0..3 {
            let single = sys.step(xs.row(i));
            for (a, b) in batch.row(i).iter().zip(&single) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn lorenz_equilibrium_is_zero_field() {
        let sys = Lorenz96System::new(3.5, 12).unwrap();
        let x = vec![3.5; 12];
        let f = lorenz96_field(&sys, &x).unwrap();
        for v in f {
            assert!(v.abs() < 1e-14);
        }
    }

    #[test]
    fn lorenz_hand_example() {
        let sys = Lorenz96System::new(0.0, 4).unwrap();
        let f = lorenz96_field(&sys, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((f[0] - -5.0).abs() < 1e-14, "component 1 = {}", f[0]);
        // Index-table oracle for all components.
        let x = [1.0f64, 2.0, 3.0, 4.0];
        for i in 0..4 {
            let expect = (x[(i + 1) % 4] - x[(i + 2) % 4]) * x[(i + 3) % 4] - x[i];
            assert!((f[i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn lorenz_one_hot_matches_naive_oracle() {
        let n = 9;
        let sys = Lorenz96System::new(0.0, n).unwrap();
        for j in 0..n {
            let mut x = vec![0.0; n];
            x[j] = 1.0;
            let f = lorenz96_field(&sys, &x).unwrap();
            for i in 0..n {
                let ip1 = (i + 1) % n;
                let im1 = (i + n - 1) % n;
                let im2 = (i + n - 2) % n;
                let expect = (x[ip1] - x[im2]) * x[im1] - x[i];
                assert!((f[i] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn lorenz_rejects_small_dimension() {
        assert!(Lorenz96System::new(1.0, 3).is_err());
    }

    #[test]
    fn lorenz_cyclic_equivariance_bitwise() {
        let n = 10;
        let sys = Lorenz96System::new(2.0, n).unwrap();
        let mut rng = RngStream::new(5, 0);
        let x: Vec<f64> = (0..n).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let f = lorenz96_field(&sys, &x).unwrap();
        for shift in 1..n {
            let rotated: Vec<f64> = (0..n).map(|i| x[(i + shift) % n]).collect();
            let f_rot = lorenz96_field(&sys, &rotated).unwrap();
            for i in 0..n {
                assert_eq!(f_rot[i], f[(i + shift) % n], "shift {shift} index {i}");
            }
        }
    }

    #[test]
    fn lorenz_jvp_vjp_adjoint_pair() {
        let n = 12;
        let sys = Lorenz96System::new(4.0, n).unwrap();
        let mut rng = RngStream::new(6, 0);
        let x: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let u: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mut ju = vec![0.0; n];
        let mut jtv = vec![0.0; n];
        sys.jvp(&x, &u, &mut ju);
        sys.vjp(&x, &v, &mut jtv);
        let lhs: f64 = ju.iter().zip(&v).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(&jtv).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn llg_tangent_to_sphere() {
        let sys = small_sto(6, 5.0, 10);
        let mut rng = RngStream::new(11, 0);
        let x = unit_sto_state(6, &mut rng);
        let f = llg_field(&sys, &x).unwrap();
        for k in 0..6 {
            let m = vec3(&x[3 * k..]);
            let d = vec3(&f[3 * k..]);
            let scale = fmath::sqrt(dot3(d, d)).max(1.0);
            assert!(dot3(m, d).abs() < 1e-12 * scale);
        }
    }

    #[test]
    fn llg_decouples_at_zero_coupling() {
        let rng = RngStream::new(13, 0);
        let w_cp = CoupledStoSystem::random_coupling(4, &rng).unwrap();
        let sys = CoupledStoSystem::new(StoParams::default(), 0.0, w_cp).unwrap();
        let mut r = RngStream::new(14, 0);
        let x = unit_sto_state(4, &mut r);
        let f0 = llg_field(&sys, &x).unwrap();
        // Perturb oscillator 2 (renormalized); oscillators 0, 1, 3 must be
        // bitwise unchanged.
        let mut x2 = x.clone();
        x2[6] += 0.3;
        x2[7] -= 0.1;
        let nm = fmath::hypot3(x2[6], x2[7], x2[8]);
        for d in 0..3 {
            x2[6 + d] /= nm;
        }
        let f1 = llg_field(&sys, &x2).unwrap();
        for k in [0usize, 1, 3] {
            for d in 0..3 {
                assert_eq!(f0[3 * k + d], f1[3 * k + d]);
            }
        }
    }

    #[test]
    fn llg_explicit_matches_implicit_fixed_point() {
        // Solve the implicit Gilbert form dm/dt = T(m) + alpha m x (dm/dt)
        // by fixed-point iteration and compare against the explicit field.
        let sys = small_sto(5, 8.0, 21);
        let p = sys.params().clone();
        let mut rng = RngStream::new(22, 0);
        for _trial in 0..100 {
            let x = unit_sto_state(5, &mut rng);
            let explicit = llg_field(&sys, &x).unwrap();
            let h_eff = sys.effective_field(&x);
            for k in 0..5 {
                let m = vec3(&x[3 * k..]);
                let h = vec3(&h_eff[3 * k..]);
                let hs = p.h_s(m);
                // Precession + spin-torque torque of the implicit equation.
                let torque = scale3(
                    add3(cross(m, h), scale3(cross(m, cross(p.p, m)), hs)),
                    -p.gamma,
                );
                let mut v = torque;
                for _ in 0..200 {
                    v = add3(torque, scale3(cross(m, v), p.alpha));
                }
                let expl = vec3(&explicit[3 * k..]);
                let scale = fmath::hypot3(expl[0], expl[1], expl[2]).max(1.0);
                for d in 0..3 {
                    assert!(
                        (v[d] - expl[d]).abs() < 1e-10 * scale,
                        "osc {k} comp {d}: {} vs {}",
                        v[d],
                        expl[d]
                    );
                }
            }
        }
    }

    #[test]
    fn llg_rejects_bad_states() {
        let sys = small_sto(3, 1.0, 30);
        let mut x = vec![0.0; 9];
        assert!(matches!(llg_field(&sys, &x), Err(Error::InvalidState(_))));
        x[0] = f64::NAN;
        assert!(matches!(llg_field(&sys, &x), Err(Error::InvalidState(_))));
    }

    #[test]
    fn sto_jvp_matches_finite_difference() {
        let sys = small_sto(4, 12.0, 31);
        let mut rng = RngStream::new(32, 0);
        let x = unit_sto_state(4, &mut rng);
        let mut v: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        normalize(&mut v);
        let mut jv = vec![0.0; 12];
        sys.jvp(&x, &v, &mut jv);
        let h = 1e-6;
        let mut fp = vec![0.0; 12];
        let mut fm = vec![0.0; 12];
        let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        sys.field(&xp, &mut fp);
        sys.field(&xm, &mut fm);
        for i in 0..12 {
            let fd = (fp[i] - fm[i]) / (2.0 * h);
            let scale = jv[i].abs().max(1e3);
            assert!((jv[i] - fd).abs() < 1e-4 * scale, "{i}: {} vs {fd}", jv[i]);
        }
    }

    #[test]
    fn sto_vjp_adjoint_pair() {
        let sys = small_sto(5, 7.0, 33);
        let mut rng = RngStream::new(34, 0);
        let x = unit_sto_state(5, &mut rng);
        let u: Vec<f64> = (0..15).map(|_| rng.normal()).collect();
        let v: Vec<f64> = (0..15).map(|_| rng.normal()).collect();
        let mut ju = vec![0.0; 15];
        let mut jtv = vec![0.0; 15];
        sys.jvp(&x, &u, &mut ju);
        sys.vjp(&x, &v, &mut jtv);
        let lhs: f64 = ju.iter().zip(&v).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(&jtv).map(|(a, b)| a * b).sum();
        assert!(
            (lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0),
            "{lhs} vs {rhs}"
        );
    }

    #[test]
    fn rk4_scalar_linear_decay() {
        let sys = AffineSystem::new(Matrix::from_diag(&[-1.0]), vec![0.0]).unwrap();
        let traj = integrate_rk4(&sys, &[1.0], 1.0, 0.01).unwrap();
        let expect = fmath::exp(-1.0);
        assert!((traj.final_state()[0] - expect).abs() < 1e-9);
        assert_eq!(traj.times.len(), 101);
        assert_eq!(*traj.times.last().unwrap(), 1.0);
    }

    #[test]
    fn rk4_partial_final_step() {
        let sys = AffineSystem::new(Matrix::from_diag(&[-1.0]), vec![0.0]).unwrap();
        let traj = integrate_rk4(&sys, &[1.0], 0.25, 0.1).unwrap();
        assert_eq!(*traj.times.last().unwrap(), 0.25);
        assert!((traj.final_state()[0] - fmath::exp(-0.25)).abs() < 1e-6);
    }

    #[test]
    fn rk4_lorenz_equilibrium_stays() {
        let sys = Lorenz96System::new(5.0, 20).unwrap();
        let x0 = vec![5.0; 20];
        let traj = integrate_rk4(&sys, &x0, 10.0, 0.01).unwrap();
        for (a, b) in traj.final_state().iter().zip(&x0) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn rk4_order_via_richardson() {
        // Error vs a dt/8 reference shrinks ~16x when dt halves.
        let sys = Lorenz96System::new(5.0, 10).unwrap();
        let mut rng = RngStream::new(40, 0);
        let x0: Vec<f64> = (0..10).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let reference = integrate_rk4(&sys, &x0, 1.0, 0.00125).unwrap();
        let coarse = integrate_rk4(&sys, &x0, 1.0, 0.01).unwrap();
        let fine = integrate_rk4(&sys, &x0, 1.0, 0.005).unwrap();
        let err = |t: &Trajectory| -> f64 {
            t.final_state()
                .iter()
                .zip(reference.final_state())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let ratio = err(&coarse) / err(&fine);
        let order = ratio.log2();
        assert!(order >= 3.8, "measured order {order}");
    }

    #[test]
    fn rk4_divergence_reports_last_state() {
        struct Blowup;
        impl VectorField for Blowup {
            fn dim(&self) -> usize {
                1
            }
            fn field(&self, x: &[f64], out: &mut [f64]) {
                out[0] = x[0] * x[0];
            }
            fn jvp(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
                out[0] = 2.0 * x[0] * v[0];
            }
            fn vjp(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
                out[0] = 2.0 * x[0] * v[0];
            }
        }
        match integrate_rk4(&Blowup, &[1.0], 5.0, 0.05) {
            Err(Error::Divergence { last_state, .. }) => {
                assert!(last_state[0].is_finite());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn sto_norm_conservation_with_renormalization() {
        let sys = small_sto(4, 10.0, 50);
        let mut rng = RngStream::new(51, 0);
        let x0 = unit_sto_state(4, &mut rng);
        // 1 ns at dt = 0.1 ps.
        let traj = integrate_rk4(&sys, &x0, 1e-9, 1e-13).unwrap();
        for k in 0..4 {
            let m = vec3(&traj.final_state()[3 * k..]);
            let n = fmath::hypot3(m[0], m[1], m[2]);
            assert!((n - 1.0).abs() < 1e-12, "osc {k} norm {n}");
        }
    }

    #[test]
    fn sto_norm_drift_without_renormalization() {
        let mut sys = small_sto(4, 10.0, 50);
        sys.set_renormalize(false);
        let mut rng = RngStream::new(51, 0);
        let x0 = unit_sto_state(4, &mut rng);
        let traj = integrate_rk4(&sys, &x0, 1e-9, 1e-13).unwrap();
        for k in 0..4 {
            let m = vec3(&traj.final_state()[3 * k..]);
            let n = fmath::hypot3(m[0], m[1], m[2]);
            assert!((n - 1.0).abs() < 1e-3, "osc {k} drift {}", (n - 1.0).abs());
        }
    }

    #[test]
    fn tangent_discrete_identity_activation_is_matrix_power() {
        let mut rng = RngStream::new(60, 0);
        let w = Matrix::from_fn(5, 5, |_, _| rng.uniform(-0.5, 0.5));
        let sys = DiscreteMapSystem::new(w.clone(), Activation::Identity).unwrap();
        let x0: Vec<f64> = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let j = tangent_propagate_discrete(&sys, &x0, 3).unwrap();
        let w3 = w.matmul(&w).matmul(&w);
        for (a, b) in j.data().iter().zip(w3.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tangent_consistency_all_three_systems() {
        let tol = 1e-3;
        // Discrete ESN.
        {
            let rng = RngStream::new(61, 0);
            let w = sparse_random_matrix(20, 0.5, 1.3, &rng).unwrap();
            let sys = DiscreteMapSystem::new(w, Activation::Tanh).unwrap();
            let mut r = RngStream::new(62, 0);
            let x0: Vec<f64> = (0..20).map(|_| r.uniform(-1.0, 1.0)).collect();
            let mut v: Vec<f64> = (0..20).map(|_| r.normal()).collect();
            normalize(&mut v);
            let h = 1e-5;
            let j = tangent_propagate_discrete(&sys, &x0, 4).unwrap();
            let jv = j.matvec(&v);
            let flow = |x: &[f64]| {
                let mut s = x.to_vec();
                for _ in 0..4 {
                    s = sys.step(&s);
                }
                s
            };
            let xp: Vec<f64> = x0.iter().zip(&v).map(|(a, b)| a + h * b).collect();
            let fd: Vec<f64> = flow(&xp)
                .iter()
                .zip(flow(&x0))
                .map(|(a, b)| (a - b) / h)
                .collect();
            let num = fd
                .iter()
                .zip(&jv)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den = jv.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(num / den < tol, "esn rel err {}", num / den);
        }
        // Lorenz-96.
        {
            let sys = Lorenz96System::new(5.0, 10).unwrap();
            let mut r = RngStream::new(63, 0);
            let x0: Vec<f64> = (0..10).map(|_| r.uniform(-1.0, 1.0)).collect();
            let mut v: Vec<f64> = (0..10).map(|_| r.normal()).collect();
            normalize(&mut v);
            let h = 1e-5;
            let j = tangent_propagate(&sys, &x0, 0.5, 0.01).unwrap();
            let jv = j.matvec(&v);
            let xp: Vec<f64> = x0.iter().zip(&v).map(|(a, b)| a + h * b).collect();
            let f1 = integrate_rk4(&sys, &xp, 0.5, 0.01).unwrap();
            let f0 = integrate_rk4(&sys, &x0, 0.5, 0.01).unwrap();
            let fd: Vec<f64> = f1
                .final_state()
                .iter()
                .zip(f0.final_state())
                .map(|(a, b)| (a - b) / h)
                .collect();
            let num = fd
                .iter()
                .zip(&jv)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den = jv.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(num / den < tol, "lorenz rel err {}", num / den);
        }
        // Coupled STOs (short horizon, small count).
        {
            let sys = small_sto(3, 6.0, 64);
            let mut r = RngStream::new(65, 0);
            let x0 = unit_sto_state(3, &mut r);
            let mut v: Vec<f64> = (0..9).map(|_| r.normal()).collect();
            // Project the perturbation onto the spheres' tangent space so
            // the renormalizing flow sees all of it.
            for k in 0..3 {
                let m = vec3(&x0[3 * k..]);
                let vk = vec3(&v[3 * k..]);
                let radial = dot3(vk, m);
                for d in 0..3 {
                    v[3 * k + d] -= radial * m[d];
                }
            }
            normalize(&mut v);
            let t = 2e-11;
            let dt = 1e-13;
            let j = tangent_propagate(&sys, &x0, t, dt).unwrap();
            let jv = j.matvec(&v);
            let hh = 1e-7;
            let xp: Vec<f64> = x0.iter().zip(&v).map(|(a, b)| a + hh * b).collect();
            let f1 = integrate_rk4(&sys, &xp, t, dt).unwrap();
            let f0 = integrate_rk4(&sys, &x0, t, dt).unwrap();
            let fd: Vec<f64> = f1
                .final_state()
                .iter()
                .zip(f0.final_state())
                .map(|(a, b)| (a - b) / hh)
                .collect();
            let num = fd
                .iter()
                .zip(&jv)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den = jv.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(num / den < tol, "sto rel err {}", num / den);
        }
    }

    #[test]
    fn sto_batched_ops_bitwise_match_row_ops() {
        let sys = small_sto(5, 9.0, 90);
        let mut r = RngStream::new(91, 0);
        let b = 4;
        let xs = {
            let mut m = Matrix::zeros(b, 15);
            for i in 0..b {
                let x = unit_sto_state(5, &mut r);
                m.row_mut(i).copy_from_slice(&x);
            }
            m
        };
        let vs = Matrix::from_fn(b, 15, |_, _| r.normal());
        let mut out_b = Matrix::zeros(b, 15);
        let mut row = vec![0.0; 15];
        sys.field_batch(&xs, &mut out_b);
        for i in 0..b {
            sys.field(xs.row(i), &mut row);
            assert_eq!(out_b.row(i), &row[..], "field row {i}");
        }
        sys.jvp_batch(&xs, &vs, &mut out_b);
        for i in 0..b {
            sys.jvp(xs.row(i), vs.row(i), &mut row);
            assert_eq!(out_b.row(i), &row[..], "jvp row {i}");
        }
        sys.vjp_batch(&xs, &vs, &mut out_b);
        for i in 0..b {
            sys.vjp(xs.row(i), vs.row(i), &mut row);
            assert_eq!(out_b.row(i), &row[..], "vjp row {i}");
        }
    }

    #[test]
    fn flow_with_tangent_matches_tangent_propagate() {
        let sys = Lorenz96System::new(4.0, 8).unwrap();
        let mut r = RngStream::new(70, 0);
        let x0: Vec<f64> = (0..8).map(|_| r.uniform(-1.0, 1.0)).collect();
        let v0: Vec<f64> = (0..8).map(|_| r.normal()).collect();
        let j = tangent_propagate(&sys, &x0, 0.7, 0.01).unwrap();
        let jv = j.matvec(&v0);
        let (_, v) = flow_with_tangent(&sys, &x0, &v0, 0.7, 0.01).unwrap();
        for (a, b) in v.iter().zip(&jv) {
            assert!((a - b).abs() < 1e-10 * b.abs().max(1.0));
        }
    }
}
