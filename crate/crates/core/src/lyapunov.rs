//! Finite-time and asymptotic Lyapunov analysis.
//!
//! The finite-time maximum Lyapunov exponent (FTMLE) of a map over horizon
//! `T` is `(1/T) ln sigma_max(J_T)` with `J_T` the tangent propagator;
//! natural logarithm throughout. Two routes are provided and cross-checked
//! in tests:
//!
//! - the exact route builds `J_T` with the tangent propagators from
//!   [`crate::dynamics`] and takes the largest singular value through
//!   [`crate::linalg::sigma_max_auto`] (full SVD for small dimensions,
//!   truncated randomized SVD above);
//! - the matrix-free route never materializes `J_T`: it runs power
//!   iteration on `J_T^T J_T` using forward/backward tangent sweeps along a
//!   cached trajectory, which is what sweep cells use at reservoir scale.
//!
//! The asymptotic exponent comes from the Benettin method: evolve one
//! tangent vector with the state, renormalize periodically, and average the
//! accumulated log growth after a transient discard.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::dynamics::{
    flow_with_tangent, integrate_rk4, step_plan, tangent_propagate, tangent_propagate_discrete,
    DiscreteMapSystem, Trajectory, VectorField,
};
use crate::error::{invalid_arg, Result};
use crate::fmath;
use crate::linalg::sigma_max_auto;
use crate::matrix::{norm2, normalize, Matrix};
use crate::rng::RngStream;

/// Iteration cap for the matrix-free power engine.
const POWER_ITERS: usize = 200;
/// Relative tolerance on sigma for the matrix-free power engine.
const POWER_TOL: f64 = 1e-10;

// ── reports ────────────────────────────────────────────────────────────

/// Per-sample finite-time exponents with summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct FtmleReport {
    /// `(sample id, lambda)` pairs in sample order.
    pub per_sample: Vec<(usize, f64)>,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
    /// Horizon: step count for discrete systems, time for continuous ones.
    pub horizon: f64,
}

impl FtmleReport {
    pub fn from_samples(per_sample: Vec<(usize, f64)>, horizon: f64) -> Self {
        let n = per_sample.len().max(1) as f64;
        let mean = per_sample.iter().map(|(_, l)| l).sum::<f64>() / n;
        let var = per_sample
            .iter()
            .map(|(_, l)| (l - mean) * (l - mean))
            .sum::<f64>()
            / n;
        let max = per_sample
            .iter()
            .map(|(_, l)| *l)
            .fold(f64::NEG_INFINITY, f64::max);
        FtmleReport {
            per_sample,
            mean,
            std: fmath::sqrt(var),
            max,
            horizon,
        }
    }
}

/// FTMLE of a layered model as a whole and of each layer.
#[derive(Debug, Clone)]
pub struct LayerwiseFtmle {
    pub overall: FtmleReport,
    /// In forward-propagation order.
    pub per_layer: Vec<(String, FtmleReport)>,
}

// ── system-level FTMLE, exact route ────────────────────────────────────

/// FTMLE of a discrete map over `steps` iterations from `x0`.
pub fn ftmle_discrete(system: &DiscreteMapSystem, x0: &[f64], steps: usize) -> Result<f64> {
    if steps == 0 {
        return Err(invalid_arg("ftmle_discrete: horizon must be positive"));
    }
    let j = tangent_propagate_discrete(system, x0, steps)?;
    let mut rng = RngStream::new(0xF7_31E, j.rows() as u64);
    let sigma = sigma_max_auto(&j, 5, &mut rng)?;
    Ok(fmath::ln(sigma) / steps as f64)
}

/// FTMLE of a continuous system over time `total_t` from `x0`.
pub fn ftmle_system<F: VectorField + ?Sized>(
    f: &F,
    x0: &[f64],
    total_t: f64,
    dt: f64,
) -> Result<f64> {
    if !(total_t > 0.0) {
        return Err(invalid_arg("ftmle_system: horizon must be positive"));
    }
    let j = tangent_propagate(f, x0, total_t, dt)?;
    let mut rng = RngStream::new(0xF7_31E, j.rows() as u64);
    let sigma = sigma_max_auto(&j, 5, &mut rng)?;
    Ok(fmath::ln(sigma) / total_t)
}

// ── matrix-free tangent sweeps ─────────────────────────────────────────

/// Forward/backward tangent sweeps along a cached discrete orbit.
pub struct DiscreteTangentOps<'a> {
    system: &'a DiscreteMapSystem,
    /// `orbit[0] = x0`, `orbit[i]` the state after `i` steps.
    pub orbit: Vec<Vec<f64>>,
}

impl<'a> DiscreteTangentOps<'a> {
    pub fn new(system: &'a DiscreteMapSystem, x0: &[f64], steps: usize) -> Result<Self> {
        if x0.len() != system.dim() {
            return Err(invalid_arg("DiscreteTangentOps: dimension mismatch"));
        }
        let mut orbit = Vec::with_capacity(steps + 1);
        orbit.push(x0.to_vec());
        for s in 0..steps {
            let next = system.step(&orbit[s]);
            if !crate::matrix::all_finite(&next) {
                return Err(crate::Error::Divergence {
                    t: s as f64,
                    last_state: orbit[s].clone(),
                });
            }
            orbit.push(next);
        }
        Ok(DiscreteTangentOps { system, orbit })
    }

    pub fn forward(&self, v: &[f64]) -> Vec<f64> {
        let mut v = v.to_vec();
        for i in 1..self.orbit.len() {
            v = self.system.tangent_jvp(&self.orbit[i], &v);
        }
        v
    }

    pub fn backward(&self, v: &[f64]) -> Vec<f64> {
        let mut v = v.to_vec();
        for i in (1..self.orbit.len()).rev() {
            v = self.system.tangent_vjp(&self.orbit[i], &v);
        }
        v
    }
}

/// Forward/backward tangent sweeps along a cached continuous trajectory,
/// reusing the stored states as per-step checkpoints.
pub struct ContinuousTangentOps<'a, F: VectorField + ?Sized> {
    f: &'a F,
    pub trajectory: Trajectory,
    n_full: usize,
    rem: f64,
    dt: f64,
}

impl<'a, F: VectorField + ?Sized> ContinuousTangentOps<'a, F> {
    pub fn new(f: &'a F, x0: &[f64], total_t: f64, dt: f64) -> Result<Self> {
        let trajectory = integrate_rk4(f, x0, total_t, dt)?;
        let (n_full, rem) = step_plan(total_t, dt);
        Ok(ContinuousTangentOps {
            f,
            trajectory,
            n_full,
            rem,
            dt,
        })
    }

    pub fn from_trajectory(f: &'a F, trajectory: Trajectory, total_t: f64, dt: f64) -> Self {
        let (n_full, rem) = step_plan(total_t, dt);
        ContinuousTangentOps {
            f,
            trajectory,
            n_full,
            rem,
            dt,
        }
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

    /// Recomputes the RK4 stage states `(y1..y4)` and the pre-projection
    /// endpoint of one step from its stored checkpoint.
    fn stages(&self, step: usize) -> ([Vec<f64>; 4], Vec<f64>) {
        let n = self.f.dim();
        let x = &self.trajectory.states[step];
        let h = self.step_size(step);
        let mut k = vec![0.0; n];
        let mut y2 = vec![0.0; n];
        let mut y3 = vec![0.0; n];
        let mut y4 = vec![0.0; n];
        let mut endpoint = vec![0.0; n];
        self.f.field(x, &mut k);
        let k1 = k.clone();
        for i in 0..n {
            y2[i] = x[i] + 0.5 * h * k1[i];
        }
        self.f.field(&y2, &mut k);
        let k2 = k.clone();
        for i in 0..n {
            y3[i] = x[i] + 0.5 * h * k2[i];
        }
        self.f.field(&y3, &mut k);
        let k3 = k.clone();
        for i in 0..n {
            y4[i] = x[i] + h * k3[i];
        }
        self.f.field(&y4, &mut k);
        let k4 = k;
        for i in 0..n {
            endpoint[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        ([x.clone(), y2, y3, y4], endpoint)
    }

    /// Pushes a tangent vector forward through all steps (the action of
    /// `J_T`).
    pub fn forward(&self, v: &[f64]) -> Vec<f64> {
        let n = self.f.dim();
        let mut v = v.to_vec();
        let mut kv = vec![0.0; n];
        let mut u = vec![0.0; n];
        for step in 0..self.step_count() {
            let h = self.step_size(step);
            let ([y1, y2, y3, y4], endpoint) = self.stages(step);
            self.f.jvp(&y1, &v, &mut kv);
            let kv1 = kv.clone();
            for i in 0..n {
                u[i] = v[i] + 0.5 * h * kv1[i];
            }
            self.f.jvp(&y2, &u, &mut kv);
            let kv2 = kv.clone();
            for i in 0..n {
                u[i] = v[i] + 0.5 * h * kv2[i];
            }
            self.f.jvp(&y3, &u, &mut kv);
            let kv3 = kv.clone();
            for i in 0..n {
                u[i] = v[i] + h * kv3[i];
            }
            self.f.jvp(&y4, &u, &mut kv);
            let kv4 = &kv;
            for i in 0..n {
                v[i] += h / 6.0 * (kv1[i] + 2.0 * kv2[i] + 2.0 * kv3[i] + kv4[i]);
            }
            self.f.post_step_tangent(&endpoint, &mut v);
        }
        v
    }

    /// Pulls a cotangent vector backward through all steps (the action of
    /// `J_T^T`): the exact transpose of [`Self::forward`], stage by stage
    /// in reverse.
    pub fn backward(&self, v: &[f64]) -> Vec<f64> {
        let n = self.f.dim();
        let mut g = v.to_vec();
        let mut buf = vec![0.0; n];
        for step in (0..self.step_count()).rev() {
            let h = self.step_size(step);
            let ([y1, y2, y3, y4], endpoint) = self.stages(step);
            // The projection is symmetric, so its transpose is itself.
            self.f.post_step_tangent(&endpoint, &mut g);
            let g_k1: Vec<f64> = g.iter().map(|x| h / 6.0 * x).collect();
            let mut g_k2: Vec<f64> = g.iter().map(|x| h / 3.0 * x).collect();
            let mut g_k3: Vec<f64> = g.iter().map(|x| h / 3.0 * x).collect();
            let g_k4: Vec<f64> = g.iter().map(|x| h / 6.0 * x).collect();
            let mut g_v = g.clone();
            // K4 = A(y4) U4, U4 = V + h K3.
            self.f.vjp(&y4, &g_k4, &mut buf);
            for i in 0..n {
                g_v[i] += buf[i];
                g_k3[i] += h * buf[i];
            }
            // K3 = A(y3) U3, U3 = V + h/2 K2.
            self.f.vjp(&y3, &g_k3, &mut buf);
            for i in 0..n {
                g_v[i] += buf[i];
                g_k2[i] += 0.5 * h * buf[i];
            }
            // K2 = A(y2) U2, U2 = V + h/2 K1.
            self.f.vjp(&y2, &g_k2, &mut buf);
            let mut g_k1 = g_k1;
            for i in 0..n {
                g_v[i] += buf[i];
                g_k1[i] += 0.5 * h * buf[i];
            }
            // K1 = A(y1) V.
            self.f.vjp(&y1, &g_k1, &mut buf);
            for i in 0..n {
                g_v[i] += buf[i];
            }
            g = g_v;
        }
        g
    }
}

/// Largest singular value of the linear operator given by a
/// forward/backward pair, via power iteration on `M^T M`.
pub fn power_sigma_max(
    dim: usize,
    forward: impl Fn(&[f64]) -> Vec<f64>,
    backward: impl Fn(&[f64]) -> Vec<f64>,
) -> f64 {
    let mut rng = RngStream::new(0x909, dim as u64);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
    normalize(&mut v);
    let mut prev = f64::NAN;
    for _ in 0..POWER_ITERS {
        let u = forward(&v);
        let sigma = norm2(&u);
        if sigma == 0.0 {
            return 0.0;
        }
        let mut w = backward(&u);
        normalize(&mut w);
        v = w;
        if prev.is_finite() && fmath::abs(sigma - prev) <= POWER_TOL * sigma {
            return sigma;
        }
        prev = sigma;
    }
    prev
}

/// Matrix-free FTMLE of a discrete map (agrees with [`ftmle_discrete`];
/// used where the explicit `J_T` would be too expensive).
pub fn ftmle_discrete_matfree(
    system: &DiscreteMapSystem,
    x0: &[f64],
    steps: usize,
) -> Result<f64> {
    if steps == 0 {
        return Err(invalid_arg(
            "ftmle_discrete_matfree: horizon must be positive",
        ));
    }
    let ops = DiscreteTangentOps::new(system, x0, steps)?;
    let sigma = power_sigma_max(system.dim(), |v| ops.forward(v), |v| ops.backward(v));
    Ok(fmath::ln(sigma) / steps as f64)
}

/// Matrix-free FTMLE of many initial states of a discrete map at once;
/// rows of `x0s` are samples. The power vectors of all samples advance
/// together so every sweep is a batched matrix product.
pub fn ftmle_discrete_batch(
    system: &DiscreteMapSystem,
    x0s: &Matrix,
    steps: usize,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(invalid_arg("ftmle_discrete_batch: horizon must be positive"));
    }
    if x0s.cols() != system.dim() {
        return Err(invalid_arg("ftmle_discrete_batch: dimension mismatch"));
    }
    let b = x0s.rows();
    let n = system.dim();
    // Orbits for the whole batch.
    let mut orbit = Vec::with_capacity(steps + 1);
    orbit.push(x0s.clone());
    for s in 0..steps {
        let next = system.step_batch(&orbit[s]);
        if !next.is_finite() {
            return Err(crate::Error::Divergence {
                t: s as f64,
                last_state: orbit[s].row(0).to_vec(),
            });
        }
        orbit.push(next);
    }
    let scale_rows = |m: &mut Matrix, states: &Matrix| {
        for (v, &y) in m.data_mut().iter_mut().zip(states.data()) {
            *v *= system.activation().derivative_from_output(y);
        }
    };
    let mut rng = RngStream::new(0x909, (n + b) as u64);
    let mut v = Matrix::from_fn(b, n, |_, _| rng.uniform(-1.0, 1.0));
    for i in 0..b {
        normalize(v.row_mut(i));
    }
    let mut sigmas = vec![f64::NAN; b];
    let mut prev = vec![f64::NAN; b];
    for _ in 0..POWER_ITERS {
        // Forward sweep: v <- f'(x_{i}) . (v W'^T) per step.
        let mut u = v.clone();
        for state in orbit.iter().skip(1) {
            u = u.matmul(system.weight_t());
            scale_rows(&mut u, state);
        }
        let mut all_done = true;
        for i in 0..b {
            let s = norm2(u.row(i));
            sigmas[i] = s;
            if !(prev[i].is_finite() && fmath::abs(s - prev[i]) <= POWER_TOL * s.max(1e-300)) {
                all_done = false;
            }
            prev[i] = s;
        }
        if all_done {
            break;
        }
        // Backward sweep: v <- (f'(x_i) . v) W' per step, reversed.
        let mut w = u;
        for state in orbit.iter().skip(1).rev() {
            scale_rows(&mut w, state);
            w = w.matmul(system.weight());
        }
        for i in 0..b {
            normalize(w.row_mut(i));
        }
        v = w;
    }
    Ok(sigmas
        .into_iter()
        .map(|s| fmath::ln(s) / steps as f64)
        .collect())
}

/// Matrix-free FTMLE of a continuous system.
pub fn ftmle_system_matfree<F: VectorField + ?Sized>(
    f: &F,
    x0: &[f64],
    total_t: f64,
    dt: f64,
) -> Result<f64> {
    if !(total_t > 0.0) {
        return Err(invalid_arg(
            "ftmle_system_matfree: horizon must be positive",
        ));
    }
    let ops = ContinuousTangentOps::new(f, x0, total_t, dt)?;
    let sigma = power_sigma_max(f.dim(), |v| ops.forward(v), |v| ops.backward(v));
    Ok(fmath::ln(sigma) / total_t)
}

// ── Benettin MLE ───────────────────────────────────────────────────────

/// Maximum Lyapunov exponent of a continuous system by the Benettin
/// method: one tangent vector evolved with the state, renormalized every
/// `renorm_interval`, log growth averaged over the time after the first
/// `discard` fraction of the run.
pub fn mle_benettin<F: VectorField + ?Sized>(
    f: &F,
    x0: &[f64],
    t_total: f64,
    renorm_interval: f64,
    dt: f64,
    discard: f64,
) -> Result<f64> {
    if !(t_total > 0.0) || !(renorm_interval > 0.0) || !(dt > 0.0) {
        return Err(invalid_arg("mle_benettin: times must be positive"));
    }
    if !(0.0..1.0).contains(&discard) {
        return Err(invalid_arg("mle_benettin: discard must be in [0, 1)"));
    }
    let mut rng = RngStream::new(0xBE_7714, f.dim() as u64);
    let mut v: Vec<f64> = (0..f.dim()).map(|_| rng.normal()).collect();
    normalize(&mut v);
    let mut x = x0.to_vec();
    let discard_time = t_total * discard;
    let segment = renorm_interval.min(t_total);
    let mut t = 0.0;
    let mut acc = 0.0;
    let mut accounted = 0.0;
    while t < t_total - 1e-12 * t_total {
        let span = segment.min(t_total - t);
        let (x_next, v_next) = flow_with_tangent(f, &x, &v, span, dt)?;
        x = x_next;
        v = v_next;
        let growth = normalize(&mut v);
        if growth == 0.0 {
            return Err(crate::Error::InvalidState(String::from(
                "tangent vector collapsed to zero",
            )));
        }
        t += span;
        if t > discard_time {
            acc += fmath::ln(growth);
            accounted += span;
        }
    }
    Ok(acc / accounted)
}

/// Benettin estimate for a discrete map; the exponent is per step.
pub fn mle_benettin_discrete(
    system: &DiscreteMapSystem,
    x0: &[f64],
    n_steps: usize,
    renorm_every: usize,
    discard: f64,
) -> Result<f64> {
    if n_steps == 0 || renorm_every == 0 {
        return Err(invalid_arg("mle_benettin_discrete: counts must be positive"));
    }
    if !(0.0..1.0).contains(&discard) {
        return Err(invalid_arg(
            "mle_benettin_discrete: discard must be in [0, 1)",
        ));
    }
    let mut rng = RngStream::new(0xBE_7714, system.dim() as u64);
    let mut v: Vec<f64> = (0..system.dim()).map(|_| rng.normal()).collect();
    normalize(&mut v);
    let mut x = x0.to_vec();
    let discard_steps = (n_steps as f64 * discard) as usize;
    let mut acc = 0.0;
    let mut accounted = 0usize;
    let mut since_renorm = 0usize;
    for step in 0..n_steps {
        let next = system.step(&x);
        v = system.tangent_jvp(&next, &v);
        x = next;
        since_renorm += 1;
        if since_renorm == renorm_every || step + 1 == n_steps {
            let growth = normalize(&mut v);
            if growth == 0.0 {
                return Err(crate::Error::InvalidState(String::from(
                    "tangent vector collapsed to zero",
                )));
            }
            if step >= discard_steps {
                acc += fmath::ln(growth);
                accounted += since_renorm;
            }
            since_renorm = 0;
        }
    }
    Ok(acc / accounted as f64)
}

/// Lyapunov time `1/MLE` for expanding systems; infinity otherwise.
pub fn lyapunov_time(mle: f64) -> f64 {
    if mle > 0.0 {
        1.0 / mle
    } else {
        f64::INFINITY
    }
}

// ── layered-model FTMLE ────────────────────────────────────────────────

/// A feed-forward stack of differentiable layers. Implementors expose the
/// forward states and per-layer tangent operations; backbone layers with an
/// internal horizon report it through `layer_depth`.
pub trait LayeredModel {
    fn layer_count(&self) -> usize;
    fn layer_name(&self, layer: usize) -> String;
    /// Propagation depth of the layer: 1 for ordinary layers, the step
    /// count or iteration time for backbone layers.
    fn layer_depth(&self, layer: usize) -> f64;
    /// `states[0]` is the model input; `states[i]` the input of layer `i`;
    /// `states[layer_count()]` the output.
    fn layer_states(&self, input: &[f64]) -> Result<Vec<Vec<f64>>>;
    /// Pull-back of a cotangent through layer `layer` at input `x_in`.
    fn layer_vjp(&self, layer: usize, x_in: &[f64], v: &[f64]) -> Result<Vec<f64>>;
    /// Largest singular value of the layer Jacobian at `x_in`; `m` is the
    /// candidate count for the randomized route.
    fn layer_sigma_max(&self, layer: usize, x_in: &[f64], m: usize) -> Result<f64>;
}

/// Per-sample FTMLE of the overall model: the full-network Jacobian is
/// accumulated row-by-row from the output side through layer pull-backs,
/// then reduced to its largest singular value.
pub fn ftmle_model_overall<M: LayeredModel + ?Sized>(
    model: &M,
    input: &[f64],
    m: usize,
) -> Result<f64> {
    let states = model.layer_states(input)?;
    let out_dim = states[model.layer_count()].len();
    let mut j = Matrix::zeros(out_dim, input.len());
    for r in 0..out_dim {
        let mut row = vec![0.0; out_dim];
        row[r] = 1.0;
        for layer in (0..model.layer_count()).rev() {
            row = model.layer_vjp(layer, &states[layer], &row)?;
        }
        j.row_mut(r).copy_from_slice(&row);
    }
    let mut rng = RngStream::new(0xF7_31E, (out_dim + input.len()) as u64);
    let sigma = sigma_max_auto(&j, m, &mut rng)?;
    let total_depth: f64 = (0..model.layer_count()).map(|l| model.layer_depth(l)).sum();
    Ok(fmath::ln(sigma) / total_depth)
}

/// Per-sample layer-wise FTMLE: each layer's exponent over its own depth.
pub fn ftmle_model_layers<M: LayeredModel + ?Sized>(
    model: &M,
    input: &[f64],
    m: usize,
) -> Result<Vec<f64>> {
    let states = model.layer_states(input)?;
    let mut out = Vec::with_capacity(model.layer_count());
    for layer in 0..model.layer_count() {
        let sigma = model.layer_sigma_max(layer, &states[layer], m)?;
        out.push(fmath::ln(sigma) / model.layer_depth(layer));
    }
    Ok(out)
}

/// Assembles overall and per-layer FTMLE distributions over a set of
/// inputs (rows of `inputs`).
pub fn ftmle_model_report<M: LayeredModel + ?Sized>(
    model: &M,
    inputs: &Matrix,
    m: usize,
) -> Result<LayerwiseFtmle> {
    let n_layers = model.layer_count();
    let mut overall = Vec::with_capacity(inputs.rows());
    let mut layers: Vec<Vec<(usize, f64)>> = vec![Vec::with_capacity(inputs.rows()); n_layers];
    for s in 0..inputs.rows() {
        let input = inputs.row(s);
        overall.push((s, ftmle_model_overall(model, input, m)?));
        let per = ftmle_model_layers(model, input, m)?;
        for (l, lam) in per.into_iter().enumerate() {
            layers[l].push((s, lam));
        }
    }
    let total_depth: f64 = (0..n_layers).map(|l| model.layer_depth(l)).sum();
    Ok(LayerwiseFtmle {
        overall: FtmleReport::from_samples(overall, total_depth),
        per_layer: layers
            .into_iter()
            .enumerate()
            .map(|(l, samples)| {
                (
                    model.layer_name(l),
                    FtmleReport::from_samples(samples, model.layer_depth(l)),
                )
            })
            .collect(),
    })
}
