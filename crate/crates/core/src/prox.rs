//! Weight update of the proximal step.
//!
//! Given the moved samples `theta_k` and the previous samples `theta_{k-1}` with
//! weights `rho_{k-1}`, the entropic proximal problem has the optimal coupling
//! `M = diag(q) Gamma diag(z)` with `Gamma = exp(-C / 2 eps)`. The scalings solve
//!
//! ```text
//! z ⊙ (Gamma^T q) = xi ⊙ z^(-beta eps / h)
//! q ⊙ (Gamma z)   = rho_{k-1}
//! ```
//!
//! and the new weights are the second marginal `rho_k = z ⊙ (Gamma^T q)`.
//!
//! The kernel is stored sparsely: entries whose exponent lies beyond the f64
//! underflow threshold are exactly zero in a dense evaluation too, so dropping them
//! changes nothing numerically and saves most of the work once the cloud spreads.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponent beyond which `exp(-x)` rounds to zero in f64.
const EXP_UNDERFLOW: f64 = 745.2;

/// `C(i, j) = ||theta_k^i - theta_prev^j||^2`, computed from differences so that
/// small self-distances keep full relative precision.
pub fn cost_matrix(theta_k: ArrayView2<f64>, theta_prev: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_clouds(theta_k, theta_prev)?;
    let n = theta_k.nrows();
    let mut c = Array2::zeros((n, theta_prev.nrows()));
    let p = theta_k.ncols();
    let (new, old) = (theta_k.as_standard_layout(), theta_prev.as_standard_layout());
    let (new, old) = (new.as_slice().expect("standard layout"), old.as_slice().expect("standard layout"));
    for (mut row, a) in c.rows_mut().into_iter().zip(new.chunks_exact(p)) {
        for (cij, b) in row.iter_mut().zip(old.chunks_exact(p)) {
            *cij = sq_dist(a, b);
        }
    }
    Ok(c)
}

fn check_clouds(theta_k: ArrayView2<f64>, theta_prev: ArrayView2<f64>) -> Result<()> {
    if theta_k.ncols() != theta_prev.ncols() {
        return Err(Error::dimension("cost matrix parameter dimension", theta_prev.ncols(), theta_k.ncols()));
    }
    if theta_k.ncols() == 0 {
        return Err(Error::Input("samples have no coordinates".into()));
    }
    if theta_k.nrows() != theta_prev.nrows() {
        return Err(Error::dimension("cost matrix sample count", theta_prev.nrows(), theta_k.nrows()));
    }
    Ok(())
}

/// Four interleaved partial sums, so the loop vectorizes. Both kernel paths use
/// this, which keeps them bit-identical.
#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (a4, b4) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = a4.remainder().iter().zip(b4.remainder()).map(|(x, y)| (x - y) * (x - y)).sum();
    for (x, y) in a4.zip(b4) {
        for k in 0..4 {
            let d = x[k] - y[k];
            acc[k] += d * d;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("entropic regularization must be positive, got {epsilon}")))
    }
}

/// Elementwise `exp(-C / (2 eps))`.
pub fn gibbs_kernel(c: ArrayView2<f64>, epsilon: f64) -> Result<Array2<f64>> {
    check_epsilon(epsilon)?;
    Ok(c.mapv(|v| (-v / (2.0 * epsilon)).exp()))
}

/// Gibbs kernel in compressed sparse row form, zeros omitted.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl Kernel {
    pub fn from_dense(g: ArrayView2<f64>) -> Self {
        let mut k = Kernel {
            n_cols: g.ncols(),
            row_ptr: Vec::with_capacity(g.nrows() + 1),
            cols: Vec::new(),
            vals: Vec::new(),
        };
        k.row_ptr.push(0);
        for row in g.rows() {
            for (j, v) in row.iter().enumerate() {
                if *v != 0.0 {
                    k.cols.push(j as u32);
                    k.vals.push(*v);
                }
            }
            k.row_ptr.push(k.cols.len());
        }
        k
    }

    /// Same entries as `gibbs_kernel(cost_matrix(theta_k, theta_prev), eps)`
    /// without materializing either dense matrix.
    pub fn gibbs(theta_k: ArrayView2<f64>, theta_prev: ArrayView2<f64>, epsilon: f64) -> Result<Self> {
        check_clouds(theta_k, theta_prev)?;
        check_epsilon(epsilon)?;
        let n = theta_k.nrows();
        let mut k = Kernel {
            n_cols: n,
            row_ptr: Vec::with_capacity(n + 1),
            cols: Vec::with_capacity(n * n),
            vals: Vec::with_capacity(n * n),
        };
        k.row_ptr.push(0);
        let p = theta_k.ncols();
        let (new, old) = (theta_k.as_standard_layout(), theta_prev.as_standard_layout());
        let (new, old) = (new.as_slice().expect("standard layout"), old.as_slice().expect("standard layout"));
        let two_eps = 2.0 * epsilon;
        for a in new.chunks_exact(p).take(n) {
            for (j, b) in old.chunks_exact(p).take(n).enumerate() {
                let x = sq_dist(a, b) / two_eps;
                if x <= EXP_UNDERFLOW {
                    let g = (-x).exp();
                    if g != 0.0 {
                        k.cols.push(j as u32);
                        k.vals.push(g);
                    }
                }
            }
            k.row_ptr.push(k.cols.len());
        }
        Ok(k)
    }

    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Number of stored (nonzero) entries.
    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut g = Array2::zeros((self.n_rows(), self.n_cols));
        for i in 0..self.n_rows() {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                g[[i, self.cols[k] as usize]] = self.vals[k];
            }
        }
        g
    }

    /// `Gamma z`
    pub fn apply(&self, z: &Array1<f64>) -> Array1<f64> {
        let z = z.as_standard_layout();
        let z = z.as_slice().expect("standard layout");
        let mut out = vec![0.0; self.n_rows()];
        for (i, o) in out.iter_mut().enumerate() {
            let r = self.row_ptr[i]..self.row_ptr[i + 1];
            *o = self.vals[r.clone()].iter().zip(&self.cols[r]).map(|(g, &j)| g * z[j as usize]).sum();
        }
        Array1::from_vec(out)
    }

    /// `Gamma^T q`
    pub fn apply_t(&self, q: &Array1<f64>) -> Array1<f64> {
        let mut out = vec![0.0; self.n_cols];
        for (i, qi) in q.iter().enumerate().take(self.n_rows()) {
            let r = self.row_ptr[i]..self.row_ptr[i + 1];
            for (g, &j) in self.vals[r.clone()].iter().zip(&self.cols[r]) {
                out[j as usize] += g * qi;
            }
        }
        Array1::from_vec(out)
    }
}

/// `-beta v - beta u - 1`, the logarithm of `xi`. `u` is the interaction field
/// `U rho_{k-1}` at the previous samples.
pub fn log_xi_vector(v: &Array1<f64>, u: &Array1<f64>, beta: f64) -> Result<Array1<f64>> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("inverse temperature must be positive, got {beta}")));
    }
    if v.len() != u.len() {
        return Err(Error::dimension("interaction field", v.len(), u.len()));
    }
    let out: Array1<f64> = v.iter().zip(u.iter()).map(|(a, b)| -beta * a - beta * b - 1.0).collect();
    if let Some(i) = out.iter().position(|e| !e.is_finite()) {
        return Err(Error::numerical(format!(
            "non-finite exponent {} for xi at sample {i}; lower beta or rescale the data",
            out[i]
        )));
    }
    Ok(out)
}

/// `xi = exp(-beta v - beta u - 1)`.
pub fn xi_vector(v: &Array1<f64>, u: &Array1<f64>, beta: f64) -> Result<Array1<f64>> {
    let log_xi = log_xi_vector(v, u, beta)?;
    let xi = log_xi.mapv(f64::exp);
    if let Some(i) = xi.iter().position(|x| *x == 0.0 || !x.is_finite()) {
        return Err(Error::numerical(format!(
            "xi {} at sample {i} (exponent {}); lower beta or rescale the data",
            if xi[i] == 0.0 { "underflows to 0" } else { "overflows" },
            log_xi[i]
        )));
    }
    Ok(xi)
}

/// `1 / (1 + beta eps / h)`.
pub fn contraction_exponent(beta: f64, epsilon: f64, h: f64) -> Result<f64> {
    for (name, v) in [("beta", beta), ("epsilon", epsilon), ("h", h)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(1.0 / (1.0 + beta * epsilon / h))
}

/// Inputs of the fixed-point iteration. `xi` is held as its logarithm so that
/// weights far apart in potential do not underflow before the exponent
/// `1 / (1 + beta eps / h)` is applied.
#[derive(Debug, Clone)]
pub struct ProxInputs {
    pub gamma: Kernel,
    pub log_xi: Array1<f64>,
    pub rho_prev: Array1<f64>,
    pub exponent: f64,
}

impl ProxInputs {
    pub fn new(gamma: Kernel, xi: &Array1<f64>, rho_prev: Array1<f64>, exponent: f64) -> Result<Self> {
        if let Some(x) = xi.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
            return Err(Error::Input(format!("xi must be positive and finite, got {x}")));
        }
        Self::from_log_xi(gamma, xi.mapv(f64::ln), rho_prev, exponent)
    }

    pub fn from_log_xi(gamma: Kernel, log_xi: Array1<f64>, rho_prev: Array1<f64>, exponent: f64) -> Result<Self> {
        let n = rho_prev.len();
        if gamma.n_rows() != n || gamma.n_cols() != n {
            return Err(Error::dimension("Gibbs kernel", format!("{n} x {n}"), format!("{} x {}", gamma.n_rows(), gamma.n_cols())));
        }
        if log_xi.len() != n {
            return Err(Error::dimension("xi", n, log_xi.len()));
        }
        if !(exponent > 0.0 && exponent < 1.0) {
            return Err(Error::Config(format!("contraction exponent must lie in (0, 1), got {exponent}")));
        }
        if let Some(r) = rho_prev.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
            return Err(Error::Input(format!("previous weights must be positive and finite, got {r}")));
        }
        if log_xi.iter().any(|l| !l.is_finite()) {
            return Err(Error::Input("log xi must be finite".into()));
        }
        Ok(ProxInputs {
            gamma,
            log_xi,
            rho_prev,
            exponent,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxDiagnostics {
    pub iterations: usize,
    /// Final ℓ∞ change of `q`.
    pub dq: f64,
    /// Final ℓ∞ change of `z`.
    pub dz: f64,
    /// `||q ⊙ (Gamma z) - rho_prev||_inf` at return.
    pub marginal_residual: f64,
    pub converged: bool,
}

/// Draws `z0` uniformly on (0, 1].
pub fn random_z0<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array1<f64> {
    (0..n).map(|_| 1.0 - rng.random::<f64>()).collect()
}

fn check_positive(v: &Array1<f64>, what: &str, iteration: usize) -> Result<()> {
    match v.iter().position(|x| !(*x > 0.0 && x.is_finite())) {
        None => Ok(()),
        Some(i) => Err(Error::numerical(format!(
            "{what}[{i}] = {} in fixed-point iteration {iteration}; the Gibbs kernel may be too sparse (raise epsilon) or the potentials too large (lower beta)",
            v[i]
        ))),
    }
}

fn linf_diff(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

struct Iterate<'a> {
    inputs: &'a ProxInputs,
    z: Array1<f64>,
    q: Array1<f64>,
}

impl<'a> Iterate<'a> {
    fn start(inputs: &'a ProxInputs, z0: &Array1<f64>) -> Result<Self> {
        let n = inputs.rho_prev.len();
        if z0.len() != n {
            return Err(Error::dimension("z0", n, z0.len()));
        }
        if z0.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return Err(Error::Input("z0 must be positive and finite".into()));
        }
        let q = &inputs.rho_prev / &inputs.gamma.apply(z0);
        check_positive(&q, "q", 0)?;
        Ok(Iterate {
            inputs,
            z: z0.clone(),
            q,
        })
    }

    /// One z-update followed by one q-update; returns the new pair.
    fn step(&self, iteration: usize) -> Result<(Array1<f64>, Array1<f64>)> {
        let gtq = self.inputs.gamma.apply_t(&self.q);
        let alpha = self.inputs.exponent;
        let z: Array1<f64> = self
            .inputs
            .log_xi
            .iter()
            .zip(gtq.iter())
            .map(|(lx, g)| (alpha * (lx - g.ln())).exp())
            .collect();
        check_positive(&z, "z", iteration)?;
        let q = &self.inputs.rho_prev / &self.inputs.gamma.apply(&z);
        check_positive(&q, "q", iteration)?;
        Ok((z, q))
    }
}

/// Runs the z/q recursion from `z0` until both ℓ∞ changes drop below `delta` or
/// `max_iter` sweeps were made, then returns `rho_next = z ⊙ (Gamma^T q)`.
///
/// Every sweep ends with a q-update, so the first marginal holds to round-off and
/// the total mass of `rho_next` equals that of `rho_prev` whether or not the
/// iteration converged.
pub fn sinkhorn_fixed_point(
    inputs: &ProxInputs,
    delta: f64,
    max_iter: usize,
    z0: &Array1<f64>,
) -> Result<(Array1<f64>, ProxDiagnostics)> {
    if !(delta > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {delta}")));
    }
    if max_iter == 0 {
        return Err(Error::Config("fixed-point iteration cap must be at least 1".into()));
    }
    let mut it = Iterate::start(inputs, z0)?;
    let mut diag = ProxDiagnostics {
        iterations: 0,
        dq: f64::INFINITY,
        dz: f64::INFINITY,
        marginal_residual: 0.0,
        converged: false,
    };
    for l in 1..=max_iter {
        let (z, q) = it.step(l)?;
        diag.iterations = l;
        diag.dz = linf_diff(&z, &it.z);
        diag.dq = linf_diff(&q, &it.q);
        it.z = z;
        it.q = q;
        if diag.dz < delta && diag.dq < delta {
            diag.converged = true;
            break;
        }
    }
    let gz = inputs.gamma.apply(&it.z);
    diag.marginal_residual = it
        .q
        .iter()
        .zip(gz.iter())
        .zip(inputs.rho_prev.iter())
        .fold(0.0f64, |m, ((q, g), r)| m.max((q * g - r).abs()));

    let rho_next = &it.z * &inputs.gamma.apply_t(&it.q);
    if let Some(i) = rho_next.iter().position(|r| !(*r > 0.0 && r.is_finite())) {
        return Err(Error::numerical(format!(
            "updated weight {i} is {}; lower beta or the step size",
            rho_next[i]
        )));
    }
    Ok((rho_next, diag))
}

/// Thompson distances `||log z^(l+1) - log z^l||_inf` of the first `sweeps`
/// iterations from `z0`.
pub fn thompson_trace(inputs: &ProxInputs, sweeps: usize, z0: &Array1<f64>) -> Result<Vec<f64>> {
    let mut it = Iterate::start(inputs, z0)?;
    let mut trace = Vec::with_capacity(sweeps);
    for l in 1..=sweeps {
        let (z, q) = it.step(l)?;
        let d = z
            .iter()
            .zip(it.z.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a.ln() - b.ln()).abs()));
        trace.push(d);
        it.z = z;
        it.q = q;
    }
    Ok(trace)
}

/// Reference solution of the weight update through the Lagrange dual.
///
/// Maximizes
///
/// ```text
/// J(l0, l1) = <l0, rho_prev> - (1/beta) sum_j exp(-beta l1_j - beta (v + u)_j - 1)
///             - (eps/h) sum_ij exp(l0_i h/eps) Gamma_ij exp(l1_j h/eps)
/// ```
///
/// one coordinate at a time with a safeguarded Newton solve of `dJ/dl = 0`, then
/// returns the second marginal of `M_ij = exp(l0_i h/eps) Gamma_ij exp(l1_j h/eps)`.
/// Dense and slow; meant for small test instances.
pub fn dual_ascent_reference(
    gamma: ArrayView2<f64>,
    log_xi: &Array1<f64>,
    rho_prev: &Array1<f64>,
    beta: f64,
    epsilon: f64,
    h: f64,
    sweeps: usize,
) -> Array1<f64> {
    let n = rho_prev.len();
    let s = h / epsilon;
    let mut l0 = Array1::<f64>::zeros(n);
    let mut l1 = Array1::<f64>::zeros(n);

    // Solves g(x) = 0 for a strictly decreasing g by Newton steps kept inside a
    // bracket that is widened until it holds the root.
    let solve = |g: &dyn Fn(f64) -> (f64, f64), start: f64| -> f64 {
        let (mut lo, mut hi) = (start - 1.0, start + 1.0);
        while g(lo).0 < 0.0 {
            lo -= 2.0 * (hi - lo);
        }
        while g(hi).0 > 0.0 {
            hi += 2.0 * (hi - lo);
        }
        let mut x = start.clamp(lo, hi);
        for _ in 0..200 {
            let (val, slope) = g(x);
            if val == 0.0 {
                break;
            }
            if val > 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let newton = x - val / slope;
            let next = if newton >= lo && newton <= hi { newton } else { 0.5 * (lo + hi) };
            if next == x || (hi - lo) < 1e-15 * (1.0 + x.abs()) {
                break;
            }
            x = next;
        }
        x
    };

    for _ in 0..sweeps {
        for i in 0..n {
            // dJ/dl0_i = rho_i - exp(l0_i s) sum_j Gamma_ij exp(l1_j s)
            let row: f64 = (0..n).map(|j| gamma[[i, j]] * (l1[j] * s).exp()).sum();
            let r = rho_prev[i];
            l0[i] = solve(&|x| (r - (x * s).exp() * row, -s * (x * s).exp() * row), l0[i]);
        }
        for j in 0..n {
            // dJ/dl1_j = exp(-beta l1_j + log_xi_j) - exp(l1_j s) sum_i exp(l0_i s) Gamma_ij
            let col: f64 = (0..n).map(|i| (l0[i] * s).exp() * gamma[[i, j]]).sum();
            let lx = log_xi[j];
            l1[j] = solve(
                &|x| {
                    let a = (lx - beta * x).exp();
                    let b = (x * s).exp() * col;
                    (a - b, -beta * a - s * b)
                },
                l1[j],
            );
        }
    }
    Array1::from_shape_fn(n, |j| (0..n).map(|i| (l0[i] * s).exp() * gamma[[i, j]] * (l1[j] * s).exp()).sum())
}
