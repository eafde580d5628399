//! Closed-form drift of the particle locations.
//!
//! The Euler–Maruyama step moves particle `i` along `-grad_{theta_i} sum_k (v_k + u_k)`
//! with the weights `rho` held fixed. For the binary tanh head the summed
//! derivatives have matrix forms in terms of
//!
//! ```text
//! T = tanh(W X^T + b 1^T),   S = sech^2(W X^T + b 1^T)        (both N x n)
//! ```
//!
//! and the two aggregates `g = P^T 1` and `f = P^T rho` (length n). The interaction
//! part then reduces to O(N n n_x) work instead of the O(N^2 n n_x) of a
//! pairwise sum.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::ParticleCloud;
use crate::error::{Error, Result};
use crate::model::{softmax, tanh, Labels, ModelSpec, Variant};

/// Per-particle partial derivatives in the layout of the model head.
#[derive(Debug, Clone, PartialEq)]
pub enum GradBlocks {
    Binary {
        d_a: Array1<f64>,
        d_b: Array1<f64>,
        d_w: Array2<f64>,
    },
    Multi {
        /// N x m x n_x
        d_theta: Array3<f64>,
    },
}

impl GradBlocks {
    /// Flattens to an N x p matrix with the same column layout as the parameter rows.
    pub fn to_matrix(&self) -> Array2<f64> {
        match self {
            GradBlocks::Binary { d_a, d_b, d_w } => {
                let (n, n_x) = d_w.dim();
                let mut out = Array2::zeros((n, n_x + 2));
                out.column_mut(0).assign(d_a);
                out.column_mut(1).assign(d_b);
                out.slice_mut(s![.., 2..]).assign(d_w);
                out
            }
            GradBlocks::Multi { d_theta } => {
                let (n, m, n_x) = d_theta.dim();
                d_theta
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((n, m * n_x))
                    .expect("contiguous")
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            GradBlocks::Binary { d_a, d_b, d_w } => d_a
                .iter()
                .chain(d_b.iter())
                .chain(d_w.iter())
                .all(|v| v.is_finite()),
            GradBlocks::Multi { d_theta } => d_theta.iter().all(|v| v.is_finite()),
        }
    }

    fn add_assign(&mut self, other: &GradBlocks) -> Result<()> {
        match (self, other) {
            (
                GradBlocks::Binary { d_a, d_b, d_w },
                GradBlocks::Binary {
                    d_a: oa,
                    d_b: ob,
                    d_w: ow,
                },
            ) => {
                *d_a += oa;
                *d_b += ob;
                *d_w += ow;
                Ok(())
            }
            (GradBlocks::Multi { d_theta }, GradBlocks::Multi { d_theta: o }) => {
                *d_theta += o;
                Ok(())
            }
            _ => Err(Error::Input("cannot add gradients of different heads".into())),
        }
    }
}

/// `T` and `S` for the binary head.
#[derive(Debug, Clone)]
pub struct TanhCaches {
    pub t: Array2<f64>,
    pub s: Array2<f64>,
}

impl TanhCaches {
    pub fn new(b: ArrayView1<f64>, w: ArrayView2<f64>, x: ArrayView2<f64>) -> Self {
        let mut t = w.dot(&x.t());
        for (mut row, bi) in t.rows_mut().into_iter().zip(b.iter()) {
            row.mapv_inplace(|z| tanh(z + bi));
        }
        let s = t.mapv(|th| (1.0 - th) * (1.0 + th));
        TanhCaches { t, s }
    }
}

fn check_binary(
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    w: ArrayView2<f64>,
    x: ArrayView2<f64>,
    per_point: usize,
    per_particle: Option<usize>,
) -> Result<()> {
    let n = a.len();
    if x.nrows() == 0 {
        return Err(Error::Input("gradient needs at least one data point".into()));
    }
    if b.len() != n || w.nrows() != n {
        return Err(Error::dimension("binary parameters", n, format!("b: {}, W rows: {}", b.len(), w.nrows())));
    }
    if w.ncols() != x.ncols() {
        return Err(Error::dimension("feature dimension", w.ncols(), x.ncols()));
    }
    if per_point != x.nrows() {
        return Err(Error::dimension("labels", x.nrows(), per_point));
    }
    if let Some(k) = per_particle {
        if k != n {
            return Err(Error::dimension("particle weights", n, k));
        }
    }
    Ok(())
}

/// Scales row `i` of `m` by `c[i]`.
fn scale_rows(mut m: Array2<f64>, c: &Array1<f64>) -> Array2<f64> {
    for (mut row, ci) in m.rows_mut().into_iter().zip(c.iter()) {
        row *= *ci;
    }
    m
}

/// `X ⊙ (c 1^T)`: row `m` of the data scaled by `c[m]`.
fn scale_data(x: ArrayView2<f64>, c: &Array1<f64>) -> Array2<f64> {
    scale_rows(x.to_owned(), c)
}

fn grad_v_cached(caches: &TanhCaches, a: ArrayView1<f64>, x: ArrayView2<f64>, y: &Array1<f64>) -> GradBlocks {
    let coef = -2.0 / x.nrows() as f64;
    let a = a.to_owned();
    let d_a = caches.t.dot(y) * coef;
    let d_b = &a * &caches.s.dot(y) * coef;
    let d_w = scale_rows(caches.s.dot(&scale_data(x, y)), &a) * coef;
    GradBlocks::Binary { d_a, d_b, d_w }
}

fn grad_u_cached(caches: &TanhCaches, a: ArrayView1<f64>, x: ArrayView2<f64>, rho: ArrayView1<f64>) -> GradBlocks {
    let inv_n = 1.0 / x.nrows() as f64;
    let a = a.to_owned();
    let rho = rho.to_owned();
    // g = P^T 1 and f = P^T rho, with P = (a 1^T) ⊙ T
    let g = caches.t.t().dot(&a);
    let f = caches.t.t().dot(&(&a * &rho));

    let d_a = (&rho * &caches.t.dot(&g) + caches.t.dot(&f)) * inv_n;
    let d_b = (&a * &caches.s.dot(&f) + &a * &rho * &caches.s.dot(&g)) * inv_n;
    let sf = caches.s.dot(&scale_data(x, &f));
    let sg = caches.s.dot(&scale_data(x, &g));
    let d_w = scale_rows(sf + scale_rows(sg, &rho), &a) * inv_n;
    GradBlocks::Binary { d_a, d_b, d_w }
}

/// Summed derivatives of the drift potential, `d/dtheta_i sum_k v_k`:
///
/// ```text
/// d_a = -(2/n) T y
/// d_b = -(2/n) a ⊙ (S y)
/// d_W = -(2/n) (a 1^T) ⊙ (S (X ⊙ y 1^T))
/// ```
pub fn grad_v_binary(
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    w: ArrayView2<f64>,
    x: ArrayView2<f64>,
    y: &Array1<f64>,
) -> Result<GradBlocks> {
    check_binary(a, b, w, x, y.len(), None)?;
    let caches = TanhCaches::new(b, w, x);
    Ok(grad_v_cached(&caches, a, x, y))
}

/// Summed derivatives of the interaction field, `d/dtheta_i sum_k u_k` with `rho` frozen:
///
/// ```text
/// d_a    = (1/n) [ rho ⊙ (T T^T a) + T T^T (a ⊙ rho) ]
/// d_b    = (1/n) [ a ⊙ S T^T (a ⊙ rho) + a ⊙ rho ⊙ S T^T a ]
/// d_W_ij = (1/n) sum_k sum_m a_i a_k (rho_i + rho_k) T_km S_im X_mj
/// ```
pub fn grad_u_binary(
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    w: ArrayView2<f64>,
    x: ArrayView2<f64>,
    rho: ArrayView1<f64>,
) -> Result<GradBlocks> {
    check_binary(a, b, w, x, x.nrows(), Some(rho.len()))?;
    let caches = TanhCaches::new(b, w, x);
    Ok(grad_u_cached(&caches, a, x, rho))
}

/// `d/dTheta sum_k (v_k + u_k)` for the softmax head, `rho` frozen.
///
/// With `s = softmax(theta_i x)` and `c` the class of `x`,
/// `dPhi/dtheta_i = s_c (e_c - s) x^T`. Since `v = -(2/n) P 1` and
/// `sum_k u_k = (1/n) sum_m g_m f_m`, particle `i` collects
/// `(1/n) sum_m (f_m + rho_i g_m - 2) dP_im/dtheta_i`.
pub fn grad_multiclass(
    theta: ArrayView2<f64>,
    x: ArrayView2<f64>,
    classes: &[usize],
    m: usize,
    rho: ArrayView1<f64>,
) -> Result<GradBlocks> {
    let (n_particles, p) = theta.dim();
    let (n, n_x) = x.dim();
    if n == 0 {
        return Err(Error::Input("gradient needs at least one data point".into()));
    }
    if p != m * n_x {
        return Err(Error::dimension("multi-class parameters", m * n_x, p));
    }
    if classes.len() != n {
        return Err(Error::dimension("labels", n, classes.len()));
    }
    if rho.len() != n_particles {
        return Err(Error::dimension("particle weights", n_particles, rho.len()));
    }
    if let Some(c) = classes.iter().find(|&&c| c >= m) {
        return Err(Error::Input(format!("class index {c} out of range 0..{m}")));
    }

    // probabilities[i, j, :] = softmax(theta_i x_j)
    let mut probs = Array3::zeros((n_particles, n, m));
    for (i, row) in theta.rows().into_iter().enumerate() {
        let block = row.into_shape_with_order((m, n_x)).expect("row-major block");
        let logits = x.dot(&block.t());
        for (j, l) in logits.rows().into_iter().enumerate() {
            probs.slice_mut(s![i, j, ..]).assign(&softmax(l));
        }
    }
    let mut pmat = Array2::zeros((n_particles, n));
    for i in 0..n_particles {
        for j in 0..n {
            pmat[[i, j]] = probs[[i, j, classes[j]]];
        }
    }
    let g = pmat.sum_axis(Axis(0));
    let f = pmat.t().dot(&rho);

    let inv_n = 1.0 / n as f64;
    let mut d_theta = Array3::zeros((n_particles, m, n_x));
    let mut weights = Array2::<f64>::zeros((m, n));
    for i in 0..n_particles {
        for j in 0..n {
            let c = classes[j];
            let sc = probs[[i, j, c]];
            let coef = inv_n * (f[j] + rho[i] * g[j] - 2.0) * sc;
            for r in 0..m {
                let delta = if r == c { 1.0 } else { 0.0 };
                weights[[r, j]] = coef * (delta - probs[[i, j, r]]);
            }
        }
        d_theta.slice_mut(s![i, .., ..]).assign(&weights.dot(&x));
    }
    Ok(GradBlocks::Multi { d_theta })
}

/// Drift `grad sum_k (v_k + u_k)` at the current cloud for either head.
pub fn drift(cloud: &ParticleCloud, x: ArrayView2<f64>, labels: &Labels, spec: &ModelSpec) -> Result<GradBlocks> {
    spec.validate()?;
    if cloud.dim() != spec.param_dim() {
        return Err(Error::dimension("parameter dimension", spec.param_dim(), cloud.dim()));
    }
    if x.ncols() != spec.n_x {
        return Err(Error::dimension("feature columns", spec.n_x, x.ncols()));
    }
    match (spec.variant, labels) {
        (Variant::BinaryTanh, Labels::Signed(y)) => {
            let theta = cloud.theta.view();
            let (a, b, w) = (theta.column(0), theta.column(1), theta.slice(s![.., 2..]));
            check_binary(a, b, w, x, y.len(), Some(cloud.rho.len()))?;
            let caches = TanhCaches::new(b, w, x);
            let mut total = grad_v_cached(&caches, a, x, y);
            total.add_assign(&grad_u_cached(&caches, a, x, cloud.rho.view()))?;
            Ok(total)
        }
        (Variant::MultiSoftmax { classes }, Labels::Classes(c)) => {
            grad_multiclass(cloud.theta.view(), x, c, classes, cloud.rho.view())
        }
        _ => Err(Error::Input("label kind does not match the model head".into())),
    }
}

/// Potentials `v`, `u` and the N x p drift of the binary head in two passes over
/// the data, without materializing `P` or `S`.
///
/// Particle `i` collects `c_im = f_m + rho_i g_m - 2 y_m` per data point, so
/// `d_a = (1/n) sum_m T_im c_im` and `d_(b,w) = (1/n) a_i sum_m S_im c_im (1, x_m)`.
pub(crate) fn binary_step_terms(
    theta: ArrayView2<f64>,
    x: ArrayView2<f64>,
    y: &Array1<f64>,
    rho: ArrayView1<f64>,
) -> Result<(Array1<f64>, Array1<f64>, Array2<f64>)> {
    let (a, b, w) = (theta.column(0), theta.column(1), theta.slice(s![.., 2..]));
    check_binary(a, b, w, x, y.len(), Some(rho.len()))?;
    let (n_particles, n_x) = w.dim();
    let n = x.nrows();
    let inv_n = 1.0 / n as f64;
    // feature-major copy so the inner loops run over data points
    let xt = x.t().as_standard_layout().into_owned();
    let xt = xt.as_slice().expect("standard layout");
    let y = y.as_slice().expect("contiguous labels");

    let mut t = vec![0.0; n_particles * n];
    let mut g = vec![0.0; n];
    let mut f = vec![0.0; n];
    for i in 0..n_particles {
        let row = &mut t[i * n..(i + 1) * n];
        row.fill(b[i]);
        for k in 0..n_x {
            let wk = w[[i, k]];
            for (z, xk) in row.iter_mut().zip(&xt[k * n..(k + 1) * n]) {
                *z += wk * xk;
            }
        }
        let (ai, ari) = (a[i], a[i] * rho[i]);
        for ((z, gm), fm) in row.iter_mut().zip(g.iter_mut()).zip(f.iter_mut()) {
            let th = tanh(*z);
            *z = th;
            *gm += ai * th;
            *fm += ari * th;
        }
    }

    let mut v = Array1::zeros(n_particles);
    let mut u = Array1::zeros(n_particles);
    let mut drift = Array2::zeros((n_particles, n_x + 2));
    let mut sc_row = vec![0.0; n];
    for i in 0..n_particles {
        let row = &t[i * n..(i + 1) * n];
        let ri = rho[i];
        let (mut ty, mut tf, mut tc, mut sc) = (0.0, 0.0, 0.0, 0.0);
        for ((((&th, &fm), &gm), &ym), out) in row.iter().zip(&f).zip(&g).zip(y).zip(sc_row.iter_mut()) {
            let c = fm + ri * gm - 2.0 * ym;
            let sm = (1.0 - th) * (1.0 + th) * c;
            ty += th * ym;
            tf += th * fm;
            tc += th * c;
            sc += sm;
            *out = sm;
        }
        let ai = a[i];
        v[i] = -2.0 * inv_n * ai * ty;
        u[i] = inv_n * ai * tf;
        drift[[i, 0]] = inv_n * tc;
        drift[[i, 1]] = inv_n * ai * sc;
        for k in 0..n_x {
            let acc: f64 = sc_row.iter().zip(&xt[k * n..(k + 1) * n]).map(|(s, x)| s * x).sum();
            drift[[i, 2 + k]] = inv_n * ai * acc;
        }
    }
    Ok((v, u, drift))
}

/// Central differences, one coordinate at a time.
pub fn fd_oracle(f: &mut dyn FnMut(ArrayView1<f64>) -> f64, point: ArrayView1<f64>, step: f64) -> Result<Array1<f64>> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = point.to_owned();
    let mut grad = Array1::zeros(point.len());
    for k in 0..point.len() {
        let orig = probe[k];
        probe[k] = orig + step;
        let up = f(probe.view());
        probe[k] = orig - step;
        let down = f(probe.view());
        probe[k] = orig;
        grad[k] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Relative ℓ∞ error `max|analytic - reference| / max(max|reference|, 1e-10)`.
pub fn relative_linf(analytic: ArrayView1<f64>, reference: ArrayView1<f64>) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-10);
    analytic
        .iter()
        .zip(reference.iter())
        .fold(0.0f64, |m, (a, r)| m.max((a - r).abs()))
        / scale
}

/// Largest relative errors seen across a batch of random gradient checks.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub trials: usize,
    pub binary_v: f64,
    pub binary_u: f64,
    pub multiclass: f64,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.binary_v.max(self.binary_u).max(self.multiclass)
    }
}

/// `sum_k v_k` for the binary head, evaluated directly from the features.
fn sum_v_binary(theta: ArrayView2<f64>, x: ArrayView2<f64>, y: &Array1<f64>) -> f64 {
    let n = x.nrows() as f64;
    let mut total = 0.0;
    for row in theta.rows() {
        for (xm, ym) in x.rows().into_iter().zip(y.iter()) {
            total += crate::model::phi_binary(row, xm) * ym;
        }
    }
    -2.0 / n * total
}

fn sum_u(p: &Array2<f64>, rho: ArrayView1<f64>) -> f64 {
    let n = p.ncols() as f64;
    let g = p.sum_axis(Axis(0));
    let f = p.t().dot(&rho);
    g.dot(&f) / n
}

fn binary_features(theta: ArrayView2<f64>, x: ArrayView2<f64>) -> Array2<f64> {
    Array2::from_shape_fn((theta.nrows(), x.nrows()), |(i, j)| {
        crate::model::phi_binary(theta.row(i), x.row(j))
    })
}

fn multiclass_features(theta: ArrayView2<f64>, x: ArrayView2<f64>, classes: &[usize], m: usize) -> Array2<f64> {
    Array2::from_shape_fn((theta.nrows(), x.nrows()), |(i, j)| {
        let mut y = Array1::zeros(m);
        y[classes[j]] = 1.0;
        crate::model::phi_multiclass(theta.row(i), x.row(j), y.view()).expect("valid one-hot")
    })
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

/// Random gradient checks of the closed forms against central differences.
///
/// Instance sizes are drawn with N <= 32, n_data <= 64, n_x <= 16 (m <= 4 for the
/// softmax head). Each trial checks the v-part and u-part of the binary head and
/// the combined multi-class gradient.
pub fn gradcheck(trials: usize, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport {
        trials,
        ..Default::default()
    };
    for _ in 0..trials {
        let n_particles = rng.random_range(1..=32);
        let n = rng.random_range(1..=64);
        let n_x = rng.random_range(1..=16);

        // binary head
        let theta = random_matrix(&mut rng, n_particles, n_x + 2, 1.0);
        let x = random_matrix(&mut rng, n, n_x, 1.0);
        let y: Array1<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let rho: Array1<f64> = (0..n_particles).map(|_| rng.random_range(0.05..2.0)).collect();
        let (a, b, w) = (theta.column(0), theta.column(1), theta.slice(s![.., 2..]));
        let flat = theta.as_standard_layout().into_owned().into_shape_with_order(n_particles * (n_x + 2)).unwrap();
        let reshape = |v: ArrayView1<f64>| v.to_owned().into_shape_with_order((n_particles, n_x + 2)).unwrap();

        let gv = grad_v_binary(a, b, w, x.view(), &y)?.to_matrix();
        let fd_v = fd_oracle(&mut |t| sum_v_binary(reshape(t).view(), x.view(), &y), flat.view(), FD_STEP)?;
        let err_v = relative_linf(gv.as_standard_layout().into_shape_with_order(flat.len()).unwrap().view(), fd_v.view());
        report.binary_v = report.binary_v.max(err_v);

        let gu = grad_u_binary(a, b, w, x.view(), rho.view())?.to_matrix();
        let fd_u = fd_oracle(&mut |t| sum_u(&binary_features(reshape(t).view(), x.view()), rho.view()), flat.view(), FD_STEP)?;
        let err_u = relative_linf(gu.as_standard_layout().into_shape_with_order(flat.len()).unwrap().view(), fd_u.view());
        report.binary_u = report.binary_u.max(err_u);

        // softmax head
        let m = rng.random_range(2..=4);
        let theta = random_matrix(&mut rng, n_particles, m * n_x, 1.0);
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
        let flat = theta.as_standard_layout().into_owned().into_shape_with_order(n_particles * m * n_x).unwrap();
        let reshape = |v: ArrayView1<f64>| v.to_owned().into_shape_with_order((n_particles, m * n_x)).unwrap();
        let gm = grad_multiclass(theta.view(), x.view(), &classes, m, rho.view())?.to_matrix();
        let fd_m = fd_oracle(
            &mut |t| {
                let p = multiclass_features(reshape(t).view(), x.view(), &classes, m);
                -2.0 / n as f64 * p.sum() + sum_u(&p, rho.view())
            },
            flat.view(),
            FD_STEP,
        )?;
        let err_m = relative_linf(gm.as_standard_layout().into_shape_with_order(flat.len()).unwrap().view(), fd_m.view());
        report.multiclass = report.multiclass.max(err_m);
    }
    Ok(report)
}
