//! Feature map, potentials and risk estimates for the two network heads.
//!
//! Binary head: `Phi(x, theta) = a * tanh(<w, x> + b)` with the parameter row laid
//! out as `(a, b, w_1, .., w_nx)`.
//!
//! Multi-class head: `Phi(x, y, theta) = <softmax(theta x), y>` where `theta` is an
//! `m x n_x` block stored row-major in the parameter row and `y` is one-hot.
//!
//! Throughout, `P[i, j]` is the feature of particle `i` at data point `j`, the drift
//! potential is `v = -(2/n) P t` with `t` the regression targets (labels for the
//! binary head, all ones for the multi-class head) and the interaction kernel is
//! `U = (1/n) P P^T`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::cloud::ParticleCloud;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Variant {
    BinaryTanh,
    MultiSoftmax { classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub n_x: usize,
}

impl ModelSpec {
    pub fn binary(n_x: usize) -> Self {
        ModelSpec {
            variant: Variant::BinaryTanh,
            n_x,
        }
    }

    pub fn multiclass(classes: usize, n_x: usize) -> Self {
        ModelSpec {
            variant: Variant::MultiSoftmax { classes },
            n_x,
        }
    }

    /// Length of one particle's parameter row.
    pub fn param_dim(&self) -> usize {
        match self.variant {
            Variant::BinaryTanh => self.n_x + 2,
            Variant::MultiSoftmax { classes } => classes * self.n_x,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x == 0 {
            return Err(Error::Config("model needs n_x >= 1".into()));
        }
        if let Variant::MultiSoftmax { classes } = self.variant {
            if classes < 2 {
                return Err(Error::Config(format!(
                    "multi-class head needs at least 2 classes, got {classes}"
                )));
            }
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        match self.variant {
            Variant::BinaryTanh => format!("binary_tanh(n_x={})", self.n_x),
            Variant::MultiSoftmax { classes } => {
                format!("multi_softmax(m={classes}, n_x={})", self.n_x)
            }
        }
    }
}

/// Training or test labels.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// Real-valued regression targets; binary classes are stored as -1 / +1.
    Signed(Array1<f64>),
    /// Class indices in `[0, m)`.
    Classes(Vec<usize>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Signed(y) => y.len(),
            Labels::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Targets of the quadratic risk: the labels themselves for the binary head,
    /// ones for the multi-class head (the feature already is the correct-class
    /// likelihood).
    pub fn targets(&self) -> Array1<f64> {
        match self {
            Labels::Signed(y) => y.clone(),
            Labels::Classes(c) => Array1::ones(c.len()),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Signed(y) => Labels::Signed(idx.iter().map(|&i| y[i]).collect()),
            Labels::Classes(c) => Labels::Classes(idx.iter().map(|&i| c[i]).collect()),
        }
    }
}

pub fn phi_binary(theta: ArrayView1<f64>, x: ArrayView1<f64>) -> f64 {
    let a = theta[0];
    let b = theta[1];
    let z = theta.slice(s![2..]).dot(&x) + b;
    a * z.tanh()
}

/// Softmax of `logits`, shifted by the maximum for stability.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &l| m.max(l));
    let e = logits.mapv(|l| (l - max).exp());
    let total = e.sum();
    e / total
}

/// `<softmax(theta x), y_onehot>` for a flattened `m x n_x` parameter block.
pub fn phi_multiclass(
    theta: ArrayView1<f64>,
    x: ArrayView1<f64>,
    y_onehot: ArrayView1<f64>,
) -> Result<f64> {
    let m = y_onehot.len();
    let n_x = x.len();
    if theta.len() != m * n_x {
        return Err(Error::dimension("phi_multiclass parameters", m * n_x, theta.len()));
    }
    let ones = y_onehot.iter().filter(|&&v| v == 1.0).count();
    let zeros = y_onehot.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || zeros != m - 1 {
        return Err(Error::Input(format!(
            "label vector {y_onehot} is not one-hot"
        )));
    }
    let block = theta
        .into_shape_with_order((m, n_x))
        .map_err(|e| Error::Input(e.to_string()))?;
    let s = softmax(block.dot(&x).view());
    Ok(s.dot(&y_onehot))
}

fn check_data(theta: ArrayView2<f64>, x: ArrayView2<f64>, labels: &Labels, spec: &ModelSpec) -> Result<()> {
    spec.validate()?;
    if x.ncols() != spec.n_x {
        return Err(Error::dimension("feature columns", spec.n_x, x.ncols()));
    }
    if theta.ncols() != spec.param_dim() {
        return Err(Error::dimension("parameter dimension", spec.param_dim(), theta.ncols()));
    }
    if labels.len() != x.nrows() {
        return Err(Error::dimension("label count", x.nrows(), labels.len()));
    }
    match (labels, spec.variant) {
        (Labels::Signed(_), Variant::BinaryTanh) => Ok(()),
        (Labels::Classes(c), Variant::MultiSoftmax { classes }) => {
            match c.iter().find(|&&k| k >= classes) {
                Some(k) => Err(Error::Input(format!("class index {k} out of range 0..{classes}"))),
                None => Ok(()),
            }
        }
        _ => Err(Error::Input("label kind does not match the model head".into())),
    }
}

/// Hyperbolic tangent through one `exp`, odd by construction. Below |z| = 1/8 it
/// defers to `f64::tanh`, where `1 - 2/(e + 1)` would cancel. Absolute error is a
/// few ulp of 1 elsewhere.
#[inline]
pub fn tanh(z: f64) -> f64 {
    let r = z.abs();
    if r < 0.125 {
        return z.tanh();
    }
    let e = (2.0 * r).exp();
    (1.0 - 2.0 / (e + 1.0)).copysign(z)
}

/// Pre-activations `W X^T + b 1^T` for the binary head (N x n).
pub(crate) fn binary_preactivation(theta: ArrayView2<f64>, x: ArrayView2<f64>) -> Array2<f64> {
    let w = theta.slice(s![.., 2..]);
    let b = theta.column(1);
    let mut z = w.dot(&x.t());
    for (mut row, bi) in z.rows_mut().into_iter().zip(b.iter()) {
        row += *bi;
    }
    z
}

/// Matrix of feature evaluations `P[i, j] = Phi(x_j, theta_i)`.
pub fn feature_matrix(
    theta: ArrayView2<f64>,
    x: ArrayView2<f64>,
    labels: &Labels,
    spec: &ModelSpec,
) -> Result<Array2<f64>> {
    check_data(theta, x, labels, spec)?;
    Ok(match (spec.variant, labels) {
        (Variant::BinaryTanh, _) => {
            let mut p = binary_preactivation(theta, x);
            for (mut row, a) in p.rows_mut().into_iter().zip(theta.column(0).iter()) {
                row.mapv_inplace(|z| a * tanh(z));
            }
            p
        }
        (Variant::MultiSoftmax { classes }, Labels::Classes(cls)) => {
            let n = x.nrows();
            let mut p = Array2::zeros((theta.nrows(), n));
            for (i, row) in theta.rows().into_iter().enumerate() {
                let block = row.into_shape_with_order((classes, spec.n_x)).unwrap();
                let logits = x.dot(&block.t());
                for (j, l) in logits.rows().into_iter().enumerate() {
                    p[[i, j]] = softmax(l)[cls[j]];
                }
            }
            p
        }
        _ => unreachable!("checked by check_data"),
    })
}

/// Features, drift potential and interaction terms at the current samples.
#[derive(Debug, Clone)]
pub struct PotentialEval {
    /// `P`, N x n_data.
    pub p: Array2<f64>,
    /// Drift potential `v = -(2/n) P t`.
    pub v: Array1<f64>,
    /// Interaction field `u = U rho`.
    pub u: Array1<f64>,
    /// Interaction kernel `U = (1/n) P P^T`. Only materialized by [`build_potentials`].
    pub kernel: Option<Array2<f64>>,
}

pub(crate) fn potentials_from_features(p: Array2<f64>, targets: &Array1<f64>, rho: &Array1<f64>, materialize: bool) -> PotentialEval {
    let n = p.ncols() as f64;
    let v = p.dot(targets) * (-2.0 / n);
    if materialize {
        let kernel = p.dot(&p.t()) / n;
        let u = kernel.dot(rho);
        PotentialEval { p, v, u, kernel: Some(kernel) }
    } else {
        let f = p.t().dot(rho);
        let u = p.dot(&f) / n;
        PotentialEval { p, v, u, kernel: None }
    }
}

fn potential_inputs(cloud: &ParticleCloud, x: ArrayView2<f64>, labels: &Labels, spec: &ModelSpec) -> Result<Array2<f64>> {
    if x.nrows() == 0 {
        return Err(Error::Input("potentials need at least one data point".into()));
    }
    if cloud.rho.len() != cloud.theta.nrows() {
        return Err(Error::dimension("particle weights", cloud.theta.nrows(), cloud.rho.len()));
    }
    feature_matrix(cloud.theta.view(), x, labels, spec)
}

/// Builds `P`, `v`, the full N x N kernel `U` and `u = U rho`.
pub fn build_potentials(
    cloud: &ParticleCloud,
    x: ArrayView2<f64>,
    labels: &Labels,
    spec: &ModelSpec,
) -> Result<PotentialEval> {
    let p = potential_inputs(cloud, x, labels, spec)?;
    Ok(potentials_from_features(p, &labels.targets(), &cloud.rho, true))
}

/// Same as [`build_potentials`] without forming `U`; `u` is evaluated as
/// `(1/n) P (P^T rho)` in O(N n) instead of O(N^2 n).
pub fn build_potentials_lean(
    cloud: &ParticleCloud,
    x: ArrayView2<f64>,
    labels: &Labels,
    spec: &ModelSpec,
) -> Result<PotentialEval> {
    let p = potential_inputs(cloud, x, labels, spec)?;
    Ok(potentials_from_features(p, &labels.targets(), &cloud.rho, false))
}

/// Mean-field output at each data point, `P^T rho` (optionally self-normalized).
pub fn weighted_estimate(p: ArrayView2<f64>, rho: &Array1<f64>, normalize: bool) -> Array1<f64> {
    let est = p.t().dot(rho);
    if normalize {
        est / rho.sum()
    } else {
        est
    }
}

pub fn unweighted_estimate(p: ArrayView2<f64>) -> Array1<f64> {
    p.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(p.ncols()))
}

fn mean_square_residual(targets: &Array1<f64>, est: &Array1<f64>) -> f64 {
    let n = targets.len() as f64;
    targets
        .iter()
        .zip(est)
        .map(|(t, e)| (t - e) * (t - e))
        .sum::<f64>()
        / n
}

/// `(1/n_test) || targets - P^T rho ||^2`; with `normalize` the weights are
/// replaced by `rho / sum(rho)`.
pub fn risk_weighted(p_test: ArrayView2<f64>, rho: &Array1<f64>, targets: &Array1<f64>, normalize: bool) -> f64 {
    mean_square_residual(targets, &weighted_estimate(p_test, rho, normalize))
}

/// `(1/n_test) || targets - (1/N) P^T 1 ||^2`.
pub fn risk_unweighted(p_test: ArrayView2<f64>, targets: &Array1<f64>) -> f64 {
    mean_square_residual(targets, &unweighted_estimate(p_test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMode {
    Weighted,
    Unweighted,
}

impl std::str::FromStr for EstimateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(EstimateMode::Weighted),
            "unweighted" => Ok(EstimateMode::Unweighted),
            other => Err(Error::Config(format!(
                "unknown estimate mode {other:?} (expected weighted or unweighted)"
            ))),
        }
    }
}

/// Predicted classes against the truth.
///
/// Class indices: for the binary head 0 is the label -1 and 1 is the label +1;
/// for the multi-class head they are the digit classes. `confusion[actual][predicted]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub predicted: Vec<usize>,
    pub actual: Vec<usize>,
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
}

fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

/// Labels the test points with the trained cloud.
///
/// Binary: sign of the mean-field estimate (non-negative maps to +1). Multi-class:
/// argmax over the particle-averaged logits, lowest class index on ties. The
/// weighted mode averages with `rho / sum(rho)`, so predictions do not depend on
/// the overall scale of the weights.
pub fn predict(
    cloud: &ParticleCloud,
    x_test: ArrayView2<f64>,
    labels_test: &Labels,
    spec: &ModelSpec,
    mode: EstimateMode,
) -> Result<Prediction> {
    if x_test.nrows() == 0 {
        return Err(Error::Input("empty test set".into()));
    }
    check_data(cloud.theta.view(), x_test, labels_test, spec)?;
    let n_particles = cloud.len() as f64;
    let weights = match mode {
        EstimateMode::Weighted => &cloud.rho / cloud.rho.sum(),
        EstimateMode::Unweighted => Array1::from_elem(cloud.len(), 1.0 / n_particles),
    };

    let (predicted, actual, classes): (Vec<usize>, Vec<usize>, usize) = match (spec.variant, labels_test) {
        (Variant::BinaryTanh, Labels::Signed(y)) => {
            let p = feature_matrix(cloud.theta.view(), x_test, labels_test, spec)?;
            let est = p.t().dot(&weights);
            let predicted = est.iter().map(|f| usize::from(*f >= 0.0)).collect();
            let actual = y.iter().map(|v| usize::from(*v > 0.0)).collect();
            (predicted, actual, 2)
        }
        (Variant::MultiSoftmax { classes }, Labels::Classes(c)) => {
            // Logits are linear in theta, so averaging logits equals the logits
            // of the averaged parameter block.
            let mean_block = cloud.theta.t().dot(&weights);
            let mean_block = mean_block
                .into_shape_with_order((classes, spec.n_x))
                .map_err(|e| Error::Input(e.to_string()))?;
            let logits = x_test.dot(&mean_block.t());
            let predicted = logits.rows().into_iter().map(argmax).collect();
            (predicted, c.clone(), classes)
        }
        _ => unreachable!("checked by check_data"),
    };

    let mut confusion = vec![vec![0usize; classes]; classes];
    for (a, p) in actual.iter().zip(&predicted) {
        confusion[*a][*p] += 1;
    }
    let hits = actual.iter().zip(&predicted).filter(|(a, p)| a == p).count();
    Ok(Prediction {
        accuracy: hits as f64 / actual.len() as f64,
        predicted,
        actual,
        confusion,
    })
}
