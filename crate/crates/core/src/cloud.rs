//! Weighted point cloud: parameter samples paired with density values.
//!
//! A checkpoint directory holds three files:
//!
//! * `theta.csv`: N rows of p comma-separated values, no header
//! * `rho.csv`: N rows of one value
//! * `meta.json`: [`CheckpointMeta`]
//!
//! Values are written with 17 significant digits so that a save/load round
//! trip reproduces every `f64` exactly.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// N parameter samples (rows of `theta`) with strictly positive density values `rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    pub theta: Array2<f64>,
    pub rho: Array1<f64>,
    pub step_index: u64,
}

impl ParticleCloud {
    pub fn new(theta: Array2<f64>, rho: Array1<f64>) -> Result<Self> {
        let cloud = ParticleCloud {
            theta,
            rho,
            step_index: 0,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.theta.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.theta.ncols()
    }

    pub fn mass(&self) -> f64 {
        self.rho.sum()
    }

    /// Checks shape agreement, finiteness of `theta` and positivity of `rho`.
    pub fn validate(&self) -> Result<()> {
        if self.rho.len() != self.theta.nrows() {
            return Err(Error::dimension(
                "particle cloud",
                format!("{} weights", self.theta.nrows()),
                self.rho.len(),
            ));
        }
        if let Some(i) = self.rho.iter().position(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Input(format!(
                "weight rho[{i}] = {} is not strictly positive and finite",
                self.rho[i]
            )));
        }
        if self.theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Input("theta contains non-finite entries".into()));
        }
        Ok(())
    }
}

/// Closed interval `[lo, hi]` applied to `dims` consecutive coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSegment {
    pub lo: f64,
    pub hi: f64,
    #[serde(default = "one")]
    pub dims: usize,
}

fn one() -> usize {
    1
}

impl BoxSegment {
    pub fn new(lo: f64, hi: f64, dims: usize) -> Self {
        BoxSegment { lo, hi, dims }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum WeightInit {
    /// Every weight equals the uniform density on the support box, 1 / volume.
    UniformDensity,
    /// Weights drawn i.i.d. uniform on `(lo, hi]`.
    UniformRandom { lo: f64, hi: f64 },
    /// Every weight set to `value`.
    Constant { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub support: Vec<BoxSegment>,
    pub weights: WeightInit,
    #[serde(default)]
    pub seed: u64,
}

impl InitSpec {
    /// Per-coordinate `(lo, hi)` bounds expanded from the segments.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.support
            .iter()
            .flat_map(|s| std::iter::repeat((s.lo, s.hi)).take(s.dims))
            .collect()
    }

    fn check(&self, p: usize) -> Result<Vec<(f64, f64)>> {
        let bounds = self.bounds();
        if bounds.len() != p {
            return Err(Error::Config(format!(
                "support box covers {} coordinates but the model has p = {p}",
                bounds.len()
            )));
        }
        for (j, (lo, hi)) in bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!(
                    "support interval [{lo}, {hi}] for coordinate {j} is empty or non-finite"
                )));
            }
        }
        if let WeightInit::UniformRandom { lo, hi } = self.weights {
            if !(lo >= 0.0 && lo < hi && hi.is_finite()) {
                return Err(Error::Config(format!(
                    "weight interval ({lo}, {hi}] must satisfy 0 <= lo < hi"
                )));
            }
        }
        if let WeightInit::Constant { value } = self.weights {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::Config(format!("constant weight must be positive, got {value}")));
            }
        }
        Ok(bounds)
    }
}

/// Draws N samples uniformly from the support box, seeded from `spec.seed`.
pub fn init_cloud(spec: &InitSpec, n: usize, p: usize) -> Result<ParticleCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    init_cloud_with(spec, n, p, &mut rng)
}

/// Same as [`init_cloud`] but consumes draws from a caller-owned stream.
///
/// Draw order: all of `theta` row-major, then the N weights (random mode only).
pub fn init_cloud_with<R: Rng + ?Sized>(
    spec: &InitSpec,
    n: usize,
    p: usize,
    rng: &mut R,
) -> Result<ParticleCloud> {
    if n == 0 || p == 0 {
        return Err(Error::Config(format!(
            "cloud needs N >= 1 and p >= 1, got N = {n}, p = {p}"
        )));
    }
    let bounds = spec.check(p)?;
    let mut theta = Array2::zeros((n, p));
    for mut row in theta.rows_mut() {
        for (t, (lo, hi)) in row.iter_mut().zip(&bounds) {
            *t = rng.random_range(*lo..=*hi);
        }
    }
    let rho = match spec.weights {
        WeightInit::UniformDensity => {
            let volume: f64 = bounds.iter().map(|(lo, hi)| hi - lo).product();
            let log_volume: f64 = bounds.iter().map(|(lo, hi)| (hi - lo).ln()).sum();
            let density = if volume > 0.0 && volume.is_finite() { 1.0 / volume } else { (-log_volume).exp() };
            if !(density > 0.0 && density.is_finite()) {
                return Err(Error::Config(format!(
                    "uniform density 1/volume is not representable (log volume {log_volume})"
                )));
            }
            Array1::from_elem(n, density)
        }
        WeightInit::UniformRandom { lo, hi } => {
            // (lo, hi] by reflecting a [lo, hi) draw
            Array1::from_shape_fn(n, |_| hi - rng.random_range(0.0..hi - lo))
        }
        WeightInit::Constant { value } => Array1::from_elem(n, value),
    };
    ParticleCloud::new(theta, rho)
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub n: usize,
    pub p: usize,
    pub step_index: u64,
    pub model: String,
    pub config_hash: String,
    pub seed: u64,
    /// Position of the run's random stream, as a decimal string (u128).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng_word_pos: Option<String>,
    /// Full run configuration, when written by the trainer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl CheckpointMeta {
    pub fn for_cloud(cloud: &ParticleCloud) -> Self {
        CheckpointMeta {
            n: cloud.len(),
            p: cloud.dim(),
            step_index: cloud.step_index,
            model: String::from("unspecified"),
            config_hash: String::new(),
            seed: 0,
            rng_word_pos: None,
            config: None,
        }
    }
}

pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes the cloud with a minimal `meta.json`.
pub fn save_cloud(cloud: &ParticleCloud, dir: &Path) -> Result<()> {
    save_checkpoint(cloud, dir, &CheckpointMeta::for_cloud(cloud))
}

/// Writes the cloud plus caller-supplied metadata. `n`, `p` and `step_index`
/// are always taken from the cloud itself.
pub fn save_checkpoint(cloud: &ParticleCloud, dir: &Path, meta: &CheckpointMeta) -> Result<()> {
    cloud.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut theta = String::with_capacity(cloud.len() * cloud.dim() * 24);
    for row in cloud.theta.rows() {
        let cells: Vec<String> = row.iter().map(|x| fmt_f64(*x)).collect();
        theta.push_str(&cells.join(","));
        theta.push('\n');
    }
    let mut rho = String::with_capacity(cloud.len() * 24);
    for r in &cloud.rho {
        rho.push_str(&fmt_f64(*r));
        rho.push('\n');
    }
    let meta = CheckpointMeta {
        n: cloud.len(),
        p: cloud.dim(),
        step_index: cloud.step_index,
        ..meta.clone()
    };
    let meta_json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::parse(dir.join("meta.json"), e.to_string()))?;

    write(&dir.join("theta.csv"), &theta)?;
    write(&dir.join("rho.csv"), &rho)?;
    write(&dir.join("meta.json"), &meta_json)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn load_cloud(dir: &Path) -> Result<ParticleCloud> {
    load_checkpoint(dir).map(|(cloud, _)| cloud)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParticleCloud, CheckpointMeta)> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&meta_text).map_err(|e| Error::parse(&meta_path, e.to_string()))?;

    let theta_rows = read_rows(&dir.join("theta.csv"))?;
    if theta_rows.len() != meta.n {
        return Err(Error::dimension("theta.csv rows", meta.n, theta_rows.len()));
    }
    let mut theta = Array2::zeros((meta.n, meta.p));
    for (i, row) in theta_rows.iter().enumerate() {
        if row.len() != meta.p {
            return Err(Error::dimension("theta.csv columns", meta.p, row.len()));
        }
        for (j, v) in row.iter().enumerate() {
            theta[[i, j]] = *v;
        }
    }

    let rho_rows = read_rows(&dir.join("rho.csv"))?;
    if rho_rows.len() != meta.n {
        return Err(Error::dimension("rho.csv rows", meta.n, rho_rows.len()));
    }
    let mut rho = Array1::zeros(meta.n);
    for (i, row) in rho_rows.iter().enumerate() {
        if row.len() != 1 {
            return Err(Error::dimension("rho.csv columns", 1, row.len()));
        }
        rho[i] = row[0];
    }

    let mut cloud = ParticleCloud::new(theta, rho)?;
    cloud.step_index = meta.step_index;
    Ok((cloud, meta))
}

fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(lineno, line)| {
            line.split(',')
                .map(|cell| {
                    cell.trim().parse::<f64>().map_err(|e| {
                        Error::parse(path, format!("line {}: {cell:?}: {e}", lineno + 1))
                    })
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wdbc_spec(seed: u64) -> InitSpec {
        InitSpec {
            support: vec![
                BoxSegment::new(0.9, 1.1, 1),
                BoxSegment::new(-0.1, 0.1, 1),
                BoxSegment::new(-1.0, 1.0, 30),
            ],
            weights: WeightInit::UniformDensity,
            seed,
        }
    }

    #[test]
    fn wdbc_box_draws_stay_inside() {
        let cloud = init_cloud(&wdbc_spec(7), 1000, 32).unwrap();
        assert_eq!(cloud.theta.dim(), (1000, 32));
        for row in cloud.theta.rows() {
            assert!((0.9..=1.1).contains(&row[0]));
            assert!((-0.1..=0.1).contains(&row[1]));
            assert!(row.iter().skip(2).all(|w| (-1.0..=1.0).contains(w)));
        }
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let spec = InitSpec {
            support: vec![BoxSegment::new(0.0, 0.0, 3)],
            weights: WeightInit::UniformDensity,
            seed: 0,
        };
        assert!(matches!(init_cloud(&spec, 4, 3), Err(Error::Config(_))));
    }

    #[test]
    fn support_must_cover_every_coordinate() {
        assert!(matches!(
            init_cloud(&wdbc_spec(0), 4, 31),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn uniform_density_is_inverse_volume() {
        let spec = InitSpec {
            support: vec![BoxSegment::new(-1.0, 1.0, 3)],
            weights: WeightInit::UniformDensity,
            seed: 3,
        };
        let cloud = init_cloud(&spec, 10, 3).unwrap();
        assert!(cloud.rho.iter().all(|r| *r == 0.125));
    }

    #[test]
    fn random_weights_in_half_open_interval() {
        let spec = InitSpec {
            support: vec![BoxSegment::new(-2.0, 2.0, 2)],
            weights: WeightInit::UniformRandom { lo: 0.0, hi: 1000.0 },
            seed: 11,
        };
        let cloud = init_cloud(&spec, 500, 2).unwrap();
        assert!(cloud.rho.iter().all(|r| *r > 0.0 && *r <= 1000.0));
    }

    #[test]
    fn constant_weights() {
        let mut spec = InitSpec {
            support: vec![BoxSegment::new(-2.0, 2.0, 2)],
            weights: WeightInit::Constant { value: 1e-3 },
            seed: 0,
        };
        assert!(init_cloud(&spec, 5, 2).unwrap().rho.iter().all(|r| *r == 1e-3));
        spec.weights = WeightInit::Constant { value: 0.0 };
        assert!(matches!(init_cloud(&spec, 5, 2), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_cloud(&wdbc_spec(42), 50, 32).unwrap();
        let b = init_cloud(&wdbc_spec(42), 50, 32).unwrap();
        let c = init_cloud(&wdbc_spec(43), 50, 32).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.theta, c.theta);
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let theta = ndarray::array![[0.1, -1.0 / 3.0], [std::f64::consts::PI, 1e-300]];
        let mut cloud = ParticleCloud::new(theta, ndarray::array![2.0 / 7.0, 1e-12]).unwrap();
        cloud.step_index = 17;
        save_cloud(&cloud, dir.path()).unwrap();
        let back = load_cloud(dir.path()).unwrap();
        assert_eq!(back, cloud);
    }

    #[test]
    fn truncated_rho_is_dimension_error() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = init_cloud(&wdbc_spec(1), 3, 32).unwrap();
        save_cloud(&cloud, dir.path()).unwrap();
        let rho_path = dir.path().join("rho.csv");
        let text = fs::read_to_string(&rho_path).unwrap();
        let truncated: Vec<&str> = text.lines().take(2).collect();
        fs::write(&rho_path, truncated.join("\n")).unwrap();
        assert!(matches!(
            load_cloud(dir.path()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_weight_is_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = init_cloud(&wdbc_spec(1), 3, 32).unwrap();
        save_cloud(&cloud, dir.path()).unwrap();
        fs::write(dir.path().join("rho.csv"), "1.0\n0.0\n2.0\n").unwrap();
        assert!(matches!(load_cloud(dir.path()), Err(Error::Input(_))));
    }

    #[test]
    fn garbage_cell_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = init_cloud(&wdbc_spec(1), 3, 32).unwrap();
        save_cloud(&cloud, dir.path()).unwrap();
        fs::write(dir.path().join("rho.csv"), "1.0\nabc\n2.0\n").unwrap();
        assert!(matches!(load_cloud(dir.path()), Err(Error::Parse { .. })));
    }
}
