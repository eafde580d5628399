//! The ProxLearn loop, run directories and experiment drivers.
//!
//! A run directory contains
//!
//! * `config.json`: the resolved configuration
//! * `manifest.json`: dataset provenance and split
//! * `metrics.csv`: one [`MetricsRow`] per logged step
//! * `checkpoint/`: the latest cloud (see [`crate::cloud`]) with the random
//!   stream position, so an interrupted run resumes bit-exactly
//!
//! Randomness comes from a single ChaCha8 stream seeded with `seed`: the initial
//! cloud is drawn first, then each step draws its N x p normals (row-major)
//! followed by the N uniforms of the fixed-point start `z0`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cloud::{init_cloud_with, load_checkpoint, save_checkpoint, CheckpointMeta, InitSpec, ParticleCloud};
use crate::data::{self, Dataset, SplitSpec, TabularSchema};
use crate::dynamics::{em_update_matrix, EmConfig};
use crate::error::{Error, Result};
use crate::grad;
use crate::model::{self, EstimateMode, Labels, ModelSpec, Variant};
use crate::prox::{self, Kernel, ProxDiagnostics, ProxInputs};

/// Where the data of a run comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Wdbc { path: PathBuf },
    Semeion { path: PathBuf },
    Tabular { schema: TabularSchema, path: PathBuf },
    Sinusoid { n_points: usize, x_range: (f64, f64), seed: u64 },
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Wdbc { path } => data::load_wdbc(path),
            DatasetSource::Semeion { path } => data::load_semeion(path),
            DatasetSource::Tabular { schema, path } => data::load_tabular(path, *schema),
            DatasetSource::Sinusoid { n_points, x_range, seed } => data::gen_sinusoid(*n_points, *x_range, *seed),
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match self {
            DatasetSource::Wdbc { path } | DatasetSource::Semeion { path } | DatasetSource::Tabular { path, .. } => Some(path),
            DatasetSource::Sinusoid { .. } => None,
        }
    }

    /// Same source read from another file.
    pub fn with_path(&self, new: &Path) -> DatasetSource {
        let mut out = self.clone();
        match &mut out {
            DatasetSource::Wdbc { path } | DatasetSource::Semeion { path } | DatasetSource::Tabular { path, .. } => {
                *path = new.to_path_buf()
            }
            DatasetSource::Sinusoid { .. } => {}
        }
        out
    }
}

fn default_log_every() -> u64 {
    1
}

fn default_true() -> bool {
    true
}

fn default_noise() -> f64 {
    1.0
}

/// Run configuration, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxConfig {
    #[serde(default)]
    pub name: String,
    pub beta: f64,
    pub h: f64,
    pub epsilon: f64,
    /// Fixed-point tolerance.
    pub delta: f64,
    /// Fixed-point iteration cap `L`.
    pub max_sinkhorn_iters: usize,
    pub n_particles: usize,
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise_scale: f64,
    pub iterations: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    pub model: Variant,
    pub init: InitSpec,
    pub dataset: DatasetSource,
    pub split: SplitSpec,
    /// Self-normalize the weights in the weighted risk estimate.
    #[serde(default = "default_true")]
    pub normalize_weights: bool,
    /// Fill the `wall_ms` column; off by default so metrics files are reproducible byte for byte.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl ProxConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid configuration: {e}")))
    }

    /// Reads a config file; relative dataset paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(p) = cfg.dataset.path() {
            if p.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.dataset = cfg.dataset.with_path(&base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.em().validate()?;
        prox::contraction_exponent(self.beta, self.epsilon, self.h)?;
        if !(self.delta > 0.0) {
            return Err(Error::Config(format!("delta must be positive, got {}", self.delta)));
        }
        if self.max_sinkhorn_iters == 0 {
            return Err(Error::Config("max_sinkhorn_iters must be at least 1".into()));
        }
        if self.n_particles == 0 {
            return Err(Error::Config("n_particles must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn em(&self) -> EmConfig {
        EmConfig {
            h: self.h,
            beta: self.beta,
            noise_scale: self.noise_scale,
        }
    }

    /// SHA-256 of the configuration with `iterations` cleared, so that a run
    /// can be extended without invalidating its checkpoint.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.iterations = 0;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Sets a sweepable hyperparameter.
    pub fn set_param(&mut self, name: &str, value: f64) -> Result<()> {
        match name {
            "epsilon" => self.epsilon = value,
            "beta" => self.beta = value,
            "N" | "n_particles" => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(Error::Config(format!("particle count must be a positive integer, got {value}")));
                }
                self.n_particles = value as usize;
            }
            other => {
                return Err(Error::Config(format!("cannot sweep {other:?}; expected epsilon, beta or N")));
            }
        }
        Ok(())
    }
}

/// Training and test parts of a run's dataset.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub spec: ModelSpec,
    pub manifest: data::DatasetManifest,
}

pub fn prepare(cfg: &ProxConfig) -> Result<Prepared> {
    let full = cfg.dataset.load()?;
    let idx = data::split_indices(full.len(), &cfg.split)?;
    let manifest = data::manifest(&full, Some((&cfg.split, idx.train.len(), idx.test.len())));
    let spec = ModelSpec {
        variant: cfg.model,
        n_x: full.n_x(),
    };
    spec.validate()?;
    Ok(Prepared {
        train: full.select(&idx.train),
        test: full.select(&idx.test),
        spec,
        manifest,
    })
}

/// Step-level hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub em: EmConfig,
    pub epsilon: f64,
    pub delta: f64,
    pub max_sinkhorn_iters: usize,
}

impl From<&ProxConfig> for StepConfig {
    fn from(cfg: &ProxConfig) -> Self {
        StepConfig {
            em: cfg.em(),
            epsilon: cfg.epsilon,
            delta: cfg.delta,
            max_sinkhorn_iters: cfg.max_sinkhorn_iters,
        }
    }
}

/// One ProxLearn step: potentials at the current samples, drift, Euler–Maruyama
/// move, Gibbs kernel between new and old samples, and the weight update.
pub fn prox_learn_step(
    cloud: &ParticleCloud,
    x: ArrayView2<f64>,
    labels: &Labels,
    spec: &ModelSpec,
    cfg: &StepConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ParticleCloud, ProxDiagnostics)> {
    let k = cloud.step_index + 1;
    step_inner(cloud, x, labels, spec, cfg, rng).map_err(|e| e.at_step(k))
}

fn step_inner(
    cloud: &ParticleCloud,
    x: ArrayView2<f64>,
    labels: &Labels,
    spec: &ModelSpec,
    cfg: &StepConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ParticleCloud, ProxDiagnostics)> {
    cfg.em.validate()?;
    let alpha = prox::contraction_exponent(cfg.em.beta, cfg.epsilon, cfg.em.h)?;
    let (pot, drift) = match (spec.variant, labels) {
        (Variant::BinaryTanh, Labels::Signed(y)) => {
            if cloud.dim() != spec.param_dim() || x.ncols() != spec.n_x {
                return Err(Error::dimension("binary layout", spec.param_dim(), cloud.dim()));
            }
            if x.nrows() == 0 {
                return Err(Error::Input("training set is empty".into()));
            }
            let (v, u, drift) = grad::binary_step_terms(cloud.theta.view(), x, y, cloud.rho.view())?;
            ((v, u), drift)
        }
        _ => {
            let pot = model::build_potentials_lean(cloud, x, labels, spec)?;
            let drift = grad::drift(cloud, x, labels, spec)?.to_matrix();
            ((pot.v, pot.u), drift)
        }
    };
    let moved = em_update_matrix(cloud, &drift, &cfg.em, rng)?;
    let gamma = Kernel::gibbs(moved.theta.view(), cloud.theta.view(), cfg.epsilon)?;
    let log_xi = prox::log_xi_vector(&pot.0, &pot.1, cfg.em.beta)?;
    let z0 = prox::random_z0(cloud.len(), rng);
    let inputs = ProxInputs::from_log_xi(gamma, log_xi, cloud.rho.clone(), alpha)?;
    let (rho, diag) = prox::sinkhorn_fixed_point(&inputs, cfg.delta, cfg.max_sinkhorn_iters, &z0)?;
    Ok((
        ParticleCloud {
            theta: moved.theta,
            rho,
            step_index: cloud.step_index + 1,
        },
        diag,
    ))
}

/// One line of `metrics.csv`. Risks are evaluated on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: u64,
    pub risk_weighted: f64,
    pub risk_unweighted: f64,
    pub sinkhorn_iters: usize,
    pub marginal_residual: f64,
    pub wall_ms: f64,
}

pub const METRICS_HEADER: &str = "iter,risk_weighted,risk_unweighted,sinkhorn_iters,marginal_residual,wall_ms";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:e},{:e},{},{:e},{}",
            self.iter, self.risk_weighted, self.risk_unweighted, self.sinkhorn_iters, self.marginal_residual, self.wall_ms
        )
    }

    pub fn parse_csv(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return None;
        }
        Some(MetricsRow {
            iter: f[0].parse().ok()?,
            risk_weighted: f[1].parse().ok()?,
            risk_unweighted: f[2].parse().ok()?,
            sinkhorn_iters: f[3].parse().ok()?,
            marginal_residual: f[4].parse().ok()?,
            wall_ms: f[5].parse().ok()?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(k, l)| MetricsRow::parse_csv(l).ok_or_else(|| Error::parse(path, format!("bad metrics row {}", k + 2))))
        .collect()
}

/// Quadratic risks of the cloud on a dataset: (weighted, unweighted).
pub fn risks(cloud: &ParticleCloud, ds: &Dataset, spec: &ModelSpec, normalize: bool) -> Result<(f64, f64)> {
    let p = model::feature_matrix(cloud.theta.view(), ds.x.view(), &ds.labels, spec)?;
    let t = ds.labels.targets();
    Ok((model::risk_weighted(p.view(), &cloud.rho, &t, normalize), model::risk_unweighted(p.view(), &t)))
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub cloud: ParticleCloud,
    pub last_row: MetricsRow,
    /// Steps in this invocation whose fixed-point iteration hit the cap.
    pub nonconverged_steps: u64,
    pub resumed_from: Option<u64>,
    pub seconds: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct MetricsLog {
    path: PathBuf,
    out: BufWriter<fs::File>,
}

impl MetricsLog {
    /// Opens `metrics.csv`, keeping only rows up to `keep_until` when resuming.
    fn open(path: &Path, keep_until: Option<u64>) -> Result<Self> {
        let mut body = format!("{METRICS_HEADER}\n");
        if let Some(k) = keep_until {
            if path.exists() {
                for row in read_metrics(path)? {
                    if row.iter <= k {
                        body.push_str(&row.to_csv());
                        body.push('\n');
                    }
                }
            }
        }
        fs::write(path, &body).map_err(|e| Error::io(path, e))?;
        let file = fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    fn push(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv()).map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn checkpoint(dir: &Path, cloud: &ParticleCloud, cfg: &ProxConfig, spec: &ModelSpec, rng: &ChaCha8Rng) -> Result<()> {
    let meta = CheckpointMeta {
        model: spec.describe(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        rng_word_pos: Some(rng.get_word_pos().to_string()),
        config: Some(serde_json::to_value(cfg).expect("config serializes")),
        ..CheckpointMeta::for_cloud(cloud)
    };
    save_checkpoint(cloud, &dir.join("checkpoint"), &meta)
}

/// Runs `cfg.iterations` steps into `out_dir`, resuming from its checkpoint
/// when one with the same configuration hash is present.
pub fn train(cfg: &ProxConfig, out_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let started = Instant::now();
    let data = prepare(cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_json(&out_dir.join("config.json"), cfg)?;
    write_json(&out_dir.join("manifest.json"), &data.manifest)?;

    let p = data.spec.param_dim();
    let ckpt_dir = out_dir.join("checkpoint");
    let (mut cloud, mut rng, resumed_from) = if ckpt_dir.join("meta.json").exists() {
        let (cloud, meta) = load_checkpoint(&ckpt_dir)?;
        if meta.config_hash != cfg.hash() {
            return Err(Error::Config(format!(
                "{} holds a checkpoint of a different configuration; use a fresh output directory",
                out_dir.display()
            )));
        }
        if cloud.dim() != p || cloud.len() != cfg.n_particles {
            return Err(Error::dimension("checkpoint cloud", format!("{} x {p}", cfg.n_particles), format!("{} x {}", cloud.len(), cloud.dim())));
        }
        let pos: u128 = meta
            .rng_word_pos
            .as_deref()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(ckpt_dir.join("meta.json"), "missing random stream position"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_word_pos(pos);
        let k = cloud.step_index;
        (cloud, rng, Some(k))
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let cloud = init_cloud_with(&cfg.init, cfg.n_particles, p, &mut rng)?;
        (cloud, rng, None)
    };

    let mut log = MetricsLog::open(&out_dir.join("metrics.csv"), resumed_from)?;
    let step_cfg = StepConfig::from(cfg);
    let (x, labels) = (data.train.x.view(), &data.train.labels);
    let mut last_row = None;
    if resumed_from.is_none() {
        let (rw, ru) = risks(&cloud, &data.test, &data.spec, cfg.normalize_weights)?;
        let row = MetricsRow {
            iter: 0,
            risk_weighted: rw,
            risk_unweighted: ru,
            sinkhorn_iters: 0,
            marginal_residual: 0.0,
            wall_ms: 0.0,
        };
        log.push(&row)?;
        last_row = Some(row);
    }

    let mut nonconverged = 0;
    while cloud.step_index < cfg.iterations {
        let t0 = Instant::now();
        let (next, diag) = match prox_learn_step(&cloud, x, labels, &data.spec, &step_cfg, &mut rng) {
            Ok(v) => v,
            Err(e) => {
                log.flush()?;
                return Err(e);
            }
        };
        cloud = next;
        if !diag.converged {
            nonconverged += 1;
        }
        let k = cloud.step_index;
        if k % cfg.log_every == 0 || k == cfg.iterations {
            let (rw, ru) = risks(&cloud, &data.test, &data.spec, cfg.normalize_weights)?;
            let row = MetricsRow {
                iter: k,
                risk_weighted: rw,
                risk_unweighted: ru,
                sinkhorn_iters: diag.iterations,
                marginal_residual: diag.marginal_residual,
                wall_ms: if cfg.record_wall_time { t0.elapsed().as_secs_f64() * 1e3 } else { 0.0 },
            };
            log.push(&row)?;
            last_row = Some(row);
        }
        if cfg.checkpoint_every > 0 && k % cfg.checkpoint_every == 0 && k < cfg.iterations {
            log.flush()?;
            checkpoint(out_dir, &cloud, cfg, &data.spec, &rng)?;
        }
    }
    log.flush()?;
    checkpoint(out_dir, &cloud, cfg, &data.spec, &rng)?;

    let last_row = match last_row {
        Some(r) => r,
        None => read_metrics(&out_dir.join("metrics.csv"))?
            .pop()
            .ok_or_else(|| Error::parse(out_dir.join("metrics.csv"), "no rows"))?,
    };
    Ok(TrainSummary {
        run_dir: out_dir.to_path_buf(),
        cloud,
        last_row,
        nonconverged_steps: nonconverged,
        resumed_from,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Accuracy and risks of a trained cloud on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub mode: EstimateMode,
    pub n_test: usize,
    /// Absent for regression targets.
    pub accuracy: Option<f64>,
    pub confusion: Option<Vec<Vec<usize>>>,
    pub label_names: Vec<String>,
    pub risk_weighted: f64,
    pub risk_unweighted: f64,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = format!("dataset          {}\nmode             {:?}\ntest points      {}\n", self.dataset, self.mode, self.n_test);
        if let Some(acc) = self.accuracy {
            s.push_str(&format!("accuracy         {:.4}%\n", 100.0 * acc));
        }
        s.push_str(&format!("risk (weighted)  {:.6e}\nrisk (uniform)   {:.6e}\n", self.risk_weighted, self.risk_unweighted));
        if let Some(conf) = &self.confusion {
            let width = self.label_names.iter().map(|n| n.len()).max().unwrap_or(1).max(6);
            s.push_str(&format!("\nconfusion (rows actual, columns predicted)\n{:>width$}", ""));
            for name in &self.label_names {
                s.push_str(&format!(" {name:>width$}"));
            }
            s.push('\n');
            for (name, row) in self.label_names.iter().zip(conf) {
                s.push_str(&format!("{name:>width$}"));
                for c in row {
                    s.push_str(&format!(" {c:>width$}"));
                }
                s.push('\n');
            }
        }
        s
    }
}

/// Scores `cloud` on `ds`. Classification metrics are reported when the dataset
/// carries class names.
pub fn evaluate(cloud: &ParticleCloud, ds: &Dataset, spec: &ModelSpec, mode: EstimateMode, normalize: bool) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    if cloud.dim() != spec.param_dim() || ds.n_x() != spec.n_x {
        return Err(Error::dimension(
            "checkpoint against dataset",
            format!("p = {}, n_x = {}", cloud.dim(), spec.n_x),
            format!("p = {}, n_x = {}", spec.param_dim(), ds.n_x()),
        ));
    }
    let (rw, ru) = risks(cloud, ds, spec, normalize)?;
    let (accuracy, confusion) = if ds.label_names.is_empty() {
        (None, None)
    } else {
        let pred = model::predict(cloud, ds.x.view(), &ds.labels, spec, mode)?;
        (Some(pred.accuracy), Some(pred.confusion))
    };
    Ok(EvalReport {
        dataset: ds.name.clone(),
        mode,
        n_test: ds.len(),
        accuracy,
        confusion,
        label_names: ds.label_names.clone(),
        risk_weighted: rw,
        risk_unweighted: ru,
    })
}

/// Loads a checkpoint written by [`train`] together with its configuration.
pub fn load_run_checkpoint(dir: &Path) -> Result<(ParticleCloud, ProxConfig)> {
    let (cloud, meta) = load_checkpoint(dir)?;
    let cfg_value = meta
        .config
        .ok_or_else(|| Error::parse(dir.join("meta.json"), "checkpoint carries no configuration"))?;
    let cfg: ProxConfig = serde_json::from_value(cfg_value).map_err(|e| Error::parse(dir.join("meta.json"), e.to_string()))?;
    Ok((cloud, cfg))
}

/// One row of a sweep summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub final_risk_weighted: f64,
    pub final_risk_unweighted: f64,
    pub accuracy: Option<f64>,
    pub seconds: f64,
}

pub const SWEEP_HEADER: &str = "value,final_risk_weighted,final_risk_unweighted,accuracy,runtime_s";

/// Trains and evaluates once per value of `param`, each run in
/// `out_dir/<param>=<value>`, and writes `out_dir/sweep.csv`.
pub fn sweep(cfg: &ProxConfig, param: &str, values: &[f64], out_dir: &Path) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut run_cfg = cfg.clone();
        run_cfg.set_param(param, value)?;
        let summary = train(&run_cfg, &out_dir.join(format!("{param}={value}")))?;
        let data = prepare(&run_cfg)?;
        let report = evaluate(&summary.cloud, &data.test, &data.spec, EstimateMode::Weighted, run_cfg.normalize_weights)?;
        rows.push(SweepRow {
            value,
            final_risk_weighted: summary.last_row.risk_weighted,
            final_risk_unweighted: summary.last_row.risk_unweighted,
            accuracy: report.accuracy,
            seconds: summary.seconds,
        });
    }
    let mut csv = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{:e},{:e},{},{:.3}\n",
            r.value,
            r.final_risk_weighted,
            r.final_risk_unweighted,
            r.accuracy.map(|a| a.to_string()).unwrap_or_default(),
            r.seconds
        ));
    }
    let path = out_dir.join("sweep.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// Trailing moving average; the first `window - 1` entries average what is available.
pub fn trailing_mean(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (k, v) in values.iter().enumerate() {
        acc += v;
        if k >= window {
            acc -= values[k - window];
        }
        out.push(acc / (k + 1).min(window) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{BoxSegment, WeightInit};
    use crate::data::SplitMode;
    use ndarray::{array, Array2};

    pub(crate) fn sinusoid_cfg(n: usize, iterations: u64) -> ProxConfig {
        ProxConfig {
            name: "tiny".into(),
            beta: 0.3,
            h: 1e-4,
            epsilon: 1e-3,
            delta: 1e-3,
            max_sinkhorn_iters: 10,
            n_particles: n,
            seed: 3,
            noise_scale: 1.0,
            iterations,
            log_every: 1,
            checkpoint_every: 0,
            model: Variant::BinaryTanh,
            init: InitSpec {
                support: vec![BoxSegment::new(-1.0, 1.0, 2), BoxSegment::new(-1.5, 1.5, 1)],
                weights: WeightInit::UniformDensity,
                seed: 0,
            },
            dataset: DatasetSource::Sinusoid {
                n_points: 20,
                x_range: (-std::f64::consts::PI, std::f64::consts::PI),
                seed: 1,
            },
            split: SplitSpec {
                mode: SplitMode::Fraction { train_frac: 0.5 },
                shuffle: true,
                seed: 2,
            },
            normalize_weights: false,
            record_wall_time: false,
        }
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = sinusoid_cfg(10, 5);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ProxConfig::from_json(&text).unwrap(), cfg);
        assert!(ProxConfig::from_json("{\"beta\": 1}").is_err());
    }

    #[test]
    fn zero_iterations_rejected() {
        let cfg = sinusoid_cfg(10, 0);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(matches!(train(&cfg, Path::new("/nonexistent")), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_iteration_count() {
        let a = sinusoid_cfg(10, 5);
        let b = sinusoid_cfg(10, 50);
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.beta = 0.4;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn still_cloud_without_features_keeps_everything() {
        // All samples at the origin: P vanishes, so does the drift, and without
        // noise the samples stay put while the weights are a fixed point.
        let theta = Array2::zeros((3, 3));
        let cloud = ParticleCloud::new(theta.clone(), array![1.0, 1.0, 1.0]).unwrap();
        let x = array![[0.5], [-1.0]];
        let labels = Labels::Signed(array![1.0, -1.0]);
        let cfg = StepConfig {
            em: EmConfig { h: 0.1, beta: 1.0, noise_scale: 0.0 },
            epsilon: 0.5,
            delta: 1e-12,
            max_sinkhorn_iters: 1000,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (next, _) = prox_learn_step(&cloud, x.view(), &labels, &ModelSpec::binary(1), &cfg, &mut rng).unwrap();
        assert_eq!(next.theta, theta);
        assert!((next.mass() - 3.0).abs() < 1e-12);
        assert_eq!(next.step_index, 1);
    }

    #[test]
    fn single_particle_keeps_its_weight() {
        let cloud = ParticleCloud::new(array![[0.7, 0.1, -0.4]], array![0.25]).unwrap();
        let x = array![[0.5], [-1.0], [2.0]];
        let labels = Labels::Signed(array![1.0, -1.0, 0.3]);
        let cfg = StepConfig {
            em: EmConfig { h: 1e-2, beta: 1.0, noise_scale: 1.0 },
            epsilon: 0.1,
            delta: 1e-10,
            max_sinkhorn_iters: 100,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut c = cloud;
        for _ in 0..20 {
            c = prox_learn_step(&c, x.view(), &labels, &ModelSpec::binary(1), &cfg, &mut rng).unwrap().0;
            assert!((c.rho[0] - 0.25).abs() <= 1e-15);
        }
    }

    #[test]
    fn trailing_mean_windows() {
        assert_eq!(trailing_mean(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn numerical_failure_reports_step() {
        let cloud = ParticleCloud::new(array![[1.0, 0.0, 0.0]], array![1.0]).unwrap();
        let x = array![[0.5]];
        let labels = Labels::Signed(array![1.0]);
        let cfg = StepConfig {
            em: EmConfig { h: 1e300, beta: 1.0, noise_scale: 0.0 },
            epsilon: 0.1,
            delta: 1e-3,
            max_sinkhorn_iters: 10,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut big = cloud.clone();
        big.theta[[0, 0]] = 1e300;
        let err = prox_learn_step(&big, x.view(), &labels, &ModelSpec::binary(1), &cfg, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Numerical { step: Some(1), .. }), "{err:?}");
    }
}
