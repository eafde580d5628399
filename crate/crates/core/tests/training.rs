use std::fs;

use ndarray::array;
use proxlearn::trainer::{self, prox_learn_step};
use proxlearn::{dynamics, grad, model, prox, Kernel, Labels, ModelSpec, ParticleCloud, ProxConfig, ProxInputs, StepConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(iterations: u64) -> ProxConfig {
    ProxConfig::from_json(&format!(
        r#"{{
          "beta": 0.3, "h": 1e-3, "epsilon": 0.05, "delta": 1e-6, "max_sinkhorn_iters": 200,
          "n_particles": 40, "seed": 7, "iterations": {iterations}, "log_every": 5, "checkpoint_every": 10,
          "model": {{ "kind": "binary_tanh" }},
          "init": {{ "support": [ {{ "lo": -1.0, "hi": 1.0, "dims": 2 }}, {{ "lo": -1.5, "hi": 1.5 }} ],
                     "weights": {{ "mode": "uniform_density" }} }},
          "dataset": {{ "kind": "sinusoid", "n_points": 30, "x_range": [-3.0, 3.0], "seed": 3 }},
          "split": {{ "mode": "fraction", "train_frac": 0.5, "shuffle": true, "seed": 4 }},
          "normalize_weights": false
        }}"#
    ))
    .unwrap()
}

#[test]
fn same_seed_gives_identical_files() {
    let cfg = small_config(25);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = trainer::train(&cfg, a.path()).unwrap();
    let rb = trainer::train(&cfg, b.path()).unwrap();
    assert_eq!(ra.cloud, rb.cloud);
    for f in ["metrics.csv", "checkpoint/theta.csv", "checkpoint/rho.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn different_seeds_differ() {
    let cfg = small_config(5);
    let mut other = cfg.clone();
    other.seed += 1;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = trainer::train(&cfg, a.path()).unwrap();
    let rb = trainer::train(&other, b.path()).unwrap();
    assert_ne!(ra.cloud.theta, rb.cloud.theta);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let full = tempfile::tempdir().unwrap();
    let straight = trainer::train(&small_config(40), full.path()).unwrap();

    let parts = tempfile::tempdir().unwrap();
    let first = trainer::train(&small_config(20), parts.path()).unwrap();
    assert_eq!(first.resumed_from, None);
    let second = trainer::train(&small_config(40), parts.path()).unwrap();
    assert_eq!(second.resumed_from, Some(20));

    assert_eq!(second.cloud, straight.cloud);
    assert_eq!(
        fs::read_to_string(parts.path().join("metrics.csv")).unwrap(),
        fs::read_to_string(full.path().join("metrics.csv")).unwrap()
    );
}

#[test]
fn resume_drops_rows_logged_after_the_checkpoint() {
    let full = tempfile::tempdir().unwrap();
    trainer::train(&small_config(30), full.path()).unwrap();

    let parts = tempfile::tempdir().unwrap();
    trainer::train(&small_config(20), parts.path()).unwrap();
    let metrics = parts.path().join("metrics.csv");
    let mut text = fs::read_to_string(&metrics).unwrap();
    text.push_str("25,1e0,1e0,1,0e0,0\n");
    fs::write(&metrics, text).unwrap();
    trainer::train(&small_config(30), parts.path()).unwrap();
    assert_eq!(fs::read_to_string(&metrics).unwrap(), fs::read_to_string(full.path().join("metrics.csv")).unwrap());
}

#[test]
fn checkpoint_of_other_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    trainer::train(&small_config(5), dir.path()).unwrap();
    let mut other = small_config(10);
    other.beta = 0.4;
    let err = trainer::train(&other, dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), proxlearn::Error::Config(String::new()).exit_code());
}

#[test]
fn training_conserves_mass() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(30);
    let out = trainer::train(&cfg, dir.path()).unwrap();
    let expected = cfg.n_particles as f64 / 12.0;
    assert!((out.cloud.mass() - expected).abs() <= 1e-10 * expected);
}

#[test]
fn single_particle_weight_never_changes() {
    let mut cfg = small_config(15);
    cfg.n_particles = 1;
    let dir = tempfile::tempdir().unwrap();
    let out = trainer::train(&cfg, dir.path()).unwrap();
    assert!((out.cloud.rho[0] - 1.0 / 12.0).abs() <= 1e-15);
}

/// A full step against the same step assembled from the module-level pieces,
/// with potentials and drift taken from the separate (non-fused) code paths.
#[test]
fn step_matches_composition_of_modules() {
    let theta = array![[0.8, 0.1, -0.4, 0.3], [1.1, -0.2, 0.5, 0.9], [0.95, 0.05, 0.2, -0.7]];
    let rho = array![0.4, 1.3, 0.7];
    let cloud = ParticleCloud::new(theta, rho).unwrap();
    let x = array![[0.3, -0.5], [-0.9, 0.1], [0.6, 0.8], [0.0, -0.2]];
    let labels = Labels::Signed(array![1.0, -1.0, 1.0, -1.0]);
    let spec = ModelSpec::binary(2);
    let cfg = StepConfig {
        em: proxlearn::EmConfig { h: 1e-2, beta: 0.8, noise_scale: 1.0 },
        epsilon: 0.5,
        delta: 1e-12,
        max_sinkhorn_iters: 10_000,
    };

    let (stepped, _) = prox_learn_step(&cloud, x.view(), &labels, &spec, &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pot = model::build_potentials(&cloud, x.view(), &labels, &spec).unwrap();
    let d = grad::drift(&cloud, x.view(), &labels, &spec).unwrap();
    let moved = dynamics::em_update(&cloud, &d, &cfg.em, &mut rng).unwrap();
    let c = prox::cost_matrix(moved.theta.view(), cloud.theta.view()).unwrap();
    let gamma = Kernel::from_dense(prox::gibbs_kernel(c.view(), cfg.epsilon).unwrap().view());
    let xi = prox::xi_vector(&pot.v, &pot.u, cfg.em.beta).unwrap();
    let alpha = prox::contraction_exponent(cfg.em.beta, cfg.epsilon, cfg.em.h).unwrap();
    let z0 = prox::random_z0(3, &mut rng);
    let inputs = ProxInputs::new(gamma, &xi, cloud.rho.clone(), alpha).unwrap();
    let (rho_next, _) = prox::sinkhorn_fixed_point(&inputs, cfg.delta, cfg.max_sinkhorn_iters, &z0).unwrap();

    for (a, b) in stepped.theta.iter().zip(moved.theta.iter()) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
    let err = (&stepped.rho - &rho_next).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
    assert!(err <= 1e-6 * rho_next.iter().fold(0.0f64, |m, v| m.max(*v)), "{err}");
    assert_eq!(stepped.step_index, 1);
}

#[test]
fn multiclass_run_keeps_weights_positive() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("digits.data");
    let mut text = String::new();
    for i in 0..24 {
        let pixels: Vec<String> = (0..256).map(|j| if (i * 7 + j * 3) % 5 < 2 { "1.0000" } else { "0.0000" }.to_string()).collect();
        let onehot: Vec<&str> = (0..10).map(|c| if c == i % 10 { "1" } else { "0" }).collect();
        text.push_str(&format!("{} {}\n", pixels.join(" "), onehot.join(" ")));
    }
    fs::write(&csv, text).unwrap();
    let cfg = ProxConfig::from_json(&format!(
        r#"{{
          "beta": 0.5, "h": 1e-3, "epsilon": 10.0, "delta": 1e-3, "max_sinkhorn_iters": 300,
          "n_particles": 5, "seed": 0, "noise_scale": 0.01, "iterations": 3, "log_every": 1,
          "model": {{ "kind": "multi_softmax", "classes": 10 }},
          "init": {{ "support": [ {{ "lo": -1.0, "hi": 1.0, "dims": 2560 }} ], "weights": {{ "mode": "constant", "value": 1.0 }} }},
          "dataset": {{ "kind": "semeion", "path": {:?} }},
          "split": {{ "mode": "head_count", "n_train": 16 }}
        }}"#,
        csv
    ))
    .unwrap();
    let out = trainer::train(&cfg, &dir.path().join("run")).unwrap();
    assert!(out.cloud.rho.iter().all(|&r| r > 0.0));
    assert!((out.cloud.rho.sum() - 5.0).abs() <= 1e-10 * 5.0);
    let rows = trainer::read_metrics(&dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.iter).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
}
