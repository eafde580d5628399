//! Fixtures shared by the criterion benches.

use ndarray::Array2;
use proxlearn::data::gen_sinusoid;
use proxlearn::{init_cloud, BoxSegment, EmConfig, InitSpec, Labels, ModelSpec, ParticleCloud, StepConfig, Variant, WeightInit};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub cloud: ParticleCloud,
    pub x: Array2<f64>,
    pub labels: Labels,
    pub spec: ModelSpec,
    pub step: StepConfig,
    pub rng: ChaCha8Rng,
}

/// Sinusoid-style binary problem with `n_particles` samples and `n_data` points.
pub fn sinusoid_fixture(n_particles: usize, n_data: usize, epsilon: f64) -> Fixture {
    let ds = gen_sinusoid(n_data, (-std::f64::consts::PI, std::f64::consts::PI), 1).expect("sinusoid");
    let spec = ModelSpec { variant: Variant::BinaryTanh, n_x: 1 };
    let init = InitSpec {
        support: vec![BoxSegment::new(-1.0, 1.0, 2), BoxSegment::new(-1.5, 1.5, 1)],
        weights: WeightInit::UniformDensity,
        seed: 0,
    };
    let cloud = init_cloud(&init, n_particles, spec.param_dim()).expect("cloud");
    Fixture {
        cloud,
        x: ds.x,
        labels: ds.labels,
        spec,
        step: StepConfig {
            em: EmConfig { h: 1e-4, beta: 0.3, noise_scale: 1.0 },
            epsilon,
            delta: 1e-3,
            max_sinkhorn_iters: 10,
        },
        rng: ChaCha8Rng::seed_from_u64(7),
    }
}
