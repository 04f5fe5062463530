#![allow(dead_code)]

use gridesc::case_model::{build_params, Dynamics, GridCase};
use gridesc::energy::{EnergyModel, GridModel};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn model(case: GridCase) -> GridModel {
    GridModel::new(build_params(&case, Dynamics::default(), 1.0).unwrap()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform random state: w in (-1, 1), theta in (-0.5, 0.5), V in (0.8, 1.2).
pub fn random_state(m: &GridModel, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let lay = m.layout();
    let mut x = DVector::zeros(m.dim());
    for s in lay.omega_range() {
        x[s] = rng.random_range(-1.0..1.0);
    }
    for s in lay.theta_range() {
        x[s] = rng.random_range(-0.5..0.5);
    }
    for s in lay.volt_range() {
        x[s] = rng.random_range(0.8..1.2);
    }
    x
}
