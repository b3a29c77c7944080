//! Fixtures shared by the benchmarks.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ncs_robust::{Channel, NetworkModel, StateSpaceModel};

pub fn integrator() -> StateSpaceModel {
    StateSpaceModel::from_transfer_function(&[1.0], &[1.0, 0.0]).expect("proper transfer function")
}

/// Stable `n`-state system with `m` inputs and `p` outputs.
pub fn random_stable(n: usize, m: usize, p: usize, seed: u64) -> StateSpaceModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let shift = r.clone().singular_values().max() + 0.5;
    StateSpaceModel::new(
        r - DMatrix::identity(n, n) * shift,
        DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0)),
        DMatrix::from_fn(p, n, |_, _| rng.random_range(-1.0..1.0)),
        DMatrix::from_fn(p, m, |_, _| rng.random_range(-1.0..1.0)),
    )
    .expect("consistent shapes")
}

/// `P = 1/s`, `C = -1` over two channels of bound 0.2.
pub fn integrator_network() -> NetworkModel {
    NetworkModel::new(
        integrator(),
        StateSpaceModel::scalar_gain(-1.0),
        vec![Channel::new("uplink", 0.2), Channel::new("downlink", 0.2)],
    )
    .expect("valid network")
}
