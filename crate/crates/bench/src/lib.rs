//! Seeded fixtures shared by the kernel benchmarks.

use llqrsam_core::landscapes::{Activation, LayeredNet, LossKind, TwoScaleQuadratic};
use llqrsam_core::{ParamVector, SymMatrix};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random symmetric matrix with entries in `[-1, 1]`.
pub fn random_symmetric(dim: usize, seed: u64) -> SymMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    SymMatrix::new((&m + m.transpose()) * 0.5).expect("symmetrized matrix")
}

pub fn random_quadratic(dim: usize, seed: u64) -> TwoScaleQuadratic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TwoScaleQuadratic::random(dim, &mut rng).expect("random two-scale quadratic")
}

/// Tanh MLP with a squared loss and uniform parameters in `[-1, 1]`.
pub fn random_mlp(widths: &[usize], seed: u64) -> (LayeredNet, ParamVector) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DVector::from_fn(widths[0], |_, _| rng.random_range(-1.0..1.0));
    let y = DVector::from_fn(widths[widths.len() - 1], |_, _| rng.random_range(-1.0..1.0));
    let net = LayeredNet::mlp(widths, Activation::Tanh, true, x, y, LossKind::Squared).expect("valid widths");
    let theta = DVector::from_fn(net.param_len(), |_, _| rng.random_range(-1.0..1.0));
    (net, theta)
}
