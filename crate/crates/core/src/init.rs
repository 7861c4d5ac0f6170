//! Random initialisers shared by the parameter containers, the model and the
//! test fixtures. Every generator here is a seeded `ChaCha8Rng`, so results
//! are identical across platforms.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Matrix, Tensor3, Vector};

pub type Rng64 = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng64 {
    rand::SeedableRng::seed_from_u64(seed)
}

/// Fan-in scaled uniform draw in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_matrix(rng: &mut Rng64, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Matrix::new(rows, cols, data).expect("finite by construction")
}

pub fn uniform_tensor(rng: &mut Rng64, dims: [usize; 3], fan_in: usize) -> Tensor3 {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor3::from_fn(dims, |_, _, _| rng.random_range(-bound..bound))
}

pub fn normal_vec(rng: &mut Rng64, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

pub fn normal_vector(rng: &mut Rng64, n: usize, std: f64) -> Vector {
    Vector::from(normal_vec(rng, n, std))
}

pub fn normal_matrix(rng: &mut Rng64, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::new(rows, cols, normal_vec(rng, rows * cols, std)).expect("finite")
}

pub fn normal_tensor(rng: &mut Rng64, dims: [usize; 3], std: f64) -> Tensor3 {
    let n = dims.iter().product();
    Tensor3::new(dims, normal_vec(rng, n, std)).expect("finite")
}
