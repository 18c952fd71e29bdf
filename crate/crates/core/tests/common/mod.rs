#![allow(dead_code)]

use nested_is::linalg::Matrix;
use nested_is::models::{LikelihoodConvention, LinearGaussianModel, LinearGaussianParams};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let v: Vec<f64> = (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_row_slice(rows, cols, &v).unwrap()
}

/// `LLᵀ/d + floor·I` with a Gaussian `L`.
pub fn spd_matrix(rng: &mut ChaCha8Rng, d: usize, floor: f64) -> Matrix {
    let l = gaussian_matrix(rng, d, d, 1.0);
    let mut m = l.matmul(&l.transpose()).unwrap().scale(1.0 / d as f64);
    for i in 0..d {
        m[(i, i)] += floor;
    }
    m.symmetrize();
    m
}

/// Linear-Gaussian model with dims in `1..=max_dim` and Gaussian entries.
pub fn random_lg_model(rng: &mut ChaCha8Rng, max_dim: usize) -> LinearGaussianModel {
    let d_x = rng.random_range(1..=max_dim);
    let d_z = rng.random_range(1..=max_dim);
    let d_y = rng.random_range(1..=max_dim);
    let scale = rng.random_range(0.1..2.0);
    let noise_floor = rng.random_range(0.01..1.0);
    LinearGaussianModel::new(LinearGaussianParams {
        mu_x: (0..d_x).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        sigma_x: spd_matrix(rng, d_x, 0.05),
        h: gaussian_matrix(rng, d_z, d_x, scale),
        q: spd_matrix(rng, d_z, 0.05),
        a: gaussian_matrix(rng, d_y, d_x, scale),
        b: gaussian_matrix(rng, d_y, d_z, scale),
        r: spd_matrix(rng, d_y, noise_floor),
        convention: LikelihoodConvention::SupNormalized,
    })
    .unwrap()
}

/// Scalar model with all parameters drawn from moderate ranges.
pub fn random_scalar_model(rng: &mut ChaCha8Rng) -> LinearGaussianModel {
    LinearGaussianModel::scalar(
        rng.random_range(-1.0..1.0),
        rng.random_range(0.3..2.0),
        rng.random_range(-1.5..1.5),
        rng.random_range(0.3..2.0),
        rng.random_range(-1.5..1.5),
        rng.random_range(-1.5..1.5),
        rng.random_range(0.3..2.0),
    )
    .unwrap()
}

/// Uniform point in the Euclidean ball of radius `r` around `centre`.
pub fn point_in_ball(rng: &mut ChaCha8Rng, centre: &[f64], r: f64) -> Vec<f64> {
    let d = centre.len();
    let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let radius = r * rng.random::<f64>().powf(1.0 / d as f64);
    centre.iter().zip(&dir).map(|(c, v)| c + radius * v / n).collect()
}
