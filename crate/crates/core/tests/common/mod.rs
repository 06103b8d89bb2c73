//! Shared helpers for integration tests.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use parabt::bt::ReducedModel;
use parabt::metrics::{rom_transfer, spectral_norm, FrequencyGrid};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Random stable generalized pair (E, A): Gershgorin-shifted A with a
/// well-conditioned E.
pub fn random_stable_pair(rng: &mut ChaCha8Rng, n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let r = random_matrix(rng, n, n);
    let bound = (0..n)
        .map(|i| (0..n).map(|j| r[(i, j)].abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    let f = &r - DMatrix::identity(n, n) * (bound + 0.5);
    let e = DMatrix::identity(n, n) + random_matrix(rng, n, n) * (0.3 / n as f64);
    let a = &e * &f;
    (e, a)
}

/// Grid-H-infinity distance between two reduced models' transfer functions.
pub fn rom_transfer_distance(a: &ReducedModel, b: &ReducedModel, grid: &FrequencyGrid) -> f64 {
    grid.samples()
        .iter()
        .map(|&omega| {
            let ha = rom_transfer(a, omega).unwrap();
            let hb = rom_transfer(b, omega).unwrap();
            spectral_norm(&(ha - hb))
        })
        .fold(0.0, f64::max)
}

/// Kronecker-vectorization oracle for `E P A^T + A P E^T = -RHS RHS^T`.
/// Independent of the solver implementations.
pub fn kronecker_lyapunov_oracle(
    e: &DMatrix<f64>,
    a: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = e.nrows();
    let mut m = DMatrix::zeros(n * n, n * n);
    // vec(E P A^T) = (A (x) E) vec P, vec(A P E^T) = (E (x) A) vec P.
    for bi in 0..n {
        for bj in 0..n {
            for ii in 0..n {
                for jj in 0..n {
                    m[(bi * n + ii, bj * n + jj)] +=
                        a[(bi, bj)] * e[(ii, jj)] + e[(bi, bj)] * a[(ii, jj)];
                }
            }
        }
    }
    let g = rhs * rhs.transpose();
    let rhs_vec = DMatrix::from_fn(n * n, 1, |k, _| -g[(k % n, k / n)]);
    let sol = m.lu().solve(&rhs_vec).expect("Kronecker system solvable");
    DMatrix::from_fn(n, n, |i, j| sol[(j * n + i, 0)])
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}
