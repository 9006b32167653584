#![allow(dead_code)]

use mg_core::ManifoldSet;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn unit_gaussian(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = gaussian(n, 1, rng);
    let norm = g.norm();
    g / norm
}

/// Random orthogonal `n x n` matrix.
pub fn random_rotation(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian(n, n, &mut rng).qr().q()
}

/// `p` manifolds of `m` points in `n` dimensions. Each manifold is a unit-norm
/// center plus Gaussian spread of total scale `radius` inside a random
/// `dim`-dimensional subspace. Centers share a common direction with weight
/// `sqrt(rho)`.
///
/// The random draws do not depend on `radius` or `rho`, so sweeps over those
/// parameters with one seed differ only in the swept quantity.
pub fn synthetic(p: usize, m: usize, n: usize, dim: usize, radius: f64, rho: f64, seed: u64) -> ManifoldSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shared = unit_gaussian(n, &mut rng);
    let groups = (0..p)
        .map(|mu| {
            let own = unit_gaussian(n, &mut rng);
            let center = &shared * rho.sqrt() + own * (1.0 - rho).sqrt();
            let basis = gaussian(n, dim, &mut rng).qr().q();
            let coef = gaussian(dim, m, &mut rng) * (radius / (dim as f64).sqrt());
            let mut pts = basis * coef;
            for mut col in pts.column_iter_mut() {
                col += &center;
            }
            (format!("m{mu:02}"), pts)
        })
        .collect();
    ManifoldSet::from_points("synthetic", groups).unwrap()
}

/// Single-point manifolds drawn from a standard Gaussian.
pub fn point_manifolds(p: usize, n: usize, seed: u64) -> ManifoldSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = (0..p).map(|mu| (format!("p{mu:02}"), gaussian(n, 1, &mut rng))).collect();
    ManifoldSet::from_points("points", groups).unwrap()
}

/// Gaussian blobs of `m` points around well separated centers.
pub fn blobs(p: usize, m: usize, n: usize, spread: f64, offset: f64, seed: u64) -> ManifoldSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = (0..p)
        .map(|mu| {
            let mut center = DMatrix::zeros(n, 1);
            center[(mu % n, 0)] = offset;
            let mut pts = gaussian(n, m, &mut rng) * spread;
            for mut col in pts.column_iter_mut() {
                col += &center.column(0);
            }
            (format!("c{mu}"), pts)
        })
        .collect();
    ManifoldSet::from_points("blobs", groups).unwrap()
}

pub fn rotate(ms: &ManifoldSet, q: &DMatrix<f64>) -> ManifoldSet {
    ms.map_points(|p| q * p).unwrap()
}

/// Optimal value of the soft-margin SVM dual
/// `max sum(a) - 1/2 a'Qa, 0 <= a <= c, y'a = 0` by enumerating, for every
/// point, whether its weight sits at 0, at `c`, or strictly between. For each
/// pattern the free weights solve the stationarity system; feasible solutions
/// are scored and the best one wins. Only viable for a handful of points.
pub fn brute_force_svm_dual(x: &DMatrix<f64>, y: &[f64], c: f64) -> f64 {
    let n = y.len();
    let q = DMatrix::from_fn(n, n, |i, j| y[i] * y[j] * x.column(i).dot(&x.column(j)));
    let mut best = f64::NEG_INFINITY;
    for code in 0..3usize.pow(n as u32) {
        let mut state = vec![0u8; n];
        let mut k = code;
        for s in state.iter_mut() {
            *s = (k % 3) as u8;
            k /= 3;
        }
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 2).collect();
        let mut a = nalgebra::DVector::<f64>::from_fn(n, |i, _| if state[i] == 1 { c } else { 0.0 });
        if !free.is_empty() {
            // [Q_FF y_F; y_F' 0] [a_F; nu] = [1 - Q_FB a_B; -y_B' a_B]
            let f = free.len();
            let mut kkt = DMatrix::zeros(f + 1, f + 1);
            let mut rhs = nalgebra::DVector::zeros(f + 1);
            for (r, &i) in free.iter().enumerate() {
                for (s, &j) in free.iter().enumerate() {
                    kkt[(r, s)] = q[(i, j)];
                }
                kkt[(r, f)] = y[i];
                kkt[(f, r)] = y[i];
                rhs[r] = 1.0 - (0..n).filter(|&j| state[j] == 1).map(|j| q[(i, j)] * c).sum::<f64>();
            }
            rhs[f] = -(0..n).filter(|&j| state[j] == 1).map(|j| y[j] * c).sum::<f64>();
            let Some(sol) = kkt.lu().solve(&rhs) else { continue };
            if sol.iter().any(|v| !v.is_finite()) {
                continue;
            }
            for (r, &i) in free.iter().enumerate() {
                a[i] = sol[r];
            }
        }
        let feasible = a.iter().all(|&v| v >= -1e-12 && v <= c + 1e-12)
            && y.iter().zip(a.iter()).map(|(yi, ai)| yi * ai).sum::<f64>().abs() < 1e-10;
        if feasible {
            let value = a.sum() - 0.5 * (a.transpose() * &q * &a)[(0, 0)];
            best = best.max(value);
        }
    }
    best
}

/// Number of homogeneously separable labellings of `p` points in general
/// position in `n` dimensions.
pub fn cover_count(p: u64, n: u64) -> u128 {
    let binom = |a: u64, b: u64| -> u128 {
        if b > a {
            return 0;
        }
        (0..b).fold(1u128, |acc, i| acc * (a - i) as u128 / (i + 1) as u128)
    };
    2 * (0..n).map(|k| binom(p - 1, k)).sum::<u128>()
}
