//! Central finite-difference gradient oracle.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Compares autodiff gradients against central differences on a random
/// subsample of coordinates (at least `min_coords`, capped at the
/// parameter count). Returns the maximum relative error seen.
///
/// Coordinates where both gradients are below 1e-7 in magnitude are
/// treated as matching zeros.
pub fn finite_diff_check<F>(
    loss: F,
    params: &[f64],
    autodiff_grad: &[f64],
    eps: f64,
    min_coords: usize,
    seed: u64,
) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(params.len(), autodiff_grad.len());
    let n = params.len();
    let n_coords = min_coords.max(50).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = sample(&mut rng, n, n_coords);
    let mut work = params.to_vec();
    let mut max_rel = 0.0f64;
    for i in coords {
        let orig = work[i];
        work[i] = orig + eps;
        let up = loss(&work);
        work[i] = orig - eps;
        let down = loss(&work);
        work[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        let ad = autodiff_grad[i];
        let denom = fd.abs().max(ad.abs());
        if denom < 1e-7 {
            continue;
        }
        max_rel = max_rel.max((fd - ad).abs() / denom);
    }
    max_rel
}
