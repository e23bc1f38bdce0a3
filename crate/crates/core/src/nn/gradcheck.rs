//! Finite-difference gradient verification helpers (f64).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error with an absolute floor for near-zero pairs.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff < 1e-10 {
        return 0.0;
    }
    diff / a.abs().max(b.abs()).max(1e-8)
}

/// Central finite difference of `f` at `x` along coordinate `i`.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Checks an analytic gradient against central differences on `probes`
/// random coordinates. Returns the worst relative error.
///
/// `f` must be a pure function of the flat input vector (the same vector the
/// analytic gradient is taken with respect to).
pub fn check_gradient(
    f: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    probes: usize,
    seed: u64,
) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let i = rng.gen_range(0..x.len());
        let fd = central_diff(f, x, i, h);
        let err = rel_err(fd, analytic[i]);
        if err > worst {
            worst = err;
        }
    }
    worst
}

/// Default acceptance threshold for gradient checks.
pub const GRAD_TOL: f64 = 1e-4;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x = vec![0.5, -1.2, 3.0];
        let analytic: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert!(check_gradient(&f, &x, &analytic, 3, 0) < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x = vec![1.0, 2.0];
        let wrong = vec![1.0, 1.0];
        assert!(check_gradient(&f, &x, &wrong, 2, 0) > 0.1);
    }
}
