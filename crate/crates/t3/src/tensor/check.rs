//! Central-finite-difference gradient checking.
//!
//! The checker perturbs one leaf tensor coordinate-wise and compares the
//! analytic gradient from `backward()` against `(f(x+e) - f(x-e)) / 2e`.
//! It is the independent oracle for every differentiable op, so it runs at
//! 64-bit precision.

use super::{no_grad, Tensor};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(1e-6);
    (a - n).abs() / denom
}

fn check_coords(
    f: &impl Fn() -> Tensor<f64>,
    x: &Tensor<f64>,
    eps: f64,
    coords: &[usize],
) -> f64 {
    assert!(eps > 0.0, "finite_diff_check: eps must be positive, got {eps}");
    x.zero_grad();
    let loss = f();
    loss.backward();
    let analytic = x
        .grad()
        .expect("finite_diff_check: leaf received no gradient; does f use x?");

    let mut worst = 0.0f64;
    for &i in coords {
        let orig = x.to_vec()[i];
        x.apply_update(|d| d[i] = orig + eps);
        let fp = no_grad(|| f().item());
        x.apply_update(|d| d[i] = orig - eps);
        let fm = no_grad(|| f().item());
        x.apply_update(|d| d[i] = orig);
        let numeric = (fp - fm) / (2.0 * eps);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

/// Check every coordinate of `x`. Returns the worst relative deviation
/// between the analytic and the central-difference gradient.
pub fn finite_diff_check(f: impl Fn() -> Tensor<f64>, x: &Tensor<f64>, eps: f64) -> f64 {
    let coords: Vec<usize> = (0..x.numel()).collect();
    check_coords(&f, x, eps, &coords)
}

/// Check a random subset of coordinates; used on large tensors where the
/// full sweep would cost two forward passes per coordinate.
pub fn finite_diff_check_sampled(
    f: impl Fn() -> Tensor<f64>,
    x: &Tensor<f64>,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> f64 {
    let n = x.numel();
    if n <= max_coords {
        return finite_diff_check(f, x, eps);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<usize> = (0..n).collect();
    coords.shuffle(&mut rng);
    coords.truncate(max_coords);
    check_coords(&f, x, eps, &coords)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_analytic() {
        let x = Tensor::<f64>::from_vec(vec![3.0], &[1]).requires_grad();
        // f = x^2, f'(3) = 6
        let err = finite_diff_check(|| x.mul(&x), &x, 1e-5);
        assert!(err < 1e-8, "rel err {err}");
        assert!((x.grad().unwrap()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn linear_is_machine_precision() {
        let x = Tensor::<f64>::from_vec(vec![1.0, -2.0, 0.5], &[3]).requires_grad();
        let err = finite_diff_check(|| x.scale(4.0).sum_all(), &x, 1e-5);
        assert!(err < 1e-9, "rel err {err}");
    }

    #[test]
    #[should_panic(expected = "eps must be positive")]
    fn rejects_nonpositive_eps() {
        let x = Tensor::<f64>::from_vec(vec![1.0], &[1]).requires_grad();
        let _ = finite_diff_check(|| x.mul(&x), &x, 0.0);
    }
}
