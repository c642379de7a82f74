//! Positive random-feature approximation of the exponential attention
//! kernel.
//!
//! With projection rows `omega_l` drawn i.i.d. standard normal and held
//! fixed, `psi(x)_l = exp(omega_l . x - |x|^2 / 2) / sqrt(d_k)` satisfies
//! `E[psi(x) . psi(y)] = exp(x . y)`, so attention numerators and
//! normalizers can be computed from feature sums without materializing the
//! coefficient tensor. All entries are strictly positive, which keeps every
//! normalizer positive on nonempty support.

use crate::rng::Rng;
use crate::tensor::math::exp64;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draw a `d_k x d` projection, standard normal, from a seeded stream.
pub fn draw_projection(d_k: usize, d: usize, rng: &mut Rng) -> Vec<f64> {
    let mut omega = vec![0.0; d_k * d];
    rng.fill_normal(&mut omega, 1.0);
    omega
}

/// `psi(x)` for one vector of width `d = x.len()`; `omega` is `d_k x d`.
pub fn performer_features(x: &[f64], omega: &[f64], d_k: usize) -> Vec<f64> {
    let d = x.len();
    debug_assert_eq!(omega.len(), d_k * d);
    let half_norm = 0.5 * dot(x, x);
    let scale = 1.0 / (d_k as f64).sqrt();
    (0..d_k)
        .map(|l| exp64(dot(&omega[l * d..(l + 1) * d], x) - half_norm) * scale)
        .collect()
}

/// Write `psi(x)` into `out` (length `d_k`).
pub fn performer_features_into(x: &[f64], omega: &[f64], d_k: usize, out: &mut [f64]) {
    let d = x.len();
    let half_norm = 0.5 * dot(x, x);
    let scale = 1.0 / (d_k as f64).sqrt();
    for (l, o) in out.iter_mut().enumerate() {
        *o = exp64(dot(&omega[l * d..(l + 1) * d], x) - half_norm) * scale;
    }
    debug_assert_eq!(out.len(), d_k);
}

/// Chain rule through `psi`: accumulate `d loss / d x` into `grad_x` given
/// `d loss / d psi`. Uses `d psi_l / d x = psi_l (omega_l - x)`.
pub fn performer_backward(
    x: &[f64],
    psi: &[f64],
    grad_psi: &[f64],
    omega: &[f64],
    grad_x: &mut [f64],
) {
    let d = x.len();
    let mut weight_sum = 0.0;
    for (l, (&p, &gp)) in psi.iter().zip(grad_psi).enumerate() {
        let w = p * gp;
        if w == 0.0 {
            continue;
        }
        weight_sum += w;
        let row = &omega[l * d..(l + 1) * d];
        for (g, &o) in grad_x.iter_mut().zip(row) {
            *g += w * o;
        }
    }
    for (g, &xv) in grad_x.iter_mut().zip(x) {
        *g -= weight_sum * xv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_gives_constant_features() {
        let d_k = 16;
        let mut rng = Rng::new(5);
        let omega = draw_projection(d_k, 3, &mut rng);
        let psi = performer_features(&[0.0; 3], &omega, d_k);
        for v in psi {
            assert!((v - 1.0 / (d_k as f64).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn features_are_positive() {
        let mut rng = Rng::new(7);
        let omega = draw_projection(32, 4, &mut rng);
        for _ in 0..50 {
            let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let y: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let px = performer_features(&x, &omega, 32);
            let py = performer_features(&y, &omega, 32);
            assert!(px.iter().all(|&v| v > 0.0));
            assert!(dot(&px, &py) > 0.0);
        }
    }

    #[test]
    fn expectation_matches_exponential_kernel() {
        // Monte-Carlo oracle: averaging psi(x).psi(y) over many draws of
        // omega estimates exp(x.y) within a few percent for unit-norm
        // inputs.
        let mut rng = Rng::new(11);
        let x = [0.4, -0.3, 0.5];
        let y = [-0.2, 0.6, 0.1];
        let d_k = 10_000;
        let omega = draw_projection(d_k, 3, &mut rng);
        let px = performer_features(&x, &omega, d_k);
        let py = performer_features(&y, &omega, d_k);
        let estimate = dot(&px, &py);
        let exact = (x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>()).exp();
        assert!(
            (estimate - exact).abs() / exact < 0.05,
            "estimate {estimate} vs {exact}"
        );
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(13);
        let d = 3;
        let d_k = 8;
        let omega = draw_projection(d_k, d, &mut rng);
        let x: Vec<f64> = (0..d).map(|_| rng.normal() * 0.5).collect();
        let gpsi: Vec<f64> = (0..d_k).map(|_| rng.normal()).collect();
        let psi = performer_features(&x, &omega, d_k);
        let mut gx = vec![0.0; d];
        performer_backward(&x, &psi, &gpsi, &omega, &mut gx);
        let f = |x: &[f64]| dot(&performer_features(x, &omega, d_k), &gpsi);
        for i in 0..d {
            let mut xp = x.clone();
            xp[i] += 1e-6;
            let mut xm = x.clone();
            xm[i] -= 1e-6;
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((gx[i] - fd).abs() < 1e-6, "coord {i}: {} vs {fd}", gx[i]);
        }
    }
}
