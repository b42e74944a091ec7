//! Independent numerical oracles used to validate the closed-form and
//! Newton-based operators: derivative-free golden-section minimization (with
//! a shifted second stage that sidesteps the sqrt(eps) value-noise floor),
//! central finite differences for gradients, gradient descent on the prox
//! objective, and random-perturbation optimality probes.
//!
//! Nothing here shares code with the implementations it checks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::fidelity::Fidelity;
use crate::image::ImageTensor;
use crate::rng::RngSeed;

const INV_PHI: f64 = 0.618_033_988_749_894_9; // (sqrt(5) - 1) / 2

/// Golden-section search for the minimizer of a unimodal scalar function on
/// [lo, hi]; stops when the bracket is narrower than `tol`.
pub fn golden_section_min(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    let mut a = lo;
    let mut b = hi;
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while b - a > tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        }
    }
    0.5 * (a + b)
}

/// Scalar Poisson prox oracle: minimizes alpha*l(x; y) + 0.5 (x - z)^2 by
/// golden section. Stage one localizes to ~1e-6 on the raw objective; stage
/// two re-minimizes the objective *shifted* around the stage-one point, which
/// removes the catastrophic cancellation and localizes to ~1e-11. At y = 0 the
/// likelihood is the linear branch x (matching the closed-form prox).
pub fn poisson_prox_oracle(alpha: f64, z: f64, y: f64) -> f64 {
    let hi = z.abs() + alpha + 2.0 * (alpha * y).sqrt() + y + 1.0;
    let raw = |x: f64| {
        let ell = if y > 0.0 {
            if x > 0.0 {
                -y * x.ln() + x
            } else {
                f64::INFINITY
            }
        } else {
            x
        };
        alpha * ell + 0.5 * (x - z) * (x - z)
    };
    let x0 = golden_section_min(raw, 0.0, hi, 1e-6);

    // shifted objective: alpha*(-y ln(x/x0) + (x - x0)) + 0.5((x-z)^2 - (x0-z)^2)
    let lo2 = (x0 - 1e-4).max(0.0);
    let hi2 = (x0 + 1e-4).min(hi);
    let shifted = |x: f64| {
        let d = x - x0;
        let ell_diff = if y > 0.0 {
            if x > 0.0 {
                -y * (d / x0).ln_1p() + d
            } else {
                f64::INFINITY
            }
        } else {
            d
        };
        alpha * ell_diff + 0.5 * (x + x0 - 2.0 * z) * d
    };
    golden_section_min(shifted, lo2, hi2, 1e-12)
}

/// Scalar single-photon prox oracle, same two-stage scheme. The shifted log
/// term ln(1 - e^{-a x}) - ln(1 - e^{-a x0}) is computed cancellation-free as
/// ln1p(e^{-a x0} * (-expm1(-a d)) / (1 - e^{-a x0})).
pub fn qis_prox_oracle(alpha: f64, a: f64, k0: f64, k1: f64, z: f64) -> f64 {
    let hi = z.abs() + alpha * a * (k0 + k1) + 10.0 / a + 1.0;
    let raw = |x: f64| {
        let f = if k1 > 0.0 {
            if x > 0.0 {
                k0 * a * x - k1 * (-(-a * x).exp_m1()).ln()
            } else {
                f64::INFINITY
            }
        } else {
            k0 * a * x.max(0.0) + if x < 0.0 { f64::INFINITY } else { 0.0 }
        };
        alpha * f + 0.5 * (x - z) * (x - z)
    };
    let x0 = golden_section_min(raw, 0.0, hi, 1e-6);

    let lo2 = (x0 - 1e-4).max(0.0);
    let hi2 = (x0 + 1e-4).min(hi);
    let e0 = -(-a * x0).exp_m1(); // 1 - e^{-a x0}
    let shifted = |x: f64| {
        let d = x - x0;
        let f_diff = if k1 > 0.0 {
            if x > 0.0 && e0 > 0.0 {
                let log_diff = ((-a * x0).exp() * (-(-a * d).exp_m1()) / e0).ln_1p();
                k0 * a * d - k1 * log_diff
            } else {
                f64::INFINITY
            }
        } else {
            k0 * a * d
        };
        alpha * f_diff + 0.5 * (x + x0 - 2.0 * z) * d
    };
    golden_section_min(shifted, lo2, hi2, 1e-12)
}

/// alpha * f(x) + 0.5 ||x - z||^2
pub fn prox_objective(f: &dyn Fidelity, alpha: f64, x: &ImageTensor, z: &ImageTensor) -> f64 {
    let d = x.sub(z).norm2();
    alpha * f.eval(x) + 0.5 * d * d
}

/// Iterative prox oracle: gradient descent on the prox objective with the
/// conservative step 1/(alpha*L + 1). Converges linearly for any convex f
/// with L-Lipschitz gradient; used where no scalar decomposition exists.
pub fn gradient_descent_prox(
    f: &dyn Fidelity,
    alpha: f64,
    z: &ImageTensor,
    max_iter: usize,
    grad_tol: f64,
) -> Result<ImageTensor> {
    let lip = alpha * f.lip_grad().unwrap_or(1.0) + 1.0;
    let step = 1.0 / lip;
    let mut x = z.clone();
    for _ in 0..max_iter {
        let g = f.grad(&x)?.scale(alpha).add(&x.sub(z));
        if g.norm2() <= grad_tol {
            break;
        }
        x = x.add_scaled(&g, -step);
    }
    Ok(x)
}

/// Max relative error between `f.grad` and central finite differences of
/// `f.eval` over all coordinates (step per the gradient-check convention).
pub fn gradient_fd_error(f: &dyn Fidelity, x: &ImageTensor, step: f64) -> Result<f64> {
    let g = f.grad(x)?;
    let mut worst: f64 = 0.0;
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.as_slice()[i];
        xp.as_mut_slice()[i] = orig + step;
        let fp = f.eval(&xp);
        xp.as_mut_slice()[i] = orig - step;
        let fm = f.eval(&xp);
        xp.as_mut_slice()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Domain(
                "finite-difference probe left the domain".into(),
            ));
        }
        let fd = (fp - fm) / (2.0 * step);
        let gi = g.as_slice()[i];
        let rel = (fd - gi).abs() / gi.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Verifies prox optimality directly: the prox output must achieve an
/// objective no greater than `trials` random perturbations of itself.
/// Returns the worst (most negative) objective margin found.
pub fn perturbation_margin(
    f: &dyn Fidelity,
    alpha: f64,
    z: &ImageTensor,
    prox_out: &ImageTensor,
    trials: usize,
    seed: RngSeed,
) -> f64 {
    let base = prox_objective(f, alpha, prox_out, z);
    let mut rng = seed.rng();
    let (c, h, w) = prox_out.shape();
    let mut worst = f64::INFINITY;
    for t in 0..trials {
        let scale = 10f64.powi(-((t % 6) as i32)); // spans 1 .. 1e-5
        let noise = ImageTensor::from_fn(c, h, w, |_, _, _| {
            scale * crate::rng::normal(&mut rng)
        });
        let candidate = prox_out.add(&noise);
        let val = prox_objective(f, alpha, &candidate, z);
        if val.is_finite() {
            worst = worst.min(val - base);
        }
    }
    worst
}

/// Deterministic pseudo-random scalar Poisson prox cases (alpha, z, y).
pub fn random_poisson_cases(n: usize, seed: RngSeed) -> Vec<(f64, f64, f64)> {
    let mut rng = seed.rng();
    (0..n)
        .map(|_| {
            let alpha = [0.1, 1.0, 10.0][rng.gen_range(0..3)];
            let z = rng.gen_range(-2.0..4.0);
            let y = rng.gen_range(0..7) as f64;
            (alpha, z, y)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_section_finds_parabola_vertex() {
        let x = golden_section_min(|x| (x - 1.25) * (x - 1.25), -4.0, 6.0, 1e-10);
        assert!((x - 1.25).abs() < 1e-7);
    }

    #[test]
    fn poisson_oracle_matches_hand_case() {
        // argmin -ln x + x + 0.5 x^2 = (sqrt(5) - 1) / 2
        let x = poisson_prox_oracle(1.0, 0.0, 1.0);
        assert!((x - (5.0f64.sqrt() - 1.0) / 2.0).abs() < 1e-10, "got {x}");
    }

    #[test]
    fn poisson_oracle_zero_count_branch() {
        // minimizes alpha*x + 0.5 (x - z)^2 over x >= 0
        let x = poisson_prox_oracle(1.0, 3.0, 0.0);
        assert!((x - 2.0).abs() < 1e-10, "got {x}");
        let x = poisson_prox_oracle(1.0, 0.5, 0.0);
        assert!(x.abs() < 1e-8, "got {x}");
    }
}
