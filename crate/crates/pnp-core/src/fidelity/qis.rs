//! Single-photon (quanta image sensor) likelihood. Each unit pixel j is
//! oversampled K times with per-subpixel exposure a = alpha_sg/K; with K1_j
//! observed ones and K0_j zeros,
//!
//!   f(x) = sum_j K0_j * a * x_j - K1_j * ln(1 - e^{-a x_j})
//!   df/dx_j = a * (K0_j - K1_j / (e^{a x_j} - 1))
//!
//! The prox has no closed form here; it is computed per pixel by safeguarded
//! Newton on the strictly increasing optimality condition
//! alpha * f_j'(x) + (x - z) = 0 over x > 0, with a bisection fallback when
//! the Newton step leaves the bracket. Pixels with K1_j = 0 have the linear
//! likelihood a*K0*x on x >= 0 and prox max(z - alpha*a*K0, 0).

use rand::Rng;
use rand_distr::{Binomial, Distribution};

use super::Fidelity;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::RngSeed;

/// Per-unit-pixel one/zero counts plus the sensor parameters.
#[derive(Debug, Clone)]
pub struct QisObservation {
    ones: Vec<u32>,
    zeros: Vec<u32>,
    shape: (usize, usize, usize),
    sensor_gain: f64,
    oversample: u32,
}

impl QisObservation {
    pub fn new(
        ones: Vec<u32>,
        zeros: Vec<u32>,
        shape: (usize, usize, usize),
        sensor_gain: f64,
        oversample: u32,
    ) -> Result<Self> {
        let n = shape.0 * shape.1 * shape.2;
        if ones.len() != n || zeros.len() != n {
            return Err(Error::shape(
                format!("{n} unit pixels"),
                format!("{} ones / {} zeros", ones.len(), zeros.len()),
            ));
        }
        if !(sensor_gain > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sensor gain must be positive, got {sensor_gain}"
            )));
        }
        if oversample == 0 {
            return Err(Error::InvalidArgument("oversample must be >= 1".into()));
        }
        for (j, (&k1, &k0)) in ones.iter().zip(&zeros).enumerate() {
            if k0 + k1 != oversample {
                return Err(Error::Domain(format!(
                    "pixel {j}: K0 + K1 = {} != K = {oversample}",
                    k0 + k1
                )));
            }
        }
        Ok(Self {
            ones,
            zeros,
            shape,
            sensor_gain,
            oversample,
        })
    }

    /// Simulates binary observations for a nonnegative ground-truth image:
    /// K1_j ~ Binomial(K, 1 - e^{-a x_j}).
    pub fn simulate(
        x_true: &ImageTensor,
        sensor_gain: f64,
        oversample: u32,
        seed: RngSeed,
    ) -> Result<Self> {
        if x_true.as_slice().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("ground truth must be nonnegative".into()));
        }
        let a = sensor_gain / oversample as f64;
        let mut rng = seed.rng();
        let mut ones = Vec::with_capacity(x_true.len());
        let mut zeros = Vec::with_capacity(x_true.len());
        for &x in x_true.as_slice() {
            let p = -(-a * x).exp_m1();
            let k1 = if p <= 0.0 {
                0
            } else if p >= 1.0 {
                oversample
            } else {
                Binomial::new(oversample as u64, p)
                    .map_err(|e| Error::Numerical(format!("binomial: {e}")))?
                    .sample(&mut rng) as u32
            };
            ones.push(k1);
            zeros.push(oversample - k1);
        }
        Self::new(ones, zeros, x_true.shape(), sensor_gain, oversample)
    }

    pub fn ones(&self) -> &[u32] {
        &self.ones
    }

    pub fn zeros(&self) -> &[u32] {
        &self.zeros
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn sensor_gain(&self) -> f64 {
        self.sensor_gain
    }

    pub fn oversample(&self) -> u32 {
        self.oversample
    }

    /// Ones counts as a float image (for serialization / initialization).
    pub fn ones_image(&self) -> ImageTensor {
        let (c, h, w) = self.shape;
        ImageTensor::new(c, h, w, self.ones.iter().map(|&k| k as f64).collect())
            .expect("counts are finite")
    }
}

#[derive(Debug, Clone)]
pub struct QisFidelity {
    obs: QisObservation,
}

impl QisFidelity {
    pub fn new(obs: QisObservation) -> Self {
        Self { obs }
    }

    pub fn observation(&self) -> &QisObservation {
        &self.obs
    }

    fn check_shape(&self, x: &ImageTensor) -> Result<()> {
        if x.shape() != self.obs.shape {
            return Err(Error::shape(
                format!("{:?}", self.obs.shape),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(())
    }

    fn exposure(&self) -> f64 {
        self.obs.sensor_gain / self.obs.oversample as f64
    }
}

/// Scalar likelihood term: k0*a*x - k1*ln(1 - e^{-a x}).
pub fn qis_pixel_eval(a: f64, k0: f64, k1: f64, x: f64) -> f64 {
    if x < 0.0 {
        return f64::INFINITY;
    }
    if k1 > 0.0 {
        if x == 0.0 {
            return f64::INFINITY;
        }
        k0 * a * x - k1 * (-(-a * x).exp_m1()).ln()
    } else {
        k0 * a * x
    }
}

/// Scalar gradient a*(k0 - k1/(e^{a x} - 1)); caller enforces the domain.
pub fn qis_pixel_grad(a: f64, k0: f64, k1: f64, x: f64) -> f64 {
    let ratio = if k1 > 0.0 {
        k1 / (a * x).exp_m1()
    } else {
        0.0
    };
    a * (k0 - ratio)
}

const NEWTON_TOL: f64 = 1e-13;
const NEWTON_MAX_ITER: usize = 100;

/// Safeguarded Newton on phi(x) = alpha f_j'(x) + x - z over x > 0.
/// phi is strictly increasing (phi' >= 1), tends to -inf at 0+ when k1 > 0,
/// and to +inf for large x, so a sign-change bracket always exists.
pub fn qis_prox_scalar(alpha: f64, a: f64, k0: f64, k1: f64, z: f64) -> Result<f64> {
    if k1 == 0.0 {
        return Ok((z - alpha * a * k0).max(0.0));
    }
    let phi = |x: f64| alpha * qis_pixel_grad(a, k0, k1, x) + x - z;
    // phi'(x) = alpha * a^2 * k1 * e^{ax}/(e^{ax}-1)^2 + 1
    let dphi = |x: f64| {
        let e = (a * x).exp_m1();
        alpha * a * a * k1 * (e + 1.0) / (e * e) + 1.0
    };

    // Bracket the root.
    let mut lo = z.max(1.0).min(1.0);
    let mut guard = 0;
    while phi(lo) > 0.0 {
        lo *= 0.25;
        guard += 1;
        if guard > 2000 || lo < 1e-300 {
            return Err(Error::Numerical(
                "QIS prox: failed to bracket from below".into(),
            ));
        }
    }
    let mut hi = z.max(1.0);
    guard = 0;
    while phi(hi) < 0.0 {
        hi *= 2.0;
        guard += 1;
        if guard > 2000 {
            return Err(Error::Numerical(
                "QIS prox: failed to bracket from above".into(),
            ));
        }
    }

    let mut x = 0.5 * (lo + hi);
    for _ in 0..NEWTON_MAX_ITER {
        let fx = phi(x);
        if fx > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let step = fx / dphi(x);
        let mut next = x - step;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi); // bisection fallback
        }
        if (next - x).abs() <= NEWTON_TOL * x.abs().max(1.0) {
            return Ok(next);
        }
        x = next;
    }
    Err(Error::Numerical(format!(
        "QIS prox Newton did not converge (alpha={alpha}, z={z}, k0={k0}, k1={k1})"
    )))
}

impl Fidelity for QisFidelity {
    fn eval(&self, x: &ImageTensor) -> f64 {
        if x.shape() != self.obs.shape {
            return f64::INFINITY;
        }
        let a = self.exposure();
        let mut acc = 0.0;
        for ((&xi, &k0), &k1) in x
            .as_slice()
            .iter()
            .zip(&self.obs.zeros)
            .zip(&self.obs.ones)
        {
            let v = qis_pixel_eval(a, k0 as f64, k1 as f64, xi);
            if !v.is_finite() {
                return f64::INFINITY;
            }
            acc += v;
        }
        acc
    }

    fn grad(&self, x: &ImageTensor) -> Result<ImageTensor> {
        self.check_shape(x)?;
        let a = self.exposure();
        let mut out = Vec::with_capacity(x.len());
        for ((&xi, &k0), &k1) in x
            .as_slice()
            .iter()
            .zip(&self.obs.zeros)
            .zip(&self.obs.ones)
        {
            if xi < 0.0 || (xi == 0.0 && k1 > 0) {
                return Err(Error::Domain(format!(
                    "QIS gradient undefined at x = {xi} with K1 = {k1}"
                )));
            }
            out.push(qis_pixel_grad(a, k0 as f64, k1 as f64, xi));
        }
        let (c, h, w) = self.obs.shape;
        ImageTensor::new(c, h, w, out)
    }

    fn prox(&self, alpha: f64, z: &ImageTensor) -> Result<ImageTensor> {
        self.check_shape(z)?;
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "QIS prox needs alpha > 0, got {alpha}"
            )));
        }
        let a = self.exposure();
        let mut out = Vec::with_capacity(z.len());
        for ((&zi, &k0), &k1) in z
            .as_slice()
            .iter()
            .zip(&self.obs.zeros)
            .zip(&self.obs.ones)
        {
            out.push(qis_prox_scalar(alpha, a, k0 as f64, k1 as f64, zi)?);
        }
        let (c, h, w) = self.obs.shape;
        ImageTensor::new(c, h, w, out)
    }
}

/// Deterministic pseudo-random scalar prox cases for oracle comparisons.
pub fn random_qis_cases(n: usize, seed: RngSeed) -> Vec<(f64, f64, f64, f64, f64)> {
    let mut rng = seed.rng();
    (0..n)
        .map(|_| {
            let oversample = rng.gen_range(2..=16) as f64;
            let a = rng.gen_range(0.2..2.0);
            let k1 = rng.gen_range(0..=oversample as u32) as f64;
            let k0 = oversample - k1;
            let alpha = [0.1, 1.0, 10.0][rng.gen_range(0..3)];
            let z = rng.gen_range(-1.0..3.0);
            (alpha, a, k0, k1, z)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs_8(k1: u32) -> QisObservation {
        QisObservation::new(vec![k1; 4], vec![8 - k1; 4], (1, 2, 2), 8.0, 8).unwrap()
    }

    #[test]
    fn counts_must_sum_to_oversample() {
        assert!(QisObservation::new(vec![3], vec![4], (1, 1, 1), 8.0, 8).is_err());
    }

    #[test]
    fn all_zeros_case_eval_and_grad() {
        // alpha_sg = K = 8, K0 = 8, K1 = 0, x = 0.5: per-pixel f = 8*0.5*1 = 4, grad = 8
        let f = QisFidelity::new(obs_8(0));
        let x = ImageTensor::new(1, 2, 2, vec![0.5; 4]).unwrap();
        assert!((f.eval(&x) - 16.0).abs() < 1e-12); // 4 pixels x 4.0
        let g = f.grad(&x).unwrap();
        for &v in g.as_slice() {
            assert!((v - 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn all_ones_case_grad_at_ln2() {
        // K0 = 0, K1 = 8, x = ln 2: e^x - 1 = 1, grad = -8
        let f = QisFidelity::new(obs_8(8));
        let x = ImageTensor::new(1, 2, 2, vec![2.0f64.ln(); 4]).unwrap();
        let g = f.grad(&x).unwrap();
        for &v in g.as_slice() {
            assert!((v + 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_domain_errors() {
        let f = QisFidelity::new(obs_8(3));
        let neg = ImageTensor::new(1, 2, 2, vec![0.5, -0.1, 0.5, 0.5]).unwrap();
        assert!(f.grad(&neg).is_err());
        let zero = ImageTensor::new(1, 2, 2, vec![0.5, 0.0, 0.5, 0.5]).unwrap();
        assert!(f.grad(&zero).is_err());
    }

    #[test]
    fn prox_solves_optimality_condition() {
        for (i, (alpha, a, k0, k1, z)) in random_qis_cases(100, RngSeed(7)).iter().enumerate() {
            let x = qis_prox_scalar(*alpha, *a, *k0, *k1, *z).unwrap();
            assert!(x >= 0.0);
            if *k1 > 0.0 {
                let resid = alpha * qis_pixel_grad(*a, *k0, *k1, x) + x - z;
                assert!(resid.abs() < 1e-8, "case {i}: residual {resid}");
            }
        }
    }

    #[test]
    fn prox_zero_ones_closed_form() {
        let x = qis_prox_scalar(1.0, 1.0, 8.0, 0.0, 10.0).unwrap();
        assert!((x - 2.0).abs() < 1e-15);
        let x = qis_prox_scalar(1.0, 1.0, 8.0, 0.0, 3.0).unwrap();
        assert_eq!(x, 0.0);
    }

    #[test]
    fn simulate_is_deterministic_and_consistent() {
        let x = ImageTensor::new(1, 2, 2, vec![0.0, 0.3, 0.7, 1.0]).unwrap();
        let a = QisObservation::simulate(&x, 8.0, 8, RngSeed(9)).unwrap();
        let b = QisObservation::simulate(&x, 8.0, 8, RngSeed(9)).unwrap();
        assert_eq!(a.ones(), b.ones());
        assert_eq!(a.ones()[0], 0, "x = 0 can produce no photons");
    }
}
