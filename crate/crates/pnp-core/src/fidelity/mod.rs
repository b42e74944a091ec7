//! Data-fidelity terms f: value, gradient, proximal map, and convexity
//! constants where known.
//!
//! `mu()`/`lip_grad()` returning `None` means "unknown"; theory-bound code
//! must refuse to compute bounds in that case rather than guess. A returned
//! `Some(0.0)` means the constant is known to be zero (e.g. undersampled
//! k-space), which the theory code also treats as out of contract.

mod mri;
mod poisson;
mod qis;
mod quadratic;

pub use mri::{Fft2, MriFidelity, MriProblem};
pub use poisson::{poisson_prox_scalar, simulate_counts, PoissonFidelity};
pub use qis::{qis_pixel_grad, qis_prox_scalar, random_qis_cases, QisFidelity, QisObservation};
pub use quadratic::QuadraticFidelity;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::RngSeed;

pub trait Fidelity {
    /// f(x); may be +inf outside the domain.
    fn eval(&self, x: &ImageTensor) -> f64;

    /// Gradient of f at x; errors on domain violations.
    fn grad(&self, x: &ImageTensor) -> Result<ImageTensor>;

    /// Prox_{alpha f}(z) = argmin alpha f(x) + 0.5 ||x - z||^2.
    fn prox(&self, alpha: f64, z: &ImageTensor) -> Result<ImageTensor>;

    /// Strong-convexity constant when known.
    fn mu(&self) -> Option<f64> {
        None
    }

    /// Lipschitz constant of the gradient when known.
    fn lip_grad(&self) -> Option<f64> {
        None
    }
}

/// Boolean k-space sampling grid, row-major (h, w).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                format!("{height}x{width} = {} cells", height * width),
                format!("{} cells", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.width + j]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Fraction of sampled cells.
    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn is_full(&self) -> bool {
        self.data.iter().all(|&b| b)
    }
}

/// Uniform random sampling mask without replacement: round(rate*h*w) cells,
/// the DC cell (0,0) always among them. Deterministic in the seed.
pub fn random_mask(height: usize, width: usize, rate: f64, seed: RngSeed) -> Result<Mask> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask rate must be in (0, 1], got {rate}"
        )));
    }
    let total = height * width;
    if total == 0 {
        return Err(Error::InvalidArgument("empty mask grid".into()));
    }
    let target = ((rate * total as f64).round() as usize).clamp(1, total);
    let mut data = vec![false; total];
    data[0] = true; // DC
    if target > 1 {
        let mut rng = seed.rng();
        // sample target-1 cells from the non-DC positions
        for idx in sample(&mut rng, total - 1, target - 1) {
            data[idx + 1] = true;
        }
    }
    Mask::new(height, width, data)
}
