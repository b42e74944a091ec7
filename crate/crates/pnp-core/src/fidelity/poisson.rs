//! Poisson negative log-likelihood, elementwise over count observations y:
//!
//!   l(x; y) = -y ln(x) + x   for y > 0, x > 0
//!           = 0              for y = 0, x >= 0
//!           = +inf           otherwise
//!
//! The prox has a closed form per entry,
//!   0.5 * (x - a + sqrt((x - a)^2 + 4 a y)),
//! which for y = 0 reduces to max(x - a, 0) (the shifted soft floor, i.e. it
//! minimizes a*x + 0.5(x-z)^2 over x >= 0 rather than the flat y = 0 branch
//! of l; both conventions appear above and the closed form wins for prox).
//! The gradient convention sets df/dx_i = 0 at x_i = 0 even where the
//! derivative is undefined.

use super::Fidelity;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Debug, Clone)]
pub struct PoissonFidelity {
    counts: ImageTensor,
}

impl PoissonFidelity {
    /// `counts` must hold nonnegative integers.
    pub fn new(counts: ImageTensor) -> Result<Self> {
        for &y in counts.as_slice() {
            if y < 0.0 || y.fract() != 0.0 {
                return Err(Error::Domain(format!(
                    "Poisson counts must be nonnegative integers, got {y}"
                )));
            }
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &ImageTensor {
        &self.counts
    }

    fn check_shape(&self, x: &ImageTensor) -> Result<()> {
        if !x.same_shape(&self.counts) {
            return Err(Error::shape(
                format!("{:?}", self.counts.shape()),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(())
    }
}

/// Closed-form scalar prox of the Poisson likelihood term.
pub fn poisson_prox_scalar(alpha: f64, x: f64, y: f64) -> f64 {
    0.5 * (x - alpha + ((x - alpha) * (x - alpha) + 4.0 * alpha * y).sqrt())
}

/// Draws count observations y_i ~ Poisson(x_i) for a nonnegative intensity
/// image (peak-1 convention upstream). Deterministic in the seed.
pub fn simulate_counts(x_true: &ImageTensor, seed: crate::rng::RngSeed) -> Result<ImageTensor> {
    use rand_distr::{Distribution, Poisson};
    if x_true.as_slice().iter().any(|&v| v < 0.0) {
        return Err(Error::Domain("intensities must be nonnegative".into()));
    }
    let mut rng = seed.rng();
    let (c, h, w) = x_true.shape();
    let mut data = Vec::with_capacity(x_true.len());
    for &lambda in x_true.as_slice() {
        if lambda > 0.0 {
            let dist = Poisson::new(lambda)
                .map_err(|e| Error::Numerical(format!("poisson sampler: {e}")))?;
            data.push(dist.sample(&mut rng));
        } else {
            data.push(0.0);
        }
    }
    ImageTensor::new(c, h, w, data)
}

impl Fidelity for PoissonFidelity {
    fn eval(&self, x: &ImageTensor) -> f64 {
        if !x.same_shape(&self.counts) {
            return f64::INFINITY;
        }
        let mut acc = 0.0;
        for (&xi, &yi) in x.as_slice().iter().zip(self.counts.as_slice()) {
            if yi > 0.0 {
                if xi > 0.0 {
                    acc += -yi * xi.ln() + xi;
                } else {
                    return f64::INFINITY;
                }
            } else if xi < 0.0 {
                return f64::INFINITY;
            }
            // y = 0, x >= 0 contributes 0
        }
        acc
    }

    fn grad(&self, x: &ImageTensor) -> Result<ImageTensor> {
        self.check_shape(x)?;
        if x.as_slice().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain(
                "Poisson gradient undefined at negative intensities".into(),
            ));
        }
        Ok(x.zip_map(&self.counts, |xi, yi| {
            if xi == 0.0 {
                0.0
            } else {
                -yi / xi + 1.0
            }
        }))
    }

    fn prox(&self, alpha: f64, z: &ImageTensor) -> Result<ImageTensor> {
        self.check_shape(z)?;
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "Poisson prox needs alpha > 0, got {alpha}"
            )));
        }
        Ok(z.zip_map(&self.counts, |zi, yi| poisson_prox_scalar(alpha, zi, yi)))
    }
}
