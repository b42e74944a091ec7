//! f(x) = 0.5 ||x - b||^2: the 1-strongly-convex test bed with everything in
//! closed form (mu = L = 1).

use super::Fidelity;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Debug, Clone)]
pub struct QuadraticFidelity {
    b: ImageTensor,
}

impl QuadraticFidelity {
    pub fn new(b: ImageTensor) -> Self {
        Self { b }
    }

    pub fn target(&self) -> &ImageTensor {
        &self.b
    }

    fn check_shape(&self, x: &ImageTensor) -> Result<()> {
        if !x.same_shape(&self.b) {
            return Err(Error::shape(
                format!("{:?}", self.b.shape()),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(())
    }
}

impl Fidelity for QuadraticFidelity {
    fn eval(&self, x: &ImageTensor) -> f64 {
        let d = x.sub(&self.b).norm2();
        0.5 * d * d
    }

    fn grad(&self, x: &ImageTensor) -> Result<ImageTensor> {
        self.check_shape(x)?;
        Ok(x.sub(&self.b))
    }

    fn prox(&self, alpha: f64, z: &ImageTensor) -> Result<ImageTensor> {
        self.check_shape(z)?;
        if !(alpha >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "prox step must be nonnegative, got {alpha}"
            )));
        }
        Ok(z.add_scaled(&self.b, alpha).scale(1.0 / (1.0 + alpha)))
    }

    fn mu(&self) -> Option<f64> {
        Some(1.0)
    }

    fn lip_grad(&self) -> Option<f64> {
        Some(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal_image, RngSeed};

    #[test]
    fn prox_at_target_is_target() {
        let b = standard_normal_image(1, 4, 4, &mut RngSeed(1).rng());
        let f = QuadraticFidelity::new(b.clone());
        let p = f.prox(1.0, &b).unwrap();
        assert!(p.sub(&b).norm2() < 1e-15);
    }

    #[test]
    fn grad_vanishes_at_target() {
        let b = standard_normal_image(1, 4, 4, &mut RngSeed(2).rng());
        let f = QuadraticFidelity::new(b.clone());
        assert_eq!(f.grad(&b).unwrap().norm2(), 0.0);
    }

    #[test]
    fn prox_from_zero_halves_doubled_target() {
        let b = ImageTensor::new(1, 2, 2, vec![2.0; 4]).unwrap();
        let f = QuadraticFidelity::new(b);
        let p = f.prox(1.0, &ImageTensor::zeros(1, 2, 2)).unwrap();
        for &v in p.as_slice() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_step_is_exact_affine_contraction() {
        // ||(I - a grad)(x) - (I - a grad)(y)|| = |1 - a| ||x - y||
        let mut rng = RngSeed(3).rng();
        let b = standard_normal_image(1, 4, 4, &mut rng);
        let f = QuadraticFidelity::new(b);
        for alpha in [0.25, 0.5, 1.0, 1.75] {
            let x = standard_normal_image(1, 4, 4, &mut rng);
            let y = standard_normal_image(1, 4, 4, &mut rng);
            let tx = x.sub(&f.grad(&x).unwrap().scale(alpha));
            let ty = y.sub(&f.grad(&y).unwrap().scale(alpha));
            let got = tx.sub(&ty).norm2();
            let want = (1.0 - alpha).abs() * x.sub(&y).norm2();
            assert!((got - want).abs() <= 1e-12 * want.max(1.0));
        }
    }
}
