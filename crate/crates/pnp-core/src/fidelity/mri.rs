//! Undersampled k-space fidelity f(x) = 0.5 ||y - M F x||^2 with F the
//! orthonormal (unitary) 2-D DFT and M a diagonal 0/1 sampling mask. The
//! unitary convention makes the gradient 1-Lipschitz and diagonalizes the
//! prox in k-space:
//!
//!   grad = F* M* (M F x - y)
//!   prox(alpha, z) = F*( (F z + alpha M* y) / (1 + alpha m) )   elementwise
//!
//! Complex images are carried through the real engine as 2-channel tensors
//! (channel 0 = real, channel 1 = imaginary); the formulas above act on the
//! complexified view.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{Fidelity, Mask};
use crate::error::{Error, Result};
use crate::image::{ComplexImage, ImageTensor};
use crate::rng::RngSeed;

/// Unitary 2-D DFT at a fixed size, plans cached.
pub struct Fft2 {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    fn transform(&self, img: &ComplexImage, forward: bool) -> ComplexImage {
        let (h, w) = (self.height, self.width);
        let mut data = img.as_slice().to_vec();
        let row = if forward { &self.row_fwd } else { &self.row_inv };
        for r in data.chunks_exact_mut(w) {
            row.process(r);
        }
        let col = if forward { &self.col_fwd } else { &self.col_inv };
        let mut scratch = vec![Complex64::new(0.0, 0.0); h];
        for j in 0..w {
            for i in 0..h {
                scratch[i] = data[i * w + j];
            }
            col.process(&mut scratch);
            for i in 0..h {
                data[i * w + j] = scratch[i];
            }
        }
        let scale = 1.0 / ((h * w) as f64).sqrt();
        for v in &mut data {
            *v *= scale;
        }
        ComplexImage::new(h, w, data).expect("fft output finite")
    }

    pub fn forward(&self, img: &ComplexImage) -> ComplexImage {
        self.transform(img, true)
    }

    pub fn inverse(&self, img: &ComplexImage) -> ComplexImage {
        self.transform(img, false)
    }
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish()
    }
}

/// Measured k-space data on a sampling mask.
#[derive(Debug, Clone)]
pub struct MriProblem {
    mask: Mask,
    y: ComplexImage,
    noise_sigma: f64,
}

impl MriProblem {
    /// `y` entries off the mask are zeroed (they carry no measurement).
    pub fn new(mask: Mask, y: ComplexImage, noise_sigma: f64) -> Result<Self> {
        if mask.height() != y.height() || mask.width() != y.width() {
            return Err(Error::shape(
                format!("{}x{} mask", y.height(), y.width()),
                format!("{}x{} mask", mask.height(), mask.width()),
            ));
        }
        if noise_sigma < 0.0 {
            return Err(Error::InvalidArgument("noise sigma must be >= 0".into()));
        }
        let mut y = y;
        for i in 0..mask.height() {
            for j in 0..mask.width() {
                if !mask.get(i, j) {
                    y.set(i, j, Complex64::new(0.0, 0.0));
                }
            }
        }
        Ok(Self {
            mask,
            y,
            noise_sigma,
        })
    }

    /// y = M F x_true + noise on the mask. Complex noise with total variance
    /// sigma_e^2 per sampled entry (sigma_e/sqrt(2) per real component).
    pub fn simulate(
        x_true: &ComplexImage,
        mask: Mask,
        noise_sigma: f64,
        seed: RngSeed,
    ) -> Result<Self> {
        let fft = Fft2::new(x_true.height(), x_true.width());
        let mut y = fft.forward(x_true);
        let mut rng = seed.rng();
        let s = noise_sigma / 2.0f64.sqrt();
        for i in 0..y.height() {
            for j in 0..y.width() {
                if mask.get(i, j) {
                    let n = Complex64::new(
                        s * crate::rng::normal(&mut rng),
                        s * crate::rng::normal(&mut rng),
                    );
                    let v = y.get(i, j) + n;
                    y.set(i, j, v);
                }
            }
        }
        Self::new(mask, y, noise_sigma)
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn kspace_data(&self) -> &ComplexImage {
        &self.y
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }
}

#[derive(Debug)]
pub struct MriFidelity {
    problem: MriProblem,
    fft: Fft2,
}

impl MriFidelity {
    pub fn new(problem: MriProblem) -> Self {
        let fft = Fft2::new(problem.mask.height(), problem.mask.width());
        Self { problem, fft }
    }

    pub fn problem(&self) -> &MriProblem {
        &self.problem
    }

    /// Zero-filled reconstruction F*(y), the usual initialization.
    pub fn zero_filled(&self) -> ImageTensor {
        self.fft.inverse(&self.problem.y).to_tensor()
    }

    fn to_complex(&self, x: &ImageTensor) -> Result<ComplexImage> {
        let c = ComplexImage::from_tensor(x)?;
        if c.height() != self.problem.mask.height() || c.width() != self.problem.mask.width() {
            return Err(Error::shape(
                format!(
                    "{}x{}",
                    self.problem.mask.height(),
                    self.problem.mask.width()
                ),
                format!("{}x{}", c.height(), c.width()),
            ));
        }
        Ok(c)
    }
}

impl Fidelity for MriFidelity {
    fn eval(&self, x: &ImageTensor) -> f64 {
        let cx = match self.to_complex(x) {
            Ok(c) => c,
            Err(_) => return f64::INFINITY,
        };
        let kx = self.fft.forward(&cx);
        let mask = &self.problem.mask;
        let mut acc = 0.0;
        for i in 0..mask.height() {
            for j in 0..mask.width() {
                if mask.get(i, j) {
                    acc += (kx.get(i, j) - self.problem.y.get(i, j)).norm_sqr();
                }
            }
        }
        0.5 * acc
    }

    fn grad(&self, x: &ImageTensor) -> Result<ImageTensor> {
        let cx = self.to_complex(x)?;
        let mut kx = self.fft.forward(&cx);
        let mask = &self.problem.mask;
        for i in 0..mask.height() {
            for j in 0..mask.width() {
                let v = if mask.get(i, j) {
                    kx.get(i, j) - self.problem.y.get(i, j)
                } else {
                    Complex64::new(0.0, 0.0)
                };
                kx.set(i, j, v);
            }
        }
        Ok(self.fft.inverse(&kx).to_tensor())
    }

    fn prox(&self, alpha: f64, z: &ImageTensor) -> Result<ImageTensor> {
        if !(alpha >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "prox step must be nonnegative, got {alpha}"
            )));
        }
        let cz = self.to_complex(z)?;
        let mut kz = self.fft.forward(&cz);
        let mask = &self.problem.mask;
        for i in 0..mask.height() {
            for j in 0..mask.width() {
                if mask.get(i, j) {
                    let v = (kz.get(i, j) + self.problem.y.get(i, j) * alpha) / (1.0 + alpha);
                    kz.set(i, j, v);
                }
            }
        }
        Ok(self.fft.inverse(&kz).to_tensor())
    }

    fn mu(&self) -> Option<f64> {
        // strongly convex only when fully sampled; zero signals "theorems do
        // not apply" to the theory-bound code
        Some(if self.problem.mask.is_full() { 1.0 } else { 0.0 })
    }

    fn lip_grad(&self) -> Option<f64> {
        Some(1.0)
    }
}
