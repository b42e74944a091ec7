//! Denoisers H and the residual-Lipschitz machinery around them.
//!
//! A denoiser may carry a certified `eps_bound`: an upper bound on the
//! Lipschitz constant of H - I. The bound is metadata, never enforced at
//! apply time; enforcing it is the training-time normalization's job.
//! [`estimate_eps`] measures the empirical residual ratios
//! ||(H-I)(x) - (H-I)(y)|| / ||x - y||, whose maximum lower-bounds the true
//! constant.

use serde::Serialize;

use crate::cnn::{NormMode, SimpleCnnModel};
use crate::conv::{conv_forward, dense_sigma, ConvKernel};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::pnp::IterTrace;

pub trait Denoiser {
    /// Shape-preserving denoising map.
    fn apply(&self, x: &ImageTensor) -> Result<ImageTensor>;

    /// Denoising-strength metadata.
    fn sigma(&self) -> f64 {
        0.0
    }

    /// Certified bound on the Lipschitz constant of H - I, when available.
    fn eps_bound(&self) -> Option<f64> {
        None
    }
}

/// H(x) = x + eps * Q(x) with Q the coordinate reversal of the flattened
/// tensor. Q is a linear isometry, so the residual ratio equals eps exactly
/// on every pair: the equality case of the Lipschitz assumption, which makes
/// theorem-bound checks exact rather than approximate.
#[derive(Debug, Clone)]
pub struct OrthogonalResidualDenoiser {
    eps: f64,
}

impl OrthogonalResidualDenoiser {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "eps must be nonnegative, got {eps}"
            )));
        }
        Ok(Self { eps })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }
}

impl Denoiser for OrthogonalResidualDenoiser {
    fn apply(&self, x: &ImageTensor) -> Result<ImageTensor> {
        let (c, h, w) = x.shape();
        let n = x.len();
        let src = x.as_slice();
        let mut data = Vec::with_capacity(n);
        for (i, &v) in src.iter().enumerate() {
            data.push(v + self.eps * src[n - 1 - i]);
        }
        ImageTensor::new(c, h, w, data)
    }

    fn eps_bound(&self) -> Option<f64> {
        Some(self.eps)
    }
}

/// H = (1 - lambda) I + lambda B with B the 3x3 uniform averaging convolution
/// (zero padding 1), mimicking a classical linear smoother. The residual
/// bound lambda * sigma_max(B - I) is computed once by the dense spectral
/// oracle at the construction shape, so it is exact for that shape.
#[derive(Debug, Clone)]
pub struct BlurBlendDenoiser {
    lambda: f64,
    shape: (usize, usize, usize),
    eps_bound: f64,
    avg: ConvKernel,
}

impl BlurBlendDenoiser {
    pub fn new(lambda: f64, channels: usize, height: usize, width: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be in [0, 1], got {lambda}"
            )));
        }
        let avg = ConvKernel::new(1, 1, 3, 3, vec![1.0 / 9.0; 9])?;
        // B - I as a single-channel kernel; channels are smoothed independently
        let mut residual = avg.clone();
        residual.set(0, 0, 1, 1, 1.0 / 9.0 - 1.0);
        let sigma = dense_sigma(&residual, height, width)?.sigma;
        Ok(Self {
            lambda,
            shape: (channels, height, width),
            eps_bound: lambda * sigma,
            avg,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

impl Denoiser for BlurBlendDenoiser {
    fn apply(&self, x: &ImageTensor) -> Result<ImageTensor> {
        if x.shape() != self.shape {
            return Err(Error::shape(
                format!("{:?}", self.shape),
                format!("{:?}", x.shape()),
            ));
        }
        let (c, h, w) = x.shape();
        let mut out = ImageTensor::zeros(c, h, w);
        for ch in 0..c {
            let plane = ImageTensor::from_fn(1, h, w, |_, i, j| x.get(ch, i, j));
            let blurred = conv_forward(&self.avg, &plane)?;
            for i in 0..h {
                for j in 0..w {
                    let v = (1.0 - self.lambda) * x.get(ch, i, j)
                        + self.lambda * blurred.get(0, i, j);
                    out.set(ch, i, j, v);
                }
            }
        }
        Ok(out)
    }

    fn eps_bound(&self) -> Option<f64> {
        Some(self.eps_bound)
    }
}

/// Residual CNN plugged in as a denoiser: H(y) = y - R(y). Models trained
/// with the operator-level normalization carry the product of per-layer
/// targets as a certified residual bound; unconstrained and reshape-based
/// models carry none.
#[derive(Debug, Clone)]
pub struct CnnDenoiser {
    model: SimpleCnnModel,
    sigma: f64,
}

impl CnnDenoiser {
    pub fn new(model: SimpleCnnModel, sigma: f64) -> Self {
        Self { model, sigma }
    }

    pub fn model(&self) -> &SimpleCnnModel {
        &self.model
    }
}

impl Denoiser for CnnDenoiser {
    fn apply(&self, x: &ImageTensor) -> Result<ImageTensor> {
        let residual = self.model.forward(x)?;
        Ok(x.sub(&residual))
    }

    fn sigma(&self) -> f64 {
        self.sigma
    }

    fn eps_bound(&self) -> Option<f64> {
        match self.model.norm_mode() {
            NormMode::RealSn => Some(self.model.lipschitz_target()),
            _ => None,
        }
    }
}

/// Projects the wrapped denoiser's output onto nonnegative intensities.
/// Used for forward-backward runs on likelihoods whose gradients reject
/// negative pixels. The clamp invalidates the residual certificate, so no
/// bound is reported.
#[derive(Debug, Clone)]
pub struct NonnegativeDenoiser<D: Denoiser> {
    inner: D,
}

impl<D: Denoiser> NonnegativeDenoiser<D> {
    pub fn new(inner: D) -> Self {
        Self { inner }
    }
}

impl<D: Denoiser> Denoiser for NonnegativeDenoiser<D> {
    fn apply(&self, x: &ImageTensor) -> Result<ImageTensor> {
        Ok(self.inner.apply(x)?.map(|v| v.max(0.0)))
    }

    fn sigma(&self) -> f64 {
        self.inner.sigma()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PairScheme {
    IteratesVsLimit,
    RandomPairs,
}

/// Empirical residual-ratio sample.
#[derive(Debug, Clone, Serialize)]
pub struct EpsEstimate {
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    pub pair_scheme: PairScheme,
    /// Degenerate pairs (x = y) skipped.
    pub skipped: usize,
}

/// One residual ratio per pair; the maximum lower-bounds the true epsilon.
pub fn estimate_eps(
    d: &dyn Denoiser,
    pairs: &[(ImageTensor, ImageTensor)],
    scheme: PairScheme,
) -> Result<EpsEstimate> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("estimate_eps needs pairs".into()));
    }
    let mut ratios = Vec::with_capacity(pairs.len());
    let mut skipped = 0usize;
    for (x, y) in pairs {
        let denom = x.sub(y).norm2();
        if denom == 0.0 {
            skipped += 1;
            continue;
        }
        let rx = d.apply(x)?.sub(x);
        let ry = d.apply(y)?.sub(y);
        ratios.push(rx.sub(&ry).norm2() / denom);
    }
    let max_ratio = ratios.iter().copied().fold(0.0f64, f64::max);
    Ok(EpsEstimate {
        ratios,
        max_ratio,
        pair_scheme: scheme,
        skipped,
    })
}

/// Pairs (x^k, x^final) from a converged run's recorded iterates; exactly the
/// iterates-vs-limit sampling used for residual-ratio histograms. Degenerate
/// pairs are dropped.
pub fn iterate_pairs_from_trace(trace: &IterTrace) -> Result<Vec<(ImageTensor, ImageTensor)>> {
    if !trace.converged {
        return Err(Error::InvalidArgument(
            "iterates-vs-limit pairing needs a converged trace; use random pairs instead".into(),
        ));
    }
    let limit = &trace.final_image;
    let mut pairs = Vec::new();
    for (_, snapshot) in &trace.snapshots {
        if snapshot.sub(limit).norm2() > 0.0 {
            pairs.push((snapshot.clone(), limit.clone()));
        }
    }
    Ok(pairs)
}
