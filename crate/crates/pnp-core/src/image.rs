//! Dense real image tensors and complex k-space images.
//!
//! `ImageTensor` is the one container every other module works with: a
//! (channels, height, width) block of `f64` in row-major (c, h, w) order.
//! All arithmetic is 64-bit; the contraction diagnostics compare quantities
//! near 1 and need the headroom. Entries are finite by construction.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// PSNR returned for an exact match, instead of +inf, so CSV output stays finite.
pub const PSNR_CAP_DB: f64 = 200.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Builds a tensor from row-major (c, h, w) data. Rejects length mismatch
    /// and non-finite entries.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let expected = channels
            .checked_mul(height)
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::InvalidArgument("tensor dimensions overflow".into()))?;
        if data.len() != expected {
            return Err(Error::shape(
                format!("{channels}x{height}x{width} = {expected} entries"),
                format!("{} entries", data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("tensor entries must be finite".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for i in 0..height {
                for j in 0..width {
                    data.push(f(c, i, j));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// (channels, height, width)
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.height + i) * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f64) {
        self.data[(c * self.height + i) * self.width + j] = v;
    }

    /// Zero-padded read: out-of-range coordinates contribute 0.
    #[inline]
    pub fn get_padded(&self, c: usize, i: isize, j: isize) -> f64 {
        if i < 0 || j < 0 || i as usize >= self.height || j as usize >= self.width {
            0.0
        } else {
            self.get(c, i as usize, j as usize)
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination; panics on shape mismatch (engines keep shapes
    /// consistent, guaranteed by construction at the public boundaries).
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(
            self.shape(),
            other.shape(),
            "zip_map requires equal shapes"
        );
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// self + s * other
    pub fn add_scaled(&self, other: &Self, s: f64) -> Self {
        self.zip_map(other, |a, b| a + s * b)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm over all entries.
    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Sum of elementwise products.
    pub fn inner(&self, other: &Self) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::shape(
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }
}

/// 10*log10(peak^2 / MSE) in dB, capped at [`PSNR_CAP_DB`] when MSE = 0.
pub fn psnr(x: &ImageTensor, reference: &ImageTensor, peak: f64) -> Result<f64> {
    if !x.same_shape(reference) {
        return Err(Error::shape(
            format!("{:?}", reference.shape()),
            format!("{:?}", x.shape()),
        ));
    }
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "psnr peak must be positive, got {peak}"
        )));
    }
    let n = x.len() as f64;
    let mse = x
        .as_slice()
        .iter()
        .zip(reference.as_slice())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Complex-valued image, used for k-space data. Row-major (h, w).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage {
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl ComplexImage {
    pub fn new(height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                format!("{height}x{width} = {} entries", height * width),
                format!("{} entries", data.len()),
            ));
        }
        if !data.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
            return Err(Error::Domain("complex entries must be finite".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![Complex64::new(0.0, 0.0); height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: Complex64) {
        self.data[i * self.width + j] = v;
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Re/Im as a 2-channel real tensor (channel 0 = real, channel 1 = imag).
    pub fn to_tensor(&self) -> ImageTensor {
        ImageTensor::from_fn(2, self.height, self.width, |c, i, j| {
            let v = self.get(i, j);
            if c == 0 {
                v.re
            } else {
                v.im
            }
        })
    }

    /// Inverse of [`Self::to_tensor`]; requires exactly 2 channels.
    pub fn from_tensor(t: &ImageTensor) -> Result<Self> {
        if t.channels() != 2 {
            return Err(Error::shape(
                "2 channels (re, im)",
                format!("{} channels", t.channels()),
            ));
        }
        let (h, w) = (t.height(), t.width());
        let mut data = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                data.push(Complex64::new(t.get(0, i, j), t.get(1, i, j)));
            }
        }
        Self::new(h, w, data)
    }
}
