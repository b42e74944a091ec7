//! Plug-and-play (PnP) image reconstruction: fixed-point engines (FBS, ADMM,
//! Douglas-Rachford), data-fidelity models with closed-form or Newton proximal
//! operators, Lipschitz-controlled denoisers, and the spectral-normalization
//! machinery used to certify them.
//!
//! The crate is organized around a handful of small, explicit value types:
//! [`image::ImageTensor`] for iterates and observations, [`conv::ConvKernel`]
//! for convolution layers, and trait objects [`fidelity::Fidelity`] /
//! [`denoisers::Denoiser`] plugged into the engines in [`pnp`].
//!
//! Contraction theory lives in [`pnp::theory_fbs`] / [`pnp::theory_drs`];
//! empirical counterparts in [`pnp::contraction_stats`] and
//! [`denoisers::estimate_eps`]. The [`oracle`] module holds independent
//! numerical checks (golden-section minimization, finite differences,
//! iterative prox solves) used to validate the closed forms.

pub mod cnn;
pub mod conv;
pub mod denoisers;
pub mod error;
pub mod fidelity;
pub mod image;
pub mod io;
pub mod oracle;
pub mod pnp;
pub mod rng;

pub use error::{Error, Result};
pub use image::{ComplexImage, ImageTensor};
pub use rng::RngSeed;
