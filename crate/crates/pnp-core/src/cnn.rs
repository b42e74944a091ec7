//! Residual CNN denoiser trained from scratch: forward pass, manual
//! backpropagation for the MSE residual loss, Adam, and per-step spectral
//! normalization (either on the true convolution operator or on the reshaped
//! kernel matrix).
//!
//! The network predicts the noise: R(y) is the residual and y - R(y) the
//! denoised image. Depth-4, 8 hidden channels by default, ReLU between
//! layers, nothing after the last, no pooling or batch norm.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{
    self, conv_adjoint, conv_forward, normalize_kernel, power_step, sigma_from_state, ConvKernel,
    PowerIterState, ReshapeSnState,
};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::RngSeed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    None,
    RealSn,
    ReshapeSn,
}

impl NormMode {
    pub fn token(self) -> &'static str {
        match self {
            NormMode::None => "none",
            NormMode::RealSn => "realSN",
            NormMode::ReshapeSn => "reshapeSN",
        }
    }

    pub fn from_token(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormMode::None),
            "realSN" => Ok(NormMode::RealSn),
            "reshapeSN" => Ok(NormMode::ReshapeSn),
            other => Err(Error::Parse(format!("unknown norm mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: ConvKernel,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimpleCnnModel {
    layers: Vec<ConvLayer>,
    norm_mode: NormMode,
    c_targets: Vec<f64>,
}

impl SimpleCnnModel {
    /// He-style seeded initialization. Layer widths: image_channels -> hidden
    /// -> ... -> hidden -> image_channels, all 3x3.
    pub fn init(
        depth: usize,
        image_channels: usize,
        hidden: usize,
        norm_mode: NormMode,
        c_total: f64,
        seed: RngSeed,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidArgument("depth must be >= 1".into()));
        }
        if !(c_total > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "Lipschitz target must be positive, got {c_total}"
            )));
        }
        let mut rng = seed.rng();
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let c_in = if l == 0 { image_channels } else { hidden };
            let c_out = if l == depth - 1 { image_channels } else { hidden };
            let fan_in = (c_in * 9) as f64;
            let std = (2.0 / fan_in).sqrt();
            let weights: Vec<f64> = (0..c_out * c_in * 9)
                .map(|_| std * crate::rng::normal(&mut rng))
                .collect();
            layers.push(ConvLayer {
                kernel: ConvKernel::new(c_out, c_in, 3, 3, weights)?,
                bias: vec![0.0; c_out],
            });
        }
        let per_layer = c_total.powf(1.0 / depth as f64);
        Ok(Self {
            layers,
            norm_mode,
            c_targets: vec![per_layer; depth],
        })
    }

    pub fn from_parts(
        layers: Vec<ConvLayer>,
        norm_mode: NormMode,
        c_targets: Vec<f64>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one layer".into()));
        }
        if c_targets.len() != layers.len() {
            return Err(Error::shape(
                format!("{} c_targets", layers.len()),
                format!("{}", c_targets.len()),
            ));
        }
        for w in 0..layers.len() {
            if layers[w].bias.len() != layers[w].kernel.c_out() {
                return Err(Error::shape(
                    format!("bias of length {}", layers[w].kernel.c_out()),
                    format!("{}", layers[w].bias.len()),
                ));
            }
            if w > 0 && layers[w].kernel.c_in() != layers[w - 1].kernel.c_out() {
                return Err(Error::shape(
                    format!("layer {w} c_in = previous c_out {}", layers[w - 1].kernel.c_out()),
                    format!("{}", layers[w].kernel.c_in()),
                ));
            }
        }
        if layers[0].kernel.c_in() != layers[layers.len() - 1].kernel.c_out() {
            return Err(Error::InvalidArgument(
                "first c_in must equal last c_out (residual shape)".into(),
            ));
        }
        if c_targets.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::InvalidArgument("c_targets must be positive".into()));
        }
        Ok(Self {
            layers,
            norm_mode,
            c_targets,
        })
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn image_channels(&self) -> usize {
        self.layers[0].kernel.c_in()
    }

    pub fn hidden_channels(&self) -> usize {
        self.layers[0].kernel.c_out()
    }

    pub fn norm_mode(&self) -> NormMode {
        self.norm_mode
    }

    pub fn c_targets(&self) -> &[f64] {
        &self.c_targets
    }

    /// Product of the per-layer targets: the certified Lipschitz bound of the
    /// residual map when trained with the operator-level normalization.
    pub fn lipschitz_target(&self) -> f64 {
        self.c_targets.iter().product()
    }

    /// Residual forward pass R(y): conv -> ReLU -> ... -> conv.
    pub fn forward(&self, y: &ImageTensor) -> Result<ImageTensor> {
        if y.channels() != self.image_channels() {
            return Err(Error::shape(
                format!("{} channels", self.image_channels()),
                format!("{} channels", y.channels()),
            ));
        }
        let mut a = y.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = conv_forward(&layer.kernel, &a)?;
            add_bias(&mut z, &layer.bias);
            a = if l < last { z.map(|v| v.max(0.0)) } else { z };
        }
        Ok(a)
    }

    fn forward_cached(&self, y: &ImageTensor) -> Result<(Vec<ImageTensor>, Vec<ImageTensor>)> {
        // pre_acts[l] = conv_l(act[l]) + b_l; acts[l] is the input to layer l.
        let mut acts = vec![y.clone()];
        let mut pre_acts = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = conv_forward(&layer.kernel, acts.last().unwrap())?;
            add_bias(&mut z, &layer.bias);
            if l < last {
                acts.push(z.map(|v| v.max(0.0)));
            }
            pre_acts.push(z);
        }
        Ok((acts, pre_acts))
    }
}

fn add_bias(z: &mut ImageTensor, bias: &[f64]) {
    let (c, h, w) = z.shape();
    let plane = h * w;
    let data = z.as_mut_slice();
    for ch in 0..c {
        let b = bias[ch];
        for v in &mut data[ch * plane..(ch + 1) * plane] {
            *v += b;
        }
    }
}

/// Gradients of the per-sample loss with respect to every kernel weight and
/// bias, shaped like the model parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub kernels: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(model: &SimpleCnnModel) -> Self {
        Self {
            kernels: model
                .layers
                .iter()
                .map(|l| vec![0.0; l.kernel.weights().len()])
                .collect(),
            biases: model.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.kernels.iter_mut().zip(&other.kernels) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for a in self.kernels.iter_mut().chain(self.biases.iter_mut()) {
            for x in a.iter_mut() {
                *x *= s;
            }
        }
    }
}

/// Per-sample loss: mean over entries of (R(y) - e)^2 with e the target residual.
pub fn loss(model: &SimpleCnnModel, y: &ImageTensor, target_residual: &ImageTensor) -> Result<f64> {
    let r = model.forward(y)?;
    if !r.same_shape(target_residual) {
        return Err(Error::shape(
            format!("{:?}", r.shape()),
            format!("{:?}", target_residual.shape()),
        ));
    }
    let n = r.len() as f64;
    Ok(r.sub(target_residual).as_slice().iter().map(|v| v * v).sum::<f64>() / n)
}

/// Backprop of [`loss`] through the network. ReLU subgradient at 0 is 0.
pub fn backward(
    model: &SimpleCnnModel,
    y: &ImageTensor,
    target_residual: &ImageTensor,
) -> Result<(Gradients, f64)> {
    let (acts, pre_acts) = model.forward_cached(y)?;
    let r = pre_acts.last().unwrap();
    if !r.same_shape(target_residual) {
        return Err(Error::shape(
            format!("{:?}", r.shape()),
            format!("{:?}", target_residual.shape()),
        ));
    }
    let n = r.len() as f64;
    let diff = r.sub(target_residual);
    let loss = diff.as_slice().iter().map(|v| v * v).sum::<f64>() / n;

    let mut grads = Gradients::zeros_like(model);
    // dL/dR for the mean-square loss
    let mut g = diff.scale(2.0 / n);
    for l in (0..model.layers.len()).rev() {
        let layer = &model.layers[l];
        let input = &acts[l];
        // bias gradient: sum of g over the spatial plane per output channel
        let (c_out, h, w) = g.shape();
        for o in 0..c_out {
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    acc += g.get(o, i, j);
                }
            }
            grads.biases[l][o] = acc;
        }
        // kernel gradient: dL/dK[o,c,di,dj] = sum_{i,j} g[o,i,j] * input[c, i+di-p, j+dj-p]
        let k = &layer.kernel;
        let (ph, pw) = ((k.kh() / 2) as isize, (k.kw() / 2) as isize);
        for o in 0..k.c_out() {
            for c in 0..k.c_in() {
                for di in 0..k.kh() {
                    for dj in 0..k.kw() {
                        let mut acc = 0.0;
                        for i in 0..h {
                            for j in 0..w {
                                let src_i = i as isize + di as isize - ph;
                                let src_j = j as isize + dj as isize - pw;
                                acc += g.get(o, i, j) * input.get_padded(c, src_i, src_j);
                            }
                        }
                        grads.kernels[l][((o * k.c_in() + c) * k.kh() + di) * k.kw() + dj] = acc;
                    }
                }
            }
        }
        if l > 0 {
            // propagate through the conv, then gate by the previous ReLU
            let upstream = conv_adjoint(k, &g)?;
            let gate = &pre_acts[l - 1];
            g = upstream.zip_map(gate, |u, z| if z > 0.0 { u } else { 0.0 });
        }
    }
    Ok((grads, loss))
}

/// Adam with the usual beta1 = 0.9, beta2 = 0.999, eps = 1e-8 and bias
/// correction. Moment buffers mirror the parameter shapes.
#[derive(Debug, Clone)]
pub struct AdamState {
    m_kernels: Vec<Vec<f64>>,
    v_kernels: Vec<Vec<f64>>,
    m_biases: Vec<Vec<f64>>,
    v_biases: Vec<Vec<f64>>,
    step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(model: &SimpleCnnModel) -> Self {
        let zk: Vec<Vec<f64>> = model
            .layers
            .iter()
            .map(|l| vec![0.0; l.kernel.weights().len()])
            .collect();
        let zb: Vec<Vec<f64>> = model.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect();
        Self {
            m_kernels: zk.clone(),
            v_kernels: zk,
            m_biases: zb.clone(),
            v_biases: zb,
            step: 0,
        }
    }

    pub fn apply(&mut self, model: &mut SimpleCnnModel, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for l in 0..model.layers.len() {
            adam_update(
                model.layers[l].kernel.weights_mut(),
                &grads.kernels[l],
                &mut self.m_kernels[l],
                &mut self.v_kernels[l],
                lr,
                bc1,
                bc2,
            );
            adam_update(
                &mut model.layers[l].bias,
                &grads.biases[l],
                &mut self.m_biases[l],
                &mut self.v_biases[l],
                lr,
                bc1,
                bc2,
            );
        }
    }
}

fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..params.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grads[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        params[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate for the first half of the epochs.
    pub lr_initial: f64,
    /// Learning rate after the halfway epoch.
    pub lr_final: f64,
    /// Gaussian training-noise level (e.g. 40/255).
    pub noise_sigma: f64,
    pub seed: RngSeed,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            lr_initial: 1e-3,
            lr_final: 1e-4,
            noise_sigma: 40.0 / 255.0,
            seed: RngSeed(0),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be > 0".into()));
        }
        if !(self.noise_sigma > 0.0) {
            return Err(Error::InvalidArgument("noise_sigma must be > 0".into()));
        }
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0) {
            return Err(Error::InvalidArgument("learning rates must be > 0".into()));
        }
        Ok(())
    }

    fn lr_at_epoch(&self, epoch: usize) -> f64 {
        // switch at the halfway epoch, rounding the first phase up
        if epoch < self.epochs.div_ceil(2) {
            self.lr_initial
        } else {
            self.lr_final
        }
    }
}

/// Clean training patches, values in [0, 1].
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub patches: Vec<ImageTensor>,
}

/// Piecewise-constant synthetic patches: a random background with 2-5 random
/// axis-aligned rectangles of random intensity. Deterministic in the seed.
pub fn make_patches(n: usize, size: usize, channels: usize, seed: RngSeed) -> PatchSet {
    let mut rng = seed.rng();
    let mut patches = Vec::with_capacity(n);
    for _ in 0..n {
        let bg: f64 = rng.gen();
        let mut p = ImageTensor::from_fn(channels, size, size, |_, _, _| bg);
        let rects = rng.gen_range(2..=5);
        for _ in 0..rects {
            let intensity: f64 = rng.gen();
            let i0 = rng.gen_range(0..size);
            let j0 = rng.gen_range(0..size);
            let hh = rng.gen_range(1..=size - i0);
            let ww = rng.gen_range(1..=size - j0);
            for c in 0..channels {
                for i in i0..i0 + hh {
                    for j in j0..j0 + ww {
                        p.set(c, i, j, intensity);
                    }
                }
            }
        }
        patches.push(p);
    }
    PatchSet { patches }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: SimpleCnnModel,
    /// Mean minibatch loss, one entry per epoch.
    pub epoch_losses: Vec<f64>,
}

enum SnState {
    None,
    Real(Vec<PowerIterState>),
    Reshape(Vec<ReshapeSnState>),
}

/// Trains the residual denoiser on Gaussian noise: per minibatch, first the
/// normalization hook (one power step, Rayleigh estimate, kernel rescale per
/// layer), then forward/backward/Adam over the batch. Noisy inputs are
/// y = x + N(0, sigma^2); the target residual is y - x.
///
/// The power states are warmed up before the first step so that even the
/// earliest normalizations use an accurate estimate, and the final kernels
/// are re-normalized with a converged estimate after the last optimizer
/// update, which is what makes the post-training certificate hold.
pub fn train(
    model: &SimpleCnnModel,
    cfg: &TrainConfig,
    data: &PatchSet,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.patches.is_empty() {
        return Err(Error::InvalidArgument("empty patch set".into()));
    }
    let (ch, h, w) = data.patches[0].shape();
    if ch != model.image_channels() {
        return Err(Error::shape(
            format!("{} channels", model.image_channels()),
            format!("{ch} channels"),
        ));
    }

    let mut model = model.clone();
    let mut sn = init_sn_state(&model, h, w, cfg.seed.stream(101));
    warm_up_sn(&model, &mut sn, 100)?;

    let mut adam = AdamState::new(&model);
    let mut shuffle_rng = cfg.seed.stream(102).rng();
    let mut noise_rng = cfg.seed.stream(103).rng();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..data.patches.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            normalize_step(&mut model, &mut sn)?;
            let mut grads = Gradients::zeros_like(&model);
            let mut batch_loss = 0.0;
            for &idx in batch {
                let clean = &data.patches[idx];
                let noise = ImageTensor::from_fn(ch, h, w, |_, _, _| {
                    cfg.noise_sigma * crate::rng::normal(&mut noise_rng)
                });
                let noisy = clean.add(&noise);
                let (g, l) = backward(&model, &noisy, &noise)?;
                grads.accumulate(&g);
                batch_loss += l;
            }
            let inv = 1.0 / batch.len() as f64;
            grads.scale(inv);
            batch_loss *= inv;
            if !batch_loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "training diverged: non-finite loss at epoch {epoch}"
                )));
            }
            adam.apply(&mut model, &grads, lr);
            epoch_loss += batch_loss;
            batches += 1;
        }
        epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }

    finalize_sn(&mut model, &mut sn)?;
    Ok(TrainReport {
        model,
        epoch_losses,
    })
}

fn init_sn_state(model: &SimpleCnnModel, h: usize, w: usize, seed: RngSeed) -> SnState {
    match model.norm_mode {
        NormMode::None => SnState::None,
        NormMode::RealSn => SnState::Real(
            model
                .layers
                .iter()
                .enumerate()
                .map(|(l, layer)| PowerIterState::init(&layer.kernel, h, w, seed.stream(l as u64)))
                .collect(),
        ),
        NormMode::ReshapeSn => SnState::Reshape(
            model
                .layers
                .iter()
                .enumerate()
                .map(|(l, layer)| ReshapeSnState::init(&layer.kernel, seed.stream(l as u64)))
                .collect(),
        ),
    }
}

fn warm_up_sn(model: &SimpleCnnModel, sn: &mut SnState, steps: usize) -> Result<()> {
    match sn {
        SnState::None => {}
        SnState::Real(states) => {
            for (layer, s) in model.layers.iter().zip(states.iter_mut()) {
                for _ in 0..steps {
                    power_step(&layer.kernel, s)?;
                }
            }
        }
        SnState::Reshape(states) => {
            for (layer, s) in model.layers.iter().zip(states.iter_mut()) {
                for _ in 0..steps {
                    s.step_and_sigma(&layer.kernel);
                }
            }
        }
    }
    Ok(())
}

/// The per-minibatch hook: one power step, a Rayleigh estimate, and a kernel
/// rescale to the layer target.
fn normalize_step(model: &mut SimpleCnnModel, sn: &mut SnState) -> Result<()> {
    match sn {
        SnState::None => Ok(()),
        SnState::Real(states) => {
            for l in 0..model.layers.len() {
                power_step(&model.layers[l].kernel, &mut states[l])?;
                let est = sigma_from_state(&model.layers[l].kernel, &states[l])?;
                model.layers[l].kernel =
                    normalize_kernel(&model.layers[l].kernel, &est, model.c_targets[l])?;
            }
            Ok(())
        }
        SnState::Reshape(states) => {
            for l in 0..model.layers.len() {
                let est = states[l].step_and_sigma(&model.layers[l].kernel);
                model.layers[l].kernel =
                    normalize_kernel(&model.layers[l].kernel, &est, model.c_targets[l])?;
            }
            Ok(())
        }
    }
}

/// Post-training normalization with a converged estimate; the last Adam
/// update would otherwise leave the kernels slightly off their targets.
fn finalize_sn(model: &mut SimpleCnnModel, sn: &mut SnState) -> Result<()> {
    match sn {
        SnState::None => Ok(()),
        SnState::Real(states) => {
            for l in 0..model.layers.len() {
                let mut prev = 0.0;
                for _ in 0..2000 {
                    power_step(&model.layers[l].kernel, &mut states[l])?;
                    let est = sigma_from_state(&model.layers[l].kernel, &states[l])?;
                    if (est.sigma - prev).abs() <= 1e-13 * est.sigma.max(1.0) {
                        break;
                    }
                    prev = est.sigma;
                }
                let est = sigma_from_state(&model.layers[l].kernel, &states[l])?;
                model.layers[l].kernel =
                    normalize_kernel(&model.layers[l].kernel, &est, model.c_targets[l])?;
            }
            Ok(())
        }
        SnState::Reshape(states) => {
            for l in 0..model.layers.len() {
                let mut est = states[l].step_and_sigma(&model.layers[l].kernel);
                let mut prev = 0.0;
                for _ in 0..2000 {
                    est = states[l].step_and_sigma(&model.layers[l].kernel);
                    if (est.sigma - prev).abs() <= 1e-13 * est.sigma.max(1.0) {
                        break;
                    }
                    prev = est.sigma;
                }
                model.layers[l].kernel =
                    normalize_kernel(&model.layers[l].kernel, &est, model.c_targets[l])?;
            }
            Ok(())
        }
    }
}

/// Per-layer dense spectral norms at the given grid size (certificate data).
pub fn layer_dense_sigmas(
    model: &SimpleCnnModel,
    height: usize,
    width: usize,
) -> Result<Vec<f64>> {
    model
        .layers
        .iter()
        .map(|l| conv::dense_sigma(&l.kernel, height, width).map(|e| e.sigma))
        .collect()
}
