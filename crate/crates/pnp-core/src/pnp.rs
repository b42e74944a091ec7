//! The three plug-and-play fixed-point engines and the contraction theory
//! around them.
//!
//! * FBS:  x+ = H(x - alpha * grad f(x))
//! * ADMM: x+ = H(y - u); y+ = Prox(x+ + u); u+ = u + x+ - y+
//! * DRS:  x_half = Prox(z); x+ = H(2 x_half - z); z+ = z + x+ - x_half
//!
//! ADMM and DRS are the same iteration under the substitution z = y + u (see
//! [`admm_to_drs`]); contraction measurements for ADMM are therefore taken on
//! the mapped z-variable. Displacement ratios of successive iterates
//! (Cauchy ratios) stand in for the contraction factor: for a
//! delta-contraction both are bounded by delta, and they are available
//! online without knowing the limit.

use serde::Serialize;

use crate::denoisers::Denoiser;
use crate::error::{Error, Result};
use crate::fidelity::Fidelity;
use crate::image::{psnr, ImageTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Method {
    Fbs,
    Admm,
    Drs,
}

#[derive(Debug, Clone, Serialize)]
pub struct PnpConfig {
    pub method: Method,
    pub alpha: f64,
    pub max_iter: usize,
    /// Fixed-point residual threshold on the method's own state variable.
    pub tol: f64,
    /// Snapshot stride for the recorded image iterates (ratios and residuals
    /// are recorded every iteration regardless).
    pub record_every: usize,
}

impl PnpConfig {
    pub fn new(method: Method, alpha: f64, max_iter: usize, tol: f64) -> Result<Self> {
        let cfg = Self {
            method,
            alpha,
            max_iter,
            tol,
            record_every: 1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidArgument("record_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// The (x, y, u) triple of the ADMM iteration.
#[derive(Debug, Clone)]
pub struct AdmmState {
    pub x: ImageTensor,
    pub y: ImageTensor,
    pub u: ImageTensor,
}

impl AdmmState {
    /// Standard initialization: y is the observation-domain starting image,
    /// u = 0, x = y (x is overwritten by the first step).
    pub fn init(y0: ImageTensor) -> Self {
        let (c, h, w) = y0.shape();
        AdmmState {
            x: y0.clone(),
            u: ImageTensor::zeros(c, h, w),
            y: y0,
        }
    }
}

/// One forward-backward step.
pub fn fbs_step(
    f: &dyn Fidelity,
    d: &dyn Denoiser,
    alpha: f64,
    x: &ImageTensor,
) -> Result<ImageTensor> {
    d.apply(&x.add_scaled(&f.grad(x)?, -alpha))
}

/// One ADMM step (denoise, prox, multiplier update).
pub fn admm_step(
    f: &dyn Fidelity,
    d: &dyn Denoiser,
    alpha: f64,
    s: &AdmmState,
) -> Result<AdmmState> {
    let x_next = d.apply(&s.y.sub(&s.u))?;
    let y_next = f.prox(alpha, &x_next.add(&s.u))?;
    let u_next = s.u.add(&x_next).sub(&y_next);
    Ok(AdmmState {
        x: x_next,
        y: y_next,
        u: u_next,
    })
}

/// Pieces of one Douglas-Rachford step: the prox point, the denoised point,
/// and the next z.
#[derive(Debug, Clone)]
pub struct DrsStep {
    pub x_half: ImageTensor,
    pub x: ImageTensor,
    pub z_next: ImageTensor,
}

pub fn drs_step_detailed(
    f: &dyn Fidelity,
    d: &dyn Denoiser,
    alpha: f64,
    z: &ImageTensor,
) -> Result<DrsStep> {
    let x_half = f.prox(alpha, z)?;
    let reflected = x_half.scale(2.0).sub(z);
    let x = d.apply(&reflected)?;
    let z_next = z.add(&x).sub(&x_half);
    // Cross-check the three-line form against the operator form
    // T = I/2 + (2H - I)(2 Prox - I)/2 in debug builds.
    #[cfg(debug_assertions)]
    {
        let v = d.apply(&reflected)?.scale(2.0).sub(&reflected);
        let op_form = z.scale(0.5).add(&v.scale(0.5));
        debug_assert!(
            op_form.sub(&z_next).norm2() <= 1e-12 * (1.0 + z_next.norm2()),
            "DRS three-line and operator forms disagree"
        );
    }
    Ok(DrsStep { x_half, x, z_next })
}

/// One Douglas-Rachford step on the z-variable.
pub fn drs_step(
    f: &dyn Fidelity,
    d: &dyn Denoiser,
    alpha: f64,
    z: &ImageTensor,
) -> Result<ImageTensor> {
    Ok(drs_step_detailed(f, d, alpha, z)?.z_next)
}

/// The ADMM -> DRS state substitution z = y + u, in pre-step labeling: an
/// ADMM state about to take a step corresponds to the DRS variable y + u.
///
/// Index bookkeeping: starting from DRS and substituting z^k = x^k + u^k
/// gives, after reordering for dependencies and relabeling
/// y~^{k+1} = x^{k+1/2}, x~^{k+1} = x^k, exactly the ADMM iteration. A state
/// produced by at least one [`admm_step`] satisfies y = Prox(y + u), and for
/// such consistent states one ADMM step followed by this map equals one
/// [`drs_step`] on the mapped variable.
pub fn admm_to_drs(s: &AdmmState) -> ImageTensor {
    s.y.add(&s.u)
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    pub iteration: usize,
    /// ||w^k - w^{k-1}|| on the method's state variable.
    pub displacement: f64,
    /// displacement_k / displacement_{k-1}, defined from the second step on.
    pub ratio: Option<f64>,
    /// Fixed-point residual ||T(w) - w|| at the pre-step iterate (numerically
    /// the same quantity as the displacement).
    pub residual: f64,
    pub psnr_db: Option<f64>,
}

/// Per-iteration diagnostics plus recorded image iterates.
#[derive(Debug, Clone)]
pub struct IterTrace {
    pub method: Method,
    pub records: Vec<TraceRecord>,
    /// (iteration, image iterate) at the configured stride; the image is the
    /// denoiser output for all three methods.
    pub snapshots: Vec<(usize, ImageTensor)>,
    pub final_image: ImageTensor,
    pub final_residual: f64,
    /// Steps executed.
    pub iterations: usize,
    /// Steps needed before the residual first dropped to tol (0 when started
    /// at a fixed point); None when the run never converged.
    pub iterations_to_tol: Option<usize>,
    pub converged: bool,
    /// Set when a non-finite iterate aborted the run, with the step index.
    pub aborted_at: Option<usize>,
    pub tol: f64,
}

enum EngineState {
    Fbs(ImageTensor),
    Admm(AdmmState),
    Drs(ImageTensor),
}

impl EngineState {
    fn state_var(&self) -> ImageTensor {
        match self {
            EngineState::Fbs(x) => x.clone(),
            EngineState::Admm(s) => admm_to_drs(s),
            EngineState::Drs(z) => z.clone(),
        }
    }
}

/// Runs the configured method until the fixed-point residual drops to tol or
/// `max_iter` steps elapse. `init` seeds the method's natural variable: the
/// image iterate for FBS, the y-variable (with u = 0) for ADMM, and the
/// z-variable for DRS. A non-finite iterate aborts and flags the trace
/// instead of erroring, so partial diagnostics survive.
pub fn run(
    f: &dyn Fidelity,
    d: &dyn Denoiser,
    cfg: &PnpConfig,
    init: &ImageTensor,
    ground_truth: Option<&ImageTensor>,
) -> Result<IterTrace> {
    cfg.validate()?;
    let mut state = match cfg.method {
        Method::Fbs => EngineState::Fbs(init.clone()),
        Method::Admm => EngineState::Admm(AdmmState::init(init.clone())),
        Method::Drs => EngineState::Drs(init.clone()),
    };

    let mut records = Vec::new();
    let mut snapshots = Vec::new();
    let mut image = init.clone();
    let mut prev_disp: Option<f64> = None;
    let mut w_prev = state.state_var();
    let mut converged = false;
    let mut aborted_at = None;
    let mut iterations = 0usize;
    let mut iterations_to_tol = None;
    let mut final_residual = f64::NAN;

    for k in 1..=cfg.max_iter {
        let next_image;
        match &state {
            EngineState::Fbs(x) => {
                let x_next = fbs_step(f, d, cfg.alpha, x)?;
                next_image = x_next.clone();
                state = EngineState::Fbs(x_next);
            }
            EngineState::Admm(s) => {
                let s_next = admm_step(f, d, cfg.alpha, s)?;
                next_image = s_next.x.clone();
                state = EngineState::Admm(s_next);
            }
            EngineState::Drs(z) => {
                let step = drs_step_detailed(f, d, cfg.alpha, z)?;
                next_image = step.x.clone();
                state = EngineState::Drs(step.z_next);
            }
        }
        iterations = k;
        let w_next = state.state_var();
        let finite = w_next.is_finite() && next_image.is_finite();
        let disp = if finite {
            w_next.sub(&w_prev).norm2()
        } else {
            f64::NAN
        };
        let ratio = match (prev_disp, finite) {
            (Some(p), true) if p > 0.0 => Some(disp / p),
            _ => None,
        };
        let psnr_db = match (ground_truth, finite) {
            (Some(gt), true) => psnr(&next_image, gt, 1.0).ok(),
            _ => None,
        };
        records.push(TraceRecord {
            iteration: k,
            displacement: disp,
            ratio,
            residual: disp,
            psnr_db,
        });
        if !finite {
            aborted_at = Some(k);
            break;
        }
        image = next_image;
        if k % cfg.record_every == 0 {
            snapshots.push((k, image.clone()));
        }
        final_residual = disp;
        if disp <= cfg.tol {
            converged = true;
            iterations_to_tol = Some(k - 1);
            if k % cfg.record_every != 0 {
                snapshots.push((k, image.clone()));
            }
            break;
        }
        w_prev = w_next;
        prev_disp = Some(disp);
    }

    Ok(IterTrace {
        method: cfg.method,
        records,
        snapshots,
        final_image: image,
        final_residual,
        iterations,
        iterations_to_tol,
        converged,
        aborted_at,
        tol: cfg.tol,
    })
}

/// Contraction coefficient and step-size window from the theory.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TheoryBounds {
    /// Contraction coefficient of the iteration map at the given alpha.
    pub delta: f64,
    /// Open interval of step sizes with delta < 1, when one exists
    /// (upper end +inf for the one-sided DRS/ADMM threshold).
    pub alpha_range: Option<(f64, f64)>,
    /// Whether any step size yields a contraction for these constants.
    pub feasible: bool,
}

/// Forward-backward contraction bound:
/// delta = max(|1 - alpha mu|, |1 - alpha L|) * (1 + eps), contractive on
/// ( 1/(mu (1 + 1/eps)), 2/L - 1/(L (1 + 1/eps)) ), which is nonempty iff
/// eps < 2 mu / (L - mu). IEEE arithmetic handles the eps = 0 and L = mu
/// limits: the interval degenerates to (0, 2/L) and the feasibility threshold
/// to +inf respectively.
pub fn theory_fbs(mu: f64, lip: f64, eps: f64, alpha: f64) -> Result<TheoryBounds> {
    if !(mu > 0.0) || !(lip >= mu) || !(eps >= 0.0) || !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "theory_fbs needs 0 < mu <= L, eps >= 0, alpha > 0; got mu={mu}, L={lip}, eps={eps}, alpha={alpha}"
        )));
    }
    let delta = (1.0 - alpha * mu).abs().max((1.0 - alpha * lip).abs()) * (1.0 + eps);
    let feasible = eps < 2.0 * mu / (lip - mu);
    let alpha_range = if feasible {
        let lo = 1.0 / (mu * (1.0 + 1.0 / eps));
        let hi = 2.0 / lip - 1.0 / (lip * (1.0 + 1.0 / eps));
        Some((lo, hi))
    } else {
        None
    };
    Ok(TheoryBounds {
        delta,
        alpha_range,
        feasible,
    })
}

/// Douglas-Rachford / ADMM contraction bound:
/// delta = (1 + eps + eps a mu + 2 eps^2 a mu) / (1 + a mu + 2 eps a mu),
/// with alpha as a; contractive iff eps < 1 and
/// alpha > eps / ((1 + eps - 2 eps^2) mu).
pub fn theory_drs(mu: f64, eps: f64, alpha: f64) -> Result<TheoryBounds> {
    if !(mu > 0.0) || !(eps >= 0.0) || !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "theory_drs needs mu > 0, eps >= 0, alpha > 0; got mu={mu}, eps={eps}, alpha={alpha}"
        )));
    }
    let am = alpha * mu;
    let delta = (1.0 + eps + eps * am + 2.0 * eps * eps * am) / (1.0 + am + 2.0 * eps * am);
    let feasible;
    let alpha_range;
    if eps < 1.0 {
        let threshold = eps / ((1.0 + eps - 2.0 * eps * eps) * mu);
        feasible = alpha > threshold;
        alpha_range = Some((threshold, f64::INFINITY));
    } else {
        feasible = false;
        alpha_range = None;
    }
    Ok(TheoryBounds {
        delta,
        alpha_range,
        feasible,
    })
}

/// Steps with displacement denominators below this are excluded from ratio
/// statistics: they are at the floating-point noise floor.
pub const RATIO_DENOM_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, Serialize)]
pub struct ContractionStats {
    pub ratios: Vec<f64>,
    /// Geometric mean of the included ratios; None for a degenerate trace.
    pub geometric_mean: Option<f64>,
    /// Steps excluded for a vanishing denominator.
    pub excluded: usize,
    /// True when no usable ratio exists (e.g. the run started at the fixed point).
    pub degenerate: bool,
}

/// Aggregates the recorded per-step ratios (ADMM traces already measure the
/// DRS-mapped variable inside [`run`]).
pub fn contraction_stats(trace: &IterTrace) -> Result<ContractionStats> {
    if trace.records.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "contraction statistics need at least 3 iterates, trace has {}",
            trace.records.len()
        )));
    }
    let mut ratios = Vec::new();
    let mut excluded = 0usize;
    for pair in trace.records.windows(2) {
        let denom = pair[0].displacement;
        let numer = pair[1].displacement;
        if !(denom.is_finite() && numer.is_finite()) {
            excluded += 1;
            continue;
        }
        if denom < RATIO_DENOM_FLOOR {
            excluded += 1;
            continue;
        }
        ratios.push(numer / denom);
    }
    let degenerate = ratios.is_empty();
    let geometric_mean = if degenerate {
        None
    } else {
        let log_sum: f64 = ratios.iter().map(|r| r.ln()).sum();
        Some((log_sum / ratios.len() as f64).exp())
    };
    Ok(ContractionStats {
        ratios,
        geometric_mean,
        excluded,
    degenerate,
    })
}

/// Worst violation of the theta-averagedness inequality
/// ||Tx - Ty||^2 + (1 - 2 theta)||x - y||^2 <= 2 (1 - theta) <Tx - Ty, x - y>
/// over the sample pairs; a maximum <= tolerance certifies theta-averagedness
/// on the sample.
pub fn averagedness_check(
    op: impl Fn(&ImageTensor) -> Result<ImageTensor>,
    theta: f64,
    pairs: &[(ImageTensor, ImageTensor)],
) -> Result<f64> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "theta must be in (0, 1), got {theta}"
        )));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("averagedness_check needs pairs".into()));
    }
    let mut worst = f64::NEG_INFINITY;
    for (x, y) in pairs {
        let tx = op(x)?;
        let ty = op(y)?;
        let tdiff = tx.sub(&ty);
        let diff = x.sub(y);
        let margin = tdiff.norm2().powi(2) + (1.0 - 2.0 * theta) * diff.norm2().powi(2)
            - 2.0 * (1.0 - theta) * tdiff.inner(&diff)?;
        worst = worst.max(margin);
    }
    Ok(worst)
}
