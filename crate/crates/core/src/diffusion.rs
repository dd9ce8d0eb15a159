//! Variance-preserving diffusion in continuous time.
//!
//! A schedule maps `t` in `(0, 1]` to `(alpha, sigma)` with
//! `alpha^2 + sigma^2 = 1`. Noisy samples are `x_t = alpha x0 + sigma eps`.
//! Denoisers may predict `eps`, `x0` or `v = alpha eps - sigma x0`; the three
//! are interchangeable given `x_t` and `t`.

use std::cell::Cell;
use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{no_grad, numel, Tensor};

/// Lower bound applied to a coefficient before dividing by it.
pub const COEF_FLOOR: f64 = 1e-4;

const LINEAR_BETA_MIN: f64 = 0.1;
const LINEAR_BETA_MAX: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Cosine,
    LinearVp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionKind {
    Eps,
    X0,
    V,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub t_min: f64,
    pub t_max: f64,
}

pub fn make_schedule(kind: ScheduleKind, t_min: f64, t_max: f64) -> Result<DiffusionSchedule> {
    if !(t_min > 0.0 && t_min < t_max && t_max <= 1.0) {
        return Err(Error::Param(format!("need 0 < t_min < t_max <= 1, got [{t_min}, {t_max}]")));
    }
    Ok(DiffusionSchedule { kind, t_min, t_max })
}

thread_local! {
    static CLAMP_WARNINGS: Cell<u64> = const { Cell::new(0) };
}

/// Number of divisions guarded by [`COEF_FLOOR`] on this thread so far.
pub fn clamp_warnings() -> u64 {
    CLAMP_WARNINGS.with(|c| c.get())
}

fn guarded(coef: f64, what: &str, t: f64) -> f64 {
    if coef < COEF_FLOOR {
        CLAMP_WARNINGS.with(|c| c.set(c.get() + 1));
        log::warn!("{what}({t}) = {coef:e} below floor, clamped to {COEF_FLOOR:e}");
        COEF_FLOOR
    } else {
        coef
    }
}

impl DiffusionSchedule {
    pub fn alpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Cosine => (FRAC_PI_2 * t).cos(),
            ScheduleKind::LinearVp => {
                let log_a = -0.25 * t * t * (LINEAR_BETA_MAX - LINEAR_BETA_MIN) - 0.5 * t * LINEAR_BETA_MIN;
                log_a.exp()
            }
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Cosine => (FRAC_PI_2 * t).sin(),
            ScheduleKind::LinearVp => {
                let a = self.alpha(t);
                (1.0 - a * a).max(0.0).sqrt()
            }
        }
    }

    /// `steps` evaluation times, uniform from `t_max` down to `t_min`.
    pub fn ddim_grid(&self, steps: usize) -> Vec<f64> {
        if steps == 1 {
            return vec![self.t_max];
        }
        let span = self.t_max - self.t_min;
        (0..steps).map(|i| self.t_max - span * i as f64 / (steps - 1) as f64).collect()
    }
}

/// Standard-normal array regenerated bit-identically from its seed.
#[derive(Clone, Debug)]
pub struct NoiseSample {
    pub seed: u64,
    pub values: Tensor,
}

impl NoiseSample {
    pub fn new(seed: u64, shape: &[usize]) -> Self {
        let values = Tensor::new(rng::randn(&mut rng::seeded(seed), numel(shape)), shape);
        NoiseSample { seed, values }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `alpha(t) x0 + sigma(t) eps`, differentiable in both arrays.
pub fn add_noise(x0: &Tensor, eps: &Tensor, t: f64, s: &DiffusionSchedule) -> Result<Tensor> {
    same_shape(x0, eps, "add_noise")?;
    Ok(x0.mul_scalar(s.alpha(t) as f32).add(&eps.mul_scalar(s.sigma(t) as f32)))
}

/// Coefficients `(c_pred, c_x)` with `to = c_pred * pred + c_x * x_t`.
pub fn conversion_coefs(from: PredictionKind, to: PredictionKind, t: f64, s: &DiffusionSchedule) -> (f64, f64) {
    use PredictionKind::*;
    let (a, sg) = (s.alpha(t), s.sigma(t));
    match (from, to) {
        (V, X0) => (-sg, a),
        (V, Eps) => (a, sg),
        (Eps, X0) => {
            let a = guarded(a, "alpha", t);
            (-sg / a, 1.0 / a)
        }
        (Eps, V) => {
            let a = guarded(a, "alpha", t);
            (1.0 / a, -sg / a)
        }
        (X0, Eps) => {
            let sg = guarded(sg, "sigma", t);
            (-a / sg, 1.0 / sg)
        }
        // v = alpha eps - sigma x0 with eps = (x_t - alpha x0) / sigma.
        (X0, V) => {
            let sg = guarded(sg, "sigma", t);
            (-a * a / sg - sg, a / sg)
        }
        _ => (1.0, 0.0),
    }
}

/// Re-expresses a prediction of kind `from` as kind `to`. Differentiable in
/// `pred` and `x_t`.
pub fn convert_prediction(
    pred: &Tensor,
    from: PredictionKind,
    to: PredictionKind,
    x_t: &Tensor,
    t: f64,
    s: &DiffusionSchedule,
) -> Result<Tensor> {
    same_shape(pred, x_t, "convert_prediction")?;
    if from == to {
        return Ok(pred.clone());
    }
    let (cp, cx) = conversion_coefs(from, to, t, s);
    Ok(pred.mul_scalar(cp as f32).add(&x_t.mul_scalar(cx as f32)))
}

/// Per-item coefficient column `[B, 1, ..., 1]` of rank `rank`.
pub fn batch_column(values: &[f64], rank: usize) -> Tensor {
    let mut shape = vec![1; rank];
    shape[0] = values.len();
    Tensor::new(values.iter().map(|v| *v as f32).collect(), &shape)
}

/// [`convert_prediction`] over a batch whose items have different times.
pub fn convert_batch(
    pred: &Tensor,
    from: PredictionKind,
    to: PredictionKind,
    x_t: &Tensor,
    ts: &[f64],
    s: &DiffusionSchedule,
) -> Result<Tensor> {
    same_shape(pred, x_t, "convert_batch")?;
    if pred.dim(0) != ts.len() {
        return Err(Error::Shape(format!("{} times for a batch of {}", ts.len(), pred.dim(0))));
    }
    if from == to {
        return Ok(pred.clone());
    }
    let (cp, cx): (Vec<f64>, Vec<f64>) = ts.iter().map(|&t| conversion_coefs(from, to, t, s)).unzip();
    Ok(pred.mul(&batch_column(&cp, pred.rank())).add(&x_t.mul(&batch_column(&cx, pred.rank()))))
}

/// [`add_noise`] over a batch whose items have different times.
pub fn add_noise_batch(x0: &Tensor, eps: &Tensor, ts: &[f64], s: &DiffusionSchedule) -> Result<Tensor> {
    same_shape(x0, eps, "add_noise_batch")?;
    let a: Vec<f64> = ts.iter().map(|&t| s.alpha(t)).collect();
    let sg: Vec<f64> = ts.iter().map(|&t| s.sigma(t)).collect();
    Ok(x0.mul(&batch_column(&a, x0.rank())).add(&eps.mul(&batch_column(&sg, x0.rank()))))
}

/// `uncond + scale (cond - uncond)`, returning an input unchanged at scale 0 or 1.
pub fn cfg_combine(cond: &Tensor, uncond: &Tensor, scale: f64) -> Result<Tensor> {
    same_shape(cond, uncond, "cfg_combine")?;
    if !(scale >= 0.0) {
        return Err(Error::Param(format!("guidance scale must be >= 0, got {scale}")));
    }
    if scale == 1.0 {
        return Ok(cond.clone());
    }
    if scale == 0.0 {
        return Ok(uncond.clone());
    }
    Ok(uncond.add(&cond.sub(uncond).mul_scalar(scale as f32)))
}

/// One deterministic DDIM update from `t` to `t_prev`.
pub fn ddim_step(x_t: &Tensor, eps_pred: &Tensor, t: f64, t_prev: f64, s: &DiffusionSchedule) -> Result<Tensor> {
    same_shape(x_t, eps_pred, "ddim_step")?;
    if t_prev > t {
        return Err(Error::Ordering(format!("ddim_step needs t_prev <= t, got {t_prev} > {t}")));
    }
    if t_prev == t {
        return Ok(x_t.clone());
    }
    let (a, sg) = (guarded(s.alpha(t), "alpha", t), s.sigma(t));
    let (ap, sp) = (s.alpha(t_prev), s.sigma(t_prev));
    let out = x_t
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(&x, &e)| {
            let x0 = (x as f64 - sg * e as f64) / a;
            (ap * x0 + sp * e as f64) as f32
        })
        .collect();
    Ok(Tensor::new(out, x_t.shape()))
}

/// A network that denoises one multi-view sample `[V, C, H, W]`.
pub trait Denoiser {
    fn kind(&self) -> PredictionKind;
    fn predict(&self, x_t: &Tensor, t: f64, condition: Option<&Tensor>) -> Result<Tensor>;
}

/// Guided noise prediction at one time. The unconditional branch is skipped
/// at guidance 1.
pub fn guided_eps(
    denoiser: &dyn Denoiser,
    x_t: &Tensor,
    t: f64,
    condition: &Tensor,
    guidance: f64,
    s: &DiffusionSchedule,
) -> Result<Tensor> {
    let as_eps = |pred: Tensor| -> Result<Tensor> {
        same_shape(&pred, x_t, "denoiser output")?;
        convert_prediction(&pred, denoiser.kind(), PredictionKind::Eps, x_t, t, s)
    };
    let cond = as_eps(denoiser.predict(x_t, t, Some(condition))?)?;
    if guidance == 1.0 {
        return Ok(cond);
    }
    let uncond = as_eps(denoiser.predict(x_t, t, None)?)?;
    cfg_combine(&cond, &uncond, guidance)
}

/// Deterministic DDIM sampling from `x_{t_max} = z`, returning the final clean estimate.
pub fn ddim_sample(
    denoiser: &dyn Denoiser,
    condition: &Tensor,
    z: &NoiseSample,
    steps: usize,
    guidance: f64,
    s: &DiffusionSchedule,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Param("ddim_sample needs at least one step".into()));
    }
    let _ng = no_grad();
    let grid = s.ddim_grid(steps);
    let mut x = z.values.clone();
    for (i, &t) in grid.iter().enumerate() {
        let eps = guided_eps(denoiser, &x, t, condition, guidance, s)?;
        match grid.get(i + 1) {
            Some(&t_prev) => x = ddim_step(&x, &eps, t, t_prev, s)?,
            None => x = convert_prediction(&eps, PredictionKind::Eps, PredictionKind::X0, &x, t, s)?,
        }
    }
    Ok(x)
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Emits the exact noise that separates `x_t` from a known clean sample.
    pub struct OracleDenoiser {
        pub x0: Tensor,
        pub schedule: DiffusionSchedule,
    }

    impl Denoiser for OracleDenoiser {
        fn kind(&self) -> PredictionKind {
            PredictionKind::Eps
        }

        fn predict(&self, x_t: &Tensor, t: f64, _c: Option<&Tensor>) -> Result<Tensor> {
            let (a, sg) = (self.schedule.alpha(t), self.schedule.sigma(t));
            let eps = x_t
                .data()
                .iter()
                .zip(self.x0.data())
                .map(|(&x, &x0)| ((x as f64 - a * x0 as f64) / sg) as f32)
                .collect();
            Ok(Tensor::new(eps, x_t.shape()))
        }
    }
}
