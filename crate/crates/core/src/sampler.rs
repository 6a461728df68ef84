//! Deterministic DDIM stepping in both directions, implicit-guidance ε combination and
//! x̂₀ normalization.
//!
//! All coefficient arithmetic is done in `f64` per element; tensors stay `f32`.

use crate::condition::Condition;
use crate::error::{Error, Result};
use crate::model::EpsModel;
use crate::schedule::{NoiseSchedule, TimeStep};
use crate::tensor::ImageTensor;

/// What happens to the x̂₀ estimate inside every DDIM step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Normalization {
    /// Clip to `[-th, th]` and divide by `th`, with `th = max(1, percentile(|x̂₀|, s))`.
    Dynamic { percentile: f64 },
    /// Clip to `[-1, 1]`.
    StaticClip,
    None,
}

impl Normalization {
    pub fn apply(&self, x0_hat: &ImageTensor) -> Result<ImageTensor> {
        match *self {
            Normalization::Dynamic { percentile } => dynamic_normalize(x0_hat, percentile),
            Normalization::StaticClip => Ok(x0_hat.map(|v| v.clamp(-1.0, 1.0))),
            Normalization::None => Ok(x0_hat.clone()),
        }
    }

    /// In-place variant on a flat `f64` buffer of `items` equally sized batch items.
    pub fn apply_f64(&self, data: &mut [f64], items: usize) -> Result<()> {
        match *self {
            Normalization::None => {}
            Normalization::StaticClip => data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0)),
            Normalization::Dynamic { percentile } => {
                if data.is_empty() || items == 0 || data.len() % items != 0 {
                    return Err(Error::invalid("dynamic normalization of an empty or ragged buffer"));
                }
                if !(percentile > 0.0 && percentile <= 100.0) {
                    return Err(Error::invalid(format!("percentile {percentile} outside (0, 100]")));
                }
                for item in data.chunks_mut(data.len() / items) {
                    let mut mags: Vec<f64> = item.iter().map(|v| v.abs()).collect();
                    mags.sort_by(f64::total_cmp);
                    let th = percentile_sorted(&mags, percentile).max(1.0);
                    item.iter_mut().for_each(|v| *v = v.clamp(-th, th) / th);
                }
            }
        }
        Ok(())
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Normalization::Dynamic { .. } => "dynamic",
            Normalization::StaticClip => "static",
            Normalization::None => "none",
        }
    }
}

/// Inference hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Guidance scale w.
    pub guidance_scale: f64,
    /// Encode depth L, counted in DDIM steps.
    pub encode_steps: usize,
    /// Number of DDIM intervals spanning the whole training range.
    pub ddim_steps: usize,
    /// Dynamic-normalization percentile s, in (0, 100].
    pub percentile: f64,
    pub norm_mode: NormMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Dynamic,
    StaticClip,
    None,
}

impl std::str::FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(NormMode::Dynamic),
            "static" => Ok(NormMode::StaticClip),
            "none" => Ok(NormMode::None),
            other => Err(Error::Config(format!("unknown normalization mode {other:?}"))),
        }
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            guidance_scale: 3.0,
            encode_steps: 50,
            ddim_steps: 100,
            percentile: 99.0,
            norm_mode: NormMode::Dynamic,
        }
    }
}

impl SamplerConfig {
    pub fn normalization(&self) -> Normalization {
        match self.norm_mode {
            NormMode::Dynamic => Normalization::Dynamic {
                percentile: self.percentile,
            },
            NormMode::StaticClip => Normalization::StaticClip,
            NormMode::None => Normalization::None,
        }
    }

    /// Encode depth given as a fraction of the DDIM grid, rounded to the nearest step.
    pub fn with_depth_fraction(mut self, fraction: f64) -> Self {
        self.encode_steps = (fraction * self.ddim_steps as f64).round() as usize;
        self
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if !self.guidance_scale.is_finite() {
            return Err(Error::invalid("guidance scale must be finite"));
        }
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return Err(Error::invalid(format!(
                "percentile {} outside (0, 100]",
                self.percentile
            )));
        }
        if self.ddim_steps == 0 || self.ddim_steps >= sched.len() {
            return Err(Error::invalid(format!(
                "ddim_steps {} must lie in [1, T-1] for T = {}",
                self.ddim_steps,
                sched.len()
            )));
        }
        if self.encode_steps > self.ddim_steps {
            return Err(Error::invalid(format!(
                "encode depth {} exceeds ddim_steps {}",
                self.encode_steps, self.ddim_steps
            )));
        }
        Ok(())
    }

    /// The DDIM grid, `ddim_steps + 1` strictly increasing timesteps from 0 to T-1.
    pub fn grid(&self, sched: &NoiseSchedule) -> Result<Vec<TimeStep>> {
        self.validate(sched)?;
        ddim_grid(sched.len(), self.ddim_steps)
    }
}

/// Uniformly strided timesteps `floor(i·(T-1)/n)` for `i = 0..=n`.
pub fn ddim_grid(train_steps: usize, n: usize) -> Result<Vec<TimeStep>> {
    if n == 0 || train_steps < 2 || n > train_steps - 1 {
        return Err(Error::invalid(format!(
            "cannot stride {n} DDIM steps over {train_steps} training steps"
        )));
    }
    Ok((0..=n).map(|i| TimeStep(i * (train_steps - 1) / n)).collect())
}

/// ε = w·ε(x_t, c, t) + (1-w)·ε(x_t, ∅, t).
///
/// At `w = 0` and `w = 1` only one of the two predictions is evaluated, so those settings
/// return the unconditional or conditional prediction bit for bit.
pub fn guided_epsilon<M: EpsModel + ?Sized>(
    model: &M,
    x_t: &ImageTensor,
    c: Condition,
    t: TimeStep,
    w: f64,
) -> Result<ImageTensor> {
    if c.is_null() {
        return Err(Error::invalid("guidance towards the null condition is undefined"));
    }
    let b = x_t.batch();
    let ts = vec![t; b];
    if w == 1.0 {
        return model.predict_eps(x_t, &vec![c; b], &ts);
    }
    if w == 0.0 {
        return model.predict_eps(x_t, &vec![Condition::Null; b], &ts);
    }
    let cond = model.predict_eps(x_t, &vec![c; b], &ts)?;
    let uncond = model.predict_eps(x_t, &vec![Condition::Null; b], &ts)?;
    combine_guidance(&cond, &uncond, w)
}

/// The affine guidance combination on precomputed predictions.
pub fn combine_guidance(cond: &ImageTensor, uncond: &ImageTensor, w: f64) -> Result<ImageTensor> {
    cond.zip_map(uncond, |c, u| (w * c as f64 + (1.0 - w) * u as f64) as f32)
}

/// One deterministic DDIM transition between arbitrary ᾱ values on scalars.
///
/// Returns `(x_to, x0_hat)` where `x0_hat = (x - √(1-ᾱ_from)·eps)/√ᾱ_from` and
/// `x_to = √ᾱ_to·x0_hat + √(1-ᾱ_to)·eps`.
pub fn ddim_transition_scalar(x: f64, eps: f64, alpha_from: f64, alpha_to: f64) -> (f64, f64) {
    let x0_hat = (x - (1.0 - alpha_from).sqrt() * eps) / alpha_from.sqrt();
    (alpha_to.sqrt() * x0_hat + (1.0 - alpha_to).sqrt() * eps, x0_hat)
}

/// DDIM transition on tensors with normalization of the x̂₀ estimate.
///
/// The returned x̂₀ is the normalized one that was actually used.
pub fn ddim_transition(
    x: &ImageTensor,
    eps: &ImageTensor,
    alpha_from: f64,
    alpha_to: f64,
    norm: &Normalization,
) -> Result<(ImageTensor, ImageTensor)> {
    x.ensure_same_shape(eps)?;
    let (sa, sn) = (alpha_from.sqrt(), (1.0 - alpha_from).sqrt());
    let x0_hat = x.zip_map(eps, |xv, ev| ((xv as f64 - sn * ev as f64) / sa) as f32)?;
    let x0_hat = match norm {
        Normalization::None => {
            // keep the f64 intermediate to preserve exact invertibility
            let (ta, tn) = (alpha_to.sqrt(), (1.0 - alpha_to).sqrt());
            let next = x.zip_map(eps, |xv, ev| {
                let x0 = (xv as f64 - sn * ev as f64) / sa;
                (ta * x0 + tn * ev as f64) as f32
            })?;
            return Ok((next, x0_hat));
        }
        other => other.apply(&x0_hat)?,
    };
    let (ta, tn) = (alpha_to.sqrt(), (1.0 - alpha_to).sqrt());
    let next = x0_hat.zip_map(eps, |x0, ev| (ta * x0 as f64 + tn * ev as f64) as f32)?;
    Ok((next, x0_hat))
}

/// DDIM transition on an `f64` working buffer, updated in place. Returns x̂₀ after
/// normalization. Used by the encoder and decoder so rounding does not accumulate across
/// steps.
pub fn ddim_transition_f64(
    x: &mut [f64],
    eps: &ImageTensor,
    alpha_from: f64,
    alpha_to: f64,
    norm: &Normalization,
) -> Result<Vec<f64>> {
    if x.len() != eps.len() {
        return Err(Error::ShapeMismatch {
            expected: eps.shape().to_vec(),
            actual: vec![x.len()],
        });
    }
    let (sa, sn) = (alpha_from.sqrt(), (1.0 - alpha_from).sqrt());
    let (ta, tn) = (alpha_to.sqrt(), (1.0 - alpha_to).sqrt());
    let mut x0: Vec<f64> = x
        .iter()
        .zip(eps.data())
        .map(|(&xv, &ev)| (xv - sn * ev as f64) / sa)
        .collect();
    norm.apply_f64(&mut x0, eps.batch())?;
    for ((xv, &x0v), &ev) in x.iter_mut().zip(&x0).zip(eps.data()) {
        *xv = ta * x0v + tn * ev as f64;
    }
    Ok(x0)
}

/// Reverse (denoising) DDIM step from `t` down to `t_prev`.
pub fn ddim_step_reverse(
    x_t: &ImageTensor,
    eps: &ImageTensor,
    t: TimeStep,
    t_prev: TimeStep,
    sched: &NoiseSchedule,
) -> Result<(ImageTensor, ImageTensor)> {
    if t_prev >= t {
        return Err(Error::invalid(format!(
            "reverse step needs t_prev < t, got {} -> {}",
            t.0, t_prev.0
        )));
    }
    ddim_transition(
        x_t,
        eps,
        sched.alpha_cum(t)?,
        sched.alpha_cum(t_prev)?,
        &Normalization::None,
    )
}

/// Forward (encoding) DDIM step from `t` up to `t_next`; the algebraic inverse of
/// [`ddim_step_reverse`] for a fixed `eps`.
pub fn ddim_step_forward(
    x_t: &ImageTensor,
    eps: &ImageTensor,
    t: TimeStep,
    t_next: TimeStep,
    sched: &NoiseSchedule,
) -> Result<(ImageTensor, ImageTensor)> {
    if t_next <= t {
        return Err(Error::invalid(format!(
            "forward step needs t_next > t, got {} -> {}",
            t.0, t_next.0
        )));
    }
    ddim_transition(
        x_t,
        eps,
        sched.alpha_cum(t)?,
        sched.alpha_cum(t_next)?,
        &Normalization::None,
    )
}

/// Percentile by linear interpolation on sorted values; exact grid hits take the value
/// at that rank directly. `percentile(v, 100)` is the maximum.
pub fn percentile(values: &[f32], s: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty set"));
    }
    if !(0.0..=100.0).contains(&s) {
        return Err(Error::invalid(format!("percentile {s} outside [0, 100]")));
    }
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    Ok(percentile_sorted(&sorted, s))
}

pub(crate) fn percentile_sorted<T: Copy + Into<f64>>(sorted: &[T], s: f64) -> f64 {
    let rank = s / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if frac == 0.0 || lo + 1 >= sorted.len() {
        return sorted[lo.min(sorted.len() - 1)].into();
    }
    let (a, b): (f64, f64) = (sorted[lo].into(), sorted[lo + 1].into());
    a + frac * (b - a)
}

/// Per batch item: `th = max(1, percentile(|x̂₀|, s))`, clip to `[-th, th]`, divide by `th`.
pub fn dynamic_normalize(x0_hat: &ImageTensor, s: f64) -> Result<ImageTensor> {
    if x0_hat.is_empty() {
        return Err(Error::invalid("dynamic normalization of an empty tensor"));
    }
    if !(s > 0.0 && s <= 100.0) {
        return Err(Error::invalid(format!("percentile {s} outside (0, 100]")));
    }
    let mut out = x0_hat.clone();
    for b in 0..x0_hat.batch() {
        let item = out.item_data_mut(b);
        let mut mags: Vec<f32> = item.iter().map(|v| v.abs()).collect();
        mags.sort_by(f32::total_cmp);
        let th = percentile_sorted(&mags, s).max(1.0) as f32;
        for v in item.iter_mut() {
            *v = v.clamp(-th, th) / th;
        }
    }
    Ok(out)
}
