//! Noise schedule, forward noising process and the ε-prediction training objective.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::condition::Condition;
use crate::error::{Error, Result};
use crate::model::EpsModel;
use crate::tensor::ImageTensor;

/// Index into the training diffusion process, valid in `[0, T)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeStep(pub usize);

/// How per-step β values are laid out over `[0, T)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleKind {
    /// β interpolated linearly from `start` at step 0 to `end` at step T-1.
    Linear { start: f64, end: f64 },
    Constant(f64),
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::Linear {
            start: 1e-4,
            end: 0.02,
        }
    }
}

/// Per-step β and cumulative products ᾱ_t = ∏_{j≤t}(1-β_j), kept in 64-bit.
///
/// Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cum: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        let check = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} must lie in (0, 1)")))
            }
        };
        let betas = match kind {
            ScheduleKind::Linear { start, end } => {
                check("beta start", start)?;
                check("beta end", end)?;
                if steps == 1 {
                    vec![start]
                } else {
                    let span = (steps - 1) as f64;
                    (0..steps).map(|j| start + (end - start) * j as f64 / span).collect()
                }
            }
            ScheduleKind::Constant(beta) => {
                check("beta", beta)?;
                vec![beta; steps]
            }
        };
        Self::from_betas(betas)
    }

    /// Rebuilds a schedule from stored β values, recomputing and validating ᾱ.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        let mut alphas_cum = Vec::with_capacity(betas.len());
        let mut prod = 1.0f64;
        for (j, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid(format!("beta[{j}] = {b} must lie in (0, 1)")));
            }
            let next = prod * (1.0 - b);
            if !(next < prod && next > 0.0) {
                return Err(Error::invalid(format!(
                    "cumulative product not strictly decreasing at step {j}"
                )));
            }
            prod = next;
            alphas_cum.push(prod);
        }
        Ok(Self { betas, alphas_cum })
    }

    /// Number of training steps T.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cum(&self) -> &[f64] {
        &self.alphas_cum
    }

    pub fn check(&self, t: TimeStep) -> Result<()> {
        if t.0 < self.len() {
            Ok(())
        } else {
            Err(Error::TimeStepOutOfRange {
                t: t.0,
                len: self.len(),
            })
        }
    }

    /// ᾱ_t.
    pub fn alpha_cum(&self, t: TimeStep) -> Result<f64> {
        self.check(t)?;
        Ok(self.alphas_cum[t.0])
    }
}

/// Convenience wrapper matching the usual call shape.
pub fn build_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    NoiseSchedule::build(steps, kind)
}

/// Noising with a raw ᾱ value: √ᾱ·x0 + √(1-ᾱ)·eps.
pub fn noise_with_alpha(x0: &ImageTensor, eps: &ImageTensor, alpha_cum: f64) -> Result<ImageTensor> {
    let a = alpha_cum.sqrt();
    let s = (1.0 - alpha_cum).sqrt();
    x0.zip_map(eps, |x, e| (a * x as f64 + s * e as f64) as f32)
}

/// Forward process sample x_t = √ᾱ_t·x0 + √(1-ᾱ_t)·eps, the same t for the whole batch.
pub fn noise_sample(
    x0: &ImageTensor,
    t: TimeStep,
    eps: &ImageTensor,
    sched: &NoiseSchedule,
) -> Result<ImageTensor> {
    noise_with_alpha(x0, eps, sched.alpha_cum(t)?)
}

/// Forward process with one timestep per batch item.
pub fn noise_sample_batch(
    x0: &ImageTensor,
    ts: &[TimeStep],
    eps: &ImageTensor,
    sched: &NoiseSchedule,
) -> Result<ImageTensor> {
    x0.ensure_same_shape(eps)?;
    if ts.len() != x0.batch() {
        return Err(Error::invalid(format!(
            "{} timesteps for a batch of {}",
            ts.len(),
            x0.batch()
        )));
    }
    let mut out = ImageTensor::zeros(x0.shape());
    for (b, &t) in ts.iter().enumerate() {
        let ac = sched.alpha_cum(t)?;
        let (a, s) = (ac.sqrt(), (1.0 - ac).sqrt());
        let dst = out.item_data_mut(b);
        for ((d, &x), &e) in dst.iter_mut().zip(x0.item_data(b)).zip(eps.item_data(b)) {
            *d = (a * x as f64 + s * e as f64) as f32;
        }
    }
    Ok(out)
}

/// One draw of the training randomness: a timestep per example, t ~ U[0, T), and ε ~ N(0, I).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub timesteps: Vec<TimeStep>,
    pub eps: ImageTensor,
}

pub fn draw_training_noise<R: Rng + ?Sized>(
    shape: [usize; 4],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> NoiseDraw {
    let timesteps = (0..shape[0])
        .map(|_| TimeStep(rng.random_range(0..sched.len())))
        .collect();
    let eps = ImageTensor::from_fn(shape, |_, _, _, _| rng.sample::<f32, _>(StandardNormal));
    NoiseDraw { timesteps, eps }
}

/// Monte-Carlo estimate of the ε-prediction objective on one batch:
/// mean over elements of (ε_θ(x_t, c, t) - ε)².
pub fn training_loss<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    x0: &ImageTensor,
    conds: &[Condition],
    model: &M,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    if x0.batch() == 0 || x0.is_empty() {
        return Err(Error::invalid("training loss needs a nonempty batch"));
    }
    if conds.len() != x0.batch() {
        return Err(Error::invalid(format!(
            "{} conditions for a batch of {}",
            conds.len(),
            x0.batch()
        )));
    }
    let draw = draw_training_noise(x0.shape(), sched, rng);
    let x_t = noise_sample_batch(x0, &draw.timesteps, &draw.eps, sched)?;
    let pred = model.predict_eps(&x_t, conds, &draw.timesteps)?;
    pred.ensure_same_shape(&draw.eps)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(draw.eps.data())
        .map(|(&p, &e)| (p as f64 - e as f64).powi(2))
        .sum();
    let loss = sum / pred.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss diverged".into()));
    }
    Ok(loss)
}
