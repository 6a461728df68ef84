//! ε-prediction training with condition dropping, Adam and an EMA shadow.

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use cfdiff::io::config::{ConfigSection, RunConfig, SectionReader};
use cfdiff::schedule::{draw_training_noise, noise_sample_batch, NoiseDraw};
use cfdiff::{Condition, ImageTensor, NoiseSchedule};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::layers::mse;
use crate::model::Denoiser;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Probability of replacing a sample's label by the null condition.
    pub drop_prob: f64,
    pub ema_decay: f64,
    pub seed: u64,
    /// Train on healthy slices only.
    pub healthy_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 16,
            steps: 2000,
            drop_prob: 0.35,
            ema_decay: 0.999,
            seed: 0,
            healthy_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(invalid(format!("drop probability {} outside [0, 1)", self.drop_prob)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(invalid(format!("EMA decay {} outside [0, 1]", self.ema_decay)));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(invalid("batch size and step count must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

impl ConfigSection for TrainConfig {
    const SECTION: &'static str = "train";

    fn read(r: &SectionReader<'_>) -> cfdiff::Result<Self> {
        let cfg = TrainConfig {
            lr: r.req("lr")?,
            batch_size: r.req("batch_size")?,
            steps: r.req("steps")?,
            drop_prob: r.req("drop_prob")?,
            ema_decay: r.req("ema_decay")?,
            seed: r.req("seed")?,
            healthy_only: r.req("healthy_only")?,
        };
        cfg.validate().map_err(|e| cfdiff::Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    fn write(&self, cfg: &mut RunConfig) {
        let s = Self::SECTION;
        cfg.set(s, "lr", self.lr);
        cfg.set(s, "batch_size", self.batch_size);
        cfg.set(s, "steps", self.steps);
        cfg.set(s, "drop_prob", self.drop_prob);
        cfg.set(s, "ema_decay", self.ema_decay);
        cfg.set(s, "seed", self.seed);
        cfg.set(s, "healthy_only", self.healthy_only);
    }
}

/// Replaces each label by `Null` with probability `p`.
pub fn drop_conditions(labels: &[Condition], p: f64, rng: &mut impl Rng) -> Vec<Condition> {
    labels
        .iter()
        .map(|&c| if rng.random::<f64>() < p { Condition::Null } else { c })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    /// Exponentially smoothed loss (factor 0.98), bias corrected.
    pub ema_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    /// Fraction of training samples whose label was dropped to `Null`.
    pub null_fraction: f64,
    pub samples: usize,
    pub elapsed_secs: f64,
}

impl TrainReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("step,loss,ema_loss\n");
        for r in &self.log {
            s.push_str(&format!("{},{},{}\n", r.step, r.loss, r.ema_loss));
        }
        s
    }

    /// Mean smoothed loss over a step window.
    pub fn mean_loss(&self, from: usize, to: usize) -> Option<f64> {
        let rows: Vec<f64> = self
            .log
            .iter()
            .filter(|r| r.step >= from && r.step < to)
            .map(|r| r.loss)
            .collect();
        (!rows.is_empty()).then(|| rows.iter().sum::<f64>() / rows.len() as f64)
    }
}

/// Trains on model-range images with one label each. Returns the per-step log.
///
/// Each step draws a batch from a per-epoch shuffle, drops labels, draws one timestep per
/// item and Gaussian noise, and takes an Adam step on the ε-prediction MSE; the EMA shadow
/// follows every step. A non-finite loss aborts with [`Error::Diverged`].
pub fn train(
    model: &mut Denoiser,
    images: &ImageTensor,
    labels: &[Condition],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LogRow),
) -> Result<TrainReport> {
    cfg.validate()?;
    if labels.len() != images.batch() {
        return Err(invalid("one label per training image required"));
    }
    let pool: Vec<usize> = (0..images.batch())
        .filter(|&i| !cfg.healthy_only || labels[i] == Condition::Healthy)
        .collect();
    if pool.is_empty() {
        return Err(invalid("empty training set"));
    }
    model.arch.check_input(&images.shape())?;
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(
        model.params.vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?;
    let mut order = pool.clone();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(cfg.steps);
    let (mut smooth, mut nulls, mut samples) = (0.0, 0usize, 0usize);
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let items: Vec<ImageTensor> = idx.iter().map(|&i| images.item(i)).collect();
        let x0 = ImageTensor::concat(&items.iter().collect::<Vec<_>>())?;
        let conds = drop_conditions(&idx.iter().map(|&i| labels[i]).collect::<Vec<_>>(), cfg.drop_prob, &mut rng);
        nulls += conds.iter().filter(|c| c.is_null()).count();
        samples += conds.len();
        let draw = draw_noise(&x0, sched, &mut rng)?;
        let x_t = noise_sample_batch(&x0, &draw.timesteps, &draw.eps, sched)?;

        let w = model.params.live();
        let ts: Vec<usize> = draw.timesteps.iter().map(|t| t.0).collect();
        let pred = model.forward_tensor(&w, &model.to_tensor(&x_t)?, &ts, &conds)?;
        let target = model.to_tensor(&draw.eps)?;
        let loss_t = mse(&pred, &target)?;
        let loss = loss_t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let grads = loss_t.backward()?;
        opt.step(&grads)?;
        model.params.update_ema(cfg.ema_decay)?;

        smooth = 0.98 * smooth + 0.02 * loss;
        let row = LogRow {
            step,
            loss,
            ema_loss: smooth / (1.0 - 0.98f64.powi(step as i32 + 1)),
        };
        on_step(&row);
        log.push(row);
    }
    Ok(TrainReport {
        log,
        null_fraction: nulls as f64 / samples as f64,
        samples,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

fn draw_noise(x0: &ImageTensor, sched: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Result<NoiseDraw> {
    Ok(draw_training_noise(x0.shape(), sched, rng))
}

/// ε-prediction loss of the given weights on a fixed batch, without gradients.
pub fn evaluate_loss(
    model: &Denoiser,
    x0: &ImageTensor,
    conds: &[Condition],
    sched: &NoiseSchedule,
    seed: u64,
    use_ema: bool,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = draw_noise(x0, sched, &mut rng)?;
    let x_t = noise_sample_batch(x0, &draw.timesteps, &draw.eps, sched)?;
    let ts: Vec<usize> = draw.timesteps.iter().map(|t| t.0).collect();
    let pred: Tensor = model.forward_tensor(&model.params.weights(use_ema), &model.to_tensor(&x_t)?, &ts, conds)?;
    Ok(mse(&pred, &model.to_tensor(&draw.eps)?)?
        .to_dtype(candle_core::DType::F64)?
        .to_scalar::<f64>()?)
}
