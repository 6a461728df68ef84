//! Evaluation harnesses: single evaluations, the (w, L) sweep and the component ablation.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::metrics::{auprc, pool_pixels, sweep_thresholds, threshold_baseline, DicePooling};
use crate::model::EpsModel;
use crate::pipeline::{heatmaps_batched, to_model_range};
use crate::sampler::{NormMode, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::synth::{split_hash, stack_images, LabelledSlice};
use crate::tensor::{BinaryMask, ImageTensor};

/// Sampler settings recorded with a report; `None` for methods that do not sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMeta {
    pub method: String,
    pub sampler: Option<SamplerConfig>,
    pub seed: u64,
    pub data_hash: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub meta: RunMeta,
    pub auprc: f64,
    pub ceil_dice: f64,
    pub best_threshold: f64,
    /// `(threshold, dice)` on the reporting grid.
    pub curve: Vec<(f64, f64)>,
    pub elapsed_secs: f64,
    /// Set when the cell failed; metric fields are NaN then.
    pub error: Option<String>,
}

impl EvalReport {
    pub fn failed(meta: RunMeta, err: &Error, elapsed_secs: f64) -> Self {
        Self {
            meta,
            auprc: f64::NAN,
            ceil_dice: f64::NAN,
            best_threshold: f64::NAN,
            curve: Vec::new(),
            elapsed_secs,
            error: Some(err.to_string()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Evaluation data: model-range images with aligned ground-truth masks.
#[derive(Clone, Debug)]
pub struct EvalSet {
    /// Images in `[0, 1.5]` as stored in the corpus.
    pub images: ImageTensor,
    pub masks: Vec<BinaryMask>,
    pub hash: u64,
}

impl EvalSet {
    pub fn from_slices(slices: &[&LabelledSlice]) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::invalid("evaluation set is empty"));
        }
        Ok(Self {
            images: stack_images(slices)?,
            masks: slices.iter().map(|s| s.mask.clone()).collect(),
            hash: split_hash(slices),
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Scores precomputed heatmaps against ground truth.
pub fn evaluate_heatmaps(
    meta: RunMeta,
    heatmaps: &ImageTensor,
    gts: &[BinaryMask],
    pooling: DicePooling,
) -> Result<EvalReport> {
    let start = Instant::now();
    let (scores, labels) = pool_pixels(heatmaps, gts)?;
    let ap = auprc(&scores, &labels)?;
    let sweep = sweep_thresholds(heatmaps, gts, pooling)?;
    Ok(EvalReport {
        meta,
        auprc: ap,
        ceil_dice: sweep.best_dice,
        best_threshold: sweep.best_threshold,
        curve: sweep.curve,
        elapsed_secs: start.elapsed().as_secs_f64(),
        error: None,
    })
}

/// Runs the counterfactual pipeline over the set and scores the heatmaps.
pub fn evaluate_model<M: EpsModel + ?Sized>(
    method: &str,
    model: &M,
    set: &EvalSet,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    batch_size: usize,
    seed: u64,
) -> EvalReport {
    let meta = RunMeta {
        method: method.to_string(),
        sampler: Some(cfg.clone()),
        seed,
        data_hash: set.hash,
    };
    let start = Instant::now();
    let run = || -> Result<EvalReport> {
        let hm = heatmaps_batched(model, &to_model_range(&set.images), cfg, sched, batch_size)?;
        hm.check_finite("heatmap")?;
        evaluate_heatmaps(meta.clone(), &hm, &set.masks, DicePooling::Global)
    };
    match run() {
        Ok(mut r) => {
            r.elapsed_secs = start.elapsed().as_secs_f64();
            r
        }
        Err(e) => EvalReport::failed(meta, &e, start.elapsed().as_secs_f64()),
    }
}

/// Channel-0 intensity scored directly.
pub fn evaluate_threshold_baseline(set: &EvalSet, seed: u64) -> Result<EvalReport> {
    let meta = RunMeta {
        method: "threshold".into(),
        sampler: None,
        seed,
        data_hash: set.hash,
    };
    evaluate_heatmaps(meta, &threshold_baseline(&set.images), &set.masks, DicePooling::Global)
}

/// Resolves the worker count: the requested value capped by `CFDIFF_THREADS` when set.
pub fn worker_count(requested: usize) -> usize {
    let cap = std::env::var("CFDIFF_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&c| c > 0);
    let n = requested.max(1);
    cap.map_or(n, |c| n.min(c))
}

/// Runs `jobs` on up to `workers` threads; results come back in job order.
pub fn run_parallel<T: Send>(count: usize, workers: usize, job: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..count).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1).min(count.max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let out = job(i);
                slots.lock().unwrap()[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|s| s.expect("every job ran"))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub w: Vec<f64>,
    /// Encode depth as a fraction of `ddim_steps`.
    pub depth: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            w: vec![0.0, 1.0, 1.5, 2.0, 3.0, 5.0],
            depth: vec![0.1, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

impl SweepGrid {
    /// Cells in row-major order over `(w, depth)`.
    pub fn cells(&self, base: &SamplerConfig) -> Vec<SamplerConfig> {
        let mut out = Vec::with_capacity(self.w.len() * self.depth.len());
        for &w in &self.w {
            for &f in &self.depth {
                out.push(
                    SamplerConfig {
                        guidance_scale: w,
                        ..base.clone()
                    }
                    .with_depth_fraction(f),
                );
            }
        }
        out
    }
}

/// Evaluates every `(w, L)` cell. Failing cells yield a report with `error` set.
#[allow(clippy::too_many_arguments)]
pub fn sweep<M: EpsModel + Sync + ?Sized>(
    method: &str,
    model: &M,
    set: &EvalSet,
    base: &SamplerConfig,
    grid: &SweepGrid,
    sched: &NoiseSchedule,
    batch_size: usize,
    workers: usize,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    if grid.w.is_empty() || grid.depth.is_empty() {
        return Err(Error::invalid("sweep grids must be nonempty"));
    }
    let cells = grid.cells(base);
    Ok(run_parallel(cells.len(), workers, |i| {
        evaluate_model(method, model, set, &cells[i], sched, batch_size, seed)
    }))
}

/// The four cumulative components of the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum AblationStage {
    PlainCdpm,
    ImplicitGuidance,
    AttentionConditioning,
    DynamicNormalization,
}

impl AblationStage {
    pub const ALL: [AblationStage; 4] = [
        AblationStage::PlainCdpm,
        AblationStage::ImplicitGuidance,
        AblationStage::AttentionConditioning,
        AblationStage::DynamicNormalization,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            AblationStage::PlainCdpm => "cdpm",
            AblationStage::ImplicitGuidance => "+guidance",
            AblationStage::AttentionConditioning => "+attention",
            AblationStage::DynamicNormalization => "+dn",
        }
    }

    /// Sampler settings for this stage derived from the full-method settings: plain CDPM
    /// decodes conditionally at w = 1 without normalization; guidance stages keep `w` but
    /// only the last one normalizes dynamically.
    pub fn sampler(self, full: &SamplerConfig) -> SamplerConfig {
        let mut cfg = full.clone();
        match self {
            AblationStage::PlainCdpm => {
                cfg.guidance_scale = 1.0;
                cfg.norm_mode = NormMode::None;
            }
            AblationStage::ImplicitGuidance | AblationStage::AttentionConditioning => {
                cfg.norm_mode = NormMode::None;
            }
            AblationStage::DynamicNormalization => cfg.norm_mode = NormMode::Dynamic,
        }
        cfg
    }
}

pub struct AblationVariant<'a> {
    pub stage: AblationStage,
    pub model: &'a (dyn EpsModel + Sync),
    pub sampler: SamplerConfig,
}

/// One report per stage, in stage order, all on the same data and seed.
pub fn ablation_suite(
    set: &EvalSet,
    variants: &[AblationVariant<'_>],
    sched: &NoiseSchedule,
    batch_size: usize,
    workers: usize,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    let mut order: Vec<&AblationVariant> = Vec::with_capacity(4);
    for stage in AblationStage::ALL {
        let found: Vec<_> = variants.iter().filter(|v| v.stage == stage).collect();
        match found.len() {
            0 => return Err(Error::invalid(format!("missing ablation variant {}", stage.tag()))),
            1 => order.push(found[0]),
            _ => return Err(Error::invalid(format!("duplicate ablation variant {}", stage.tag()))),
        }
    }
    if variants.len() != order.len() {
        return Err(Error::invalid("unexpected extra ablation variants"));
    }
    Ok(run_parallel(order.len(), workers, |i| {
        let v = order[i];
        evaluate_model(v.stage.tag(), v.model, set, &v.sampler, sched, batch_size, seed)
    }))
}
