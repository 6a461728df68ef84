//! The end-to-end localization experiment: three networks trained on one corpus, scored on
//! its test split next to the intensity baseline.

use std::time::Instant;

use anyhow::Result;
use candle_core::DType;
use cfdiff::experiments::{evaluate_threshold_baseline, worker_count, AblationStage, EvalReport, EvalSet};
use cfdiff::io::config::{ConfigSection, RunConfig, ScheduleSpec};
use cfdiff::pipeline::to_model_range;
use cfdiff::synth::{generate_corpus, stack_images, CorpusSpec, LabelledSlice, Split};
use cfdiff::{Condition, NoiseSchedule, SamplerConfig};
use cfdiff_denoiser::{train, Architecture, ConditioningMode, Denoiser, TrainConfig, TrainReport};
use log::info;

use crate::commands::evaluate_with;
use crate::settings::{EvalSection, RunSection};

/// Which network a variant trains and how it samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Attention conditioning, guidance and dynamic normalization.
    Full,
    /// Class embedding in the normalization layers, conditional decoding at w = 1.
    PlainCdpm,
    /// Unconditional network trained on healthy slices only.
    HealthyOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::PlainCdpm, Variant::HealthyOnly];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::PlainCdpm => "cdpm",
            Variant::HealthyOnly => "cdpm_healthy",
        }
    }

    fn mode(self) -> ConditioningMode {
        match self {
            Variant::Full => ConditioningMode::Attention,
            Variant::PlainCdpm => ConditioningMode::AdaGroup,
            Variant::HealthyOnly => ConditioningMode::Unconditional,
        }
    }

    fn sampler(self, full: &SamplerConfig) -> SamplerConfig {
        match self {
            Variant::Full => full.clone(),
            _ => AblationStage::PlainCdpm.sampler(full),
        }
    }
}

pub struct VariantResult {
    pub variant: Variant,
    pub report: EvalReport,
    pub train: TrainReport,
    /// Mean heatmap value over healthy and over unhealthy test slices.
    pub healthy_mean: f64,
    pub unhealthy_mean: f64,
}

pub struct LocalizationResult {
    pub variants: Vec<VariantResult>,
    pub baseline: EvalReport,
    pub elapsed_secs: f64,
}

impl LocalizationResult {
    pub fn get(&self, v: Variant) -> &VariantResult {
        self.variants.iter().find(|r| r.variant == v).expect("every variant runs")
    }
}

fn with_mode(arch: &Architecture, mode: ConditioningMode) -> Architecture {
    match arch {
        Architecture::UNet(c) => Architecture::UNet(cfdiff_denoiser::UNetConfig { mode, ..c.clone() }),
        other => other.clone(),
    }
}

/// Mean heatmap value per slice label.
fn label_means(heatmaps: &cfdiff::ImageTensor, slices: &[&LabelledSlice]) -> (f64, f64) {
    let (mut sums, mut counts) = ([0.0f64; 2], [0usize; 2]);
    for (b, s) in slices.iter().enumerate() {
        let k = (s.label == Condition::Unhealthy) as usize;
        sums[k] += heatmaps.item_data(b).iter().map(|&v| v as f64).sum::<f64>();
        counts[k] += heatmaps.item_len();
    }
    (sums[0] / counts[0].max(1) as f64, sums[1] / counts[1].max(1) as f64)
}

/// Runs `variants` on the corpus, architecture, training and sampler sections of `cfg`.
pub fn localization(cfg: &RunConfig, variants: &[Variant]) -> Result<LocalizationResult> {
    let start = Instant::now();
    let run = RunSection::from_config(cfg)?;
    let ev = EvalSection::from_config(cfg)?;
    let spec = CorpusSpec::from_config(cfg)?;
    let arch = Architecture::from_config(cfg)?;
    let tcfg = TrainConfig::from_config(cfg)?;
    let sampler = SamplerConfig::from_config(cfg)?;
    let sched: NoiseSchedule = ScheduleSpec::from_config(cfg)?.build()?;
    let workers = worker_count(run.workers);

    let corpus = generate_corpus(&spec)?;
    let train_split = corpus.split(Split::Train);
    let images = to_model_range(&stack_images(&train_split)?);
    let labels: Vec<Condition> = train_split.iter().map(|s| s.label).collect();
    let mut test = corpus.split(ev.split);
    if ev.limit > 0 {
        test.truncate(ev.limit);
    }
    let set = EvalSet::from_slices(&test)?;
    let baseline = evaluate_threshold_baseline(&set, run.seed)?;

    let mut results = Vec::new();
    for &variant in variants {
        let t0 = Instant::now();
        let mut model = Denoiser::new(with_mode(&arch, variant.mode()), tcfg.seed, DType::F32)?;
        let vcfg = TrainConfig {
            healthy_only: variant == Variant::HealthyOnly,
            ..tcfg.clone()
        };
        let report = train(&mut model, &images, &labels, &sched, &vcfg, |_| {})?;
        info!(
            "{}: trained {} steps in {:.0}s, final smoothed loss {:.4}",
            variant.tag(),
            vcfg.steps,
            t0.elapsed().as_secs_f64(),
            report.log.last().map_or(f64::NAN, |r| r.ema_loss)
        );
        let vs = variant.sampler(&sampler);
        let (eval, hm) = evaluate_with(variant.tag(), &model, &set, &vs, &sched, &ev, workers, run.seed);
        let (healthy_mean, unhealthy_mean) = hm.map_or((f64::NAN, f64::NAN), |hm| label_means(&hm, &test));
        info!(
            "{}: ceil_dice {:.3} auprc {:.3} healthy/unhealthy heatmap {:.3}",
            variant.tag(),
            eval.ceil_dice,
            eval.auprc,
            healthy_mean / unhealthy_mean
        );
        results.push(VariantResult {
            variant,
            report: eval,
            train: report,
            healthy_mean,
            unhealthy_mean,
        });
    }
    Ok(LocalizationResult {
        variants: results,
        baseline,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}
