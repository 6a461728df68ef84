//! The six commands. Each reads one run config, applies flag overrides to it and stores the
//! effective config next to its outputs, so the echo alone reproduces the run.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cfdiff::experiments::{
    ablation_suite, evaluate_heatmaps, evaluate_threshold_baseline, run_parallel, sweep, worker_count,
    AblationStage, AblationVariant, EvalReport, EvalSet, RunMeta,
};
use cfdiff::io::config::{ConfigSection, RunConfig};
use cfdiff::io::container::TensorContainer;
use cfdiff::io::corpus::{read_split, write_corpus};
use cfdiff::io::{pgm, report, write_atomic};
use cfdiff::metrics::DicePooling;
use cfdiff::pipeline::{box_blur, counterfactual, heatmaps_batched, to_model_range};
use cfdiff::synth::{generate_corpus, CorpusSpec, LabelledSlice, Split};
use cfdiff::{EpsModel, ImageTensor, NoiseSchedule, SamplerConfig};
use cfdiff_denoiser::checkpoint::{self, Checkpoint};
use cfdiff_denoiser::{train, Architecture, Denoiser, TrainConfig};
use log::info;

use crate::settings::{AblateSection, EvalSection, RunSection, SweepSection, Thresholds};

/// Values given on the command line; each replaces the matching config key.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub w: Option<f64>,
    pub encode_steps: Option<usize>,
    pub percentile: Option<f64>,
    pub ddim_steps: Option<usize>,
    pub workers: Option<usize>,
}

impl Overrides {
    /// Writes the overrides into `cfg`. The seed also reseeds the corpus and training when
    /// those sections are present.
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.set("run", "seed", s);
            for section in ["corpus", "train"] {
                if cfg.has_section(section) {
                    cfg.set(section, "seed", s);
                }
            }
        }
        if let Some(p) = &self.out {
            cfg.set("run", "out", p.display());
        }
        if let Some(p) = &self.checkpoint {
            cfg.set("run", "checkpoint", p.display());
        }
        if let Some(v) = self.workers {
            cfg.set("run", "workers", v);
        }
        for (key, v) in [
            ("w", self.w.map(|v| v.to_string())),
            ("L", self.encode_steps.map(|v| v.to_string())),
            ("s", self.percentile.map(|v| v.to_string())),
            ("ddim_steps", self.ddim_steps.map(|v| v.to_string())),
        ] {
            if let Some(v) = v {
                cfg.set("sampler", key, v);
            }
        }
    }
}

/// Whether every configured threshold held.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    pub violations: Vec<String>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    fn at_least(&mut self, what: &str, value: f64, min: Option<f64>) {
        if let Some(min) = min {
            // NaN from a failed cell counts as a violation
            if !(value >= min) {
                self.violations.push(format!("{what} = {value:.4} below required {min}"));
            }
        }
    }
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?;
    overrides.apply(&mut cfg);
    Ok(cfg)
}

fn save_echo(cfg: &RunConfig, dir: &Path, name: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    cfg.save(&dir.join(name))?;
    Ok(())
}

/// Generates the corpus into `run.corpus`: three split containers and a manifest.
pub fn synth(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let run = RunSection::from_config(cfg)?;
    let spec = CorpusSpec::from_config(cfg)?;
    let corpus = generate_corpus(&spec)?;
    let written = write_corpus(&run.corpus, &corpus)?;
    info!("wrote {} files to {}", written.len(), run.corpus.display());
    Ok(written)
}

/// Trains on the train split and writes the checkpoint plus `train_log.csv` in `run.out`.
pub fn train_model(cfg: &RunConfig) -> Result<cfdiff_denoiser::TrainReport> {
    let run = RunSection::from_config(cfg)?;
    let arch = Architecture::from_config(cfg)?;
    let tcfg = TrainConfig::from_config(cfg)?;
    let sched = cfdiff::io::config::ScheduleSpec::from_config(cfg)?.build()?;
    let slices = read_split(&run.corpus, Split::Train)?;
    let refs: Vec<&LabelledSlice> = slices.iter().collect();
    let images = to_model_range(&cfdiff::synth::stack_images(&refs)?);
    let labels: Vec<_> = slices.iter().map(|s| s.label).collect();

    let mut model = Denoiser::new(arch, tcfg.seed, candle_core::DType::F32)?;
    let every = (tcfg.steps / 20).max(1);
    let report = train(&mut model, &images, &labels, &sched, &tcfg, |row| {
        if row.step % every == 0 || row.step + 1 == tcfg.steps {
            info!("step {} loss {:.5} smoothed {:.5}", row.step, row.loss, row.ema_loss);
        }
    })?;
    info!(
        "realized drop fraction {:.4} over {} samples (configured {})",
        report.null_fraction, report.samples, tcfg.drop_prob
    );
    std::fs::create_dir_all(&run.out)?;
    if let Some(parent) = run.checkpoint.parent() {
        std::fs::create_dir_all(parent)?;
    }
    checkpoint::save(&run.checkpoint, &model, &sched, cfg)?;
    let mut log = report.csv();
    log.push_str(&format!("# null_fraction {} samples {}\n", report.null_fraction, report.samples));
    write_atomic(&run.out.join("train_log.csv"), log.as_bytes())?;
    info!("checkpoint {} after {:.1}s", run.checkpoint.display(), report.elapsed_secs);
    Ok(report)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Sampler settings: the config's `[sampler]` section when present, else the one echoed in
/// the checkpoint, else the defaults. Flag overrides apply on top in every case.
fn sampler_for(cfg: Option<&RunConfig>, ckpt: &Checkpoint, overrides: &Overrides) -> Result<SamplerConfig> {
    let source = match cfg {
        Some(c) if c.has_section(SamplerConfig::SECTION) => Some(c.clone()),
        _ if ckpt.config.has_section(SamplerConfig::SECTION) => Some(ckpt.config.clone()),
        _ => None,
    };
    let mut merged = RunConfig::new();
    match source {
        Some(c) => merged.copy_section(&c, SamplerConfig::SECTION),
        None => SamplerConfig::default().write(&mut merged),
    }
    overrides.apply(&mut merged);
    Ok(SamplerConfig::from_config(&merged)?)
}

/// Inputs for [`counterfactual_files`].
pub struct CounterfactualJob<'a> {
    pub checkpoint: &'a Path,
    /// Container with an `images` entry `[N, M, H, W]` in corpus intensity range.
    pub input: &'a Path,
    pub out: &'a Path,
    pub config: Option<&'a RunConfig>,
    pub overrides: &'a Overrides,
    /// Also write per-image PGM previews of channel 0, the counterfactual and the heatmap.
    pub pgm: bool,
}

/// Writes `heatmap.cfd` and `counterfactual.cfd`; the counterfactual is mapped back to the
/// input's intensity range.
pub fn counterfactual_files(job: &CounterfactualJob<'_>) -> Result<Vec<PathBuf>> {
    let ckpt = load_checkpoint(job.checkpoint)?;
    let sampler = sampler_for(job.config, &ckpt, job.overrides)?;
    let images = TensorContainer::read(job.input)?.image("images")?;
    ckpt.model.arch.check_input(&images.shape())?;
    let res = counterfactual(&ckpt.model, &to_model_range(&images), &sampler, &ckpt.schedule, false)?;
    let cf = res.counterfactual.map(|v| (v + 1.0) / 2.0);

    std::fs::create_dir_all(job.out)?;
    let mut written = Vec::new();
    let mut echo = job.config.cloned().unwrap_or_default();
    sampler.write(&mut echo);
    for (name, t) in [("heatmap", &res.heatmap), ("counterfactual", &cf)] {
        let mut c = TensorContainer::new();
        c.push_image(name, t)?;
        let text = echo.to_text();
        c.push_u8("config", &[text.len()], text.into_bytes())?;
        let path = job.out.join(format!("{name}.cfd"));
        c.write(&path)?;
        written.push(path);
    }
    if job.pgm {
        for b in 0..images.batch() {
            for (tag, t) in [("input", &images), ("counterfactual", &cf), ("heatmap", &res.heatmap)] {
                let path = job.out.join(format!("{tag}_{b:03}.pgm"));
                pgm::write(&path, t, b, 0)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

fn eval_set(run: &RunSection, split: Split, limit: usize) -> Result<EvalSet> {
    let slices = read_split(&run.corpus, split)?;
    let take = if limit == 0 { slices.len() } else { limit.min(slices.len()) };
    let refs: Vec<&LabelledSlice> = slices[..take].iter().collect();
    Ok(EvalSet::from_slices(&refs)?)
}

/// Heatmaps for the whole set with chunks spread over `workers` threads.
pub fn parallel_heatmaps<M: EpsModel + Sync + ?Sized>(
    model: &M,
    set: &EvalSet,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    batch_size: usize,
    workers: usize,
) -> cfdiff::Result<ImageTensor> {
    let images = to_model_range(&set.images);
    let bs = batch_size.max(1);
    let chunks = images.batch().div_ceil(bs);
    let parts: Vec<cfdiff::Result<ImageTensor>> = run_parallel(chunks, workers, |i| {
        let end = ((i + 1) * bs).min(images.batch());
        heatmaps_batched(model, &images.slice_batch(i * bs, end), cfg, sched, bs)
    });
    let parts = parts.into_iter().collect::<cfdiff::Result<Vec<_>>>()?;
    ImageTensor::concat(&parts.iter().collect::<Vec<_>>())
}

/// Scores one model on a set with the eval section's blur and pooling, returning the raw
/// heatmaps too. Failures become a report with `error` set and no heatmaps.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_with(
    method: &str,
    model: &(dyn EpsModel + Sync),
    set: &EvalSet,
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
    ev: &EvalSection,
    workers: usize,
    seed: u64,
) -> (EvalReport, Option<ImageTensor>) {
    let meta = RunMeta {
        method: method.to_string(),
        sampler: Some(sampler.clone()),
        seed,
        data_hash: set.hash,
    };
    let start = std::time::Instant::now();
    let run = || -> cfdiff::Result<(EvalReport, ImageTensor)> {
        let hm = parallel_heatmaps(model, set, sampler, sched, ev.batch_size, workers)?;
        hm.check_finite("heatmap")?;
        let r = evaluate_heatmaps(meta.clone(), &box_blur(&hm, ev.blur), &set.masks, ev.pooling)?;
        Ok((r, hm))
    };
    match run() {
        Ok((mut r, hm)) => {
            r.elapsed_secs = start.elapsed().as_secs_f64();
            (r, Some(hm))
        }
        Err(e) => (EvalReport::failed(meta, &e, start.elapsed().as_secs_f64()), None),
    }
}

fn finish_reports(dir: &Path, stem: &str, reports: &[EvalReport]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    report::write_reports(dir, stem, reports)?;
    print!("{}", report::summary_table(reports));
    Ok(())
}

/// Evaluates the checkpoint and the intensity baseline on `eval.split`; writes `eval.csv`.
pub fn eval(cfg: &RunConfig) -> Result<(Vec<EvalReport>, Outcome)> {
    let run = RunSection::from_config(cfg)?;
    let ev = EvalSection::from_config(cfg)?;
    let limits = Thresholds::from_run_config(cfg)?;
    let sampler = SamplerConfig::from_config(cfg)?;
    let ckpt = load_checkpoint(&run.checkpoint)?;
    let set = eval_set(&run, ev.split, ev.limit)?;
    let workers = worker_count(run.workers);

    let (model, _) = evaluate_with("model", &ckpt.model, &set, &sampler, &ckpt.schedule, &ev, workers, run.seed);
    let baseline = evaluate_threshold_baseline(&set, run.seed)?;
    let mut outcome = Outcome::default();
    outcome.at_least("model ceil_dice", model.ceil_dice, limits.min_ceil_dice);
    outcome.at_least("model auprc", model.auprc, limits.min_auprc);
    outcome.at_least(
        "margin over baseline",
        model.ceil_dice - baseline.ceil_dice,
        limits.min_margin_over_baseline,
    );
    let reports = vec![model, baseline];
    finish_reports(&run.out, "eval", &reports)?;
    save_echo(cfg, &run.out, "eval.cfg")?;
    Ok((reports, outcome))
}

/// Scores stored heatmaps: a container with `heatmap` f32 `[N, 1, H, W]` and `mask` u8
/// `[N, H, W]` entries.
pub fn eval_heatmap_file(path: &Path, out: &Path, limits: &Thresholds) -> Result<(Vec<EvalReport>, Outcome)> {
    let c = TensorContainer::read(path)?;
    let hm = c.image("heatmap")?;
    let masks = c.masks("mask")?;
    let meta = RunMeta {
        method: "stored".into(),
        sampler: None,
        seed: 0,
        data_hash: 0,
    };
    let r = evaluate_heatmaps(meta, &hm, &masks, DicePooling::Global)?;
    let mut outcome = Outcome::default();
    outcome.at_least("stored ceil_dice", r.ceil_dice, limits.min_ceil_dice);
    outcome.at_least("stored auprc", r.auprc, limits.min_auprc);
    let reports = vec![r];
    finish_reports(out, "eval", &reports)?;
    Ok((reports, outcome))
}

/// The (w, L) grid on `sweep.split`; writes `sweep.csv`. Thresholds apply to the best cell.
pub fn sweep_grid(cfg: &RunConfig) -> Result<(Vec<EvalReport>, Outcome)> {
    let run = RunSection::from_config(cfg)?;
    let ev = EvalSection::from_config(cfg)?;
    let sw = SweepSection::from_config(cfg)?;
    let limits = Thresholds::from_run_config(cfg)?;
    let base = SamplerConfig::from_config(cfg)?;
    let ckpt = load_checkpoint(&run.checkpoint)?;
    let set = eval_set(&run, sw.split, ev.limit)?;
    let reports = sweep(
        "model",
        &ckpt.model,
        &set,
        &base,
        &sw.grid,
        &ckpt.schedule,
        ev.batch_size,
        worker_count(run.workers),
        run.seed,
    )?;
    let best = |f: fn(&EvalReport) -> f64| reports.iter().map(f).filter(|v| v.is_finite()).fold(f64::NAN, f64::max);
    let mut outcome = Outcome::default();
    outcome.at_least("best ceil_dice", best(|r| r.ceil_dice), limits.min_ceil_dice);
    outcome.at_least("best auprc", best(|r| r.auprc), limits.min_auprc);
    finish_reports(&run.out, "sweep", &reports)?;
    save_echo(cfg, &run.out, "sweep.cfg")?;
    Ok((reports, outcome))
}

/// The four cumulative variants: the class-conditioned network without and with guidance,
/// then the attention-conditioned network without and with dynamic normalization.
pub fn ablate(cfg: &RunConfig) -> Result<(Vec<EvalReport>, Outcome)> {
    let run = RunSection::from_config(cfg)?;
    let ev = EvalSection::from_config(cfg)?;
    let ab = AblateSection::from_config(cfg)?;
    let limits = Thresholds::from_run_config(cfg)?;
    let full_sampler = SamplerConfig::from_config(cfg)?;
    let plain = load_checkpoint(&ab.plain)?;
    let full = load_checkpoint(&ab.full)?;
    if plain.schedule != full.schedule {
        bail!("ablation checkpoints were trained with different noise schedules");
    }
    let set = eval_set(&run, ev.split, ev.limit)?;
    let variants: Vec<AblationVariant<'_>> = AblationStage::ALL
        .iter()
        .map(|&stage| AblationVariant {
            stage,
            model: match stage {
                AblationStage::PlainCdpm | AblationStage::ImplicitGuidance => &plain.model,
                _ => &full.model,
            },
            sampler: stage.sampler(&full_sampler),
        })
        .collect();
    let reports = ablation_suite(
        &set,
        &variants,
        &full.schedule,
        ev.batch_size,
        worker_count(run.workers),
        run.seed,
    )?;
    let mut outcome = Outcome::default();
    let last = &reports[reports.len() - 1];
    outcome.at_least("full ceil_dice", last.ceil_dice, limits.min_ceil_dice);
    outcome.at_least("full auprc", last.auprc, limits.min_auprc);
    outcome.at_least(
        "gain over plain CDPM",
        last.ceil_dice - reports[0].ceil_dice,
        limits.min_ablation_gain,
    );
    finish_reports(&run.out, "ablate", &reports)?;
    save_echo(cfg, &run.out, "ablate.cfg")?;
    Ok((reports, outcome))
}
