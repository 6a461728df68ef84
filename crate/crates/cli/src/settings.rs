//! Config sections owned by the command-line driver.

use std::path::PathBuf;

use cfdiff::experiments::SweepGrid;
use cfdiff::io::config::{join_list, ConfigSection, RunConfig, SectionReader};
use cfdiff::metrics::DicePooling;
use cfdiff::synth::Split;
use cfdiff::{Error, Result};

/// Paths, seed and parallelism shared by every command.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    /// Output directory for reports and checkpoints.
    pub out: PathBuf,
    /// Corpus directory read by train and the evaluation commands.
    pub corpus: PathBuf,
    /// Checkpoint read by counterfactual, eval and sweep.
    pub checkpoint: PathBuf,
    pub workers: usize,
}

impl ConfigSection for RunSection {
    const SECTION: &'static str = "run";

    fn read(r: &SectionReader<'_>) -> Result<Self> {
        Ok(RunSection {
            seed: r.req("seed")?,
            out: PathBuf::from(r.req::<String>("out")?),
            corpus: PathBuf::from(r.req::<String>("corpus")?),
            checkpoint: PathBuf::from(r.req::<String>("checkpoint")?),
            workers: r.req("workers")?,
        })
    }

    fn write(&self, cfg: &mut RunConfig) {
        let s = Self::SECTION;
        cfg.set(s, "seed", self.seed);
        cfg.set(s, "out", self.out.display());
        cfg.set(s, "corpus", self.corpus.display());
        cfg.set(s, "checkpoint", self.checkpoint.display());
        cfg.set(s, "workers", self.workers);
    }
}

fn pooling_name(p: DicePooling) -> &'static str {
    match p {
        DicePooling::Global => "global",
        DicePooling::PerImage => "per_image",
    }
}

fn parse_pooling(s: &str) -> Result<DicePooling> {
    match s {
        "global" => Ok(DicePooling::Global),
        "per_image" => Ok(DicePooling::PerImage),
        other => Err(Error::Config(format!("unknown pooling {other:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub split: Split,
    /// Evaluate only the first `limit` slices; 0 means all.
    pub limit: usize,
    pub batch_size: usize,
    /// Box-blur radius applied to heatmaps before scoring; 0 disables it.
    pub blur: usize,
    pub pooling: DicePooling,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: Split::Test,
            limit: 0,
            batch_size: 16,
            blur: 0,
            pooling: DicePooling::Global,
        }
    }
}

impl ConfigSection for EvalSection {
    const SECTION: &'static str = "eval";

    fn read(r: &SectionReader<'_>) -> Result<Self> {
        let split: String = r.req("split")?;
        let pooling: String = r.req("pooling")?;
        let e = EvalSection {
            split: split.parse()?,
            limit: r.req("limit")?,
            batch_size: r.req("batch_size")?,
            blur: r.req("blur")?,
            pooling: parse_pooling(&pooling)?,
        };
        if e.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be positive".into()));
        }
        Ok(e)
    }

    fn write(&self, cfg: &mut RunConfig) {
        let s = Self::SECTION;
        cfg.set(s, "split", self.split.name());
        cfg.set(s, "limit", self.limit);
        cfg.set(s, "batch_size", self.batch_size);
        cfg.set(s, "blur", self.blur);
        cfg.set(s, "pooling", pooling_name(self.pooling));
    }
}

/// The (w, depth) grid and the split it runs on.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSection {
    pub grid: SweepGrid,
    pub split: Split,
}

impl ConfigSection for SweepSection {
    const SECTION: &'static str = "sweep";

    fn read(r: &SectionReader<'_>) -> Result<Self> {
        let split: String = r.req("split")?;
        let grid = SweepGrid {
            w: r.list("w")?,
            depth: r.list("depth")?,
        };
        if grid.w.is_empty() || grid.depth.is_empty() {
            return Err(Error::Config("sweep grids must be nonempty".into()));
        }
        if grid.depth.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(Error::Config("sweep.depth fractions must lie in [0, 1]".into()));
        }
        Ok(SweepSection {
            grid,
            split: split.parse()?,
        })
    }

    fn write(&self, cfg: &mut RunConfig) {
        let s = Self::SECTION;
        cfg.set(s, "split", self.split.name());
        cfg.set(s, "w", join_list(&self.grid.w));
        cfg.set(s, "depth", join_list(&self.grid.depth));
    }
}

/// Checkpoints of the two trained networks behind the four ablation variants.
#[derive(Clone, Debug, PartialEq)]
pub struct AblateSection {
    /// Class-conditioned (AdaGroup) network.
    pub plain: PathBuf,
    /// Attention-conditioned network.
    pub full: PathBuf,
}

impl ConfigSection for AblateSection {
    const SECTION: &'static str = "ablate";

    fn read(r: &SectionReader<'_>) -> Result<Self> {
        Ok(AblateSection {
            plain: PathBuf::from(r.req::<String>("plain")?),
            full: PathBuf::from(r.req::<String>("full")?),
        })
    }

    fn write(&self, cfg: &mut RunConfig) {
        cfg.set(Self::SECTION, "plain", self.plain.display());
        cfg.set(Self::SECTION, "full", self.full.display());
    }
}

/// Pass/fail limits checked by eval, sweep and ablate. Every key is optional and the whole
/// section may be absent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Thresholds {
    pub min_ceil_dice: Option<f64>,
    pub min_auprc: Option<f64>,
    /// Required ⌈Dice⌉ margin of the model over the intensity-threshold baseline.
    pub min_margin_over_baseline: Option<f64>,
    /// Required ⌈Dice⌉ gain of the full method over the plain conditional model.
    pub min_ablation_gain: Option<f64>,
}

impl Thresholds {
    pub fn from_run_config(cfg: &RunConfig) -> Result<Self> {
        if cfg.has_section(Self::SECTION) {
            Self::from_config(cfg)
        } else {
            Ok(Self::default())
        }
    }
}

fn opt_f64(r: &SectionReader<'_>, key: &str) -> Result<Option<f64>> {
    let v: f64 = r.opt(key, f64::NAN)?;
    Ok((!v.is_nan()).then_some(v))
}

impl ConfigSection for Thresholds {
    const SECTION: &'static str = "thresholds";

    fn read(r: &SectionReader<'_>) -> Result<Self> {
        Ok(Thresholds {
            min_ceil_dice: opt_f64(r, "min_ceil_dice")?,
            min_auprc: opt_f64(r, "min_auprc")?,
            min_margin_over_baseline: opt_f64(r, "min_margin_over_baseline")?,
            min_ablation_gain: opt_f64(r, "min_ablation_gain")?,
        })
    }

    fn write(&self, cfg: &mut RunConfig) {
        let s = Self::SECTION;
        for (k, v) in [
            ("min_ceil_dice", self.min_ceil_dice),
            ("min_auprc", self.min_auprc),
            ("min_margin_over_baseline", self.min_margin_over_baseline),
            ("min_ablation_gain", self.min_ablation_gain),
        ] {
            if let Some(v) = v {
                cfg.set(s, k, v);
            }
        }
    }
}
