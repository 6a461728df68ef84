//! Checkpoints in the tensor container: live and EMA weights, the noise schedule and a
//! config echo.
//!
//! Entries: `config` (u8, UTF-8 run config with an `[architecture]` section),
//! `schedule.betas` (u8 `[T, 8]`, little-endian f64), `live/<name>` and `ema/<name>` (f32).

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use cfdiff::io::config::{ConfigSection, RunConfig};
use cfdiff::io::container::TensorContainer;
use cfdiff::NoiseSchedule;

use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::net::Architecture;
use crate::params::{ParamStore, Weights};

pub struct Checkpoint {
    pub model: Denoiser,
    pub schedule: NoiseSchedule,
    /// The full config echo, including the architecture section.
    pub config: RunConfig,
}

fn push_weights(c: &mut TensorContainer, prefix: &str, w: &Weights) -> Result<()> {
    for (name, t) in w {
        if t.dtype() != DType::F32 {
            return Err(Error::Checkpoint(format!("{name} is {:?}; checkpoints hold f32", t.dtype())));
        }
        let vals: Vec<f32> = t.flatten_all()?.to_vec1()?;
        c.push_f32(&format!("{prefix}/{name}"), t.dims(), &vals)?;
    }
    Ok(())
}

pub fn to_container(model: &Denoiser, schedule: &NoiseSchedule, echo: &RunConfig) -> Result<TensorContainer> {
    let mut cfg = echo.clone();
    model.arch.write(&mut cfg);
    let mut c = TensorContainer::new();
    c.push_u8("config", &[cfg.to_text().len()], cfg.to_text().into_bytes())?;
    let betas: Vec<u8> = schedule.betas().iter().flat_map(|b| b.to_le_bytes()).collect();
    c.push_u8("schedule.betas", &[schedule.len(), 8], betas)?;
    push_weights(&mut c, "live", &model.params.live())?;
    push_weights(&mut c, "ema", model.params.ema())?;
    Ok(c)
}

pub fn from_container(c: &TensorContainer) -> Result<Checkpoint> {
    let (_, text) = c.u8_values("config")?;
    let text = std::str::from_utf8(text).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let config = RunConfig::parse(text)?;
    let arch = Architecture::from_config(&config)?;
    let (dims, raw) = c.u8_values("schedule.betas")?;
    if dims.len() != 2 || dims[1] != 8 || raw.len() != dims[0] * 8 {
        return Err(Error::Checkpoint("malformed schedule entry".into()));
    }
    let betas = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let schedule = NoiseSchedule::from_betas(betas)?;

    let (mut live, mut ema) = (Weights::new(), Weights::new());
    for e in c.entries() {
        let (target, name) = if let Some(n) = e.name.strip_prefix("live/") {
            (&mut live, n)
        } else if let Some(n) = e.name.strip_prefix("ema/") {
            (&mut ema, n)
        } else {
            continue;
        };
        let (dims, vals) = c.f32_values(&e.name)?;
        target.insert(name.to_string(), Tensor::from_vec(vals, dims, &Device::Cpu)?);
    }
    let params = ParamStore::from_weights(live, ema)?;
    let model = Denoiser::from_params(arch, params, DType::F32)?;
    Ok(Checkpoint { model, schedule, config })
}

pub fn save(path: &Path, model: &Denoiser, schedule: &NoiseSchedule, echo: &RunConfig) -> Result<()> {
    to_container(model, schedule, echo)?.write(path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_container(&TensorContainer::read(path)?)
}
