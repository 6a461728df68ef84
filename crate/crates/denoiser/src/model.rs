//! A network with its parameters, usable as a [`cfdiff::EpsModel`].

use candle_core::{DType, Device, Tensor};
use cfdiff::{Condition, EpsModel, ImageTensor, TimeStep};

use crate::error::{invalid, Result};
use crate::net::Architecture;
use crate::params::{ParamStore, Weights};

pub struct Denoiser {
    pub arch: Architecture,
    pub params: ParamStore,
    pub dtype: DType,
    /// Predict with the EMA shadow instead of the live weights.
    pub use_ema: bool,
    device: Device,
}

impl Denoiser {
    /// Freshly initialized network.
    pub fn new(arch: Architecture, seed: u64, dtype: DType) -> Result<Self> {
        arch.validate()?;
        let device = Device::Cpu;
        let params = ParamStore::init(&arch.param_specs(), seed, dtype, &device)?;
        Ok(Self {
            arch,
            params,
            dtype,
            use_ema: true,
            device,
        })
    }

    pub fn from_params(arch: Architecture, params: ParamStore, dtype: DType) -> Result<Self> {
        arch.validate()?;
        params.check_specs(&arch.param_specs())?;
        Ok(Self {
            arch,
            params,
            dtype,
            use_ema: true,
            device: Device::Cpu,
        })
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn to_tensor(&self, x: &ImageTensor) -> Result<Tensor> {
        Ok(Tensor::from_slice(x.data(), x.shape().as_slice(), &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn forward_tensor(&self, w: &Weights, x: &Tensor, t: &[usize], c: &[Condition]) -> Result<Tensor> {
        self.arch.forward(w, x, t, c)
    }

    /// ε-prediction with the selected weights.
    pub fn predict(&self, x: &ImageTensor, c: &[Condition], t: &[TimeStep], use_ema: bool) -> Result<ImageTensor> {
        self.arch.check_input(&x.shape())?;
        if c.len() != x.batch() || t.len() != x.batch() {
            return Err(invalid("one condition and timestep per batch item required"));
        }
        let w = self.params.weights(use_ema);
        let ts: Vec<usize> = t.iter().map(|s| s.0).collect();
        let out = self.arch.forward(&w, &self.to_tensor(x)?, &ts, c)?;
        let data: Vec<f32> = out.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let y = ImageTensor::new(x.shape(), data)?;
        Ok(y)
    }
}

impl EpsModel for Denoiser {
    fn predict_eps(&self, x_t: &ImageTensor, conds: &[Condition], t: &[TimeStep]) -> cfdiff::Result<ImageTensor> {
        Ok(self.predict(x_t, conds, t, self.use_ema)?)
    }
}
