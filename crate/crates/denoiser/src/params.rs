//! Named parameter tensors, their seeded initialization and the EMA shadow.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// Name → tensor view used by forward passes; either the live or the EMA weights.
pub type Weights = BTreeMap<String, Tensor>;

pub fn get<'a>(w: &'a Weights, name: &str) -> Result<&'a Tensor> {
    w.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Values for every spec, drawn in spec order from one seeded stream.
pub fn init_values(specs: &[ParamSpec], seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    specs
        .iter()
        .map(|s| {
            let n = s.numel();
            Ok(match s.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Uniform(b) => {
                    let d = Uniform::new_inclusive(-b, b)
                        .map_err(|e| Error::Invalid(format!("{}: {e}", s.name)))?;
                    (0..n).map(|_| d.sample(&mut rng)).collect()
                }
                Init::Normal(std) => {
                    let d = Normal::new(0.0, std).map_err(|e| Error::Invalid(format!("{}: {e}", s.name)))?;
                    (0..n).map(|_| d.sample(&mut rng)).collect()
                }
            })
        })
        .collect()
}

pub struct ParamStore {
    live: BTreeMap<String, Var>,
    ema: Weights,
}

impl ParamStore {
    /// Seeded initialization; the EMA shadow starts equal to the live weights.
    pub fn init(specs: &[ParamSpec], seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let values = init_values(specs, seed)?;
        let mut live = Weights::new();
        for (s, v) in specs.iter().zip(values) {
            if live.contains_key(&s.name) {
                return Err(Error::Structure(format!("duplicate parameter {}", s.name)));
            }
            let t = Tensor::from_vec(v, s.shape.as_slice(), device)?.to_dtype(dtype)?;
            live.insert(s.name.clone(), t);
        }
        let ema = live.clone();
        Self::from_weights(live, ema)
    }

    pub fn from_weights(live: Weights, ema: Weights) -> Result<Self> {
        check_structure(&live, &ema)?;
        let live = live
            .into_iter()
            .map(|(k, t)| Ok((k, Var::from_tensor(&t)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self { live, ema })
    }

    /// Checks that every spec exists with the right shape and nothing else is present.
    pub fn check_specs(&self, specs: &[ParamSpec]) -> Result<()> {
        if specs.len() != self.live.len() {
            return Err(Error::Structure(format!(
                "expected {} parameters, found {}",
                specs.len(),
                self.live.len()
            )));
        }
        for s in specs {
            let v = self.live.get(&s.name).ok_or_else(|| Error::MissingParam(s.name.clone()))?;
            if v.dims() != s.shape.as_slice() {
                return Err(Error::Structure(format!(
                    "{} has shape {:?}, expected {:?}",
                    s.name,
                    v.dims(),
                    s.shape
                )));
            }
        }
        Ok(())
    }

    pub fn live(&self) -> Weights {
        self.live.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect()
    }

    pub fn ema(&self) -> &Weights {
        &self.ema
    }

    pub fn weights(&self, use_ema: bool) -> Weights {
        if use_ema {
            self.ema.clone()
        } else {
            self.live()
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        self.live.values().cloned().collect()
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.live.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.live.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.live.values().map(|v| v.elem_count()).sum()
    }

    /// `shadow ← decay·shadow + (1-decay)·live`.
    pub fn update_ema(&mut self, decay: f64) -> Result<()> {
        self.ema = ema_update(&self.ema, &self.live(), decay)?;
        Ok(())
    }

    pub fn reset_ema(&mut self) -> Result<()> {
        // Var::set writes in place, so the shadow must own its storage
        self.ema = self
            .live()
            .into_iter()
            .map(|(k, t)| Ok((k, t.copy()?)))
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        for (k, t) in self.live().iter().chain(self.ema.iter()) {
            let bad = t
                .flatten_all()?
                .to_dtype(DType::F64)?
                .to_vec1::<f64>()?
                .iter()
                .any(|v| !v.is_finite());
            if bad {
                return Err(Error::Structure(format!("parameter {k} has non-finite values")));
            }
        }
        Ok(())
    }
}

fn check_structure(a: &Weights, b: &Weights) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Structure(format!("{} vs {} tensors", a.len(), b.len())));
    }
    for ((ka, ta), (kb, tb)) in a.iter().zip(b) {
        if ka != kb || ta.dims() != tb.dims() || ta.dtype() != tb.dtype() {
            return Err(Error::Structure(format!(
                "{ka} {:?} vs {kb} {:?}",
                ta.dims(),
                tb.dims()
            )));
        }
    }
    Ok(())
}

/// Elementwise `decay·shadow + (1-decay)·live` over structurally identical weight sets.
pub fn ema_update(shadow: &Weights, live: &Weights, decay: f64) -> Result<Weights> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Invalid(format!("EMA decay {decay} outside [0, 1]")));
    }
    check_structure(shadow, live)?;
    shadow
        .iter()
        .map(|(k, s)| {
            let l = &live[k];
            let next = if decay == 1.0 {
                s.clone()
            } else if decay == 0.0 {
                l.copy()?
            } else {
                ((s * decay)? + (l * (1.0 - decay))?)?
            };
            Ok((k.clone(), next.detach()))
        })
        .collect()
}
