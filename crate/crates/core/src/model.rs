use crate::condition::Condition;
use crate::error::{Error, Result};
use crate::schedule::TimeStep;
use crate::tensor::ImageTensor;

/// A noise predictor ε(x_t, c, t).
///
/// `conds` and `t` carry one entry per batch item of `x_t`. Implementations must be pure:
/// identical inputs give bit-identical outputs.
pub trait EpsModel {
    fn predict_eps(&self, x_t: &ImageTensor, conds: &[Condition], t: &[TimeStep]) -> Result<ImageTensor>;
}

impl<M: EpsModel + ?Sized> EpsModel for &M {
    fn predict_eps(&self, x_t: &ImageTensor, conds: &[Condition], t: &[TimeStep]) -> Result<ImageTensor> {
        (**self).predict_eps(x_t, conds, t)
    }
}

impl<M: EpsModel + ?Sized> EpsModel for Box<M> {
    fn predict_eps(&self, x_t: &ImageTensor, conds: &[Condition], t: &[TimeStep]) -> Result<ImageTensor> {
        (**self).predict_eps(x_t, conds, t)
    }
}

pub(crate) fn check_batch_args(x_t: &ImageTensor, conds: &[Condition], t: &[TimeStep]) -> Result<()> {
    if conds.len() != x_t.batch() || t.len() != x_t.batch() {
        return Err(Error::invalid(format!(
            "batch of {} images with {} conditions and {} timesteps",
            x_t.batch(),
            conds.len(),
            t.len()
        )));
    }
    Ok(())
}

/// Predicts a fixed value per condition, independent of `x_t` and `t`.
///
/// Any such model makes DDIM encoding and decoding exact inverses, which is what the
/// round-trip tests and the mock checkpoint rely on.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantEps {
    /// Prediction for Healthy, Unhealthy and Null, in [`Condition::index`] order.
    pub values: [f32; 3],
}

impl ConstantEps {
    pub fn uniform(value: f32) -> Self {
        Self { values: [value; 3] }
    }
}

impl EpsModel for ConstantEps {
    fn predict_eps(&self, x_t: &ImageTensor, conds: &[Condition], t: &[TimeStep]) -> Result<ImageTensor> {
        check_batch_args(x_t, conds, t)?;
        let n = x_t.item_len();
        let mut out = ImageTensor::zeros(x_t.shape());
        for (b, c) in conds.iter().enumerate() {
            out.data_mut()[b * n..(b + 1) * n].fill(self.values[c.index()]);
        }
        Ok(out)
    }
}
