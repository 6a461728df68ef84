//! Healthy-counterfactual generation and heatmap extraction.
//!
//! The image is first encoded to depth L with the unconditional prediction ε(x_t, ∅, t),
//! then decoded back along the same DDIM grid with the guided prediction for the
//! intervened condition. The heatmap is the channel mean of |x₀ - x̂₀|.

use crate::condition::Condition;
use crate::error::{Error, Result};
use crate::model::EpsModel;
use crate::sampler::{ddim_transition_f64, guided_epsilon, SamplerConfig};
use crate::schedule::{NoiseSchedule, TimeStep};
use crate::tensor::{BinaryMask, ImageTensor};

/// Maps normalized intensities in `[0, 1]` (and above, for hyper-intensities) to the model
/// input range via `2x - 1`.
pub fn to_model_range(x: &ImageTensor) -> ImageTensor {
    x.map(|v| 2.0 * v - 1.0)
}

/// An encoded latent together with the timesteps visited to reach it.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub x: ImageTensor,
    /// Visited timesteps in encoding order, starting at the first grid point.
    pub path: Vec<TimeStep>,
    /// `x` at working precision. Near t = T the signal is scaled by √ᾱ ≈ 0.006, so
    /// rounding the latent to f32 alone would cost ~1e-5 on the decoded image.
    pub precise: Vec<f64>,
}

impl Latent {
    /// A latent known only at f32 precision.
    pub fn from_tensor(x: ImageTensor, path: Vec<TimeStep>) -> Self {
        let precise = x.data().iter().map(|&v| v as f64).collect();
        Self { x, path, precise }
    }

    fn working_state(&self) -> Vec<f64> {
        if self.precise.len() == self.x.len() {
            self.precise.clone()
        } else {
            self.x.data().iter().map(|&v| v as f64).collect()
        }
    }

    pub fn depth(&self) -> usize {
        self.path.len().saturating_sub(1)
    }
}

#[derive(Clone, Debug)]
pub struct CounterfactualResult {
    pub latent: ImageTensor,
    pub counterfactual: ImageTensor,
    /// `[B, 1, H, W]`, nonnegative.
    pub heatmap: ImageTensor,
    /// x̂₀ estimate after every decoding step, when tracing is on.
    pub trace: Option<Vec<ImageTensor>>,
}

/// Encodes with `cfg.encode_steps` forward DDIM steps of the unconditional model.
pub fn encode<M: EpsModel + ?Sized>(
    model: &M,
    x0: &ImageTensor,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Latent> {
    let grid = cfg.grid(sched)?;
    let path = grid[..=cfg.encode_steps].to_vec();
    let norm = cfg.normalization();
    let nulls = vec![Condition::Null; x0.batch()];
    let mut x = x0.clone();
    let mut state: Vec<f64> = x0.data().iter().map(|&v| v as f64).collect();
    for pair in path.windows(2) {
        let (t, t_next) = (pair[0], pair[1]);
        let eps = model.predict_eps(&x, &nulls, &vec![t; x.batch()])?;
        eps.check_finite("unconditional prediction")?;
        ddim_transition_f64(&mut state, &eps, sched.alpha_cum(t)?, sched.alpha_cum(t_next)?, &norm)?;
        x = rounded(&state, x.shape())?;
    }
    Ok(Latent {
        x,
        path,
        precise: state,
    })
}

fn rounded(state: &[f64], shape: [usize; 4]) -> Result<ImageTensor> {
    ImageTensor::new(shape, state.iter().map(|&v| v as f32).collect())
}

/// Decodes a latent with guided ε for condition `c`; returns the counterfactual.
pub fn decode<M: EpsModel + ?Sized>(
    model: &M,
    latent: &Latent,
    c: Condition,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<ImageTensor> {
    Ok(decode_traced(model, latent, c, cfg, sched, false)?.0)
}

/// As [`decode`], also returning the visited timesteps and optionally every x̂₀.
pub fn decode_traced<M: EpsModel + ?Sized>(
    model: &M,
    latent: &Latent,
    c: Condition,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    trace: bool,
) -> Result<(ImageTensor, Vec<TimeStep>, Option<Vec<ImageTensor>>)> {
    if c.is_null() {
        return Err(Error::invalid("decoding needs a non-null intervention"));
    }
    let grid = cfg.grid(sched)?;
    let expected = &grid[..=cfg.encode_steps];
    if latent.path != expected {
        return Err(Error::GridMismatch(format!(
            "latent encoded over {} steps ending at t={:?}, decoder expects {} steps ending at t={}",
            latent.depth(),
            latent.path.last().map(|t| t.0),
            cfg.encode_steps,
            expected[expected.len() - 1].0
        )));
    }
    let norm = cfg.normalization();
    let shape = latent.x.shape();
    let mut state = latent.working_state();
    let mut x = latent.x.clone();
    let mut visited = Vec::with_capacity(expected.len());
    let mut x0_trace = trace.then(Vec::new);
    for pair in expected.windows(2).rev() {
        let (t_prev, t) = (pair[0], pair[1]);
        visited.push(t);
        let eps = guided_epsilon(model, &x, c, t, cfg.guidance_scale)?;
        eps.check_finite("guided prediction")?;
        let x0_hat = ddim_transition_f64(
            &mut state,
            &eps,
            sched.alpha_cum(t)?,
            sched.alpha_cum(t_prev)?,
            &norm,
        )?;
        if let Some(tr) = x0_trace.as_mut() {
            tr.push(rounded(&x0_hat, shape)?);
        }
        x = rounded(&state, shape)?;
    }
    visited.push(expected[0]);
    Ok((x, visited, x0_trace))
}

/// Per-pixel channel mean of |x0 - xcf|, shape `[B, 1, H, W]`.
pub fn heatmap(x0: &ImageTensor, xcf: &ImageTensor) -> Result<ImageTensor> {
    x0.ensure_same_shape(xcf)?;
    let [b, m, h, w] = x0.shape();
    let plane = h * w;
    let mut out = ImageTensor::zeros([b, 1, h, w]);
    for bi in 0..b {
        let (a, c) = (x0.item_data(bi), xcf.item_data(bi));
        let dst = out.item_data_mut(bi);
        for (p, d) in dst.iter_mut().enumerate() {
            let sum: f64 = (0..m)
                .map(|ch| (a[ch * plane + p] as f64 - c[ch * plane + p] as f64).abs())
                .sum();
            *d = (sum / m as f64) as f32;
        }
    }
    Ok(out)
}

/// Mean filter over a `(2r+1)²` window, clamped at the borders. Optional heatmap smoothing.
pub fn box_blur(map: &ImageTensor, radius: usize) -> ImageTensor {
    if radius == 0 {
        return map.clone();
    }
    let [b, m, h, w] = map.shape();
    let r = radius as isize;
    ImageTensor::from_fn([b, m, h, w], |bi, mi, y, x| {
        let mut acc = 0.0f64;
        let mut n = 0usize;
        for dy in -r..=r {
            for dx in -r..=r {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    acc += map.get(bi, mi, yy as usize, xx as usize) as f64;
                    n += 1;
                }
            }
        }
        (acc / n as f64) as f32
    })
}

/// Full counterfactual run towards `Healthy` for a batch in model range.
pub fn counterfactual<M: EpsModel + ?Sized>(
    model: &M,
    x0: &ImageTensor,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    trace: bool,
) -> Result<CounterfactualResult> {
    let latent = encode(model, x0, cfg, sched)?;
    let (cf, _, tr) = decode_traced(model, &latent, Condition::Healthy, cfg, sched, trace)?;
    let hm = heatmap(x0, &cf)?;
    Ok(CounterfactualResult {
        latent: latent.x,
        counterfactual: cf,
        heatmap: hm,
        trace: tr,
    })
}

/// Binarizes heatmaps with `heatmap > threshold`.
pub fn binarize(heatmap: &ImageTensor, threshold: f64) -> Result<Vec<BinaryMask>> {
    if heatmap.channels() != 1 {
        return Err(Error::invalid("heatmaps must have one channel"));
    }
    let (h, w) = (heatmap.height(), heatmap.width());
    (0..heatmap.batch())
        .map(|b| {
            let data = heatmap
                .item_data(b)
                .iter()
                .map(|&v| (v as f64 > threshold) as u8)
                .collect();
            BinaryMask::new(h, w, data)
        })
        .collect()
}

/// Counterfactual heatmap plus binary segmentation `heatmap > threshold`.
pub fn segment<M: EpsModel + ?Sized>(
    model: &M,
    x0: &ImageTensor,
    cfg: &SamplerConfig,
    threshold: f64,
    sched: &NoiseSchedule,
) -> Result<(CounterfactualResult, Vec<BinaryMask>)> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::invalid(format!("threshold {threshold} must be >= 0")));
    }
    let result = counterfactual(model, x0, cfg, sched, false)?;
    let masks = binarize(&result.heatmap, threshold)?;
    Ok((result, masks))
}

/// Heatmaps for a large set of model-range images, processed in chunks of `batch_size`.
pub fn heatmaps_batched<M: EpsModel + ?Sized>(
    model: &M,
    images: &ImageTensor,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    batch_size: usize,
) -> Result<ImageTensor> {
    let bs = batch_size.max(1);
    let mut parts = Vec::new();
    let mut start = 0;
    while start < images.batch() {
        let end = (start + bs).min(images.batch());
        let chunk = images.slice_batch(start, end);
        parts.push(counterfactual(model, &chunk, cfg, sched, false)?.heatmap);
        start = end;
    }
    if parts.is_empty() {
        return Ok(ImageTensor::zeros([0, 1, images.height(), images.width()]));
    }
    ImageTensor::concat(&parts.iter().collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConstantEps;
    use crate::sampler::NormMode;
    use crate::schedule::ScheduleKind;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::build(1000, ScheduleKind::default()).unwrap()
    }

    fn cfg(l: usize, w: f64) -> SamplerConfig {
        SamplerConfig {
            guidance_scale: w,
            encode_steps: l,
            ddim_steps: 100,
            percentile: 99.0,
            norm_mode: NormMode::None,
        }
    }

    fn image() -> ImageTensor {
        ImageTensor::from_fn([2, 2, 4, 4], |b, m, y, x| ((b * 7 + m * 3 + y * 5 + x) as f32 * 0.37).sin())
    }

    #[test]
    fn zero_depth_is_identity() {
        let s = sched();
        let m = ConstantEps::uniform(0.3);
        let x = image();
        let lat = encode(&m, &x, &cfg(0, 1.0), &s).unwrap();
        assert_eq!(lat.x, x);
        assert_eq!(lat.depth(), 0);
        assert_eq!(decode(&m, &lat, Condition::Healthy, &cfg(0, 1.0), &s).unwrap(), x);
    }

    #[test]
    fn two_step_encode_matches_scalar_recurrence() {
        let s = sched();
        let e = 0.3f64;
        let m = ConstantEps::uniform(e as f32);
        let x = ImageTensor::filled([1, 1, 1, 1], 0.5);
        let lat = encode(&m, &x, &cfg(2, 1.0), &s).unwrap();
        let g = [0usize, 9, 19];
        let a: Vec<f64> = g.iter().map(|&t| s.alphas_cum()[t]).collect();
        let mut v = 0.5f64;
        for i in 0..2 {
            let x0 = (v - (1.0 - a[i]).sqrt() * e) / a[i].sqrt();
            v = a[i + 1].sqrt() * x0 + (1.0 - a[i + 1]).sqrt() * e;
        }
        assert!((lat.x.data()[0] as f64 - v).abs() < 1e-6);
        assert_eq!(lat.path, vec![TimeStep(0), TimeStep(9), TimeStep(19)]);
    }

    #[test]
    fn constant_model_round_trip() {
        let s = sched();
        let m = ConstantEps { values: [0.2, -0.4, 0.7] };
        let x = image();
        for l in [1, 10, 100] {
            let c = cfg(l, 1.0);
            let lat = encode(&ConstantEps::uniform(0.2), &x, &c, &s).unwrap();
            let back = decode(&m, &lat, Condition::Healthy, &c, &s).unwrap();
            assert!(back.rms_diff(&x).unwrap() < 1e-6, "L={l}");
        }
    }

    #[test]
    fn decode_visits_reversed_encode_path() {
        let s = sched();
        let m = ConstantEps::uniform(0.1);
        let c = cfg(7, 2.0);
        let lat = encode(&m, &image(), &c, &s).unwrap();
        let (_, visited, trace) = decode_traced(&m, &lat, Condition::Healthy, &c, &s, true).unwrap();
        let mut rev = lat.path.clone();
        rev.reverse();
        assert_eq!(visited, rev);
        assert_eq!(trace.unwrap().len(), 7);
    }

    #[test]
    fn decode_rejects_mismatched_grid_and_null() {
        let s = sched();
        let m = ConstantEps::uniform(0.1);
        let lat = encode(&m, &image(), &cfg(5, 1.0), &s).unwrap();
        assert!(matches!(
            decode(&m, &lat, Condition::Healthy, &cfg(6, 1.0), &s),
            Err(Error::GridMismatch(_))
        ));
        let other = SamplerConfig { ddim_steps: 50, ..cfg(5, 1.0) };
        assert!(matches!(
            decode(&m, &lat, Condition::Healthy, &other, &s),
            Err(Error::GridMismatch(_))
        ));
        assert!(decode(&m, &lat, Condition::Null, &cfg(5, 1.0), &s).is_err());
    }

    #[test]
    fn unguided_decode_ignores_condition() {
        let s = sched();
        let m = ConstantEps { values: [0.5, -0.5, 0.1] };
        let c = cfg(20, 0.0);
        let lat = encode(&m, &image(), &c, &s).unwrap();
        let a = decode(&m, &lat, Condition::Healthy, &c, &s).unwrap();
        let b = decode(&m, &lat, Condition::Unhealthy, &c, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn heatmap_examples() {
        let x = image();
        let hm = heatmap(&x, &x).unwrap();
        assert_eq!(hm.shape(), [2, 1, 4, 4]);
        assert!(hm.data().iter().all(|&v| v == 0.0));

        let a = ImageTensor::new([1, 2, 1, 1], vec![0.0, 0.0]).unwrap();
        let b = ImageTensor::new([1, 2, 1, 1], vec![1.0, -3.0]).unwrap();
        assert_eq!(heatmap(&a, &b).unwrap().data(), &[2.0]);
        assert_eq!(heatmap(&a, &b).unwrap(), heatmap(&b, &a).unwrap());
        assert!(heatmap(&a, &x).is_err());
    }

    #[test]
    fn segment_thresholds() {
        let s = sched();
        let m = ConstantEps { values: [0.0, 0.0, 0.4] };
        let c = SamplerConfig { guidance_scale: 3.0, ..cfg(10, 3.0) };
        let x = image();
        let (res, masks) = segment(&m, &x, &c, f64::INFINITY, &s).unwrap();
        assert!(masks.iter().all(|mk| !mk.any()));
        assert!(res.heatmap.data().iter().any(|&v| v > 0.0));
        let (res, masks) = segment(&m, &x, &c, 0.0, &s).unwrap();
        for (b, mk) in masks.iter().enumerate() {
            for (i, &v) in res.heatmap.item_data(b).iter().enumerate() {
                assert_eq!(mk.data()[i] == 1, v > 0.0);
            }
        }
        assert_eq!(res.counterfactual.shape(), x.shape());
        assert!(segment(&m, &x, &c, -1.0, &s).is_err());
    }

    #[test]
    fn box_blur_preserves_constants() {
        let m = ImageTensor::filled([1, 1, 5, 5], 0.3);
        assert!(box_blur(&m, 1).max_abs_diff(&m).unwrap() < 1e-7);
        assert_eq!(box_blur(&m, 0), m);
    }
}
