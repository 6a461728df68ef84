//! Deterministic synthetic two-channel "brain slice" corpus with exact lesion masks.
//!
//! Each slice is a smooth textured ellipse on a zero background. Unhealthy slices carry one
//! to three soft-edged disks that are strongly hyper-intense in channel 0 and weakly in
//! channel 1, and that push the surrounding texture outwards. A fraction of healthy slices
//! carries elongated structures that are bright in both channels, so plain intensity
//! thresholding is not a perfect detector.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::condition::Condition;
use crate::error::{Error, Result};
use crate::sampler::percentile_sorted;
use crate::tensor::{BinaryMask, ImageTensor};

pub const CHANNELS: usize = 2;
const MAX_PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Generator parameters. Intensity shifts are relative to the slice's tissue intensity.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub size: usize,
    pub lesion_probability: f64,
    pub min_radius: f64,
    pub max_radius: f64,
    pub min_shift0: f64,
    pub max_shift0: f64,
    pub min_shift1: f64,
    pub max_shift1: f64,
    /// Ellipse semi-axis range as a fraction of the image side.
    pub min_axis: f64,
    pub max_axis: f64,
    pub texture_amplitude: f64,
    pub noise_amplitude: f64,
    /// Fraction of healthy slices carrying bright non-lesion structures.
    pub confounder_fraction: f64,
    /// Strength of the outward texture displacement around lesions.
    pub deformation: f64,
    /// Relative brightening of the cortex-like band along the brain boundary. The band sets
    /// the 99th-percentile normalizer, so lesion presence barely rescales the slice.
    pub rim_gain: f64,
    /// Band width as a fraction of the elliptical radius.
    pub rim_width: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            train: 1000,
            val: 100,
            test: 200,
            size: 32,
            lesion_probability: 0.5,
            min_radius: 2.0,
            max_radius: 4.5,
            min_shift0: 0.5,
            max_shift0: 0.9,
            min_shift1: 0.05,
            max_shift1: 0.15,
            min_axis: 0.34,
            max_axis: 0.44,
            texture_amplitude: 0.08,
            noise_amplitude: 0.02,
            confounder_fraction: 0.2,
            deformation: 0.5,
            rim_gain: 2.0,
            rim_width: 0.2,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return bad("split counts must be positive".into());
        }
        if self.size < 8 {
            return bad(format!("image size {} too small", self.size));
        }
        for (name, p) in [
            ("lesion_probability", self.lesion_probability),
            ("confounder_fraction", self.confounder_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if !(self.min_radius >= 1.0 && self.max_radius >= self.min_radius) {
            return bad(format!(
                "radius range [{}, {}] invalid (radii >= 1)",
                self.min_radius, self.max_radius
            ));
        }
        for (name, lo, hi) in [
            ("shift0", self.min_shift0, self.max_shift0),
            ("shift1", self.min_shift1, self.max_shift1),
            ("axis", self.min_axis, self.max_axis),
        ] {
            if !(lo >= 0.0 && hi >= lo) {
                return bad(format!("{name} range [{lo}, {hi}] invalid"));
            }
        }
        if self.max_axis > 0.5 || self.min_axis <= 0.0 {
            return bad("ellipse axes must lie in (0, 0.5] of the image side".into());
        }
        if !(0.0..1.0).contains(&self.rim_width) || self.rim_gain < 0.0 {
            return bad(format!("rim gain {} must be >= 0 and width {} in [0, 1)", self.rim_gain, self.rim_width));
        }
        if self.texture_amplitude < 0.0 || self.noise_amplitude < 0.0 || self.deformation < 0.0 {
            return bad("amplitudes must be nonnegative".into());
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    /// First patient id of a split; ids are contiguous and disjoint across splits.
    pub fn first_id(&self, split: Split) -> u64 {
        match split {
            Split::Train => 0,
            Split::Val => self.train as u64,
            Split::Test => (self.train + self.val) as u64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelledSlice {
    /// `[1, 2, size, size]`, normalized intensities.
    pub image: ImageTensor,
    pub mask: BinaryMask,
    pub foreground: BinaryMask,
    pub label: Condition,
    pub patient_id: u64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub slices: Vec<LabelledSlice>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&LabelledSlice> {
        self.slices.iter().filter(|s| s.split == split).collect()
    }
}

/// Unhealthy iff the mask has a positive pixel.
pub fn slice_label(mask: &BinaryMask) -> Condition {
    if mask.any() {
        Condition::Unhealthy
    } else {
        Condition::Healthy
    }
}

/// Divides every channel by its 99th-percentile foreground intensity and clips to `[0, 1.5]`.
pub fn normalize_scan(image: &ImageTensor, foreground: &BinaryMask) -> Result<ImageTensor> {
    let [b, m, h, w] = image.shape();
    if b != 1 || foreground.height() != h || foreground.width() != w {
        return Err(Error::ShapeMismatch {
            expected: vec![1, m, foreground.height(), foreground.width()],
            actual: image.shape().to_vec(),
        });
    }
    if !foreground.any() {
        return Err(Error::invalid("normalization needs a nonempty foreground"));
    }
    let mut out = image.clone();
    for ch in 0..m {
        let mut fg: Vec<f32> = (0..h * w)
            .filter(|&p| foreground.data()[p] != 0)
            .map(|p| image.get(0, ch, p / w, p % w))
            .collect();
        fg.sort_by(f32::total_cmp);
        let p99 = percentile_sorted(&fg, 99.0);
        if !(p99 > 0.0) {
            return Err(Error::invalid(format!(
                "channel {ch} has a non-positive 99th percentile ({p99})"
            )));
        }
        for y in 0..h {
            for x in 0..w {
                let v = (image.get(0, ch, y, x) as f64 / p99).clamp(0.0, 1.5);
                out.set(0, ch, y, x, v as f32);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct Disk {
    cy: f64,
    cx: f64,
    radius: f64,
    shift0: f64,
    shift1: f64,
}

#[derive(Clone, Debug)]
struct Streak {
    cy: f64,
    cx: f64,
    angle: f64,
    half_length: f64,
    half_width: f64,
    shift: f64,
}

/// Every random quantity of one slice, drawn before rendering so that paired renders with
/// and without lesions share anatomy and noise.
#[derive(Clone, Debug)]
struct SliceParams {
    size: usize,
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
    rot: f64,
    base: [f64; CHANNELS],
    waves: Vec<(f64, f64, f64, f64)>,
    texture_amplitude: f64,
    deformation: f64,
    rim_gain: f64,
    rim_width: f64,
    noise: Vec<f64>,
    lesions: Vec<Disk>,
    confounders: Vec<Streak>,
}

impl SliceParams {
    /// Elliptical radius, 1 on the brain boundary.
    fn ellipse_radius(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.rot.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.ax).powi(2) + (v / self.ay).powi(2)).sqrt()
    }

    fn foreground(&self) -> BinaryMask {
        BinaryMask::from_fn(self.size, self.size, |y, x| self.ellipse_radius(y as f64, x as f64) <= 1.0)
    }

    fn lesion_mask(&self) -> BinaryMask {
        BinaryMask::from_fn(self.size, self.size, |y, x| {
            self.lesions
                .iter()
                .any(|d| ((y as f64 - d.cy).powi(2) + (x as f64 - d.cx).powi(2)).sqrt() <= d.radius)
        })
    }

    fn texture(&self, y: f64, x: f64) -> f64 {
        self.waves
            .iter()
            .map(|&(fy, fx, phase, amp)| amp * (fy * y + fx * x + phase).sin())
            .sum::<f64>()
            * self.texture_amplitude
    }

    fn render(&self, with_lesions: bool) -> ImageTensor {
        let n = self.size;
        let mut img = ImageTensor::zeros([1, CHANNELS, n, n]);
        for y in 0..n {
            for x in 0..n {
                let (py, px) = (y as f64, x as f64);
                let r = self.ellipse_radius(py, px);
                // soft brain boundary, about one pixel wide
                let fg = sigmoid((1.0 - r) * 12.0);
                if fg < 1e-3 {
                    continue;
                }
                let (mut qy, mut qx) = (py, px);
                let mut prof = Vec::new();
                if with_lesions {
                    for d in &self.lesions {
                        let (dy, dx) = (py - d.cy, px - d.cx);
                        let dist = (dy * dy + dx * dx).sqrt();
                        let reach = 2.0 * d.radius;
                        let pull = self.deformation * (-(dist * dist) / (2.0 * reach * reach)).exp();
                        qy -= dy * pull;
                        qx -= dx * pull;
                        prof.push((d, sigmoid((d.radius - dist) * 3.0)));
                    }
                }
                let tex = self.texture(qy, qx);
                // slightly brighter towards the centre, like deep grey matter
                let shade = 1.0 + 0.08 * (1.0 - r.min(1.0));
                let rim = 1.0 + self.rim_gain * sigmoid((r - (1.0 - self.rim_width)) * 25.0);
                let mut ch = [0.0f64; CHANNELS];
                for (m, v) in ch.iter_mut().enumerate() {
                    *v = self.base[m] * shade * rim * (1.0 + tex) + self.noise[(m * n + y) * n + x];
                }
                for s in &self.confounders {
                    let (dy, dx) = (py - s.cy, px - s.cx);
                    let (sn, cs) = s.angle.sin_cos();
                    let along = cs * dx + sn * dy;
                    let across = -sn * dx + cs * dy;
                    let e = (along / s.half_length).powi(2) + (across / s.half_width).powi(2);
                    let w = sigmoid((1.0 - e) * 4.0);
                    ch[0] += s.shift * self.base[0] * w;
                    ch[1] += s.shift * self.base[1] * w;
                }
                for (d, p) in prof {
                    ch[0] += d.shift0 * self.base[0] * p;
                    ch[1] += d.shift1 * self.base[1] * p;
                }
                for (m, v) in ch.iter().enumerate() {
                    img.set(0, m, y, x, (v * fg).max(0.0) as f32);
                }
            }
        }
        img
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn slice_rng(seed: u64, patient_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(patient_id);
    rng
}

fn draw_params(spec: &CorpusSpec, patient_id: u64) -> Result<SliceParams> {
    let mut rng = slice_rng(spec.seed, patient_id);
    let n = spec.size as f64;
    let half = n / 2.0 - 0.5;
    let mut p = SliceParams {
        size: spec.size,
        cy: half + uniform(&mut rng, -1.5, 1.5),
        cx: half + uniform(&mut rng, -1.5, 1.5),
        ay: n * uniform(&mut rng, spec.min_axis, spec.max_axis),
        ax: n * uniform(&mut rng, spec.min_axis, spec.max_axis),
        rot: uniform(&mut rng, 0.0, PI),
        base: [uniform(&mut rng, 0.45, 0.55), uniform(&mut rng, 0.55, 0.65)],
        waves: (0..4)
            .map(|_| {
                let f = uniform(&mut rng, 0.2, 0.6);
                let a = uniform(&mut rng, 0.0, 2.0 * PI);
                (f * a.sin(), f * a.cos(), uniform(&mut rng, 0.0, 2.0 * PI), uniform(&mut rng, 0.5, 1.0))
            })
            .collect(),
        texture_amplitude: spec.texture_amplitude,
        deformation: spec.deformation,
        rim_gain: spec.rim_gain,
        rim_width: spec.rim_width,
        noise: (0..CHANNELS * spec.size * spec.size)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * spec.noise_amplitude)
            .collect(),
        lesions: Vec::new(),
        confounders: Vec::new(),
    };
    let unhealthy = rng.random_bool(spec.lesion_probability);
    let min_axis = p.ay.min(p.ax);
    if unhealthy {
        let count = 1 + rng.random_range(0..3usize);
        for _ in 0..count {
            let radius = uniform(&mut rng, spec.min_radius, spec.max_radius);
            let mut placed = None;
            for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                let cy = uniform(&mut rng, p.cy - min_axis, p.cy + min_axis);
                let cx = uniform(&mut rng, p.cx - min_axis, p.cx + min_axis);
                // keep the whole disk inside the rim band
                if p.ellipse_radius(cy, cx) <= 1.0 - spec.rim_width - (radius + 1.0) / min_axis {
                    placed = Some((cy, cx));
                    break;
                }
            }
            let (cy, cx) = placed.ok_or_else(|| {
                Error::invalid(format!(
                    "lesion of radius {radius:.2} does not fit in slice {patient_id}"
                ))
            })?;
            p.lesions.push(Disk {
                cy,
                cx,
                radius,
                shift0: uniform(&mut rng, spec.min_shift0, spec.max_shift0),
                shift1: uniform(&mut rng, spec.min_shift1, spec.max_shift1),
            });
        }
    } else if rng.random_bool(spec.confounder_fraction) {
        let count = 1 + rng.random_range(0..2usize);
        for _ in 0..count {
            let half_length = uniform(&mut rng, 3.0, 6.0);
            let mut placed = None;
            for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                let cy = uniform(&mut rng, p.cy - min_axis, p.cy + min_axis);
                let cx = uniform(&mut rng, p.cx - min_axis, p.cx + min_axis);
                if p.ellipse_radius(cy, cx) <= 1.0 - (half_length + 1.0) / min_axis {
                    placed = Some((cy, cx));
                    break;
                }
            }
            let (cy, cx) = placed
                .ok_or_else(|| Error::invalid(format!("confounder does not fit in slice {patient_id}")))?;
            p.confounders.push(Streak {
                cy,
                cx,
                angle: uniform(&mut rng, 0.0, PI),
                half_length,
                half_width: uniform(&mut rng, 0.9, 1.4),
                shift: uniform(&mut rng, spec.min_shift0, spec.max_shift0),
            });
        }
    }
    Ok(p)
}

/// Raw (unnormalized) renders of one slice with and without its lesions, plus lesion and
/// foreground masks. Both renders share anatomy, texture and noise.
pub fn render_pair(spec: &CorpusSpec, patient_id: u64) -> Result<(ImageTensor, ImageTensor, BinaryMask, BinaryMask)> {
    spec.validate()?;
    let p = draw_params(spec, patient_id)?;
    Ok((p.render(true), p.render(false), p.lesion_mask(), p.foreground()))
}

fn make_slice(spec: &CorpusSpec, patient_id: u64, split: Split) -> Result<LabelledSlice> {
    let p = draw_params(spec, patient_id)?;
    let foreground = p.foreground();
    let mask = p.lesion_mask();
    if !mask.is_subset_of(&foreground) {
        return Err(Error::invalid(format!("lesion escapes foreground in slice {patient_id}")));
    }
    let image = normalize_scan(&p.render(true), &foreground)?;
    Ok(LabelledSlice {
        image,
        label: slice_label(&mask),
        mask,
        foreground,
        patient_id,
        split,
    })
}

/// Generates all three splits. Deterministic for a fixed spec.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut slices = Vec::with_capacity(spec.train + spec.val + spec.test);
    for split in Split::ALL {
        let first = spec.first_id(split);
        for i in 0..spec.count(split) as u64 {
            slices.push(make_slice(spec, first + i, split)?);
        }
    }
    Ok(Corpus {
        spec: spec.clone(),
        slices,
    })
}

/// Stacks slice images into one `[N, 2, H, W]` batch.
pub fn stack_images(slices: &[&LabelledSlice]) -> Result<ImageTensor> {
    ImageTensor::concat(&slices.iter().map(|s| &s.image).collect::<Vec<_>>())
}

/// FNV-1a digest over images, masks and labels; identifies an evaluation split.
pub fn split_hash(slices: &[&LabelledSlice]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for s in slices {
        feed(&s.patient_id.to_le_bytes());
        for v in s.image.data() {
            feed(&v.to_le_bytes());
        }
        feed(s.mask.data());
        feed(&[s.label.index() as u8]);
    }
    h
}
