use crate::error::{Error, Result};

/// Dense `[batch, channels, height, width]` array of `f32`, row-major.
///
/// This is the carrier for clean images, noisy latents, noise draws, x̂₀ estimates and
/// heatmaps alike.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![len],
                actual: vec![data.len()],
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor entry {i} is {}", data[i])));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: [usize; 4], value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    /// Builds a tensor by evaluating `f(b, m, y, x)` at every position.
    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let [bs, ms, hs, ws] = shape;
        let mut data = Vec::with_capacity(bs * ms * hs * ws);
        for b in 0..bs {
            for m in 0..ms {
                for y in 0..hs {
                    for x in 0..ws {
                        data.push(f(b, m, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Number of values in one batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    fn offset(&self, b: usize, m: usize, y: usize, x: usize) -> usize {
        ((b * self.shape[1] + m) * self.shape[2] + y) * self.shape[3] + x
    }

    pub fn get(&self, b: usize, m: usize, y: usize, x: usize) -> f32 {
        self.data[self.offset(b, m, y, x)]
    }

    pub fn set(&mut self, b: usize, m: usize, y: usize, x: usize, v: f32) {
        let o = self.offset(b, m, y, x);
        self.data[o] = v;
    }

    pub fn item_data(&self, b: usize) -> &[f32] {
        let n = self.item_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn item_data_mut(&mut self, b: usize) -> &mut [f32] {
        let n = self.item_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    /// Copies batch item `b` out as a batch of one.
    pub fn item(&self, b: usize) -> ImageTensor {
        ImageTensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.item_data(b).to_vec(),
        }
    }

    /// Copies the batch range `start..end`.
    pub fn slice_batch(&self, start: usize, end: usize) -> ImageTensor {
        let n = self.item_len();
        ImageTensor {
            shape: [end - start, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[start * n..end * n].to_vec(),
        }
    }

    /// Concatenates tensors along the batch axis.
    pub fn concat(parts: &[&ImageTensor]) -> Result<ImageTensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("cannot concatenate zero tensors"))?;
        let [_, m, h, w] = first.shape;
        let mut data = Vec::new();
        let mut batch = 0;
        for p in parts {
            if p.shape[1..] != [m, h, w] {
                return Err(Error::ShapeMismatch {
                    expected: vec![p.shape[0], m, h, w],
                    actual: p.shape.to_vec(),
                });
            }
            batch += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(ImageTensor {
            shape: [batch, m, h, w],
            data,
        })
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.to_vec(),
                actual: other.shape.to_vec(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> ImageTensor {
        ImageTensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two tensors of identical shape.
    pub fn zip_map(&self, other: &ImageTensor, f: impl Fn(f32, f32) -> f32) -> Result<ImageTensor> {
        self.ensure_same_shape(other)?;
        Ok(ImageTensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("{what}: entry {i} is {}", self.data[i]))),
            None => Ok(()),
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn rms(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        (self.data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    /// Root-mean-square of the elementwise difference.
    pub fn rms_diff(&self, other: &ImageTensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        let n = self.data.len().max(1) as f64;
        let ss: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum();
        Ok((ss / n).sqrt())
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max))
    }
}

/// Binary `height × width` mask stored as 0/1 bytes.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width],
                actual: vec![data.len()],
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&v| v != 0)
    }

    /// True when every positive pixel of `self` is also positive in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }
}
