//! Differentiable building blocks on candle tensors. Every function works for f32 and f64.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Device, IndexOp, Layout, Shape, Tensor, D};
use num_traits::Float;

use crate::error::{invalid, Result};

/// Variance floor of every normalization.
pub const NORM_EPS: f64 = 1e-5;

/// `x @ wᵀ + b` over the last dimension; `x` may have any leading dims.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let y = x.broadcast_matmul(&w.t()?)?;
    Ok(match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    })
}

/// 2-D convolution with bias, square kernel, zero padding `k/2`.
///
/// Lowered to patch extraction plus one matrix product; candle's direct convolution
/// backward is several times slower at these sizes.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    let (bsz, cin, h, wd) = x.dims4()?;
    let (cout, wcin, k, k2) = w.dims4()?;
    if wcin != cin || k != k2 || stride == 0 {
        return Err(invalid(format!("kernel {:?} with stride {stride} does not fit input {:?}", w.dims(), x.dims())));
    }
    let geom = Patches::new(cin, h, wd, k, stride);
    let cols = x.contiguous()?.apply_op1(geom)?;
    let y = w.reshape((cout, cin * k * k))?.broadcast_matmul(&cols)?;
    let y = y.reshape((bsz, cout, geom.out_h, geom.out_w))?;
    Ok(y.broadcast_add(&b.reshape((1, cout, 1, 1))?)?)
}

/// Patch geometry of a zero-padded square-kernel convolution.
#[derive(Clone, Copy, Debug)]
struct Patches {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Patches {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize) -> Self {
        let pad = k / 2;
        Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
        }
    }

    /// Visits `(column offset, image offset)` pairs of one item; padding is skipped.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let n = self.out_h * self.out_w;
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((c * self.k + ky) * self.k + kx) * n;
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + ky) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let src = (c * self.h + y as usize) * self.w;
                        for ox in 0..self.out_w {
                            let x = (ox * self.stride + kx) as isize - self.pad as isize;
                            if x >= 0 && x < self.w as isize {
                                f(row + oy * self.out_w + ox, src + x as usize);
                            }
                        }
                    }
                }
            }
        }
    }

    fn col_len(&self) -> usize {
        self.c * self.k * self.k * self.out_h * self.out_w
    }

    fn img_len(&self) -> usize {
        self.c * self.h * self.w
    }

    fn extract<T: Float>(&self, img: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); img.len() / self.img_len() * self.col_len()];
        for (src, dst) in img.chunks_exact(self.img_len()).zip(out.chunks_exact_mut(self.col_len())) {
            self.for_each(|ci, ii| dst[ci] = src[ii]);
        }
        out
    }

    fn scatter<T: Float>(&self, cols: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); cols.len() / self.col_len() * self.img_len()];
        for (src, dst) in cols.chunks_exact(self.col_len()).zip(out.chunks_exact_mut(self.img_len())) {
            self.for_each(|ci, ii| dst[ii] = dst[ii] + src[ci]);
        }
        out
    }
}

impl CustomOp1 for Patches {
    fn name(&self) -> &'static str {
        "patches"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let b = l.dims()[0];
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(self.extract(contiguous(v, l)?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.extract(contiguous(v, l)?)),
            _ => candle_core::bail!("convolution supports f32 and f64"),
        };
        Ok((out, Shape::from((b, self.c * self.k * self.k, self.out_h * self.out_w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&PatchScatter(*self))?))
    }
}

/// Adjoint of patch extraction: sums every column entry back onto its pixel.
struct PatchScatter(Patches);

impl CustomOp1 for PatchScatter {
    fn name(&self) -> &'static str {
        "patch-scatter"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let p = &self.0;
        let b = l.dims()[0];
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(p.scatter(contiguous(v, l)?)),
            CpuStorage::F64(v) => CpuStorage::F64(p.scatter(contiguous(v, l)?)),
            _ => candle_core::bail!("convolution supports f32 and f64"),
        };
        Ok((out, Shape::from((b, p.c, p.h, p.w))))
    }
}

/// Group normalization without affine parameters: zero mean, unit variance per group.
pub fn group_norm(x: &Tensor, groups: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(invalid(format!("{groups} groups do not divide {c} channels")));
    }
    let xg = x.reshape((b, groups, (c / groups) * h * w))?;
    let mean = xg.mean_keepdim(2)?;
    let xc = xg.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(2)?;
    let out = xc.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
    Ok(out.reshape((b, c, h, w))?)
}

/// Group normalization with per-channel affine `gamma`, `beta` of shape `[C]`.
pub fn group_norm_affine(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)?;
    let n = group_norm(x, groups)?;
    Ok(n
        .broadcast_mul(&gamma.reshape((1, c, 1, 1))?)?
        .broadcast_add(&beta.reshape((1, c, 1, 1))?)?)
}

/// Adaptive group normalization: `GN(x)·scale + shift` with per-item, per-channel
/// `scale` and `shift` of shape `[B, C]` generated from embeddings.
pub fn adagroup_norm(x: &Tensor, groups: usize, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = x.dims4()?;
    if scale.dims() != [b, c] || shift.dims() != [b, c] {
        return Err(invalid(format!(
            "modulation shapes {:?}/{:?} do not match [{b}, {c}]",
            scale.dims(),
            shift.dims()
        )));
    }
    let n = group_norm(x, groups)?;
    Ok(n
        .broadcast_mul(&scale.reshape((b, c, 1, 1))?)?
        .broadcast_add(&shift.reshape((b, c, 1, 1))?)?)
}

pub struct AttentionWeights<'a> {
    pub wq: &'a Tensor,
    pub wk: &'a Tensor,
    pub wv: &'a Tensor,
    pub wo: &'a Tensor,
    pub bq: Option<&'a Tensor>,
    pub bk: Option<&'a Tensor>,
    pub bv: Option<&'a Tensor>,
    pub bo: Option<&'a Tensor>,
}

/// Multi-head attention over tokens `[B, N, d]`.
///
/// `context = (K_c, V_c)`, each `[B, N_c, d]`, is appended to the keys and values computed
/// from the tokens. With no context (or an empty one) this is plain self-attention and takes
/// exactly the same code path. Returns the output tokens and the attention probabilities
/// `[B, heads, N, N + N_c]`.
pub fn attention_forward(
    x: &Tensor,
    p: &AttentionWeights<'_>,
    heads: usize,
    context: Option<(&Tensor, &Tensor)>,
) -> Result<(Tensor, Tensor)> {
    let (b, n, d) = x.dims3()?;
    if heads == 0 || d % heads != 0 {
        return Err(invalid(format!("{heads} heads do not divide width {d}")));
    }
    let dh = d / heads;
    let q = linear(x, p.wq, p.bq)?;
    let mut k = linear(x, p.wk, p.bk)?;
    let mut v = linear(x, p.wv, p.bv)?;
    if let Some((kc, vc)) = context {
        let (cb, nc, cd) = kc.dims3()?;
        if vc.dims() != kc.dims() || cb != b || cd != d {
            return Err(invalid(format!(
                "context {:?}/{:?} does not match tokens [{b}, {n}, {d}]",
                kc.dims(),
                vc.dims()
            )));
        }
        if nc > 0 {
            k = Tensor::cat(&[&k, kc], 1)?;
            v = Tensor::cat(&[&v, vc], 1)?;
        }
    }
    let m = k.dim(1)?;
    let split = |t: &Tensor, len: usize| -> Result<Tensor> {
        Ok(t.reshape((b, len, heads, dh))?.transpose(1, 2)?.contiguous()?)
    };
    let (q, k, v) = (split(&q, n)?, split(&k, m)?, split(&v, m)?);
    let scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
    let probs = softmax_last(&scores)?;
    let o = probs.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
    Ok((linear(&o, p.wo, p.bo)?, probs))
}

/// Row softmax over the last dimension as one fused kernel, with a fused backward.
/// The composite version allocates a tensor per elementary op, which dominates the cost of
/// attention at these sizes.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxLast)?)
}

struct SoftmaxLast;

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("softmax input must be contiguous"),
    }
}

fn softmax_rows<T: Float>(src: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for row in src.chunks_exact(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - max).exp();
            sum = sum + e;
            out.push(e);
        }
        let inv = T::one() / sum;
        for v in &mut out[start..] {
            *v = *v * inv;
        }
    }
    out
}

/// `g_in = p ⊙ (g − Σ g ⊙ p)` per row.
fn softmax_grad_rows<T: Float>(p: &[T], g: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(p.len());
    for (pr, gr) in p.chunks_exact(n).zip(g.chunks_exact(n)) {
        let dot = pr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        out.extend(pr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    out
}

impl CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = l.dims().last().copied().unwrap_or(1).max(1);
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows(contiguous(v, l)?, n)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows(contiguous(v, l)?, n)),
            _ => candle_core::bail!("softmax supports f32 and f64"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(res.apply_op2_no_bwd(&grad_res.contiguous()?, &SoftmaxGrad)?))
    }
}

struct SoftmaxGrad;

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "softmax-last-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = l1.dims().last().copied().unwrap_or(1).max(1);
        let out = match (s1, s2) {
            (CpuStorage::F32(p), CpuStorage::F32(g)) => {
                CpuStorage::F32(softmax_grad_rows(contiguous(p, l1)?, contiguous(g, l2)?, n))
            }
            (CpuStorage::F64(p), CpuStorage::F64(g)) => {
                CpuStorage::F64(softmax_grad_rows(contiguous(p, l1)?, contiguous(g, l2)?, n))
            }
            _ => candle_core::bail!("softmax gradient supports matching f32 or f64"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Sinusoidal features `[cos(t·f_i), sin(t·f_i)]` with `f_i = 10000^(-i/half)`; `[B, dim]`.
pub fn timestep_features(t: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(invalid(format!("time feature width {dim} must be even and positive")));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| ti as f64 * f).collect();
        data.extend(args.iter().map(|a| a.cos()));
        data.extend(args.iter().map(|a| a.sin()));
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), device)?.to_dtype(dtype)?)
}

/// Two-layer MLP on the sinusoidal features: `W₂·SiLU(W₁·φ(t) + b₁) + b₂`.
pub fn time_embedding(
    t: &[usize],
    feature_dim: usize,
    w1: &Tensor,
    b1: &Tensor,
    w2: &Tensor,
    b2: &Tensor,
) -> Result<Tensor> {
    let f = timestep_features(t, feature_dim, w1.dtype(), w1.device())?;
    let h = linear(&f, w1, Some(b1))?.silu()?;
    linear(&h, w2, Some(b2))
}

/// Rows of `table` (first dim) selected by `idx`.
pub fn lookup(table: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let ids: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    let ids = Tensor::from_vec(ids, idx.len(), table.device())?;
    Ok(table.index_select(&ids, 0)?)
}

/// `[B, C, H, W]` → `[B, H·W, C]`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// `[B, H·W, C]` → `[B, C, H, W]`.
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    if n != h * w {
        return Err(invalid(format!("{n} tokens do not tile {h}x{w}")));
    }
    Ok(x.transpose(1, 2)?.reshape((b, c, h, w))?)
}

/// Mean squared error over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// First `n` entries along dim 1 and the rest.
pub fn split_half(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = x.dim(D::Minus1)? / 2;
    Ok((x.narrow(D::Minus1, 0, n)?, x.narrow(D::Minus1, n, n)?))
}

#[allow(dead_code)]
pub(crate) fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.flatten_all()?.i(0)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev() -> Device {
        Device::Cpu
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let v = crate::params::init_values(
            &[crate::params::ParamSpec::new("x", shape, crate::params::Init::Normal(1.0))],
            seed,
        )
        .unwrap()
        .remove(0);
        Tensor::from_vec(v, shape, &dev()).unwrap()
    }

    fn group_stats(x: &Tensor, groups: usize) -> Vec<(f64, f64)> {
        let (b, c, h, w) = x.dims4().unwrap();
        let g = x.reshape((b * groups, c / groups * h * w)).unwrap();
        let rows: Vec<Vec<f64>> = g.to_vec2().unwrap();
        rows.iter()
            .map(|r| {
                let m = r.iter().sum::<f64>() / r.len() as f64;
                let v = r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / r.len() as f64;
                (m, v)
            })
            .collect()
    }

    #[test]
    fn identity_modulation_is_group_norm() {
        let x = randn(&[2, 8, 3, 3], 1).affine(3.0, 1.0).unwrap();
        let ones = Tensor::ones((2, 8), DType::F64, &dev()).unwrap();
        let zeros = Tensor::zeros((2, 8), DType::F64, &dev()).unwrap();
        let y = adagroup_norm(&x, 4, &ones, &zeros).unwrap();
        for (m, v) in group_stats(&y, 4) {
            assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-5, "{m} {v}");
        }
        let k = (Tensor::ones((2, 8), DType::F64, &dev()).unwrap() * 0.7).unwrap();
        let y = adagroup_norm(&x, 4, &ones, &k).unwrap();
        for (m, _) in group_stats(&y, 4) {
            assert!((m - 0.7).abs() < 1e-5);
        }
        assert!(adagroup_norm(&x, 3, &ones, &zeros).is_err());
        assert!(adagroup_norm(&x, 4, &ones.narrow(1, 0, 4).unwrap(), &zeros).is_err());
    }

    #[test]
    fn constant_group_normalizes_to_zero() {
        let x = Tensor::full(5.0f64, (1, 4, 2, 2), &dev()).unwrap();
        let y = group_norm(&x, 2).unwrap();
        assert!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| v == 0.0));
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn patch_convolution_matches_direct_convolution() {
        for (cin, cout, k, stride, h, w) in [(3, 4, 3, 1, 6, 5), (2, 3, 3, 2, 8, 8), (4, 2, 1, 1, 5, 7), (2, 2, 3, 2, 7, 5)] {
            let x = randn(&[2, cin, h, w], 3);
            let kw = randn(&[cout, cin, k, k], 4);
            let bias = randn(&[cout], 5);
            let direct = x.conv2d(&kw, k / 2, stride, 1, 1).unwrap().broadcast_add(&bias.reshape((1, cout, 1, 1)).unwrap()).unwrap();
            let ours = conv2d(&x, &kw, &bias, stride).unwrap();
            assert_eq!(ours.dims(), direct.dims());
            assert!(max_diff(&ours, &direct) < 1e-12);
            let f32s = |t: &Tensor| t.to_dtype(DType::F32).unwrap();
            let ours32 = conv2d(&f32s(&x), &f32s(&kw), &f32s(&bias), stride).unwrap();
            assert!(max_diff(&ours32, &f32s(&direct)) < 1e-5);
        }
    }

    #[test]
    fn patch_scatter_is_the_adjoint() {
        // <extract(x), c> = <x, scatter(c)> for random x and c
        let p = Patches::new(2, 5, 4, 3, 2);
        let x: Vec<f64> = (0..2 * p.img_len()).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let c: Vec<f64> = (0..2 * p.col_len()).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
        let lhs: f64 = p.extract(&x).iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(p.scatter(&c)).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn fused_softmax_matches_composite() {
        let x = randn(&[3, 2, 7], 9).affine(4.0, 0.0).unwrap();
        let ours = softmax_last(&x).unwrap();
        let reference = candle_nn::ops::softmax(&x, D::Minus1).unwrap();
        assert!(max_diff(&ours, &reference) < 1e-6);
        // a strided view is made contiguous first
        let t = x.transpose(1, 2).unwrap();
        assert!(max_diff(&softmax_last(&t).unwrap(), &candle_nn::ops::softmax(&t, D::Minus1).unwrap()) < 1e-6);
    }

    fn identity_weights(d: usize) -> Tensor {
        Tensor::eye(d, DType::F64, &dev()).unwrap()
    }

    #[test]
    fn single_token_with_zero_context_by_hand() {
        let d = 4;
        let eye = identity_weights(d);
        let p = AttentionWeights {
            wq: &eye,
            wk: &eye,
            wv: &eye,
            wo: &eye,
            bq: None,
            bk: None,
            bv: None,
            bo: None,
        };
        let x = Tensor::new(&[[[1.0f64, 0.5, -0.5, 2.0]]], &dev()).unwrap();
        let zero = Tensor::zeros((1, 1, d), DType::F64, &dev()).unwrap();
        let (out, probs) = attention_forward(&x, &p, 1, Some((&zero, &zero))).unwrap();
        // scores: [|x|²/2, 0] → weight on the token σ(|x|²/2)
        let s: f64 = (1.0 + 0.25 + 0.25 + 4.0) / 2.0;
        let p_tok = 1.0 / (1.0 + (-s).exp());
        let got: Vec<f64> = out.flatten_all().unwrap().to_vec1().unwrap();
        for (g, xv) in got.iter().zip([1.0, 0.5, -0.5, 2.0]) {
            assert!((g - p_tok * xv).abs() < 1e-12);
        }
        let pr: Vec<f64> = probs.flatten_all().unwrap().to_vec1().unwrap();
        assert!((pr[0] - p_tok).abs() < 1e-12 && (pr[0] + pr[1] - 1.0).abs() < 1e-12);
    }

    fn random_attention(d: usize, seed: u64) -> Vec<Tensor> {
        (0..4).map(|i| randn(&[d, d], seed + i)).collect()
    }

    #[test]
    fn rows_sum_to_one_and_empty_context_is_self_attention() {
        let d = 8;
        let w = random_attention(d, 10);
        let bias = randn(&[d], 20);
        let p = AttentionWeights {
            wq: &w[0],
            wk: &w[1],
            wv: &w[2],
            wo: &w[3],
            bq: Some(&bias),
            bk: None,
            bv: Some(&bias),
            bo: None,
        };
        let x = randn(&[2, 5, d], 30);
        let ctx = randn(&[2, 3, d], 31);
        let (out, probs) = attention_forward(&x, &p, 2, Some((&ctx, &ctx))).unwrap();
        assert_eq!(out.dims(), &[2, 5, d]);
        assert_eq!(probs.dims(), &[2, 2, 5, 8]);
        let sums: Vec<f64> = probs.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6));

        let empty = Tensor::zeros((2, 0, d), DType::F64, &dev()).unwrap();
        let (a, pa) = attention_forward(&x, &p, 2, None).unwrap();
        let (b, pb) = attention_forward(&x, &p, 2, Some((&empty, &empty))).unwrap();
        let bits = |t: &Tensor| -> Vec<u64> {
            t.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(bits(&pa), bits(&pb));

        let wq2 = (&w[0] * 2.0).unwrap();
        let p2 = AttentionWeights { wq: &wq2, ..p };
        let (out2, probs2) = attention_forward(&x, &p2, 2, Some((&ctx, &ctx))).unwrap();
        assert_eq!(out2.dims(), out.dims());
        assert_ne!(bits(&probs2), bits(&probs));
        let sums: Vec<f64> = probs2.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6));
        assert!(attention_forward(&x, &p, 3, None).is_err());
        let bad = randn(&[2, 3, d + 1], 32);
        assert!(attention_forward(&x, &p, 2, Some((&bad, &bad))).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]
        #[test]
        fn attention_rows_normalize_and_empty_context_reduces(
            b in 1usize..3, n in 1usize..7, nc in 0usize..5, heads in 1usize..3, seed in 0u64..1000,
        ) {
            let d = 4 * heads;
            let w = random_attention(d, seed);
            let p = AttentionWeights { wq: &w[0], wk: &w[1], wv: &w[2], wo: &w[3], bq: None, bk: None, bv: None, bo: None };
            let x = randn(&[b, n, d], seed + 100);
            let kc = randn(&[b, nc, d], seed + 200);
            let vc = randn(&[b, nc, d], seed + 300);
            let (out, probs) = attention_forward(&x, &p, heads, Some((&kc, &vc))).unwrap();
            proptest::prop_assert_eq!(out.dims(), &[b, n, d]);
            proptest::prop_assert_eq!(probs.dims(), &[b, heads, n, n + nc]);
            let sums: Vec<f64> = probs.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            proptest::prop_assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-9));
            let empty = Tensor::zeros((b, 0, d), DType::F64, &dev()).unwrap();
            let (a, _) = attention_forward(&x, &p, heads, None).unwrap();
            let (e, _) = attention_forward(&x, &p, heads, Some((&empty, &empty))).unwrap();
            proptest::prop_assert_eq!(a.flatten_all().unwrap().to_vec1::<f64>().unwrap(), e.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        }
    }

    #[test]
    fn timestep_features_shape_and_values() {
        let f = timestep_features(&[0, 10], 6, DType::F64, &dev()).unwrap();
        let rows: Vec<Vec<f64>> = f.to_vec2().unwrap();
        assert_eq!(rows[0], vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        assert!((rows[1][0] - 10f64.cos()).abs() < 1e-12);
        assert!((rows[1][3] - 10f64.sin()).abs() < 1e-12);
        assert!(timestep_features(&[0], 5, DType::F64, &dev()).is_err());
    }

    #[test]
    fn token_round_trip() {
        let x = randn(&[2, 3, 4, 5], 3);
        let back = from_tokens(&to_tokens(&x).unwrap(), 4, 5).unwrap();
        assert_eq!(
            back.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }
}
