//! Network architectures: the conditional U-Net, a per-pixel MLP and a constant mock.

use candle_core::Tensor;
use cfdiff::io::config::{ConfigSection, RunConfig, SectionReader};
use cfdiff::Condition;

use crate::error::{invalid, Error, Result};
use crate::layers::{
    adagroup_norm, attention_forward, conv2d, from_tokens, group_norm_affine, linear, lookup, split_half,
    time_embedding, timestep_features, to_tokens, AttentionWeights,
};
use crate::params::{get, Init, ParamSpec, Weights};

/// How the class label reaches the U-Net.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditioningMode {
    /// Label ignored.
    Unconditional,
    /// A learned class vector is added to the time embedding, so it modulates every
    /// adaptive group normalization.
    AdaGroup,
    /// A learned `d_τ × d_τ` matrix per condition, projected per attention layer and
    /// appended to the keys and values.
    Attention,
}

impl ConditioningMode {
    pub fn name(self) -> &'static str {
        match self {
            ConditioningMode::Unconditional => "unconditional",
            ConditioningMode::AdaGroup => "adagroup",
            ConditioningMode::Attention => "attention",
        }
    }
}

impl std::str::FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unconditional" => Ok(ConditioningMode::Unconditional),
            "adagroup" => Ok(ConditioningMode::AdaGroup),
            "attention" => Ok(ConditioningMode::Attention),
            other => Err(invalid(format!("unknown conditioning mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Two-level U-Net: a residual block at full resolution, a strided convolution, a residual
/// block plus attention at half resolution, a middle residual block plus attention, nearest
/// upsampling and a residual block on the concatenated full-resolution skip.
#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Width at full resolution.
    pub width: usize,
    /// Width at half resolution.
    pub inner_width: usize,
    pub groups: usize,
    pub heads: usize,
    /// Side length of the per-condition context matrix.
    pub cond_dim: usize,
    pub mode: ConditioningMode,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            width: 64,
            inner_width: 128,
            groups: 8,
            heads: 4,
            cond_dim: 8,
            mode: ConditioningMode::Attention,
        }
    }
}

impl UNetConfig {
    fn time_dim(&self) -> usize {
        4 * self.width
    }

    fn validate(&self) -> Result<()> {
        let (c1, c2) = (self.width, self.inner_width);
        if self.in_channels == 0 || c1 == 0 || c2 == 0 || self.cond_dim == 0 {
            return Err(invalid("U-Net widths must be positive"));
        }
        if c1 % 2 != 0 {
            return Err(invalid("U-Net width must be even for the time features"));
        }
        if self.groups == 0 || c1 % self.groups != 0 || c2 % self.groups != 0 {
            return Err(invalid(format!("{} groups must divide widths {c1} and {c2}", self.groups)));
        }
        if self.heads == 0 || c2 % self.heads != 0 {
            return Err(invalid(format!("{} heads must divide width {c2}", self.heads)));
        }
        Ok(())
    }
}

/// Per-pixel MLP: channels plus sinusoidal time features through two SiLU hidden layers.
/// Used for low-dimensional data where a convolutional network is unnecessary.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpConfig {
    pub in_channels: usize,
    pub hidden: usize,
    pub time_features: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Architecture {
    UNet(UNetConfig),
    PixelMlp(MlpConfig),
    /// Predicts a fixed value per condition regardless of input; has no parameters.
    Constant { in_channels: usize, values: [f32; 3] },
}

fn conv(specs: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize, k: usize, zero: bool) {
    let bound = 1.0 / ((cin * k * k) as f64).sqrt();
    let init = if zero { Init::Zeros } else { Init::Uniform(bound) };
    specs.push(ParamSpec::new(format!("{name}.w"), &[cout, cin, k, k], init));
    specs.push(ParamSpec::new(format!("{name}.b"), &[cout], Init::Zeros));
}

fn lin(specs: &mut Vec<ParamSpec>, name: &str, din: usize, dout: usize, bias: bool, zero: bool) {
    let init = if zero { Init::Zeros } else { Init::Uniform(1.0 / (din as f64).sqrt()) };
    specs.push(ParamSpec::new(format!("{name}.w"), &[dout, din], init));
    if bias {
        specs.push(ParamSpec::new(format!("{name}.b"), &[dout], Init::Zeros));
    }
}

fn norm(specs: &mut Vec<ParamSpec>, name: &str, c: usize) {
    specs.push(ParamSpec::new(format!("{name}.g"), &[c], Init::Ones));
    specs.push(ParamSpec::new(format!("{name}.b"), &[c], Init::Zeros));
}

fn resblock_specs(specs: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize, tdim: usize) {
    norm(specs, &format!("{name}.norm1"), cin);
    conv(specs, &format!("{name}.conv1"), cin, cout, 3, false);
    lin(specs, &format!("{name}.emb"), tdim, 2 * cout, true, false);
    conv(specs, &format!("{name}.conv2"), cout, cout, 3, true);
    if cin != cout {
        conv(specs, &format!("{name}.skip"), cin, cout, 1, false);
    }
}

/// Init gain of the context projection. Eight context keys compete with 256 spatial keys
/// for attention mass; at unit gain they draw almost none of it and the network barely
/// learns the condition within a desk-scale budget.
const CONTEXT_GAIN: f64 = 4.0;

fn attention_specs(specs: &mut Vec<ParamSpec>, name: &str, c: usize, cond_dim: Option<usize>) {
    norm(specs, &format!("{name}.norm"), c);
    for p in ["q", "k", "v"] {
        lin(specs, &format!("{name}.{p}"), c, c, true, false);
    }
    lin(specs, &format!("{name}.out"), c, c, true, true);
    if let Some(d) = cond_dim {
        let bound = CONTEXT_GAIN / (d as f64).sqrt();
        specs.push(ParamSpec::new(format!("{name}.ctx.w"), &[2 * c, d], Init::Uniform(bound)));
        specs.push(ParamSpec::new(format!("{name}.ctx.b"), &[2 * c], Init::Zeros));
    }
}

impl Architecture {
    pub fn in_channels(&self) -> usize {
        match self {
            Architecture::UNet(c) => c.in_channels,
            Architecture::PixelMlp(c) => c.in_channels,
            Architecture::Constant { in_channels, .. } => *in_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::UNet(c) => c.validate(),
            Architecture::PixelMlp(c) => {
                if c.in_channels == 0 || c.hidden == 0 || c.time_features == 0 || c.time_features % 2 != 0 {
                    return Err(invalid("MLP sizes must be positive, time features even"));
                }
                Ok(())
            }
            Architecture::Constant { in_channels, values } => {
                if *in_channels == 0 || values.iter().any(|v| !v.is_finite()) {
                    return Err(invalid("constant model needs channels and finite values"));
                }
                Ok(())
            }
        }
    }

    /// Spatial sizes the network accepts.
    pub fn check_input(&self, dims: &[usize]) -> Result<()> {
        let [_, m, h, w] = dims else {
            return Err(invalid(format!("expected [B, M, H, W], got {dims:?}")));
        };
        if *m != self.in_channels() {
            return Err(invalid(format!("expected {} channels, got {m}", self.in_channels())));
        }
        if matches!(self, Architecture::UNet(_)) && (h % 2 != 0 || w % 2 != 0) {
            return Err(invalid(format!("U-Net needs even spatial dims, got {h}x{w}")));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut s = Vec::new();
        match self {
            Architecture::UNet(c) => {
                let (m, c1, c2, td) = (c.in_channels, c.width, c.inner_width, c.time_dim());
                lin(&mut s, "time.l1", c1, td, true, false);
                lin(&mut s, "time.l2", td, td, true, false);
                let ctx = match c.mode {
                    ConditioningMode::Unconditional => None,
                    ConditioningMode::AdaGroup => {
                        s.push(ParamSpec::new("class.table", &[3, td], Init::Normal(1.0)));
                        None
                    }
                    ConditioningMode::Attention => {
                        let d = c.cond_dim;
                        s.push(ParamSpec::new("cond.table", &[3, d, d], Init::Normal(1.0)));
                        Some(d)
                    }
                };
                conv(&mut s, "in", m, c1, 3, false);
                resblock_specs(&mut s, "enc0", c1, c1, td);
                conv(&mut s, "down", c1, c1, 3, false);
                resblock_specs(&mut s, "enc1", c1, c2, td);
                attention_specs(&mut s, "attn1", c2, ctx);
                resblock_specs(&mut s, "mid", c2, c2, td);
                attention_specs(&mut s, "attn2", c2, ctx);
                conv(&mut s, "up", c2, c1, 3, false);
                resblock_specs(&mut s, "dec0", 2 * c1, c1, td);
                norm(&mut s, "out.norm", c1);
                conv(&mut s, "out", c1, m, 3, false);
            }
            Architecture::PixelMlp(c) => {
                let din = c.in_channels + c.time_features;
                lin(&mut s, "mlp.l1", din, c.hidden, true, false);
                lin(&mut s, "mlp.l2", c.hidden, c.hidden, true, false);
                lin(&mut s, "mlp.l3", c.hidden, c.in_channels, true, false);
            }
            Architecture::Constant { .. } => {}
        }
        s
    }

    /// ε-prediction for `x` of shape `[B, M, H, W]` with per-item timesteps and conditions.
    pub fn forward(&self, w: &Weights, x: &Tensor, t: &[usize], c: &[Condition]) -> Result<Tensor> {
        let b = x.dim(0)?;
        if t.len() != b || c.len() != b {
            return Err(invalid(format!(
                "batch of {b} with {} timesteps and {} conditions",
                t.len(),
                c.len()
            )));
        }
        self.check_input(x.dims())?;
        match self {
            Architecture::UNet(cfg) => unet_forward(cfg, w, x, t, c),
            Architecture::PixelMlp(cfg) => mlp_forward(cfg, w, x, t),
            Architecture::Constant { values, .. } => {
                let per_item: Vec<Tensor> = c
                    .iter()
                    .map(|ci| {
                        let (_, m, h, ww) = x.dims4()?;
                        Tensor::full(values[ci.index()], (1, m, h, ww), x.device())?.to_dtype(x.dtype())
                    })
                    .collect::<candle_core::Result<_>>()?;
                Ok(Tensor::cat(&per_item, 0)?)
            }
        }
    }
}

struct Ctx<'a> {
    w: &'a Weights,
    groups: usize,
}

impl Ctx<'_> {
    fn p(&self, name: &str) -> Result<&Tensor> {
        get(self.w, name)
    }

    fn opt(&self, name: &str) -> Option<&Tensor> {
        self.w.get(name)
    }

    fn conv(&self, name: &str, x: &Tensor, stride: usize) -> Result<Tensor> {
        conv2d(x, self.p(&format!("{name}.w"))?, self.p(&format!("{name}.b"))?, stride)
    }

    fn lin(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        linear(x, self.p(&format!("{name}.w"))?, self.opt(&format!("{name}.b")))
    }

    fn norm(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        group_norm_affine(x, self.groups, self.p(&format!("{name}.g"))?, self.p(&format!("{name}.b"))?)
    }

    /// `x + conv2(SiLU(AdaGroup(conv1(SiLU(GN(x))), 1 + scale, shift)))`.
    fn resblock(&self, name: &str, x: &Tensor, emb_act: &Tensor) -> Result<Tensor> {
        let h = self.conv(&format!("{name}.conv1"), &self.norm(&format!("{name}.norm1"), x)?.silu()?, 1)?;
        let (scale, shift) = split_half(&self.lin(&format!("{name}.emb"), emb_act)?)?;
        let h = adagroup_norm(&h, self.groups, &(scale + 1.0)?, &shift)?;
        let h = self.conv(&format!("{name}.conv2"), &h.silu()?, 1)?;
        let skip = if self.w.contains_key(&format!("{name}.skip.w")) {
            self.conv(&format!("{name}.skip"), x, 1)?
        } else {
            x.clone()
        };
        Ok((skip + h)?)
    }

    /// Residual attention over spatial positions, optionally with condition context rows.
    fn attention(&self, name: &str, x: &Tensor, heads: usize, cond: Option<&Tensor>) -> Result<Tensor> {
        let (_, _, h, wd) = x.dims4()?;
        let tokens = to_tokens(&self.norm(&format!("{name}.norm"), x)?)?;
        let ctx = match cond {
            Some(tau) => Some(split_half(&self.lin(&format!("{name}.ctx"), tau)?)?),
            None => None,
        };
        let weights = AttentionWeights {
            wq: self.p(&format!("{name}.q.w"))?,
            wk: self.p(&format!("{name}.k.w"))?,
            wv: self.p(&format!("{name}.v.w"))?,
            wo: self.p(&format!("{name}.out.w"))?,
            bq: self.opt(&format!("{name}.q.b")),
            bk: self.opt(&format!("{name}.k.b")),
            bv: self.opt(&format!("{name}.v.b")),
            bo: self.opt(&format!("{name}.out.b")),
        };
        let (out, _) = attention_forward(
            &tokens,
            &weights,
            heads,
            ctx.as_ref().map(|(k, v)| (k, v)),
        )?;
        Ok((x + from_tokens(&out, h, wd)?)?)
    }
}

/// Selects the condition context matrices `[B, d_τ, d_τ]`.
pub fn embed_conditions(w: &Weights, c: &[Condition]) -> Result<Tensor> {
    lookup(get(w, "cond.table")?, &c.iter().map(|ci| ci.index()).collect::<Vec<_>>())
}

fn unet_forward(cfg: &UNetConfig, w: &Weights, x: &Tensor, t: &[usize], c: &[Condition]) -> Result<Tensor> {
    let ctx = Ctx { w, groups: cfg.groups };
    let mut emb = time_embedding(
        t,
        cfg.width,
        ctx.p("time.l1.w")?,
        ctx.p("time.l1.b")?,
        ctx.p("time.l2.w")?,
        ctx.p("time.l2.b")?,
    )?;
    let idx: Vec<usize> = c.iter().map(|ci| ci.index()).collect();
    let cond = match cfg.mode {
        ConditioningMode::Unconditional => None,
        ConditioningMode::AdaGroup => {
            emb = (emb + lookup(ctx.p("class.table")?, &idx)?)?;
            None
        }
        ConditioningMode::Attention => Some(embed_conditions(w, c)?),
    };
    let emb = emb.silu()?;
    let h = ctx.conv("in", x, 1)?;
    let s0 = ctx.resblock("enc0", &h, &emb)?;
    let h = ctx.conv("down", &s0, 2)?;
    let h = ctx.resblock("enc1", &h, &emb)?;
    let h = ctx.attention("attn1", &h, cfg.heads, cond.as_ref())?;
    let h = ctx.resblock("mid", &h, &emb)?;
    let h = ctx.attention("attn2", &h, cfg.heads, cond.as_ref())?;
    let (_, _, hh, ww) = s0.dims4()?;
    let h = ctx.conv("up", &h.upsample_nearest2d(hh, ww)?, 1)?;
    let h = ctx.resblock("dec0", &Tensor::cat(&[&h, &s0], 1)?, &emb)?;
    ctx.conv("out", &ctx.norm("out.norm", &h)?.silu()?, 1)
}

fn mlp_forward(cfg: &MlpConfig, w: &Weights, x: &Tensor, t: &[usize]) -> Result<Tensor> {
    let (b, m, h, wd) = x.dims4()?;
    let ctx = Ctx { w, groups: 1 };
    let tf = timestep_features(t, cfg.time_features, x.dtype(), x.device())?;
    // [B, HW, M] pixels joined with the item's time features
    let px = to_tokens(x)?;
    let tf = tf.unsqueeze(1)?.broadcast_as((b, h * wd, cfg.time_features))?;
    let inp = Tensor::cat(&[&px, &tf.contiguous()?], 2)?;
    let z = ctx.lin("mlp.l1", &inp)?.silu()?;
    let z = ctx.lin("mlp.l2", &z)?.silu()?;
    let out = ctx.lin("mlp.l3", &z)?;
    debug_assert_eq!(out.dim(2)?, m);
    from_tokens(&out, h, wd)
}

impl ConfigSection for Architecture {
    const SECTION: &'static str = "architecture";

    fn read(r: &SectionReader<'_>) -> cfdiff::Result<Self> {
        let kind: String = r.req("kind")?;
        let cfg_err = |e: Error| cfdiff::Error::Config(e.to_string());
        let arch = match kind.as_str() {
            "unet" => {
                let mode: String = r.req("conditioning")?;
                Architecture::UNet(UNetConfig {
                    in_channels: r.req("in_channels")?,
                    width: r.req("width")?,
                    inner_width: r.req("inner_width")?,
                    groups: r.req("groups")?,
                    heads: r.req("heads")?,
                    cond_dim: r.req("cond_dim")?,
                    mode: mode.parse().map_err(cfg_err)?,
                })
            }
            "mlp" => Architecture::PixelMlp(MlpConfig {
                in_channels: r.req("in_channels")?,
                hidden: r.req("hidden")?,
                time_features: r.req("time_features")?,
            }),
            "constant" => Architecture::Constant {
                in_channels: r.req("in_channels")?,
                values: [r.req("healthy")?, r.req("unhealthy")?, r.req("null")?],
            },
            other => return Err(cfdiff::Error::Config(format!("unknown architecture kind {other:?}"))),
        };
        arch.validate().map_err(cfg_err)?;
        Ok(arch)
    }

    fn write(&self, cfg: &mut RunConfig) {
        let s = Self::SECTION;
        match self {
            Architecture::UNet(c) => {
                cfg.set(s, "kind", "unet");
                cfg.set(s, "in_channels", c.in_channels);
                cfg.set(s, "width", c.width);
                cfg.set(s, "inner_width", c.inner_width);
                cfg.set(s, "groups", c.groups);
                cfg.set(s, "heads", c.heads);
                cfg.set(s, "cond_dim", c.cond_dim);
                cfg.set(s, "conditioning", c.mode);
            }
            Architecture::PixelMlp(c) => {
                cfg.set(s, "kind", "mlp");
                cfg.set(s, "in_channels", c.in_channels);
                cfg.set(s, "hidden", c.hidden);
                cfg.set(s, "time_features", c.time_features);
            }
            Architecture::Constant { in_channels, values } => {
                cfg.set(s, "kind", "constant");
                cfg.set(s, "in_channels", in_channels);
                cfg.set(s, "healthy", values[0]);
                cfg.set(s, "unhealthy", values[1]);
                cfg.set(s, "null", values[2]);
            }
        }
    }
}
