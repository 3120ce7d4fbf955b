//! The denoiser networks, condition heads, frozen feature extractor and the
//! adversarial discriminator.
//!
//! Every component is an architecture descriptor plus pure graph-building
//! code; parameters live in a [`ParamSet`] owned by the caller. Conditioning
//! flows through a shared latent: `K` semantic tokens of width `d`, produced
//! by the pretext descriptor embedding, a task head, or the learned null
//! embedding.

use crate::error::{Error, Result};
use crate::nn::{
    randn, timestep_features, Bound, Conv2d, CrossAttn, GroupNorm, Linear, ParamSet, ResBlock,
};
use crate::tape::{Scalar, Tape, Var};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Name of the learned null-condition embedding inside base checkpoints.
pub const NULL_TOKEN_PARAM: &str = "null.tok";

/// Downstream task modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Mask,
    Sketch,
    Geometry,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Mask => "mask",
            TaskKind::Sketch => "sketch",
            TaskKind::Geometry => "geometry",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(TaskKind::Mask),
            "sketch" => Ok(TaskKind::Sketch),
            "geometry" => Ok(TaskKind::Geometry),
            other => Err(Error::Parameter(format!("unknown task '{other}'"))),
        }
    }

    /// Channels the head consumes for this modality.
    pub fn in_channels(&self) -> usize {
        match self {
            TaskKind::Mask => NUM_MASK_CHANNELS,
            TaskKind::Sketch => 1,
            TaskKind::Geometry => 1,
        }
    }
}

/// Background plus the four shape classes.
pub const NUM_MASK_CHANNELS: usize = 5;

/// A conditioning input for the base model.
#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    /// Pretext class-count + palette descriptor.
    Descriptor(Vec<f32>),
    /// Per-pixel class indices (0 = background).
    Mask(Array2<u8>),
    /// Binary edge map.
    Sketch(Array2<u8>),
    /// Depth map in `[0, 1]`.
    Geometry(Array2<f32>),
    /// The learned null condition.
    Null,
}

impl Condition {
    pub fn task(&self) -> Option<TaskKind> {
        match self {
            Condition::Mask(_) => Some(TaskKind::Mask),
            Condition::Sketch(_) => Some(TaskKind::Sketch),
            Condition::Geometry(_) => Some(TaskKind::Geometry),
            _ => None,
        }
    }

    /// Raster input for the matching task head: `[C, H, W]`.
    pub fn to_channels(&self) -> Result<ArrayD<f32>> {
        match self {
            Condition::Mask(m) => {
                let (h, w) = m.dim();
                let mut out = ArrayD::<f32>::zeros(IxDyn(&[NUM_MASK_CHANNELS, h, w]));
                for y in 0..h {
                    for x in 0..w {
                        let c = m[(y, x)] as usize;
                        if c >= NUM_MASK_CHANNELS {
                            return Err(Error::Parameter(format!(
                                "mask class {c} out of range"
                            )));
                        }
                        out[[c, y, x]] = 1.0;
                    }
                }
                Ok(out)
            }
            Condition::Sketch(s) => {
                let (h, w) = s.dim();
                let mut out = ArrayD::<f32>::zeros(IxDyn(&[1, h, w]));
                for y in 0..h {
                    for x in 0..w {
                        out[[0, y, x]] = s[(y, x)] as f32;
                    }
                }
                Ok(out)
            }
            Condition::Geometry(d) => {
                let (h, w) = d.dim();
                let mut out = ArrayD::<f32>::zeros(IxDyn(&[1, h, w]));
                for y in 0..h {
                    for x in 0..w {
                        out[[0, y, x]] = d[(y, x)];
                    }
                }
                Ok(out)
            }
            other => Err(Error::Modality(format!(
                "condition {other:?} has no raster channels"
            ))),
        }
    }
}

/// Where a token sequence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenProvenance {
    PretextDescriptor,
    TaskHead,
    Null,
}

/// The shared conditioning latent: `K` vectors of width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTokens {
    /// `[K, d]`.
    pub tokens: ArrayD<f32>,
    pub provenance: TokenProvenance,
}

/// Token geometry shared by every conditioner of one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpec {
    pub k: usize,
    pub d: usize,
}

/// Read the learned null embedding as concrete tokens.
pub fn null_tokens(ps: &ParamSet) -> SemanticTokens {
    SemanticTokens {
        tokens: ps.get(NULL_TOKEN_PARAM).clone(),
        provenance: TokenProvenance::Null,
    }
}

pub fn register_null_embedding(ps: &mut ParamSet, spec: TokenSpec, rng: &mut ChaCha8Rng) {
    ps.register(NULL_TOKEN_PARAM, randn(&[spec.k, spec.d], 0.02, rng));
}

/// Embeds the pretext class-count descriptor into semantic tokens.
#[derive(Debug, Clone)]
pub struct DescriptorEmbed {
    pub desc_dim: usize,
    pub spec: TokenSpec,
    l1: Linear,
    l2: Linear,
}

impl DescriptorEmbed {
    pub fn new(desc_dim: usize, spec: TokenSpec) -> Self {
        let hidden = 4 * spec.d.min(64);
        DescriptorEmbed {
            desc_dim,
            spec,
            l1: Linear::new("desc.l1", desc_dim, hidden),
            l2: Linear::new("desc.l2", hidden, spec.k * spec.d),
        }
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
        self.l1.init(ps, rng, 1.0);
        self.l2.init(ps, rng, 1.0);
    }

    /// `desc: [N, desc_dim] -> [N, K, d]`.
    pub fn fwd<T: Scalar>(&self, t: &mut Tape<T>, b: &Bound, desc: Var) -> Var {
        let h = self.l1.fwd(t, b, desc);
        let h = t.silu(h);
        let h = self.l2.fwd(t, b, h);
        let n = t.value(h).shape()[0];
        t.reshape(h, &[n, self.spec.k, self.spec.d])
    }

    /// Eval-mode embedding of one descriptor.
    pub fn encode(&self, ps: &ParamSet, desc: &[f32]) -> Result<SemanticTokens> {
        if desc.len() != self.desc_dim {
            return Err(Error::Shape(format!(
                "descriptor length {} != {}",
                desc.len(),
                self.desc_dim
            )));
        }
        let mut t = Tape::<f32>::new();
        let b = ps.bind(&mut t, |_| false);
        let d = t.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, self.desc_dim]), desc.to_vec()).unwrap(),
        );
        let toks = self.fwd(&mut t, &b, d);
        let out = t
            .value(toks)
            .index_axis(Axis(0), 0)
            .to_owned();
        Ok(SemanticTokens {
            tokens: out,
            provenance: TokenProvenance::PretextDescriptor,
        })
    }
}

/// Per-task condition encoder: conv trunk plus token projection.
#[derive(Debug, Clone)]
pub struct TaskHead {
    pub kind: TaskKind,
    pub spec: TokenSpec,
    pub widths: Vec<usize>,
    pub input_hw: usize,
    convs: Vec<Conv2d>,
    norms: Vec<GroupNorm>,
    proj: Linear,
}

impl TaskHead {
    pub fn new(kind: TaskKind, spec: TokenSpec, widths: &[usize], input_hw: usize, groups: usize) -> Self {
        let prefix = format!("head.{}", kind.name());
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut ch = kind.in_channels();
        for (i, &w) in widths.iter().enumerate() {
            convs.push(Conv2d::new(&format!("{prefix}.conv{i}"), ch, w, 3, 2, 1));
            norms.push(GroupNorm::new(&format!("{prefix}.gn{i}"), w, groups));
            ch = w;
        }
        let final_hw = input_hw >> widths.len();
        let flat = ch * final_hw * final_hw;
        let proj = Linear::new(&format!("{prefix}.proj"), flat, spec.k * spec.d);
        TaskHead {
            kind,
            spec,
            widths: widths.to_vec(),
            input_hw,
            convs,
            norms,
            proj,
        }
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
        for (c, n) in self.convs.iter().zip(&self.norms) {
            c.init(ps, rng, 1.0);
            n.init(ps);
        }
        self.proj.init(ps, rng, 1.0);
    }

    /// `cond: [N, C_task, H, W] -> [N, K, d]`.
    pub fn fwd<T: Scalar>(&self, t: &mut Tape<T>, b: &Bound, cond: Var) -> Var {
        let mut h = cond;
        for (c, n) in self.convs.iter().zip(&self.norms) {
            h = c.fwd(t, b, h);
            h = n.fwd(t, b, h);
            h = t.silu(h);
        }
        let shape = t.value(h).shape().to_vec();
        let flat: usize = shape[1..].iter().product();
        let h = t.reshape(h, &[shape[0], flat]);
        let h = self.proj.fwd(t, b, h);
        t.reshape(h, &[shape[0], self.spec.k, self.spec.d])
    }

    /// Stack a batch of same-task conditions into head input channels.
    pub fn batch_channels(&self, conditions: &[&Condition]) -> Result<ArrayD<f32>> {
        let mut rows = Vec::with_capacity(conditions.len());
        for c in conditions {
            match c.task() {
                Some(k) if k == self.kind => {}
                _ => {
                    return Err(Error::Modality(format!(
                        "head expects {} conditions, got {c:?}",
                        self.kind.name()
                    )))
                }
            }
            rows.push(c.to_channels()?);
        }
        let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
        Ok(ndarray::concatenate(Axis(0), &views).unwrap())
    }
}

/// Map a condition to semantic tokens in eval mode.
///
/// The null condition bypasses the head and returns the learned null
/// embedding; anything else must match the head's modality.
pub fn encode_condition(
    head: &TaskHead,
    ps: &ParamSet,
    condition: &Condition,
) -> Result<SemanticTokens> {
    match condition {
        Condition::Null => Ok(null_tokens(ps)),
        other => {
            let chans = head.batch_channels(&[other])?;
            let mut t = Tape::<f32>::new();
            let b = ps.bind(&mut t, |_| false);
            let c = t.constant(chans);
            let toks = head.fwd(&mut t, &b, c);
            Ok(SemanticTokens {
                tokens: t.value(toks).index_axis(Axis(0), 0).to_owned(),
                provenance: TokenProvenance::TaskHead,
            })
        }
    }
}

/// Architecture of one denoiser UNet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetArch {
    pub in_ch: usize,
    pub out_ch: usize,
    pub resolution: usize,
    pub widths: Vec<usize>,
    pub temb_dim: usize,
    pub groups: usize,
    pub attn_dim: usize,
    /// Token conditioning; `None` builds an unconditional trunk.
    pub tokens: Option<TokenSpec>,
}

impl UNetArch {
    pub fn base_16(widths: &[usize; 3], groups: usize, spec: TokenSpec) -> Self {
        UNetArch {
            in_ch: 3,
            out_ch: 3,
            resolution: 16,
            widths: widths.to_vec(),
            temb_dim: 64,
            groups,
            attn_dim: 32,
            tokens: Some(spec),
        }
    }

    pub fn upsampler_32(widths: &[usize; 3], groups: usize, tokens: Option<TokenSpec>) -> Self {
        UNetArch {
            in_ch: 6,
            out_ch: 3,
            resolution: 32,
            widths: widths.to_vec(),
            temb_dim: 64,
            groups,
            attn_dim: 32,
            tokens,
        }
    }
}

/// Channels of the spatial token map concatenated at the input.
const TOK_MAP_CH: usize = 4;
/// Side of the coarse grid the token map is decoded onto.
const TOK_MAP_HW: usize = 8;

/// Three-level encoder-decoder noise predictor with timestep embedding.
///
/// Token conditioning enters three ways: a learned spatial map of the tokens
/// concatenated to the input channels, mean-token channel biases at every
/// block, and cross-attention at the two coarsest resolutions.
#[derive(Debug, Clone)]
pub struct UNet {
    pub arch: UNetArch,
    prefix: String,
    temb1: Linear,
    temb2: Linear,
    tok_map: Option<Linear>,
    conv_in: Conv2d,
    enc0: ResBlock,
    down0: Conv2d,
    enc1: ResBlock,
    attn_enc: Option<CrossAttn>,
    down1: Conv2d,
    mid1: ResBlock,
    attn: Option<CrossAttn>,
    mid2: ResBlock,
    upc1: Conv2d,
    dec1: ResBlock,
    attn_dec: Option<CrossAttn>,
    upc0: Conv2d,
    dec0: ResBlock,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

const TFEAT_DIM: usize = 32;

impl UNet {
    pub fn new(prefix: &str, arch: UNetArch) -> Self {
        let w = &arch.widths;
        assert_eq!(w.len(), 3, "three resolution levels");
        let g = arch.groups;
        let ed = arch.temb_dim;
        let td = arch.tokens.map(|s| s.d);
        let p = prefix;
        UNet {
            temb1: Linear::new(&format!("{p}.temb1"), TFEAT_DIM, ed),
            temb2: Linear::new(&format!("{p}.temb2"), ed, ed),
            conv_in: Conv2d::new(&format!("{p}.in"), arch.in_ch, w[0], 3, 1, 1),
            enc0: ResBlock::new(&format!("{p}.enc0"), w[0], w[0], ed, td, g),
            down0: Conv2d::new(&format!("{p}.down0"), w[0], w[1], 3, 2, 1),
            enc1: ResBlock::new(&format!("{p}.enc1"), w[1], w[1], ed, td, g),
            attn_enc: arch
                .tokens
                .map(|s| CrossAttn::new(&format!("{p}.attne"), w[1], s.d, arch.attn_dim, g)),
            down1: Conv2d::new(&format!("{p}.down1"), w[1], w[2], 3, 2, 1),
            mid1: ResBlock::new(&format!("{p}.mid1"), w[2], w[2], ed, td, g),
            attn: arch
                .tokens
                .map(|s| CrossAttn::new(&format!("{p}.attn"), w[2], s.d, arch.attn_dim, g)),
            mid2: ResBlock::new(&format!("{p}.mid2"), w[2], w[2], ed, td, g),
            upc1: Conv2d::new(&format!("{p}.upc1"), w[2], w[1], 3, 1, 1),
            dec1: ResBlock::new(&format!("{p}.dec1"), 2 * w[1], w[1], ed, td, g),
            attn_dec: arch
                .tokens
                .map(|s| CrossAttn::new(&format!("{p}.attnd"), w[1], s.d, arch.attn_dim, g)),
            upc0: Conv2d::new(&format!("{p}.upc0"), w[1], w[0], 3, 1, 1),
            dec0: ResBlock::new(&format!("{p}.dec0"), 2 * w[0], w[0], ed, td, g),
            out_norm: GroupNorm::new(&format!("{p}.outn"), w[0], g),
            out_conv: Conv2d::new(&format!("{p}.out"), w[0], arch.out_ch, 3, 1, 1),
            prefix: p.to_string(),
            arch,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn init_params(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
        self.temb1.init(ps, rng, 1.0);
        self.temb2.init(ps, rng, 1.0);
        self.conv_in.init(ps, rng, 1.0);
        self.enc0.init(ps, rng);
        self.down0.init(ps, rng, 1.0);
        self.enc1.init(ps, rng);
        if let Some(a) = &self.attn_enc {
            a.init(ps, rng);
        }
        self.down1.init(ps, rng, 1.0);
        self.mid1.init(ps, rng);
        if let Some(a) = &self.attn {
            a.init(ps, rng);
        }
        self.mid2.init(ps, rng);
        self.upc1.init(ps, rng, 1.0);
        self.dec1.init(ps, rng);
        if let Some(a) = &self.attn_dec {
            a.init(ps, rng);
        }
        self.upc0.init(ps, rng, 1.0);
        self.dec0.init(ps, rng);
        self.out_norm.init(ps);
        // Zero-initialized output projection: the fresh model predicts zero
        // noise, so the simple loss starts at E||eps||^2 (about 1 per element).
        ps.register(
            &format!("{}.out.w", self.prefix),
            ArrayD::zeros(IxDyn(&[
                self.arch.out_ch,
                self.arch.widths[0],
                3,
                3,
            ])),
        );
        ps.register(
            &format!("{}.out.b", self.prefix),
            ArrayD::zeros(IxDyn(&[self.arch.out_ch])),
        );
    }

    /// Noise prediction graph. `x: [N, in_ch, R, R]`, `tokens: [N, K, d]`
    /// required iff the arch is token-conditioned.
    pub fn fwd<T: Scalar>(
        &self,
        t: &mut Tape<T>,
        b: &Bound,
        x: Var,
        ts: &[usize],
        tokens: Option<Var>,
    ) -> Var {
        assert_eq!(
            tokens.is_some(),
            self.arch.tokens.is_some(),
            "token input must match arch"
        );
        let tf = t.constant(timestep_features::<T>(ts, TFEAT_DIM));
        let emb = self.temb1.fwd(t, b, tf);
        let emb = t.silu(emb);
        let emb = self.temb2.fwd(t, b, emb);

        let tok_mean = tokens.map(|tk| t.mean_axis(tk, 1));

        let h0 = self.conv_in.fwd(t, b, x);
        let h0 = self.enc0.fwd(t, b, h0, emb, tok_mean);
        let h1 = self.down0.fwd(t, b, h0);
        let mut h1 = self.enc1.fwd(t, b, h1, emb, tok_mean);
        if let (Some(a), Some(tk)) = (&self.attn_enc, tokens) {
            h1 = a.fwd(t, b, h1, tk);
        }
        let h2 = self.down1.fwd(t, b, h1);
        let mut h2 = self.mid1.fwd(t, b, h2, emb, tok_mean);
        if let (Some(a), Some(tk)) = (&self.attn, tokens) {
            h2 = a.fwd(t, b, h2, tk);
        }
        let h2 = self.mid2.fwd(t, b, h2, emb, tok_mean);

        let u1 = t.upsample_nearest2(h2);
        let u1 = self.upc1.fwd(t, b, u1);
        let u1 = t.concat(u1, h1, 1);
        let mut u1 = self.dec1.fwd(t, b, u1, emb, tok_mean);
        if let (Some(a), Some(tk)) = (&self.attn_dec, tokens) {
            u1 = a.fwd(t, b, u1, tk);
        }
        let u0 = t.upsample_nearest2(u1);
        let u0 = self.upc0.fwd(t, b, u0);
        let u0 = t.concat(u0, h0, 1);
        let u0 = self.dec0.fwd(t, b, u0, emb, tok_mean);

        let out = self.out_norm.fwd(t, b, u0);
        let out = t.silu(out);
        self.out_conv.fwd(t, b, out)
    }
}

/// Eval-mode noise prediction for a batch.
///
/// `low_res` is the bilinearly upsampled conditioning image, required exactly
/// when the model consumes 6 channels.
pub fn denoise(
    model: &UNet,
    ps: &ParamSet,
    x_t: &ArrayD<f32>,
    ts: &[usize],
    tokens: Option<&ArrayD<f32>>,
    low_res: Option<&ArrayD<f32>>,
) -> Result<ArrayD<f32>> {
    let n = x_t.shape()[0];
    if ts.len() != n {
        return Err(Error::Shape(format!(
            "{} timesteps for batch of {n}",
            ts.len()
        )));
    }
    if x_t.shape()[1] != 3 {
        return Err(Error::Shape(format!(
            "noisy input must have 3 channels, got {}",
            x_t.shape()[1]
        )));
    }
    let expects_lowres = model.arch.in_ch == 6;
    if expects_lowres != low_res.is_some() {
        return Err(Error::Parameter(if expects_lowres {
            "upsampler requires a low-res conditioning image".into()
        } else {
            "base model does not accept a low-res conditioning image".into()
        }));
    }
    if model.arch.tokens.is_some() != tokens.is_some() {
        return Err(Error::Parameter(
            "token input does not match model conditioning".into(),
        ));
    }

    let mut t = Tape::<f32>::new();
    let b = ps.bind(&mut t, |_| false);
    let x = match low_res {
        Some(lr) => {
            if lr.shape() != x_t.shape() {
                return Err(Error::Shape(format!(
                    "low-res conditioning {:?} vs noisy {:?}",
                    lr.shape(),
                    x_t.shape()
                )));
            }
            let xt = t.constant(x_t.clone());
            let lr = t.constant(lr.clone());
            t.concat(xt, lr, 1)
        }
        None => t.constant(x_t.clone()),
    };
    let tok_var = tokens.map(|tk| t.constant(tk.clone()));
    let eps = model.fwd(&mut t, &b, x, ts, tok_var);
    Ok(t.value(eps).clone())
}

/// Frozen multilevel feature network (3 stages).
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub widths: Vec<usize>,
    pub input_hw: usize,
    pub num_classes: usize,
    convs: Vec<Conv2d>,
    norms: Vec<GroupNorm>,
    cls: Linear,
}

/// Architecture block stored in extractor checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorArch {
    pub widths: Vec<usize>,
    pub input_hw: usize,
    pub groups: usize,
    pub num_classes: usize,
}

impl FeatureExtractor {
    pub fn new(arch: &ExtractorArch) -> Self {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut ch = 3;
        for (i, &w) in arch.widths.iter().enumerate() {
            convs.push(Conv2d::new(&format!("feat.conv{i}"), ch, w, 3, 2, 1));
            norms.push(GroupNorm::new(&format!("feat.gn{i}"), w, arch.groups));
            ch = w;
        }
        FeatureExtractor {
            widths: arch.widths.clone(),
            input_hw: arch.input_hw,
            num_classes: arch.num_classes,
            convs,
            norms,
            cls: Linear::new("feat.cls", ch, arch.num_classes),
        }
    }

    pub fn init_params(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
        for (c, n) in self.convs.iter().zip(&self.norms) {
            c.init(ps, rng, 1.0);
            n.init(ps);
        }
        self.cls.init(ps, rng, 1.0);
    }

    /// Stage activations; the last element is the deepest stage.
    pub fn stages<T: Scalar>(&self, t: &mut Tape<T>, b: &Bound, x: Var) -> Vec<Var> {
        let mut h = x;
        let mut out = Vec::new();
        for (c, n) in self.convs.iter().zip(&self.norms) {
            h = c.fwd(t, b, h);
            h = n.fwd(t, b, h);
            h = t.silu(h);
            out.push(h);
        }
        out
    }

    /// Class-presence logits for classifier pretraining: `[N, num_classes]`.
    pub fn class_logits<T: Scalar>(&self, t: &mut Tape<T>, b: &Bound, x: Var) -> Var {
        let stages = self.stages(t, b, x);
        let last = *stages.last().unwrap();
        let l = t.nchw_to_nlc(last);
        let pooled = t.mean_axis(l, 1); // [N, C]
        self.cls.fwd(t, b, pooled)
    }

    /// Eval-mode stage activations for a batch of images.
    pub fn features(&self, ps: &ParamSet, images: &ArrayD<f32>) -> Result<Vec<ArrayD<f32>>> {
        if images.ndim() != 4
            || images.shape()[1] != 3
            || images.shape()[2] != self.input_hw
            || images.shape()[3] != self.input_hw
        {
            return Err(Error::Shape(format!(
                "extractor expects [N,3,{0},{0}], got {1:?}",
                self.input_hw,
                images.shape()
            )));
        }
        let mut t = Tape::<f32>::new();
        let b = ps.bind(&mut t, |_| false);
        let x = t.constant(images.clone());
        let stages = self.stages(&mut t, &b, x);
        Ok(stages.iter().map(|&s| t.value(s).clone()).collect())
    }

    /// Deepest stage, globally mean-pooled: `[N, widths.last()]`.
    pub fn pooled_features(&self, ps: &ParamSet, images: &ArrayD<f32>) -> Result<Array2<f32>> {
        let stages = self.features(ps, images)?;
        let last = stages.last().unwrap();
        let n = last.shape()[0];
        let c = last.shape()[1];
        let mut out = Array2::<f32>::zeros((n, c));
        for i in 0..n {
            for ch in 0..c {
                let m: f64 = last
                    .index_axis(Axis(0), i)
                    .index_axis(Axis(0), ch)
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>()
                    / (last.shape()[2] * last.shape()[3]) as f64;
                out[(i, ch)] = m as f32;
            }
        }
        Ok(out)
    }
}

/// Small convolutional real/fake classifier over 32x32 images.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub widths: Vec<usize>,
    pub input_hw: usize,
    convs: Vec<Conv2d>,
    fc: Linear,
}

impl Discriminator {
    pub fn new(widths: &[usize], input_hw: usize) -> Self {
        let mut convs = Vec::new();
        let mut ch = 3;
        for (i, &w) in widths.iter().enumerate() {
            convs.push(Conv2d::new(&format!("disc.conv{i}"), ch, w, 3, 2, 1));
            ch = w;
        }
        let final_hw = input_hw >> widths.len();
        Discriminator {
            widths: widths.to_vec(),
            input_hw,
            convs,
            fc: Linear::new("disc.fc", ch * final_hw * final_hw, 1),
        }
    }

    pub fn init_params(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
        for c in &self.convs {
            c.init(ps, rng, 1.0);
        }
        self.fc.init(ps, rng, 1.0);
    }

    /// Logit graph: `[N,3,H,W] -> [N,1]`.
    pub fn fwd<T: Scalar>(&self, t: &mut Tape<T>, b: &Bound, x: Var) -> Var {
        let mut h = x;
        for c in &self.convs {
            h = c.fwd(t, b, h);
            h = t.leaky_relu(h, 0.2);
        }
        let shape = t.value(h).shape().to_vec();
        let flat: usize = shape[1..].iter().product();
        let h = t.reshape(h, &[shape[0], flat]);
        self.fc.fwd(t, b, h)
    }

    /// Eval-mode logit for a single image `[3,H,W]`.
    pub fn discriminate(&self, ps: &ParamSet, image: &ArrayD<f32>) -> Result<f32> {
        if image.ndim() != 3
            || image.shape()[0] != 3
            || image.shape()[1] != self.input_hw
            || image.shape()[2] != self.input_hw
        {
            return Err(Error::Shape(format!(
                "discriminator expects [3,{0},{0}], got {1:?}",
                self.input_hw,
                image.shape()
            )));
        }
        let mut t = Tape::<f32>::new();
        let b = ps.bind(&mut t, |_| false);
        let x = t.constant(image.clone().insert_axis(Axis(0)));
        let l = self.fwd(&mut t, &b, x);
        Ok(t.value(l)[[0, 0]])
    }
}

pub fn logistic(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Base-model bundle: token geometry plus all conditioners that share it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseArch {
    pub unet: UNetArch,
    pub desc_dim: usize,
    pub head_widths: Vec<usize>,
    pub cond_hw: usize,
    pub task: Option<TaskKind>,
}

impl BaseArch {
    pub fn spec(&self) -> TokenSpec {
        self.unet.tokens.expect("base model is token-conditioned")
    }
}

/// The base denoiser plus its conditioners, built from one arch block.
#[derive(Debug, Clone)]
pub struct BaseModel {
    pub arch: BaseArch,
    pub unet: UNet,
    pub desc: DescriptorEmbed,
    pub head: Option<TaskHead>,
}

impl BaseModel {
    pub fn new(arch: BaseArch) -> Self {
        let unet = UNet::new("unet", arch.unet.clone());
        let desc = DescriptorEmbed::new(arch.desc_dim, arch.spec());
        let head = arch
            .task
            .map(|k| TaskHead::new(k, arch.spec(), &arch.head_widths, arch.cond_hw, arch.unet.groups));
        BaseModel {
            arch,
            unet,
            desc,
            head,
        }
    }

    /// Fresh parameters for every component the arch declares.
    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        let mut ps = ParamSet::new();
        self.unet.init_params(&mut ps, rng);
        self.desc.init(&mut ps, rng);
        register_null_embedding(&mut ps, self.arch.spec(), rng);
        if let Some(h) = &self.head {
            h.init(&mut ps, rng);
        }
        ps
    }

    /// Encode one condition with whatever conditioner matches it.
    pub fn encode(&self, ps: &ParamSet, condition: &Condition) -> Result<SemanticTokens> {
        match condition {
            Condition::Null => Ok(null_tokens(ps)),
            Condition::Descriptor(d) => self.desc.encode(ps, d),
            other => match &self.head {
                Some(h) => encode_condition(h, ps, other),
                None => Err(Error::Modality(format!(
                    "model has no task head for {other:?}"
                ))),
            },
        }
    }

    /// Encode a slice of conditions into a `[N, K, d]` token batch.
    pub fn encode_batch(&self, ps: &ParamSet, conditions: &[Condition]) -> Result<ArrayD<f32>> {
        let spec = self.arch.spec();
        let mut out = ArrayD::<f32>::zeros(IxDyn(&[conditions.len(), spec.k, spec.d]));
        for (i, c) in conditions.iter().enumerate() {
            let toks = self.encode(ps, c)?;
            out.index_axis_mut(Axis(0), i).assign(&toks.tokens);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_arch(task: Option<TaskKind>) -> BaseArch {
        BaseArch {
            unet: UNetArch {
                in_ch: 3,
                out_ch: 3,
                resolution: 16,
                widths: vec![8, 16, 24],
                temb_dim: 16,
                groups: 4,
                attn_dim: 8,
                tokens: Some(TokenSpec { k: 2, d: 8 }),
            },
            desc_dim: 8,
            head_widths: vec![8, 8, 8],
            cond_hw: 32,
            task,
        }
    }

    #[test]
    fn fresh_unet_predicts_zero_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = BaseModel::new(tiny_arch(None));
        let ps = model.init_params(&mut rng);
        let x = randn(&[2, 3, 16, 16], 1.0, &mut rng);
        let toks = randn(&[2, 2, 8], 1.0, &mut rng);
        let eps = denoise(&model.unet, &ps, &x, &[3, 7], Some(&toks), None).unwrap();
        assert_eq!(eps.shape(), &[2, 3, 16, 16]);
        assert!(eps.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn denoise_is_deterministic_and_validates_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = BaseModel::new(tiny_arch(None));
        let mut ps = model.init_params(&mut rng);
        // Perturb the zero-initialized output layer so outputs are nonzero.
        *ps.get_mut("unet.out.w") = randn(&[3, 8, 3, 3], 0.1, &mut rng);
        let x = randn(&[2, 3, 16, 16], 1.0, &mut rng);
        let toks = randn(&[2, 2, 8], 1.0, &mut rng);
        let a = denoise(&model.unet, &ps, &x, &[3, 7], Some(&toks), None).unwrap();
        let b = denoise(&model.unet, &ps, &x, &[3, 7], Some(&toks), None).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().any(|&v| v != 0.0));
        assert!(a.iter().all(|v| v.is_finite()));
        // Base model must reject a low-res conditioning input.
        assert!(denoise(&model.unet, &ps, &x, &[3, 7], Some(&toks), Some(&x)).is_err());
        // Token mismatch errors.
        assert!(denoise(&model.unet, &ps, &x, &[3, 7], None, None).is_err());
    }

    #[test]
    fn upsampler_requires_low_res() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let arch = UNetArch::upsampler_32(&[8, 16, 24], 4, None);
        let unet = UNet::new("unet", arch);
        let mut ps = ParamSet::new();
        unet.init_params(&mut ps, &mut rng);
        let x = randn(&[1, 3, 32, 32], 1.0, &mut rng);
        assert!(denoise(&unet, &ps, &x, &[5], None, None).is_err());
        let out = denoise(&unet, &ps, &x, &[5], None, Some(&x)).unwrap();
        assert_eq!(out.shape(), &[1, 3, 32, 32]);
    }

    #[test]
    fn null_condition_bypasses_head_and_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = BaseModel::new(tiny_arch(Some(TaskKind::Mask)));
        let ps = model.init_params(&mut rng);
        let a = model.encode(&ps, &Condition::Null).unwrap();
        let b = model.encode(&ps, &Condition::Null).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.provenance, TokenProvenance::Null);
        assert_eq!(a.tokens.shape(), &[2, 8]);
    }

    #[test]
    fn head_is_deterministic_and_rejects_modality_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = BaseModel::new(tiny_arch(Some(TaskKind::Mask)));
        let ps = model.init_params(&mut rng);
        let head = model.head.as_ref().unwrap();
        let mask = Condition::Mask(Array2::<u8>::zeros((32, 32)));
        let a = encode_condition(head, &ps, &mask).unwrap();
        let b = encode_condition(head, &ps, &mask).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.provenance, TokenProvenance::TaskHead);

        let sketch = Condition::Sketch(Array2::<u8>::zeros((32, 32)));
        assert!(matches!(
            encode_condition(head, &ps, &sketch),
            Err(Error::Modality(_))
        ));
    }

    #[test]
    fn token_dims_agree_across_conditioners() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = BaseModel::new(tiny_arch(Some(TaskKind::Sketch)));
        let ps = model.init_params(&mut rng);
        let spec = model.arch.spec();
        let null = model.encode(&ps, &Condition::Null).unwrap();
        let desc = model
            .encode(&ps, &Condition::Descriptor(vec![0.5; 8]))
            .unwrap();
        let sk = model
            .encode(&ps, &Condition::Sketch(Array2::<u8>::zeros((32, 32))))
            .unwrap();
        for t in [&null, &desc, &sk] {
            assert_eq!(t.tokens.shape(), &[spec.k, spec.d]);
        }
    }

    #[test]
    fn discriminator_finite_logit_and_logistic_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = Discriminator::new(&[8, 16, 24], 32);
        let mut ps = ParamSet::new();
        d.init_params(&mut ps, &mut rng);
        let img = randn(&[3, 32, 32], 1.0, &mut rng);
        let l = d.discriminate(&ps, &img).unwrap();
        assert!(l.is_finite());
        let p = logistic(l);
        assert!(p > 0.0 && p < 1.0);
        let bad = randn(&[3, 16, 16], 1.0, &mut rng);
        assert!(d.discriminate(&ps, &bad).is_err());
    }

    #[test]
    fn extractor_stages_fixed_and_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let arch = ExtractorArch {
            widths: vec![8, 16, 24],
            input_hw: 32,
            groups: 4,
            num_classes: 4,
        };
        let fx = FeatureExtractor::new(&arch);
        let mut ps = ParamSet::new();
        fx.init_params(&mut ps, &mut rng);
        let before: Vec<ArrayD<f32>> = ps.iter().map(|(_, v)| v.clone()).collect();
        let imgs = randn(&[2, 3, 32, 32], 1.0, &mut rng);
        let s1 = fx.features(&ps, &imgs).unwrap();
        let s2 = fx.features(&ps, &imgs).unwrap();
        assert_eq!(s1.len(), 3);
        assert_eq!(s1[0].shape(), &[2, 8, 16, 16]);
        assert_eq!(s1[1].shape(), &[2, 16, 8, 8]);
        assert_eq!(s1[2].shape(), &[2, 24, 4, 4]);
        for (a, b) in s1.iter().zip(&s2) {
            assert_eq!(a, b);
        }
        for (i, (_, v)) in ps.iter().enumerate() {
            assert_eq!(v, &before[i], "extractor parameters changed");
        }
        let bad = randn(&[2, 3, 16, 16], 1.0, &mut rng);
        assert!(fx.features(&ps, &bad).is_err());
    }
}
