//! Parameter storage and the layer vocabulary shared by all models.
//!
//! Parameters live in a [`ParamSet`] as named `f32` tensors in insertion
//! order (the order checkpoints serialize them). Graph building casts them
//! onto a [`Tape`] leaf per parameter; forward code then works purely in
//! tape [`Var`]s, so the same layer code runs in `f32` for training and in
//! `f64` for gradient checks.

use crate::tape::{Scalar, Tape, Var};
use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct ParamSet {
    entries: Vec<(String, ArrayD<f32>)>,
    index: HashMap<String, usize>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: ArrayD<f32>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count, reported deterministically.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &ArrayD<f32> {
        &self.entries[self.idx(name)].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f32> {
        let i = self.idx(name);
        &mut self.entries[i].1
    }

    pub fn value_at(&self, i: usize) -> &ArrayD<f32> {
        &self.entries[i].1
    }

    pub fn value_at_mut(&mut self, i: usize) -> &mut ArrayD<f32> {
        &mut self.entries[i].1
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    /// Bind every parameter onto a tape; `trainable` decides which leaves
    /// receive gradients.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(n, v)| {
                let cast = v.mapv(|x| T::cast(x as f64));
                if trainable(n) {
                    tape.param(cast)
                } else {
                    tape.constant(cast)
                }
            })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Bind with externally supplied values (used for f64 gradient checks).
    pub fn bind_values<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        values: &[ArrayD<T>],
        trainable: impl Fn(&str) -> bool,
    ) -> Bound {
        assert_eq!(values.len(), self.entries.len());
        let vars = self
            .entries
            .iter()
            .zip(values.iter())
            .map(|((n, _), v)| {
                if trainable(n) {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Wrap externally created leaves (registration order) in a [`Bound`];
    /// used by gradient checks that own the tape leaves themselves.
    pub fn bind_values_from(ps: &ParamSet, vars: &[Var]) -> Bound {
        assert_eq!(vars.len(), ps.entries.len());
        Bound {
            vars: vars.to_vec(),
            index: ps.index.clone(),
        }
    }

    /// Values cast to another scalar type, in registration order.
    pub fn values_as<T: Scalar>(&self) -> Vec<ArrayD<T>> {
        self.entries
            .iter()
            .map(|(_, v)| v.mapv(|x| T::cast(x as f64)))
            .collect()
    }
}

/// Parameter-name to tape-leaf mapping for one built graph.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<f32> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n)
        .map(|_| (<StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * std) as f32)
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

pub fn randn_dyn<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<T> {
    let n: usize = shape.iter().product();
    let v: Vec<T> = (0..n)
        .map(|_| T::cast(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

/// kxk convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            name: name.to_string(),
            in_ch,
            out_ch,
            k,
            stride,
            pad,
        }
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng, gain: f64) {
        let fan_in = (self.in_ch * self.k * self.k) as f64;
        let std = gain / fan_in.sqrt();
        ps.register(
            &format!("{}.w", self.name),
            randn(&[self.out_ch, self.in_ch, self.k, self.k], std, rng),
        );
        ps.register(
            &format!("{}.b", self.name),
            ArrayD::zeros(IxDyn(&[self.out_ch])),
        );
    }

    pub fn fwd<T: Scalar>(&self, t: &mut Tape<T>, b: &Bound, x: Var) -> Var {
        let w = b.var(&format!("{}.w", self.name));
        let bias = b.var(&format!("{}.b", self.name));
        t.conv2d(x, w, Some(bias), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_f: usize,
    pub out_f: usize,
}

impl Linear {
    pub fn new(name: &str, in_f: usize, out_f: usize) -> Self {
        Linear {
            name: name.to_string(),
            in_f,
            out_f,
        }
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng, gain: f64) {
        let std = gain / (self.in_f as f64).sqrt();
        ps.register(
            &format!("{}.w", self.name),
            randn(&[self.in_f, self.out_f], std, rng),
        );
        ps.register(&format!("{}.b", self.name), ArrayD::zeros(IxDyn(&[self.out_f])));
    }

    /// `x: [N, in_f] -> [N, out_f]`.
    pub fn fwd<T: Scalar>(&self, t: &mut Tape<T>, b: &Bound, x: Var) -> Var {
        let w = b.var(&format!("{}.w", self.name));
        let bias = b.var(&format!("{}.b", self.name));
        let y = t.matmul(x, w);
        t.add_bias1(y, bias)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub name: String,
    pub ch: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(name: &str, ch: usize, groups: usize) -> Self {
        assert!(ch % groups == 0, "channels {ch} not divisible by groups {groups}");
        GroupNorm {
            name: name.to_string(),
            ch,
            groups,
        }
    }

    pub fn init(&self, ps: &mut ParamSet) {
        ps.register(
            &format!("{}.g", self.name),
            ArrayD::from_elem(IxDyn(&[self.ch]), 1.0),
        );
        ps.register(&format!("{}.b", self.name), ArrayD::zeros(IxDyn(&[self.ch])));
    }

    pub fn fwd<T: Scalar>(&self, t: &mut Tape<T>, b: &Bound, x: Var) -> Var {
        let g = b.var(&format!("{}.g", self.name));
        let bt = b.var(&format!("{}.b", self.name));
        t.group_norm(x, g, bt, self.groups)
    }
}

/// Residual block with timestep/token channel biases.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub emb_dim: usize,
    pub tok_dim: Option<usize>,
    gn1: GroupNorm,
    gn2: GroupNorm,
    conv1: Conv2d,
    conv2: Conv2d,
    emb_proj: Linear,
    tok_proj: Option<Linear>,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        emb_dim: usize,
        tok_dim: Option<usize>,
        groups: usize,
    ) -> Self {
        let gn1 = GroupNorm::new(&format!("{name}.gn1"), in_ch, groups);
        let gn2 = GroupNorm::new(&format!("{name}.gn2"), out_ch, groups);
        let conv1 = Conv2d::new(&format!("{name}.conv1"), in_ch, out_ch, 3, 1, 1);
        let conv2 = Conv2d::new(&format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1);
        let emb_proj = Linear::new(&format!("{name}.emb"), emb_dim, out_ch);
        let tok_proj = tok_dim.map(|d| Linear::new(&format!("{name}.tok"), d, out_ch));
        let skip =
            (in_ch != out_ch).then(|| Conv2d::new(&format!("{name}.skip"), in_ch, out_ch, 1, 1, 0));
        ResBlock {
            name: name.to_string(),
            in_ch,
            out_ch,
            emb_dim,
            tok_dim,
            gn1,
            gn2,
            conv1,
            conv2,
            emb_proj,
            tok_proj,
            skip,
        }
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
        self.gn1.init(ps);
        self.conv1.init(ps, rng, 1.0);
        self.emb_proj.init(ps, rng, 1.0);
        if let Some(tp) = &self.tok_proj {
            tp.init(ps, rng, 1.0);
        }
        self.gn2.init(ps);
        // Second conv starts small so fresh blocks stay near-identity.
        self.conv2.init(ps, rng, 0.1);
        if let Some(sk) = &self.skip {
            sk.init(ps, rng, 1.0);
        }
    }

    /// `x: [N,C,H,W]`, `emb: [N,emb_dim]`, `tok_mean: [N,tok_dim]` when present.
    pub fn fwd<T: Scalar>(
        &self,
        t: &mut Tape<T>,
        b: &Bound,
        x: Var,
        emb: Var,
        tok_mean: Option<Var>,
    ) -> Var {
        let h = self.gn1.fwd(t, b, x);
        let h = t.silu(h);
        let h = self.conv1.fwd(t, b, h);
        let mut bias = self.emb_proj.fwd(t, b, emb);
        if let (Some(tp), Some(tm)) = (&self.tok_proj, tok_mean) {
            let tb = tp.fwd(t, b, tm);
            bias = t.add(bias, tb);
        }
        let h = t.add_chan_bias(h, bias);
        let h = self.gn2.fwd(t, b, h);
        let h = t.silu(h);
        let h = self.conv2.fwd(t, b, h);
        let sk = match &self.skip {
            Some(s) => s.fwd(t, b, x),
            None => x,
        };
        t.add(h, sk)
    }
}

/// Single-head cross attention from a feature map onto a token sequence.
#[derive(Debug, Clone)]
pub struct CrossAttn {
    pub name: String,
    pub ch: usize,
    pub tok_dim: usize,
    pub attn_dim: usize,
    norm: GroupNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
}

impl CrossAttn {
    pub fn new(name: &str, ch: usize, tok_dim: usize, attn_dim: usize, groups: usize) -> Self {
        CrossAttn {
            name: name.to_string(),
            ch,
            tok_dim,
            attn_dim,
            norm: GroupNorm::new(&format!("{name}.norm"), ch, groups),
            wq: Linear::new(&format!("{name}.wq"), ch, attn_dim),
            wk: Linear::new(&format!("{name}.wk"), tok_dim, attn_dim),
            wv: Linear::new(&format!("{name}.wv"), tok_dim, attn_dim),
            wo: Linear::new(&format!("{name}.wo"), attn_dim, ch),
        }
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
        self.norm.init(ps);
        self.wq.init(ps, rng, 1.0);
        self.wk.init(ps, rng, 1.0);
        self.wv.init(ps, rng, 1.0);
        // Output projection starts small: attention begins near-identity.
        self.wo.init(ps, rng, 0.1);
    }

    /// `x: [N,C,H,W]`, `tokens: [N,K,tok_dim]`; residual output.
    pub fn fwd<T: Scalar>(&self, t: &mut Tape<T>, b: &Bound, x: Var, tokens: Var) -> Var {
        let shape = t.value(x).shape().to_vec();
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let tok_shape = t.value(tokens).shape().to_vec();
        let k = tok_shape[1];

        let hn = self.norm.fwd(t, b, x);
        let hl = t.nchw_to_nlc(hn); // [N, H*W, C]
        let hp = t.reshape(hl, &[n * h * w, self.ch]);
        let q = self.wq.fwd(t, b, hp);
        let q = t.reshape(q, &[n, h * w, self.attn_dim]);

        let tok2 = t.reshape(tokens, &[n * k, self.tok_dim]);
        let kk = self.wk.fwd(t, b, tok2);
        let kk = t.reshape(kk, &[n, k, self.attn_dim]);
        let vv = self.wv.fwd(t, b, tok2);
        let vv = t.reshape(vv, &[n, k, self.attn_dim]);

        let scores = t.bmm(q, kk, true);
        let scores = t.scale(scores, 1.0 / (self.attn_dim as f64).sqrt());
        let att = t.softmax_last(scores);
        let out = t.bmm(att, vv, false); // [N, H*W, attn_dim]
        let out2 = t.reshape(out, &[n * h * w, self.attn_dim]);
        let out2 = self.wo.fwd(t, b, out2);
        let out3 = t.reshape(out2, &[n, h * w, self.ch]);
        let out4 = t.nlc_to_nchw(out3, h, w);
        t.add(x, out4)
    }
}

/// Sinusoidal features for integer timesteps, rows aligned with `ts`.
pub fn timestep_features<T: Scalar>(ts: &[usize], dim: usize) -> ArrayD<T> {
    assert!(dim % 2 == 0, "timestep feature dim must be even");
    let half = dim / 2;
    let mut out = Array2::<T>::zeros((ts.len(), dim));
    for (i, &tv) in ts.iter().enumerate() {
        for j in 0..half {
            let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
            let arg = tv as f64 * freq;
            out[(i, j)] = T::cast(arg.sin());
            out[(i, half + j)] = T::cast(arg.cos());
        }
    }
    out.into_dyn()
}

/// Bilinear 2x upsampling (half-pixel centers), used for cascade conditioning.
pub fn bilinear_up2x(x: &ArrayD<f32>) -> ArrayD<f32> {
    let v = x.view().into_dimensionality::<ndarray::Ix3>().expect("[C,H,W]");
    let (c, h, w) = v.dim();
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = ndarray::Array3::<f32>::zeros((c, ho, wo));
    for cc in 0..c {
        for oy in 0..ho {
            let sy = ((oy as f32 + 0.5) / 2.0 - 0.5).clamp(0.0, (h - 1) as f32);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f32;
            for ox in 0..wo {
                let sx = ((ox as f32 + 0.5) / 2.0 - 0.5).clamp(0.0, (w - 1) as f32);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f32;
                let v00 = v[(cc, y0, x0)];
                let v01 = v[(cc, y0, x1)];
                let v10 = v[(cc, y1, x0)];
                let v11 = v[(cc, y1, x1)];
                out[(cc, oy, ox)] = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
            }
        }
    }
    out.into_dyn()
}

/// Area-average 2x downsampling.
pub fn downsample2x(x: &ArrayD<f32>) -> ArrayD<f32> {
    let v = x.view().into_dimensionality::<ndarray::Ix3>().expect("[C,H,W]");
    let (c, h, w) = v.dim();
    let mut out = ndarray::Array3::<f32>::zeros((c, h / 2, w / 2));
    for cc in 0..c {
        for hh in 0..h / 2 {
            for ww in 0..w / 2 {
                out[(cc, hh, ww)] = 0.25
                    * (v[(cc, 2 * hh, 2 * ww)]
                        + v[(cc, 2 * hh, 2 * ww + 1)]
                        + v[(cc, 2 * hh + 1, 2 * ww)]
                        + v[(cc, 2 * hh + 1, 2 * ww + 1)]);
            }
        }
    }
    out.into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn paramset_order_and_lookup() {
        let mut ps = ParamSet::new();
        ps.register("a", ArrayD::zeros(IxDyn(&[2])));
        ps.register("b", ArrayD::zeros(IxDyn(&[3])));
        assert_eq!(ps.num_scalars(), 5);
        assert_eq!(ps.name_at(0), "a");
        assert_eq!(ps.name_at(1), "b");
        assert_eq!(ps.idx("b"), 1);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn paramset_rejects_duplicates() {
        let mut ps = ParamSet::new();
        ps.register("a", ArrayD::zeros(IxDyn(&[1])));
        ps.register("a", ArrayD::zeros(IxDyn(&[1])));
    }

    #[test]
    fn timestep_features_deterministic_and_bounded() {
        let a = timestep_features::<f32>(&[0, 5, 199], 32);
        let b = timestep_features::<f32>(&[0, 5, 199], 32);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        // t=0 gives sin=0, cos=1.
        assert_eq!(a[[0, 0]], 0.0);
        assert_eq!(a[[0, 16]], 1.0);
    }

    #[test]
    fn bilinear_preserves_constants_and_downsample_inverts_means() {
        let x = ArrayD::from_elem(IxDyn(&[3, 4, 4]), 0.5f32);
        let up = bilinear_up2x(&x);
        assert_eq!(up.shape(), &[3, 8, 8]);
        assert!(up.iter().all(|&v| (v - 0.5).abs() < 1e-6));
        let down = downsample2x(&up);
        assert_eq!(down.shape(), &[3, 4, 4]);
        assert!(down.iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn resblock_and_attention_forward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let rb = ResBlock::new("rb", 8, 16, 12, Some(6), 4);
        rb.init(&mut ps, &mut rng);
        let at = CrossAttn::new("at", 16, 6, 8, 4);
        at.init(&mut ps, &mut rng);

        let mut t = Tape::<f32>::new();
        let b = ps.bind(&mut t, |_| false);
        let x = t.constant(randn(&[2, 8, 4, 4], 1.0, &mut rng));
        let emb = t.constant(randn(&[2, 12], 1.0, &mut rng));
        let tokm = t.constant(randn(&[2, 6], 1.0, &mut rng));
        let toks = t.constant(randn(&[2, 3, 6], 1.0, &mut rng));
        let h = rb.fwd(&mut t, &b, x, emb, Some(tokm));
        assert_eq!(t.value(h).shape(), &[2, 16, 4, 4]);
        let h2 = at.fwd(&mut t, &b, h, toks);
        assert_eq!(t.value(h2).shape(), &[2, 16, 4, 4]);
        assert!(t.value(h2).iter().all(|v| v.is_finite()));
    }
}
