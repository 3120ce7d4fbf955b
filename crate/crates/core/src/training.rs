//! Losses, optimizer, EMA, degradation augmentation and the training
//! procedures: descriptor pretraining, two-stage task finetuning, and
//! adversarial upsampler training.
//!
//! Training mutates `f32` parameters through AdamW; EMA shadows are kept in
//! `f64` so long shadow trajectories follow the geometric closed form to
//! machine precision. Every loop is a pure function of (initial state, seed).

use crate::error::{Error, Result};
use crate::models::{BaseModel, Discriminator, FeatureExtractor, TaskKind, UNet};
use crate::nn::{bilinear_up2x, downsample2x, randn, Bound, ParamSet};
use crate::schedules::{q_sample, NoiseSchedule};
use crate::tape::{Scalar, Tape, Var};
use ndarray::{ArrayD, Axis, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Which procedure a config drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune1,
    Finetune2,
    Upsampler,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub ema_rate: f64,
    pub cond_dropout_p: f64,
    pub lambda_perc: f64,
    pub lambda_adv: f64,
    pub stage: Stage,
    pub max_steps: usize,
    pub seed: u64,
    pub weight_decay: f64,
}

impl TrainConfig {
    /// Stage defaults: finetune learning rates follow the reference setup
    /// (3.5e-5 then 3e-5); the rest are desk-scale choices.
    pub fn default_for(stage: Stage) -> Self {
        let learning_rate = match stage {
            Stage::Pretrain => 1e-4,
            Stage::Finetune1 => 3.5e-5,
            Stage::Finetune2 => 3e-5,
            Stage::Upsampler => 1e-4,
        };
        let max_steps = match stage {
            Stage::Pretrain => 20_000,
            Stage::Finetune1 | Stage::Finetune2 => 5_000,
            Stage::Upsampler => 5_000,
        };
        TrainConfig {
            learning_rate,
            batch_size: 32,
            ema_rate: 0.999,
            cond_dropout_p: 0.1,
            lambda_perc: 1.0,
            lambda_adv: 0.05,
            stage,
            max_steps,
            seed: 0,
            weight_decay: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::Parameter(
                "learning_rate, batch_size and max_steps must be positive".into(),
            ));
        }
        if !(self.ema_rate > 0.0 && self.ema_rate < 1.0) {
            return Err(Error::Parameter(format!(
                "ema_rate must lie in (0,1), got {}",
                self.ema_rate
            )));
        }
        if !(0.0..1.0).contains(&self.cond_dropout_p) {
            return Err(Error::Parameter(format!(
                "cond_dropout_p must lie in [0,1), got {}",
                self.cond_dropout_p
            )));
        }
        if self.lambda_perc < 0.0 || self.lambda_adv < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Parameter("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Optimizer and EMA
// ---------------------------------------------------------------------------

/// Decoupled-weight-decay adaptive optimizer (first/second moments + decay).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl AdamW {
    pub fn new(ps: &ParamSet, lr: f64, weight_decay: f64) -> Self {
        let m = (0..ps.len())
            .map(|i| ArrayD::zeros(ps.value_at(i).raw_dim()))
            .collect();
        let v = (0..ps.len())
            .map(|i| ArrayD::zeros(ps.value_at(i).raw_dim()))
            .collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m,
            v,
        }
    }

    /// Extend moment buffers after new parameters were registered.
    pub fn extend_for(&mut self, ps: &ParamSet) {
        for i in self.m.len()..ps.len() {
            self.m.push(ArrayD::zeros(ps.value_at(i).raw_dim()));
            self.v.push(ArrayD::zeros(ps.value_at(i).raw_dim()));
        }
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn step(&mut self, ps: &mut ParamSet, grads: &[Option<ArrayD<f32>>]) {
        assert_eq!(grads.len(), ps.len());
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let lr = self.lr as f32;
        let eps = self.eps as f32;
        let wd = (self.lr * self.weight_decay) as f32;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |mm, &gg| *mm = b1 * *mm + (1.0 - b1) * gg);
            v.zip_mut_with(g, |vv, &gg| *vv = b2 * *vv + (1.0 - b2) * gg * gg);
            let p = ps.value_at_mut(i);
            let (bc1f, bc2f) = (bc1 as f32, bc2 as f32);
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|pp, &mm, &vv| {
                    let mhat = mm / bc1f;
                    let vhat = vv / bc2f;
                    *pp -= lr * mhat / (vhat.sqrt() + eps) + wd * *pp;
                });
        }
    }

    pub fn moments(&self) -> (&[ArrayD<f32>], &[ArrayD<f32>]) {
        (&self.m, &self.v)
    }

    pub fn restore_moments(&mut self, m: Vec<ArrayD<f32>>, v: Vec<ArrayD<f32>>, step: u64) {
        self.m = m;
        self.v = v;
        self.step_count = step;
    }
}

/// `shadow <- rate * shadow + (1 - rate) * params`, in `f64`.
pub fn ema_update(shadow: &mut ArrayD<f64>, params: &ArrayD<f32>, rate: f64) {
    assert_eq!(shadow.shape(), params.shape(), "ema shapes must match");
    shadow.zip_mut_with(params, |s, &p| *s = rate * *s + (1.0 - rate) * p as f64);
}

/// EMA shadows for a whole parameter set.
#[derive(Debug, Clone)]
pub struct EmaSet {
    values: Vec<ArrayD<f64>>,
}

impl EmaSet {
    pub fn from_params(ps: &ParamSet) -> Self {
        EmaSet {
            values: (0..ps.len())
                .map(|i| ps.value_at(i).mapv(|v| v as f64))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn extend_for(&mut self, ps: &ParamSet) {
        for i in self.values.len()..ps.len() {
            self.values.push(ps.value_at(i).mapv(|v| v as f64));
        }
    }

    /// Update shadows of parameters selected by `mask` (all when `None`).
    pub fn update(&mut self, ps: &ParamSet, rate: f64, mask: Option<&[bool]>) {
        for i in 0..self.values.len() {
            if mask.map(|m| m[i]).unwrap_or(true) {
                ema_update(&mut self.values[i], ps.value_at(i), rate);
            }
        }
    }

    pub fn value_at(&self, i: usize) -> &ArrayD<f64> {
        &self.values[i]
    }

    pub fn set_value_at(&mut self, i: usize, v: ArrayD<f64>) {
        self.values[i] = v;
    }

    /// Materialize the shadows as an `f32` parameter set for sampling.
    pub fn to_param_set(&self, like: &ParamSet) -> ParamSet {
        let mut out = ParamSet::new();
        for i in 0..like.len() {
            out.register(like.name_at(i), self.values[i].mapv(|v| v as f32));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Degradation augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationConfig {
    pub p_blur: f64,
    pub blur_sigma: (f64, f64),
    pub p_down: f64,
    pub p_noise: f64,
    pub noise_sigma: (f64, f64),
    pub p_quant: f64,
    pub quant_levels: Vec<usize>,
    pub p_smooth: f64,
    pub smooth_tau: (f64, f64),
    pub smooth_iters: usize,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            p_blur: 0.5,
            blur_sigma: (0.3, 1.0),
            p_down: 0.3,
            p_noise: 0.5,
            noise_sigma: (0.0, 0.08),
            p_quant: 0.3,
            quant_levels: vec![8, 16, 32],
            p_smooth: 0.5,
            smooth_tau: (0.1, 0.35),
            smooth_iters: 2,
        }
    }
}

impl DegradationConfig {
    pub fn off() -> Self {
        DegradationConfig {
            p_blur: 0.0,
            p_down: 0.0,
            p_noise: 0.0,
            p_quant: 0.0,
            p_smooth: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.p_blur,
            self.p_down,
            self.p_noise,
            self.p_quant,
            self.p_smooth,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Parameter("degradation probabilities must lie in [0,1]".into()));
        }
        for (lo, hi) in [self.blur_sigma, self.noise_sigma, self.smooth_tau] {
            if lo < 0.0 || hi < lo {
                return Err(Error::Parameter("degradation ranges must be non-negative".into()));
            }
        }
        Ok(())
    }
}

fn gaussian_blur(img: &ArrayD<f32>, sigma: f64) -> ArrayD<f32> {
    let radius = ((2.0 * sigma).ceil() as usize).clamp(1, 3);
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for i in -(radius as isize)..=(radius as isize) {
        kernel.push((-(i * i) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let s: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| (k / s) as f32).collect();
    let v = img.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    let (c, h, w) = v.dim();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = ndarray::Array3::<f32>::zeros((c, h, w));
    for cc in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for (ki, kv) in kernel.iter().enumerate() {
                    let xx = clamp(x as isize + ki as isize - radius as isize, w);
                    acc += kv * v[(cc, y, xx)];
                }
                tmp[(cc, y, x)] = acc;
            }
        }
    }
    let mut out = ndarray::Array3::<f32>::zeros((c, h, w));
    for cc in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for (ki, kv) in kernel.iter().enumerate() {
                    let yy = clamp(y as isize + ki as isize - radius as isize, h);
                    acc += kv * tmp[(cc, yy, x)];
                }
                out[(cc, y, x)] = acc;
            }
        }
    }
    out.into_dyn()
}

fn edge_preserving_smooth(img: &ArrayD<f32>, tau: f32, iters: usize) -> ArrayD<f32> {
    let mut cur = img
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .to_owned();
    let (c, h, w) = cur.dim();
    for _ in 0..iters {
        let prev = cur.clone();
        for cc in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let center = prev[(cc, y, x)];
                    let mut acc = center;
                    let mut n = 1.0f32;
                    let mut push = |yy: isize, xx: isize| {
                        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                            let v = prev[(cc, yy as usize, xx as usize)];
                            if (v - center).abs() <= tau {
                                acc += v;
                                n += 1.0;
                            }
                        }
                    };
                    push(y as isize - 1, x as isize);
                    push(y as isize + 1, x as isize);
                    push(y as isize, x as isize - 1);
                    push(y as isize, x as isize + 1);
                    cur[(cc, y, x)] = acc / n;
                }
            }
        }
    }
    cur.into_dyn()
}

/// Sum of absolute horizontal and vertical differences.
pub fn total_variation(img: &ArrayD<f32>) -> f64 {
    let v = img.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    let (c, h, w) = v.dim();
    let mut tv = 0.0f64;
    for cc in 0..c {
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    tv += (v[(cc, y, x + 1)] - v[(cc, y, x)]).abs() as f64;
                }
                if y + 1 < h {
                    tv += (v[(cc, y + 1, x)] - v[(cc, y, x)]).abs() as f64;
                }
            }
        }
    }
    tv
}

/// Randomized degradation: blur, down/up-scale, noise, quantization and an
/// edge-preserving smoothing pass standing in for an L0-style filter.
pub fn degrade(image: &ArrayD<f32>, cfg: &DegradationConfig, rng: &mut ChaCha8Rng) -> ArrayD<f32> {
    let mut img = image.clone();
    if cfg.p_blur > 0.0 && rng.random_range(0.0..1.0) < cfg.p_blur {
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1).max(1e-3);
        img = gaussian_blur(&img, sigma);
    }
    if cfg.p_down > 0.0 && rng.random_range(0.0..1.0) < cfg.p_down {
        img = bilinear_up2x(&downsample2x(&img));
    }
    if cfg.p_noise > 0.0 && rng.random_range(0.0..1.0) < cfg.p_noise {
        let sigma = rng.random_range(cfg.noise_sigma.0..=cfg.noise_sigma.1) as f32;
        for v in img.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += sigma * z as f32;
        }
    }
    if cfg.p_quant > 0.0 && rng.random_range(0.0..1.0) < cfg.p_quant {
        let levels = cfg.quant_levels[rng.random_range(0..cfg.quant_levels.len())] as f32;
        img.mapv_inplace(|v| {
            let unit = ((v + 1.0) / 2.0).clamp(0.0, 1.0);
            (unit * (levels - 1.0)).round() / (levels - 1.0) * 2.0 - 1.0
        });
    }
    if cfg.p_smooth > 0.0 && rng.random_range(0.0..1.0) < cfg.p_smooth {
        let tau = rng.random_range(cfg.smooth_tau.0..=cfg.smooth_tau.1) as f32;
        img = edge_preserving_smooth(&img, tau, cfg.smooth_iters);
    }
    img
}

// ---------------------------------------------------------------------------
// Loss graph builders
// ---------------------------------------------------------------------------

/// Mean squared error between a prediction graph node and a constant target.
pub fn mse_to_const<T: Scalar>(t: &mut Tape<T>, pred: Var, target: ArrayD<T>) -> Var {
    let tgt = t.constant(target);
    let d = t.sub(pred, tgt);
    let d2 = t.square(d);
    t.mean_all(d2)
}

/// Sum over extractor stages of the mean absolute feature difference.
pub fn build_perceptual_loss<T: Scalar>(
    t: &mut Tape<T>,
    fx: &FeatureExtractor,
    fx_bound: &Bound,
    a: Var,
    b: Var,
) -> Var {
    let sa = fx.stages(t, fx_bound, a);
    let sb = fx.stages(t, fx_bound, b);
    let mut total: Option<Var> = None;
    for (va, vb) in sa.into_iter().zip(sb) {
        let d = t.sub(va, vb);
        let d = t.abs(d);
        let m = t.mean_all(d);
        total = Some(match total {
            Some(acc) => t.add(acc, m),
            None => m,
        });
    }
    total.expect("extractor has at least one stage")
}

/// Non-saturating generator objective: mean softplus(-D(fake)).
pub fn build_adv_gen_loss<T: Scalar>(
    t: &mut Tape<T>,
    disc: &Discriminator,
    disc_bound: &Bound,
    fake: Var,
) -> Var {
    let logits = disc.fwd(t, disc_bound, fake);
    let neg = t.neg(logits);
    let sp = t.softplus(neg);
    t.mean_all(sp)
}

/// Discriminator objective: mean of softplus(-D(real)) and softplus(D(fake)).
pub fn build_adv_disc_loss<T: Scalar>(
    t: &mut Tape<T>,
    disc: &Discriminator,
    disc_bound: &Bound,
    real: Var,
    fake: Var,
) -> Var {
    let lr = disc.fwd(t, disc_bound, real);
    let neg = t.neg(lr);
    let sp_real = t.softplus(neg);
    let m_real = t.mean_all(sp_real);
    let lf = disc.fwd(t, disc_bound, fake);
    let sp_fake = t.softplus(lf);
    let m_fake = t.mean_all(sp_fake);
    let s = t.add(m_real, m_fake);
    t.scale(s, 0.5)
}

/// Clean-image estimate inside a graph: `(x_t - c1 eps_hat) c2` with
/// per-sample constants from the schedule (never clipped in losses).
pub fn build_predict_x0<T: Scalar>(
    t: &mut Tape<T>,
    x_t: Var,
    eps_hat: Var,
    ts: &[usize],
    schedule: &NoiseSchedule,
) -> Var {
    let c1: Vec<f64> = ts
        .iter()
        .map(|&tv| (1.0 - schedule.alpha_cumprod(tv)).sqrt())
        .collect();
    let c2: Vec<f64> = ts
        .iter()
        .map(|&tv| 1.0 / schedule.alpha_cumprod(tv).sqrt())
        .collect();
    let scaled_eps = t.row_scale(eps_hat, c1);
    let num = t.sub(x_t, scaled_eps);
    t.row_scale(num, c2)
}

/// Eval-mode adversarial loss values `(generator, discriminator)`.
pub fn loss_adversarial_values(
    disc: &Discriminator,
    disc_ps: &ParamSet,
    x0_hat: &ArrayD<f32>,
    x0: &ArrayD<f32>,
) -> Result<(f64, f64)> {
    if x0_hat.shape() != x0.shape() {
        return Err(Error::Shape(format!(
            "adversarial inputs differ: {:?} vs {:?}",
            x0_hat.shape(),
            x0.shape()
        )));
    }
    let mut t = Tape::<f32>::new();
    let b = disc_ps.bind(&mut t, |_| false);
    let fake = t.constant(x0_hat.clone());
    let real = t.constant(x0.clone());
    let g = build_adv_gen_loss(&mut t, disc, &b, fake);
    let d = build_adv_disc_loss(&mut t, disc, &b, real, fake);
    Ok((t.scalar_value(g) as f64, t.scalar_value(d) as f64))
}

// ---------------------------------------------------------------------------
// Batches and the base-model training loop
// ---------------------------------------------------------------------------

use crate::data::Sample;

/// What conditions the base model during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CondSource {
    /// Pretext class-count descriptors.
    Descriptor,
    /// A downstream condition map through the task head.
    Task(TaskKind),
}

/// Everything one base-model step consumes, precomputed outside the graph.
pub struct BaseBatch {
    pub x_t: ArrayD<f32>,
    pub ts: Vec<usize>,
    pub eps: ArrayD<f32>,
    /// Conditioner input: descriptors `[N, desc_dim]` or raster maps.
    pub cond_input: ArrayD<f32>,
    pub dropout: Vec<bool>,
}

/// Assemble a training batch: draw samples, timesteps, noise, and the
/// conditional-dropout mask.
pub fn make_base_batch(
    model: &BaseModel,
    corpus: &[Sample],
    cond: CondSource,
    schedule: &NoiseSchedule,
    batch_size: usize,
    dropout_p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<BaseBatch> {
    let n = batch_size;
    let res = model.arch.unet.resolution;
    let mut x0 = ArrayD::<f32>::zeros(IxDyn(&[n, 3, res, res]));
    let mut cond_rows = Vec::with_capacity(n);
    for i in 0..n {
        let s = &corpus[rng.random_range(0..corpus.len())];
        let mut img = s.image.clone();
        while img.shape()[1] > res {
            img = downsample2x(&img);
        }
        x0.index_axis_mut(Axis(0), i).assign(&img);
        cond_rows.push(match cond {
            CondSource::Descriptor => {
                ArrayD::from_shape_vec(IxDyn(&[model.arch.desc_dim]), s.descriptor.clone()).unwrap()
            }
            CondSource::Task(k) => s.condition(k).to_channels()?,
        });
    }
    let views: Vec<_> = cond_rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
    let cond_input = ndarray::concatenate(Axis(0), &views).unwrap();

    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(0..schedule.len())).collect();
    let eps = randn(&[n, 3, res, res], 1.0, rng);
    let mut x_t = ArrayD::<f32>::zeros(x0.raw_dim());
    for i in 0..n {
        let xi = x0.index_axis(Axis(0), i).to_owned().into_dyn();
        let ei = eps.index_axis(Axis(0), i).to_owned().into_dyn();
        let noised = q_sample(&xi, ts[i], &ei, schedule)?;
        x_t.index_axis_mut(Axis(0), i).assign(&noised);
    }
    let dropout: Vec<bool> = (0..n)
        .map(|_| dropout_p > 0.0 && rng.random_range(0.0..1.0) < dropout_p)
        .collect();
    Ok(BaseBatch {
        x_t,
        ts,
        eps,
        cond_input,
        dropout,
    })
}

/// Build the simple-loss graph for a base batch; returns the loss node.
pub fn build_base_loss<T: Scalar>(
    t: &mut Tape<T>,
    bound: &Bound,
    model: &BaseModel,
    cond: CondSource,
    batch: &BaseBatch,
) -> Var {
    let n = batch.ts.len();
    let spec = model.arch.spec();
    let cond_input = t.constant(batch.cond_input.mapv(|v| T::cast(v as f64)));
    let cond_toks = match cond {
        CondSource::Descriptor => model.desc.fwd(t, bound, cond_input),
        CondSource::Task(_) => model
            .head
            .as_ref()
            .expect("task conditioning needs a head")
            .fwd(t, bound, cond_input),
    };
    let null = bound.var(crate::models::NULL_TOKEN_PARAM);
    let null_b = t.broadcast_row0(null, n);
    let tokens = if batch.dropout.iter().any(|&d| d) {
        t.select_rows(cond_toks, null_b, batch.dropout.clone())
    } else {
        cond_toks
    };
    debug_assert_eq!(t.value(tokens).shape(), &[n, spec.k, spec.d]);
    let x_t = t.constant(batch.x_t.mapv(|v| T::cast(v as f64)));
    let eps_hat = model.unet.fwd(t, bound, x_t, &batch.ts, Some(tokens));
    mse_to_const(t, eps_hat, batch.eps.mapv(|v| T::cast(v as f64)))
}

/// Mutable state of one training run.
pub struct TrainState {
    pub params: ParamSet,
    pub ema: EmaSet,
    pub opt: AdamW,
    pub step: u64,
    pub rng: ChaCha8Rng,
    /// Conditional-dropout instrumentation.
    pub dropped: u64,
    pub seen: u64,
}

impl TrainState {
    pub fn new(params: ParamSet, cfg: &TrainConfig) -> Self {
        let opt = AdamW::new(&params, cfg.learning_rate, cfg.weight_decay);
        let ema = EmaSet::from_params(&params);
        TrainState {
            params,
            ema,
            opt,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            dropped: 0,
            seen: 0,
        }
    }

    /// Parameters for sampling: always the EMA shadows.
    pub fn ema_params(&self) -> ParamSet {
        self.ema.to_param_set(&self.params)
    }
}

/// One metrics row per step; written out as CSV by the caller.
#[derive(Debug, Clone, Copy)]
pub struct MetricRow {
    pub step: u64,
    pub loss_simple: f64,
    pub loss_perc: f64,
    pub loss_adv_gen: f64,
    pub loss_adv_disc: f64,
    pub learning_rate: f64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("step,loss_simple,loss_perc,loss_adv_gen,loss_adv_disc,learning_rate\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.loss_simple, r.loss_perc, r.loss_adv_gen, r.loss_adv_disc, r.learning_rate
        ));
    }
    s
}

/// Which parameters a stage updates.
pub fn stage_trainable(stage: Stage) -> impl Fn(&str) -> bool {
    move |name: &str| match stage {
        // Pretraining updates the decoder, the descriptor embedding and the
        // null embedding (conditional dropout trains the null branch).
        Stage::Pretrain => {
            name.starts_with("unet.") || name.starts_with("desc.") || name == crate::models::NULL_TOKEN_PARAM
        }
        // Stage 1 trains the task head only; the pretrained decoder stays
        // bit-identical.
        Stage::Finetune1 => name.starts_with("head."),
        // Stage 2 finetunes head and decoder jointly (the descriptor
        // embedding is left untouched; it receives no downstream gradients).
        Stage::Finetune2 => {
            name.starts_with("head.") || name.starts_with("unet.") || name == crate::models::NULL_TOKEN_PARAM
        }
        Stage::Upsampler => name.starts_with("unet."),
    }
}

/// Run simple-loss training of the base model for `cfg.max_steps` steps.
pub fn train_base(
    model: &BaseModel,
    state: &mut TrainState,
    corpus: &[Sample],
    cond: CondSource,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<Vec<MetricRow>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Parameter("empty training corpus".into()));
    }
    if matches!(cond, CondSource::Task(_)) && model.head.is_none() {
        return Err(Error::Config("task conditioning requires a head".into()));
    }
    let trainable = stage_trainable(cfg.stage);
    let mask: Vec<bool> = (0..state.params.len())
        .map(|i| trainable(state.params.name_at(i)))
        .collect();
    let mut rows = Vec::with_capacity(cfg.max_steps);
    for _ in 0..cfg.max_steps {
        let batch = make_base_batch(
            model,
            corpus,
            cond,
            schedule,
            cfg.batch_size,
            cfg.cond_dropout_p,
            &mut state.rng,
        )?;
        state.dropped += batch.dropout.iter().filter(|&&d| d).count() as u64;
        state.seen += batch.dropout.len() as u64;

        let mut tape = Tape::<f32>::new();
        let bound = state.params.bind(&mut tape, &trainable);
        let loss = build_base_loss(&mut tape, &bound, model, cond, &batch);
        tape.backward(loss);
        let grads: Vec<Option<ArrayD<f32>>> = bound
            .vars()
            .iter()
            .map(|&v| tape.take_grad(v))
            .collect();
        let loss_v = tape.scalar_value(loss) as f64;
        drop(tape);

        state.opt.step(&mut state.params, &grads);
        state.ema.update(&state.params, cfg.ema_rate, Some(&mask));
        state.step += 1;
        rows.push(MetricRow {
            step: state.step,
            loss_simple: loss_v,
            loss_perc: 0.0,
            loss_adv_gen: 0.0,
            loss_adv_disc: 0.0,
            learning_rate: cfg.learning_rate,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Feature-extractor pretraining (shape-class presence classifier)
// ---------------------------------------------------------------------------

fn class_presence(s: &Sample) -> [f32; 4] {
    let mut out = [0.0f32; 4];
    for o in &s.spec.objects {
        out[o.class.mask_id() as usize - 1] = 1.0;
    }
    out
}

/// Train the feature network once as a multi-label shape-class classifier;
/// afterwards it ships frozen.
pub fn train_extractor(
    fx: &FeatureExtractor,
    state: &mut TrainState,
    corpus: &[Sample],
    cfg: &TrainConfig,
) -> Result<Vec<MetricRow>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Parameter("empty training corpus".into()));
    }
    let mut rows = Vec::with_capacity(cfg.max_steps);
    for _ in 0..cfg.max_steps {
        let n = cfg.batch_size;
        let mut imgs = ArrayD::<f32>::zeros(IxDyn(&[n, 3, fx.input_hw, fx.input_hw]));
        let mut labels = ArrayD::<f32>::zeros(IxDyn(&[n, fx.num_classes]));
        for i in 0..n {
            let s = &corpus[state.rng.random_range(0..corpus.len())];
            imgs.index_axis_mut(Axis(0), i).assign(&s.image);
            let p = class_presence(s);
            for c in 0..fx.num_classes.min(4) {
                labels[[i, c]] = p[c];
            }
        }
        let mut tape = Tape::<f32>::new();
        let bound = state.params.bind(&mut tape, |_| true);
        let x = tape.constant(imgs);
        let logits = fx.class_logits(&mut tape, &bound, x);
        // Binary cross-entropy with logits: mean(softplus(l) - l * y).
        let sp = tape.softplus(logits);
        let y = tape.constant(labels);
        let ly = tape.mul(logits, y);
        let diff = tape.sub(sp, ly);
        let loss = tape.mean_all(diff);
        tape.backward(loss);
        let grads: Vec<Option<ArrayD<f32>>> =
            bound.vars().iter().map(|&v| tape.take_grad(v)).collect();
        let loss_v = tape.scalar_value(loss) as f64;
        drop(tape);
        state.opt.step(&mut state.params, &grads);
        state.ema.update(&state.params, cfg.ema_rate, None);
        state.step += 1;
        rows.push(MetricRow {
            step: state.step,
            loss_simple: loss_v,
            loss_perc: 0.0,
            loss_adv_gen: 0.0,
            loss_adv_disc: 0.0,
            learning_rate: cfg.learning_rate,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Upsampler training
// ---------------------------------------------------------------------------

/// One upsampler step's inputs.
pub struct UpsamplerBatch {
    pub x_t: ArrayD<f32>,
    pub ts: Vec<usize>,
    pub eps: ArrayD<f32>,
    pub x0: ArrayD<f32>,
    /// Bilinearly upsampled (optionally degraded) low-res conditioning.
    pub low_up: ArrayD<f32>,
}

pub fn make_upsampler_batch(
    corpus: &[Sample],
    schedule: &NoiseSchedule,
    batch_size: usize,
    degradation: Option<&DegradationConfig>,
    rng: &mut ChaCha8Rng,
) -> Result<UpsamplerBatch> {
    let n = batch_size;
    let mut x0 = ArrayD::<f32>::zeros(IxDyn(&[n, 3, 32, 32]));
    let mut low_up = ArrayD::<f32>::zeros(IxDyn(&[n, 3, 32, 32]));
    for i in 0..n {
        let s = &corpus[rng.random_range(0..corpus.len())];
        x0.index_axis_mut(Axis(0), i).assign(&s.image);
        let mut low = downsample2x(&s.image);
        if let Some(cfg) = degradation {
            low = degrade(&low, cfg, rng);
        }
        low_up.index_axis_mut(Axis(0), i).assign(&bilinear_up2x(&low));
    }
    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(0..schedule.len())).collect();
    let eps = randn(&[n, 3, 32, 32], 1.0, rng);
    let mut x_t = ArrayD::<f32>::zeros(x0.raw_dim());
    for i in 0..n {
        let xi = x0.index_axis(Axis(0), i).to_owned().into_dyn();
        let ei = eps.index_axis(Axis(0), i).to_owned().into_dyn();
        let noised = q_sample(&xi, ts[i], &ei, schedule)?;
        x_t.index_axis_mut(Axis(0), i).assign(&noised);
    }
    Ok(UpsamplerBatch {
        x_t,
        ts,
        eps,
        x0,
        low_up,
    })
}

/// Frozen companions of the upsampler's generator objective.
pub struct UpsamplerLossCtx<'a> {
    pub extractor: Option<(&'a FeatureExtractor, &'a ParamSet)>,
    pub disc: Option<(&'a Discriminator, &'a ParamSet)>,
    pub lambda_perc: f64,
    pub lambda_adv: f64,
}

/// Generator loss graph: simple + perceptual + adversarial on the image
/// prediction. Returns `(total, simple, perc, adv, x0_hat)`.
pub fn build_upsampler_gen_loss<T: Scalar>(
    t: &mut Tape<T>,
    bound: &Bound,
    unet: &UNet,
    batch: &UpsamplerBatch,
    schedule: &NoiseSchedule,
    ctx: &UpsamplerLossCtx,
) -> (Var, Var, Option<Var>, Option<Var>, Var) {
    let x_t = t.constant(batch.x_t.mapv(|v| T::cast(v as f64)));
    let low = t.constant(batch.low_up.mapv(|v| T::cast(v as f64)));
    let x_in = t.concat(x_t, low, 1);
    let eps_hat = unet.fwd(t, bound, x_in, &batch.ts, None);
    let simple = mse_to_const(t, eps_hat, batch.eps.mapv(|v| T::cast(v as f64)));
    let x0_hat = build_predict_x0(t, x_t, eps_hat, &batch.ts, schedule);

    let mut total = simple;
    let mut perc = None;
    if ctx.lambda_perc > 0.0 {
        let (fx, fx_ps) = ctx
            .extractor
            .expect("perceptual loss needs the frozen feature extractor");
        let fx_bound = fx_ps.bind(t, |_| false);
        let x0c = t.constant(batch.x0.mapv(|v| T::cast(v as f64)));
        let p = build_perceptual_loss(t, fx, &fx_bound, x0_hat, x0c);
        let scaled = t.scale(p, ctx.lambda_perc);
        total = t.add(total, scaled);
        perc = Some(p);
    }
    let mut adv = None;
    if ctx.lambda_adv > 0.0 {
        let (d, d_ps) = ctx.disc.expect("adversarial loss needs a discriminator");
        let d_bound = d_ps.bind(t, |_| false);
        let a = build_adv_gen_loss(t, d, &d_bound, x0_hat);
        let scaled = t.scale(a, ctx.lambda_adv);
        total = t.add(total, scaled);
        adv = Some(a);
    }
    (total, simple, perc, adv, x0_hat)
}

/// Adversarially trained upsampler: alternating generator/discriminator
/// updates; the image-space losses attach to the clean-image prediction.
#[allow(clippy::too_many_arguments)]
pub fn train_upsampler(
    unet: &UNet,
    state: &mut TrainState,
    disc: &Discriminator,
    disc_state: &mut Option<(ParamSet, AdamW)>,
    extractor: Option<(&FeatureExtractor, &ParamSet)>,
    corpus: &[Sample],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    degradation: Option<&DegradationConfig>,
) -> Result<Vec<MetricRow>> {
    cfg.validate()?;
    if let Some(d) = degradation {
        d.validate()?;
    }
    if cfg.lambda_perc > 0.0 && extractor.is_none() {
        return Err(Error::Config(
            "lambda_perc > 0 requires a frozen feature-extractor checkpoint".into(),
        ));
    }
    if cfg.lambda_adv > 0.0 && disc_state.is_none() {
        return Err(Error::Config("lambda_adv > 0 requires discriminator state".into()));
    }
    let trainable = stage_trainable(Stage::Upsampler);
    let mask: Vec<bool> = (0..state.params.len())
        .map(|i| trainable(state.params.name_at(i)))
        .collect();
    let mut rows = Vec::with_capacity(cfg.max_steps);
    for _ in 0..cfg.max_steps {
        let batch = make_upsampler_batch(corpus, schedule, cfg.batch_size, degradation, &mut state.rng)?;
        let ctx = UpsamplerLossCtx {
            extractor,
            disc: disc_state.as_ref().map(|(ps, _)| (disc, &*ps)),
            lambda_perc: cfg.lambda_perc,
            lambda_adv: cfg.lambda_adv,
        };

        let mut tape = Tape::<f32>::new();
        let bound = state.params.bind(&mut tape, &trainable);
        let (total, simple, perc, adv, x0_hat) =
            build_upsampler_gen_loss(&mut tape, &bound, unet, &batch, schedule, &ctx);
        tape.backward(total);
        let grads: Vec<Option<ArrayD<f32>>> =
            bound.vars().iter().map(|&v| tape.take_grad(v)).collect();
        let simple_v = tape.scalar_value(simple) as f64;
        let perc_v = perc.map(|p| tape.scalar_value(p) as f64).unwrap_or(0.0);
        let adv_v = adv.map(|a| tape.scalar_value(a) as f64).unwrap_or(0.0);
        let x0_hat_v = tape.value(x0_hat).clone();
        drop(tape);

        state.opt.step(&mut state.params, &grads);
        state.ema.update(&state.params, cfg.ema_rate, Some(&mask));
        state.step += 1;

        // Alternating discriminator update on the detached prediction.
        let mut disc_v = 0.0;
        if cfg.lambda_adv > 0.0 {
            let (d_ps, d_opt) = disc_state.as_mut().unwrap();
            let mut dt = Tape::<f32>::new();
            let d_bound = d_ps.bind(&mut dt, |_| true);
            let real = dt.constant(batch.x0.clone());
            let fake = dt.constant(x0_hat_v);
            let dl = build_adv_disc_loss(&mut dt, disc, &d_bound, real, fake);
            dt.backward(dl);
            let d_grads: Vec<Option<ArrayD<f32>>> =
                d_bound.vars().iter().map(|&v| dt.take_grad(v)).collect();
            disc_v = dt.scalar_value(dl) as f64;
            drop(dt);
            d_opt.step(d_ps, &d_grads);
        }

        rows.push(MetricRow {
            step: state.step,
            loss_simple: simple_v,
            loss_perc: perc_v,
            loss_adv_gen: adv_v,
            loss_adv_disc: disc_v,
            learning_rate: cfg.learning_rate,
        });
    }
    Ok(rows)
}
