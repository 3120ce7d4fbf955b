//! Self-describing binary checkpoints.
//!
//! Layout: 4-byte magic `PITI`, little-endian `u32` format version, `u64`
//! header length, then a JSON header (schedule, architecture, tensor index,
//! step counters) followed by raw tensor sections: train parameters, EMA
//! shadows, optionally AdamW moments and the training RNG state. All tensor
//! data is little-endian `f32`, so save -> load -> save is byte-identical.

use crate::error::{Error, Result};
use crate::models::{BaseArch, ExtractorArch, UNetArch};
use crate::nn::ParamSet;
use crate::schedules::ScheduleSpec;
use crate::training::{AdamW, EmaSet, TrainConfig, TrainState};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"PITI";
pub const VERSION: u32 = 1;

/// Architecture descriptor stored in the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum ArchBlock {
    Base(BaseArch),
    Upsampler { unet: UNetArch },
    Extractor(ExtractorArch),
    Discriminator { widths: Vec<usize>, input_hw: usize },
}

impl ArchBlock {
    pub fn kind(&self) -> &'static str {
        match self {
            ArchBlock::Base(_) => "base",
            ArchBlock::Upsampler { .. } => "upsampler",
            ArchBlock::Extractor(_) => "extractor",
            ArchBlock::Discriminator { .. } => "discriminator",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    arch: ArchBlock,
    schedule: ScheduleSpec,
    step: u64,
    opt_step: u64,
    has_opt: bool,
    has_rng: bool,
    tensors: Vec<TensorMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// In-memory checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub arch: ArchBlock,
    pub schedule: ScheduleSpec,
    pub step: u64,
    pub params: ParamSet,
    pub ema: EmaSet,
    pub opt: Option<(Vec<ArrayD<f32>>, Vec<ArrayD<f32>>, u64)>,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    /// Snapshot a training run.
    pub fn from_state(arch: ArchBlock, schedule: ScheduleSpec, state: &TrainState) -> Self {
        let (m, v) = state.opt.moments();
        Checkpoint {
            arch,
            schedule,
            step: state.step,
            params: state.params.clone(),
            ema: state.ema.clone(),
            opt: Some((m.to_vec(), v.to_vec(), state.opt.step_count)),
            rng: Some(RngState::capture(&state.rng)),
        }
    }

    /// Frozen-weights checkpoint (no optimizer or RNG state).
    pub fn frozen(arch: ArchBlock, schedule: ScheduleSpec, params: ParamSet) -> Self {
        let ema = EmaSet::from_params(&params);
        Checkpoint {
            arch,
            schedule,
            step: 0,
            params,
            ema,
            opt: None,
            rng: None,
        }
    }

    /// Rebuild a training state that continues exactly where this
    /// checkpoint stopped.
    pub fn into_state(self, cfg: &TrainConfig) -> TrainState {
        let mut opt = AdamW::new(&self.params, cfg.learning_rate, cfg.weight_decay);
        if let Some((m, v, steps)) = self.opt {
            opt.restore_moments(m, v, steps);
        }
        let rng = self
            .rng
            .map(|r| r.restore())
            .unwrap_or_else(|| ChaCha8Rng::seed_from_u64(cfg.seed));
        TrainState {
            params: self.params,
            ema: self.ema,
            opt,
            step: self.step,
            rng,
            dropped: 0,
            seen: 0,
        }
    }

    /// The EMA shadows as sampling-ready parameters.
    pub fn ema_params(&self) -> ParamSet {
        self.ema.to_param_set(&self.params)
    }
}

fn push_f32s(buf: &mut Vec<u8>, values: impl Iterator<Item = f32>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tensors: Vec<TensorMeta> = (0..ckpt.params.len())
        .map(|i| TensorMeta {
            name: ckpt.params.name_at(i).to_string(),
            shape: ckpt.params.value_at(i).shape().to_vec(),
        })
        .collect();
    if ckpt.ema.len() != ckpt.params.len() {
        return Err(Error::Checkpoint(
            "EMA block must cover every parameter".into(),
        ));
    }
    let header = Header {
        arch: ckpt.arch.clone(),
        schedule: ckpt.schedule,
        step: ckpt.step,
        opt_step: ckpt.opt.as_ref().map(|o| o.2).unwrap_or(0),
        has_opt: ckpt.opt.is_some(),
        has_rng: ckpt.rng.is_some(),
        tensors,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for i in 0..ckpt.params.len() {
        push_f32s(&mut buf, ckpt.params.value_at(i).iter().copied());
    }
    for i in 0..ckpt.params.len() {
        push_f32s(&mut buf, ckpt.ema.value_at(i).iter().map(|&v| v as f32));
    }
    if let Some((m, v, _)) = &ckpt.opt {
        for t in m {
            push_f32s(&mut buf, t.iter().copied());
        }
        for t in v {
            push_f32s(&mut buf, t.iter().copied());
        }
    }
    if let Some(r) = &ckpt.rng {
        buf.extend_from_slice(&r.seed);
        buf.extend_from_slice(&r.word_pos.to_le_bytes());
        buf.extend_from_slice(&r.stream.to_le_bytes());
    }

    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated at byte {} (need {n} more)",
                self.path, self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<ArrayD<f32>> {
        let n: usize = shape.iter().product();
        let bytes = self.take(4 * n)?;
        let mut v = Vec::with_capacity(n);
        for c in bytes.chunks_exact(4) {
            v.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        }
        Ok(ArrayD::from_shape_vec(IxDyn(shape), v).unwrap())
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let data = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader {
        data: &data,
        pos: 0,
        path: path.display().to_string(),
    };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let vbytes = r.take(4)?;
    let version = u32::from_le_bytes([vbytes[0], vbytes[1], vbytes[2], vbytes[3]]);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unknown format version {version} (supported: {VERSION})",
            path.display()
        )));
    }
    let lbytes = r.take(8)?;
    let hlen = u64::from_le_bytes(lbytes.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::Checkpoint(format!("{}: header decode: {e}", path.display())))?;

    let mut params = ParamSet::new();
    for t in &header.tensors {
        params.register(&t.name, r.tensor(&t.shape)?);
    }
    let mut ema = EmaSet::from_params(&params);
    for (i, t) in header.tensors.iter().enumerate() {
        let raw = r.tensor(&t.shape)?;
        ema.set_value_at(i, raw.mapv(|v| v as f64));
    }
    let opt = if header.has_opt {
        let mut m = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            m.push(r.tensor(&t.shape)?);
        }
        let mut v = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            v.push(r.tensor(&t.shape)?);
        }
        Some((m, v, header.opt_step))
    } else {
        None
    };
    let rng = if header.has_rng {
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let stream = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        Some(RngState {
            seed,
            word_pos,
            stream,
        })
    } else {
        None
    };
    if r.pos != data.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes",
            path.display(),
            data.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        arch: header.arch,
        schedule: header.schedule,
        step: header.step,
        params,
        ema,
        opt,
        rng,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BaseModel, TokenSpec};
    use crate::nn::randn;
    use crate::training::Stage;
    use rand::SeedableRng as _;

    fn tiny_ckpt(seed: u64) -> Checkpoint {
        let arch = BaseArch {
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
            task: None,
        };
        let model = BaseModel::new(arch.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = model.init_params(&mut rng);
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default_for(Stage::Pretrain)
        };
        let mut state = TrainState::new(params, &cfg);
        // Advance the rng so the captured state is mid-stream.
        let _ = randn(&[7], 1.0, &mut state.rng);
        state.step = 123;
        Checkpoint::from_state(
            ArchBlock::Base(arch),
            ScheduleSpec {
                steps: 200,
                beta_start: 1e-4,
                beta_end: 0.02,
            },
            &state,
        )
    }

    #[test]
    fn save_load_save_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ck = tiny_ckpt(1);
        save(&ck, &p1).unwrap();
        let loaded = load(&p1).unwrap();
        save(&loaded, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let ck = tiny_ckpt(2);
        save(&ck, &p).unwrap();
        let got = load(&p).unwrap();
        assert_eq!(got.arch, ck.arch);
        assert_eq!(got.schedule, ck.schedule);
        assert_eq!(got.step, ck.step);
        assert_eq!(got.params.len(), ck.params.len());
        for i in 0..ck.params.len() {
            assert_eq!(got.params.name_at(i), ck.params.name_at(i));
            assert_eq!(got.params.value_at(i), ck.params.value_at(i));
        }
        assert_eq!(got.rng, ck.rng);
        // Restored rng continues the same stream.
        let mut a = got.rng.clone().unwrap().restore();
        let mut b = ck.rng.clone().unwrap().restore();
        assert_eq!(randn(&[16], 1.0, &mut a), randn(&[16], 1.0, &mut b));
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ckpt");
        let ck = tiny_ckpt(3);
        save(&ck, &p).unwrap();
        let data = std::fs::read(&p).unwrap();

        let mut bad = data.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load(&p), Err(Error::Checkpoint(_))));

        let mut badv = data.clone();
        badv[4] = 99;
        std::fs::write(&p, &badv).unwrap();
        let err = load(&p).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");

        std::fs::write(&p, &data[..data.len() / 2]).unwrap();
        let err = load(&p).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn resume_reproduces_loss_trajectory_bitwise() {
        use crate::data::generate_corpus;
        use crate::models::TaskKind;
        use crate::schedules::make_linear_schedule;
        use crate::training::{train_base, CondSource};

        let _ = TaskKind::Mask;
        let schedule = make_linear_schedule(10, 1e-3, 0.05).unwrap();
        let spec = ScheduleSpec {
            steps: 10,
            beta_start: 1e-3,
            beta_end: 0.05,
        };
        let arch = BaseArch {
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
            desc_dim: crate::data::DESCRIPTOR_DIM,
            head_widths: vec![8, 8, 8],
            cond_hw: 32,
            task: None,
        };
        let model = BaseModel::new(arch.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = model.init_params(&mut rng);
        let corpus = generate_corpus(700, 8);
        let mk_cfg = |steps: usize| TrainConfig {
            batch_size: 4,
            max_steps: steps,
            seed: 9,
            ..TrainConfig::default_for(Stage::Pretrain)
        };

        // Straight 10-step run.
        let mut full = TrainState::new(params.clone(), &mk_cfg(10));
        let rows_full = train_base(
            &model,
            &mut full,
            &corpus,
            CondSource::Descriptor,
            &schedule,
            &mk_cfg(10),
        )
        .unwrap();

        // 6 steps, checkpoint, restore, 4 more.
        let mut first = TrainState::new(params, &mk_cfg(6));
        let rows_a = train_base(
            &model,
            &mut first,
            &corpus,
            CondSource::Descriptor,
            &schedule,
            &mk_cfg(6),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mid.ckpt");
        save(
            &Checkpoint::from_state(ArchBlock::Base(arch), spec, &first),
            &p,
        )
        .unwrap();
        let mut resumed = load(&p).unwrap().into_state(&mk_cfg(4));
        let rows_b = train_base(
            &model,
            &mut resumed,
            &corpus,
            CondSource::Descriptor,
            &schedule,
            &mk_cfg(4),
        )
        .unwrap();

        let joined: Vec<f64> = rows_a
            .iter()
            .chain(rows_b.iter())
            .map(|r| r.loss_simple)
            .collect();
        let straight: Vec<f64> = rows_full.iter().map(|r| r.loss_simple).collect();
        assert_eq!(joined, straight, "resumed trajectory must match bitwise");
        // Parameters agree bit for bit as well.
        for i in 0..full.params.len() {
            assert_eq!(full.params.value_at(i), resumed.params.value_at(i));
        }
    }

    #[test]
    fn ema_block_always_present() {
        let ck = tiny_ckpt(4);
        // Corrupt the invariant in memory and expect save to refuse.
        let mut broken = ck.clone();
        broken.ema = EmaSet::from_params(&ParamSet::new());
        let dir = tempfile::tempdir().unwrap();
        assert!(save(&broken, &dir.path().join("e.ckpt")).is_err());
    }
}
