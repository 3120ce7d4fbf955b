//! Flat key-value run configuration.
//!
//! One plain-text file covers every tunable default across the engine
//! (schedule, model sizes, training, degradation, guidance, data, eval).
//! Unknown keys are rejected; the seed has no default and must be set in the
//! file or by a flag before a command can run. `resolved_text` serializes
//! the full effective configuration for logging next to run outputs.

use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, GuidanceMode, SamplerKind, StatAxes};
use crate::models::{BaseArch, ExtractorArch, TaskKind, TokenSpec, UNetArch};
use crate::schedules::ScheduleSpec;
use crate::training::{DegradationConfig, Stage, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Master seed; mandatory, never defaulted from the clock.
    pub seed: Option<u64>,

    pub schedule_steps: usize,
    pub schedule_beta_start: f64,
    pub schedule_beta_end: f64,

    pub model_base_widths: Vec<usize>,
    pub model_upsampler_widths: Vec<usize>,
    pub model_head_widths: Vec<usize>,
    pub model_extractor_widths: Vec<usize>,
    pub model_groups: usize,
    pub model_attn_dim: usize,
    pub model_tokens_k: usize,
    pub model_tokens_d: usize,
    pub model_upsampler_use_tokens: bool,

    pub train_lr_pretrain: f64,
    pub train_lr_finetune1: f64,
    pub train_lr_finetune2: f64,
    pub train_lr_upsampler: f64,
    pub train_batch_size: usize,
    pub train_ema_rate: f64,
    pub train_cond_dropout_p: f64,
    pub train_lambda_perc: f64,
    pub train_lambda_adv: f64,
    pub train_weight_decay: f64,
    pub train_steps_pretrain: usize,
    pub train_steps_finetune: usize,
    pub train_steps_upsampler: usize,
    pub train_extractor_steps: usize,
    pub train_extractor_lr: f64,

    pub degrade_enabled: bool,
    pub degrade_p_blur: f64,
    pub degrade_blur_sigma: (f64, f64),
    pub degrade_p_down: f64,
    pub degrade_p_noise: f64,
    pub degrade_noise_sigma: (f64, f64),
    pub degrade_p_quant: f64,
    pub degrade_quant_levels: Vec<usize>,
    pub degrade_p_smooth: f64,
    pub degrade_smooth_tau: (f64, f64),
    pub degrade_smooth_iters: usize,

    pub guidance_mode: GuidanceMode,
    pub guidance_axes: StatAxes,
    pub guidance_w_base: f64,
    pub guidance_w_upsampler: f64,

    pub sample_kind: SamplerKind,
    pub sample_steps_base: usize,
    pub sample_steps_upsampler: usize,
    pub sample_n: usize,

    pub data_pretext_size: usize,
    pub data_downstream_size: usize,
    pub data_test_size: usize,
    pub data_seed_pretext: u64,
    pub data_seed_mask: u64,
    pub data_seed_sketch: u64,
    pub data_seed_geometry: u64,
    pub data_seed_test: u64,
    pub data_few_shot_fraction: f64,

    pub eval_fid_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            schedule_steps: 200,
            schedule_beta_start: 1e-4,
            schedule_beta_end: 0.02,
            model_base_widths: vec![24, 48, 96],
            model_upsampler_widths: vec![16, 32, 64],
            model_head_widths: vec![16, 32, 64],
            model_extractor_widths: vec![16, 32, 64],
            model_groups: 8,
            model_attn_dim: 32,
            model_tokens_k: 8,
            model_tokens_d: 64,
            model_upsampler_use_tokens: false,
            train_lr_pretrain: 1e-4,
            train_lr_finetune1: 3.5e-5,
            train_lr_finetune2: 3e-5,
            train_lr_upsampler: 1e-4,
            train_batch_size: 32,
            train_ema_rate: 0.999,
            train_cond_dropout_p: 0.1,
            train_lambda_perc: 1.0,
            train_lambda_adv: 0.05,
            train_weight_decay: 0.01,
            train_steps_pretrain: 20_000,
            train_steps_finetune: 5_000,
            train_steps_upsampler: 5_000,
            train_extractor_steps: 2_000,
            train_extractor_lr: 1e-3,
            degrade_enabled: true,
            degrade_p_blur: 0.5,
            degrade_blur_sigma: (0.3, 1.0),
            degrade_p_down: 0.3,
            degrade_p_noise: 0.5,
            degrade_noise_sigma: (0.0, 0.08),
            degrade_p_quant: 0.3,
            degrade_quant_levels: vec![8, 16, 32],
            degrade_p_smooth: 0.5,
            degrade_smooth_tau: (0.1, 0.35),
            degrade_smooth_iters: 2,
            guidance_mode: GuidanceMode::Ncf,
            guidance_axes: StatAxes::PerSample,
            guidance_w_base: 3.0,
            guidance_w_upsampler: 0.0,
            sample_kind: SamplerKind::Ddpm,
            sample_steps_base: 100,
            sample_steps_upsampler: 27,
            sample_n: 16,
            data_pretext_size: 50_000,
            data_downstream_size: 2_000,
            data_test_size: 256,
            data_seed_pretext: 0,
            data_seed_mask: 1_000_000,
            data_seed_sketch: 2_000_000,
            data_seed_geometry: 3_000_000,
            data_seed_test: 4_000_000,
            data_few_shot_fraction: 1.0,
            eval_fid_samples: 128,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse::<T>()
        .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{v}'")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|p| parse_num::<usize>(key, p))
        .collect::<Result<Vec<_>>>()
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = v.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::Config(format!("key '{key}': expected 'lo,hi', got '{v}'")));
    }
    Ok((parse_num(key, parts[0])?, parse_num(key, parts[1])?))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("key '{key}': expected bool, got '{other}'"))),
    }
}

impl RunConfig {
    /// Apply one `key = value` assignment; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = Some(parse_num(key, v)?),
            "schedule.steps" => self.schedule_steps = parse_num(key, v)?,
            "schedule.beta_start" => self.schedule_beta_start = parse_num(key, v)?,
            "schedule.beta_end" => self.schedule_beta_end = parse_num(key, v)?,
            "model.base_widths" => self.model_base_widths = parse_list(key, v)?,
            "model.upsampler_widths" => self.model_upsampler_widths = parse_list(key, v)?,
            "model.head_widths" => self.model_head_widths = parse_list(key, v)?,
            "model.extractor_widths" => self.model_extractor_widths = parse_list(key, v)?,
            "model.groups" => self.model_groups = parse_num(key, v)?,
            "model.attn_dim" => self.model_attn_dim = parse_num(key, v)?,
            "model.tokens_k" => self.model_tokens_k = parse_num(key, v)?,
            "model.tokens_d" => self.model_tokens_d = parse_num(key, v)?,
            "model.upsampler_use_tokens" => self.model_upsampler_use_tokens = parse_bool(key, v)?,
            "train.lr_pretrain" => self.train_lr_pretrain = parse_num(key, v)?,
            "train.lr_finetune1" => self.train_lr_finetune1 = parse_num(key, v)?,
            "train.lr_finetune2" => self.train_lr_finetune2 = parse_num(key, v)?,
            "train.lr_upsampler" => self.train_lr_upsampler = parse_num(key, v)?,
            "train.batch_size" => self.train_batch_size = parse_num(key, v)?,
            "train.ema_rate" => self.train_ema_rate = parse_num(key, v)?,
            "train.cond_dropout_p" => self.train_cond_dropout_p = parse_num(key, v)?,
            "train.lambda_perc" => self.train_lambda_perc = parse_num(key, v)?,
            "train.lambda_adv" => self.train_lambda_adv = parse_num(key, v)?,
            "train.weight_decay" => self.train_weight_decay = parse_num(key, v)?,
            "train.steps_pretrain" => self.train_steps_pretrain = parse_num(key, v)?,
            "train.steps_finetune" => self.train_steps_finetune = parse_num(key, v)?,
            "train.steps_upsampler" => self.train_steps_upsampler = parse_num(key, v)?,
            "train.extractor_steps" => self.train_extractor_steps = parse_num(key, v)?,
            "train.extractor_lr" => self.train_extractor_lr = parse_num(key, v)?,
            "degrade.enabled" => self.degrade_enabled = parse_bool(key, v)?,
            "degrade.p_blur" => self.degrade_p_blur = parse_num(key, v)?,
            "degrade.blur_sigma" => self.degrade_blur_sigma = parse_pair(key, v)?,
            "degrade.p_down" => self.degrade_p_down = parse_num(key, v)?,
            "degrade.p_noise" => self.degrade_p_noise = parse_num(key, v)?,
            "degrade.noise_sigma" => self.degrade_noise_sigma = parse_pair(key, v)?,
            "degrade.p_quant" => self.degrade_p_quant = parse_num(key, v)?,
            "degrade.quant_levels" => self.degrade_quant_levels = parse_list(key, v)?,
            "degrade.p_smooth" => self.degrade_p_smooth = parse_num(key, v)?,
            "degrade.smooth_tau" => self.degrade_smooth_tau = parse_pair(key, v)?,
            "degrade.smooth_iters" => self.degrade_smooth_iters = parse_num(key, v)?,
            "guidance.mode" => self.guidance_mode = GuidanceMode::parse(v)?,
            "guidance.axes" => {
                self.guidance_axes = match v {
                    "per-sample" => StatAxes::PerSample,
                    "per-channel" => StatAxes::PerChannel,
                    other => {
                        return Err(Error::Config(format!(
                            "key 'guidance.axes': unknown value '{other}'"
                        )))
                    }
                }
            }
            "guidance.w_base" => self.guidance_w_base = parse_num(key, v)?,
            "guidance.w_upsampler" => self.guidance_w_upsampler = parse_num(key, v)?,
            "sample.kind" => self.sample_kind = SamplerKind::parse(v)?,
            "sample.steps_base" => self.sample_steps_base = parse_num(key, v)?,
            "sample.steps_upsampler" => self.sample_steps_upsampler = parse_num(key, v)?,
            "sample.n" => self.sample_n = parse_num(key, v)?,
            "data.pretext_size" => self.data_pretext_size = parse_num(key, v)?,
            "data.downstream_size" => self.data_downstream_size = parse_num(key, v)?,
            "data.test_size" => self.data_test_size = parse_num(key, v)?,
            "data.seed_pretext" => self.data_seed_pretext = parse_num(key, v)?,
            "data.seed_mask" => self.data_seed_mask = parse_num(key, v)?,
            "data.seed_sketch" => self.data_seed_sketch = parse_num(key, v)?,
            "data.seed_geometry" => self.data_seed_geometry = parse_num(key, v)?,
            "data.seed_test" => self.data_seed_test = parse_num(key, v)?,
            "data.few_shot_fraction" => self.data_few_shot_fraction = parse_num(key, v)?,
            "eval.fid_samples" => self.eval_fid_samples = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parse a config file body (`key = value` lines, `#` comments).
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.set(key.trim(), value)?;
        }
        Ok(cfg)
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| {
            Error::Config("seed is mandatory: set 'seed' in the config file or pass --seed".into())
        })
    }

    /// Full effective configuration, one key per line.
    pub fn resolved_text(&self) -> String {
        let pair = |p: (f64, f64)| format!("{},{}", p.0, p.1);
        let list = |l: &[usize]| {
            l.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let axes = match self.guidance_axes {
            StatAxes::PerSample => "per-sample",
            StatAxes::PerChannel => "per-channel",
        };
        let mut s = String::new();
        if let Some(seed) = self.seed {
            s.push_str(&format!("seed = {seed}\n"));
        }
        s.push_str(&format!("schedule.steps = {}\n", self.schedule_steps));
        s.push_str(&format!("schedule.beta_start = {}\n", self.schedule_beta_start));
        s.push_str(&format!("schedule.beta_end = {}\n", self.schedule_beta_end));
        s.push_str(&format!("model.base_widths = {}\n", list(&self.model_base_widths)));
        s.push_str(&format!(
            "model.upsampler_widths = {}\n",
            list(&self.model_upsampler_widths)
        ));
        s.push_str(&format!("model.head_widths = {}\n", list(&self.model_head_widths)));
        s.push_str(&format!(
            "model.extractor_widths = {}\n",
            list(&self.model_extractor_widths)
        ));
        s.push_str(&format!("model.groups = {}\n", self.model_groups));
        s.push_str(&format!("model.attn_dim = {}\n", self.model_attn_dim));
        s.push_str(&format!("model.tokens_k = {}\n", self.model_tokens_k));
        s.push_str(&format!("model.tokens_d = {}\n", self.model_tokens_d));
        s.push_str(&format!(
            "model.upsampler_use_tokens = {}\n",
            self.model_upsampler_use_tokens
        ));
        s.push_str(&format!("train.lr_pretrain = {}\n", self.train_lr_pretrain));
        s.push_str(&format!("train.lr_finetune1 = {}\n", self.train_lr_finetune1));
        s.push_str(&format!("train.lr_finetune2 = {}\n", self.train_lr_finetune2));
        s.push_str(&format!("train.lr_upsampler = {}\n", self.train_lr_upsampler));
        s.push_str(&format!("train.batch_size = {}\n", self.train_batch_size));
        s.push_str(&format!("train.ema_rate = {}\n", self.train_ema_rate));
        s.push_str(&format!("train.cond_dropout_p = {}\n", self.train_cond_dropout_p));
        s.push_str(&format!("train.lambda_perc = {}\n", self.train_lambda_perc));
        s.push_str(&format!("train.lambda_adv = {}\n", self.train_lambda_adv));
        s.push_str(&format!("train.weight_decay = {}\n", self.train_weight_decay));
        s.push_str(&format!("train.steps_pretrain = {}\n", self.train_steps_pretrain));
        s.push_str(&format!("train.steps_finetune = {}\n", self.train_steps_finetune));
        s.push_str(&format!("train.steps_upsampler = {}\n", self.train_steps_upsampler));
        s.push_str(&format!("train.extractor_steps = {}\n", self.train_extractor_steps));
        s.push_str(&format!("train.extractor_lr = {}\n", self.train_extractor_lr));
        s.push_str(&format!("degrade.enabled = {}\n", self.degrade_enabled));
        s.push_str(&format!("degrade.p_blur = {}\n", self.degrade_p_blur));
        s.push_str(&format!("degrade.blur_sigma = {}\n", pair(self.degrade_blur_sigma)));
        s.push_str(&format!("degrade.p_down = {}\n", self.degrade_p_down));
        s.push_str(&format!("degrade.p_noise = {}\n", self.degrade_p_noise));
        s.push_str(&format!("degrade.noise_sigma = {}\n", pair(self.degrade_noise_sigma)));
        s.push_str(&format!("degrade.p_quant = {}\n", self.degrade_p_quant));
        s.push_str(&format!(
            "degrade.quant_levels = {}\n",
            list(&self.degrade_quant_levels)
        ));
        s.push_str(&format!("degrade.p_smooth = {}\n", self.degrade_p_smooth));
        s.push_str(&format!("degrade.smooth_tau = {}\n", pair(self.degrade_smooth_tau)));
        s.push_str(&format!("degrade.smooth_iters = {}\n", self.degrade_smooth_iters));
        s.push_str(&format!("guidance.mode = {}\n", self.guidance_mode.name()));
        s.push_str(&format!("guidance.axes = {axes}\n"));
        s.push_str(&format!("guidance.w_base = {}\n", self.guidance_w_base));
        s.push_str(&format!("guidance.w_upsampler = {}\n", self.guidance_w_upsampler));
        s.push_str(&format!("sample.kind = {}\n", self.sample_kind.name()));
        s.push_str(&format!("sample.steps_base = {}\n", self.sample_steps_base));
        s.push_str(&format!(
            "sample.steps_upsampler = {}\n",
            self.sample_steps_upsampler
        ));
        s.push_str(&format!("sample.n = {}\n", self.sample_n));
        s.push_str(&format!("data.pretext_size = {}\n", self.data_pretext_size));
        s.push_str(&format!("data.downstream_size = {}\n", self.data_downstream_size));
        s.push_str(&format!("data.test_size = {}\n", self.data_test_size));
        s.push_str(&format!("data.seed_pretext = {}\n", self.data_seed_pretext));
        s.push_str(&format!("data.seed_mask = {}\n", self.data_seed_mask));
        s.push_str(&format!("data.seed_sketch = {}\n", self.data_seed_sketch));
        s.push_str(&format!("data.seed_geometry = {}\n", self.data_seed_geometry));
        s.push_str(&format!("data.seed_test = {}\n", self.data_seed_test));
        s.push_str(&format!(
            "data.few_shot_fraction = {}\n",
            self.data_few_shot_fraction
        ));
        s.push_str(&format!("eval.fid_samples = {}\n", self.eval_fid_samples));
        s
    }

    // -- Derived component configs ------------------------------------------

    pub fn schedule_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            steps: self.schedule_steps,
            beta_start: self.schedule_beta_start,
            beta_end: self.schedule_beta_end,
        }
    }

    pub fn token_spec(&self) -> TokenSpec {
        TokenSpec {
            k: self.model_tokens_k,
            d: self.model_tokens_d,
        }
    }

    pub fn base_arch(&self, task: Option<TaskKind>) -> BaseArch {
        BaseArch {
            unet: UNetArch {
                in_ch: 3,
                out_ch: 3,
                resolution: 16,
                widths: self.model_base_widths.clone(),
                temb_dim: 64,
                groups: self.model_groups,
                attn_dim: self.model_attn_dim,
                tokens: Some(self.token_spec()),
            },
            desc_dim: crate::data::DESCRIPTOR_DIM,
            head_widths: self.model_head_widths.clone(),
            cond_hw: crate::data::IMG_HW,
            task,
        }
    }

    pub fn upsampler_arch(&self) -> UNetArch {
        UNetArch {
            in_ch: 6,
            out_ch: 3,
            resolution: 32,
            widths: self.model_upsampler_widths.clone(),
            temb_dim: 64,
            groups: self.model_groups,
            attn_dim: self.model_attn_dim,
            tokens: self.model_upsampler_use_tokens.then(|| self.token_spec()),
        }
    }

    pub fn extractor_arch(&self) -> ExtractorArch {
        ExtractorArch {
            widths: self.model_extractor_widths.clone(),
            input_hw: crate::data::IMG_HW,
            groups: self.model_groups.min(4),
            num_classes: crate::data::NUM_CLASSES,
        }
    }

    pub fn train_config(&self, stage: Stage, seed: u64) -> TrainConfig {
        let (learning_rate, max_steps) = match stage {
            Stage::Pretrain => (self.train_lr_pretrain, self.train_steps_pretrain),
            Stage::Finetune1 => (self.train_lr_finetune1, self.train_steps_finetune),
            Stage::Finetune2 => (self.train_lr_finetune2, self.train_steps_finetune),
            Stage::Upsampler => (self.train_lr_upsampler, self.train_steps_upsampler),
        };
        TrainConfig {
            learning_rate,
            batch_size: self.train_batch_size,
            ema_rate: self.train_ema_rate,
            cond_dropout_p: self.train_cond_dropout_p,
            lambda_perc: self.train_lambda_perc,
            lambda_adv: self.train_lambda_adv,
            stage,
            max_steps,
            seed,
            weight_decay: self.train_weight_decay,
        }
    }

    pub fn degradation(&self) -> Option<DegradationConfig> {
        self.degrade_enabled.then(|| DegradationConfig {
            p_blur: self.degrade_p_blur,
            blur_sigma: self.degrade_blur_sigma,
            p_down: self.degrade_p_down,
            p_noise: self.degrade_p_noise,
            noise_sigma: self.degrade_noise_sigma,
            p_quant: self.degrade_p_quant,
            quant_levels: self.degrade_quant_levels.clone(),
            p_smooth: self.degrade_p_smooth,
            smooth_tau: self.degrade_smooth_tau,
            smooth_iters: self.degrade_smooth_iters,
        })
    }

    pub fn guidance_base(&self) -> GuidanceConfig {
        GuidanceConfig {
            mode: self.guidance_mode,
            w: self.guidance_w_base,
            axes: self.guidance_axes,
        }
    }

    pub fn guidance_upsampler(&self) -> GuidanceConfig {
        GuidanceConfig {
            mode: self.guidance_mode,
            w: self.guidance_w_upsampler,
            axes: self.guidance_axes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_decisions() {
        let c = RunConfig::default();
        assert_eq!(c.schedule_steps, 200);
        assert_eq!(c.schedule_beta_start, 1e-4);
        assert_eq!(c.schedule_beta_end, 0.02);
        assert_eq!(c.train_cond_dropout_p, 0.1);
        assert_eq!(c.train_lambda_perc, 1.0);
        assert_eq!(c.train_lambda_adv, 0.05);
        assert_eq!(c.guidance_w_base, 3.0);
        assert_eq!(c.guidance_w_upsampler, 0.0);
        assert_eq!(c.data_pretext_size, 50_000);
        assert_eq!(c.data_downstream_size, 2_000);
        assert_eq!(c.data_test_size, 256);
        assert!(c.seed.is_none(), "seed must not have a default");
    }

    #[test]
    fn parse_round_trip_and_overrides() {
        let mut c = RunConfig::default();
        c.seed = Some(7);
        let text = c.resolved_text();
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(parsed, c);

        let mut c2 = parsed;
        c2.set("guidance.w_base", "6.5").unwrap();
        assert_eq!(c2.guidance_w_base, 6.5);
        c2.set("model.base_widths", "8,16,32").unwrap();
        assert_eq!(c2.model_base_widths, vec![8, 16, 32]);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::parse("nonsense.key = 3\n").is_err());
        assert!(RunConfig::parse("schedule.steps = banana\n").is_err());
        assert!(RunConfig::parse("just a line\n").is_err());
        // Comments and blanks are fine.
        let c = RunConfig::parse("# comment\n\nseed = 3\n").unwrap();
        assert_eq!(c.seed, Some(3));
    }

    #[test]
    fn seed_required_for_runs() {
        let c = RunConfig::default();
        assert!(c.require_seed().is_err());
        let c = RunConfig::parse("seed = 11\n").unwrap();
        assert_eq!(c.require_seed().unwrap(), 11);
    }
}
