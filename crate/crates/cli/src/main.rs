//! Command-line surface: dataset generation, training, sampling, evaluation
//! and editing, all driven by one flat config file plus flag overrides.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use shapediff_core::ckpt::{self, ArchBlock, Checkpoint};
use shapediff_core::config::RunConfig;
use shapediff_core::data;
use shapediff_core::eval::{
    mask_alignment, metrics_to_csv, montage, saturation_metrics, toy_fid, MetricRecord,
};
use shapediff_core::guidance::{
    edit as edit_op, sample_base, sample_cascade, GuidanceConfig, GuidanceMode, SamplerConfig,
    SamplerKind, StatAxes,
};
use shapediff_core::models::{BaseModel, Condition, Discriminator, FeatureExtractor, TaskKind, UNet};
use shapediff_core::schedules::respace;
use shapediff_core::training::{
    metrics_csv, train_base, train_extractor, train_upsampler, AdamW, CondSource, EmaSet, Stage,
    TrainState,
};

#[derive(Parser)]
#[command(
    name = "shapediff",
    about = "Desk-scale cascaded conditional diffusion on a procedural shapes corpus",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Path to a flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single config key, e.g. --set train.batch_size=8.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Master seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got '{s}'"))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(seed) = self.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the shapes-world corpora (pretext, per-task downstream, test).
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; one subdirectory per split.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the frozen feature network as a shape-class classifier.
    TrainExtractor {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Data directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generative pretraining of the base model on class descriptors.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train for this many steps (default: train.steps_pretrain).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Two-stage task finetuning of a pretrained base model.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_parser = parse_task)]
        task: TaskKind,
        /// 1 = head only (decoder frozen), 2 = joint.
        #[arg(long)]
        stage: u8,
        #[arg(long = "input")]
        input: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Adversarial diffusion upsampler training.
    TrainUpsampler {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Frozen feature-extractor checkpoint (needed when lambda_perc > 0).
        #[arg(long)]
        extractor: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sample images from a checkpoint (optionally through the upsampler).
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        upsampler: Option<PathBuf>,
        /// Split directory supplying the conditions.
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        /// plain | cf | ncf.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        w: Option<f64>,
        /// ddpm | ddim.
        #[arg(long)]
        sampler: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Toy-FID / IoU / saturation metrics for one or more checkpoints.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "ckpt", required = true)]
        ckpts: Vec<PathBuf>,
        #[arg(long)]
        upsampler: Option<PathBuf>,
        #[arg(long)]
        extractor: PathBuf,
        /// Test-split directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// DDIM-invert an image under its old condition and resample a new one.
    Edit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// 16x16 PPM input image.
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "old-cond")]
        old_cond: PathBuf,
        #[arg(long = "new-cond")]
        new_cond: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_task(s: &str) -> std::result::Result<TaskKind, String> {
    TaskKind::parse(s).map_err(|e| e.to_string())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn write_resolved_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("resolved-config.txt"), cfg.resolved_text())
        .context("writing resolved config")?;
    Ok(())
}

fn out_dir_of(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { cfg, out } => cmd_gen_data(&cfg.load()?, &out),
        Cmd::TrainExtractor { cfg, data, out } => cmd_train_extractor(&cfg.load()?, &data, &out),
        Cmd::Pretrain {
            cfg,
            data,
            out,
            resume,
            steps,
        } => cmd_pretrain(&cfg.load()?, &data, &out, resume.as_deref(), steps),
        Cmd::Finetune {
            cfg,
            task,
            stage,
            input,
            data,
            out,
            steps,
        } => cmd_finetune(&cfg.load()?, task, stage, &input, &data, &out, steps),
        Cmd::TrainUpsampler {
            cfg,
            data,
            out,
            extractor,
            resume,
            steps,
        } => cmd_train_upsampler(
            &cfg.load()?,
            &data,
            &out,
            extractor.as_deref(),
            resume.as_deref(),
            steps,
        ),
        Cmd::Sample {
            cfg,
            ckpt,
            upsampler,
            source,
            n,
            mode,
            w,
            sampler,
            steps,
            out,
        } => {
            let mut rc = cfg.load()?;
            if let Some(m) = mode {
                rc.set("guidance.mode", &m)?;
            }
            if let Some(wv) = w {
                rc.set("guidance.w_base", &wv.to_string())?;
            }
            if let Some(k) = sampler {
                rc.set("sample.kind", &k)?;
            }
            if let Some(s) = steps {
                rc.set("sample.steps_base", &s.to_string())?;
            }
            if let Some(nv) = n {
                rc.set("sample.n", &nv.to_string())?;
            }
            cmd_sample(&rc, &ckpt, upsampler.as_deref(), &source, &out)
        }
        Cmd::Eval {
            cfg,
            ckpts,
            upsampler,
            extractor,
            data,
            out,
        } => cmd_eval(&cfg.load()?, &ckpts, upsampler.as_deref(), &extractor, &data, &out),
        Cmd::Edit {
            cfg,
            ckpt,
            image,
            old_cond,
            new_cond,
            steps,
            out,
        } => {
            let mut rc = cfg.load()?;
            if let Some(s) = steps {
                rc.set("sample.steps_base", &s.to_string())?;
            }
            cmd_edit(&rc, &ckpt, &image, &old_cond, &new_cond, &out)
        }
    }
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let _ = cfg.require_seed()?;
    write_resolved_config(cfg, out)?;
    let frac = cfg.data_few_shot_fraction.clamp(0.0, 1.0);
    let downstream = ((cfg.data_downstream_size as f64) * frac).round() as usize;
    let splits: [(&str, u64, usize); 5] = [
        ("pretext", cfg.data_seed_pretext, cfg.data_pretext_size),
        ("mask", cfg.data_seed_mask, downstream),
        ("sketch", cfg.data_seed_sketch, downstream),
        ("geometry", cfg.data_seed_geometry, downstream),
        ("test", cfg.data_seed_test, cfg.data_test_size),
    ];
    for (name, seed, count) in splits {
        let samples = data::generate_corpus(seed, count);
        data::dataset_write(&samples, &out.join(name))?;
        println!("wrote {count} samples to {}", out.join(name).display());
    }
    Ok(())
}

fn cmd_train_extractor(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<()> {
    let seed = cfg.require_seed()?;
    write_resolved_config(cfg, &out_dir_of(out))?;
    let corpus = data::dataset_read(&data_dir.join("pretext"))?;
    let arch = cfg.extractor_arch();
    let fx = FeatureExtractor::new(&arch);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut params = shapediff_core::nn::ParamSet::new();
    fx.init_params(&mut params, &mut rng);
    let mut tc = cfg.train_config(Stage::Pretrain, seed);
    tc.learning_rate = cfg.train_extractor_lr;
    tc.max_steps = cfg.train_extractor_steps;
    let mut state = TrainState::new(params, &tc);
    let rows = train_extractor(&fx, &mut state, &corpus, &tc)?;
    std::fs::write(out.with_extension("metrics.csv"), metrics_csv(&rows))
        .context("writing metrics csv")?;
    // Ship the EMA weights as the frozen extractor.
    let frozen = Checkpoint::frozen(
        ArchBlock::Extractor(arch),
        cfg.schedule_spec(),
        state.ema_params(),
    );
    ckpt::save(&frozen, out)?;
    println!(
        "extractor trained for {} steps; final loss {:.4}; saved {}",
        rows.len(),
        rows.last().map(|r| r.loss_simple).unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn load_base(path: &Path) -> Result<(BaseModel, Checkpoint)> {
    let found = ckpt::load(path)?;
    match &found.arch {
        ArchBlock::Base(arch) => Ok((BaseModel::new(arch.clone()), found)),
        other => bail!(
            "{} holds a '{}' checkpoint, expected a base model",
            path.display(),
            other.kind()
        ),
    }
}

fn cmd_pretrain(
    cfg: &RunConfig,
    data_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
    steps: Option<usize>,
) -> Result<()> {
    let seed = cfg.require_seed()?;
    write_resolved_config(cfg, &out_dir_of(out))?;
    let corpus = data::dataset_read(&data_dir.join("pretext"))?;
    let schedule_spec = cfg.schedule_spec();
    let schedule = schedule_spec.build()?;
    let mut tc = cfg.train_config(Stage::Pretrain, seed);
    if let Some(s) = steps {
        tc.max_steps = s;
    }

    let (model, mut state) = match resume {
        Some(p) => {
            let (model, found) = load_base(p)?;
            if found.schedule != schedule_spec {
                bail!(
                    "checkpoint schedule {:?} differs from the configured schedule",
                    found.schedule
                );
            }
            (model, found.into_state(&tc))
        }
        None => {
            let arch = cfg.base_arch(None);
            let model = BaseModel::new(arch);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let params = model.init_params(&mut rng);
            let state = TrainState::new(params, &tc);
            (model, state)
        }
    };
    let rows = train_base(&model, &mut state, &corpus, CondSource::Descriptor, &schedule, &tc)?;
    std::fs::write(out.with_extension("metrics.csv"), metrics_csv(&rows))
        .context("writing metrics csv")?;
    let snap = Checkpoint::from_state(ArchBlock::Base(model.arch.clone()), schedule_spec, &state);
    ckpt::save(&snap, out)?;
    println!(
        "pretrained to step {}; final loss {:.4}; saved {}",
        state.step,
        rows.last().map(|r| r.loss_simple).unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn cmd_finetune(
    cfg: &RunConfig,
    task: TaskKind,
    stage: u8,
    input: &Path,
    data_dir: &Path,
    out: &Path,
    steps: Option<usize>,
) -> Result<()> {
    let seed = cfg.require_seed()?;
    write_resolved_config(cfg, &out_dir_of(out))?;
    let corpus = data::dataset_read(&data_dir.join(task.name()))?;
    let (_, found) = load_base(input)?;
    let schedule_spec = found.schedule;
    let schedule = schedule_spec.build()?;

    let stage_kind = match stage {
        1 => Stage::Finetune1,
        2 => Stage::Finetune2,
        other => bail!("stage must be 1 or 2, got {other}"),
    };
    let mut tc = cfg.train_config(stage_kind, seed);
    if let Some(s) = steps {
        tc.max_steps = s;
    }

    let ArchBlock::Base(mut arch) = found.arch.clone() else {
        unreachable!()
    };
    match (stage_kind, arch.task) {
        (Stage::Finetune1, None) => {}
        (Stage::Finetune1, Some(t)) => bail!(
            "stage 1 expects a pretrained checkpoint without a task head, found one for '{}'",
            t.name()
        ),
        (Stage::Finetune2, Some(t)) if t == task => {}
        (Stage::Finetune2, Some(t)) => bail!(
            "stage 2 checkpoint was finetuned for '{}', not '{}'",
            t.name(),
            task.name()
        ),
        (Stage::Finetune2, None) => bail!(
            "stage 2 requires a stage-1 checkpoint for '{}'; run finetune --stage 1 first",
            task.name()
        ),
        _ => unreachable!(),
    }

    // Finetuning always continues from the EMA weights.
    let mut params = found.ema_params();
    if stage_kind == Stage::Finetune1 {
        arch.task = Some(task);
        let model = BaseModel::new(arch.clone());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x4845_4144);
        model
            .head
            .as_ref()
            .expect("stage-1 arch has a head")
            .init(&mut params, &mut rng);
    }
    let model = BaseModel::new(arch.clone());
    let mut state = TrainState::new(params, &tc);
    let rows = train_base(&model, &mut state, &corpus, CondSource::Task(task), &schedule, &tc)?;
    std::fs::write(out.with_extension("metrics.csv"), metrics_csv(&rows))
        .context("writing metrics csv")?;
    let snap = Checkpoint::from_state(ArchBlock::Base(arch), schedule_spec, &state);
    ckpt::save(&snap, out)?;
    println!(
        "stage-{stage} finetune of '{}' done at step {}; final loss {:.4}; saved {}",
        task.name(),
        state.step,
        rows.last().map(|r| r.loss_simple).unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn load_extractor(path: &Path) -> Result<(FeatureExtractor, shapediff_core::nn::ParamSet)> {
    let found = ckpt::load(path)?;
    match &found.arch {
        ArchBlock::Extractor(arch) => Ok((FeatureExtractor::new(arch), found.params)),
        other => bail!(
            "{} holds a '{}' checkpoint, expected the feature extractor",
            path.display(),
            other.kind()
        ),
    }
}

fn cmd_train_upsampler(
    cfg: &RunConfig,
    data_dir: &Path,
    out: &Path,
    extractor: Option<&Path>,
    resume: Option<&Path>,
    steps: Option<usize>,
) -> Result<()> {
    let seed = cfg.require_seed()?;
    write_resolved_config(cfg, &out_dir_of(out))?;
    let corpus = data::dataset_read(&data_dir.join("pretext"))?;
    let schedule_spec = cfg.schedule_spec();
    let schedule = schedule_spec.build()?;
    let mut tc = cfg.train_config(Stage::Upsampler, seed);
    if let Some(s) = steps {
        tc.max_steps = s;
    }

    let fx_loaded = extractor.map(load_extractor).transpose()?;
    if tc.lambda_perc > 0.0 && fx_loaded.is_none() {
        bail!("train.lambda_perc > 0 requires --extractor with the frozen feature checkpoint");
    }

    let arch = cfg.upsampler_arch();
    let unet = UNet::new("unet", arch.clone());
    let disc = Discriminator::new(&[16, 32, 64], 32);

    let (mut state, mut disc_state) = match resume {
        Some(p) => {
            let found = ckpt::load(p)?;
            let ArchBlock::Upsampler { .. } = &found.arch else {
                bail!("{} is not an upsampler checkpoint", p.display());
            };
            let state = found.into_state(&tc);
            let disc_path = p.with_extension("disc");
            let ds = if disc_path.exists() {
                let dfound = ckpt::load(&disc_path)?;
                let mut opt = AdamW::new(&dfound.params, tc.learning_rate, tc.weight_decay);
                if let Some((m, v, st)) = dfound.opt {
                    opt.restore_moments(m, v, st);
                }
                Some((dfound.params, opt))
            } else {
                None
            };
            (state, ds)
        }
        None => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut params = shapediff_core::nn::ParamSet::new();
            unet.init_params(&mut params, &mut rng);
            let state = TrainState::new(params, &tc);
            let ds = (tc.lambda_adv > 0.0).then(|| {
                let mut d_ps = shapediff_core::nn::ParamSet::new();
                disc.init_params(&mut d_ps, &mut rng);
                let d_opt = AdamW::new(&d_ps, tc.learning_rate, tc.weight_decay);
                (d_ps, d_opt)
            });
            (state, ds)
        }
    };

    let degradation = cfg.degradation();
    let rows = train_upsampler(
        &unet,
        &mut state,
        &disc,
        &mut disc_state,
        fx_loaded.as_ref().map(|(fx, ps)| (fx, ps)),
        &corpus,
        &schedule,
        &tc,
        degradation.as_ref(),
    )?;
    std::fs::write(out.with_extension("metrics.csv"), metrics_csv(&rows))
        .context("writing metrics csv")?;
    let snap = Checkpoint::from_state(ArchBlock::Upsampler { unet: arch }, schedule_spec, &state);
    ckpt::save(&snap, out)?;
    if let Some((d_ps, d_opt)) = &disc_state {
        let (m, v) = d_opt.moments();
        let dsnap = Checkpoint {
            arch: ArchBlock::Discriminator {
                widths: disc.widths.clone(),
                input_hw: disc.input_hw,
            },
            schedule: schedule_spec,
            step: state.step,
            params: d_ps.clone(),
            ema: EmaSet::from_params(d_ps),
            opt: Some((m.to_vec(), v.to_vec(), d_opt.step_count)),
            rng: None,
        };
        ckpt::save(&dsnap, &out.with_extension("disc"))?;
    }
    println!(
        "upsampler trained to step {}; final simple loss {:.4}; saved {}",
        state.step,
        rows.last().map(|r| r.loss_simple).unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

/// Conditions for the first `n` samples of a split, matching the model task.
fn conditions_for(model: &BaseModel, samples: &[data::Sample], n: usize) -> Vec<Condition> {
    samples
        .iter()
        .take(n)
        .map(|s| match model.arch.task {
            Some(t) => s.condition(t),
            None => s.descriptor_condition(),
        })
        .collect()
}

#[derive(serde::Serialize)]
struct SampleSidecar<'a> {
    mode: &'a str,
    w: f64,
    axes: &'a str,
    sampler: &'a str,
    steps_base: usize,
    steps_upsampler: Option<usize>,
    seed: u64,
    index: usize,
    checkpoint: String,
    upsampler_checkpoint: Option<String>,
    condition_source: String,
}

fn axes_name(a: StatAxes) -> &'static str {
    match a {
        StatAxes::PerSample => "per-sample",
        StatAxes::PerChannel => "per-channel",
    }
}

fn cmd_sample(
    cfg: &RunConfig,
    ckpt_path: &Path,
    upsampler: Option<&Path>,
    source: &Path,
    out: &Path,
) -> Result<()> {
    let seed = cfg.require_seed()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_resolved_config(cfg, out)?;
    let (model, found) = load_base(ckpt_path)?;
    let schedule = found.schedule.build()?;
    let samples = data::dataset_read(source)?;
    let n = cfg.sample_n.min(samples.len());
    if n == 0 {
        bail!("condition source {} is empty", source.display());
    }
    let conditions = conditions_for(&model, &samples, n);
    let plan = respace(&schedule, cfg.sample_steps_base)?;
    let scfg = SamplerConfig {
        guidance: cfg.guidance_base(),
        kind: cfg.sample_kind,
        clip_x0: true,
    };
    let ema = found.ema_params();
    let imgs = sample_base(&model, &ema, &conditions, &schedule, &plan, &scfg, seed)?;

    let (final_imgs, up_steps) = match upsampler {
        Some(up_path) => {
            let up_found = ckpt::load(up_path)?;
            let ArchBlock::Upsampler { unet: up_arch } = &up_found.arch else {
                bail!("{} is not an upsampler checkpoint", up_path.display());
            };
            let up_unet = UNet::new("unet", up_arch.clone());
            let up_schedule = up_found.schedule.build()?;
            let up_plan = respace(&up_schedule, cfg.sample_steps_upsampler)?;
            let up_cfg = SamplerConfig {
                guidance: cfg.guidance_upsampler(),
                kind: cfg.sample_kind,
                clip_x0: true,
            };
            let up_ema = up_found.ema_params();
            let hi = sample_cascade(
                &up_unet,
                &up_ema,
                &imgs,
                None,
                &up_schedule,
                &up_plan,
                &up_cfg,
                seed ^ 0x5550_0000,
            )?;
            (hi, Some(cfg.sample_steps_upsampler))
        }
        None => (imgs, None),
    };

    for i in 0..n {
        let img = final_imgs.index_axis(ndarray::Axis(0), i).to_owned().into_dyn();
        data::write_ppm(&out.join(format!("sample_{i:03}.ppm")), &img)?;
        let sidecar = SampleSidecar {
            mode: scfg.guidance.mode.name(),
            w: scfg.guidance.w,
            axes: axes_name(scfg.guidance.axes),
            sampler: scfg.kind.name(),
            steps_base: cfg.sample_steps_base,
            steps_upsampler: up_steps,
            seed,
            index: i,
            checkpoint: ckpt_path.display().to_string(),
            upsampler_checkpoint: upsampler.map(|p| p.display().to_string()),
            condition_source: source.display().to_string(),
        };
        std::fs::write(
            out.join(format!("sample_{i:03}.meta.json")),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
    }
    data::write_ppm(&out.join("montage.ppm"), &montage(&final_imgs, 8))?;
    println!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    ckpts: &[PathBuf],
    upsampler: Option<&Path>,
    extractor: &Path,
    data_dir: &Path,
    out: &Path,
) -> Result<()> {
    let seed = cfg.require_seed()?;
    write_resolved_config(cfg, &out_dir_of(out))?;
    let (fx, fx_ps) = load_extractor(extractor)?;
    let samples = data::dataset_read(data_dir)?;
    if samples.is_empty() {
        bail!("test split {} is empty", data_dir.display());
    }
    let n = cfg.eval_fid_samples.min(samples.len());
    let mut real = ndarray::ArrayD::<f32>::zeros(ndarray::IxDyn(&[samples.len(), 3, 32, 32]));
    for (i, s) in samples.iter().enumerate() {
        real.index_axis_mut(ndarray::Axis(0), i).assign(&s.image);
    }

    let up_loaded = match upsampler {
        Some(p) => {
            let found = ckpt::load(p)?;
            let ArchBlock::Upsampler { unet: arch } = &found.arch else {
                bail!("{} is not an upsampler checkpoint", p.display());
            };
            Some((UNet::new("unet", arch.clone()), found))
        }
        None => None,
    };

    let split_name = data_dir
        .file_name()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "test".into());
    let mut records: Vec<MetricRecord> = Vec::new();
    for ckpt_path in ckpts {
        let (model, found) = load_base(ckpt_path)?;
        let schedule = found.schedule.build()?;
        let plan = respace(&schedule, cfg.sample_steps_base)?;
        let scfg = SamplerConfig {
            guidance: cfg.guidance_base(),
            kind: cfg.sample_kind,
            clip_x0: true,
        };
        let ema = found.ema_params();
        let conditions = conditions_for(&model, &samples, n);
        let mut imgs = sample_base(&model, &ema, &conditions, &schedule, &plan, &scfg, seed)?;
        if let Some((up_unet, up_found)) = &up_loaded {
            let up_schedule = up_found.schedule.build()?;
            let up_plan = respace(&up_schedule, cfg.sample_steps_upsampler)?;
            let up_cfg = SamplerConfig {
                guidance: cfg.guidance_upsampler(),
                kind: cfg.sample_kind,
                clip_x0: true,
            };
            let up_ema = up_found.ema_params();
            imgs = sample_cascade(
                up_unet,
                &up_ema,
                &imgs,
                None,
                &up_schedule,
                &up_plan,
                &up_cfg,
                seed ^ 0x5550_0000,
            )?;
        }
        let name = ckpt_path
            .file_name()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| ckpt_path.display().to_string());
        let fid = toy_fid(&fx, &fx_ps, &imgs, &real)?;
        records.push(MetricRecord {
            metric: "toy_fid".into(),
            model: name.clone(),
            split: split_name.clone(),
            value: fid.distance,
            seed,
        });
        if model.arch.task == Some(TaskKind::Mask) {
            let iou: f64 = imgs
                .axis_iter(ndarray::Axis(0))
                .zip(samples.iter())
                .map(|(im, s)| mask_alignment(&im.to_owned().into_dyn(), &s.mask))
                .sum::<f64>()
                / n as f64;
            records.push(MetricRecord {
                metric: "mask_iou".into(),
                model: name.clone(),
                split: split_name.clone(),
                value: iou,
                seed,
            });
        }
        let sat: f64 = imgs
            .axis_iter(ndarray::Axis(0))
            .map(|im| saturation_metrics(&im.to_owned().into_dyn()).clipped_fraction)
            .sum::<f64>()
            / n as f64;
        records.push(MetricRecord {
            metric: "clipped_fraction".into(),
            model: name,
            split: split_name.clone(),
            value: sat,
            seed,
        });
    }
    std::fs::write(out, metrics_to_csv(&records)).context("writing metrics csv")?;
    println!("metric,model,split,value");
    for r in &records {
        println!("{},{},{},{:.4}", r.metric, r.model, r.split, r.value);
    }
    Ok(())
}

fn read_condition_file(path: &Path, task: TaskKind) -> Result<Condition> {
    Ok(match task {
        TaskKind::Mask => Condition::Mask(data::read_pgm(path)?),
        TaskKind::Sketch => Condition::Sketch(data::read_pgm(path)?),
        TaskKind::Geometry => {
            let raw = data::read_pgm(path)?;
            Condition::Geometry(raw.mapv(|v| v as f32 / 255.0))
        }
    })
}

fn cmd_edit(
    cfg: &RunConfig,
    ckpt_path: &Path,
    image: &Path,
    old_cond: &Path,
    new_cond: &Path,
    out: &Path,
) -> Result<()> {
    let _ = cfg.require_seed()?;
    if cfg.sample_kind != SamplerKind::Ddim {
        bail!(
            "editing requires sample.kind = ddim (got {})",
            cfg.sample_kind.name()
        );
    }
    let (model, found) = load_base(ckpt_path)?;
    let task = model
        .arch
        .task
        .ok_or_else(|| anyhow!("editing needs a task-finetuned checkpoint"))?;
    let schedule = found.schedule.build()?;
    let plan = respace(&schedule, cfg.sample_steps_base)?;
    let img = data::read_ppm(image)?;
    if img.shape() != [3, 16, 16] {
        bail!(
            "edit expects a 16x16 base-resolution image, got {:?}",
            img.shape()
        );
    }
    let ema = found.ema_params();
    let old = model.encode(&ema, &read_condition_file(old_cond, task)?)?;
    let new = model.encode(&ema, &read_condition_file(new_cond, task)?)?;
    let batch = img.insert_axis(ndarray::Axis(0));
    let cfg2 = SamplerConfig {
        guidance: GuidanceConfig {
            mode: GuidanceMode::Plain,
            w: 0.0,
            axes: cfg.guidance_axes,
        },
        kind: SamplerKind::Ddim,
        clip_x0: false,
    };
    let edited = edit_op(
        &model.unet,
        &ema,
        &batch,
        &old.tokens,
        &new.tokens,
        &schedule,
        &plan,
        &cfg2,
    )?;
    let result = edited.index_axis(ndarray::Axis(0), 0).to_owned().into_dyn();
    data::write_ppm(out, &result)?;
    println!("edited image written to {}", out.display());
    Ok(())
}
