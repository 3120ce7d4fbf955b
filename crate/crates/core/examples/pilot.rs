// Calibration scratchpad: times the training loops and eyeballs learning
// trends at candidate acceptance-scale budgets.

use shapediff_core::data::generate_corpus;
use shapediff_core::guidance::{sample_base, GuidanceConfig, GuidanceMode, SamplerConfig, StatAxes};
use shapediff_core::models::{
    BaseArch, BaseModel, Condition, ExtractorArch, FeatureExtractor, TaskKind, TokenSpec, UNetArch,
};
use shapediff_core::nn::ParamSet;
use shapediff_core::schedules::{make_linear_schedule, respace};
use shapediff_core::training::{
    train_base, train_extractor, CondSource, Stage, TrainConfig, TrainState,
};
use shapediff_core::eval::{mask_alignment, toy_fid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn arch(task: Option<TaskKind>) -> BaseArch {
    BaseArch {
        unet: UNetArch {
            in_ch: 3,
            out_ch: 3,
            resolution: 16,
            widths: vec![16, 32, 64],
            temb_dim: 64,
            groups: 8,
            attn_dim: 16,
            tokens: Some(TokenSpec { k: 4, d: 32 }),
        },
        desc_dim: shapediff_core::data::DESCRIPTOR_DIM,
        head_widths: vec![16, 32, 32],
        cond_hw: 32,
        task,
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("speed");

    let schedule = make_linear_schedule(120, 1e-4, 0.02).unwrap();
    let t0 = Instant::now();
    let pretext = generate_corpus(0, 2000);
    println!("corpus 2000 in {:?}", t0.elapsed());

    match mode {
        "speed" => {
            let model = BaseModel::new(arch(None));
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let params = model.init_params(&mut rng);
            println!("base params: {}", params.num_scalars());
            for &bs in &[8usize, 16] {
                let cfg = TrainConfig {
                    batch_size: bs,
                    max_steps: 20,
                    seed: 1,
                    ..TrainConfig::default_for(Stage::Pretrain)
                };
                let mut state = TrainState::new(params.clone(), &cfg);
                let t = Instant::now();
                train_base(&model, &mut state, &pretext, CondSource::Descriptor, &schedule, &cfg)
                    .unwrap();
                let dt = t.elapsed().as_secs_f64() / 20.0;
                println!("batch {bs}: {dt:.3} s/step -> {:.0} steps/min", 60.0 / dt);
            }
        }
        "learn" => {
            let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(600);
            let model = BaseModel::new(arch(None));
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let params = model.init_params(&mut rng);
            let cfg = TrainConfig {
                batch_size: 16,
                max_steps: steps,
                learning_rate: 3e-4,
                seed: 1,
                ..TrainConfig::default_for(Stage::Pretrain)
            };
            let mut state = TrainState::new(params, &cfg);
            let t = Instant::now();
            let rows =
                train_base(&model, &mut state, &pretext, CondSource::Descriptor, &schedule, &cfg)
                    .unwrap();
            println!("pretrain {steps} steps in {:?}", t.elapsed());
            for chunk in rows.chunks(steps / 10) {
                let avg: f64 =
                    chunk.iter().map(|r| r.loss_simple).sum::<f64>() / chunk.len() as f64;
                println!("  step {:5}: loss {:.4}", chunk.last().unwrap().step, avg);
            }

            // Extractor.
            let fx_arch = ExtractorArch {
                widths: vec![16, 32, 64],
                input_hw: 32,
                groups: 4,
                num_classes: 4,
            };
            let fx = FeatureExtractor::new(&fx_arch);
            let mut fx_rng = ChaCha8Rng::seed_from_u64(2);
            let mut fx_ps = ParamSet::new();
            fx.init_params(&mut fx_ps, &mut fx_rng);
            let fx_cfg = TrainConfig {
                batch_size: 32,
                max_steps: 400,
                learning_rate: 1e-3,
                seed: 2,
                ..TrainConfig::default_for(Stage::Pretrain)
            };
            let mut fx_state = TrainState::new(fx_ps, &fx_cfg);
            let t = Instant::now();
            let fxr = train_extractor(&fx, &mut fx_state, &pretext, &fx_cfg).unwrap();
            println!(
                "extractor 400 steps in {:?}; loss {:.4} -> {:.4}",
                t.elapsed(),
                fxr[0].loss_simple,
                fxr.last().unwrap().loss_simple
            );
            let fx_ps = fx_state.ema_params();

            // Sample with the EMA weights, plain mode.
            let ema = state.ema_params();
            let plan = respace(&schedule, 40).unwrap();
            let test = generate_corpus(4_000_000, 96);
            let conds: Vec<Condition> =
                test.iter().map(|s| s.descriptor_condition()).collect();
            let t = Instant::now();
            let imgs = sample_base(
                &model,
                &ema,
                &conds,
                &schedule,
                &plan,
                &SamplerConfig::ddpm(GuidanceConfig::plain()),
                77,
            )
            .unwrap();
            println!("sampled 96 imgs x 40 steps in {:?}", t.elapsed());
            let mut real = ndarray::ArrayD::<f32>::zeros(ndarray::IxDyn(&[96, 3, 32, 32]));
            for (i, s) in test.iter().enumerate() {
                real.index_axis_mut(ndarray::Axis(0), i).assign(&s.image);
            }
            let fid = toy_fid(&fx, &fx_ps, &imgs, &real).unwrap();
            println!("toy-FID(sampled vs real) = {:.3}", fid.distance);

            // Reference scales.
            let real2 = {
                let t2 = generate_corpus(5_000_000, 96);
                let mut r = ndarray::ArrayD::<f32>::zeros(ndarray::IxDyn(&[96, 3, 32, 32]));
                for (i, s) in t2.iter().enumerate() {
                    r.index_axis_mut(ndarray::Axis(0), i).assign(&s.image);
                }
                r
            };
            let fid_rr = toy_fid(&fx, &fx_ps, &real2, &real).unwrap();
            println!("toy-FID(real vs real) = {:.3}", fid_rr.distance);
            let noise = shapediff_core::nn::randn(
                &[96, 3, 32, 32],
                0.5,
                &mut ChaCha8Rng::seed_from_u64(9),
            );
            let fid_nr = toy_fid(&fx, &fx_ps, &noise, &real).unwrap();
            println!("toy-FID(noise vs real) = {:.3}", fid_nr.distance);

            let iou: f64 = imgs
                .axis_iter(ndarray::Axis(0))
                .zip(test.iter())
                .map(|(im, s)| mask_alignment(&im.to_owned().into_dyn(), &s.mask))
                .sum::<f64>()
                / 96.0;
            println!("mean IoU of plain samples vs test masks = {iou:.3} (should be low)");
        }
        "transfer" => {
            // Criterion 7/8 style protocol at candidate budgets.
            let pre_steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(800);
            let ft_steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(300);
            let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1);

            // Shared: extractor.
            let fx_arch = ExtractorArch {
                widths: vec![16, 32, 64],
                input_hw: 32,
                groups: 4,
                num_classes: 4,
            };
            let fx = FeatureExtractor::new(&fx_arch);
            let mut fx_rng = ChaCha8Rng::seed_from_u64(2);
            let mut fx_ps0 = ParamSet::new();
            fx.init_params(&mut fx_ps0, &mut fx_rng);
            let fx_cfg = TrainConfig {
                batch_size: 32,
                max_steps: 400,
                learning_rate: 1e-3,
                seed: 2,
                ..TrainConfig::default_for(Stage::Pretrain)
            };
            let mut fx_state = TrainState::new(fx_ps0, &fx_cfg);
            train_extractor(&fx, &mut fx_state, &pretext, &fx_cfg).unwrap();
            let fx_ps = fx_state.ema_params();

            // Shared: pretrained checkpoint (descriptor conditioning).
            let model_pre = BaseModel::new(arch(None));
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let params0 = model_pre.init_params(&mut rng);
            let pre_cfg = TrainConfig {
                batch_size: 16,
                max_steps: pre_steps,
                learning_rate: 3e-4,
                seed: 10,
                ..TrainConfig::default_for(Stage::Pretrain)
            };
            let t = Instant::now();
            let mut pre_state = TrainState::new(params0, &pre_cfg);
            let rows = train_base(
                &model_pre,
                &mut pre_state,
                &pretext,
                CondSource::Descriptor,
                &schedule,
                &pre_cfg,
            )
            .unwrap();
            println!(
                "pretrain {pre_steps} steps in {:?}, final loss {:.4}",
                t.elapsed(),
                rows.last().unwrap().loss_simple
            );

            // Downstream data: 512 mask-conditioned samples.
            let downstream = generate_corpus(1_000_000, 512);
            let test = generate_corpus(4_000_000, 96);
            let mut real = ndarray::ArrayD::<f32>::zeros(ndarray::IxDyn(&[96, 3, 32, 32]));
            for (i, s) in test.iter().enumerate() {
                real.index_axis_mut(ndarray::Axis(0), i).assign(&s.image);
            }
            let conds: Vec<Condition> = test.iter().map(|s| s.condition(TaskKind::Mask)).collect();
            let plan = respace(&schedule, 40).unwrap();

            let eval_arm = |name: &str, model: &BaseModel, ps: &ParamSet| {
                let imgs = sample_base(
                    model,
                    ps,
                    &conds,
                    &schedule,
                    &plan,
                    &SamplerConfig::ddpm(GuidanceConfig::plain()),
                    777,
                )
                .unwrap();
                let fid = toy_fid(&fx, &fx_ps, &imgs, &real).unwrap().distance;
                let iou: f64 = imgs
                    .axis_iter(ndarray::Axis(0))
                    .zip(test.iter())
                    .map(|(im, s)| mask_alignment(&im.to_owned().into_dyn(), &s.mask))
                    .sum::<f64>()
                    / 96.0;
                println!("  {name}: toy-FID {fid:.3}, IoU {iou:.3}");
                (fid, iou)
            };

            // Arm A: pretrained + two-stage.
            let t = Instant::now();
            let model_ft = BaseModel::new(arch(Some(TaskKind::Mask)));
            let mut ft_params = pre_state.ema_params();
            let mut head_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
            model_ft.head.as_ref().unwrap().init(&mut ft_params, &mut head_rng);
            let s1_cfg = TrainConfig {
                batch_size: 16,
                max_steps: ft_steps / 2,
                learning_rate: 5e-4,
                stage: Stage::Finetune1,
                seed,
                ..TrainConfig::default_for(Stage::Finetune1)
            };
            let mut s1 = TrainState::new(ft_params, &s1_cfg);
            train_base(&model_ft, &mut s1, &downstream, CondSource::Task(TaskKind::Mask), &schedule, &s1_cfg).unwrap();
            let fixed_decoder_ps = s1.ema_params();
            let s2_cfg = TrainConfig {
                batch_size: 16,
                max_steps: ft_steps - ft_steps / 2,
                learning_rate: 2e-4,
                stage: Stage::Finetune2,
                seed: seed + 1,
                ..TrainConfig::default_for(Stage::Finetune2)
            };
            let mut s2 = TrainState::new(s1.params.clone(), &s2_cfg);
            s2.ema = s1.ema.clone();
            train_base(&model_ft, &mut s2, &downstream, CondSource::Task(TaskKind::Mask), &schedule, &s2_cfg).unwrap();
            println!("two-stage finetune in {:?}", t.elapsed());
            let two_ps = s2.ema_params();
            eval_arm("two-stage ", &model_ft, &two_ps);

            // Arm B: one-stage joint from the pretrained decoder.
            let mut onep = pre_state.ema_params();
            let mut head_rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
            model_ft.head.as_ref().unwrap().init(&mut onep, &mut head_rng2);
            let one_cfg = TrainConfig {
                batch_size: 16,
                max_steps: ft_steps,
                learning_rate: 2e-4,
                stage: Stage::Finetune2,
                seed,
                ..TrainConfig::default_for(Stage::Finetune2)
            };
            let mut one = TrainState::new(onep, &one_cfg);
            train_base(&model_ft, &mut one, &downstream, CondSource::Task(TaskKind::Mask), &schedule, &one_cfg).unwrap();
            let one_ps = one.ema_params();
            eval_arm("one-stage ", &model_ft, &one_ps);

            // Arm C: fixed decoder only (stage-1 for the full budget).
            eval_arm("fixed-dec ", &model_ft, &fixed_decoder_ps);

            // Arm D: from scratch (random init, joint).
            let mut scr_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca7);
            let scr_params = model_ft.init_params(&mut scr_rng);
            let scr_cfg = TrainConfig {
                batch_size: 16,
                max_steps: ft_steps,
                learning_rate: 3e-4,
                stage: Stage::Finetune2,
                seed,
                ..TrainConfig::default_for(Stage::Finetune2)
            };
            let mut scr = TrainState::new(scr_params, &scr_cfg);
            train_base(&model_ft, &mut scr, &downstream, CondSource::Task(TaskKind::Mask), &schedule, &scr_cfg).unwrap();
            let scr_ps = scr.ema_params();
            eval_arm("scratch   ", &model_ft, &scr_ps);
        }
        "bind" => {
            // Does mask conditioning bind at all with enough budget?
            let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3000);
            let k: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(8);
            let d: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(64);
            let mut a = arch(Some(TaskKind::Mask));
            a.unet.tokens = Some(TokenSpec { k, d });
            a.unet.attn_dim = 32;
            let model = BaseModel::new(a);
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let params = model.init_params(&mut rng);
            let corpus = generate_corpus(1_000_000, 2000);
            let cfg = TrainConfig {
                batch_size: 16,
                max_steps: steps,
                learning_rate: 3e-4,
                stage: Stage::Finetune2,
                seed: 5,
                ..TrainConfig::default_for(Stage::Finetune2)
            };
            let mut state = TrainState::new(params, &cfg);
            let t = Instant::now();
            let rows = train_base(
                &model,
                &mut state,
                &corpus,
                CondSource::Task(TaskKind::Mask),
                &schedule,
                &cfg,
            )
            .unwrap();
            println!(
                "scratch mask training {steps} steps in {:?}; loss {:.4} -> {:.4}",
                t.elapsed(),
                rows[0].loss_simple,
                rows.last().unwrap().loss_simple
            );
            let ema = state.ema_params();

            // Token sensitivity: same x_t, two different masks.
            let test = generate_corpus(4_000_000, 64);
            let ca = model.encode(&ema, &test[0].condition(TaskKind::Mask)).unwrap();
            let cb = model.encode(&ema, &test[1].condition(TaskKind::Mask)).unwrap();
            let tok_l2 = (&ca.tokens - &cb.tokens)
                .mapv(|v| (v * v) as f64)
                .sum()
                .sqrt();
            let x = shapediff_core::nn::randn(&[1, 3, 16, 16], 1.0, &mut rng);
            let ta = ca.tokens.clone().insert_axis(ndarray::Axis(0));
            let tb = cb.tokens.clone().insert_axis(ndarray::Axis(0));
            let ea = shapediff_core::models::denoise(&model.unet, &ema, &x, &[60], Some(&ta), None)
                .unwrap();
            let eb = shapediff_core::models::denoise(&model.unet, &ema, &x, &[60], Some(&tb), None)
                .unwrap();
            let eps_l2 = (&ea - &eb).mapv(|v| (v * v) as f64).sum().sqrt();
            let eps_norm = ea.mapv(|v| (v * v) as f64).sum().sqrt();
            println!("token L2 {tok_l2:.4}; eps diff L2 {eps_l2:.4} (pred norm {eps_norm:.4})");

            let conds: Vec<Condition> = test.iter().map(|s| s.condition(TaskKind::Mask)).collect();
            let plan = respace(&schedule, 40).unwrap();
            for (label, mode, w) in [
                ("plain", GuidanceMode::Plain, 0.0),
                ("cf w=2", GuidanceMode::Cf, 2.0),
            ] {
                let imgs = sample_base(
                    &model,
                    &ema,
                    &conds,
                    &schedule,
                    &plan,
                    &SamplerConfig::ddpm(GuidanceConfig {
                        mode,
                        w,
                        axes: StatAxes::PerSample,
                    }),
                    123,
                )
                .unwrap();
                let iou: f64 = imgs
                    .axis_iter(ndarray::Axis(0))
                    .zip(test.iter())
                    .map(|(im, s)| mask_alignment(&im.to_owned().into_dyn(), &s.mask))
                    .sum::<f64>()
                    / 64.0;
                println!("  IoU({label}) = {iou:.3}");
            }
        }
        other => eprintln!("unknown pilot mode {other}"),
    }
}
