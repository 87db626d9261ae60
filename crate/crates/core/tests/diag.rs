//! Temporary diagnostics (not part of the suite).

use ndarray::Axis;
use semvid_core::config::{EvalConfig, ExperimentConfig, PcaConfig};
use semvid_core::pipeline;
use semvid_core::stage1::{train_stage1, Forecaster, ForecasterConfig};
use semvid_core::stage2::edm::{MixedSupervisionPolicy, NestedDropoutPolicy};
use semvid_core::stage2::model::{Denoiser, DenoiserConfig};
use semvid_core::stage2::sample::{GuidanceConfig, SamplerConfig};
use semvid_core::stage2::train::{ConditioningMode, ScheduleKind, Stage2TrainConfig};

fn desk_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.world.height = 32;
    cfg.world.width = 32;
    cfg.world.k = 25;
    cfg.world.num_clips = 400;
    cfg.world.velocity_range = [0.5, 2.0];
    cfg.world.num_shapes = 3;
    cfg.encoder.width = 16;
    cfg.encoder.depth = 4;
    cfg.encoder.tap_layers = vec![2, 4];
    cfg.pca = PcaConfig { c_h: 16 };
    cfg.stage1.model = ForecasterConfig {
        layers: 3,
        model_dim: 96,
        heads: 4,
        n_context: 4,
        mlp_ratio: 2.0,
        smooth_l1_beta: 0.1,
        seed: 0,
    };
    cfg.stage1.train.steps = 20000;
    cfg.stage1.train.lr = 1e-3;
    cfg.stage1.train.warmup_steps = 20;
    cfg.stage1.train.seed = 11;
    cfg.stage2.model = DenoiserConfig {
        layers: 2,
        model_dim: 64,
        heads: 4,
        patch_size: 2,
        adaln_rank: 4,
        cond_freq_dim: 16,
        mlp_ratio: 2.0,
        seed: 0,
    };
    cfg.stage2.train = Stage2TrainConfig {
        steps: 24000,
        lr: 1e-3,
        warmup_steps: 100,
        schedule: ScheduleKind::Cosine,
        seed: 13,
        mode: ConditioningMode::Mixed,
        dropout: NestedDropoutPolicy {
            channel_set: vec![4, 8, 12, 16],
        },
        mixed: MixedSupervisionPolicy::default(),
    };
    cfg.sampler = SamplerConfig {
        num_steps: 6,
        sigma_max: 200.0,
        sigma_mid: Some(0.9),
        seed: 17,
        ..SamplerConfig::default()
    };
    cfg.guidance = GuidanceConfig {
        weight: 0.5,
        coarse_channels: 8,
    };
    cfg.eval = EvalConfig {
        m_context: 17,
        runs: 3,
    };
    cfg.validate().unwrap();
    cfg
}

fn cache_tag(cfg: &ExperimentConfig) -> String {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    cfg.to_toml_string().unwrap().hash(&mut h);
    format!("{:016x}", h.finish())
}

#[test]
fn diagnose() {
    let cfg = desk_config();
    let prepared = pipeline::prepare(&cfg).unwrap();
    let tag = cache_tag(&cfg);
    let cache = std::path::PathBuf::from("/tmp/diag_cache");
    std::fs::create_dir_all(&cache).unwrap();

    let (_, h, w, c) = prepared.features[0].dim();
    let s1_path = cache.join(format!("s1_{tag}.ckpt"));
    let stage1 = if s1_path.exists() {
        eprintln!("loading cached stage1 ...");
        semvid_core::stage1::load_forecaster(&s1_path, None).unwrap()
    } else {
        let mut m = Forecaster::new(cfg.stage1.model.clone(), h, w, c).unwrap();
        train_stage1(&mut m, &prepared.train_features(), &cfg.stage1.train, |_| {}).unwrap();
        semvid_core::stage1::save_forecaster(&s1_path, &m, "diag").unwrap();
        m
    };
    let n_ctx = pipeline::context_latent_frames(&cfg).unwrap();
    let examples =
        pipeline::stage2_examples(&prepared, &stage1, &prepared.train_idx, n_ctx).unwrap();
    let probe_head = pipeline::train_pipeline_probe(&cfg, &prepared).unwrap();

    // forecast feature quality: probe mIoU on GT vs forecast features, val clips
    {
        use semvid_core::evalsuite::{downsample_masks, miou};
        use semvid_core::features::subsample_indices;
        let anchors = subsample_indices(cfg.world.k, cfg.codec.temporal_factor);
        for &i in prepared.val_idx.iter().take(3).chain(prepared.train_idx.iter().take(3)) {
            let gt_feats = &prepared.features[i];
            let fc = pipeline::forecast_feature_stack(&stage1, gt_feats, n_ctx).unwrap();
            let gt_masks = prepared.clips[i].masks.select(Axis(0), &anchors);
            let gt = downsample_masks(&gt_masks, cfg.encoder.patch_size).unwrap();
            let (_, m_gt) = miou(&probe_head.predict_masks(gt_feats).unwrap(), &gt, None).unwrap();
            let (_, m_fc) = miou(&probe_head.predict_masks(&fc).unwrap(), &gt, None).unwrap();
            // per-future-anchor comparison (rollout error compounding)
            let pred_fc = probe_head.predict_masks(&fc).unwrap();
            let pred_gt = probe_head.predict_masks(gt_feats).unwrap();
            let mut per_step = String::new();
            for t in n_ctx..gt_feats.dim().0 {
                let sel = [t];
                let gt_t = gt.select(Axis(0), &sel);
                let (_, a) = miou(&pred_gt.select(Axis(0), &sel), &gt_t, None).unwrap();
                let (_, b) = miou(&pred_fc.select(Axis(0), &sel), &gt_t, None).unwrap();
                per_step += &format!(" t{t}: gt {a:.3} fc {b:.3};");
            }
            eprintln!("clip {i}: all-frames gt {m_gt:.4} forecast {m_fc:.4};{per_step}");
            // amplitude shrinkage + copy-last semantic baseline at the first
            // future anchor
            let t0 = n_ctx;
            let std_of = |a: &ndarray::Array3<f32>| -> f64 {
                let n = a.len() as f64;
                let mean = a.iter().map(|&v| v as f64).sum::<f64>() / n;
                (a.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
            };
            let gt_t0 = gt_feats.index_axis(Axis(0), t0).to_owned();
            let fc_t0 = fc.index_axis(Axis(0), t0).to_owned();
            let (s_gt, s_fc) = (std_of(&gt_t0), std_of(&fc_t0));
            // copy-last: probe on the last context frame, scored vs t0 masks
            let mut copy_stack = gt_feats.clone();
            copy_stack
                .index_axis_mut(Axis(0), t0)
                .assign(&gt_feats.index_axis(Axis(0), n_ctx - 1).to_owned());
            let sel = [t0];
            let gt_t = gt.select(Axis(0), &sel);
            let (_, m_copy) = miou(
                &probe_head
                    .predict_masks(&copy_stack)
                    .unwrap()
                    .select(Axis(0), &sel),
                &gt_t,
                None,
            )
            .unwrap();
            // variance-matched forecast: rescale fc t0 frame to gt std
            let mut rescaled = fc.clone();
            rescaled
                .index_axis_mut(Axis(0), t0)
                .assign(&fc_t0.mapv(|v| v * (s_gt / s_fc) as f32));
            let (_, m_rs) = miou(
                &probe_head
                    .predict_masks(&rescaled)
                    .unwrap()
                    .select(Axis(0), &sel),
                &gt_t,
                None,
            )
            .unwrap();
            eprintln!(
                "  t{t0}: std gt {s_gt:.3} fc {s_fc:.3}; copy-last mIoU {m_copy:.3}; fc rescaled mIoU {m_rs:.3}"
            );
        }
    }

    if std::env::var("DIAG_FULL").is_err() {
        panic!("diagnostics only (forecast quality)");
    }

    let (t, hh, ww, cz) = prepared.latents[0].dim();
    let arms = [
        ("baseline", ConditioningMode::NoFeatures, true),
        ("mixed", ConditioningMode::Mixed, false),
        ("gt-only", ConditioningMode::GroundTruthOnly, false),
    ];
    let eval_idx: Vec<usize> = prepared.val_idx.iter().copied().take(8).collect();
    let mut models = Vec::new();
    for (name, mode, zero_feats) in arms {
        let path = cache.join(format!("s2_{name}_{tag}.ckpt"));
        let m = if path.exists() {
            eprintln!("loading cached {name} ...");
            semvid_core::stage2::train::load_denoiser(&path, &[]).unwrap().0
        } else {
            let mut m =
                Denoiser::new(cfg.stage2.model.clone(), t, hh, ww, cz, cfg.pca.c_h).unwrap();
            let tc = Stage2TrainConfig {
                mode,
                ..cfg.stage2.train.clone()
            };
            eprintln!("training {name} ...");
            semvid_core::stage2::train::train_stage2(&mut m, &examples, n_ctx, &tc, |_| {})
                .unwrap();
            semvid_core::stage2::train::save_denoiser(&path, &m, mode, &[]).unwrap();
            m
        };
        for run in 0..3u64 {
            let scfg = SamplerConfig {
                seed: cfg.sampler.seed + run,
                ..cfg.sampler.clone()
            };
            let rep = pipeline::evaluate_clips(
                &cfg,
                &prepared,
                &stage1,
                &m,
                &probe_head,
                &eval_idx,
                &scfg,
                Some(&cfg.guidance),
                None,
                zero_feats,
            )
            .unwrap();
            eprintln!(
                "{name} run {run}: mIoU {:.4}, FFD {:.4}, psnr {:.2}",
                rep.miou_all, rep.ffd, rep.psnr_db
            );
        }
        models.push(m);
    }

    // FFD mechanism probe: same trained models, different conditioning at
    // sampling time
    {
        use semvid_core::evalsuite::frechet_feature_distance;
        use semvid_core::features::subsample_indices;
        use semvid_core::stage2::sample::sample_latents;
        let anchors = subsample_indices(cfg.world.k, cfg.codec.temporal_factor);
        let fut: Vec<usize> = anchors[n_ctx..].to_vec();
        let variants: Vec<(&str, &Denoiser, &str, Option<&GuidanceConfig>)> = vec![
            ("baseline zero", &models[0], "zero", None),
            ("mixed fc+guid", &models[1], "fc", Some(&cfg.guidance)),
            ("mixed fc", &models[1], "fc", None),
            ("mixed gt", &models[1], "gt", None),
            ("mixed gt+guid", &models[1], "gt", Some(&cfg.guidance)),
        ];
        for (name, m, feats, guid) in variants {
            let mut pred_rows = Vec::new();
            let mut gt_rows = Vec::new();
            for &ci in &eval_idx {
                let gt_features = &prepared.features[ci];
                let cond = match feats {
                    "zero" => gt_features.mapv(|_| 0.0),
                    "gt" => gt_features.clone(),
                    _ => pipeline::forecast_feature_stack(&stage1, gt_features, n_ctx).unwrap(),
                };
                let ctx_latents = prepared.latents[ci]
                    .slice_axis(Axis(0), ndarray::Slice::from(0..n_ctx))
                    .to_owned();
                let sampled = sample_latents(m, &ctx_latents, &cond, &cfg.sampler, guid).unwrap();
                let decoded =
                    semvid_core::codec::decode(&sampled, cfg.world.k, &prepared.codec).unwrap();
                let pred_anchor = decoded.select(Axis(0), &fut);
                let gt_anchor = prepared.clips[ci].frames.select(Axis(0), &fut);
                pred_rows
                    .push(pipeline::ffd_rows(&prepared.encoder, &prepared.pca, &pred_anchor).unwrap());
                gt_rows
                    .push(pipeline::ffd_rows(&prepared.encoder, &prepared.pca, &gt_anchor).unwrap());
            }
            let concat = |v: &[ndarray::Array2<f64>]| {
                let d = v[0].dim().1;
                let n: usize = v.iter().map(|m| m.dim().0).sum();
                let mut out = ndarray::Array2::<f64>::zeros((n, d));
                let mut row = 0;
                for m in v {
                    out.slice_mut(ndarray::s![row..row + m.dim().0, ..]).assign(m);
                    row += m.dim().0;
                }
                out
            };
            let ffd = frechet_feature_distance(&concat(&pred_rows), &concat(&gt_rows)).unwrap();
            eprintln!("ffd probe {name}: {ffd:.4}");
        }
    }
    panic!("diagnostics only");
}
