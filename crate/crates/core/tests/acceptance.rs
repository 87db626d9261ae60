//! Acceptance suite: one pass/fail line per criterion, covering exact
//! numerical identities, distributional properties, gradient correctness,
//! metric oracles, and directional end-to-end comparisons at desk scale.
//! Runs as a plain binary (`harness = false`) so every line always prints.

use std::process::ExitCode;
use std::time::Instant;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use semvid_core::codec::{self, CodecConfig};
use semvid_core::config::{EvalConfig, ExperimentConfig, PcaConfig};
use semvid_core::evalsuite::{frechet_feature_distance, miou, MetricsReport};
use semvid_core::nn::params::seeded_rng;
use semvid_core::pipeline::{self, Prepared};
use semvid_core::stage1::{train_stage1, validation_losses, Forecaster, ForecasterConfig};
use semvid_core::stage2::edm::{
    precondition, sample_noise_level, MixedSupervisionPolicy, NestedDropoutPolicy,
    CONTEXT_C_NOISE,
};
use semvid_core::stage2::model::{
    diffusion_loss_and_grads, diffusion_loss_value, Denoiser, DenoiserConfig,
};
use semvid_core::stage2::sample::{sample_latents, GuidanceConfig, SamplerConfig};
use semvid_core::stage2::train::{
    train_stage2, train_stage2_snapshots, ConditioningMode, ScheduleKind, Stage2Example,
    Stage2TrainConfig,
};

type CheckResult = Result<(), String>;

fn fail(msg: impl Into<String>) -> CheckResult {
    Err(msg.into())
}

// ---------------------------------------------------------------------------
// 1. preconditioning identities
// ---------------------------------------------------------------------------

fn check_preconditioning_identities() -> CheckResult {
    let tol = 1e-12;
    for i in 0..25 {
        let sigma = 10f64.powf(-3.0 + 6.0 * i as f64 / 24.0);
        let p = precondition(sigma, false).map_err(|e| e.to_string())?;
        let t = sigma / (1.0 + sigma);
        for (name, got, want) in [
            ("c_skip", p.c_skip, 1.0 - t),
            ("c_out", p.c_out, -t),
            ("c_in", p.c_in, 1.0 - t),
            ("c_noise", p.c_noise, t),
            ("weight", p.weight, (1.0 + sigma).powi(2) / sigma.powi(2)),
        ] {
            if (got - want).abs() > tol {
                return fail(format!(
                    "sigma={sigma:.6e}: {name} = {got:.17e}, want {want:.17e}"
                ));
            }
        }
        let pc = precondition(sigma, true).map_err(|e| e.to_string())?;
        if pc.c_noise != CONTEXT_C_NOISE {
            return fail(format!(
                "context c_noise = {}, want exactly {CONTEXT_C_NOISE}",
                pc.c_noise
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 2. training noise-level mixture
// ---------------------------------------------------------------------------

fn check_noise_mixture() -> CheckResult {
    let n = 1_000_000usize;
    let mut rng = seeded_rng(2024, 1);
    let mut tail = 0usize;
    let mut main_draws: Vec<f64> = Vec::with_capacity(n);
    for _ in 0..n {
        let s = sample_noise_level(&mut rng);
        if (1.0..200.0).contains(&s) {
            return fail(format!("draw {s} falls in the forbidden gap [1, 200)"));
        }
        if (200.0..=100_000.0).contains(&s) {
            tail += 1;
        } else {
            main_draws.push(s);
        }
    }
    let tail_mass = tail as f64 / n as f64;
    if (tail_mass - 0.05).abs() > 0.002 {
        return fail(format!("tail mass {tail_mass:.5}, want 0.05 +/- 0.002"));
    }
    main_draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = main_draws[main_draws.len() / 2];
    if (median - 0.5).abs() > 0.005 {
        return fail(format!("main-branch median {median:.5}, want 0.5 +/- 0.005"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 3. nested channel dropout
// ---------------------------------------------------------------------------

fn check_nested_dropout() -> CheckResult {
    let policy = NestedDropoutPolicy {
        channel_set: vec![4, 8, 12, 16],
    };
    policy.validate(16).map_err(|e| e.to_string())?;

    // prefix/zero property is exact for every keep count
    let mut rng = seeded_rng(3, 1);
    let feats = Array4::<f32>::from_shape_fn((2, 3, 3, 16), |_| rng.gen::<f32>() - 0.5);
    for &keep in &policy.channel_set {
        let dropped =
            semvid_core::stage2::edm::nested_dropout(&feats, keep).map_err(|e| e.to_string())?;
        for ((t, y, x, c), &got) in dropped.indexed_iter() {
            let want = if c < keep { feats[(t, y, x, c)] } else { 0.0 };
            if got != want {
                return fail(format!("keep={keep}: channel {c} not an exact prefix"));
            }
        }
    }

    // uniformity of the keep-count choice: chi-square, df = 3, p > 0.01
    let n = 80_000usize;
    let mut counts = [0usize; 4];
    let mut rng = seeded_rng(3, 2);
    for _ in 0..n {
        let keep = policy.sample_keep(&mut rng);
        let idx = policy.channel_set.iter().position(|&c| c == keep).unwrap();
        counts[idx] += 1;
    }
    let expected = n as f64 / 4.0;
    let stat: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // chi-square critical value at p = 0.01 for 3 degrees of freedom
    if stat >= 11.3449 {
        return fail(format!(
            "chi-square stat {stat:.3} >= 11.3449 (p <= 0.01), counts {counts:?}"
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 4. latent codec round trip
// ---------------------------------------------------------------------------

fn check_codec_round_trip() -> CheckResult {
    let cfg = CodecConfig::default(); // s = 4, r = 4
    let (k, h, w) = (25usize, 16usize, 16usize);
    let mut rng = seeded_rng(4, 1);
    let mut worst = 0f32;
    for clip in 0..100 {
        let frames = Array4::<f32>::from_shape_fn((k, h, w, 3), |_| rng.gen::<f32>());
        let latents = codec::encode(&frames, &cfg).map_err(|e| e.to_string())?;
        if clip == 0 && latents.dim().0 != 7 {
            return fail(format!(
                "k=25, r=4 must give 7 latent frames, got {}",
                latents.dim().0
            ));
        }
        let back = codec::decode(&latents, k, &cfg).map_err(|e| e.to_string())?;
        for (a, b) in frames.iter().zip(back.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    // and with fitted (non-identity) normalization statistics
    let mut cfg2 = cfg.clone();
    let frames = Array4::<f32>::from_shape_fn((k, h, w, 3), |_| rng.gen::<f32>());
    let lat = codec::encode(&frames, &cfg2).map_err(|e| e.to_string())?;
    let (mean, std) = codec::fit_normalization(&[lat]).map_err(|e| e.to_string())?;
    cfg2.norm_mean = mean;
    cfg2.norm_std = std;
    let lat = codec::encode(&frames, &cfg2).map_err(|e| e.to_string())?;
    let back = codec::decode(&lat, k, &cfg2).map_err(|e| e.to_string())?;
    for (a, b) in frames.iter().zip(back.iter()) {
        worst = worst.max((a - b).abs());
    }
    if worst >= 1e-6 {
        return fail(format!("round-trip max-abs error {worst:.3e} >= 1e-6"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 5. autodiff vs central finite differences
// ---------------------------------------------------------------------------

fn rel_err(a: f64, b: f64) -> f64 {
    // central differences with eps = 1e-5 carry ~1e-11 roundoff noise; treat
    // gradients below that floor as matching when their difference is, too
    if (a - b).abs() < 1e-9 {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn check_gradients() -> CheckResult {
    // stage-1 forecaster loss
    let fcfg = ForecasterConfig {
        layers: 2,
        model_dim: 16,
        heads: 2,
        n_context: 2,
        mlp_ratio: 2.0,
        smooth_l1_beta: 1.0,
        seed: 5,
    };
    let mut model = Forecaster::new(fcfg, 2, 2, 3).map_err(|e| e.to_string())?;
    let mut rng = seeded_rng(5, 1);
    let context = Array4::<f32>::from_shape_fn((2, 2, 2, 3), |_| rng.gen::<f32>() - 0.5);
    let target = Array3::<f32>::from_shape_fn((2, 2, 3), |_| rng.gen::<f32>() - 0.5);
    let (_, grads) = model
        .loss_and_grads(&context, &target)
        .map_err(|e| e.to_string())?;
    let eps = 1e-5;
    let mut worst = 0.0f64;
    let n_params = model.params.values().len();
    for probe in 0..64 {
        let pi = rng.gen_range(0..n_params);
        let len = model.params.values()[pi].len();
        let ei = rng.gen_range(0..len);
        let orig = model.params.values()[pi].as_slice().unwrap()[ei];
        let analytic = grads[pi].as_slice().unwrap()[ei];
        model.params.values_mut()[pi].as_slice_mut().unwrap()[ei] = orig + eps;
        let up = model.loss(&context, &target).map_err(|e| e.to_string())?;
        model.params.values_mut()[pi].as_slice_mut().unwrap()[ei] = orig - eps;
        let dn = model.loss(&context, &target).map_err(|e| e.to_string())?;
        model.params.values_mut()[pi].as_slice_mut().unwrap()[ei] = orig;
        let fd = (up - dn) / (2.0 * eps);
        let e = rel_err(analytic, fd);
        worst = worst.max(e);
        if e >= 1e-4 {
            return fail(format!(
                "forecaster probe {probe}: param {pi}[{ei}] analytic {analytic:.6e} vs fd {fd:.6e} (rel {e:.2e})"
            ));
        }
    }

    // stage-2 diffusion loss
    let dcfg = DenoiserConfig {
        layers: 2,
        model_dim: 24,
        heads: 2,
        patch_size: 1,
        adaln_rank: 2,
        cond_freq_dim: 8,
        mlp_ratio: 2.0,
        seed: 6,
    };
    let mut model = Denoiser::new(dcfg, 3, 2, 2, 4, 3).map_err(|e| e.to_string())?;
    let mut rng = seeded_rng(6, 1);
    let clean = Array4::<f64>::from_shape_fn((3, 2, 2, 4), |_| rng.gen::<f64>() - 0.5);
    let noised = clean.mapv(|v| v + 0.3 * rng.gen::<f64>());
    let features = Array4::<f32>::from_shape_fn((3, 2, 2, 3), |_| rng.gen::<f32>() - 0.5);
    let (sigma, n_ctx) = (0.7, 1usize);
    let (_, grads) = diffusion_loss_and_grads(&model, &noised, &clean, &features, sigma, n_ctx)
        .map_err(|e| e.to_string())?;
    let n_params = model.params.values().len();
    for probe in 0..64 {
        let pi = rng.gen_range(0..n_params);
        let len = model.params.values()[pi].len();
        let ei = rng.gen_range(0..len);
        let orig = model.params.values()[pi].as_slice().unwrap()[ei];
        let analytic = grads[pi].as_slice().unwrap()[ei];
        model.params.values_mut()[pi].as_slice_mut().unwrap()[ei] = orig + eps;
        let up = diffusion_loss_value(&model, &noised, &clean, &features, sigma, n_ctx)
            .map_err(|e| e.to_string())?;
        model.params.values_mut()[pi].as_slice_mut().unwrap()[ei] = orig - eps;
        let dn = diffusion_loss_value(&model, &noised, &clean, &features, sigma, n_ctx)
            .map_err(|e| e.to_string())?;
        model.params.values_mut()[pi].as_slice_mut().unwrap()[ei] = orig;
        let fd = (up - dn) / (2.0 * eps);
        let e = rel_err(analytic, fd);
        worst = worst.max(e);
        if e >= 1e-4 {
            return fail(format!(
                "denoiser probe {probe}: param {pi}[{ei}] analytic {analytic:.6e} vs fd {fd:.6e} (rel {e:.2e})"
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 6. loss locality
// ---------------------------------------------------------------------------

fn check_loss_locality() -> CheckResult {
    // diffusion loss must be bit-invariant to context-frame target values,
    // i.e. its gradient w.r.t. them is exactly zero
    let dcfg = DenoiserConfig {
        layers: 1,
        model_dim: 24,
        heads: 2,
        patch_size: 1,
        adaln_rank: 2,
        cond_freq_dim: 8,
        mlp_ratio: 2.0,
        seed: 7,
    };
    let model = Denoiser::new(dcfg, 3, 2, 2, 4, 3).map_err(|e| e.to_string())?;
    let mut rng = seeded_rng(7, 1);
    let clean = Array4::<f64>::from_shape_fn((3, 2, 2, 4), |_| rng.gen::<f64>() - 0.5);
    let noised = clean.mapv(|v| v + 0.5 * rng.gen::<f64>());
    let features = Array4::<f32>::from_shape_fn((3, 2, 2, 3), |_| rng.gen::<f32>() - 0.5);
    let n_ctx = 1;
    let base = diffusion_loss_value(&model, &noised, &clean, &features, 0.9, n_ctx)
        .map_err(|e| e.to_string())?;
    let mut perturbed = clean.clone();
    for t in 0..n_ctx {
        perturbed
            .index_axis_mut(Axis(0), t)
            .mapv_inplace(|v| v + 123.456);
    }
    let shifted = diffusion_loss_value(&model, &noised, &perturbed, &features, 0.9, n_ctx)
        .map_err(|e| e.to_string())?;
    if base.to_bits() != shifted.to_bits() {
        return fail(format!(
            "loss depends on context targets: {base:.17e} vs {shifted:.17e}"
        ));
    }

    // stage-1 rollout must ignore frames outside the sliding window
    let fcfg = ForecasterConfig {
        layers: 1,
        model_dim: 16,
        heads: 2,
        n_context: 2,
        mlp_ratio: 2.0,
        smooth_l1_beta: 1.0,
        seed: 8,
    };
    let model = Forecaster::new(fcfg, 2, 2, 3).map_err(|e| e.to_string())?;
    let mut rng = seeded_rng(8, 1);
    let context = Array4::<f32>::from_shape_fn((5, 2, 2, 3), |_| rng.gen::<f32>() - 0.5);
    let base = model.rollout(&context, 2).map_err(|e| e.to_string())?;
    let mut perturbed = context.clone();
    for t in 0..3 {
        // only the last n_context = 2 frames are inside the window
        perturbed
            .index_axis_mut(Axis(0), t)
            .mapv_inplace(|v| v + 77.0);
    }
    let shifted = model.rollout(&perturbed, 2).map_err(|e| e.to_string())?;
    for (a, b) in base.iter().zip(shifted.iter()) {
        if a.to_bits() != b.to_bits() {
            return fail("rollout depends on frames beyond the sliding window".to_string());
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// shared desk-scale experiment for the directional criteria
// ---------------------------------------------------------------------------

fn desk_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.world.height = 32;
    cfg.world.width = 32;
    cfg.world.k = 25;
    cfg.world.num_clips = 10;
    cfg.world.num_shapes = 3;
    cfg.encoder.width = 16;
    cfg.encoder.depth = 4;
    cfg.encoder.tap_layers = vec![2, 4];
    cfg.pca = PcaConfig { c_h: 16 };
    cfg.stage1.model = ForecasterConfig {
        layers: 2,
        model_dim: 64,
        heads: 4,
        n_context: 4,
        mlp_ratio: 2.0,
        smooth_l1_beta: 1.0,
        seed: 0,
    };
    cfg.stage1.train.steps = 800;
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
        steps: 3000,
        lr: 1e-3,
        warmup_steps: 50,
        schedule: ScheduleKind::Cosine,
        seed: 13,
        mode: ConditioningMode::Mixed,
        dropout: NestedDropoutPolicy {
            channel_set: vec![4, 8, 12, 16],
        },
        mixed: MixedSupervisionPolicy::default(),
    };
    cfg.sampler = SamplerConfig {
        num_steps: 12,
        seed: 17,
        ..SamplerConfig::default()
    };
    cfg.guidance = GuidanceConfig {
        weight: 0.5,
        coarse_channels: 8,
    };
    cfg.eval = EvalConfig {
        m_context: 13,
        runs: 3,
    };
    cfg.validate().expect("desk-scale config must validate");
    cfg
}

struct Shared {
    cfg: ExperimentConfig,
    prepared: Prepared,
    stage1: Forecaster,
    probe: semvid_core::evalsuite::ProbeHead,
    examples: Vec<Stage2Example>,
    n_ctx: usize,
    full: Denoiser,
    baseline_runs: Vec<MetricsReport>,
    full_runs: Vec<MetricsReport>,
}

fn train_denoiser(
    shared_cfg: &ExperimentConfig,
    prepared: &Prepared,
    examples: &[Stage2Example],
    n_ctx: usize,
    train_cfg: &Stage2TrainConfig,
) -> Result<Denoiser, String> {
    let (t, h, w, cz) = prepared.latents[0].dim();
    let mut model = Denoiser::new(shared_cfg.stage2.model.clone(), t, h, w, cz, shared_cfg.pca.c_h)
        .map_err(|e| e.to_string())?;
    train_stage2(&mut model, examples, n_ctx, train_cfg, |_| {}).map_err(|e| e.to_string())?;
    Ok(model)
}

/// Evaluate a model on the validation split, one report per sampling run.
fn eval_runs(
    shared: &ExperimentConfig,
    prepared: &Prepared,
    stage1: &Forecaster,
    model: &Denoiser,
    probe: &semvid_core::evalsuite::ProbeHead,
    inference_channels: Option<usize>,
    zero_features: bool,
) -> Result<Vec<MetricsReport>, String> {
    let mut out = Vec::new();
    for r in 0..shared.eval.runs {
        let sampler = SamplerConfig {
            seed: shared.sampler.seed + r as u64,
            ..shared.sampler.clone()
        };
        out.push(
            pipeline::evaluate_clips(
                shared,
                prepared,
                stage1,
                model,
                probe,
                &prepared.val_idx,
                &sampler,
                None,
                inference_channels,
                zero_features,
            )
            .map_err(|e| e.to_string())?,
        );
    }
    Ok(out)
}

fn build_shared() -> Result<Shared, String> {
    let cfg = desk_config();
    eprintln!("  [shared] preparing data, features, and latents ...");
    let prepared = pipeline::prepare(&cfg).map_err(|e| e.to_string())?;
    let (_, h, w, c) = prepared.features[0].dim();
    let mut stage1 = Forecaster::new(cfg.stage1.model.clone(), h, w, c).map_err(|e| e.to_string())?;
    eprintln!("  [shared] training the stage-1 forecaster ...");
    let t0 = Instant::now();
    train_stage1(&mut stage1, &prepared.train_features(), &cfg.stage1.train, |_| {})
        .map_err(|e| e.to_string())?;
    eprintln!("  [shared] stage-1 done in {:.1}s", t0.elapsed().as_secs_f64());
    let probe = pipeline::train_pipeline_probe(&cfg, &prepared).map_err(|e| e.to_string())?;
    let n_ctx = pipeline::context_latent_frames(&cfg).map_err(|e| e.to_string())?;
    let examples = pipeline::stage2_examples(&prepared, &stage1, &prepared.train_idx, n_ctx)
        .map_err(|e| e.to_string())?;

    let base_train = Stage2TrainConfig {
        mode: ConditioningMode::NoFeatures,
        ..cfg.stage2.train.clone()
    };
    let full_train = Stage2TrainConfig {
        mode: ConditioningMode::Mixed,
        ..cfg.stage2.train.clone()
    };
    eprintln!("  [shared] training the unconditioned baseline ...");
    let t0 = Instant::now();
    let baseline = train_denoiser(&cfg, &prepared, &examples, n_ctx, &base_train)?;
    eprintln!("  [shared] baseline done in {:.1}s", t0.elapsed().as_secs_f64());
    eprintln!("  [shared] training the conditioned model ...");
    let t0 = Instant::now();
    let full = train_denoiser(&cfg, &prepared, &examples, n_ctx, &full_train)?;
    eprintln!("  [shared] conditioned model done in {:.1}s", t0.elapsed().as_secs_f64());

    eprintln!("  [shared] evaluating both models ({} runs each) ...", cfg.eval.runs);
    let baseline_runs = eval_runs(&cfg, &prepared, &stage1, &baseline, &probe, None, true)?;
    let full_runs = eval_runs(&cfg, &prepared, &stage1, &full, &probe, None, false)?;
    Ok(Shared {
        cfg,
        prepared,
        stage1,
        probe,
        examples,
        n_ctx,
        full,
        baseline_runs,
        full_runs,
    })
}

// ---------------------------------------------------------------------------
// 7. stage-1 beats the copy-last-frame baseline
// ---------------------------------------------------------------------------

fn check_stage1_learning(shared: &Shared) -> CheckResult {
    let (model_loss, copy_loss) =
        validation_losses(&shared.stage1, &shared.prepared.val_features())
            .map_err(|e| e.to_string())?;
    if model_loss >= copy_loss {
        return fail(format!(
            "validation smooth-L1 {model_loss:.6} not below copy-last-frame {copy_loss:.6}"
        ));
    }
    eprintln!("  [7] model {model_loss:.6} vs copy-last {copy_loss:.6}");
    Ok(())
}

// ---------------------------------------------------------------------------
// 8. conditioning improves probe mIoU and the feature distance
// ---------------------------------------------------------------------------

fn check_conditioning_direction(shared: &Shared) -> CheckResult {
    let mut wins = 0;
    for (b, f) in shared.baseline_runs.iter().zip(&shared.full_runs) {
        let miou_gain = f.miou_all - b.miou_all;
        let ffd_rel = (b.ffd - f.ffd) / b.ffd;
        eprintln!(
            "  [8] run: mIoU {:.4} -> {:.4} (+{:.4}), FFD {:.4} -> {:.4} ({:+.1}%)",
            b.miou_all,
            f.miou_all,
            miou_gain,
            b.ffd,
            f.ffd,
            -ffd_rel * 100.0
        );
        if miou_gain >= 0.02 && ffd_rel >= 0.10 {
            wins += 1;
        }
    }
    if wins < 2 {
        return fail(format!(
            "conditioned model beat the baseline (>= 2 mIoU points and >= 10% FFD) in only {wins}/3 runs"
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 9. mixed supervision closes the train-test conditioning gap
// ---------------------------------------------------------------------------

fn check_mixed_supervision(shared: &Shared) -> CheckResult {
    let gt_train = Stage2TrainConfig {
        mode: ConditioningMode::GroundTruthOnly,
        ..shared.cfg.stage2.train.clone()
    };
    eprintln!("  [9] training the ground-truth-only model ...");
    let gt_model = train_denoiser(
        &shared.cfg,
        &shared.prepared,
        &shared.examples,
        shared.n_ctx,
        &gt_train,
    )?;
    let gt_runs = eval_runs(
        &shared.cfg,
        &shared.prepared,
        &shared.stage1,
        &gt_model,
        &shared.probe,
        None,
        false,
    )?;
    let mean = |rs: &[MetricsReport], f: fn(&MetricsReport) -> f64| {
        rs.iter().map(f).sum::<f64>() / rs.len() as f64
    };
    let gt_ffd = mean(&gt_runs, |r| r.ffd);
    let mixed_ffd = mean(&shared.full_runs, |r| r.ffd);
    let gt_miou = mean(&gt_runs, |r| r.miou_all);
    let mixed_miou = mean(&shared.full_runs, |r| r.miou_all);
    eprintln!(
        "  [9] FFD gt-only {gt_ffd:.4} vs mixed {mixed_ffd:.4}; mIoU gt-only {gt_miou:.4} vs mixed {mixed_miou:.4}"
    );
    if mixed_ffd >= gt_ffd {
        return fail(format!(
            "mixed-trained FFD {mixed_ffd:.4} not below ground-truth-only FFD {gt_ffd:.4} under predicted conditioning"
        ));
    }
    if mixed_miou < 0.95 * gt_miou {
        return fail(format!(
            "mixed-trained mIoU {mixed_miou:.4} below 95% of ground-truth-only mIoU {gt_miou:.4}"
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 10. channel truncation degrades gracefully
// ---------------------------------------------------------------------------

fn check_channel_truncation(shared: &Shared) -> CheckResult {
    let mut mious = Vec::new();
    for &channels in &shared.cfg.stage2.train.dropout.channel_set {
        let runs = eval_runs(
            &shared.cfg,
            &shared.prepared,
            &shared.stage1,
            &shared.full,
            &shared.probe,
            Some(channels),
            false,
        )?;
        let m = runs.iter().map(|r| r.miou_all).sum::<f64>() / runs.len() as f64;
        eprintln!("  [10] {channels} channels: mIoU {m:.4}");
        mious.push((channels, m));
    }
    for w in mious.windows(2) {
        if w[1].1 < w[0].1 - 0.005 {
            return fail(format!(
                "mIoU drops from {:.4} ({} ch) to {:.4} ({} ch), beyond the 0.5-point tolerance",
                w[0].1, w[0].0, w[1].1, w[1].0
            ));
        }
    }
    let quarter = shared.cfg.pca.c_h / 4;
    let q = mious.iter().find(|(c, _)| *c == quarter).unwrap().1;
    let full = mious.last().unwrap().1;
    if full - q > 0.01 {
        return fail(format!(
            "{quarter}-channel mIoU {q:.4} more than 1 point below full {full:.4}"
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 11. guidance identities
// ---------------------------------------------------------------------------

fn check_guidance_identities() -> CheckResult {
    let dcfg = DenoiserConfig {
        layers: 1,
        model_dim: 24,
        heads: 2,
        patch_size: 1,
        adaln_rank: 2,
        cond_freq_dim: 8,
        mlp_ratio: 2.0,
        seed: 11,
    };
    let model = Denoiser::new(dcfg, 3, 2, 2, 4, 8).map_err(|e| e.to_string())?;
    let mut rng = seeded_rng(11, 1);
    let context = Array4::<f64>::from_shape_fn((1, 2, 2, 4), |_| rng.gen::<f64>() - 0.5);
    let features = Array4::<f32>::from_shape_fn((3, 2, 2, 8), |_| rng.gen::<f32>() - 0.5);
    // a single-step sampler returns the denoised estimate directly, which is
    // exactly linear in the guidance weight
    let scfg = SamplerConfig {
        num_steps: 1,
        seed: 99,
        ..SamplerConfig::default()
    };
    let sample_w = |w: Option<f64>| -> Result<Array4<f64>, String> {
        let guidance = w.map(|weight| GuidanceConfig {
            weight,
            coarse_channels: 4,
        });
        sample_latents(&model, &context, &features, &scfg, guidance.as_ref())
            .map_err(|e| e.to_string())
    };
    let unguided = sample_w(None)?;
    let w0 = sample_w(Some(0.0))?;
    for (a, b) in unguided.iter().zip(w0.iter()) {
        if a.to_bits() != b.to_bits() {
            return fail("w = 0 sampling is not bit-identical to unguided sampling".to_string());
        }
    }
    let w_half = sample_w(Some(0.5))?;
    let w_one = sample_w(Some(1.0))?;
    // linearity: out(0) + out(1) == 2 * out(0.5)
    let mut worst = 0f64;
    for ((a, b), c) in w0.iter().zip(w_one.iter()).zip(w_half.iter()) {
        worst = worst.max((a + b - 2.0 * c).abs());
    }
    if worst >= 1e-6 {
        return fail(format!("guidance linearity violated by {worst:.3e}"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 12. metric oracles
// ---------------------------------------------------------------------------

fn miou_oracle(pred: &Array3<u8>, gt: &Array3<u8>) -> (Vec<(u8, f64)>, f64) {
    let mut present: Vec<u8> = gt.iter().copied().collect();
    present.sort_unstable();
    present.dedup();
    let mut per_class = Vec::new();
    let mut sum = 0.0;
    for &k in &present {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (p, g) in pred.iter().zip(gt.iter()) {
            let ip = *p == k;
            let ig = *g == k;
            if ip && ig {
                inter += 1;
            }
            if ip || ig {
                union += 1;
            }
        }
        let iou = inter as f64 / union as f64;
        per_class.push((k, iou));
        sum += iou;
    }
    (per_class, sum / present.len() as f64)
}

fn check_metric_oracles() -> CheckResult {
    let mut rng = seeded_rng(12, 1);
    for trial in 0..1000 {
        let pred = Array3::<u8>::from_shape_fn((1, 16, 16), |_| rng.gen_range(0..5u8));
        let gt = Array3::<u8>::from_shape_fn((1, 16, 16), |_| rng.gen_range(0..5u8));
        let (got_pc, got_mean) = miou(&pred, &gt, None).map_err(|e| e.to_string())?;
        let (want_pc, want_mean) = miou_oracle(&pred, &gt);
        if got_pc != want_pc || got_mean != want_mean {
            return fail(format!(
                "trial {trial}: miou {got_mean:.17e} != oracle {want_mean:.17e}"
            ));
        }
    }

    // FFD(X, X) is (numerically) zero
    let mut rng = seeded_rng(12, 2);
    let x = Array2::<f64>::from_shape_fn((64, 4), |_| StandardNormal.sample(&mut rng));
    let self_d = frechet_feature_distance(&x, &x).map_err(|e| e.to_string())?;
    if self_d >= 1e-6 {
        return fail(format!("FFD(X, X) = {self_d:.3e} >= 1e-6"));
    }

    // FFD between two standard Gaussians offset by delta recovers |delta|^2
    let n = 40_000usize;
    let delta = [1.0f64, 1.0, 1.0, 1.0];
    let want: f64 = delta.iter().map(|d| d * d).sum();
    let a = Array2::<f64>::from_shape_fn((n, 4), |_| StandardNormal.sample(&mut rng));
    let b = Array2::<f64>::from_shape_fn((n, 4), |(_, j)| {
        let e: f64 = StandardNormal.sample(&mut rng);
        e + delta[j]
    });
    let got = frechet_feature_distance(&a, &b).map_err(|e| e.to_string())?;
    if (got - want).abs() / want > 0.05 {
        return fail(format!(
            "Gaussian FFD {got:.4} deviates from |delta|^2 = {want} by more than 5%"
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 13. conditioning accelerates convergence
// ---------------------------------------------------------------------------

fn check_convergence(shared: &Shared) -> CheckResult {
    let steps = 480usize;
    let every = 60usize;
    let sampler = SamplerConfig {
        num_steps: 8,
        seed: shared.cfg.sampler.seed,
        ..shared.cfg.sampler.clone()
    };
    let ffd_at = |model: &Denoiser, zero_features: bool| -> Result<f64, String> {
        let report = pipeline::evaluate_clips(
            &shared.cfg,
            &shared.prepared,
            &shared.stage1,
            model,
            &shared.probe,
            &shared.prepared.val_idx,
            &sampler,
            None,
            None,
            zero_features,
        )
        .map_err(|e| e.to_string())?;
        Ok(report.ffd)
    };
    let mut successes = 0;
    for seed_off in 0..3u64 {
        let mut curves: Vec<(&str, Vec<(usize, f64)>)> = Vec::new();
        for (name, mode) in [
            ("baseline", ConditioningMode::NoFeatures),
            ("full", ConditioningMode::Mixed),
        ] {
            let tc = Stage2TrainConfig {
                steps,
                seed: shared.cfg.stage2.train.seed + seed_off,
                mode,
                schedule: ScheduleKind::Constant,
                ..shared.cfg.stage2.train.clone()
            };
            let (t, h, w, cz) = shared.prepared.latents[0].dim();
            let mut model = Denoiser::new(
                shared.cfg.stage2.model.clone(),
                t,
                h,
                w,
                cz,
                shared.cfg.pca.c_h,
            )
            .map_err(|e| e.to_string())?;
            let snaps = train_stage2_snapshots(&mut model, &shared.examples, shared.n_ctx, &tc, every, |_| {})
                .map_err(|e| e.to_string())?;
            let mut curve = Vec::new();
            for snap in snaps {
                model.params = snap.params;
                curve.push((
                    snap.steps_done,
                    ffd_at(&model, mode == ConditioningMode::NoFeatures)?,
                ));
            }
            curves.push((name, curve));
        }
        let baseline_final = curves[0].1.last().unwrap().1;
        let reach = curves[1]
            .1
            .iter()
            .find(|&&(_, ffd)| ffd <= baseline_final)
            .map(|&(s, _)| s);
        eprintln!(
            "  [13] seed +{seed_off}: baseline final FFD {baseline_final:.4}, conditioned reaches it at step {reach:?}"
        );
        if let Some(s) = reach {
            if (s as f64) <= 0.7 * steps as f64 {
                successes += 1;
            }
        }
    }
    if successes < 2 {
        return fail(format!(
            "conditioned model matched the baseline's final FFD within 70% of the steps in only {successes}/3 seeds"
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let mut results: Vec<(&str, CheckResult, f64)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> CheckResult| {
        let t0 = Instant::now();
        let r = f();
        results.push((name, r, t0.elapsed().as_secs_f64()));
    };

    run("preconditioning identities", &mut check_preconditioning_identities);
    run("training noise-level mixture", &mut check_noise_mixture);
    run("nested channel dropout", &mut check_nested_dropout);
    run("latent codec round trip", &mut check_codec_round_trip);
    run("autodiff vs finite differences", &mut check_gradients);
    run("loss locality", &mut check_loss_locality);

    let shared = match build_shared() {
        Ok(s) => Some(s),
        Err(e) => {
            eprintln!("shared experiment setup failed: {e}");
            None
        }
    };
    let shared_err = || Err("shared experiment setup failed".to_string());
    run("stage-1 beats copy-last baseline", &mut || match &shared {
        Some(s) => check_stage1_learning(s),
        None => shared_err(),
    });
    run("conditioning improves mIoU and FFD", &mut || match &shared {
        Some(s) => check_conditioning_direction(s),
        None => shared_err(),
    });
    run("mixed supervision closes the gap", &mut || match &shared {
        Some(s) => check_mixed_supervision(s),
        None => shared_err(),
    });
    run("channel truncation degrades gracefully", &mut || match &shared {
        Some(s) => check_channel_truncation(s),
        None => shared_err(),
    });
    run("guidance identities", &mut check_guidance_identities);
    run("metric oracles", &mut check_metric_oracles);
    run("conditioning accelerates convergence", &mut || match &shared {
        Some(s) => check_convergence(s),
        None => shared_err(),
    });

    let mut failures = 0;
    for (i, (name, result, secs)) in results.iter().enumerate() {
        match result {
            Ok(()) => println!("[{:>2}/13] {name:<42} PASS  ({secs:.1}s)", i + 1),
            Err(msg) => {
                failures += 1;
                println!("[{:>2}/13] {name:<42} FAIL  ({secs:.1}s): {msg}", i + 1);
            }
        }
    }
    if failures == 0 {
        println!("acceptance: all 13 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures}/13 criteria FAILED");
        ExitCode::FAILURE
    }
}
