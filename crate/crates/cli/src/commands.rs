//! Subcommand implementations. Each stage writes into the run ledger and
//! refuses to run before its upstream artifacts exist and fingerprint-match.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Serialize;
use serde_json::json;

use semvid_core::artifact::{checkpoint_id, write_clip};
use semvid_core::config::ExperimentConfig;
use semvid_core::evalsuite::MetricsReport;
use semvid_core::features::{cache_features, load_pca, save_pca, PcaProjection};
use semvid_core::pipeline::{self, Prepared};
use semvid_core::stage1::{
    load_forecaster, save_forecaster, train_stage1, Forecaster, Stage1TrainConfig,
};
use semvid_core::stage2::edm::MixedSupervisionPolicy;
use semvid_core::stage2::model::Denoiser;
use semvid_core::stage2::sample::GuidanceConfig;
use semvid_core::stage2::train::{
    load_denoiser, save_denoiser, train_stage2, train_stage2_snapshots, ConditioningMode,
    ScheduleKind, Stage2TrainConfig,
};
use semvid_core::synthworld::{dataset_manifest, DatasetManifest, VideoSample};
use semvid_core::{Error, Result};

use crate::ledger::RunDir;
use crate::plot::{render_lines, Series};

fn mode_tag(mode: ConditioningMode) -> &'static str {
    match mode {
        ConditioningMode::Mixed => "mixed",
        ConditioningMode::GroundTruthOnly => "ground_truth_only",
        ConditioningMode::NoFeatures => "no_features",
    }
}

fn clip_file(i: usize) -> String {
    format!("dataset/clip_{i:04}.bin")
}

/// Thread the top-level seed section into the per-stage configs.
fn effective(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.world.seed = c.seeds.data;
    c.stage1.train.seed = c.seeds.stage1;
    c.stage2.train.seed = c.seeds.stage2;
    c.sampler.seed = c.seeds.sampler;
    c
}

// ---------------------------------------------------------------------------
// generate-data
// ---------------------------------------------------------------------------

pub fn generate_data(cfg: &ExperimentConfig, run: &RunDir) -> Result<()> {
    let cfg = effective(cfg);
    run.record_config(&cfg)?;
    run.artifact_dir("dataset")?;
    let manifest = dataset_manifest(&cfg.world);
    for i in 0..cfg.world.num_clips {
        let clip = semvid_core::synthworld::generate_clip(&cfg.world, i)?;
        write_clip(&run.artifact(&clip_file(i)), &clip, cfg.world.num_classes())?;
    }
    std::fs::write(
        run.artifact("dataset/manifest.json"),
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Serialization(e.to_string()))?,
    )?;
    run.log(&json!({"stage": "generate-data", "clips": cfg.world.num_clips}))?;
    println!(
        "wrote {} clips to {}",
        cfg.world.num_clips,
        run.artifact("dataset").display()
    );
    Ok(())
}

fn require_dataset(cfg: &ExperimentConfig, run: &RunDir) -> Result<()> {
    let path = run.require("dataset/manifest.json", "generate-data")?;
    let text = std::fs::read_to_string(&path)?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))?;
    let expect = dataset_manifest(&cfg.world);
    if manifest != expect {
        return Err(Error::CacheInvalid(format!(
            "dataset manifest {} does not match the current config; regenerate data",
            path.display()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// fit-pca
// ---------------------------------------------------------------------------

pub fn fit_pca(cfg: &ExperimentConfig, run: &RunDir) -> Result<()> {
    let cfg = effective(cfg);
    require_dataset(&cfg, run)?;
    run.record_config(&cfg)?;
    let prepared = pipeline::prepare(&cfg)?;
    save_pca(&run.artifact("pca.bin"), &prepared.pca)?;
    std::fs::write(
        run.artifact("codec.json"),
        serde_json::to_string_pretty(&prepared.codec)
            .map_err(|e| Error::Serialization(e.to_string()))?,
    )?;
    run.artifact_dir("features")?;
    let fp = prepared.pca.fingerprint();
    for (i, f) in prepared.features.iter().enumerate() {
        cache_features(&run.artifact(&format!("features/clip_{i:04}.feat")), f, &fp)?;
    }
    run.log(&json!({"stage": "fit-pca", "fingerprint": fp}))?;
    println!("pca fingerprint {fp}");
    Ok(())
}

fn require_pca(cfg: &ExperimentConfig, run: &RunDir, prepared: &Prepared) -> Result<PcaProjection> {
    require_dataset(cfg, run)?;
    let pca = load_pca(&run.require("pca.bin", "fit-pca")?)?;
    if pca.fingerprint() != prepared.pca.fingerprint() {
        return Err(Error::CacheInvalid(
            "stored pca does not match the current config; re-run fit-pca".into(),
        ));
    }
    Ok(pca)
}

// ---------------------------------------------------------------------------
// train-stage1
// ---------------------------------------------------------------------------

pub fn cmd_train_stage1(cfg: &ExperimentConfig, run: &RunDir) -> Result<()> {
    let cfg = effective(cfg);
    run.record_config(&cfg)?;
    let prepared = pipeline::prepare(&cfg)?;
    let pca = require_pca(&cfg, run, &prepared)?;
    let (_, h, w, c) = prepared.features[0].dim();
    let mut model = Forecaster::new(cfg.stage1.model.clone(), h, w, c)?;
    let train_cfg = Stage1TrainConfig {
        seed: cfg.seeds.stage1,
        ..cfg.stage1.train.clone()
    };
    let mut last = f64::NAN;
    train_stage1(&mut model, &prepared.train_features(), &train_cfg, |row| {
        last = row.loss;
        let _ = run.log(&json!({"stage": "train-stage1", "step": row.step, "loss": row.loss}));
    })?;
    save_forecaster(&run.artifact("stage1.ckpt"), &model, &pca.fingerprint())?;
    println!("stage1 trained ({} steps, final loss {last:.6})", train_cfg.steps);
    Ok(())
}

fn require_stage1(
    cfg: &ExperimentConfig,
    run: &RunDir,
    prepared: &Prepared,
) -> Result<(Forecaster, String)> {
    let pca = require_pca(cfg, run, prepared)?;
    let path = run.require("stage1.ckpt", "train-stage1")?;
    let model = load_forecaster(&path, Some(&pca.fingerprint()))?;
    Ok((model, checkpoint_id(&path)?))
}

// ---------------------------------------------------------------------------
// rollout-features
// ---------------------------------------------------------------------------

pub fn rollout_features(cfg: &ExperimentConfig, run: &RunDir) -> Result<()> {
    let cfg = effective(cfg);
    let prepared = pipeline::prepare(&cfg)?;
    let (stage1, _) = require_stage1(&cfg, run, &prepared)?;
    let n_ctx = pipeline::context_latent_frames(&cfg)?;
    run.artifact_dir("forecast")?;
    let fp = prepared.pca.fingerprint();
    for (i, gt) in prepared.features.iter().enumerate() {
        let forecast = pipeline::forecast_feature_stack(&stage1, gt, n_ctx)?;
        cache_features(
            &run.artifact(&format!("forecast/clip_{i:04}.feat")),
            &forecast,
            &fp,
        )?;
    }
    run.log(&json!({"stage": "rollout-features", "clips": prepared.features.len()}))?;
    println!("forecast features written for {} clips", prepared.features.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// train-stage2
// ---------------------------------------------------------------------------

fn stage2_ckpt_name(mode: ConditioningMode) -> String {
    format!("stage2_{}.ckpt", mode_tag(mode))
}

fn build_stage2(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<Denoiser> {
    let (t, h, w, cz) = prepared.latents[0].dim();
    Denoiser::new(cfg.stage2.model.clone(), t, h, w, cz, cfg.pca.c_h)
}

pub fn cmd_train_stage2(cfg: &ExperimentConfig, run: &RunDir) -> Result<()> {
    let cfg = effective(cfg);
    run.record_config(&cfg)?;
    let prepared = pipeline::prepare(&cfg)?;
    let (stage1, stage1_id) = require_stage1(&cfg, run, &prepared)?;
    let n_ctx = pipeline::context_latent_frames(&cfg)?;
    let examples = pipeline::stage2_examples(&prepared, &stage1, &prepared.train_idx, n_ctx)?;
    let mut model = build_stage2(&cfg, &prepared)?;
    let train_cfg = Stage2TrainConfig {
        seed: cfg.seeds.stage2,
        ..cfg.stage2.train.clone()
    };
    train_stage2(&mut model, &examples, n_ctx, &train_cfg, |row| {
        let _ = run.log(&json!({
            "stage": "train-stage2",
            "mode": mode_tag(train_cfg.mode),
            "step": row.step,
            "loss": row.loss,
            "sigma": row.sigma,
            "keep_channels": row.keep_channels,
        }));
    })?;
    let fp = prepared.pca.fingerprint();
    save_denoiser(
        &run.artifact(&stage2_ckpt_name(train_cfg.mode)),
        &model,
        train_cfg.mode,
        &[("pca", &fp), ("stage1", &stage1_id)],
    )?;
    println!(
        "stage2 ({}) trained for {} steps",
        mode_tag(train_cfg.mode),
        train_cfg.steps
    );
    Ok(())
}

fn require_stage2(
    cfg: &ExperimentConfig,
    run: &RunDir,
    prepared: &Prepared,
    stage1_id: &str,
) -> Result<(Denoiser, ConditioningMode)> {
    let name = stage2_ckpt_name(cfg.stage2.train.mode);
    let path = run.require(&name, "train-stage2")?;
    let fp = prepared.pca.fingerprint();
    load_denoiser(&path, &[("pca", &fp), ("stage1", stage1_id)])
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

pub fn sample(cfg: &ExperimentConfig, run: &RunDir, clip: Option<usize>) -> Result<()> {
    let cfg = effective(cfg);
    let prepared = pipeline::prepare(&cfg)?;
    let (stage1, stage1_id) = require_stage1(&cfg, run, &prepared)?;
    let (stage2, mode) = require_stage2(&cfg, run, &prepared, &stage1_id)?;
    let clip_index = clip.unwrap_or(prepared.val_idx[0]);
    if clip_index >= prepared.clips.len() {
        return Err(Error::Argument(format!(
            "clip {clip_index} out of range ({} clips)",
            prepared.clips.len()
        )));
    }
    let probe = pipeline::train_pipeline_probe(&cfg, &prepared)?;
    let outcome = pipeline::evaluate_clip(
        &cfg,
        &prepared,
        &stage1,
        &stage2,
        &probe,
        clip_index,
        &cfg.sampler,
        None,
        None,
        mode == ConditioningMode::NoFeatures,
    )?;
    run.artifact_dir("samples")?;
    let out = run.artifact(&format!("samples/clip_{clip_index:04}.bin"));
    let sample_clip = VideoSample {
        frames: outcome.decoded.clone(),
        masks: prepared.clips[clip_index].masks.clone(),
        shapes: prepared.clips[clip_index].shapes.clone(),
        clip_seed: prepared.clips[clip_index].clip_seed,
    };
    write_clip(&out, &sample_clip, cfg.world.num_classes())?;
    run.log(&json!({"stage": "sample", "clip": clip_index, "psnr": outcome.report.psnr_db}))?;
    println!("sampled clip {clip_index} -> {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct MultiRunReport {
    runs: Vec<MetricsReport>,
    mean_miou_all: f64,
    mean_iou_moving: f64,
    mean_ffd: f64,
    mean_psnr_db: f64,
}

fn summarize(runs: Vec<MetricsReport>) -> MultiRunReport {
    let n = runs.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| runs.iter().map(f).sum::<f64>() / n;
    MultiRunReport {
        mean_miou_all: mean(|r| r.miou_all),
        mean_iou_moving: mean(|r| r.iou_moving),
        mean_ffd: mean(|r| r.ffd),
        mean_psnr_db: mean(|r| r.psnr_db),
        runs,
    }
}

#[allow(clippy::too_many_arguments)]
fn eval_runs(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    stage1: &Forecaster,
    stage2: &Denoiser,
    probe: &semvid_core::evalsuite::ProbeHead,
    guidance: Option<&GuidanceConfig>,
    inference_channels: Option<usize>,
    zero_features: bool,
) -> Result<MultiRunReport> {
    let mut reports = Vec::new();
    for r in 0..cfg.eval.runs {
        let sampler = semvid_core::stage2::sample::SamplerConfig {
            seed: cfg.seeds.sampler + r as u64,
            ..cfg.sampler.clone()
        };
        reports.push(pipeline::evaluate_clips(
            cfg,
            prepared,
            stage1,
            stage2,
            probe,
            &prepared.val_idx,
            &sampler,
            guidance,
            inference_channels,
            zero_features,
        )?);
    }
    Ok(summarize(reports))
}

pub fn evaluate(cfg: &ExperimentConfig, run: &RunDir) -> Result<()> {
    let cfg = effective(cfg);
    let prepared = pipeline::prepare(&cfg)?;
    let (stage1, stage1_id) = require_stage1(&cfg, run, &prepared)?;
    let (stage2, mode) = require_stage2(&cfg, run, &prepared, &stage1_id)?;
    let probe = pipeline::train_pipeline_probe(&cfg, &prepared)?;
    std::fs::write(
        run.artifact("probe.json"),
        serde_json::to_string_pretty(&probe)
            .map_err(|e| Error::Serialization(e.to_string()))?,
    )?;
    let report = eval_runs(
        &cfg,
        &prepared,
        &stage1,
        &stage2,
        &probe,
        None,
        None,
        mode == ConditioningMode::NoFeatures,
    )?;
    run.write_metrics(&report)?;
    println!(
        "mIoU(A) {:.4}  IoU(M) {:.4}  FFD {:.4}  PSNR {:.2} dB ({} runs) -> {}",
        report.mean_miou_all,
        report.mean_iou_moving,
        report.mean_ffd,
        report.mean_psnr_db,
        cfg.eval.runs,
        run.metrics_path().display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// reproduce
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Reproduction {
    Table1,
    Table4,
    Table5,
    Convergence,
}

struct TrainedArm {
    name: String,
    model: Denoiser,
    loss_curve: Vec<(f64, f64)>,
    zero_features: bool,
}

fn train_arm(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    examples: &[semvid_core::stage2::train::Stage2Example],
    n_ctx: usize,
    name: &str,
    train_cfg: &Stage2TrainConfig,
    extra_layers: usize,
) -> Result<TrainedArm> {
    let mut model_cfg = cfg.stage2.model.clone();
    model_cfg.layers += extra_layers;
    let (t, h, w, cz) = prepared.latents[0].dim();
    let mut model = Denoiser::new(model_cfg, t, h, w, cz, cfg.pca.c_h)?;
    let mut curve = Vec::new();
    train_stage2(&mut model, examples, n_ctx, train_cfg, |row| {
        if row.step % 10 == 0 {
            curve.push((row.step as f64, row.loss));
        }
    })?;
    Ok(TrainedArm {
        name: name.to_string(),
        model,
        loss_curve: curve,
        zero_features: train_cfg.mode == ConditioningMode::NoFeatures,
    })
}

fn reproduce_common(
    cfg: &ExperimentConfig,
) -> Result<(Prepared, Forecaster, Vec<semvid_core::stage2::train::Stage2Example>, usize)> {
    let prepared = pipeline::prepare(cfg)?;
    let (_, h, w, c) = prepared.features[0].dim();
    let mut stage1 = Forecaster::new(cfg.stage1.model.clone(), h, w, c)?;
    let train_cfg = Stage1TrainConfig {
        seed: cfg.seeds.stage1,
        ..cfg.stage1.train.clone()
    };
    train_stage1(&mut stage1, &prepared.train_features(), &train_cfg, |_| {})?;
    let n_ctx = pipeline::context_latent_frames(cfg)?;
    let examples = pipeline::stage2_examples(&prepared, &stage1, &prepared.train_idx, n_ctx)?;
    Ok((prepared, stage1, examples, n_ctx))
}

pub fn reproduce(cfg: &ExperimentConfig, run: &RunDir, which: Reproduction) -> Result<()> {
    let cfg = effective(cfg);
    run.record_config(&cfg)?;
    match which {
        Reproduction::Table1 => reproduce_table1(&cfg, run),
        Reproduction::Table4 => reproduce_table4(&cfg, run),
        Reproduction::Table5 => reproduce_table5(&cfg, run),
        Reproduction::Convergence => reproduce_convergence(&cfg, run),
    }
}

/// Conditioning ablation: unconditioned baseline, larger unconditioned
/// baseline, and the fully conditioned model, matched seeds and steps.
fn reproduce_table1(cfg: &ExperimentConfig, run: &RunDir) -> Result<()> {
    let (prepared, stage1, examples, n_ctx) = reproduce_common(cfg)?;
    let probe = pipeline::train_pipeline_probe(cfg, &prepared)?;
    let base_train = Stage2TrainConfig {
        seed: cfg.seeds.stage2,
        ..cfg.stage2.train.clone()
    };
    let arms = vec![
        (
            "baseline",
            Stage2TrainConfig {
                mode: ConditioningMode::NoFeatures,
                ..base_train.clone()
            },
            0usize,
        ),
        (
            "baseline_large",
            Stage2TrainConfig {
                mode: ConditioningMode::NoFeatures,
                ..base_train.clone()
            },
            2,
        ),
        (
            "full",
            Stage2TrainConfig {
                mode: ConditioningMode::Mixed,
                ..base_train.clone()
            },
            0,
        ),
    ];
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut by_name: BTreeMap<String, MultiRunReport> = BTreeMap::new();
    for (name, tc, extra) in arms {
        let arm = train_arm(cfg, &prepared, &examples, n_ctx, name, &tc, extra)?;
        let report = eval_runs(
            cfg,
            &prepared,
            &stage1,
            &arm.model,
            &probe,
            None,
            None,
            arm.zero_features,
        )?;
        curves.push(Series {
            label: arm.name.clone(),
            points: arm.loss_curve,
        });
        rows.push(json!({
            "method": name,
            "miou_all": report.mean_miou_all,
            "iou_moving": report.mean_iou_moving,
            "ffd": report.mean_ffd,
            "psnr_db": report.mean_psnr_db,
        }));
        by_name.insert(name.to_string(), report);
    }
    let base = &by_name["baseline"];
    let full = &by_name["full"];
    let metrics = json!({
        "reproduction": "conditioning_ablation",
        "rows": rows,
        "delta_full_vs_baseline": {
            "miou_all": full.mean_miou_all - base.mean_miou_all,
            "ffd": full.mean_ffd - base.mean_ffd,
            "ffd_relative": (full.mean_ffd - base.mean_ffd) / base.mean_ffd,
        },
    });
    run.write_metrics(&metrics)?;
    render_lines(
        &run.plots_dir().join("table1_training_loss.svg"),
        "stage-2 training loss",
        "step",
        "loss",
        &curves,
    )?;
    println!("{}", serde_json::to_string_pretty(&metrics).unwrap());
    Ok(())
}

/// Supervision-mixture ablation: ground-truth-only, predicted-only, and the
/// 90/10 mixture, all evaluated with predicted conditioning features.
fn reproduce_table4(cfg: &ExperimentConfig, run: &RunDir) -> Result<()> {
    let (prepared, stage1, examples, n_ctx) = reproduce_common(cfg)?;
    let probe = pipeline::train_pipeline_probe(cfg, &prepared)?;
    let base_train = Stage2TrainConfig {
        seed: cfg.seeds.stage2,
        ..cfg.stage2.train.clone()
    };
    let arms = vec![
        (
            "ground_truth",
            Stage2TrainConfig {
                mode: ConditioningMode::GroundTruthOnly,
                ..base_train.clone()
            },
        ),
        (
            "predicted",
            Stage2TrainConfig {
                mode: ConditioningMode::Mixed,
                mixed: MixedSupervisionPolicy {
                    ground_truth_prob: 0.0,
                },
                ..base_train.clone()
            },
        ),
        (
            "mixed_90_10",
            Stage2TrainConfig {
                mode: ConditioningMode::Mixed,
                mixed: MixedSupervisionPolicy {
                    ground_truth_prob: 0.1,
                },
                ..base_train.clone()
            },
        ),
    ];
    let mut rows = Vec::new();
    for (name, tc) in arms {
        let arm = train_arm(cfg, &prepared, &examples, n_ctx, name, &tc, 0)?;
        let report = eval_runs(
            cfg, &prepared, &stage1, &arm.model, &probe, None, None, false,
        )?;
        rows.push(json!({
            "method": name,
            "miou_all": report.mean_miou_all,
            "ffd": report.mean_ffd,
            "psnr_db": report.mean_psnr_db,
        }));
    }
    let metrics = json!({"reproduction": "supervision_mixture_ablation", "rows": rows});
    run.write_metrics(&metrics)?;
    println!("{}", serde_json::to_string_pretty(&metrics).unwrap());
    Ok(())
}

/// Channel-truncation sweep of one nested-dropout-trained model.
fn reproduce_table5(cfg: &ExperimentConfig, run: &RunDir) -> Result<()> {
    let (prepared, stage1, examples, n_ctx) = reproduce_common(cfg)?;
    let probe = pipeline::train_pipeline_probe(cfg, &prepared)?;
    let tc = Stage2TrainConfig {
        seed: cfg.seeds.stage2,
        mode: ConditioningMode::Mixed,
        ..cfg.stage2.train.clone()
    };
    let arm = train_arm(cfg, &prepared, &examples, n_ctx, "full", &tc, 0)?;
    let mut rows = Vec::new();
    let mut points = Vec::new();
    for &channels in &cfg.stage2.train.dropout.channel_set {
        let report = eval_runs(
            cfg,
            &prepared,
            &stage1,
            &arm.model,
            &probe,
            None,
            Some(channels),
            false,
        )?;
        points.push((channels as f64, report.mean_miou_all));
        rows.push(json!({
            "channels": channels,
            "miou_all": report.mean_miou_all,
            "ffd": report.mean_ffd,
        }));
    }
    let metrics = json!({"reproduction": "channel_truncation_sweep", "rows": rows});
    run.write_metrics(&metrics)?;
    render_lines(
        &run.plots_dir().join("table5_miou_vs_channels.svg"),
        "probe mIoU vs inference channels",
        "channels",
        "mIoU(A)",
        &[Series {
            label: "full model".into(),
            points,
        }],
    )?;
    println!("{}", serde_json::to_string_pretty(&metrics).unwrap());
    Ok(())
}

/// Convergence comparison: constant LR after warmup, periodic checkpoint
/// evaluations, baseline vs full model over three seeds.
fn reproduce_convergence(cfg: &ExperimentConfig, run: &RunDir) -> Result<()> {
    let (prepared, stage1, examples, n_ctx) = reproduce_common(cfg)?;
    let probe = pipeline::train_pipeline_probe(cfg, &prepared)?;
    let steps = cfg.stage2.train.steps;
    let every = (steps / 8).max(1);
    let mut seed_results = Vec::new();
    let mut series = Vec::new();
    for seed_off in 0..3u64 {
        let mut per_method: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
        for (name, mode) in [
            ("baseline", ConditioningMode::NoFeatures),
            ("full", ConditioningMode::Mixed),
        ] {
            let tc = Stage2TrainConfig {
                seed: cfg.seeds.stage2 + seed_off,
                mode,
                schedule: ScheduleKind::Constant,
                ..cfg.stage2.train.clone()
            };
            let (t, h, w, cz) = prepared.latents[0].dim();
            let mut model =
                Denoiser::new(cfg.stage2.model.clone(), t, h, w, cz, cfg.pca.c_h)?;
            let snaps =
                train_stage2_snapshots(&mut model, &examples, n_ctx, &tc, every, |_| {})?;
            let mut curve = Vec::new();
            for snap in snaps {
                model.params = snap.params;
                let sampler = semvid_core::stage2::sample::SamplerConfig {
                    seed: cfg.seeds.sampler,
                    ..cfg.sampler.clone()
                };
                let report = pipeline::evaluate_clips(
                    cfg,
                    &prepared,
                    &stage1,
                    &model,
                    &probe,
                    &prepared.val_idx,
                    &sampler,
                    None,
                    None,
                    mode == ConditioningMode::NoFeatures,
                )?;
                curve.push((snap.steps_done as f64, report.ffd));
            }
            per_method.insert(name, curve);
        }
        let baseline_final = per_method["baseline"].last().unwrap().1;
        let full_reach = per_method["full"]
            .iter()
            .find(|&&(_, ffd)| ffd <= baseline_final)
            .map(|&(s, _)| s);
        seed_results.push(json!({
            "seed_offset": seed_off,
            "baseline_final_ffd": baseline_final,
            "baseline_steps": steps,
            "full_steps_to_reach": full_reach,
            "curves": {
                "baseline": per_method["baseline"],
                "full": per_method["full"],
            },
        }));
        for (name, curve) in per_method {
            series.push(Series {
                label: format!("{name} (seed +{seed_off})"),
                points: curve,
            });
        }
    }
    let metrics = json!({"reproduction": "convergence", "checkpoint_every": every, "seeds": seed_results});
    run.write_metrics(&metrics)?;
    render_lines(
        &run.plots_dir().join("convergence_ffd.svg"),
        "FFD vs training steps (constant LR)",
        "step",
        "FFD",
        &series,
    )?;
    println!("{}", serde_json::to_string_pretty(&metrics).unwrap());
    Ok(())
}

// ---------------------------------------------------------------------------
// plot
// ---------------------------------------------------------------------------

pub fn plot(run: &RunDir) -> Result<()> {
    let log_path = run.log_path();
    let text = match std::fs::read_to_string(&log_path) {
        Ok(t) if !t.trim().is_empty() => t,
        _ => {
            eprintln!("warning: no log rows at {}; nothing to plot", log_path.display());
            return Ok(());
        }
    };
    let mut by_stage: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for line in text.lines() {
        let v: serde_json::Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(_) => continue,
        };
        let (Some(stage), Some(step), Some(loss)) = (
            v.get("stage").and_then(|s| s.as_str()),
            v.get("step").and_then(|s| s.as_f64()),
            v.get("loss").and_then(|s| s.as_f64()),
        ) else {
            continue;
        };
        by_stage.entry(stage.to_string()).or_default().push((step, loss));
    }
    if by_stage.is_empty() {
        eprintln!("warning: log contains no loss curves; nothing to plot");
        return Ok(());
    }
    let series: Vec<Series> = by_stage
        .into_iter()
        .map(|(label, points)| Series { label, points })
        .collect();
    let out = run.plots_dir().join("training_loss.svg");
    render_lines(&out, "training loss", "step", "loss", &series)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Write the commented default config template.
pub fn init_config(path: &PathBuf) -> Result<()> {
    if path.exists() {
        return Err(Error::Argument(format!(
            "{} already exists; refusing to overwrite",
            path.display()
        )));
    }
    std::fs::write(path, semvid_core::config::DEFAULT_TEMPLATE)?;
    println!("wrote {}", path.display());
    Ok(())
}
