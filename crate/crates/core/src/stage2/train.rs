//! Stage-2 training: noise-level sampling, mixed supervision between
//! ground-truth and forecast conditioning features, nested channel dropout,
//! and checkpointing with upstream-artifact fingerprints.

use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::artifact::CheckpointMeta;
use crate::error::{Error, Result};
use crate::nn::adam::{Adam, AdamConfig, LrSchedule};
use crate::nn::params::seeded_rng;
use crate::stage2::edm::{
    add_noise, nested_dropout, sample_noise_level, MixedSupervisionPolicy,
    NestedDropoutPolicy, SupervisionSource,
};
use crate::stage2::model::{diffusion_loss_and_grads, Denoiser, DenoiserConfig};

/// What the denoiser is conditioned on during training.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    /// Mixed supervision between ground-truth and forecast features.
    Mixed,
    /// Always ground-truth features.
    GroundTruthOnly,
    /// Semantic conditioning disabled: feature inputs are zeroed.
    NoFeatures,
}

/// One training clip: clean latent stack plus the two candidate feature
/// stacks. Context frames of both feature stacks are ground truth; they
/// differ only on future frames.
pub struct Stage2Example {
    pub latents: Array4<f64>,
    pub gt_features: Array4<f32>,
    pub forecast_features: Array4<f32>,
}

/// Learning-rate schedule selector (always with linear warmup first).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Stage2TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    #[serde(default)]
    pub schedule: ScheduleKind,
    pub seed: u64,
    pub mode: ConditioningMode,
    pub dropout: NestedDropoutPolicy,
    pub mixed: MixedSupervisionPolicy,
}

impl Default for Stage2TrainConfig {
    fn default() -> Self {
        Stage2TrainConfig {
            steps: 4000,
            lr: 3e-4,
            warmup_steps: 100,
            schedule: ScheduleKind::Cosine,
            seed: 0,
            mode: ConditioningMode::Mixed,
            dropout: NestedDropoutPolicy {
                channel_set: vec![8, 16, 32, 64],
            },
            mixed: MixedSupervisionPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Stage2LogRow {
    pub step: usize,
    pub loss: f64,
    pub sigma: f64,
    pub keep_channels: usize,
}

fn check_examples(
    model: &Denoiser,
    examples: &[Stage2Example],
    n_context: usize,
) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::Argument("no stage-2 training examples".into()));
    }
    if n_context >= model.t_frames {
        return Err(Error::Argument(
            "n_context leaves no future latent frames".into(),
        ));
    }
    for ex in examples {
        if ex.latents.dim() != (model.t_frames, model.h_l, model.w_l, model.c_z) {
            return Err(Error::shape(
                format!(
                    "latents {}x{}x{}x{}",
                    model.t_frames, model.h_l, model.w_l, model.c_z
                ),
                format!("{:?}", ex.latents.dim()),
            ));
        }
        for f in [&ex.gt_features, &ex.forecast_features] {
            if f.dim().0 != model.t_frames || f.dim().3 != model.c_h {
                return Err(Error::shape(
                    format!("features {}x..x..x{}", model.t_frames, model.c_h),
                    format!("{:?}", f.dim()),
                ));
            }
        }
    }
    Ok(())
}

/// Train the denoiser. Every randomness source (example choice, noise level,
/// supervision source, dropout width, corruption noise) is drawn from one
/// seeded stream, so runs are bit-reproducible.
pub fn train_stage2<F>(
    model: &mut Denoiser,
    examples: &[Stage2Example],
    n_context: usize,
    cfg: &Stage2TrainConfig,
    mut on_step: F,
) -> Result<()>
where
    F: FnMut(&Stage2LogRow),
{
    train_stage2_inner(model, examples, n_context, cfg, |row, _| on_step(row))
}

/// Parameter snapshot taken during training.
pub struct Stage2Snapshot {
    /// Number of optimizer steps applied when the snapshot was taken.
    pub steps_done: usize,
    pub params: crate::nn::params::ParamSet,
}

/// Like `train_stage2` but additionally clones the parameters every `every`
/// steps (and at the end), for post-hoc evaluation of training trajectories.
pub fn train_stage2_snapshots<F>(
    model: &mut Denoiser,
    examples: &[Stage2Example],
    n_context: usize,
    cfg: &Stage2TrainConfig,
    every: usize,
    mut on_step: F,
) -> Result<Vec<Stage2Snapshot>>
where
    F: FnMut(&Stage2LogRow),
{
    if every == 0 {
        return Err(Error::Argument("snapshot interval must be >= 1".into()));
    }
    let mut snaps = Vec::new();
    train_stage2_inner(model, examples, n_context, cfg, |row, params| {
        on_step(row);
        let done = row.step + 1;
        if done % every == 0 || done == cfg.steps {
            snaps.push(Stage2Snapshot {
                steps_done: done,
                params: params.clone(),
            });
        }
    })?;
    Ok(snaps)
}

fn train_stage2_inner<F>(
    model: &mut Denoiser,
    examples: &[Stage2Example],
    n_context: usize,
    cfg: &Stage2TrainConfig,
    mut hook: F,
) -> Result<()>
where
    F: FnMut(&Stage2LogRow, &crate::nn::params::ParamSet),
{
    use rand::Rng;
    check_examples(model, examples, n_context)?;
    cfg.mixed.validate()?;
    if cfg.mode != ConditioningMode::NoFeatures {
        cfg.dropout.validate(model.c_h)?;
    }
    let mut rng = seeded_rng(cfg.seed, 91);
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            beta1: 0.9,
            beta2: 0.99,
            warmup_steps: cfg.warmup_steps,
            schedule: match cfg.schedule {
                ScheduleKind::Cosine => LrSchedule::Cosine {
                    total_steps: cfg.steps,
                },
                ScheduleKind::Constant => LrSchedule::Constant,
            },
            ..AdamConfig::default()
        },
        &model.params,
    );
    for step in 0..cfg.steps {
        let ex = &examples[rng.gen_range(0..examples.len())];
        let sigma = sample_noise_level(&mut rng);
        let (features, keep) = match cfg.mode {
            ConditioningMode::NoFeatures => {
                (Array4::<f32>::zeros(ex.gt_features.dim()), model.c_h)
            }
            mode => {
                let source = if mode == ConditioningMode::GroundTruthOnly {
                    SupervisionSource::GroundTruth
                } else {
                    cfg.mixed.sample_source(&mut rng)
                };
                let base = match source {
                    SupervisionSource::GroundTruth => &ex.gt_features,
                    SupervisionSource::Forecast => &ex.forecast_features,
                };
                let keep = cfg.dropout.sample_keep(&mut rng);
                (nested_dropout(base, keep)?, keep)
            }
        };
        // corrupt only the future frames; context stays clean
        let mut noised = ex.latents.clone();
        for t in n_context..model.t_frames {
            let frame = noised.index_axis(Axis(0), t).to_owned().into_dyn();
            let corrupted = add_noise(&frame, sigma, &mut rng);
            noised
                .index_axis_mut(Axis(0), t)
                .assign(&corrupted.into_dimensionality::<ndarray::Ix3>().unwrap());
        }
        let (loss, grads) =
            diffusion_loss_and_grads(model, &noised, &ex.latents, &features, sigma, n_context)?;
        opt.update(&mut model.params, &grads);
        hook(
            &Stage2LogRow {
                step,
                loss,
                sigma,
                keep_channels: keep,
            },
            &model.params,
        );
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SavedShape {
    cfg: DenoiserConfig,
    t_frames: usize,
    h_l: usize,
    w_l: usize,
    c_z: usize,
    c_h: usize,
    mode: ConditioningMode,
}

pub fn save_denoiser(
    path: &std::path::Path,
    model: &Denoiser,
    mode: ConditioningMode,
    fingerprints: &[(&str, &str)],
) -> Result<()> {
    let meta = CheckpointMeta {
        kind: "stage2".into(),
        config_json: serde_json::to_string(&SavedShape {
            cfg: model.cfg.clone(),
            t_frames: model.t_frames,
            h_l: model.h_l,
            w_l: model.w_l,
            c_z: model.c_z,
            c_h: model.c_h,
            mode,
        })
        .map_err(|e| Error::Serialization(e.to_string()))?,
        fingerprints: fingerprints
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
    };
    crate::artifact::write_checkpoint(path, &meta, model.params.names(), model.params.values())
}

pub fn load_denoiser(
    path: &std::path::Path,
    expected_fingerprints: &[(&str, &str)],
) -> Result<(Denoiser, ConditioningMode)> {
    let (meta, entries) = crate::artifact::read_checkpoint(path)?;
    if meta.kind != "stage2" {
        return Err(Error::Serialization(format!(
            "expected a stage2 checkpoint, got {}",
            meta.kind
        )));
    }
    for (k, v) in expected_fingerprints {
        match meta.fingerprints.get(*k) {
            Some(have) if have == v => {}
            other => {
                return Err(Error::CacheInvalid(format!(
                    "stage2 checkpoint fingerprint {k} mismatch: {other:?} != {v}"
                )))
            }
        }
    }
    let shape: SavedShape = serde_json::from_str(&meta.config_json)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    let mut model = Denoiser::new(
        shape.cfg,
        shape.t_frames,
        shape.h_l,
        shape.w_l,
        shape.c_z,
        shape.c_h,
    )?;
    model.params.load(&entries)?;
    Ok((model, shape.mode))
}
