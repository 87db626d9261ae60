//! End-to-end orchestration: data generation, feature extraction and
//! projection, latent encoding, training-example assembly, and the full
//! rollout → sampling → decode → metrics evaluation protocol.

use ndarray::{Array2, Array3, Array4, Axis};

use crate::codec::{self, CodecConfig, LatentTensor};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evalsuite::{
    downsample_masks, frechet_feature_distance, miou, psnr, train_probe, MetricsReport,
    ProbeHead, ProbeTrainConfig,
};
use crate::features::{
    fit_pca, project, subsample_indices, temporal_subsample, FrozenEncoder, PcaProjection,
};
use crate::stage1::{rollout_errors, Forecaster};
use crate::stage2::model::Denoiser;
use crate::stage2::sample::{sample_latents, GuidanceConfig, SamplerConfig};
use crate::stage2::train::Stage2Example;
use crate::synthworld::{generate_clip, split_of, VideoSample};

/// Shared upstream artifacts: clips, per-clip projected anchor-frame features,
/// per-clip normalized latents, and the frozen transforms that produced them.
pub struct Prepared {
    pub clips: Vec<VideoSample>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub encoder: FrozenEncoder,
    pub pca: PcaProjection,
    /// Codec with fitted normalization statistics.
    pub codec: CodecConfig,
    /// `[T_lat, H_h, W_h, C_h]` per clip: PCA-projected features at the
    /// anchor frames.
    pub features: Vec<Array4<f32>>,
    /// `[T_lat, H_l, W_l, C_z]` per clip.
    pub latents: Vec<LatentTensor>,
}

impl Prepared {
    /// Number of latent (and anchor feature) frames per clip.
    pub fn latent_frames(&self) -> usize {
        self.latents[0].dim().0
    }

    pub fn train_features(&self) -> Vec<Array4<f32>> {
        self.train_idx.iter().map(|&i| self.features[i].clone()).collect()
    }

    pub fn val_features(&self) -> Vec<Array4<f32>> {
        self.val_idx.iter().map(|&i| self.features[i].clone()).collect()
    }
}

/// Build every shared artifact from the config: generate clips, extract and
/// subsample frozen-encoder features, fit PCA on the train split, project all
/// clips, encode latents, and fit latent normalization on the train split.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let mut world = cfg.world.clone();
    world.seed = cfg.seeds.data;
    let clips: Vec<VideoSample> = (0..world.num_clips)
        .map(|i| generate_clip(&world, i))
        .collect::<Result<_>>()?;
    let train_idx: Vec<usize> = (0..clips.len()).filter(|&i| split_of(i) == "train").collect();
    let val_idx: Vec<usize> = (0..clips.len()).filter(|&i| split_of(i) == "val").collect();
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Config("dataset must have both splits".into()));
    }

    let encoder = FrozenEncoder::new(cfg.encoder.clone())?;
    let r = cfg.codec.temporal_factor;
    let raw: Vec<Array4<f32>> = clips
        .iter()
        .map(|c| {
            let anchors = temporal_subsample(&c.frames, r)?;
            encoder.encode_frames(&anchors)
        })
        .collect::<Result<_>>()?;
    let train_raw: Vec<Array4<f32>> = train_idx.iter().map(|&i| raw[i].clone()).collect();
    let pca = fit_pca(&train_raw, cfg.pca.c_h)?;
    let features: Vec<Array4<f32>> = raw.iter().map(|m| project(m, &pca)).collect::<Result<_>>()?;

    let mut codec = cfg.codec.clone();
    codec.norm_mean = Vec::new();
    codec.norm_std = Vec::new();
    let unnormalized: Vec<LatentTensor> = clips
        .iter()
        .map(|c| codec::encode(&c.frames, &codec))
        .collect::<Result<_>>()?;
    let train_lat: Vec<LatentTensor> =
        train_idx.iter().map(|&i| unnormalized[i].clone()).collect();
    let (mean, std) = codec::fit_normalization(&train_lat)?;
    codec.norm_mean = mean;
    codec.norm_std = std;
    let latents: Vec<LatentTensor> = clips
        .iter()
        .map(|c| codec::encode(&c.frames, &codec))
        .collect::<Result<_>>()?;

    Ok(Prepared {
        clips,
        train_idx,
        val_idx,
        encoder,
        pca,
        codec,
        features,
        latents,
    })
}

/// Number of context latent frames implied by `eval.m_context`.
pub fn context_latent_frames(cfg: &ExperimentConfig) -> Result<usize> {
    codec::context_latent_frames(cfg.eval.m_context, cfg.codec.temporal_factor)
}

/// Project one frame stack through encoder + PCA (no temporal subsampling).
pub fn frame_features(
    encoder: &FrozenEncoder,
    pca: &PcaProjection,
    frames: &Array4<f32>,
) -> Result<Array4<f32>> {
    project(&encoder.encode_frames(frames)?, pca)
}

/// Replace the future feature frames with forecaster rollouts; context frames
/// stay ground truth. This is the conditioning stack the sampler sees.
pub fn forecast_feature_stack(
    stage1: &Forecaster,
    gt_features: &Array4<f32>,
    n_context: usize,
) -> Result<Array4<f32>> {
    let t = gt_features.dim().0;
    if n_context >= t {
        return Err(Error::Argument("no future feature frames".into()));
    }
    let ctx = gt_features
        .slice_axis(Axis(0), ndarray::Slice::from(0..n_context))
        .to_owned();
    let rolled = stage1.rollout(&ctx, t - n_context)?;
    let mut out = gt_features.clone();
    for (s, frame) in rolled.axis_iter(Axis(0)).enumerate() {
        out.index_axis_mut(Axis(0), n_context + s).assign(&frame);
    }
    Ok(out)
}

/// Assemble stage-2 training examples for the given clip indices.
pub fn stage2_examples(
    prepared: &Prepared,
    stage1: &Forecaster,
    idx: &[usize],
    n_context: usize,
) -> Result<Vec<Stage2Example>> {
    idx.iter()
        .map(|&i| {
            let gt = prepared.features[i].clone();
            let forecast = forecast_feature_stack(stage1, &gt, n_context)?;
            Ok(Stage2Example {
                latents: prepared.latents[i].clone(),
                gt_features: gt,
                forecast_features: forecast,
            })
        })
        .collect()
}

/// Train the linear probe on ground-truth train-split anchor frames.
pub fn train_pipeline_probe(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<ProbeHead> {
    let patch = cfg.encoder.patch_size;
    let num_classes = cfg.world.num_classes();
    let mut rows: Vec<f64> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    let c_h = cfg.pca.c_h;
    for &i in &prepared.train_idx {
        let feats = &prepared.features[i];
        let anchors = subsample_indices(cfg.world.k, cfg.codec.temporal_factor);
        let masks = prepared.clips[i].masks.select(Axis(0), &anchors);
        let grid = downsample_masks(&masks, patch)?;
        let (t, h, w, _) = feats.dim();
        if grid.dim() != (t, h, w) {
            return Err(Error::shape(
                format!("{t}x{h}x{w}"),
                format!("{:?}", grid.dim()),
            ));
        }
        for ((ti, y, x), &lab) in grid.indexed_iter() {
            labels.push(lab);
            for ch in 0..c_h {
                rows.push(feats[[ti, y, x, ch]] as f64);
            }
        }
    }
    let n = labels.len();
    let x = Array2::from_shape_vec((n, c_h), rows).unwrap();
    train_probe(
        &x,
        &labels,
        num_classes,
        &prepared.pca.fingerprint(),
        &ProbeTrainConfig::default(),
    )
}

/// Everything needed to score one clip's prediction.
pub struct EvalOutcome {
    pub report: MetricsReport,
    /// Decoded predicted frames, full clip length.
    pub decoded: Array4<f32>,
}

/// Patch-level feature rows of the given frames (encoder + PCA), pooled over
/// frames — the sample population for the Fréchet distance.
pub fn ffd_rows(
    encoder: &FrozenEncoder,
    pca: &PcaProjection,
    frames: &Array4<f32>,
) -> Result<Array2<f64>> {
    let f = frame_features(encoder, pca, frames)?;
    let (t, h, w, c) = f.dim();
    Ok(Array2::from_shape_vec(
        (t * h * w, c),
        f.as_standard_layout().iter().map(|&v| v as f64).collect(),
    )
    .unwrap())
}

/// Full evaluation protocol on one validation clip: stage-1 rollout, stage-2
/// sampling, decode, probe mIoU on the predicted anchor frames, FFD against
/// the clip's real future anchor frames, PSNR over the future segment.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_clip(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    stage1: &Forecaster,
    stage2: &Denoiser,
    probe: &ProbeHead,
    clip_index: usize,
    sampler: &SamplerConfig,
    guidance: Option<&GuidanceConfig>,
    inference_channels: Option<usize>,
    zero_features: bool,
) -> Result<EvalOutcome> {
    if probe.trained_on != prepared.pca.fingerprint() {
        return Err(Error::CacheInvalid(
            "probe was trained on different features than this pipeline".into(),
        ));
    }
    let clip = &prepared.clips[clip_index];
    let gt_features = &prepared.features[clip_index];
    let latents = &prepared.latents[clip_index];
    let n_ctx_lat = context_latent_frames(cfg)?;
    let t_lat = gt_features.dim().0;

    // stage 1: forecast the future anchor features
    let cond = forecast_feature_stack(stage1, gt_features, n_ctx_lat)?;
    let gt_future = gt_features
        .slice_axis(Axis(0), ndarray::Slice::from(n_ctx_lat..t_lat))
        .to_owned();
    let ctx_features = gt_features
        .slice_axis(Axis(0), ndarray::Slice::from(0..n_ctx_lat))
        .to_owned();
    let roll_err = rollout_errors(stage1, &ctx_features, &gt_future)?;

    // conditioning variants used by the ablations
    let cond = if zero_features {
        Array4::<f32>::zeros(cond.dim())
    } else if let Some(keep) = inference_channels {
        crate::stage2::edm::nested_dropout(&cond, keep)?
    } else {
        cond
    };

    // stage 2: sample future latents given clean context latents
    let ctx_latents = latents
        .slice_axis(Axis(0), ndarray::Slice::from(0..n_ctx_lat))
        .to_owned();
    let sampled = sample_latents(stage2, &ctx_latents, &cond, sampler, guidance)?;
    let decoded = codec::decode(&sampled, cfg.world.k, &prepared.codec)?;

    // predicted anchor frames for semantic scoring
    let anchors = subsample_indices(cfg.world.k, cfg.codec.temporal_factor);
    let future_anchor_frames: Vec<usize> = anchors[n_ctx_lat..].to_vec();
    let pred_anchor = decoded.select(Axis(0), &future_anchor_frames);
    let gt_anchor = clip.frames.select(Axis(0), &future_anchor_frames);
    let gt_anchor_masks = clip.masks.select(Axis(0), &future_anchor_frames);

    let pred_feats = frame_features(&prepared.encoder, &prepared.pca, &pred_anchor)?;
    let pred_masks = probe.predict_masks(&pred_feats)?;
    let gt_grid = downsample_masks(&gt_anchor_masks, cfg.encoder.patch_size)?;
    let (_, miou_all) = miou(&pred_masks, &gt_grid, None)?;
    let moving = cfg.world.moving_classes();
    let iou_moving = match miou(&pred_masks, &gt_grid, Some(&moving)) {
        Ok((_, m)) => m,
        // no moving class visible in this clip's future frames
        Err(_) => f64::NAN,
    };

    let pred_rows = ffd_rows(&prepared.encoder, &prepared.pca, &pred_anchor)?;
    let gt_rows = ffd_rows(&prepared.encoder, &prepared.pca, &gt_anchor)?;
    let ffd = frechet_feature_distance(&pred_rows, &gt_rows)?;

    // PSNR over the whole predicted future segment (original frame rate)
    let m = cfg.eval.m_context;
    let pred_future = decoded.slice_axis(Axis(0), ndarray::Slice::from(m..cfg.world.k)).to_owned();
    let gt_future_frames = clip
        .frames
        .slice_axis(Axis(0), ndarray::Slice::from(m..cfg.world.k))
        .to_owned();
    let psnr_db = psnr(&pred_future, &gt_future_frames)?;

    let mut fingerprints = std::collections::BTreeMap::new();
    fingerprints.insert("pca".to_string(), prepared.pca.fingerprint());
    fingerprints.insert("encoder".to_string(), prepared.encoder.checksum());
    let report = MetricsReport {
        frame_set: format!(
            "clip {clip_index} ({}), predicted anchor frames {:?}",
            split_of(clip_index),
            future_anchor_frames
        ),
        miou_all,
        iou_moving,
        ffd,
        psnr_db,
        rollout_smooth_l1: roll_err,
        fingerprints,
    };
    Ok(EvalOutcome { report, decoded })
}

/// Pooled evaluation over several clips: FFD on the pooled populations,
/// means of the per-clip probe metrics, PSNR averaged.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_clips(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    stage1: &Forecaster,
    stage2: &Denoiser,
    probe: &ProbeHead,
    clip_indices: &[usize],
    sampler: &SamplerConfig,
    guidance: Option<&GuidanceConfig>,
    inference_channels: Option<usize>,
    zero_features: bool,
) -> Result<MetricsReport> {
    if clip_indices.is_empty() {
        return Err(Error::Argument("no clips to evaluate".into()));
    }
    let n_ctx_lat = context_latent_frames(cfg)?;
    let anchors = subsample_indices(cfg.world.k, cfg.codec.temporal_factor);
    let future_anchor_frames: Vec<usize> = anchors[n_ctx_lat..].to_vec();

    let mut pred_rows: Vec<Array2<f64>> = Vec::new();
    let mut gt_rows: Vec<Array2<f64>> = Vec::new();
    let mut pred_mask_stack: Vec<Array3<u8>> = Vec::new();
    let mut gt_mask_stack: Vec<Array3<u8>> = Vec::new();
    let mut psnr_sum = 0.0;
    let mut roll_acc: Option<Vec<f64>> = None;
    let mut fingerprints = std::collections::BTreeMap::new();

    for &ci in clip_indices {
        let outcome = evaluate_clip(
            cfg,
            prepared,
            stage1,
            stage2,
            probe,
            ci,
            sampler,
            guidance,
            inference_channels,
            zero_features,
        )?;
        let clip = &prepared.clips[ci];
        let pred_anchor = outcome.decoded.select(Axis(0), &future_anchor_frames);
        let gt_anchor = clip.frames.select(Axis(0), &future_anchor_frames);
        pred_rows.push(ffd_rows(&prepared.encoder, &prepared.pca, &pred_anchor)?);
        gt_rows.push(ffd_rows(&prepared.encoder, &prepared.pca, &gt_anchor)?);
        let pred_feats = frame_features(&prepared.encoder, &prepared.pca, &pred_anchor)?;
        pred_mask_stack.push(probe.predict_masks(&pred_feats)?);
        gt_mask_stack.push(downsample_masks(
            &clip.masks.select(Axis(0), &future_anchor_frames),
            cfg.encoder.patch_size,
        )?);
        psnr_sum += outcome.report.psnr_db;
        roll_acc = Some(match roll_acc {
            None => outcome.report.rollout_smooth_l1.clone(),
            Some(acc) => acc
                .iter()
                .zip(&outcome.report.rollout_smooth_l1)
                .map(|(a, b)| a + b)
                .collect(),
        });
        fingerprints = outcome.report.fingerprints;
    }

    let stack_masks = |v: Vec<Array3<u8>>| -> Array3<u8> {
        let (t, h, w) = v[0].dim();
        let mut out = Array3::<u8>::zeros((t * v.len(), h, w));
        for (i, m) in v.iter().enumerate() {
            out.slice_mut(ndarray::s![i * t..(i + 1) * t, .., ..]).assign(m);
        }
        out
    };
    let pred_masks = stack_masks(pred_mask_stack);
    let gt_masks = stack_masks(gt_mask_stack);
    let (_, miou_all) = miou(&pred_masks, &gt_masks, None)?;
    let moving = cfg.world.moving_classes();
    let (_, iou_moving) = miou(&pred_masks, &gt_masks, Some(&moving))?;

    let concat_rows = |v: Vec<Array2<f64>>| -> Array2<f64> {
        let d = v[0].dim().1;
        let n: usize = v.iter().map(|m| m.dim().0).sum();
        let mut out = Array2::<f64>::zeros((n, d));
        let mut off = 0;
        for m in v {
            let k = m.dim().0;
            out.slice_mut(ndarray::s![off..off + k, ..]).assign(&m);
            off += k;
        }
        out
    };
    let ffd = frechet_feature_distance(&concat_rows(pred_rows), &concat_rows(gt_rows))?;
    let n = clip_indices.len() as f64;
    let rollout_smooth_l1 = roll_acc
        .unwrap()
        .into_iter()
        .map(|v| v / n)
        .collect();

    Ok(MetricsReport {
        frame_set: format!(
            "clips {:?}, predicted anchor frames {:?}",
            clip_indices, future_anchor_frames
        ),
        miou_all,
        iou_moving,
        ffd,
        psnr_db: psnr_sum / n,
        rollout_smooth_l1,
        fingerprints,
    })
}
