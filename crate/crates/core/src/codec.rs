//! Lossless latent codec: space-to-depth spatial compression with causal
//! temporal grouping (frame 1 alone, then groups of `r`), plus per-channel
//! normalization fit on training latents. Exactly invertible, so the latent
//! grid plays the architectural role of a VAE latent without reconstruction
//! error.

use ndarray::{Array1, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    /// Spatial space-to-depth factor.
    pub spatial_factor: usize,
    /// Temporal grouping factor.
    pub temporal_factor: usize,
    #[serde(default)]
    pub norm_mean: Vec<f64>,
    #[serde(default)]
    pub norm_std: Vec<f64>,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            spatial_factor: 4,
            temporal_factor: 4,
            norm_mean: Vec::new(),
            norm_std: Vec::new(),
        }
    }
}

pub const STD_FLOOR: f64 = 1e-6;

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spatial_factor < 1 || self.temporal_factor < 1 {
            return Err(Error::Config("codec factors must be >= 1".into()));
        }
        if !self.norm_std.is_empty() && self.norm_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("codec.norm_std must be positive".into()));
        }
        Ok(())
    }

    /// Latent channel count for RGB input.
    pub fn latent_channels(&self) -> usize {
        3 * self.spatial_factor * self.spatial_factor * self.temporal_factor
    }

    /// Latent shape `(T_z, H_z, W_z, C_z)` for a `K x H x W x 3` clip.
    pub fn latent_shape(&self, k: usize, h: usize, w: usize) -> Result<(usize, usize, usize, usize)> {
        let (s, r) = (self.spatial_factor, self.temporal_factor);
        if h % s != 0 || w % s != 0 {
            return Err(Error::shape(
                format!("H, W divisible by {s}"),
                format!("{h}x{w}"),
            ));
        }
        if (k - 1) % r != 0 {
            return Err(Error::shape(
                format!("(K-1) divisible by {r}"),
                format!("K={k}"),
            ));
        }
        Ok((1 + (k - 1) / r, h / s, w / s, self.latent_channels()))
    }

    /// 0-based frame indices `{0, r, 2r, ...}`: the temporally latest frame of
    /// each causal group. These are the frames stage-1 features align with.
    pub fn group_anchor_indices(&self, k: usize) -> Vec<usize> {
        let r = self.temporal_factor;
        (0..k).step_by(r).collect()
    }

    /// 0-based source frames packed into latent frame `j`.
    fn group_frames(&self, j: usize) -> Vec<usize> {
        let r = self.temporal_factor;
        if j == 0 {
            vec![0; r] // frame 1 alone, repetition-padded to group size
        } else {
            // 1-based group (j-1)*r+2 ..= j*r+1 for 0-based latent index j,
            // shifted to 0-based frame indices
            let start = (j - 1) * r + 1;
            (start..start + r).collect()
        }
    }
}

/// Latent frames `T_z x H_z x W_z x C_z` in f64.
pub type LatentTensor = Array4<f64>;

/// Encode a clip into normalized latents.
pub fn encode(frames: &Array4<f32>, cfg: &CodecConfig) -> Result<LatentTensor> {
    cfg.validate()?;
    let (k, h, w, c) = frames.dim();
    if c != 3 {
        return Err(Error::shape("3 channels", format!("{c}")));
    }
    let (tz, hz, wz, cz) = cfg.latent_shape(k, h, w)?;
    let s = cfg.spatial_factor;
    let mut out = Array4::<f64>::zeros((tz, hz, wz, cz));
    for j in 0..tz {
        let group = cfg.group_frames(j);
        for (gi, &t) in group.iter().enumerate() {
            for hz_i in 0..hz {
                for wz_i in 0..wz {
                    for dy in 0..s {
                        for dx in 0..s {
                            for ch in 0..3 {
                                let cidx = ((gi * s + dy) * s + dx) * 3 + ch;
                                out[[j, hz_i, wz_i, cidx]] =
                                    frames[[t, hz_i * s + dy, wz_i * s + dx, ch]] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    if !cfg.norm_mean.is_empty() {
        if cfg.norm_mean.len() != cz || cfg.norm_std.len() != cz {
            return Err(Error::shape(
                format!("norm vectors of length {cz}"),
                format!("{}/{}", cfg.norm_mean.len(), cfg.norm_std.len()),
            ));
        }
        for mut lane in out.lanes_mut(Axis(3)) {
            for (i, v) in lane.iter_mut().enumerate() {
                *v = (*v - cfg.norm_mean[i]) / cfg.norm_std[i];
            }
        }
    }
    Ok(out)
}

/// Exact inverse of `encode` (up to float normalization round-trip).
pub fn decode(latents: &LatentTensor, k: usize, cfg: &CodecConfig) -> Result<Array4<f32>> {
    cfg.validate()?;
    let (tz, hz, wz, cz) = latents.dim();
    let s = cfg.spatial_factor;
    let (etz, ehz, ewz, ecz) = cfg.latent_shape(k, hz * s, wz * s)?;
    if (tz, hz, wz, cz) != (etz, ehz, ewz, ecz) {
        return Err(Error::shape(
            format!("latents {etz}x{ehz}x{ewz}x{ecz}"),
            format!("{tz}x{hz}x{wz}x{cz}"),
        ));
    }
    let mut denorm = latents.clone();
    if !cfg.norm_mean.is_empty() {
        for mut lane in denorm.lanes_mut(Axis(3)) {
            for (i, v) in lane.iter_mut().enumerate() {
                *v = *v * cfg.norm_std[i] + cfg.norm_mean[i];
            }
        }
    }
    let mut frames = Array4::<f32>::zeros((k, hz * s, wz * s, 3));
    for j in 0..tz {
        let group = cfg.group_frames(j);
        for (gi, &t) in group.iter().enumerate() {
            // for j == 0 the group repeats frame 0; every copy decodes to the
            // same values, so overwriting is harmless
            for hz_i in 0..hz {
                for wz_i in 0..wz {
                    for dy in 0..s {
                        for dx in 0..s {
                            for ch in 0..3 {
                                let cidx = ((gi * s + dy) * s + dx) * 3 + ch;
                                frames[[t, hz_i * s + dy, wz_i * s + dx, ch]] =
                                    denorm[[j, hz_i, wz_i, cidx]] as f32;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(frames)
}

/// Per-channel empirical mean/std over a set of (unnormalized) latents, with
/// the std floored at `STD_FLOOR`.
pub fn fit_normalization(latents: &[LatentTensor]) -> Result<(Vec<f64>, Vec<f64>)> {
    if latents.is_empty() {
        return Err(Error::Fit("cannot fit normalization on an empty set".into()));
    }
    let cz = latents[0].dim().3;
    let mut sum = Array1::<f64>::zeros(cz);
    let mut sumsq = Array1::<f64>::zeros(cz);
    let mut count = 0usize;
    for l in latents {
        if l.dim().3 != cz {
            return Err(Error::shape(format!("{cz} channels"), format!("{}", l.dim().3)));
        }
        for lane in l.lanes(Axis(3)) {
            for (i, &v) in lane.iter().enumerate() {
                sum[i] += v;
                sumsq[i] += v * v;
            }
            count += 1;
        }
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|&s| s / n).collect();
    let std: Vec<f64> = sumsq
        .iter()
        .zip(mean.iter())
        .map(|(&sq, &m)| ((sq / n - m * m).max(0.0)).sqrt().max(STD_FLOOR))
        .collect();
    Ok((mean, std))
}

/// Latent-frame count of the context split: latent frames covering frames 1..=M.
pub fn context_latent_frames(m: usize, r: usize) -> Result<usize> {
    if (m - 1) % r != 0 {
        return Err(Error::Argument(format!(
            "(M-1) must be divisible by r, got M={m}, r={r}"
        )));
    }
    Ok(1 + (m - 1) / r)
}
