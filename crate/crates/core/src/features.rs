//! Frozen multi-depth patch encoder and PCA projection.
//!
//! The encoder is a fixed, randomly initialized convolutional patch network;
//! intermediate activations from the configured tap layers are concatenated
//! along channels and projected by PCA into a variance-ordered channel space.
//! Weights are generated once from `freeze_seed` and never updated.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::params::seeded_rng;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FrozenEncoderConfig {
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    /// 1-based layer indices whose outputs are concatenated.
    pub tap_layers: Vec<usize>,
    pub freeze_seed: u64,
}

impl Default for FrozenEncoderConfig {
    fn default() -> Self {
        FrozenEncoderConfig {
            patch_size: 4,
            depth: 8,
            width: 32,
            tap_layers: vec![2, 4, 6, 8],
            freeze_seed: 7,
        }
    }
}

impl FrozenEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.depth == 0 || self.width == 0 {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        if self.tap_layers.is_empty() {
            return Err(Error::Config("encoder.tap_layers must be non-empty".into()));
        }
        let sorted = self.tap_layers.windows(2).all(|w| w[0] < w[1]);
        if !sorted || self.tap_layers[0] < 1 || *self.tap_layers.last().unwrap() > self.depth {
            return Err(Error::Config(
                "encoder.tap_layers must be sorted within [1, depth]".into(),
            ));
        }
        Ok(())
    }

    pub fn raw_channels(&self) -> usize {
        self.tap_layers.len() * self.width
    }
}

/// Frozen encoder weights. Construction from the same config is bit-stable
/// across process restarts.
pub struct FrozenEncoder {
    pub cfg: FrozenEncoderConfig,
    /// Patch embedding: `[width, 3 * p * p]`.
    patch_w: Array2<f32>,
    patch_b: Array1<f32>,
    /// 3x3 same-padding convs: `[width, width, 3, 3]` each.
    convs: Vec<(Array4<f32>, Array1<f32>)>,
}

impl FrozenEncoder {
    pub fn new(cfg: FrozenEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(cfg.freeze_seed, 11);
        let p = cfg.patch_size;
        let fan_in = 3 * p * p;
        let dist = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
        let patch_w = Array2::from_shape_fn((cfg.width, fan_in), |_| dist.sample(&mut rng) as f32);
        let patch_b = Array1::zeros(cfg.width);
        let cdist = Normal::new(0.0, (1.0 / (9 * cfg.width) as f64).sqrt()).unwrap();
        let convs = (0..cfg.depth)
            .map(|_| {
                let w = Array4::from_shape_fn((cfg.width, cfg.width, 3, 3), |_| {
                    cdist.sample(&mut rng) as f32
                });
                (w, Array1::zeros(cfg.width))
            })
            .collect();
        Ok(FrozenEncoder {
            cfg,
            patch_w,
            patch_b,
            convs,
        })
    }

    /// SHA-256 over all weight bytes; constant for the lifetime of the run.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.patch_w.iter().chain(self.patch_b.iter()) {
            h.update(v.to_le_bytes());
        }
        for (w, b) in &self.convs {
            for v in w.iter().chain(b.iter()) {
                h.update(v.to_le_bytes());
            }
        }
        hex_digest(h)
    }

    /// Encode frames independently: `T x H x W x 3` -> `T x H_h x W_h x C_raw`.
    pub fn encode_frames(&self, frames: &Array4<f32>) -> Result<Array4<f32>> {
        let (t, h, w, c) = frames.dim();
        let p = self.cfg.patch_size;
        if c != 3 {
            return Err(Error::shape("3 channels", format!("{c}")));
        }
        if h % p != 0 || w % p != 0 {
            return Err(Error::shape(
                format!("H, W divisible by patch size {p}"),
                format!("{h}x{w}"),
            ));
        }
        let (hh, wh) = (h / p, w / p);
        let craw = self.cfg.raw_channels();
        let mut out = Array4::<f32>::zeros((t, hh, wh, craw));
        for ti in 0..t {
            let frame = frames.index_axis(Axis(0), ti);
            // patch embedding
            let mut act = Array3::<f32>::zeros((hh, wh, self.cfg.width));
            for y in 0..hh {
                for x in 0..wh {
                    let mut patch = Vec::with_capacity(3 * p * p);
                    for dy in 0..p {
                        for dx in 0..p {
                            for ch in 0..3 {
                                patch.push(frame[[y * p + dy, x * p + dx, ch]]);
                            }
                        }
                    }
                    for o in 0..self.cfg.width {
                        let mut s = self.patch_b[o];
                        for (i, &v) in patch.iter().enumerate() {
                            s += self.patch_w[[o, i]] * v;
                        }
                        act[[y, x, o]] = s.tanh();
                    }
                }
            }
            // conv stack with taps
            let mut tap_cursor = 0usize;
            for (li, (w3, b3)) in self.convs.iter().enumerate() {
                let mut next = Array3::<f32>::zeros((hh, wh, self.cfg.width));
                for y in 0..hh {
                    for x in 0..wh {
                        for o in 0..self.cfg.width {
                            let mut s = b3[o];
                            for dy in 0..3usize {
                                for dx in 0..3usize {
                                    let yy = y as isize + dy as isize - 1;
                                    let xx = x as isize + dx as isize - 1;
                                    if yy < 0 || xx < 0 || yy >= hh as isize || xx >= wh as isize {
                                        continue;
                                    }
                                    for i in 0..self.cfg.width {
                                        s += w3[[o, i, dy, dx]]
                                            * act[[yy as usize, xx as usize, i]];
                                    }
                                }
                            }
                            next[[y, x, o]] = s.tanh();
                        }
                    }
                }
                // residual keeps early color information visible at deep taps
                act = &act + &next;
                if self.cfg.tap_layers.contains(&(li + 1)) {
                    let off = tap_cursor * self.cfg.width;
                    for y in 0..hh {
                        for x in 0..wh {
                            for ch in 0..self.cfg.width {
                                out[[ti, y, x, off + ch]] = act[[y, x, ch]];
                            }
                        }
                    }
                    tap_cursor += 1;
                }
            }
        }
        Ok(out)
    }
}

/// Keep frame indices `{0, r, 2r, ...}` along the time axis. These align with
/// the causal anchor frame of each latent group.
pub fn temporal_subsample<T: Clone>(
    frames: &Array4<T>,
    r: usize,
) -> Result<Array4<T>> {
    if r < 1 {
        return Err(Error::Argument("subsample ratio r must be >= 1".into()));
    }
    let k = frames.dim().0;
    let idx: Vec<usize> = (0..k).step_by(r).collect();
    Ok(frames.select(Axis(0), &idx))
}

/// 0-based indices selected by `temporal_subsample`.
pub fn subsample_indices(k: usize, r: usize) -> Vec<usize> {
    (0..k).step_by(r).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub mean: Array1<f64>,
    /// `C_raw x C_h`, columns orthonormal, ordered by explained variance.
    pub components: Array2<f64>,
    /// Non-increasing.
    pub explained_variance: Array1<f64>,
}

impl PcaProjection {
    pub fn c_raw(&self) -> usize {
        self.components.nrows()
    }

    pub fn c_h(&self) -> usize {
        self.components.ncols()
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.mean.iter() {
            h.update(v.to_le_bytes());
        }
        for v in self.components.iter() {
            h.update(v.to_le_bytes());
        }
        hex_digest(h)
    }
}

fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Fit PCA on the patch vectors of a set of raw feature maps.
pub fn fit_pca(raw_maps: &[Array4<f32>], c_h: usize) -> Result<PcaProjection> {
    if raw_maps.is_empty() {
        return Err(Error::Fit("no feature maps to fit PCA on".into()));
    }
    let c_raw = raw_maps[0].dim().3;
    if c_h > c_raw {
        return Err(Error::Fit(format!("C_h={c_h} exceeds C_raw={c_raw}")));
    }
    let n_samples: usize = raw_maps.iter().map(|m| m.len() / c_raw).sum();
    if n_samples < c_raw {
        return Err(Error::Fit(format!(
            "need at least C_raw={c_raw} patch vectors, got {n_samples}"
        )));
    }
    // empirical mean
    let mut mean = Array1::<f64>::zeros(c_raw);
    for m in raw_maps {
        for lane in m.lanes(Axis(3)) {
            for (i, &v) in lane.iter().enumerate() {
                mean[i] += v as f64;
            }
        }
    }
    mean /= n_samples as f64;
    // covariance
    let mut cov = Array2::<f64>::zeros((c_raw, c_raw));
    let mut centered = vec![0.0f64; c_raw];
    for m in raw_maps {
        for lane in m.lanes(Axis(3)) {
            for (i, &v) in lane.iter().enumerate() {
                centered[i] = v as f64 - mean[i];
            }
            for i in 0..c_raw {
                let ci = centered[i];
                for j in i..c_raw {
                    cov[[i, j]] += ci * centered[j];
                }
            }
        }
    }
    for i in 0..c_raw {
        for j in 0..i {
            cov[[i, j]] = cov[[j, i]];
        }
    }
    cov /= n_samples as f64;

    let nmat = nalgebra::DMatrix::from_fn(c_raw, c_raw, |i, j| cov[[i, j]]);
    let eig = nalgebra::SymmetricEigen::new(nmat);
    let mut order: Vec<usize> = (0..c_raw).collect();
    // sort by eigenvalue descending; ties keep ascending original index
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut components = Array2::<f64>::zeros((c_raw, c_h));
    let mut explained = Array1::<f64>::zeros(c_h);
    for (col, &src) in order.iter().take(c_h).enumerate() {
        let v = eig.eigenvectors.column(src);
        // sign convention: first entry with non-negligible magnitude positive
        let sign = v
            .iter()
            .find(|x| x.abs() > 1e-12)
            .map(|x| if *x < 0.0 { -1.0 } else { 1.0 })
            .unwrap_or(1.0);
        for i in 0..c_raw {
            components[[i, col]] = v[i] * sign;
        }
        explained[col] = eig.eigenvalues[src].max(0.0);
    }
    Ok(PcaProjection {
        mean,
        components,
        explained_variance: explained,
    })
}

/// Persist a fitted projection in the shared checkpoint container.
pub fn save_pca(path: &std::path::Path, pca: &PcaProjection) -> Result<()> {
    let meta = crate::artifact::CheckpointMeta {
        kind: "pca".into(),
        config_json: format!(
            "{{\"c_raw\":{},\"c_h\":{}}}",
            pca.c_raw(),
            pca.c_h()
        ),
        fingerprints: [("self".to_string(), pca.fingerprint())].into(),
    };
    let names = vec![
        "mean".to_string(),
        "components".to_string(),
        "explained_variance".to_string(),
    ];
    let values = vec![
        pca.mean.clone().into_dyn(),
        pca.components.clone().into_dyn(),
        pca.explained_variance.clone().into_dyn(),
    ];
    crate::artifact::write_checkpoint(path, &meta, &names, &values)
}

pub fn load_pca(path: &std::path::Path) -> Result<PcaProjection> {
    let (meta, entries) = crate::artifact::read_checkpoint(path)?;
    if meta.kind != "pca" {
        return Err(Error::Serialization(format!(
            "expected a pca artifact, got {}",
            meta.kind
        )));
    }
    let mut map: std::collections::BTreeMap<String, ndarray::ArrayD<f64>> =
        entries.into_iter().collect();
    let take1 = |m: &mut std::collections::BTreeMap<String, ndarray::ArrayD<f64>>,
                 k: &str|
     -> Result<Array1<f64>> {
        m.remove(k)
            .ok_or_else(|| Error::Serialization(format!("pca artifact missing {k}")))?
            .into_dimensionality::<ndarray::Ix1>()
            .map_err(|e| Error::Serialization(e.to_string()))
    };
    let mean = take1(&mut map, "mean")?;
    let explained_variance = take1(&mut map, "explained_variance")?;
    let components = map
        .remove("components")
        .ok_or_else(|| Error::Serialization("pca artifact missing components".into()))?
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| Error::Serialization(e.to_string()))?;
    let pca = PcaProjection {
        mean,
        components,
        explained_variance,
    };
    match meta.fingerprints.get("self") {
        Some(fp) if *fp == pca.fingerprint() => Ok(pca),
        _ => Err(Error::CacheInvalid("pca artifact fingerprint mismatch".into())),
    }
}

/// Project raw features: `(raw - mean) . components` per patch vector.
/// Output is the variance-ordered `FeatureMap` (f32).
pub fn project(raw: &Array4<f32>, pca: &PcaProjection) -> Result<Array4<f32>> {
    let (t, h, w, c_raw) = raw.dim();
    if c_raw != pca.c_raw() {
        return Err(Error::shape(
            format!("{} raw channels", pca.c_raw()),
            format!("{c_raw}"),
        ));
    }
    let c_h = pca.c_h();
    let mut out = Array4::<f32>::zeros((t, h, w, c_h));
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                for col in 0..c_h {
                    let mut s = 0.0f64;
                    for i in 0..c_raw {
                        s += (raw[[ti, y, x, i]] as f64 - pca.mean[i]) * pca.components[[i, col]];
                    }
                    out[[ti, y, x, col]] = s as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Reconstruct raw vectors from projected ones: `mean + y . components^T`.
pub fn reconstruct(features: &Array4<f32>, pca: &PcaProjection) -> Result<Array4<f32>> {
    let (t, h, w, c_h) = features.dim();
    if c_h != pca.c_h() {
        return Err(Error::shape(
            format!("{} channels", pca.c_h()),
            format!("{c_h}"),
        ));
    }
    let c_raw = pca.c_raw();
    let mut out = Array4::<f32>::zeros((t, h, w, c_raw));
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                for i in 0..c_raw {
                    let mut s = pca.mean[i];
                    for col in 0..c_h {
                        s += features[[ti, y, x, col]] as f64 * pca.components[[i, col]];
                    }
                    out[[ti, y, x, i]] = s as f32;
                }
            }
        }
    }
    Ok(out)
}

const CACHE_MAGIC: &[u8; 4] = b"SVFC";
const CACHE_VERSION: u32 = 1;

/// Write a feature map with shape header and PCA fingerprint; atomic via
/// temp-file rename.
pub fn cache_features(
    path: &std::path::Path,
    features: &Array4<f32>,
    pca_fingerprint: &str,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    for d in features.shape() {
        buf.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    buf.push(1); // f32 payload flag
    let fp = pca_fingerprint.as_bytes();
    buf.extend_from_slice(&(fp.len() as u32).to_le_bytes());
    buf.extend_from_slice(fp);
    for v in features.as_standard_layout().iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_features(path: &std::path::Path, expected_fingerprint: &str) -> Result<Array4<f32>> {
    let buf = std::fs::read(path)?;
    let mut off = 0usize;
    let take = |buf: &[u8], off: &mut usize, n: usize| -> Result<Vec<u8>> {
        if *off + n > buf.len() {
            return Err(Error::CacheInvalid(format!(
                "truncated cache file {}",
                path_str(path)
            )));
        }
        let out = buf[*off..*off + n].to_vec();
        *off += n;
        Ok(out)
    };
    let magic = take(&buf, &mut off, 4)?;
    if magic != CACHE_MAGIC {
        return Err(Error::CacheInvalid(format!(
            "bad magic in {}",
            path_str(path)
        )));
    }
    let version = u32::from_le_bytes(take(&buf, &mut off, 4)?.try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(Error::CacheInvalid(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = u32::from_le_bytes(take(&buf, &mut off, 4)?.try_into().unwrap()) as usize;
    }
    let flag = take(&buf, &mut off, 1)?[0];
    if flag != 1 {
        return Err(Error::CacheInvalid("expected f32 payload".into()));
    }
    let fp_len = u32::from_le_bytes(take(&buf, &mut off, 4)?.try_into().unwrap()) as usize;
    let fp = String::from_utf8(take(&buf, &mut off, fp_len)?)
        .map_err(|_| Error::CacheInvalid("bad fingerprint encoding".into()))?;
    if fp != expected_fingerprint {
        return Err(Error::CacheInvalid(format!(
            "PCA fingerprint mismatch: cache has {fp}, expected {expected_fingerprint}"
        )));
    }
    let n: usize = dims.iter().product();
    let payload = take(&buf, &mut off, n * 4)?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), data)
        .map_err(|e| Error::CacheInvalid(format!("shape mismatch: {e}")))
}

fn path_str(p: &std::path::Path) -> String {
    p.display().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::Rng;

    #[test]
    fn pca_save_load_round_trip() {
        let mut rng = crate::nn::params::seeded_rng(33, 0);
        let maps =
            vec![Array4::from_shape_fn((4, 3, 3, 6), |_| rng.gen::<f32>() - 0.5)];
        let pca = fit_pca(&maps, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pca.bin");
        save_pca(&path, &pca).unwrap();
        let back = load_pca(&path).unwrap();
        assert_eq!(back, pca);
        assert_eq!(back.fingerprint(), pca.fingerprint());
    }

    fn enc() -> FrozenEncoder {
        FrozenEncoder::new(FrozenEncoderConfig {
            patch_size: 4,
            depth: 4,
            width: 8,
            tap_layers: vec![2, 4],
            freeze_seed: 3,
        })
        .unwrap()
    }

    fn random_frames(t: usize, h: usize, w: usize, seed: u64) -> Array4<f32> {
        let mut rng = seeded_rng(seed, 2);
        Array4::from_shape_fn((t, h, w, 3), |_| rng.gen::<f32>())
    }

    #[test]
    fn shape_contract() {
        let e = enc();
        let f = random_frames(1, 16, 16, 0);
        let out = e.encode_frames(&f).unwrap();
        assert_eq!(out.dim(), (1, 4, 4, 16));
        assert!(e.encode_frames(&random_frames(1, 15, 16, 0)).is_err());
    }

    #[test]
    fn frozen_weights_reproducible() {
        let e1 = enc();
        let e2 = enc();
        assert_eq!(e1.checksum(), e2.checksum());
        let f = random_frames(2, 16, 16, 1);
        assert_eq!(e1.encode_frames(&f).unwrap(), e2.encode_frames(&f).unwrap());
    }

    #[test]
    fn per_frame_independence() {
        let e = enc();
        let f = random_frames(3, 16, 16, 2);
        let out = e.encode_frames(&f).unwrap();
        let perm = f.select(Axis(0), &[2, 0, 1]);
        let out_perm = e.encode_frames(&perm).unwrap();
        assert_eq!(out.select(Axis(0), &[2, 0, 1]), out_perm);
    }

    #[test]
    fn subsample_indices_k25_r4() {
        assert_eq!(subsample_indices(25, 4), vec![0, 4, 8, 12, 16, 20, 24]);
        let f = random_frames(25, 4, 4, 3);
        assert_eq!(temporal_subsample(&f, 4).unwrap().dim().0, 7);
        assert_eq!(temporal_subsample(&f, 1).unwrap(), f);
        let single = random_frames(1, 4, 4, 3);
        assert_eq!(temporal_subsample(&single, 5).unwrap().dim().0, 1);
        assert!(temporal_subsample(&f, 0).is_err());
    }

    fn random_raw(n: usize, c: usize, seed: u64) -> Array4<f32> {
        let mut rng = seeded_rng(seed, 5);
        Array4::from_shape_fn((n, 1, 1, c), |_| rng.gen::<f32>() * 2.0 - 1.0)
    }

    #[test]
    fn pca_centering_and_orthonormality() {
        let raw = random_raw(500, 12, 0);
        let pca = fit_pca(&[raw.clone()], 6).unwrap();
        // mean projects to zero
        let mean_map = Array4::from_shape_fn((1, 1, 1, 12), |(_, _, _, i)| pca.mean[i] as f32);
        let proj = project(&mean_map, &pca).unwrap();
        // f32 storage of the mean loses a little; tolerance reflects that
        assert!(proj.iter().all(|v| v.abs() < 1e-4), "{proj:?}");
        // orthonormal columns
        let gram = pca.components.t().dot(&pca.components);
        for i in 0..6 {
            for j in 0..6 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - expect).abs() < 1e-5);
            }
        }
        // variance ordering
        for i in 0..5 {
            assert!(pca.explained_variance[i] >= pca.explained_variance[i + 1]);
        }
    }

    #[test]
    fn full_rank_projection_invertible() {
        let raw = random_raw(300, 8, 1);
        let pca = fit_pca(&[raw.clone()], 8).unwrap();
        let proj = project(&raw, &pca).unwrap();
        let back = reconstruct(&proj, &pca).unwrap();
        let max_err = raw
            .iter()
            .zip(back.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err < 1e-5, "{max_err}");
    }

    #[test]
    fn reconstruction_error_nonincreasing_in_ch() {
        let train = random_raw(400, 10, 2);
        let held = random_raw(100, 10, 3);
        let mut last = f64::INFINITY;
        for c_h in [2usize, 4, 6, 8, 10] {
            let pca = fit_pca(&[train.clone()], c_h).unwrap();
            let proj = project(&held, &pca).unwrap();
            let back = reconstruct(&proj, &pca).unwrap();
            let err: f64 = held
                .iter()
                .zip(back.iter())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum();
            assert!(err <= last + 1e-9, "c_h={c_h}: {err} > {last}");
            last = err;
        }
    }

    #[test]
    fn projection_linearity() {
        let raw = random_raw(200, 6, 4);
        let pca = fit_pca(&[raw], 4).unwrap();
        let x = random_raw(5, 6, 5);
        let y = random_raw(5, 6, 6);
        let (a, b) = (0.3f32, -0.7f32);
        let combo = x.mapv(|v| v * a) + &y.mapv(|v| v * b);
        let lhs = project(&combo, &pca).unwrap();
        let px = project(&x, &pca).unwrap();
        let py = project(&y, &pca).unwrap();
        let zero = project(&Array4::zeros((5, 1, 1, 6)), &pca).unwrap();
        let rhs = px.mapv(|v| v * a) + &py.mapv(|v| v * b) + &zero.mapv(|v| v * (1.0 - a - b));
        let max_err = lhs
            .iter()
            .zip(rhs.iter())
            .map(|(l, r)| (l - r).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err < 1e-4, "{max_err}");
    }

    #[test]
    fn insufficient_samples_error() {
        let raw = random_raw(4, 8, 0);
        assert!(fit_pca(&[raw], 4).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feat.bin");
        let mut rng = seeded_rng(9, 5);
        let f = Array4::from_shape_fn((3, 5, 7, 6), |_| rng.gen::<f32>());
        cache_features(&path, &f, "fp-abc").unwrap();
        let back = load_features(&path, "fp-abc").unwrap();
        assert_eq!(f, back);
        // wrong fingerprint is an explicit error
        assert!(matches!(
            load_features(&path, "fp-other"),
            Err(Error::CacheInvalid(_))
        ));
        // degenerate T=0 round-trips
        let empty = Array4::<f32>::zeros((0, 2, 2, 3));
        cache_features(&path, &empty, "fp").unwrap();
        assert_eq!(load_features(&path, "fp").unwrap().dim(), (0, 2, 2, 3));
    }
}
