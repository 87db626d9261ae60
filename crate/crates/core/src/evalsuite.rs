//! Evaluation metrics: a frozen linear probe scoring semantic consistency as
//! mIoU (over all classes and over moving classes only), Fréchet feature
//! distance for generation quality, PSNR, and the metrics report envelope.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Finite stand-in for infinite PSNR (identical images); JSON cannot carry
/// IEEE infinities.
pub const PSNR_INF_SENTINEL: f64 = 999.0;

// ---------------------------------------------------------------------------
// Mask downsampling
// ---------------------------------------------------------------------------

/// Majority-vote downsampling of class masks to the patch grid. Ties break
/// toward the smallest class id.
pub fn downsample_masks(masks: &Array3<u8>, patch: usize) -> Result<Array3<u8>> {
    let (t, h, w) = masks.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Argument(format!(
            "mask {h}x{w} not divisible by patch {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let num_classes = masks.iter().map(|&c| c as usize).max().unwrap_or(0) + 1;
    let mut out = Array3::<u8>::zeros((t, gh, gw));
    for ti in 0..t {
        for gy in 0..gh {
            for gx in 0..gw {
                let mut counts = vec![0usize; num_classes];
                for dy in 0..patch {
                    for dx in 0..patch {
                        counts[masks[[ti, gy * patch + dy, gx * patch + dx]] as usize] += 1;
                    }
                }
                let best = counts
                    .iter()
                    .enumerate()
                    .max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i)))
                    .unwrap()
                    .0;
                out[[ti, gy, gx]] = best as u8;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Linear probe (multinomial logistic regression)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeHead {
    /// `[C_h, num_classes]` flattened row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Fingerprint of the features the probe was trained on; checked before
    /// scoring generated frames so metric and model cannot co-adapt.
    pub trained_on: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProbeTrainConfig {
    pub lr: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        ProbeTrainConfig {
            lr: 1.0,
            max_iters: 500,
            grad_tol: 1e-5,
        }
    }
}

/// Fit a multinomial logistic regression on patch features and patch-grid
/// labels with full-batch gradient descent. Convex and zero-initialized, so
/// the fit is deterministic.
pub fn train_probe(
    features: &Array2<f64>,
    labels: &[u8],
    num_classes: usize,
    trained_on: &str,
    cfg: &ProbeTrainConfig,
) -> Result<ProbeHead> {
    let (n, d) = features.dim();
    if n == 0 || n != labels.len() {
        return Err(Error::Argument(format!(
            "features ({n}) and labels ({}) must align and be non-empty",
            labels.len()
        )));
    }
    let distinct: std::collections::BTreeSet<u8> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Fit(
            "probe training data contains a single class".into(),
        ));
    }
    if let Some(&max) = distinct.iter().last() {
        if max as usize >= num_classes {
            return Err(Error::Argument(format!(
                "label {max} out of range for {num_classes} classes"
            )));
        }
    }
    let mut w = Array2::<f64>::zeros((d, num_classes));
    let mut b = Array1::<f64>::zeros(num_classes);
    let mut onehot = Array2::<f64>::zeros((n, num_classes));
    for (i, &y) in labels.iter().enumerate() {
        onehot[[i, y as usize]] = 1.0;
    }
    for _ in 0..cfg.max_iters {
        let mut logits = features.dot(&w);
        logits += &b;
        // row-wise softmax
        for mut row in logits.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let resid = &logits - &onehot; // [N, K]
        let gw = features.t().dot(&resid) / n as f64;
        let gb = resid.sum_axis(Axis(0)) / n as f64;
        let gmax = gw
            .iter()
            .chain(gb.iter())
            .fold(0.0f64, |a, &v| a.max(v.abs()));
        if gmax < cfg.grad_tol {
            break;
        }
        w -= &(&gw * cfg.lr);
        b -= &(&gb * cfg.lr);
    }
    Ok(ProbeHead {
        weights: w.iter().copied().collect(),
        bias: b.to_vec(),
        feature_dim: d,
        num_classes,
        trained_on: trained_on.to_string(),
    })
}

impl ProbeHead {
    fn weight_matrix(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.feature_dim, self.num_classes), self.weights.clone())
            .expect("consistent probe dims")
    }

    /// Argmax class per feature row.
    pub fn predict(&self, features: &Array2<f64>) -> Result<Vec<u8>> {
        if features.dim().1 != self.feature_dim {
            return Err(Error::shape(
                format!("features ..x{}", self.feature_dim),
                format!("{:?}", features.dim()),
            ));
        }
        let mut logits = features.dot(&self.weight_matrix());
        for (mut row, _) in logits.rows_mut().into_iter().zip(0..) {
            for (v, bb) in row.iter_mut().zip(self.bias.iter()) {
                *v += bb;
            }
        }
        Ok(logits
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                    .unwrap()
                    .0 as u8
            })
            .collect())
    }

    /// Training accuracy helper.
    pub fn accuracy(&self, features: &Array2<f64>, labels: &[u8]) -> Result<f64> {
        let pred = self.predict(features)?;
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Classify a `[T, h, w, C_h]` feature stack into patch-grid masks.
    pub fn predict_masks(&self, features: &Array4<f32>) -> Result<Array3<u8>> {
        let (t, h, w, c) = features.dim();
        let flat = Array2::from_shape_vec(
            (t * h * w, c),
            features
                .as_standard_layout()
                .iter()
                .map(|&v| v as f64)
                .collect(),
        )
        .unwrap();
        let pred = self.predict(&flat)?;
        Ok(Array3::from_shape_vec((t, h, w), pred).unwrap())
    }
}

// ---------------------------------------------------------------------------
// mIoU
// ---------------------------------------------------------------------------

/// Per-class IoU and the mean over classes present in the ground truth.
/// `subset` restricts both the per-class list and the mean to the given
/// class ids (still requiring presence in the ground truth).
pub fn miou(
    pred: &Array3<u8>,
    gt: &Array3<u8>,
    subset: Option<&[u8]>,
) -> Result<(Vec<(u8, f64)>, f64)> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(
            format!("{:?}", gt.dim()),
            format!("{:?}", pred.dim()),
        ));
    }
    let num_classes = pred
        .iter()
        .chain(gt.iter())
        .map(|&c| c as usize)
        .max()
        .unwrap_or(0)
        + 1;
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fnn = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if p == g {
            tp[p as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fnn[g as usize] += 1;
        }
    }
    let wanted = |c: u8| subset.map_or(true, |s| s.contains(&c));
    let mut per_class = Vec::new();
    for c in 0..num_classes {
        let present = tp[c] + fnn[c] > 0; // class appears in gt
        if present && wanted(c as u8) {
            let denom = tp[c] + fp[c] + fnn[c];
            per_class.push((c as u8, tp[c] as f64 / denom as f64));
        }
    }
    if per_class.is_empty() {
        return Err(Error::Argument(
            "no ground-truth classes in the requested subset".into(),
        ));
    }
    let mean = per_class.iter().map(|(_, v)| v).sum::<f64>() / per_class.len() as f64;
    Ok((per_class, mean))
}

// ---------------------------------------------------------------------------
// Fréchet feature distance
// ---------------------------------------------------------------------------

fn mean_and_cov(x: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let (n, d) = x.dim();
    let mu = x.mean_axis(Axis(0)).unwrap();
    let centered = x - &mu.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let _ = d;
    (mu, cov)
}

/// Symmetric PSD matrix square root via eigendecomposition; negative
/// eigenvalues (numerical noise or rank deficiency) are clipped to 0.
fn sqrtm_psd(m: &Array2<f64>) -> Array2<f64> {
    let d = m.dim().0;
    let sym = nalgebra::DMatrix::from_fn(d, d, |i, j| 0.5 * (m[[i, j]] + m[[j, i]]));
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut out = Array2::<f64>::zeros((d, d));
    for k in 0..d {
        let lam = eig.eigenvalues[k].max(0.0).sqrt();
        for i in 0..d {
            for j in 0..d {
                out[[i, j]] += lam * eig.eigenvectors[(i, k)] * eig.eigenvectors[(j, k)];
            }
        }
    }
    out
}

/// Gaussian Fréchet distance between two feature sets (rows = samples):
/// `||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})`. The cross term is
/// computed symmetrically as `sqrt(sqrt(S1) S2 sqrt(S1))`.
pub fn frechet_feature_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    let d = a.dim().1;
    if b.dim().1 != d {
        return Err(Error::shape(
            format!("..x{d}"),
            format!("{:?}", b.dim()),
        ));
    }
    for (name, x) in [("A", a), ("B", b)] {
        if x.dim().0 < d + 1 {
            return Err(Error::Argument(format!(
                "feature set {name} needs at least {} samples for a {d}-dim covariance, got {}",
                d + 1,
                x.dim().0
            )));
        }
    }
    let (mu1, s1) = mean_and_cov(a);
    let (mu2, s2) = mean_and_cov(b);
    let dm = &mu1 - &mu2;
    let mean_term = dm.dot(&dm);
    let s1_half = sqrtm_psd(&s1);
    let inner = s1_half.dot(&s2).dot(&s1_half);
    let cross = sqrtm_psd(&inner);
    let trace = |m: &Array2<f64>| (0..d).map(|i| m[[i, i]]).sum::<f64>();
    let val = mean_term + trace(&s1) + trace(&s2) - 2.0 * trace(&cross);
    Ok(val.max(0.0))
}

// ---------------------------------------------------------------------------
// PSNR
// ---------------------------------------------------------------------------

/// Peak signal-to-noise ratio in dB for [0, 1] images; identical inputs map
/// to the finite sentinel.
pub fn psnr(a: &Array4<f32>, b: &Array4<f32>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            format!("{:?}", b.dim()),
            format!("{:?}", a.dim()),
        ));
    }
    let n = a.len() as f64;
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_INF_SENTINEL);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_INF_SENTINEL))
}

// ---------------------------------------------------------------------------
// Report envelope
// ---------------------------------------------------------------------------

/// All metrics are tagged with the frame set they were computed on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Frame set description, e.g. "val clip 3, predicted frames".
    pub frame_set: String,
    pub miou_all: f64,
    pub iou_moving: f64,
    pub ffd: f64,
    pub psnr_db: f64,
    /// Per-step rollout Smooth L1, one entry per predicted feature frame.
    pub rollout_smooth_l1: Vec<f64>,
    /// Upstream artifact fingerprints that produced this report.
    pub fingerprints: std::collections::BTreeMap<String, String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::seeded_rng;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    // Brute-force confusion-matrix oracle for IoU.
    fn miou_oracle(pred: &Array3<u8>, gt: &Array3<u8>, subset: Option<&[u8]>) -> Vec<(u8, f64)> {
        let k = pred.iter().chain(gt.iter()).map(|&c| c as usize).max().unwrap() + 1;
        let mut conf = vec![vec![0usize; k]; k];
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            conf[g as usize][p as usize] += 1;
        }
        let mut out = Vec::new();
        for c in 0..k {
            let gt_count: usize = conf[c].iter().sum();
            if gt_count == 0 {
                continue;
            }
            if let Some(s) = subset {
                if !s.contains(&(c as u8)) {
                    continue;
                }
            }
            let tp = conf[c][c];
            let pred_count: usize = (0..k).map(|g| conf[g][c]).sum();
            let union = gt_count + pred_count - tp;
            out.push((c as u8, tp as f64 / union as f64));
        }
        out
    }

    #[test]
    fn miou_identical_and_disjoint() {
        let gt = Array3::from_shape_fn((1, 4, 4), |(_, y, x)| ((y + x) % 3) as u8);
        let (per, mean) = miou(&gt, &gt, None).unwrap();
        assert!(per.iter().all(|&(_, v)| v == 1.0));
        assert_eq!(mean, 1.0);
        let pred = gt.mapv(|c| (c + 1) % 3);
        let (per, mean) = miou(&pred, &gt, None).unwrap();
        assert!(per.iter().all(|&(_, v)| v == 0.0));
        assert_eq!(mean, 0.0);
    }

    #[test]
    fn miou_matches_bruteforce_oracle() {
        let mut rng = seeded_rng(0, 200);
        for _ in 0..1000 {
            let gt = Array3::from_shape_fn((1, 16, 16), |_| rng.gen_range(0..5u8));
            let pred = Array3::from_shape_fn((1, 16, 16), |_| rng.gen_range(0..5u8));
            let subset: Option<Vec<u8>> = if rng.gen::<bool>() {
                Some(vec![1, 2, 3, 4])
            } else {
                None
            };
            let (per, mean) = miou(&pred, &gt, subset.as_deref()).unwrap();
            let oracle = miou_oracle(&pred, &gt, subset.as_deref());
            assert_eq!(per.len(), oracle.len());
            for (a, b) in per.iter().zip(oracle.iter()) {
                assert_eq!(a.0, b.0);
                assert_eq!(a.1, b.1, "IoU must be exact, not approximate");
            }
            let om = oracle.iter().map(|(_, v)| v).sum::<f64>() / oracle.len() as f64;
            assert_eq!(mean, om);
        }
    }

    #[test]
    fn miou_balanced_half_swap() {
        // two balanced classes; half of each class's pixels flipped to the
        // other: per-class IoU = 1/3
        let mut gt = Array3::<u8>::zeros((1, 4, 4));
        let mut pred = Array3::<u8>::zeros((1, 4, 4));
        for y in 0..4 {
            for x in 0..4 {
                let g = u8::from(y >= 2);
                gt[[0, y, x]] = g;
                // flip on odd columns
                pred[[0, y, x]] = if x % 2 == 1 { 1 - g } else { g };
            }
        }
        let (per, mean) = miou(&pred, &gt, None).unwrap();
        for &(_, v) in &per {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((mean - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn miou_errors() {
        let a = Array3::<u8>::zeros((1, 2, 2));
        let b = Array3::<u8>::zeros((1, 3, 3));
        assert!(miou(&a, &b, None).is_err());
        // subset excludes every gt class
        assert!(miou(&a, &a, Some(&[7])).is_err());
    }

    #[test]
    fn downsample_majority_and_ties() {
        let mut m = Array3::<u8>::zeros((1, 4, 4));
        // top-left patch: 3 of class 2, 1 of class 0 -> 2
        m[[0, 0, 0]] = 2;
        m[[0, 0, 1]] = 2;
        m[[0, 1, 0]] = 2;
        // top-right patch: 2 vs 2 tie between 0 and 1 -> smaller id 0
        m[[0, 0, 2]] = 1;
        m[[0, 1, 3]] = 1;
        let d = downsample_masks(&m, 2).unwrap();
        assert_eq!(d[[0, 0, 0]], 2);
        assert_eq!(d[[0, 0, 1]], 0, "ties break toward the smallest class id");
        assert!(downsample_masks(&m, 3).is_err());
    }

    #[test]
    fn probe_separable_toy_problem() {
        let mut rng = seeded_rng(1, 201);
        let n = 200;
        let mut x = Array2::<f64>::zeros((n, 2));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let cls = (i % 2) as u8;
            let center = if cls == 0 { -2.0 } else { 2.0 };
            x[[i, 0]] = center + 0.3 * rng.gen::<f64>();
            x[[i, 1]] = rng.gen::<f64>();
            y.push(cls);
        }
        let probe = train_probe(&x, &y, 2, "toy", &ProbeTrainConfig::default()).unwrap();
        assert!(probe.accuracy(&x, &y).unwrap() > 0.99);
        // same data, same config -> identical weights (no stochasticity)
        let again = train_probe(&x, &y, 2, "toy", &ProbeTrainConfig::default()).unwrap();
        assert_eq!(probe.weights, again.weights);
        assert_eq!(probe.bias, again.bias);
    }

    #[test]
    fn probe_rejects_single_class() {
        let x = Array2::<f64>::zeros((10, 2));
        let y = vec![1u8; 10];
        assert!(matches!(
            train_probe(&x, &y, 3, "t", &ProbeTrainConfig::default()),
            Err(Error::Fit(_))
        ));
    }

    #[test]
    fn ffd_zero_and_symmetric() {
        let mut rng = seeded_rng(2, 202);
        let x = Array2::from_shape_fn((50, 4), |_| rng.gen::<f64>());
        let y = Array2::from_shape_fn((60, 4), |_| rng.gen::<f64>() + 0.3);
        assert!(frechet_feature_distance(&x, &x).unwrap() < 1e-6);
        let ab = frechet_feature_distance(&x, &y).unwrap();
        let ba = frechet_feature_distance(&y, &x).unwrap();
        assert!((ab - ba).abs() < 1e-8, "symmetry: {ab} vs {ba}");
        assert!(ab >= 0.0);
    }

    #[test]
    fn ffd_gaussian_mean_offset_closed_form() {
        // unit-variance isotropic Gaussians offset by delta: FFD -> ||delta||^2
        let mut rng = seeded_rng(3, 203);
        let n = 100_000;
        let d = 4;
        let delta = [0.5, -0.3, 0.8, 0.0];
        let a = Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng));
        let b = Array2::from_shape_fn((n, d), |(_, j)| {
            let e: f64 = StandardNormal.sample(&mut rng);
            e + delta[j]
        });
        let expect: f64 = delta.iter().map(|v| v * v).sum();
        let got = frechet_feature_distance(&a, &b).unwrap();
        assert!(
            (got - expect).abs() < 0.05 * expect,
            "got {got}, expected about {expect}"
        );
    }

    #[test]
    fn ffd_rank_deficient_is_total() {
        // constant columns give a singular covariance; clipping keeps the
        // metric finite and non-negative
        let mut rng = seeded_rng(4, 204);
        let a = Array2::from_shape_fn((20, 3), |(_, j)| {
            if j == 2 {
                1.0
            } else {
                rng.gen::<f64>()
            }
        });
        let b = a.clone() + 0.1;
        let v = frechet_feature_distance(&a, &b).unwrap();
        assert!(v.is_finite() && v >= 0.0);
    }

    #[test]
    fn ffd_sample_count_precondition() {
        let a = Array2::<f64>::zeros((3, 4));
        let b = Array2::<f64>::zeros((10, 4));
        assert!(frechet_feature_distance(&a, &b).is_err());
    }

    #[test]
    fn psnr_basics() {
        let a = Array4::<f32>::from_elem((1, 4, 4, 3), 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_INF_SENTINEL);
        let mut b = a.clone();
        b += 0.1;
        // uniform 0.1 error: mse = 0.01, psnr = 20 dB
        let v = psnr(&a, &b).unwrap();
        assert!((v - 20.0).abs() < 1e-4, "{v}");
        let c = Array4::<f32>::zeros((1, 4, 4, 1));
        assert!(psnr(&a, &c).is_err());
    }
}
