//! Noise-level sampling, denoiser preconditioning, nested channel dropout,
//! and representation guidance for the latent diffusion stage.

use ndarray::{Array4, ArrayD};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability of the low-noise (sigmoid-of-normal) mixture component.
pub const SIGMOID_COMPONENT_PROB: f64 = 0.95;
/// Log-uniform range of the high-noise tail component.
pub const TAIL_SIGMA_MIN: f64 = 200.0;
pub const TAIL_SIGMA_MAX: f64 = 100_000.0;
/// Fixed noise-level embedding fed for clean context frames.
pub const CONTEXT_C_NOISE: f64 = 0.001;

/// Draw one training noise level: with probability 0.95 take
/// `sigma = sigmoid(u)`, `u ~ N(0,1)`; otherwise draw `log sigma` uniformly
/// on `[log 200, log 100000]`.
pub fn sample_noise_level<R: Rng>(rng: &mut R) -> f64 {
    if rng.gen::<f64>() < SIGMOID_COMPONENT_PROB {
        let u: f64 = StandardNormal.sample(rng);
        1.0 / (1.0 + (-u).exp())
    } else {
        let lo = TAIL_SIGMA_MIN.ln();
        let hi = TAIL_SIGMA_MAX.ln();
        (lo + rng.gen::<f64>() * (hi - lo)).exp()
    }
}

/// Scalar preconditioning coefficients at noise level `sigma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precondition {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
    /// Loss weight `lambda`.
    pub weight: f64,
}

/// Coefficients of the preconditioned denoiser
/// `D(x; sigma) = c_skip * x + c_out * F(c_in * x; c_noise)` with
/// `t = sigma / (1 + sigma)`:
/// `c_skip = 1 - t`, `c_out = -t`, `c_in = 1 - t`, `c_noise = t`, and loss
/// weight `lambda = (1 + sigma)^2 / sigma^2`. Context frames are clean; they
/// use `c_noise = 0.001` (and the matching near-zero-sigma input scaling).
pub fn precondition(sigma: f64, is_context: bool) -> Result<Precondition> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::Argument(format!(
            "sigma must be finite and positive, got {sigma}"
        )));
    }
    if is_context {
        let t = CONTEXT_C_NOISE;
        return Ok(Precondition {
            c_skip: 1.0 - t,
            c_out: -t,
            c_in: 1.0 - t,
            c_noise: t,
            weight: 0.0,
        });
    }
    let t = sigma / (1.0 + sigma);
    Ok(Precondition {
        c_skip: 1.0 - t,
        c_out: -t,
        c_in: 1.0 - t,
        c_noise: t,
        weight: (1.0 + sigma) * (1.0 + sigma) / (sigma * sigma),
    })
}

/// `x = z + sigma * eps` with fresh standard-normal noise.
pub fn add_noise<R: Rng>(clean: &ArrayD<f64>, sigma: f64, rng: &mut R) -> ArrayD<f64> {
    clean.mapv(|v| {
        let eps: f64 = StandardNormal.sample(rng);
        v + sigma * eps
    })
}

/// Nested channel dropout over semantic feature maps: keep the first `keep`
/// channels, zero the rest. The same `keep` applies to every frame of the
/// batch element.
pub fn nested_dropout(features: &Array4<f32>, keep: usize) -> Result<Array4<f32>> {
    let c = features.dim().3;
    if keep == 0 || keep > c {
        return Err(Error::Argument(format!(
            "keep must be in 1..={c}, got {keep}"
        )));
    }
    let mut out = features.clone();
    for v in out.slice_mut(ndarray::s![.., .., .., keep..]).iter_mut() {
        *v = 0.0;
    }
    Ok(out)
}

/// Which channel-count prefixes nested dropout may sample at train time.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NestedDropoutPolicy {
    /// Allowed keep counts, e.g. {8, 16, 32, 64}; must be sorted ascending
    /// and end at the full channel count.
    pub channel_set: Vec<usize>,
}

impl NestedDropoutPolicy {
    pub fn validate(&self, full_channels: usize) -> Result<()> {
        if self.channel_set.is_empty() {
            return Err(Error::Config("channel_set must be non-empty".into()));
        }
        if !self.channel_set.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "channel_set must be strictly increasing".into(),
            ));
        }
        if self.channel_set[0] == 0 {
            return Err(Error::Config("channel_set entries must be >= 1".into()));
        }
        if *self.channel_set.last().unwrap() != full_channels {
            return Err(Error::Config(format!(
                "channel_set must end at the full channel count {full_channels}"
            )));
        }
        Ok(())
    }

    /// Uniformly draw a keep count from the set.
    pub fn sample_keep<R: Rng>(&self, rng: &mut R) -> usize {
        self.channel_set[rng.gen_range(0..self.channel_set.len())]
    }
}

/// Mixed supervision: with probability `ground_truth_prob` condition on
/// ground-truth (encoder) future features, otherwise on stage-1 rollouts.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MixedSupervisionPolicy {
    pub ground_truth_prob: f64,
}

impl Default for MixedSupervisionPolicy {
    fn default() -> Self {
        MixedSupervisionPolicy {
            ground_truth_prob: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupervisionSource {
    GroundTruth,
    Forecast,
}

impl MixedSupervisionPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ground_truth_prob) {
            return Err(Error::Config(
                "ground_truth_prob must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn sample_source<R: Rng>(&self, rng: &mut R) -> SupervisionSource {
        if rng.gen::<f64>() < self.ground_truth_prob {
            SupervisionSource::GroundTruth
        } else {
            SupervisionSource::Forecast
        }
    }
}

/// Representation guidance: extrapolate from the coarse-conditioned estimate
/// toward the fully-conditioned one,
/// `z_hat = z_full + w * (z_full - z_coarse)`.
pub fn representation_guidance(
    full: &ArrayD<f64>,
    coarse: &ArrayD<f64>,
    weight: f64,
) -> Result<ArrayD<f64>> {
    if full.shape() != coarse.shape() {
        return Err(Error::shape(
            format!("{:?}", full.shape()),
            format!("{:?}", coarse.shape()),
        ));
    }
    Ok(full + &((full - coarse) * weight))
}
