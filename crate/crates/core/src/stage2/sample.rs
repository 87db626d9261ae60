//! Deterministic ancestral-free sampling: a power-interpolated noise-level
//! grid walked with Euler steps, optionally steering each denoiser call with
//! representation guidance between full and channel-truncated conditioning.

use ndarray::{Array4, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::seeded_rng;
use crate::stage2::edm::representation_guidance;
use crate::stage2::model::Denoiser;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Two-phase grid: with `Some(mid)` the first step jumps straight from
    /// `sigma_max` to `mid` and the power-interpolated grid covers
    /// `[sigma_min, mid]`. Useful when the trained noise levels are bimodal
    /// and the band between the modes should never be evaluated.
    #[serde(default)]
    pub sigma_mid: Option<f64>,
    /// Grid-warping exponent.
    pub rho: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_steps: 32,
            sigma_min: 0.002,
            sigma_max: 80.0,
            sigma_mid: None,
            rho: 7.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Config("sampler.num_steps must be >= 1".into()));
        }
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min) {
            return Err(Error::Config(
                "sampler needs 0 < sigma_min < sigma_max".into(),
            ));
        }
        if let Some(mid) = self.sigma_mid {
            if !(mid > self.sigma_min && mid < self.sigma_max) {
                return Err(Error::Config(
                    "sampler.sigma_mid must lie strictly between sigma_min and sigma_max".into(),
                ));
            }
            if self.num_steps < 2 {
                return Err(Error::Config(
                    "sampler.sigma_mid needs num_steps >= 2".into(),
                ));
            }
        }
        if self.rho <= 0.0 {
            return Err(Error::Config("sampler.rho must be positive".into()));
        }
        Ok(())
    }
}

/// `n` decreasing positive entries from `hi` to `lo` interpolated in
/// `sigma^(1/rho)`; with `n = 1` just `[hi]`.
fn power_grid(grid: &mut Vec<f64>, hi: f64, lo: f64, n: usize, rho: f64) {
    if n == 1 {
        grid.push(hi);
        return;
    }
    let inv_rho = 1.0 / rho;
    let a = hi.powf(inv_rho);
    let b = lo.powf(inv_rho);
    for i in 0..n {
        let frac = i as f64 / (n - 1) as f64;
        grid.push((a + frac * (b - a)).powf(rho));
    }
}

/// Decreasing noise-level grid with `num_steps` positive entries plus a final
/// 0. Without `sigma_mid` the positive entries run from `sigma_max` to
/// `sigma_min`; with `sigma_mid = Some(mid)` the first entry is `sigma_max`
/// and the remaining `num_steps - 1` run from `mid` to `sigma_min`. With
/// `num_steps = 1` the grid is just `[sigma_max, 0]`.
pub fn noise_grid(cfg: &SamplerConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut grid = Vec::with_capacity(cfg.num_steps + 1);
    match cfg.sigma_mid {
        Some(mid) => {
            grid.push(cfg.sigma_max);
            power_grid(&mut grid, mid, cfg.sigma_min, cfg.num_steps - 1, cfg.rho);
        }
        None => power_grid(
            &mut grid,
            cfg.sigma_max,
            cfg.sigma_min,
            cfg.num_steps,
            cfg.rho,
        ),
    }
    grid.push(0.0);
    Ok(grid)
}

/// Optional guidance settings for sampling.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub weight: f64,
    /// Channel count for the coarse (truncated-conditioning) branch.
    pub coarse_channels: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            weight: 0.5,
            coarse_channels: 16,
        }
    }
}

/// Sample future latent frames. `context_latents` holds the clean context
/// `[T_ctx, H_l, W_l, C_z]`; `features` is the full conditioning stack
/// `[T, ..., C_h]` covering context and future frames (nested dropout already
/// applied by the caller if desired). Returns the full predicted latent stack
/// `[T, H_l, W_l, C_z]` with the context frames passed through unchanged.
pub fn sample_latents(
    model: &Denoiser,
    context_latents: &Array4<f64>,
    features: &Array4<f32>,
    cfg: &SamplerConfig,
    guidance: Option<&GuidanceConfig>,
) -> Result<Array4<f64>> {
    let n_context = context_latents.dim().0;
    if n_context >= model.t_frames {
        return Err(Error::Argument(format!(
            "context frames {n_context} leave no future frames of {}",
            model.t_frames
        )));
    }
    if context_latents.dim().1 != model.h_l
        || context_latents.dim().2 != model.w_l
        || context_latents.dim().3 != model.c_z
    {
        return Err(Error::shape(
            format!("context ..x{}x{}x{}", model.h_l, model.w_l, model.c_z),
            format!("{:?}", context_latents.dim()),
        ));
    }
    let grid = noise_grid(cfg)?;
    let coarse_features = match guidance {
        Some(gcfg) => Some(crate::stage2::edm::nested_dropout(
            features,
            gcfg.coarse_channels,
        )?),
        None => None,
    };

    // initialize future frames at sigma_max * eps; context frames stay clean
    let mut rng = seeded_rng(cfg.seed, 71);
    let mut x = Array4::<f64>::zeros((model.t_frames, model.h_l, model.w_l, model.c_z));
    for t in 0..n_context {
        x.index_axis_mut(Axis(0), t)
            .assign(&context_latents.index_axis(Axis(0), t));
    }
    for t in n_context..model.t_frames {
        for v in x.index_axis_mut(Axis(0), t).iter_mut() {
            let eps: f64 = StandardNormal.sample(&mut rng);
            *v = cfg.sigma_max * eps;
        }
    }

    for w in grid.windows(2) {
        let (sigma, sigma_next) = (w[0], w[1]);
        let denoised = denoise_guided(
            model,
            &x,
            features,
            coarse_features.as_ref(),
            guidance,
            sigma,
            n_context,
        )?;
        // Euler step on future frames: x += (sigma' - sigma) * (x - z_hat) / sigma
        let step = (sigma_next - sigma) / sigma;
        for t in n_context..model.t_frames {
            let d = denoised.index_axis(Axis(0), t).to_owned();
            let mut xt = x.index_axis_mut(Axis(0), t);
            let cur = xt.to_owned();
            xt.assign(&(&cur + &((&cur - &d) * step)));
        }
    }
    Ok(x)
}

fn denoise_guided(
    model: &Denoiser,
    x: &Array4<f64>,
    features: &Array4<f32>,
    coarse_features: Option<&Array4<f32>>,
    guidance: Option<&GuidanceConfig>,
    sigma: f64,
    n_context: usize,
) -> Result<Array4<f64>> {
    let full = model.denoise(x, features, sigma, n_context)?;
    match (guidance, coarse_features) {
        (Some(gcfg), Some(cf)) => {
            let coarse = model.denoise(x, cf, sigma, n_context)?;
            let guided = representation_guidance(
                &full.into_dyn(),
                &coarse.into_dyn(),
                gcfg.weight,
            )?;
            guided
                .into_dimensionality::<ndarray::Ix4>()
                .map_err(|e| Error::Numerical(e.to_string()))
        }
        _ => Ok(full),
    }
}
