//! Adam optimizer with optional warmup plus cosine or constant schedules.

use ndarray::ArrayD;

use crate::nn::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    Cosine { total_steps: usize },
}

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub schedule: LrSchedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            warmup_steps: 0,
            schedule: LrSchedule::Constant,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    step: usize,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let m = params
            .values()
            .iter()
            .map(|p| ArrayD::zeros(p.raw_dim()))
            .collect();
        let v = params
            .values()
            .iter()
            .map(|p| ArrayD::zeros(p.raw_dim()))
            .collect();
        Adam {
            cfg,
            m,
            v,
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        let s = self.step as f64;
        let warm = self.cfg.warmup_steps as f64;
        let base = if warm > 0.0 && s < warm {
            self.cfg.lr * (s + 1.0) / warm
        } else {
            self.cfg.lr
        };
        match self.cfg.schedule {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { total_steps } => {
                if warm > 0.0 && s < warm {
                    base
                } else {
                    let t = ((s - warm) / ((total_steps as f64 - warm).max(1.0))).min(1.0);
                    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
                }
            }
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[ArrayD<f64>]) {
        assert_eq!(grads.len(), params.len(), "grad/param count mismatch");
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for i in 0..grads.len() {
            let g = &grads[i];
            self.m[i].zip_mut_with(g, |m, &g| {
                *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * g
            });
            self.v[i].zip_mut_with(g, |v, &g| {
                *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * g * g
            });
            let p = params.get_mut(i);
            ndarray::Zip::from(p)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, &m, &v| {
                    let mh = m / bc1;
                    let vh = v / bc2;
                    *p -= lr * mh / (vh.sqrt() + self.cfg.eps);
                });
        }
    }
}
