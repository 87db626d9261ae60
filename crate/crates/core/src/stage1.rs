//! Masked feature forecaster: a transformer trained with teacher forcing to
//! regress the fully masked next feature frame under Smooth L1, and run
//! autoregressively at inference over a sliding window of the most recent
//! context feature frames.

use ndarray::{Array2, Array3, Array4, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::adam::{Adam, AdamConfig, LrSchedule};
use crate::nn::graph::{Graph, Id};
use crate::nn::params::{seeded_rng, ParamSet};
use crate::nn::{add_mha_params, mlp, multi_head_attention, take_mha_ids};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ForecasterConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// Context feature frames in the sliding window (N_c). One masked frame
    /// is always appended (N_p = 1).
    pub n_context: usize,
    pub mlp_ratio: f64,
    pub smooth_l1_beta: f64,
    pub seed: u64,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        ForecasterConfig {
            layers: 4,
            model_dim: 256,
            heads: 4,
            n_context: 4,
            mlp_ratio: 4.0,
            smooth_l1_beta: 1.0,
            seed: 0,
        }
    }
}

impl ForecasterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_context < 1 {
            return Err(Error::Config("stage1.n_context must be >= 1".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(
                "stage1.model_dim must be divisible by heads".into(),
            ));
        }
        if self.smooth_l1_beta <= 0.0 {
            return Err(Error::Config("stage1.smooth_l1_beta must be > 0".into()));
        }
        Ok(())
    }
}

/// Elementwise Smooth L1 averaged over all elements; the spec'd stage-1
/// regression objective.
pub fn smooth_l1(pred: &ArrayD<f64>, target: &ArrayD<f64>, beta: f64) -> Result<f64> {
    if beta <= 0.0 {
        return Err(Error::Argument("beta must be positive".into()));
    }
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            format!("{:?}", target.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    let mut g = Graph::new();
    let p = g.input(pred.clone());
    let t = g.input(target.clone());
    let l = g.smooth_l1(p, t, beta);
    Ok(g.scalar(l))
}

/// The forecaster model. The feature grid `(H_h, W_h, C_h)` is fixed at
/// construction; positional embeddings are learned and factorized over
/// (frame, row, col).
pub struct Forecaster {
    pub cfg: ForecasterConfig,
    pub h_h: usize,
    pub w_h: usize,
    pub c_h: usize,
    pub params: ParamSet,
}

impl Forecaster {
    pub fn new(cfg: ForecasterConfig, h_h: usize, w_h: usize, c_h: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(cfg.seed, 21);
        let d = cfg.model_dim;
        let hidden = (d as f64 * cfg.mlp_ratio) as usize;
        let mut ps = ParamSet::new();
        ps.add_normal("in_proj.w", &[c_h, d], (1.0 / c_h as f64).sqrt(), &mut rng);
        ps.add_zeros("in_proj.b", &[d]);
        ps.add_normal("mask_emb", &[1, d], 0.02, &mut rng);
        ps.add_normal("pos_frame", &[cfg.n_context + 1, d], 0.02, &mut rng);
        ps.add_normal("pos_row", &[h_h, d], 0.02, &mut rng);
        ps.add_normal("pos_col", &[w_h, d], 0.02, &mut rng);
        for l in 0..cfg.layers {
            add_mha_params(&mut ps, &format!("block{l}.attn"), d, cfg.heads, false, &mut rng);
            ps.add_normal(
                &format!("block{l}.mlp.w1"),
                &[d, hidden],
                (1.0 / d as f64).sqrt(),
                &mut rng,
            );
            ps.add_zeros(&format!("block{l}.mlp.b1"), &[hidden]);
            ps.add_normal(
                &format!("block{l}.mlp.w2"),
                &[hidden, d],
                (1.0 / hidden as f64).sqrt(),
                &mut rng,
            );
            ps.add_zeros(&format!("block{l}.mlp.b2"), &[d]);
        }
        ps.add_normal("out_proj.w", &[d, c_h], (1.0 / d as f64).sqrt(), &mut rng);
        ps.add_zeros("out_proj.b", &[c_h]);
        Ok(Forecaster {
            cfg,
            h_h,
            w_h,
            c_h,
            params: ps,
        })
    }

    fn patches(&self) -> usize {
        self.h_h * self.w_h
    }

    /// Constant 0/1 expansion matrices mapping factorized positional tables
    /// onto the token sequence (frame-major, then row, then col).
    fn positional_expanders(&self) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let frames = self.cfg.n_context + 1;
        let p = self.patches();
        let n = frames * p;
        let mut ef = Array2::<f64>::zeros((n, frames));
        let mut er = Array2::<f64>::zeros((n, self.h_h));
        let mut ec = Array2::<f64>::zeros((n, self.w_h));
        for f in 0..frames {
            for r in 0..self.h_h {
                for c in 0..self.w_h {
                    let tok = (f * self.h_h + r) * self.w_h + c;
                    ef[[tok, f]] = 1.0;
                    er[[tok, r]] = 1.0;
                    ec[[tok, c]] = 1.0;
                }
            }
        }
        (ef, er, ec)
    }

    fn check_context(&self, context: &Array4<f32>) -> Result<()> {
        let (t, h, w, c) = context.dim();
        if t != self.cfg.n_context || h != self.h_h || w != self.w_h || c != self.c_h {
            return Err(Error::shape(
                format!(
                    "context {}x{}x{}x{}",
                    self.cfg.n_context, self.h_h, self.w_h, self.c_h
                ),
                format!("{t}x{h}x{w}x{c}"),
            ));
        }
        Ok(())
    }

    /// Build the forward graph; returns the predicted masked-frame tokens
    /// `[P, C_h]`. `ids` must come from `self.params.register(g)`.
    fn forward_graph(&self, g: &mut Graph, ids: &[Id], context: &Array4<f32>) -> Id {
        let p = self.patches();
        let n_ctx_tok = self.cfg.n_context * p;
        let ctx_tokens = Array2::from_shape_vec(
            (n_ctx_tok, self.c_h),
            context
                .as_standard_layout()
                .iter()
                .map(|&v| v as f64)
                .collect(),
        )
        .unwrap();

        let mut cursor = 0usize;
        let in_w = ids[cursor];
        let in_b = ids[cursor + 1];
        let mask_emb = ids[cursor + 2];
        let pos_frame = ids[cursor + 3];
        let pos_row = ids[cursor + 4];
        let pos_col = ids[cursor + 5];
        cursor += 6;

        let ctx_in = g.input(ctx_tokens.into_dyn());
        let mut x = g.matmul(ctx_in, in_w);
        x = g.add_bias(x, in_b);
        // the masked frame carries no target content: all of its tokens are
        // the shared learned mask embedding
        let ones = g.input(Array2::<f64>::ones((p, 1)).into_dyn());
        let mask_tokens = g.matmul(ones, mask_emb);
        x = g.concat_rows(x, mask_tokens);

        let (ef, er, ec) = self.positional_expanders();
        let efi = g.input(ef.into_dyn());
        let eri = g.input(er.into_dyn());
        let eci = g.input(ec.into_dyn());
        let pf = g.matmul(efi, pos_frame);
        let pr = g.matmul(eri, pos_row);
        let pc = g.matmul(eci, pos_col);
        let pos = g.add(pf, pr);
        let pos = g.add(pos, pc);
        x = g.add(x, pos);

        for _ in 0..self.cfg.layers {
            let mha = take_mha_ids(ids, &mut cursor, false);
            let normed = g.layer_norm(x);
            let attn = multi_head_attention(g, normed, &mha, self.cfg.heads, None);
            x = g.add(x, attn);
            let (w1, b1, w2, b2) = (
                ids[cursor],
                ids[cursor + 1],
                ids[cursor + 2],
                ids[cursor + 3],
            );
            cursor += 4;
            let normed = g.layer_norm(x);
            let ff = mlp(g, normed, w1, b1, w2, b2);
            x = g.add(x, ff);
        }
        let out_w = ids[cursor];
        let out_b = ids[cursor + 1];
        let x = g.layer_norm(x);
        let masked = g.slice_rows(x, n_ctx_tok, p);
        let out = g.matmul(masked, out_w);
        g.add_bias(out, out_b)
    }

    /// Predict the next feature frame from exactly `N_c` context frames.
    pub fn forward(&self, context: &Array4<f32>) -> Result<Array3<f32>> {
        self.check_context(context)?;
        let mut g = Graph::new();
        let ids = self.params.register(&mut g);
        let out = self.forward_graph(&mut g, &ids, context);
        let v = g.value(out);
        let mut frame = Array3::<f32>::zeros((self.h_h, self.w_h, self.c_h));
        for r in 0..self.h_h {
            for c in 0..self.w_h {
                for ch in 0..self.c_h {
                    frame[[r, c, ch]] = v[[r * self.w_h + c, ch]] as f32;
                }
            }
        }
        Ok(frame)
    }

    /// Teacher-forced loss and parameter gradients for one (context, target)
    /// window.
    pub fn loss_and_grads(
        &self,
        context: &Array4<f32>,
        target: &Array3<f32>,
    ) -> Result<(f64, Vec<ArrayD<f64>>)> {
        self.check_context(context)?;
        let p = self.patches();
        let mut g = Graph::new();
        let ids = self.params.register(&mut g);
        let pred = self.forward_graph(&mut g, &ids, context);
        let tgt = Array2::from_shape_vec(
            (p, self.c_h),
            target
                .as_standard_layout()
                .iter()
                .map(|&v| v as f64)
                .collect(),
        )
        .unwrap();
        let tgt = g.input(tgt.into_dyn());
        let loss = g.smooth_l1(pred, tgt, self.cfg.smooth_l1_beta);
        let lv = g.scalar(loss);
        if !lv.is_finite() {
            return Err(Error::Numerical(format!("non-finite stage-1 loss {lv}")));
        }
        let grads = g.backward(loss);
        Ok((lv, self.params.collect_grads(&grads, &ids)))
    }

    /// Teacher-forced loss only (no gradients). Computed in f64 end to end.
    pub fn loss(&self, context: &Array4<f32>, target: &Array3<f32>) -> Result<f64> {
        self.check_context(context)?;
        let p = self.patches();
        let mut g = Graph::new();
        let ids = self.params.register(&mut g);
        let pred = self.forward_graph(&mut g, &ids, context);
        let tgt = Array2::from_shape_vec(
            (p, self.c_h),
            target
                .as_standard_layout()
                .iter()
                .map(|&v| v as f64)
                .collect(),
        )
        .unwrap();
        let tgt = g.input(tgt.into_dyn());
        let loss = g.smooth_l1(pred, tgt, self.cfg.smooth_l1_beta);
        Ok(g.scalar(loss))
    }

    /// Autoregressive rollout: predicts `steps` feature frames, feeding each
    /// prediction back into the sliding window. Only the most recent `N_c`
    /// frames of `context` are ever consulted.
    pub fn rollout(&self, context: &Array4<f32>, steps: usize) -> Result<Array4<f32>> {
        let (t, h, w, c) = context.dim();
        if t < self.cfg.n_context {
            return Err(Error::Argument(format!(
                "rollout needs at least {} context frames, got {t}",
                self.cfg.n_context
            )));
        }
        let mut window: Vec<Array3<f32>> = (t - self.cfg.n_context..t)
            .map(|i| context.index_axis(Axis(0), i).to_owned())
            .collect();
        let mut out = Array4::<f32>::zeros((steps, h, w, c));
        for s in 0..steps {
            let mut ctx = Array4::<f32>::zeros((self.cfg.n_context, h, w, c));
            for (i, f) in window.iter().enumerate() {
                ctx.index_axis_mut(Axis(0), i).assign(f);
            }
            let pred = self.forward(&ctx)?;
            out.index_axis_mut(Axis(0), s).assign(&pred);
            window.remove(0);
            window.push(pred);
        }
        Ok(out)
    }
}

/// Training configuration for stage 1.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Stage1TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for Stage1TrainConfig {
    fn default() -> Self {
        Stage1TrainConfig {
            steps: 2000,
            lr: 3e-4,
            warmup_steps: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Stage1LogRow {
    pub step: usize,
    pub loss: f64,
}

/// Enumerate all valid sliding windows `(clip, offset)` for clips of
/// subsampled feature frames.
fn windows(features: &[Array4<f32>], n_context: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (ci, f) in features.iter().enumerate() {
        let t = f.dim().0;
        if t > n_context {
            for off in 0..t - n_context {
                out.push((ci, off));
            }
        }
    }
    out
}

fn window_slices(
    features: &Array4<f32>,
    off: usize,
    n_context: usize,
) -> (Array4<f32>, Array3<f32>) {
    let ctx = features
        .slice_axis(Axis(0), ndarray::Slice::from(off..off + n_context))
        .to_owned();
    let tgt = features.index_axis(Axis(0), off + n_context).to_owned();
    (ctx, tgt)
}

/// Train the forecaster on per-clip subsampled feature maps. Window offsets
/// are sampled uniformly over all valid (clip, offset) pairs.
pub fn train_stage1<F>(
    model: &mut Forecaster,
    train_features: &[Array4<f32>],
    cfg: &Stage1TrainConfig,
    mut on_step: F,
) -> Result<()>
where
    F: FnMut(&Stage1LogRow),
{
    use rand::Rng;
    let wins = windows(train_features, model.cfg.n_context);
    if wins.is_empty() {
        return Err(Error::Argument(
            "no valid training windows; clips too short for N_c + 1".into(),
        ));
    }
    let mut rng = seeded_rng(cfg.seed, 31);
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            beta1: 0.9,
            beta2: 0.99,
            warmup_steps: cfg.warmup_steps,
            schedule: LrSchedule::Cosine {
                total_steps: cfg.steps,
            },
            ..AdamConfig::default()
        },
        &model.params,
    );
    for step in 0..cfg.steps {
        let (ci, off) = wins[rng.gen_range(0..wins.len())];
        let (ctx, tgt) = window_slices(&train_features[ci], off, model.cfg.n_context);
        let (loss, grads) = model.loss_and_grads(&ctx, &tgt)?;
        opt.update(&mut model.params, &grads);
        on_step(&Stage1LogRow { step, loss });
    }
    Ok(())
}

/// Mean teacher-forced Smooth L1 of the model and of the copy-last-frame
/// baseline over every valid window of the given clips.
pub fn validation_losses(
    model: &Forecaster,
    val_features: &[Array4<f32>],
) -> Result<(f64, f64)> {
    let wins = windows(val_features, model.cfg.n_context);
    if wins.is_empty() {
        return Err(Error::Argument("no validation windows".into()));
    }
    let mut model_sum = 0.0;
    let mut copy_sum = 0.0;
    for &(ci, off) in &wins {
        let (ctx, tgt) = window_slices(&val_features[ci], off, model.cfg.n_context);
        model_sum += model.loss(&ctx, &tgt)?;
        let last = ctx.index_axis(Axis(0), model.cfg.n_context - 1).to_owned();
        copy_sum += smooth_l1(
            &last.mapv(|v| v as f64).into_dyn(),
            &tgt.mapv(|v| v as f64).into_dyn(),
            model.cfg.smooth_l1_beta,
        )?;
    }
    let n = wins.len() as f64;
    Ok((model_sum / n, copy_sum / n))
}

/// Per-step rollout Smooth L1 against ground-truth future feature frames.
pub fn rollout_errors(
    model: &Forecaster,
    context: &Array4<f32>,
    future: &Array4<f32>,
) -> Result<Vec<f64>> {
    let steps = future.dim().0;
    let pred = model.rollout(context, steps)?;
    (0..steps)
        .map(|s| {
            smooth_l1(
                &pred.index_axis(Axis(0), s).mapv(|v| v as f64).into_dyn(),
                &future.index_axis(Axis(0), s).mapv(|v| v as f64).into_dyn(),
                model.cfg.smooth_l1_beta,
            )
        })
        .collect()
}

/// Checkpoint round-trip helpers.
pub fn save_forecaster(
    path: &std::path::Path,
    model: &Forecaster,
    pca_fingerprint: &str,
) -> Result<()> {
    let meta = crate::artifact::CheckpointMeta {
        kind: "stage1".into(),
        config_json: serde_json::to_string(&SavedShape {
            cfg: model.cfg.clone(),
            h_h: model.h_h,
            w_h: model.w_h,
            c_h: model.c_h,
        })
        .map_err(|e| Error::Serialization(e.to_string()))?,
        fingerprints: [("pca".to_string(), pca_fingerprint.to_string())].into(),
    };
    crate::artifact::write_checkpoint(
        path,
        &meta,
        model.params.names(),
        model.params.values(),
    )
}

#[derive(Serialize, Deserialize)]
struct SavedShape {
    cfg: ForecasterConfig,
    h_h: usize,
    w_h: usize,
    c_h: usize,
}

pub fn load_forecaster(
    path: &std::path::Path,
    expected_pca_fingerprint: Option<&str>,
) -> Result<Forecaster> {
    let (meta, entries) = crate::artifact::read_checkpoint(path)?;
    if meta.kind != "stage1" {
        return Err(Error::Serialization(format!(
            "expected a stage1 checkpoint, got {}",
            meta.kind
        )));
    }
    if let Some(fp) = expected_pca_fingerprint {
        match meta.fingerprints.get("pca") {
            Some(have) if have == fp => {}
            other => {
                return Err(Error::CacheInvalid(format!(
                    "stage1 checkpoint PCA fingerprint mismatch: {:?} != {fp}",
                    other
                )))
            }
        }
    }
    let shape: SavedShape = serde_json::from_str(&meta.config_json)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    let mut model = Forecaster::new(shape.cfg, shape.h_h, shape.w_h, shape.c_h)?;
    model.params.load(&entries)?;
    Ok(model)
}
