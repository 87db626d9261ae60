//! Latent diffusion transformer: patchified latent tokens early-fused with
//! semantic feature tokens, low-rank-adapted adaptive layer norm driven by the
//! per-frame noise-level embedding, 3D-factorized rotary attention with
//! query/key RMS normalization, and the skip/output preconditioning wrapper.

use ndarray::{Array1, Array2, Array4, ArrayD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Id};
use crate::nn::params::{seeded_rng, ParamSet};
use crate::nn::{add_mha_params, mlp, multi_head_attention, take_mha_ids, RopeTables};
use crate::stage2::edm::precondition;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// Spatial patch size over the latent grid.
    pub patch_size: usize,
    /// Rank of the low-rank adapter on the adaptive layer-norm modulation.
    pub adaln_rank: usize,
    /// Width of the sinusoidal noise-level embedding.
    pub cond_freq_dim: usize,
    pub mlp_ratio: f64,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            layers: 6,
            model_dim: 384,
            heads: 6,
            patch_size: 2,
            adaln_rank: 16,
            cond_freq_dim: 32,
            mlp_ratio: 4.0,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(
                "stage2.model_dim must be divisible by heads".into(),
            ));
        }
        let dh = self.model_dim / self.heads;
        if rope_segments(dh).is_none() {
            return Err(Error::Config(format!(
                "head dim {dh} cannot be split into three even rotary segments"
            )));
        }
        if self.cond_freq_dim % 2 != 0 {
            return Err(Error::Config("cond_freq_dim must be even".into()));
        }
        if self.adaln_rank == 0 {
            return Err(Error::Config("adaln_rank must be >= 1".into()));
        }
        Ok(())
    }
}

/// Split a head dim into three even segments (frame, row, col), as equal as
/// possible. Returns None if that is impossible.
fn rope_segments(dh: usize) -> Option<[usize; 3]> {
    if dh < 6 || dh % 2 != 0 {
        return None;
    }
    let pairs = dh / 2; // rotation pairs to distribute over 3 axes
    if pairs < 3 {
        return None;
    }
    let base = pairs / 3;
    let rem = pairs % 3;
    let p = [base + usize::from(rem > 0), base + usize::from(rem > 1), base];
    Some([2 * p[0], 2 * p[1], 2 * p[2]])
}

const ROPE_THETA: f64 = 10_000.0;

/// Rotary tables for a frame-major (t, row, col) token layout: the head dim
/// is split into three segments, each rotated by the position along its axis.
fn build_rope_tables(frames: usize, rows: usize, cols: usize, dh: usize) -> RopeTables {
    let segs = rope_segments(dh).expect("validated head dim");
    let n = frames * rows * cols;
    let mut cos = Array2::<f64>::zeros((n, dh));
    let mut sin = Array2::<f64>::zeros((n, dh));
    for t in 0..frames {
        for r in 0..rows {
            for c in 0..cols {
                let tok = (t * rows + r) * cols + c;
                let mut off = 0usize;
                for (seg, pos) in segs.iter().zip([t, r, c]) {
                    let half = seg / 2;
                    for i in 0..half {
                        let freq = ROPE_THETA.powf(-(i as f64) / half as f64);
                        let angle = pos as f64 * freq;
                        // the rotation pairs entry i with entry i + half
                        cos[[tok, off + i]] = angle.cos();
                        cos[[tok, off + i + half]] = angle.cos();
                        sin[[tok, off + i]] = angle.sin();
                        sin[[tok, off + i + half]] = angle.sin();
                    }
                    off += seg;
                }
            }
        }
    }
    RopeTables {
        cos: cos.into_dyn(),
        sin: sin.into_dyn(),
        segments: segs.to_vec(),
    }
}

/// Sinusoidal embedding of a scalar noise-level signal.
pub fn sinusoidal_embedding(value: f64, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::<f64>::zeros(dim);
    for i in 0..half {
        let freq = ROPE_THETA.powf(-(i as f64) / half as f64);
        out[i] = (value * freq).sin();
        out[half + i] = (value * freq).cos();
    }
    out
}

/// Bilinear resize of a `[T, H, W, C]` stack to a new spatial grid
/// (half-pixel-center convention).
pub fn resize_bilinear(x: &Array4<f32>, out_h: usize, out_w: usize) -> Array4<f32> {
    let (t, h, w, c) = x.dim();
    let mut out = Array4::<f32>::zeros((t, out_h, out_w, c));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for ti in 0..t {
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                for ch in 0..c {
                    let v00 = x[[ti, y0, x0, ch]] as f64;
                    let v01 = x[[ti, y0, x1, ch]] as f64;
                    let v10 = x[[ti, y1, x0, ch]] as f64;
                    let v11 = x[[ti, y1, x1, ch]] as f64;
                    let top = v00 + (v01 - v00) * wx;
                    let bot = v10 + (v11 - v10) * wx;
                    out[[ti, oy, ox, ch]] = (top + (bot - top) * wy) as f32;
                }
            }
        }
    }
    out
}

/// Arrange a latent stack `[T, H, W, C]` into frame-major patch tokens
/// `[T * (H/p) * (W/p), p * p * C]`.
pub fn patchify(latents: &ndarray::Array4<f64>, p: usize) -> Result<Array2<f64>> {
    let (t, h, w, c) = latents.dim();
    if h % p != 0 || w % p != 0 {
        return Err(Error::shape(
            format!("spatial dims divisible by patch {p}"),
            format!("{h}x{w}"),
        ));
    }
    let (ph, pw) = (h / p, w / p);
    let mut out = Array2::<f64>::zeros((t * ph * pw, p * p * c));
    for ti in 0..t {
        for py in 0..ph {
            for px in 0..pw {
                let tok = (ti * ph + py) * pw + px;
                for dy in 0..p {
                    for dx in 0..p {
                        for ch in 0..c {
                            out[[tok, (dy * p + dx) * c + ch]] =
                                latents[[ti, py * p + dy, px * p + dx, ch]];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of `patchify`.
pub fn unpatchify(
    tokens: &Array2<f64>,
    t: usize,
    h: usize,
    w: usize,
    p: usize,
) -> Result<ndarray::Array4<f64>> {
    let (ph, pw) = (h / p, w / p);
    let c = tokens.dim().1 / (p * p);
    if tokens.dim() != (t * ph * pw, p * p * c) {
        return Err(Error::shape(
            format!("{}x{}", t * ph * pw, p * p * c),
            format!("{:?}", tokens.dim()),
        ));
    }
    let mut out = ndarray::Array4::<f64>::zeros((t, h, w, c));
    for ti in 0..t {
        for py in 0..ph {
            for px in 0..pw {
                let tok = (ti * ph + py) * pw + px;
                for dy in 0..p {
                    for dx in 0..p {
                        for ch in 0..c {
                            out[[ti, py * p + dy, px * p + dx, ch]] =
                                tokens[[tok, (dy * p + dx) * c + ch]];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// The denoiser. Latent geometry `(T, H_l, W_l, C_z)` and the feature channel
/// count are fixed at construction.
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub t_frames: usize,
    pub h_l: usize,
    pub w_l: usize,
    pub c_z: usize,
    pub c_h: usize,
    pub params: ParamSet,
}

impl Denoiser {
    pub fn new(
        cfg: DenoiserConfig,
        t_frames: usize,
        h_l: usize,
        w_l: usize,
        c_z: usize,
        c_h: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch_size;
        if h_l % p != 0 || w_l % p != 0 {
            return Err(Error::Config(format!(
                "latent grid {h_l}x{w_l} not divisible by patch {p}"
            )));
        }
        let d = cfg.model_dim;
        let tok_dim = p * p * c_z;
        let hidden = (d as f64 * cfg.mlp_ratio) as usize;
        let mut rng = seeded_rng(cfg.seed, 51);
        let mut ps = ParamSet::new();
        ps.add_normal("latent_embed.w", &[tok_dim, d], (1.0 / tok_dim as f64).sqrt(), &mut rng);
        ps.add_zeros("latent_embed.b", &[d]);
        let f_dim = p * p * c_h;
        ps.add_normal("feat_embed.w", &[f_dim, d], (1.0 / f_dim as f64).sqrt(), &mut rng);
        ps.add_zeros("feat_embed.b", &[d]);
        ps.add_normal(
            "cond.w1",
            &[cfg.cond_freq_dim, d],
            (1.0 / cfg.cond_freq_dim as f64).sqrt(),
            &mut rng,
        );
        ps.add_zeros("cond.b1", &[d]);
        ps.add_normal("cond.w2", &[d, d], (1.0 / d as f64).sqrt(), &mut rng);
        ps.add_zeros("cond.b2", &[d]);
        for l in 0..cfg.layers {
            add_mha_params(&mut ps, &format!("block{l}.attn"), d, cfg.heads, true, &mut rng);
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
            // modulation starts at identity (zeros) and is steered through a
            // shared base plus a low-rank, condition-dependent update
            ps.add_zeros(&format!("block{l}.ada.base"), &[1, 6 * d]);
            ps.add_normal(
                &format!("block{l}.ada.a"),
                &[d, cfg.adaln_rank],
                (1.0 / d as f64).sqrt(),
                &mut rng,
            );
            ps.add_normal(
                &format!("block{l}.ada.b"),
                &[cfg.adaln_rank, 6 * d],
                0.02,
                &mut rng,
            );
        }
        ps.add_zeros("final.ada.base", &[1, 2 * d]);
        ps.add_normal(
            "final.ada.a",
            &[d, cfg.adaln_rank],
            (1.0 / d as f64).sqrt(),
            &mut rng,
        );
        ps.add_normal("final.ada.b", &[cfg.adaln_rank, 2 * d], 0.02, &mut rng);
        ps.add_normal("out_proj.w", &[d, tok_dim], 0.02, &mut rng);
        ps.add_zeros("out_proj.b", &[tok_dim]);
        Ok(Denoiser {
            cfg,
            t_frames,
            h_l,
            w_l,
            c_z,
            c_h,
            params: ps,
        })
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        (self.h_l / self.cfg.patch_size, self.w_l / self.cfg.patch_size)
    }

    pub fn tokens_per_frame(&self) -> usize {
        let (ph, pw) = self.patch_grid();
        ph * pw
    }

    pub fn token_dim(&self) -> usize {
        self.cfg.patch_size * self.cfg.patch_size * self.c_z
    }

    fn check_inputs(&self, latents: &ndarray::Array4<f64>, features: &Array4<f32>) -> Result<()> {
        if latents.dim() != (self.t_frames, self.h_l, self.w_l, self.c_z) {
            return Err(Error::shape(
                format!(
                    "latents {}x{}x{}x{}",
                    self.t_frames, self.h_l, self.w_l, self.c_z
                ),
                format!("{:?}", latents.dim()),
            ));
        }
        if features.dim().0 != self.t_frames || features.dim().3 != self.c_h {
            return Err(Error::shape(
                format!("features Tx..x..x{} with T={}", self.c_h, self.t_frames),
                format!("{:?}", features.dim()),
            ));
        }
        Ok(())
    }

    /// Per-frame noise levels: the first `n_context` frames are clean
    /// context, the rest carry `sigma`.
    pub fn frame_sigmas(&self, sigma: f64, n_context: usize) -> Result<Vec<(f64, bool)>> {
        if n_context >= self.t_frames {
            return Err(Error::Argument(format!(
                "n_context {n_context} must leave at least one future frame of {}",
                self.t_frames
            )));
        }
        Ok((0..self.t_frames)
            .map(|t| (sigma, t < n_context))
            .collect())
    }

    /// Expand a per-frame scalar onto full token rows `[N, token_dim]`.
    fn expand_per_frame(&self, per_frame: &[f64]) -> Array2<f64> {
        let p = self.tokens_per_frame();
        let n = self.t_frames * p;
        let mut out = Array2::<f64>::zeros((n, self.token_dim()));
        for t in 0..self.t_frames {
            for row in t * p..(t + 1) * p {
                out.row_mut(row).fill(per_frame[t]);
            }
        }
        out
    }

    /// Build the inner network `F` on the graph; returns `[N, token_dim]`.
    /// `x_tokens` must already be `c_in`-scaled.
    fn network_graph(
        &self,
        g: &mut Graph,
        ids: &[Id],
        x_tokens: Id,
        features: &Array4<f32>,
        c_noise: &[f64],
    ) -> Id {
        let d = self.cfg.model_dim;
        let (ph, pw) = self.patch_grid();
        let p_tok = self.tokens_per_frame();
        let n = self.t_frames * p_tok;

        let mut cursor = 0usize;
        let (le_w, le_b, fe_w, fe_b) = (ids[0], ids[1], ids[2], ids[3]);
        let (c_w1, c_b1, c_w2, c_b2) = (ids[4], ids[5], ids[6], ids[7]);
        cursor += 8;

        // early fusion: latent patch embedding + feature patch embedding on
        // the same token layout (features resized to the latent grid first,
        // so each token keeps its within-patch feature detail)
        let mut x = g.matmul(x_tokens, le_w);
        x = g.add_bias(x, le_b);
        let feat_grid = resize_bilinear(features, self.h_l, self.w_l).mapv(|v| v as f64);
        let feat_tokens = patchify(&feat_grid, self.cfg.patch_size)
            .expect("latent grid divisibility checked at construction");
        debug_assert_eq!(feat_tokens.dim(), (n, self.cfg.patch_size.pow(2) * self.c_h));
        let f_in = g.input(feat_tokens.into_dyn());
        let mut f = g.matmul(f_in, fe_w);
        f = g.add_bias(f, fe_b);
        x = g.add(x, f);

        // per-frame conditioning embedding from the noise-level signal
        let mut emb = Array2::<f64>::zeros((self.t_frames, self.cfg.cond_freq_dim));
        for (t, &cn) in c_noise.iter().enumerate() {
            emb.row_mut(t)
                .assign(&sinusoidal_embedding(cn, self.cfg.cond_freq_dim));
        }
        let emb = g.input(emb.into_dyn());
        let mut e = g.matmul(emb, c_w1);
        e = g.add_bias(e, c_b1);
        e = g.silu(e);
        e = g.matmul(e, c_w2);
        let e = g.add_bias(e, c_b2); // [T, D]

        // constant expanders: frames -> tokens, and a [T,1] ones column for
        // broadcasting the shared modulation base
        let mut ef = Array2::<f64>::zeros((n, self.t_frames));
        for t in 0..self.t_frames {
            for row in t * p_tok..(t + 1) * p_tok {
                ef[[row, t]] = 1.0;
            }
        }
        let ef = g.input(ef.into_dyn());
        let ones_t = g.input(Array2::<f64>::ones((self.t_frames, 1)).into_dyn());
        let ones_nd = g.input(Array2::<f64>::ones((n, d)).into_dyn());

        let rope = build_rope_tables(self.t_frames, ph, pw, d / self.cfg.heads);

        // modulation pieces for one block: base[1, kD] + (e A) B, expanded to
        // token rows and sliced into k [N, D] signals
        let modulate = |g: &mut Graph, base: Id, a: Id, b: Id, k: usize| -> Vec<Id> {
            let lora = g.matmul(e, a);
            let lora = g.matmul(lora, b);
            let base_t = g.matmul(ones_t, base); // [T, kD]
            let m = g.add(base_t, lora);
            let m = g.matmul(ef, m); // [N, kD]
            (0..k).map(|i| g.slice_last(m, i * d, d)).collect()
        };

        for _ in 0..self.cfg.layers {
            let mha = take_mha_ids(ids, &mut cursor, true);
            let (w1, b1, w2, b2) = (
                ids[cursor],
                ids[cursor + 1],
                ids[cursor + 2],
                ids[cursor + 3],
            );
            let (ada_base, ada_a, ada_b) = (ids[cursor + 4], ids[cursor + 5], ids[cursor + 6]);
            cursor += 7;
            let m = modulate(g, ada_base, ada_a, ada_b, 6);
            let (sh1, sc1, ga1, sh2, sc2, ga2) = (m[0], m[1], m[2], m[3], m[4], m[5]);

            let h = g.layer_norm(x);
            let sc1p = g.add(ones_nd, sc1);
            let h = g.mul(h, sc1p);
            let h = g.add(h, sh1);
            let attn = multi_head_attention(g, h, &mha, self.cfg.heads, Some(&rope));
            let attn = g.mul(attn, ga1);
            x = g.add(x, attn);

            let h = g.layer_norm(x);
            let sc2p = g.add(ones_nd, sc2);
            let h = g.mul(h, sc2p);
            let h = g.add(h, sh2);
            let ff = mlp(g, h, w1, b1, w2, b2);
            let ff = g.mul(ff, ga2);
            x = g.add(x, ff);
        }

        let (f_base, f_a, f_b) = (ids[cursor], ids[cursor + 1], ids[cursor + 2]);
        let (out_w, out_b) = (ids[cursor + 3], ids[cursor + 4]);
        let m = modulate(g, f_base, f_a, f_b, 2);
        let h = g.layer_norm(x);
        let scp = g.add(ones_nd, m[1]);
        let h = g.mul(h, scp);
        let h = g.add(h, m[0]);
        let out = g.matmul(h, out_w);
        g.add_bias(out, out_b)
    }

    /// Build the full preconditioned denoiser on the graph:
    /// `D = c_skip * x + c_out * F(c_in * x; c_noise)` in token space.
    /// Returns the prediction id and the (constant) token arrangement of the
    /// input used for the skip path.
    pub fn denoise_graph(
        &self,
        g: &mut Graph,
        ids: &[Id],
        noised: &ndarray::Array4<f64>,
        features: &Array4<f32>,
        sigma: f64,
        n_context: usize,
    ) -> Result<Id> {
        self.check_inputs(noised, features)?;
        let frame_cfg = self.frame_sigmas(sigma, n_context)?;
        let mut c_in = Vec::with_capacity(self.t_frames);
        let mut c_skip = Vec::with_capacity(self.t_frames);
        let mut c_out = Vec::with_capacity(self.t_frames);
        let mut c_noise = Vec::with_capacity(self.t_frames);
        for &(s, is_ctx) in &frame_cfg {
            let p = precondition(s, is_ctx)?;
            c_in.push(p.c_in);
            c_skip.push(p.c_skip);
            c_out.push(p.c_out);
            c_noise.push(p.c_noise);
        }
        let x_tokens = patchify(noised, self.cfg.patch_size)?;
        let x_in = g.input(x_tokens.into_dyn());
        let cin_m = g.input(self.expand_per_frame(&c_in).into_dyn());
        let cskip_m = g.input(self.expand_per_frame(&c_skip).into_dyn());
        let cout_m = g.input(self.expand_per_frame(&c_out).into_dyn());
        let scaled = g.mul(x_in, cin_m);
        let net = self.network_graph(g, ids, scaled, features, &c_noise);
        let skip = g.mul(x_in, cskip_m);
        let res = g.mul(net, cout_m);
        Ok(g.add(skip, res))
    }

    /// Plain (non-graph) denoising pass: returns the predicted clean latent
    /// stack `[T, H_l, W_l, C_z]`.
    pub fn denoise(
        &self,
        noised: &ndarray::Array4<f64>,
        features: &Array4<f32>,
        sigma: f64,
        n_context: usize,
    ) -> Result<ndarray::Array4<f64>> {
        let mut g = Graph::new();
        let ids = self.params.register(&mut g);
        let pred = self.denoise_graph(&mut g, &ids, noised, features, sigma, n_context)?;
        let tokens = g
            .value(pred)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| Error::Numerical(e.to_string()))?;
        unpatchify(&tokens, self.t_frames, self.h_l, self.w_l, self.cfg.patch_size)
    }
}

/// Squared-error diffusion loss over future-frame tokens only, scaled by the
/// noise-level weight `lambda` and averaged over the future elements.
pub fn diffusion_loss_graph(
    model: &Denoiser,
    g: &mut Graph,
    pred: Id,
    clean: &ndarray::Array4<f64>,
    sigma: f64,
    n_context: usize,
) -> Result<Id> {
    let lam = precondition(sigma, false)?.weight;
    let target = patchify(clean, model.cfg.patch_size)?;
    let p_tok = model.tokens_per_frame();
    let n = model.t_frames * p_tok;
    let tok_dim = model.token_dim();
    let future_tokens = (model.t_frames - n_context) * p_tok;
    if future_tokens == 0 {
        return Err(Error::Argument("no future frames to supervise".into()));
    }
    // mask carries lambda on future rows and 0 on context rows; the final
    // scale converts the all-element mean into a future-element mean
    let mut mask = Array2::<f64>::zeros((n, tok_dim));
    for row in n_context * p_tok..n {
        mask.row_mut(row).fill(lam);
    }
    let tgt = g.input(target.into_dyn());
    let mask = g.input(mask.into_dyn());
    let diff = g.sub(pred, tgt);
    let sq = g.mul(diff, diff);
    let weighted = g.mul(sq, mask);
    let mean = g.mean_all(weighted);
    Ok(g.scale(mean, n as f64 / future_tokens as f64))
}

/// Scalar loss value without gradients (all-f64 path, for checks and evals).
pub fn diffusion_loss_value(
    model: &Denoiser,
    noised: &ndarray::Array4<f64>,
    clean: &ndarray::Array4<f64>,
    features: &Array4<f32>,
    sigma: f64,
    n_context: usize,
) -> Result<f64> {
    let mut g = Graph::new();
    let ids = model.params.register(&mut g);
    let pred = model.denoise_graph(&mut g, &ids, noised, features, sigma, n_context)?;
    let loss = diffusion_loss_graph(model, &mut g, pred, clean, sigma, n_context)?;
    Ok(g.scalar(loss))
}

/// Loss and parameter gradients for one training example.
pub fn diffusion_loss_and_grads(
    model: &Denoiser,
    noised: &ndarray::Array4<f64>,
    clean: &ndarray::Array4<f64>,
    features: &Array4<f32>,
    sigma: f64,
    n_context: usize,
) -> Result<(f64, Vec<ArrayD<f64>>)> {
    let mut g = Graph::new();
    let ids = model.params.register(&mut g);
    let pred = model.denoise_graph(&mut g, &ids, noised, features, sigma, n_context)?;
    let loss = diffusion_loss_graph(model, &mut g, pred, clean, sigma, n_context)?;
    let lv = g.scalar(loss);
    if !lv.is_finite() {
        return Err(Error::Numerical(format!("non-finite stage-2 loss {lv}")));
    }
    let grads = g.backward(loss);
    Ok((lv, model.params.collect_grads(&grads, &ids)))
}
