//! Neural-network building blocks: autodiff graph, parameters, optimizer,
//! and the attention/MLP compositions shared by both stages.

pub mod adam;
pub mod graph;
pub mod params;

use ndarray::ArrayD;

use graph::{Graph, Id};
use params::ParamSet;

/// Parameter ids for one multi-head attention block, as registered in a graph.
pub struct MhaIds {
    pub wq: Id,
    pub bq: Id,
    pub wk: Id,
    pub bk: Id,
    pub wv: Id,
    pub bv: Id,
    pub wo: Id,
    pub bo: Id,
    /// Optional RMS-norm scales applied to q and k per head dim.
    pub q_scale: Option<Id>,
    pub k_scale: Option<Id>,
}

/// Precomputed rotary tables for one token layout.
#[derive(Clone)]
pub struct RopeTables {
    pub cos: ArrayD<f64>,
    pub sin: ArrayD<f64>,
    pub segments: Vec<usize>,
}

/// Standard multi-head self-attention over a `[N, D]` token matrix.
pub fn multi_head_attention(
    g: &mut Graph,
    x: Id,
    ids: &MhaIds,
    heads: usize,
    rope: Option<&RopeTables>,
) -> Id {
    let n = g.value(x).shape()[0];
    let d = g.value(x).shape()[1];
    assert_eq!(d % heads, 0, "model dim divisible by heads");
    let dh = d / heads;

    let split = |g: &mut Graph, y: Id| -> Id {
        let y = g.reshape(y, &[n, heads, dh]);
        g.permute(y, &[1, 0, 2]) // [H, N, dh]
    };

    let mut q = g.matmul(x, ids.wq);
    q = g.add_bias(q, ids.bq);
    let mut k = g.matmul(x, ids.wk);
    k = g.add_bias(k, ids.bk);
    let mut v = g.matmul(x, ids.wv);
    v = g.add_bias(v, ids.bv);

    let mut q = split(g, q);
    let mut k = split(g, k);
    let v = split(g, v);

    if let Some(qs) = ids.q_scale {
        q = g.rms_norm(q, qs);
    }
    if let Some(ks) = ids.k_scale {
        k = g.rms_norm(k, ks);
    }
    if let Some(r) = rope {
        q = g.rope(q, r.cos.clone(), r.sin.clone(), &r.segments);
        k = g.rope(k, r.cos.clone(), r.sin.clone(), &r.segments);
    }

    let kt = g.permute(k, &[0, 2, 1]);
    let mut scores = g.bmm(q, kt);
    scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax_last(scores);
    let ctx = g.bmm(attn, v); // [H, N, dh]
    let ctx = g.permute(ctx, &[1, 0, 2]);
    let ctx = g.reshape(ctx, &[n, d]);
    let out = g.matmul(ctx, ids.wo);
    g.add_bias(out, ids.bo)
}

/// Two-layer GELU MLP.
pub fn mlp(g: &mut Graph, x: Id, w1: Id, b1: Id, w2: Id, b2: Id) -> Id {
    let h = g.matmul(x, w1);
    let h = g.add_bias(h, b1);
    let h = g.gelu(h);
    let h = g.matmul(h, w2);
    g.add_bias(h, b2)
}

/// Register attention parameters in a `ParamSet`, in the order consumed by
/// `take_mha_ids`.
pub fn add_mha_params(
    ps: &mut ParamSet,
    prefix: &str,
    dim: usize,
    heads: usize,
    qk_norm: bool,
    rng: &mut rand_chacha::ChaCha8Rng,
) {
    let std = (1.0 / dim as f64).sqrt();
    ps.add_normal(&format!("{prefix}.wq"), &[dim, dim], std, rng);
    ps.add_zeros(&format!("{prefix}.bq"), &[dim]);
    ps.add_normal(&format!("{prefix}.wk"), &[dim, dim], std, rng);
    ps.add_zeros(&format!("{prefix}.bk"), &[dim]);
    ps.add_normal(&format!("{prefix}.wv"), &[dim, dim], std, rng);
    ps.add_zeros(&format!("{prefix}.bv"), &[dim]);
    ps.add_normal(&format!("{prefix}.wo"), &[dim, dim], std, rng);
    ps.add_zeros(&format!("{prefix}.bo"), &[dim]);
    if qk_norm {
        let dh = dim / heads;
        ps.add_ones(&format!("{prefix}.q_scale"), &[dh]);
        ps.add_ones(&format!("{prefix}.k_scale"), &[dh]);
    }
}

/// Consume attention parameter ids registered by `add_mha_params` starting at
/// `*cursor`, advancing the cursor.
pub fn take_mha_ids(ids: &[Id], cursor: &mut usize, qk_norm: bool) -> MhaIds {
    let base = *cursor;
    *cursor += 8;
    let (q_scale, k_scale) = if qk_norm {
        *cursor += 2;
        (Some(ids[base + 8]), Some(ids[base + 9]))
    } else {
        (None, None)
    };
    MhaIds {
        wq: ids[base],
        bq: ids[base + 1],
        wk: ids[base + 2],
        bk: ids[base + 3],
        wv: ids[base + 4],
        bv: ids[base + 5],
        wo: ids[base + 6],
        bo: ids[base + 7],
        q_scale,
        k_scale,
    }
}

/// Relative-error finite-difference gradient check. `f` must be a pure
/// function of the parameters. Probes `num_probes` randomly chosen scalar
/// entries with central differences and returns the worst relative error.
pub fn grad_check<F>(
    f: F,
    params: &ParamSet,
    analytic: &[ArrayD<f64>],
    num_probes: usize,
    eps: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> f64
where
    F: Fn(&ParamSet) -> f64,
{
    use rand::Rng;
    let mut worst = 0.0f64;
    let total = params.total_elements();
    assert!(total > 0);
    for _ in 0..num_probes {
        // pick a parameter entry uniformly over all scalars
        let mut flat_idx = rng.gen_range(0..total);
        let mut pi = 0usize;
        while flat_idx >= params.get(pi).len() {
            flat_idx -= params.get(pi).len();
            pi += 1;
        }
        let mut plus = params.clone();
        let mut minus = params.clone();
        {
            let v = plus.get_mut(pi).as_slice_mut().unwrap();
            v[flat_idx] += eps;
        }
        {
            let v = minus.get_mut(pi).as_slice_mut().unwrap();
            v[flat_idx] -= eps;
        }
        let fd = (f(&plus) - f(&minus)) / (2.0 * eps);
        let an = analytic[pi].as_slice().unwrap()[flat_idx];
        let denom = an.abs().max(fd.abs()).max(1e-6);
        let rel = (fd - an).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
