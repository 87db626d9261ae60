//! Minimal reverse-mode autodiff over dense `f64` arrays.
//!
//! A `Graph` is a tape of eagerly evaluated nodes. Model forward passes build
//! a fresh graph per call; `backward` walks the tape in reverse and
//! accumulates gradients for every node marked as requiring them. The op set
//! is exactly what the two transformer stages need, nothing more.

use ndarray::{ArrayD, Axis, Ix2, Ix3, IxDyn};

pub type Id = usize;

#[derive(Debug, Clone)]
enum Op {
    /// Constant input; gradients are not tracked.
    Input,
    /// Trainable leaf.
    Param,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Scale(Id, f64),
    /// `[N, D] + [D]`, bias broadcast over rows.
    AddBias(Id, Id),
    /// `[N, K] x [K, M]`.
    Matmul(Id, Id),
    /// `[B, N, K] x [B, K, M]`.
    Bmm(Id, Id),
    Reshape(Id),
    Permute(Id, Vec<usize>),
    SoftmaxLast(Id),
    Gelu(Id),
    Silu(Id),
    /// Normalize the last axis to zero mean / unit variance (no affine).
    LayerNorm(Id),
    /// `x * scale / rms(x)` over the last axis; scale is a `[D]` param.
    RmsNorm(Id, Id),
    /// Segmented rotary embedding on the last axis of `[H, N, D]`.
    Rope {
        x: Id,
        cos: ArrayD<f64>,
        sin: ArrayD<f64>,
        segments: Vec<usize>,
    },
    SliceRows(Id, usize, usize),
    SliceLast(Id, usize, usize),
    ConcatRows(Id, Id),
    MeanAll(Id),
    /// Smooth L1 between two same-shaped tensors, averaged over elements.
    SmoothL1(Id, Id, f64),
}

struct Node {
    op: Op,
    value: ArrayD<f64>,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-6;
const RMS_EPS: f64 = 1e-8;

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: ArrayD<f64>, needs_grad: bool) -> Id {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn ng(&self, id: Id) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn value(&self, id: Id) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: Id) -> f64 {
        assert_eq!(self.nodes[id].value.len(), 1, "node is not a scalar");
        *self.nodes[id].value.iter().next().unwrap()
    }

    pub fn input(&mut self, a: ArrayD<f64>) -> Id {
        self.push(Op::Input, a, false)
    }

    pub fn param(&mut self, a: ArrayD<f64>) -> Id {
        self.push(Op::Param, a, true)
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), v, ng)
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Id {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let v = &self.nodes[a].value - &self.nodes[b].value;
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), v, ng)
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let v = &self.nodes[a].value * &self.nodes[b].value;
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), v, ng)
    }

    pub fn scale(&mut self, a: Id, s: f64) -> Id {
        let v = &self.nodes[a].value * s;
        let ng = self.ng(a);
        self.push(Op::Scale(a, s), v, ng)
    }

    pub fn add_bias(&mut self, a: Id, bias: Id) -> Id {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[bias].value);
        assert_eq!(vb.ndim(), 1, "bias must be 1-d");
        assert_eq!(
            va.shape().last(),
            vb.shape().last(),
            "bias dim must match last axis"
        );
        let a2 = va.view().into_dimensionality::<Ix2>().expect("add_bias 2-d");
        let b1 = vb.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let v = (&a2 + &b1).into_dyn();
        let ng = self.ng(a) || self.ng(bias);
        self.push(Op::AddBias(a, bias), v, ng)
    }

    pub fn matmul(&mut self, a: Id, b: Id) -> Id {
        let va = self.nodes[a]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs 2-d");
        let vb = self.nodes[b]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs 2-d");
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dims");
        let v = va.dot(&vb).into_dyn();
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Matmul(a, b), v, ng)
    }

    pub fn bmm(&mut self, a: Id, b: Id) -> Id {
        let va = self.nodes[a]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("bmm lhs 3-d");
        let vb = self.nodes[b]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("bmm rhs 3-d");
        assert_eq!(va.shape()[0], vb.shape()[0], "bmm batch");
        assert_eq!(va.shape()[2], vb.shape()[1], "bmm inner dims");
        let (bsz, n, m) = (va.shape()[0], va.shape()[1], vb.shape()[2]);
        let mut out = ndarray::Array3::<f64>::zeros((bsz, n, m));
        for i in 0..bsz {
            out.index_axis_mut(Axis(0), i)
                .assign(&va.index_axis(Axis(0), i).dot(&vb.index_axis(Axis(0), i)));
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Bmm(a, b), out.into_dyn(), ng)
    }

    pub fn reshape(&mut self, a: Id, shape: &[usize]) -> Id {
        let v = self.nodes[a]
            .value
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count");
        let ng = self.ng(a);
        self.push(Op::Reshape(a), v, ng)
    }

    pub fn permute(&mut self, a: Id, axes: &[usize]) -> Id {
        let v = self.nodes[a]
            .value
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let ng = self.ng(a);
        self.push(Op::Permute(a, axes.to_vec()), v, ng)
    }

    pub fn softmax_last(&mut self, a: Id) -> Id {
        let va = &self.nodes[a].value;
        let d = va.shape()[va.ndim() - 1];
        let rows = va.len() / d;
        let flat = va
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((rows, d))
            .unwrap();
        let mut out = flat;
        for mut row in out.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let v = out.into_shape_with_order(va.raw_dim()).unwrap();
        let ng = self.ng(a);
        self.push(Op::SoftmaxLast(a), v, ng)
    }

    pub fn gelu(&mut self, a: Id) -> Id {
        let v = self.nodes[a].value.mapv(gelu_f);
        let ng = self.ng(a);
        self.push(Op::Gelu(a), v, ng)
    }

    pub fn silu(&mut self, a: Id) -> Id {
        let v = self.nodes[a].value.mapv(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(Op::Silu(a), v, ng)
    }

    pub fn layer_norm(&mut self, a: Id) -> Id {
        let va = &self.nodes[a].value;
        let d = va.shape()[va.ndim() - 1];
        let rows = va.len() / d;
        let mut out = va
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((rows, d))
            .unwrap();
        for mut row in out.rows_mut() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|x| (x - mean) * (x - mean)).mean().unwrap();
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        let v = out.into_shape_with_order(va.raw_dim()).unwrap();
        let ng = self.ng(a);
        self.push(Op::LayerNorm(a), v, ng)
    }

    pub fn rms_norm(&mut self, a: Id, scale: Id) -> Id {
        let va = &self.nodes[a].value;
        let vs = &self.nodes[scale].value;
        let d = va.shape()[va.ndim() - 1];
        assert_eq!(vs.len(), d, "rms_norm scale dim");
        let rows = va.len() / d;
        let flat = va
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((rows, d))
            .unwrap();
        let sv = vs
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let mut out = flat;
        for mut row in out.rows_mut() {
            let rms = (row.mapv(|x| x * x).mean().unwrap() + RMS_EPS).sqrt();
            for (x, g) in row.iter_mut().zip(sv.iter()) {
                *x = *x * g / rms;
            }
        }
        let v = out.into_shape_with_order(va.raw_dim()).unwrap();
        let ng = self.ng(a) || self.ng(scale);
        self.push(Op::RmsNorm(a, scale), v, ng)
    }

    /// Segmented rotary embedding. `x` is `[H, N, D]`; `cos`/`sin` are
    /// `[N, D]` and broadcast over heads. `segments` partitions D; the
    /// half-rotation is applied within each segment independently.
    pub fn rope(&mut self, x: Id, cos: ArrayD<f64>, sin: ArrayD<f64>, segments: &[usize]) -> Id {
        let vx = &self.nodes[x].value;
        assert_eq!(vx.ndim(), 3, "rope expects [H, N, D]");
        let d = vx.shape()[2];
        assert_eq!(segments.iter().sum::<usize>(), d, "rope segments cover D");
        assert!(segments.iter().all(|s| s % 2 == 0), "rope segments even");
        assert_eq!(cos.shape(), &[vx.shape()[1], d], "rope cos shape");
        assert_eq!(sin.shape(), &[vx.shape()[1], d], "rope sin shape");
        let v = rope_apply(vx, &cos, &sin, segments, false);
        let ng = self.ng(x);
        self.push(
            Op::Rope {
                x,
                cos,
                sin,
                segments: segments.to_vec(),
            },
            v,
            ng,
        )
    }

    pub fn slice_rows(&mut self, a: Id, start: usize, len: usize) -> Id {
        let va = &self.nodes[a].value;
        assert!(start + len <= va.shape()[0], "slice_rows bounds");
        let v = va
            .slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
            .as_standard_layout()
            .to_owned();
        let ng = self.ng(a);
        self.push(Op::SliceRows(a, start, len), v, ng)
    }

    pub fn slice_last(&mut self, a: Id, start: usize, len: usize) -> Id {
        let va = &self.nodes[a].value;
        let last = va.ndim() - 1;
        assert!(start + len <= va.shape()[last], "slice_last bounds");
        let v = va
            .slice_axis(Axis(last), ndarray::Slice::from(start..start + len))
            .as_standard_layout()
            .to_owned();
        let ng = self.ng(a);
        self.push(Op::SliceLast(a, start, len), v, ng)
    }

    pub fn concat_rows(&mut self, a: Id, b: Id) -> Id {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(&va.shape()[1..], &vb.shape()[1..], "concat_rows trailing");
        let v = ndarray::concatenate(Axis(0), &[va.view(), vb.view()])
            .expect("concat_rows")
            .as_standard_layout()
            .to_owned();
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::ConcatRows(a, b), v, ng)
    }

    pub fn mean_all(&mut self, a: Id) -> Id {
        let m = self.nodes[a].value.mean().expect("mean of empty tensor");
        let ng = self.ng(a);
        self.push(Op::MeanAll(a), ndarray::arr0(m).into_dyn(), ng)
    }

    pub fn smooth_l1(&mut self, pred: Id, target: Id, beta: f64) -> Id {
        assert!(beta > 0.0, "smooth_l1 beta must be positive");
        assert_eq!(
            self.value(pred).shape(),
            self.value(target).shape(),
            "smooth_l1 shapes"
        );
        let diff = &self.nodes[pred].value - &self.nodes[target].value;
        let loss = diff
            .mapv(|d| {
                let a = d.abs();
                if a < beta {
                    0.5 * d * d / beta
                } else {
                    a - 0.5 * beta
                }
            })
            .mean()
            .unwrap();
        let ng = self.ng(pred) || self.ng(target);
        self.push(
            Op::SmoothL1(pred, target, beta),
            ndarray::arr0(loss).into_dyn(),
            ng,
        )
    }

    /// Run reverse-mode accumulation from a scalar loss node. Returns one
    /// gradient slot per node; only nodes with `needs_grad` are populated.
    pub fn backward(&self, loss: Id) -> Vec<Option<ArrayD<f64>>> {
        assert_eq!(self.nodes[loss].value.len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(ArrayD::ones(self.nodes[loss].value.raw_dim()));
        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        grads
    }

    fn acc(grads: &mut [Option<ArrayD<f64>>], id: Id, delta: ArrayD<f64>) {
        match &mut grads[id] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, id: Id, g: &ArrayD<f64>, grads: &mut Vec<Option<ArrayD<f64>>>) {
        match &self.nodes[id].op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                if self.ng(*a) {
                    Self::acc(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    Self::acc(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    Self::acc(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    Self::acc(grads, *b, -g.clone());
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    Self::acc(grads, *a, g * &self.nodes[*b].value);
                }
                if self.ng(*b) {
                    Self::acc(grads, *b, g * &self.nodes[*a].value);
                }
            }
            Op::Scale(a, s) => {
                if self.ng(*a) {
                    Self::acc(grads, *a, g * *s);
                }
            }
            Op::AddBias(a, b) => {
                if self.ng(*a) {
                    Self::acc(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    Self::acc(grads, *b, g2.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::Matmul(a, b) => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                if self.ng(*a) {
                    let vb = self.nodes[*b].value.view().into_dimensionality::<Ix2>().unwrap();
                    Self::acc(grads, *a, g2.dot(&vb.t()).into_dyn());
                }
                if self.ng(*b) {
                    let va = self.nodes[*a].value.view().into_dimensionality::<Ix2>().unwrap();
                    Self::acc(grads, *b, va.t().dot(&g2).into_dyn());
                }
            }
            Op::Bmm(a, b) => {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let va = self.nodes[*a].value.view().into_dimensionality::<Ix3>().unwrap();
                let vb = self.nodes[*b].value.view().into_dimensionality::<Ix3>().unwrap();
                let bsz = g3.shape()[0];
                if self.ng(*a) {
                    let mut da = ndarray::Array3::<f64>::zeros((bsz, va.shape()[1], va.shape()[2]));
                    for i in 0..bsz {
                        da.index_axis_mut(Axis(0), i).assign(
                            &g3.index_axis(Axis(0), i)
                                .dot(&vb.index_axis(Axis(0), i).t()),
                        );
                    }
                    Self::acc(grads, *a, da.into_dyn());
                }
                if self.ng(*b) {
                    let mut db = ndarray::Array3::<f64>::zeros((bsz, vb.shape()[1], vb.shape()[2]));
                    for i in 0..bsz {
                        db.index_axis_mut(Axis(0), i).assign(
                            &va.index_axis(Axis(0), i)
                                .t()
                                .dot(&g3.index_axis(Axis(0), i)),
                        );
                    }
                    Self::acc(grads, *b, db.into_dyn());
                }
            }
            Op::Reshape(a) => {
                if self.ng(*a) {
                    let pg = g
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order(self.nodes[*a].value.raw_dim())
                        .unwrap();
                    Self::acc(grads, *a, pg);
                }
            }
            Op::Permute(a, axes) => {
                if self.ng(*a) {
                    let mut inv = vec![0usize; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    let pg = g
                        .view()
                        .permuted_axes(IxDyn(&inv))
                        .as_standard_layout()
                        .to_owned();
                    Self::acc(grads, *a, pg);
                }
            }
            Op::SoftmaxLast(a) => {
                if self.ng(*a) {
                    let y = &self.nodes[id].value;
                    let d = y.shape()[y.ndim() - 1];
                    let rows = y.len() / d;
                    let yf = y
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order((rows, d))
                        .unwrap();
                    let gf = g
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order((rows, d))
                        .unwrap();
                    let mut out = ndarray::Array2::<f64>::zeros((rows, d));
                    for i in 0..rows {
                        let yr = yf.row(i);
                        let gr = gf.row(i);
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
                        for j in 0..d {
                            out[[i, j]] = yr[j] * (gr[j] - dot);
                        }
                    }
                    let pg = out
                        .into_shape_with_order(self.nodes[*a].value.raw_dim())
                        .unwrap();
                    Self::acc(grads, *a, pg);
                }
            }
            Op::Gelu(a) => {
                if self.ng(*a) {
                    let dx = self.nodes[*a].value.mapv(gelu_df);
                    Self::acc(grads, *a, g * &dx);
                }
            }
            Op::Silu(a) => {
                if self.ng(*a) {
                    let dx = self.nodes[*a].value.mapv(|x| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    });
                    Self::acc(grads, *a, g * &dx);
                }
            }
            Op::LayerNorm(a) => {
                if self.ng(*a) {
                    let x = &self.nodes[*a].value;
                    let y = &self.nodes[id].value;
                    let d = x.shape()[x.ndim() - 1];
                    let rows = x.len() / d;
                    let xf = x
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order((rows, d))
                        .unwrap();
                    let yf = y
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order((rows, d))
                        .unwrap();
                    let gf = g
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order((rows, d))
                        .unwrap();
                    let mut out = ndarray::Array2::<f64>::zeros((rows, d));
                    for i in 0..rows {
                        let xr = xf.row(i);
                        let mean = xr.mean().unwrap();
                        let var = xr.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let yr = yf.row(i);
                        let gr = gf.row(i);
                        let gm = gr.mean().unwrap();
                        let gy: f64 =
                            gr.iter().zip(yr.iter()).map(|(g, y)| g * y).sum::<f64>() / d as f64;
                        for j in 0..d {
                            out[[i, j]] = inv * (gr[j] - gm - yr[j] * gy);
                        }
                    }
                    let pg = out.into_shape_with_order(x.raw_dim()).unwrap();
                    Self::acc(grads, *a, pg);
                }
            }
            Op::RmsNorm(a, s) => {
                let x = &self.nodes[*a].value;
                let sv = &self.nodes[*s].value;
                let d = x.shape()[x.ndim() - 1];
                let rows = x.len() / d;
                let xf = x
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order((rows, d))
                    .unwrap();
                let gf = g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order((rows, d))
                    .unwrap();
                let sv1 = sv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                if self.ng(*a) {
                    let mut out = ndarray::Array2::<f64>::zeros((rows, d));
                    for i in 0..rows {
                        let xr = xf.row(i);
                        let gr = gf.row(i);
                        let rms2 = xr.mapv(|v| v * v).mean().unwrap() + RMS_EPS;
                        let rms = rms2.sqrt();
                        let dot: f64 = (0..d).map(|j| gr[j] * sv1[j] * xr[j]).sum();
                        for j in 0..d {
                            out[[i, j]] =
                                gr[j] * sv1[j] / rms - xr[j] * dot / (d as f64 * rms2 * rms);
                        }
                    }
                    Self::acc(grads, *a, out.into_shape_with_order(x.raw_dim()).unwrap());
                }
                if self.ng(*s) {
                    let mut ds = ndarray::Array1::<f64>::zeros(d);
                    for i in 0..rows {
                        let xr = xf.row(i);
                        let gr = gf.row(i);
                        let rms = (xr.mapv(|v| v * v).mean().unwrap() + RMS_EPS).sqrt();
                        for j in 0..d {
                            ds[j] += gr[j] * xr[j] / rms;
                        }
                    }
                    Self::acc(grads, *s, ds.into_dyn());
                }
            }
            Op::Rope {
                x,
                cos,
                sin,
                segments,
            } => {
                if self.ng(*x) {
                    // The rotation is orthogonal per pair; the adjoint is the
                    // inverse rotation applied to the upstream gradient.
                    let pg = rope_apply(g, cos, sin, segments, true);
                    Self::acc(grads, *x, pg);
                }
            }
            Op::SliceRows(a, start, len) => {
                if self.ng(*a) {
                    let mut pg = ArrayD::<f64>::zeros(self.nodes[*a].value.raw_dim());
                    pg.slice_axis_mut(Axis(0), ndarray::Slice::from(*start..start + len))
                        .assign(g);
                    Self::acc(grads, *a, pg);
                }
            }
            Op::SliceLast(a, start, len) => {
                if self.ng(*a) {
                    let va = &self.nodes[*a].value;
                    let last = va.ndim() - 1;
                    let mut pg = ArrayD::<f64>::zeros(va.raw_dim());
                    pg.slice_axis_mut(Axis(last), ndarray::Slice::from(*start..start + len))
                        .assign(g);
                    Self::acc(grads, *a, pg);
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[*a].value.shape()[0];
                let nb = self.nodes[*b].value.shape()[0];
                if self.ng(*a) {
                    let pg = g
                        .slice_axis(Axis(0), ndarray::Slice::from(0..na))
                        .to_owned();
                    Self::acc(grads, *a, pg);
                }
                if self.ng(*b) {
                    let pg = g
                        .slice_axis(Axis(0), ndarray::Slice::from(na..na + nb))
                        .to_owned();
                    Self::acc(grads, *b, pg);
                }
            }
            Op::MeanAll(a) => {
                if self.ng(*a) {
                    let n = self.nodes[*a].value.len() as f64;
                    let gs = *g.iter().next().unwrap();
                    let pg = ArrayD::from_elem(self.nodes[*a].value.raw_dim(), gs / n);
                    Self::acc(grads, *a, pg);
                }
            }
            Op::SmoothL1(p, t, beta) => {
                let diff = &self.nodes[*p].value - &self.nodes[*t].value;
                let n = diff.len() as f64;
                let gs = *g.iter().next().unwrap();
                let dp = diff.mapv(|d| {
                    let el = if d.abs() < *beta { d / beta } else { d.signum() };
                    gs * el / n
                });
                if self.ng(*p) {
                    Self::acc(grads, *p, dp.clone());
                }
                if self.ng(*t) {
                    Self::acc(grads, *t, -dp);
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_f(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_df(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Apply (or invert, for the adjoint) the segmented half-rotation
/// `y = x .* cos + rot(x) .* sin` where `rot` swaps segment halves with a
/// sign flip. `x` is `[H, N, D]`, `cos`/`sin` are `[N, D]`.
fn rope_apply(
    x: &ArrayD<f64>,
    cos: &ArrayD<f64>,
    sin: &ArrayD<f64>,
    segments: &[usize],
    adjoint: bool,
) -> ArrayD<f64> {
    let x3 = x.view().into_dimensionality::<Ix3>().unwrap();
    let c2 = cos.view().into_dimensionality::<Ix2>().unwrap();
    let s2 = sin.view().into_dimensionality::<Ix2>().unwrap();
    let (h, n, d) = (x3.shape()[0], x3.shape()[1], x3.shape()[2]);
    let mut out = ndarray::Array3::<f64>::zeros((h, n, d));
    // Forward per segment: y = x.*c + rot(x).*s with
    //   rot(x)[j] = -x[j+half] for j < half, x[j-half] for j >= half.
    // Adjoint (transpose of the rotation): x_adj = g.*c + rot_t(g.*s) with
    //   rot_t(v)[j] = v[j+half] for j < half, -v[j-half] for j >= half.
    for hi in 0..h {
        for ni in 0..n {
            let mut off = 0usize;
            for &seg in segments {
                let half = seg / 2;
                for j in 0..seg {
                    let xj = x3[[hi, ni, off + j]];
                    let c = c2[[ni, off + j]];
                    let v = if !adjoint {
                        let (rj, rsign) = if j < half {
                            (off + j + half, -1.0)
                        } else {
                            (off + j - half, 1.0)
                        };
                        let s = s2[[ni, off + j]];
                        xj * c + rsign * x3[[hi, ni, rj]] * s
                    } else {
                        let (rj, rsign) = if j < half {
                            (off + j + half, 1.0)
                        } else {
                            (off + j - half, -1.0)
                        };
                        xj * c + rsign * x3[[hi, ni, rj]] * s2[[ni, rj]]
                    };
                    out[[hi, ni, off + j]] = v;
                }
                off += seg;
            }
        }
    }
    out.into_dyn()
}
