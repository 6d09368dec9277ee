use std::collections::HashMap;

use rand::Rng;

use super::params::ParamStore;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Linear { x: usize, w: usize, b: Option<usize> },
    Relu(usize),
    Conv3x3 { x: usize, w: usize, b: usize, cols: Vec<f64>, dims: [usize; 4] },
    MaxPool3x3 { x: usize, argmax: Vec<usize> },
    MaxOverSet { x: usize, argmax: Vec<usize> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Dropout { x: usize, mask: Vec<f64> },
    Concat(Vec<usize>),
    Reshape(usize),
    BatchedMatVec { t: usize, v: usize, p: usize, q: usize },
    QuatToRot { q: usize, norms: Vec<f64> },
    NormalizedError { pred: usize, target: Vec<f64>, l1: bool, norms: Vec<f64> },
    SumSquares(Vec<usize>),
    AddScaled { a: usize, b: usize, s: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics to fold into running averages after a training step.
#[derive(Debug, Clone)]
pub struct RunningUpdate {
    pub mean_id: usize,
    pub var_id: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    running: Vec<RunningUpdate>,
}

fn mismatch(layer: &str, detail: String) -> Error {
    Error::ShapeMismatch { layer: layer.into(), detail }
}

/// Gradients of one backward pass, indexed by tape node.
#[derive(Debug, Clone)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// One tensor per store entry (zeros where the tape did not use it).
    pub fn params(&self, tape: &Tape, store: &ParamStore) -> Vec<Tensor> {
        store
            .entries()
            .iter()
            .enumerate()
            .map(|(id, e)| {
                tape.params
                    .get(&id)
                    .and_then(|v| self.grads[v.0].clone())
                    .unwrap_or_else(|| Tensor::zeros(&e.value.shape))
            })
            .collect()
    }
}

fn acc(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(t) => t.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn acc_data(grads: &mut [Option<Tensor>], idx: usize, shape: &[usize], data: Vec<f64>) {
    acc(grads, idx, Tensor { shape: shape.to_vec(), data });
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn running_updates(&self) -> &[RunningUpdate] {
        &self.running
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by `backward`.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter `id` of `store`; repeated requests share one node.
    pub fn param(&mut self, store: &ParamStore, id: usize) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn param_var(&self, id: usize) -> Option<Var> {
        self.params.get(&id).copied()
    }

    /// `x·W (+ b)` over the last axis of `x`; `W` is `(in, out)`.
    pub fn linear(&mut self, layer: &str, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (rows, fan_in) = (xv.rows(), xv.cols());
        if wv.shape.len() != 2 || wv.shape[0] != fan_in {
            return Err(mismatch(layer, format!("input width {fan_in} vs weight {:?}", wv.shape)));
        }
        let out = wv.shape[1];
        let mut data = vec![0.0; rows * out];
        gemm(rows, fan_in, out, &xv.data, false, &wv.data, false, &mut data, false);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != out {
                return Err(mismatch(layer, format!("bias length {} vs width {out}", bv.len())));
            }
            for row in data.chunks_mut(out) {
                for (y, bb) in row.iter_mut().zip(&bv.data) {
                    *y += bb;
                }
            }
        }
        let mut shape = xv.shape.clone();
        *shape.last_mut().unwrap() = out;
        let mut ids = vec![x.0, w.0];
        ids.extend(b.map(|b| b.0));
        let needs = self.needs(&ids);
        Ok(self.push(Tensor { shape, data }, Op::Linear { x: x.0, w: w.0, b: b.map(|b| b.0) }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor { shape: xv.shape.clone(), data };
        let needs = self.needs(&[x.0]);
        self.push(t, Op::Relu(x.0), needs)
    }

    /// 3×3 convolution, stride 1, zero padding 1, on `(B, H, W, C)`;
    /// `W` is `(9·C, out)` with rows ordered `(ky, kx, c)`.
    pub fn conv3x3(&mut self, layer: &str, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape.len() != 4 {
            return Err(mismatch(layer, format!("expected (B, H, W, C), got {:?}", xv.shape)));
        }
        let [bs, h, wd, c] = [xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]];
        let wv = self.value(w);
        if wv.shape.len() != 2 || wv.shape[0] != 9 * c {
            return Err(mismatch(layer, format!("{c} input channels vs weight {:?}", wv.shape)));
        }
        let out = wv.shape[1];
        let bv = self.value(b);
        if bv.len() != out {
            return Err(mismatch(layer, format!("bias length {} vs {out} channels", bv.len())));
        }
        let rows = bs * h * wd;
        let mut cols = vec![0.0; rows * 9 * c];
        for bi in 0..bs {
            for y in 0..h {
                for x0 in 0..wd {
                    let r = (bi * h + y) * wd + x0;
                    for ky in 0..3 {
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let xx = x0 as isize + kx as isize - 1;
                            if xx < 0 || xx >= wd as isize {
                                continue;
                            }
                            let src = ((bi * h + yy as usize) * wd + xx as usize) * c;
                            let dst = r * 9 * c + (ky * 3 + kx) * c;
                            cols[dst..dst + c].copy_from_slice(&xv.data[src..src + c]);
                        }
                    }
                }
            }
        }
        let mut data = vec![0.0; rows * out];
        gemm(rows, 9 * c, out, &cols, false, &wv.data, false, &mut data, false);
        for row in data.chunks_mut(out) {
            for (y, bb) in row.iter_mut().zip(&bv.data) {
                *y += bb;
            }
        }
        let needs = self.needs(&[x.0, w.0, b.0]);
        let t = Tensor { shape: vec![bs, h, wd, out], data };
        Ok(self.push(t, Op::Conv3x3 { x: x.0, w: w.0, b: b.0, cols, dims: [bs, h, wd, c] }, needs))
    }

    /// 3×3 max pool, stride 1, padding 1 (padding never wins).
    pub fn maxpool3x3(&mut self, layer: &str, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape.len() != 4 {
            return Err(mismatch(layer, format!("expected (B, H, W, C), got {:?}", xv.shape)));
        }
        let [bs, h, wd, c] = [xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]];
        let mut data = vec![0.0; xv.len()];
        let mut argmax = vec![0; xv.len()];
        for bi in 0..bs {
            for y in 0..h {
                for x0 in 0..wd {
                    for ch in 0..c {
                        let mut best = (f64::NEG_INFINITY, 0);
                        for yy in y.saturating_sub(1)..(y + 2).min(h) {
                            for xx in x0.saturating_sub(1)..(x0 + 2).min(wd) {
                                let src = ((bi * h + yy) * wd + xx) * c + ch;
                                if xv.data[src] > best.0 {
                                    best = (xv.data[src], src);
                                }
                            }
                        }
                        let o = ((bi * h + y) * wd + x0) * c + ch;
                        data[o] = best.0;
                        argmax[o] = best.1;
                    }
                }
            }
        }
        let t = Tensor { shape: xv.shape.clone(), data };
        let needs = self.needs(&[x.0]);
        Ok(self.push(t, Op::MaxPool3x3 { x: x.0, argmax }, needs))
    }

    /// `(B, P, C)` to `(B, C)` by a maximum over the set axis.
    pub fn max_over_set(&mut self, layer: &str, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape.len() != 3 || xv.shape[1] == 0 {
            return Err(mismatch(layer, format!("expected nonempty (B, P, C), got {:?}", xv.shape)));
        }
        let [bs, p, c] = [xv.shape[0], xv.shape[1], xv.shape[2]];
        let mut data = vec![f64::NEG_INFINITY; bs * c];
        let mut argmax = vec![0; bs * c];
        for bi in 0..bs {
            for k in 0..p {
                for ch in 0..c {
                    let src = (bi * p + k) * c + ch;
                    if xv.data[src] > data[bi * c + ch] {
                        data[bi * c + ch] = xv.data[src];
                        argmax[bi * c + ch] = src;
                    }
                }
            }
        }
        let needs = self.needs(&[x.0]);
        Ok(self.push(Tensor { shape: vec![bs, c], data }, Op::MaxOverSet { x: x.0, argmax }, needs))
    }

    /// Batch normalization over the last axis. Training mode normalizes by
    /// batch statistics and queues a running-average update.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(&mut self, layer: &str, store: &ParamStore, x: Var, ids: [usize; 4], mode: Mode) -> Result<Var> {
        let [g_id, b_id, mean_id, var_id] = ids;
        let gamma = self.param(store, g_id);
        let beta = self.param(store, b_id);
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        if self.value(gamma).len() != d {
            return Err(mismatch(layer, format!("width {d} vs {} features", self.value(gamma).len())));
        }
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; d];
                for row in xv.data.chunks(d) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; d];
                for row in xv.data.chunks(d) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                (mean, var)
            }
            Mode::Eval => (store.value(mean_id).data.clone(), store.value(var_id).data.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gv, bv) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; xv.len()];
        let mut data = vec![0.0; xv.len()];
        for (r, row) in xv.data.chunks(d).enumerate() {
            for k in 0..d {
                let h = (row[k] - mean[k]) * inv_std[k];
                xhat[r * d + k] = h;
                data[r * d + k] = gv[k] * h + bv[k];
            }
        }
        let shape = xv.shape.clone();
        let train = mode == Mode::Train;
        if train {
            self.running.push(RunningUpdate { mean_id, var_id, mean, var });
        }
        let needs = self.needs(&[x.0, gamma.0, beta.0]);
        Ok(self.push(Tensor { shape, data }, Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std, train }, needs))
    }

    /// Inverted dropout with keep probability `keep`; identity in `Eval` mode
    /// or when `keep >= 1`.
    pub fn dropout<R: Rng>(&mut self, x: Var, keep: f64, mode: Mode, rng: &mut R) -> Var {
        if mode == Mode::Eval || keep >= 1.0 {
            return x;
        }
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len()).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let data = xv.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor { shape: xv.shape.clone(), data };
        let needs = self.needs(&[x.0]);
        self.push(t, Op::Dropout { x: x.0, mask }, needs)
    }

    /// Concatenation along the last axis of row-compatible tensors.
    pub fn concat(&mut self, layer: &str, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(mismatch(layer, "concatenated tensors differ in row count".into()));
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs = self.needs(&ids);
        Ok(self.push(Tensor { shape: vec![rows, total], data }, Op::Concat(ids), needs))
    }

    pub fn reshape(&mut self, layer: &str, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape).map_err(|_| mismatch(layer, format!("cannot reshape {:?} to {shape:?}", self.value(x).shape)))?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(t, Op::Reshape(x.0), needs))
    }

    /// Per-row `T·v` with `T` stored row-major as `(B, p·q)` and `v` as `(B, q)`.
    pub fn batched_matvec(&mut self, layer: &str, t: Var, v: Var, p: usize, q: usize) -> Result<Var> {
        let (tv, vv) = (self.value(t), self.value(v));
        if tv.cols() != p * q || vv.cols() != q || tv.rows() != vv.rows() {
            return Err(mismatch(layer, format!("transform {:?} vs vector {:?} for a {p}×{q} map", tv.shape, vv.shape)));
        }
        let rows = vv.rows();
        let mut data = vec![0.0; rows * p];
        for r in 0..rows {
            let (tr, vr) = (tv.row(r), vv.row(r));
            for i in 0..p {
                data[r * p + i] = (0..q).map(|j| tr[i * q + j] * vr[j]).sum();
            }
        }
        let needs = self.needs(&[t.0, v.0]);
        Ok(self.push(Tensor { shape: vec![rows, p], data }, Op::BatchedMatVec { t: t.0, v: v.0, p, q }, needs))
    }

    /// `(B, 4)` quaternions `(w, x, y, z)` to row-major `(B, 9)` rotation
    /// matrices of the normalized quaternions.
    pub fn quat_to_rot(&mut self, layer: &str, q: Var) -> Result<Var> {
        let qv = self.value(q);
        if qv.cols() != 4 {
            return Err(mismatch(layer, format!("quaternion width {}", qv.cols())));
        }
        let rows = qv.rows();
        let mut data = Vec::with_capacity(rows * 9);
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = qv.row(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < 1e-12 {
                return Err(Error::ZeroQuaternion);
            }
            norms.push(n);
            data.extend_from_slice(&quat_matrix([row[0] / n, row[1] / n, row[2] / n, row[3] / n]));
        }
        let needs = self.needs(&[q.0]);
        Ok(self.push(Tensor { shape: vec![rows, 9], data }, Op::QuatToRot { q: q.0, norms }, needs))
    }

    /// Mean over rows of `‖p/‖p‖ − t‖²` (or the L1 norm with `l1`).
    pub fn normalized_error(&mut self, pred: Var, target: &Tensor, l1: bool) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape != target.shape {
            return Err(mismatch("loss", format!("prediction {:?} vs target {:?}", pv.shape, target.shape)));
        }
        let (rows, d) = (pv.rows(), pv.cols());
        let mut norms = Vec::with_capacity(rows);
        let mut total = 0.0;
        for r in 0..rows {
            let (p, t) = (pv.row(r), target.row(r));
            let n = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < 1e-12 {
                return Err(Error::ZeroVector);
            }
            norms.push(n);
            total += (0..d).map(|k| {
                let e = p[k] / n - t[k];
                if l1 {
                    e.abs()
                } else {
                    e * e
                }
            }).sum::<f64>();
        }
        let needs = self.needs(&[pred.0]);
        let op = Op::NormalizedError { pred: pred.0, target: target.data.clone(), l1, norms };
        Ok(self.push(Tensor::scalar(total / rows as f64), op, needs))
    }

    /// Sum of squared entries of every listed tensor.
    pub fn sum_squares(&mut self, xs: &[Var]) -> Var {
        let s: f64 = xs.iter().map(|x| self.value(*x).data.iter().map(|v| v * v).sum::<f64>()).sum();
        let ids: Vec<usize> = xs.iter().map(|x| x.0).collect();
        let needs = self.needs(&ids);
        self.push(Tensor::scalar(s), Op::SumSquares(ids), needs)
    }

    /// `a + s·b` for equal shapes.
    pub fn add_scaled(&mut self, a: Var, b: Var, s: f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(mismatch("add", format!("{:?} vs {:?}", av.shape, bv.shape)));
        }
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + s * y).collect();
        let t = Tensor { shape: av.shape.clone(), data };
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(t, Op::AddScaled { a: a.0, b: b.0, s }, needs))
    }

    /// Reverse pass from `out`, seeded with `upstream` (ones when `None`).
    pub fn backward(&self, out: Var, upstream: Option<&Tensor>) -> Grads {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(match upstream {
            Some(u) => u.clone(),
            None => Tensor::filled(&self.value(out).shape, 1.0),
        });
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let need = |k: usize| nodes[k].needs_grad;
        match &nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
                let (rows, fan_in, out) = (xv.rows(), xv.cols(), wv.shape[1]);
                if need(*x) {
                    let mut dx = vec![0.0; rows * fan_in];
                    gemm(rows, out, fan_in, &g.data, false, &wv.data, true, &mut dx, false);
                    acc_data(grads, *x, &xv.shape, dx);
                }
                if need(*w) {
                    let mut dw = vec![0.0; fan_in * out];
                    gemm(fan_in, rows, out, &xv.data, true, &g.data, false, &mut dw, false);
                    acc_data(grads, *w, &wv.shape, dw);
                }
                if let Some(b) = b {
                    if need(*b) {
                        acc_data(grads, *b, &nodes[*b].value.shape, col_sums(&g.data, out));
                    }
                }
            }
            Op::Relu(x) => {
                let xv = &nodes[*x].value;
                let d = xv.data.iter().zip(&g.data).map(|(v, gg)| if *v > 0.0 { *gg } else { 0.0 }).collect();
                acc_data(grads, *x, &xv.shape, d);
            }
            Op::Conv3x3 { x, w, b, cols, dims } => {
                let [bs, h, wd, c] = *dims;
                let wv = &nodes[*w].value;
                let (rows, out) = (bs * h * wd, wv.shape[1]);
                if need(*w) {
                    let mut dw = vec![0.0; 9 * c * out];
                    gemm(9 * c, rows, out, cols, true, &g.data, false, &mut dw, false);
                    acc_data(grads, *w, &wv.shape, dw);
                }
                if need(*b) {
                    acc_data(grads, *b, &nodes[*b].value.shape, col_sums(&g.data, out));
                }
                if need(*x) {
                    let mut dcols = vec![0.0; rows * 9 * c];
                    gemm(rows, out, 9 * c, &g.data, false, &wv.data, true, &mut dcols, false);
                    let mut dx = vec![0.0; rows * c];
                    for bi in 0..bs {
                        for y in 0..h {
                            for x0 in 0..wd {
                                let r = (bi * h + y) * wd + x0;
                                for ky in 0..3 {
                                    let yy = y as isize + ky as isize - 1;
                                    if yy < 0 || yy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3 {
                                        let xx = x0 as isize + kx as isize - 1;
                                        if xx < 0 || xx >= wd as isize {
                                            continue;
                                        }
                                        let dst = ((bi * h + yy as usize) * wd + xx as usize) * c;
                                        let src = r * 9 * c + (ky * 3 + kx) * c;
                                        for ch in 0..c {
                                            dx[dst + ch] += dcols[src + ch];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    acc_data(grads, *x, &nodes[*x].value.shape, dx);
                }
            }
            Op::MaxPool3x3 { x, argmax } | Op::MaxOverSet { x, argmax } => {
                let xv = &nodes[*x].value;
                let mut dx = vec![0.0; xv.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g.data[o];
                }
                acc_data(grads, *x, &xv.shape, dx);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let d = inv_std.len();
                let rows = g.len() / d;
                let gv = &nodes[*gamma].value.data;
                let mut sum_g = vec![0.0; d];
                let mut sum_gx = vec![0.0; d];
                for (gr, hr) in g.data.chunks(d).zip(xhat.chunks(d)) {
                    for k in 0..d {
                        sum_g[k] += gr[k];
                        sum_gx[k] += gr[k] * hr[k];
                    }
                }
                acc_data(grads, *gamma, &[d], sum_gx.clone());
                acc_data(grads, *beta, &[d], sum_g.clone());
                if need(*x) {
                    let n = rows as f64;
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rows {
                        for k in 0..d {
                            let idx = r * d + k;
                            dx[idx] = if *train {
                                gv[k] * inv_std[k] / n * (n * g.data[idx] - sum_g[k] - xhat[idx] * sum_gx[k])
                            } else {
                                gv[k] * inv_std[k] * g.data[idx]
                            };
                        }
                    }
                    acc_data(grads, *x, &nodes[*x].value.shape, dx);
                }
            }
            Op::Dropout { x, mask } => {
                let d = g.data.iter().zip(mask).map(|(a, m)| a * m).collect();
                acc_data(grads, *x, &nodes[*x].value.shape, d);
            }
            Op::Concat(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = &nodes[p].value;
                    let w = pv.cols();
                    if need(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data[r * total + offset..r * total + offset + w]);
                        }
                        acc_data(grads, p, &pv.shape, d);
                    }
                    offset += w;
                }
            }
            Op::Reshape(x) => acc_data(grads, *x, &nodes[*x].value.shape, g.data.clone()),
            Op::BatchedMatVec { t, v, p, q } => {
                let (tv, vv) = (&nodes[*t].value, &nodes[*v].value);
                let rows = vv.rows();
                if need(*t) {
                    let mut dt = vec![0.0; tv.len()];
                    for r in 0..rows {
                        for i in 0..*p {
                            let gi = g.data[r * p + i];
                            for j in 0..*q {
                                dt[r * p * q + i * q + j] = gi * vv.data[r * q + j];
                            }
                        }
                    }
                    acc_data(grads, *t, &tv.shape, dt);
                }
                if need(*v) {
                    let mut dv = vec![0.0; vv.len()];
                    for r in 0..rows {
                        for i in 0..*p {
                            let gi = g.data[r * p + i];
                            for j in 0..*q {
                                dv[r * q + j] += tv.data[r * p * q + i * q + j] * gi;
                            }
                        }
                    }
                    acc_data(grads, *v, &vv.shape, dv);
                }
            }
            Op::QuatToRot { q, norms } => {
                let qv = &nodes[*q].value;
                let mut dq = vec![0.0; qv.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let row = qv.row(r);
                    let u = [row[0] / n, row[1] / n, row[2] / n, row[3] / n];
                    let du = quat_matrix_vjp(u, &g.data[r * 9..r * 9 + 9]);
                    let dot: f64 = (0..4).map(|k| u[k] * du[k]).sum();
                    for k in 0..4 {
                        dq[r * 4 + k] = (du[k] - u[k] * dot) / n;
                    }
                }
                acc_data(grads, *q, &qv.shape, dq);
            }
            Op::NormalizedError { pred, target, l1, norms } => {
                let pv = &nodes[*pred].value;
                let (rows, d) = (pv.rows(), pv.cols());
                let scale = g.data[0] / rows as f64;
                let mut dp = vec![0.0; pv.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let p = pv.row(r);
                    let u: Vec<f64> = p.iter().map(|v| v / n).collect();
                    let du: Vec<f64> = (0..d)
                        .map(|k| {
                            let e = u[k] - target[r * d + k];
                            scale
                                * if !*l1 {
                                    2.0 * e
                                } else if e == 0.0 {
                                    0.0
                                } else {
                                    e.signum()
                                }
                        })
                        .collect();
                    let dot: f64 = (0..d).map(|k| u[k] * du[k]).sum();
                    for k in 0..d {
                        dp[r * d + k] = (du[k] - u[k] * dot) / n;
                    }
                }
                acc_data(grads, *pred, &pv.shape, dp);
            }
            Op::SumSquares(ids) => {
                for &k in ids {
                    if need(k) {
                        let xv = &nodes[k].value;
                        acc_data(grads, k, &xv.shape, xv.data.iter().map(|v| 2.0 * v * g.data[0]).collect());
                    }
                }
            }
            Op::AddScaled { a, b, s } => {
                if need(*a) {
                    acc(grads, *a, g.clone());
                }
                if need(*b) {
                    acc_data(grads, *b, &g.shape, g.data.iter().map(|v| s * v).collect());
                }
            }
        }
    }
}

fn col_sums(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in data.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Row-major rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_matrix([w, x, y, z]: [f64; 4]) -> [f64; 9] {
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ]
}

/// `Σ_ij g_ij ∂R_ij/∂u` for the matrix of [`quat_matrix`].
fn quat_matrix_vjp([w, x, y, z]: [f64; 4], g: &[f64]) -> [f64; 4] {
    // Rows: ∂R_ij/∂(w, x, y, z) for each entry in row-major order.
    let d: [[f64; 4]; 9] = [
        [0.0, 0.0, -4.0 * y, -4.0 * z],
        [-2.0 * z, 2.0 * y, 2.0 * x, -2.0 * w],
        [2.0 * y, 2.0 * z, 2.0 * w, 2.0 * x],
        [2.0 * z, 2.0 * y, 2.0 * x, 2.0 * w],
        [0.0, -4.0 * x, 0.0, -4.0 * z],
        [-2.0 * x, -2.0 * w, 2.0 * z, 2.0 * y],
        [-2.0 * y, 2.0 * z, -2.0 * w, 2.0 * x],
        [2.0 * x, 2.0 * w, 2.0 * z, 2.0 * y],
        [0.0, -4.0 * x, -4.0 * y, 0.0],
    ];
    let mut out = [0.0; 4];
    for (row, gg) in d.iter().zip(g) {
        for k in 0..4 {
            out[k] += row[k] * gg;
        }
    }
    out
}

/// Folds queued batch statistics into the running averages.
pub fn apply_running_updates(store: &mut ParamStore, updates: &[RunningUpdate]) {
    for u in updates {
        for (r, b) in store.value_mut(u.mean_id).data.iter_mut().zip(&u.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in store.value_mut(u.var_id).data.iter_mut().zip(&u.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}
