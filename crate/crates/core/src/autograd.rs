//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are appended
//! in evaluation order, so the backward sweep walks the tape in reverse.
//! Parameters enter the tape through [`Graph::param`]; the resulting
//! [`Gradients`] are keyed by [`ParamId`]. Anything entered through
//! [`Graph::constant`] (inputs, detached targets) has no gradient path.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, MatRef, Tensor};

/// Norms below this are treated as degenerate by [`Graph::row_normalize`].
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running-statistic update requested by a batch-norm layer in training mode.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}

impl StatUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        let m = self.momentum;
        for (r, b) in store
            .get_mut(self.mean)
            .data_mut()
            .iter_mut()
            .zip(&self.batch_mean)
        {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in store
            .get_mut(self.var)
            .data_mut()
            .iter_mut()
            .zip(&self.batch_var)
        {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Reshape(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    RowSqNorm(Var),
    Mean(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    stat_updates: Vec<StatUpdate>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sign pattern of every ReLU input on the tape, in tape order. Two
    /// evaluations with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.data().iter().map(|&v| v > 0.0))
            .collect()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Enters a parameter. Repeated calls for the same id share one tape node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let entry = store.entry(id);
        let v = self.push(entry.value.clone(), Op::Param, entry.kind.trainable());
        self.param_vars.insert(id, v);
        v
    }

    /// A copy of `v`'s value with no gradient path (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.dim(0), av.dim(1));
        let n = bv.dim(1);
        assert_eq!(bv.dim(0), k, "matmul inner dimension");
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(av.data(), m, k),
            MatRef::new(bv.data(), k, n),
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::from_vec(&[m, n], out).expect("matmul shape"),
            Op::MatMul(a, b),
            rg,
        )
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        let n = bv.len();
        assert_eq!(out.len() % n, 0, "bias width");
        for row in out.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(&bv) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddRowBias(x, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(&bv) {
            *o -= y;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(out, Op::AddConst(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self
            .value(x)
            .clone()
            .reshape(shape)
            .expect("reshape element count");
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.dim(0), "slice_rows out of range");
        let per = xv.len() / xv.dim(0).max(1);
        let mut shape = xv.shape().to_vec();
        shape[0] = len;
        let data = xv.data()[start * per..(start + len) * per].to_vec();
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(&shape, data).expect("slice shape"),
            Op::SliceRows { x, start },
            rg,
        )
    }

    /// 2-D convolution, `x: [N, C, H, W]`, `w: [OC, C, KH, KW]`, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (oc, kc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(c, kc, "conv2d channel mismatch");
        let oh = (h + 2 * geom.pad - kh) / geom.stride + 1;
        let ow = (wd + 2 * geom.pad - kw) / geom.stride + 1;
        let ohw = oh * ow;
        let ckk = c * kh * kw;
        let cols = im2col(self.value(x).data(), n, c, h, wd, kh, kw, oh, ow, geom);
        let mut out_mat = vec![0.0; oc * n * ohw];
        gemm(
            MatRef::new(self.value(w).data(), oc, ckk),
            MatRef::new(&cols, ckk, n * ohw),
            &mut out_mat,
            0.0,
        );
        let mut out = vec![0.0; n * oc * ohw];
        for o in 0..oc {
            for b in 0..n {
                let src = &out_mat[o * n * ohw + b * ohw..o * n * ohw + (b + 1) * ohw];
                out[(b * oc + o) * ohw..(b * oc + o + 1) * ohw].copy_from_slice(src);
            }
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(
            Tensor::from_vec(&[n, oc, oh, ow], out).expect("conv shape"),
            Op::Conv2d { x, w, geom, cols },
            rg,
        )
    }

    /// Batch normalization over `[N, C]` or `[N, C, H, W]` inputs.
    ///
    /// In [`Mode::Train`] the batch statistics are used and a [`StatUpdate`]
    /// for the running buffers is queued; in [`Mode::Eval`] the running
    /// buffers are used as fixed constants.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        store: &ParamStore,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        eps: f64,
        momentum: f64,
        mode: Mode,
    ) -> Var {
        let gv = self.param(store, gamma);
        let bv = self.param(store, beta);
        let xs = self.value(x).shape().to_vec();
        let (n, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let m = (n * spatial) as f64;
        let xd = self.value(x).data();
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for b in 0..n {
                    for (ch, mu) in mean.iter_mut().enumerate() {
                        let base = (b * c + ch) * spatial;
                        *mu += xd[base..base + spatial].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * spatial;
                        var[ch] += xd[base..base + spatial]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                (mean, var)
            }
            Mode::Eval => (
                store.get(running_mean).data().to_vec(),
                store.get(running_var).data().to_vec(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gv).data();
        let be = self.value(bv).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                for i in base..base + spatial {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + be[ch];
                }
            }
        }
        if mode == Mode::Train {
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            self.stat_updates.push(StatUpdate {
                mean: running_mean,
                var: running_var,
                batch_mean: mean,
                batch_var: var.iter().map(|v| v * unbias).collect(),
                momentum,
            });
        }
        let rg = self.rg(x) || self.rg(gv) || self.rg(bv);
        self.push(
            Tensor::from_vec(&xs, out).expect("bn shape"),
            Op::BatchNorm {
                x,
                gamma: gv,
                beta: bv,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            rg,
        )
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (n, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(spatial)
            .map(|ch| ch.iter().sum::<f64>() / spatial as f64)
            .collect();
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(&[n, c], out).expect("pool shape"),
            Op::GlobalAvgPool(x),
            rg,
        )
    }

    /// Projects each row onto the unit sphere; rows with norm below
    /// [`NORM_FLOOR`] pass through unchanged.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.len() / xv.dim(0);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.dim(0));
        for row in out.data_mut().chunks_mut(d) {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nrm >= NORM_FLOOR {
                row.iter_mut().for_each(|v| *v /= nrm);
            }
            norms.push(nrm);
        }
        let rg = self.rg(x);
        self.push(out, Op::RowNormalize { x, norms }, rg)
    }

    /// `[N, D] -> [N]` squared Euclidean norm of each row.
    pub fn row_sq_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.dim(0);
        let d = xv.len() / n;
        let out: Vec<f64> = xv
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum())
            .collect();
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(&[n], out).expect("sqnorm shape"),
            Op::RowSqNorm(x),
            rg,
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Batch-mean softmax cross entropy of `[N, K]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let (n, k) = (lv.dim(0), lv.dim(1));
        assert_eq!(targets.len(), n, "one target per row");
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, row) in lv.data().chunks(k).enumerate() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + sum.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            loss += lse - row[targets[i]];
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        let params = self
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].take().map(|g| (id, g)))
            .collect();
        Gradients {
            params,
            nodes: grads,
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.dim(0), av.dim(1), bv.dim(1));
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        MatRef::new(dy.data(), m, n),
                        MatRef::new(bv.data(), k, n).t(),
                        &mut da,
                        0.0,
                    );
                    self.accumulate(grads, *a, Tensor::from_vec(&[m, k], da).unwrap());
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        MatRef::new(av.data(), m, k).t(),
                        MatRef::new(dy.data(), m, n),
                        &mut db,
                        0.0,
                    );
                    self.accumulate(grads, *b, Tensor::from_vec(&[k, n], db).unwrap());
                }
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(grads, *x, dy.clone());
                if self.rg(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![0.0; n];
                    for row in dy.data().chunks(n) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::from_vec(&shape, db).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.map(|v| -v));
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, dy.map(|v| v * s)),
            Op::AddConst(x) => self.accumulate(grads, *x, dy.clone()),
            Op::Relu(x) => {
                let mut g = dy.clone();
                for (gi, xi) in g.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if *xi <= 0.0 {
                        *gi = 0.0;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, dy.clone().reshape(&shape).unwrap());
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let per = xv.len() / xv.dim(0).max(1);
                let mut g = Tensor::zeros(xv.shape());
                g.data_mut()[start * per..start * per + dy.len()].copy_from_slice(dy.data());
                self.accumulate(grads, *x, g);
            }
            Op::Conv2d { x, w, geom, cols } => {
                let xs = self.value(*x).shape().to_vec();
                let ws = self.value(*w).shape().to_vec();
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (oc, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let (oh, ow) = (dy.dim(2), dy.dim(3));
                let ohw = oh * ow;
                let ckk = c * kh * kw;
                let mut dmat = vec![0.0; oc * n * ohw];
                for b in 0..n {
                    for o in 0..oc {
                        dmat[o * n * ohw + b * ohw..o * n * ohw + (b + 1) * ohw]
                            .copy_from_slice(&dy.data()[(b * oc + o) * ohw..(b * oc + o + 1) * ohw]);
                    }
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; oc * ckk];
                    gemm(
                        MatRef::new(&dmat, oc, n * ohw),
                        MatRef::new(cols, ckk, n * ohw).t(),
                        &mut dw,
                        0.0,
                    );
                    self.accumulate(grads, *w, Tensor::from_vec(&ws, dw).unwrap());
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; ckk * n * ohw];
                    gemm(
                        MatRef::new(self.value(*w).data(), oc, ckk).t(),
                        MatRef::new(&dmat, oc, n * ohw),
                        &mut dcols,
                        0.0,
                    );
                    let dx = col2im(&dcols, n, c, h, wd, kh, kw, oh, ow, *geom);
                    self.accumulate(grads, *x, Tensor::from_vec(&xs, dx).unwrap());
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = self.value(*x).shape().to_vec();
                let (n, c) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let m = (n * spatial) as f64;
                let g = self.value(*gamma).data();
                let dyd = dy.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * spatial;
                        for i in base..base + spatial {
                            dgamma[ch] += dyd[i] * xhat[i];
                            dbeta[ch] += dyd[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; dyd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * spatial;
                            for i in base..base + spatial {
                                dx[i] = if *batch_stats {
                                    g[ch] * inv_std[ch] / m
                                        * (m * dyd[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    g[ch] * inv_std[ch] * dyd[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(&xs, dx).unwrap());
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma).unwrap());
                self.accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta).unwrap());
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.value(*x).shape().to_vec();
                let spatial: usize = xs[2..].iter().product();
                let mut dx = vec![0.0; xs.iter().product()];
                for (chunk, g) in dx.chunks_mut(spatial).zip(dy.data()) {
                    chunk.iter_mut().for_each(|v| *v = g / spatial as f64);
                }
                self.accumulate(grads, *x, Tensor::from_vec(&xs, dx).unwrap());
            }
            Op::RowNormalize { x, norms } => {
                let y = &node.value;
                let d = y.len() / y.dim(0);
                let mut dx = dy.clone();
                for (i, row) in dx.data_mut().chunks_mut(d).enumerate() {
                    let nrm = norms[i];
                    if nrm < NORM_FLOOR {
                        continue;
                    }
                    let yr = y.row(i);
                    let dot: f64 = yr.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                    for (g, yy) in row.iter_mut().zip(yr) {
                        *g = (*g - yy * dot) / nrm;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::RowSqNorm(x) => {
                let xv = self.value(*x);
                let d = xv.len() / xv.dim(0);
                let mut dx = xv.clone();
                for (i, row) in dx.data_mut().chunks_mut(d).enumerate() {
                    let g = dy.data()[i];
                    row.iter_mut().for_each(|v| *v *= 2.0 * g);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let g = dy.item() / xv.len() as f64;
                self.accumulate(grads, *x, Tensor::full(xv.shape(), g));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lv = self.value(*logits);
                let (n, k) = (lv.dim(0), lv.dim(1));
                let g = dy.item() / n as f64;
                let mut dl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    dl[i * k + t] -= 1.0;
                }
                dl.iter_mut().for_each(|v| *v *= g);
                self.accumulate(grads, *logits, Tensor::from_vec(&[n, k], dl).unwrap());
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &HashMap<ParamId, Tensor> {
        &self.params
    }

    /// Gradient reaching an arbitrary node, if any flowed there.
    pub fn node(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    geom: ConvGeom,
) -> Vec<f64> {
    let ohw = oh * ow;
    let cols_w = n * ohw;
    let mut cols = vec![0.0; c * kh * kw * cols_w];
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let dst = &mut cols[row * cols_w..(row + 1) * cols_w];
                for b in 0..n {
                    let src = &x[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    for oi in 0..oh {
                        let ii = (oi * geom.stride + ki) as isize - geom.pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let srow = &src[ii as usize * w..(ii as usize + 1) * w];
                        let drow = &mut dst[b * ohw + oi * ow..b * ohw + (oi + 1) * ow];
                        for (oj, d) in drow.iter_mut().enumerate() {
                            let jj = (oj * geom.stride + kj) as isize - geom.pad as isize;
                            if jj >= 0 && jj < w as isize {
                                *d = srow[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    geom: ConvGeom,
) -> Vec<f64> {
    let ohw = oh * ow;
    let cols_w = n * ohw;
    let mut x = vec![0.0; n * c * h * w];
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let src = &cols[row * cols_w..(row + 1) * cols_w];
                for b in 0..n {
                    let dst = &mut x[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    for oi in 0..oh {
                        let ii = (oi * geom.stride + ki) as isize - geom.pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * geom.stride + kj) as isize - geom.pad as isize;
                            if jj >= 0 && jj < w as isize {
                                dst[ii as usize * w + jj as usize] += src[b * ohw + oi * ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
