//! Reverse-mode automatic differentiation over a linear record of operations.
//!
//! Every op evaluates eagerly and appends a node holding its output and
//! whatever it needs for the backward pass. Node `i` only ever reads nodes
//! `< i`, so walking the record backwards visits consumers before producers.
//! With gradients disabled the record still holds values but saves no
//! intermediates.

use rand::Rng as _;

use super::gemm::{gemm, MatMut, MatRef};
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{ensure, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Sum {
        a: Var,
    },
    Ln {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        a: Var,
    },
    Dropout {
        a: Var,
        keep: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        probs: Vec<f64>,
        keep: Option<Vec<f64>>,
    },
    GroupedLinearIn {
        x: Var,
        w: Var,
        b: Var,
        widths: Vec<usize>,
    },
    GroupedLinearOut {
        h: Var,
        w: Var,
        b: Var,
        widths: Vec<usize>,
    },
    GroupEmbeddings {
        h: Var,
        index: Var,
        kind: Var,
        kinds: Vec<usize>,
    },
    ScalarWithGrad {
        a: Var,
        grad: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// The computation record.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients and saves no intermediates.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Leaf tracked for gradients (when the tape tracks any).
    pub fn param(&mut self, t: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push(t, rg, Op::Leaf)
    }

    /// Leaf never tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `a[.., k] x b[k, m] -> [.., m]`; `a` is treated as a matrix over its
    /// last axis.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        ensure!(bv.rank() == 2, Dimension, "matmul rhs must be rank 2");
        let k = av.last_dim();
        ensure!(
            bv.shape()[0] == k,
            Dimension,
            "matmul inner dimensions {:?} x {:?}",
            av.shape(),
            bv.shape()
        );
        let rows = av.outer_len();
        let m = bv.shape()[1];
        let mut out = vec![0.0; rows * m];
        gemm(
            1.0,
            MatRef::dense(av.data(), rows, k),
            MatRef::dense(bv.data(), k, m),
            0.0,
            MatMut::dense(&mut out, rows, m),
        );
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(
            self.shape(a) == self.shape(b),
            Dimension,
            "add shapes {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Add { a, b }))
    }

    /// Adds a bias vector to every slice along the last axis.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = self.value(a).last_dim();
        ensure!(
            self.value(bias).len() == c,
            Dimension,
            "bias of {} for last axis {c}",
            self.value(bias).len()
        );
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_exact_mut(c) {
            row.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::AddRow { a, bias }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(
            self.shape(a) == self.shape(b),
            Dimension,
            "mul shapes {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x *= factor);
        let rg = self.any_grad(&[a]);
        self.push(t, rg, Op::Scale { a, factor })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum { a })
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x = x.ln());
        t.check_finite("ln")?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, rg, Op::Ln { a }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, rg, Op::Reshape { a }))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        ensure!(
            axis < shape.len(),
            Dimension,
            "softmax axis {axis} for rank {}",
            shape.len()
        );
        let mut data = self.value(a).data().to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |t: usize| (o * len + t) * inner + i;
                let max = (0..len).map(|t| data[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for t in 0..len {
                    let e = (data[idx(t)] - max).exp();
                    data[idx(t)] = e;
                    z += e;
                }
                for t in 0..len {
                    data[idx(t)] /= z;
                }
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Softmax { a, axis }))
    }

    /// Normalizes over the last axis with population variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        ensure!(
            self.value(gain).len() == c && self.value(bias).len() == c,
            Dimension,
            "layer norm affine params must match last axis {c}"
        );
        let rows = self.value(x).outer_len();
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; xs.len()];
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xs[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, gain, bias]);
        let (xhat, rstd) = if rg {
            (xhat, rstd)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// `x * Phi(x)` with the exact Gaussian CDF.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x *= std_normal_cdf(*x));
        let rg = self.any_grad(&[a]);
        self.push(t, rg, Op::Gelu { a })
    }

    /// Inverted dropout: in training, zero with probability `p` and scale the
    /// survivors by `1 / (1 - p)`; identity otherwise.
    pub fn dropout(&mut self, a: Var, p: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        ensure!((0.0..1.0).contains(&p), Contract, "dropout p={p} not in [0, 1)");
        if mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let keep = dropout_keep(self.value(a).len(), p, rng);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&keep)
            .map(|(x, k)| x * k)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        let keep = if rg { keep } else { Vec::new() };
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Dropout { a, keep }))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` share a shape whose rows (all but the last axis) are
    /// split into consecutive groups of `group` tokens; attention never crosses
    /// a group boundary. The last axis `h` is split into `heads` slices of
    /// `h / heads` columns. Dropout with probability `p` acts on the attention
    /// weights in training mode.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        p: f64,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        ensure!(
            self.shape(k) == shape.as_slice() && self.shape(v) == shape.as_slice(),
            Dimension,
            "attention q/k/v shapes differ"
        );
        let h = self.value(q).last_dim();
        let rows = self.value(q).outer_len();
        ensure!(
            heads > 0 && h.is_multiple_of(heads),
            Dimension,
            "width {h} not divisible by {heads} heads"
        );
        ensure!(
            group > 0 && rows.is_multiple_of(group),
            Dimension,
            "{rows} rows not divisible into groups of {group}"
        );
        ensure!((0.0..1.0).contains(&p), Contract, "dropout p={p} not in [0, 1)");
        let rg = self.any_grad(&[q, k, v]);
        let hk = h / heads;
        let scale = 1.0 / (hk as f64).sqrt();
        let n_groups = rows / group;
        let tt = group * group;
        let blocks = n_groups * heads;
        let use_drop = mode == Mode::Train && p > 0.0;

        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; rows * h];
        let mut probs = if rg { vec![0.0; blocks * tt] } else { Vec::new() };
        let mut keep_all = if rg && use_drop {
            vec![0.0; blocks * tt]
        } else {
            Vec::new()
        };
        let mut scratch = vec![0.0; tt];
        for g in 0..n_groups {
            for j in 0..heads {
                let off = g * group * h + j * hk;
                let view = |d| MatRef::strided(d, off, group, hk, h, 1);
                gemm(
                    scale,
                    view(qd),
                    view(kd).t(),
                    0.0,
                    MatMut::dense(&mut scratch, group, group),
                );
                softmax_rows(&mut scratch, group);
                let block = g * heads + j;
                if rg {
                    probs[block * tt..(block + 1) * tt].copy_from_slice(&scratch);
                }
                if use_drop {
                    let keep = dropout_keep(tt, p, rng);
                    scratch.iter_mut().zip(&keep).for_each(|(x, k)| *x *= k);
                    if rg {
                        keep_all[block * tt..(block + 1) * tt].copy_from_slice(&keep);
                    }
                }
                gemm(
                    1.0,
                    MatRef::dense(&scratch, group, group),
                    view(vd),
                    0.0,
                    MatMut::strided(&mut out, off, group, hk, h, 1),
                );
            }
        }
        let keep = if rg && use_drop { Some(keep_all) } else { None };
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::Attention {
                q,
                k,
                v,
                group,
                heads,
                probs,
                keep,
            },
        ))
    }

    /// Per-group linear maps from consecutive column blocks of `x`.
    ///
    /// `x: [n, sum(widths)]`, `w: [sum(widths), e]`, `b: [groups, e]`;
    /// output `[n, groups, e]` with `out[i, j] = x[i, block_j] * w[block_j] + b[j]`.
    pub fn grouped_linear_in(&mut self, x: Var, w: Var, b: Var, widths: &[usize]) -> Result<Var> {
        let total: usize = widths.iter().sum();
        let groups = widths.len();
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        ensure!(
            xv.rank() == 2 && xv.shape()[1] == total,
            Dimension,
            "grouped input {:?} for total width {total}",
            xv.shape()
        );
        ensure!(
            wv.rank() == 2 && wv.shape()[0] == total,
            Dimension,
            "grouped weight {:?} for total width {total}",
            wv.shape()
        );
        let e = wv.shape()[1];
        ensure!(
            bv.shape() == [groups, e],
            Dimension,
            "grouped bias {:?}, want [{groups}, {e}]",
            bv.shape()
        );
        let n = xv.shape()[0];
        let mut out = vec![0.0; n * groups * e];
        for row in out.chunks_exact_mut(groups * e) {
            row.copy_from_slice(bv.data());
        }
        let mut off = 0;
        for (j, &wj) in widths.iter().enumerate() {
            gemm(
                1.0,
                MatRef::strided(xv.data(), off, n, wj, total, 1),
                MatRef::strided(wv.data(), off * e, wj, e, e, 1),
                1.0,
                MatMut::strided(&mut out, j * e, n, e, groups * e, 1),
            );
            off += wj;
        }
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(
            Tensor::new(vec![n, groups, e], out)?,
            rg,
            Op::GroupedLinearIn {
                x,
                w,
                b,
                widths: widths.to_vec(),
            },
        ))
    }

    /// Per-group linear read-out: `h: [n, groups, e]`, `w: [e, sum(widths)]`,
    /// `b: [sum(widths)]`; output `[n, sum(widths)]`.
    pub fn grouped_linear_out(&mut self, h: Var, w: Var, b: Var, widths: &[usize]) -> Result<Var> {
        let total: usize = widths.iter().sum();
        let groups = widths.len();
        let (hv, wv, bv) = (self.value(h), self.value(w), self.value(b));
        ensure!(
            hv.rank() == 3 && hv.shape()[1] == groups,
            Dimension,
            "grouped read-out input {:?} for {groups} groups",
            hv.shape()
        );
        let (n, e) = (hv.shape()[0], hv.shape()[2]);
        ensure!(
            wv.shape() == [e, total] && bv.len() == total,
            Dimension,
            "grouped read-out weight {:?} / bias {:?}",
            wv.shape(),
            bv.shape()
        );
        let mut out = vec![0.0; n * total];
        for row in out.chunks_exact_mut(total) {
            row.copy_from_slice(bv.data());
        }
        let mut off = 0;
        for (j, &wj) in widths.iter().enumerate() {
            gemm(
                1.0,
                MatRef::strided(hv.data(), j * e, n, e, groups * e, 1),
                MatRef::strided(wv.data(), off, e, wj, total, 1),
                1.0,
                MatMut::strided(&mut out, off, n, wj, total, 1),
            );
            off += wj;
        }
        let rg = self.any_grad(&[h, w, b]);
        Ok(self.push(
            Tensor::new(vec![n, total], out)?,
            rg,
            Op::GroupedLinearOut {
                h,
                w,
                b,
                widths: widths.to_vec(),
            },
        ))
    }

    /// `out[i, j] = h[i, j] + index[j] + kind[kinds[j]]` for `h: [n, groups, e]`.
    pub fn group_embeddings(&mut self, h: Var, index: Var, kind: Var, kinds: &[usize]) -> Result<Var> {
        let (hv, iv, kv) = (self.value(h), self.value(index), self.value(kind));
        ensure!(hv.rank() == 3, Dimension, "group embeddings need rank-3 input");
        let (groups, e) = (hv.shape()[1], hv.shape()[2]);
        ensure!(
            iv.shape() == [groups, e] && kinds.len() == groups,
            Dimension,
            "index embedding {:?} for [{groups}, {e}]",
            iv.shape()
        );
        ensure!(
            kv.rank() == 2 && kv.shape()[1] == e && kinds.iter().all(|&t| t < kv.shape()[0]),
            Dimension,
            "kind embedding {:?} / kinds {kinds:?}",
            kv.shape()
        );
        let mut offset = iv.data().to_vec();
        for (j, &t) in kinds.iter().enumerate() {
            for c in 0..e {
                offset[j * e + c] += kv.data()[t * e + c];
            }
        }
        let mut data = hv.data().to_vec();
        for row in data.chunks_exact_mut(groups * e) {
            row.iter_mut().zip(&offset).for_each(|(x, o)| *x += o);
        }
        let shape = hv.shape().to_vec();
        let rg = self.any_grad(&[h, index, kind]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            rg,
            Op::GroupEmbeddings {
                h,
                index,
                kind,
                kinds: kinds.to_vec(),
            },
        ))
    }

    /// Records a scalar computed outside the tape from `a`, together with its
    /// gradient with respect to `a`.
    pub fn scalar_with_grad(&mut self, a: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        ensure!(
            grad.len() == self.value(a).len(),
            Dimension,
            "gradient of length {} for input of {}",
            grad.len(),
            self.value(a).len()
        );
        let rg = self.any_grad(&[a]);
        let grad = if rg { grad } else { Vec::new() };
        Ok(self.push(Tensor::scalar(value), rg, Op::ScalarWithGrad { a, grad }))
    }

    /// Accumulates d(loss)/d(leaf) into every gradient-tracked leaf reachable
    /// from `loss`. Calling it again without [`Tape::zero_grad`] adds to the
    /// existing leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        ensure!(
            self.value(loss).len() == 1,
            Contract,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dout) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let slot = &mut self.nodes[i].grad;
                match slot {
                    Some(g) => add_into(g, &dout),
                    None => *slot = Some(dout),
                }
                continue;
            }
            let node = &self.nodes[i];
            let mut acc = Accum {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul { a, b } => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (rows, k, m) = (av.outer_len(), av.last_dim(), bv.shape()[1]);
                    let dm = MatRef::dense(&dout, rows, m);
                    acc.with(*a, |ga| {
                        gemm(
                            1.0,
                            dm,
                            MatRef::dense(bv.data(), k, m).t(),
                            1.0,
                            MatMut::dense(ga, rows, k),
                        )
                    });
                    acc.with(*b, |gb| {
                        gemm(
                            1.0,
                            MatRef::dense(av.data(), rows, k).t(),
                            dm,
                            1.0,
                            MatMut::dense(gb, k, m),
                        )
                    });
                }
                Op::Add { a, b } => {
                    acc.with(*a, |g| add_into(g, &dout));
                    acc.with(*b, |g| add_into(g, &dout));
                }
                Op::AddRow { a, bias } => {
                    acc.with(*a, |g| add_into(g, &dout));
                    let c = self.nodes[bias.0].value.len();
                    acc.with(*bias, |g| {
                        for row in dout.chunks_exact(c) {
                            add_into(g, row);
                        }
                    });
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    acc.with(*a, |g| {
                        for ((g, d), y) in g.iter_mut().zip(&dout).zip(bv.data()) {
                            *g += d * y;
                        }
                    });
                    acc.with(*b, |g| {
                        for ((g, d), x) in g.iter_mut().zip(&dout).zip(av.data()) {
                            *g += d * x;
                        }
                    });
                }
                Op::Scale { a, factor } => {
                    acc.with(*a, |g| {
                        g.iter_mut().zip(&dout).for_each(|(g, d)| *g += d * factor)
                    });
                }
                Op::Sum { a } => {
                    acc.with(*a, |g| g.iter_mut().for_each(|g| *g += dout[0]));
                }
                Op::Ln { a } => {
                    let av = &self.nodes[a.0].value;
                    acc.with(*a, |g| {
                        for ((g, d), x) in g.iter_mut().zip(&dout).zip(av.data()) {
                            *g += d / x;
                        }
                    });
                }
                Op::Reshape { a } => acc.with(*a, |g| add_into(g, &dout)),
                Op::Softmax { a, axis } => {
                    let y = node.value.data();
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                    acc.with(*a, |g| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let idx = |t: usize| (o * len + t) * inner + i;
                                let dot: f64 = (0..len).map(|t| dout[idx(t)] * y[idx(t)]).sum();
                                for t in 0..len {
                                    g[idx(t)] += y[idx(t)] * (dout[idx(t)] - dot);
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let c = self.nodes[gain.0].value.len();
                    let gv = self.nodes[gain.0].value.data();
                    acc.with(*x, |g| {
                        let mut dxh = vec![0.0; c];
                        for (r, rs) in rstd.iter().enumerate() {
                            let d = &dout[r * c..(r + 1) * c];
                            let xh = &xhat[r * c..(r + 1) * c];
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..c {
                                dxh[j] = d[j] * gv[j];
                                s1 += dxh[j];
                                s2 += dxh[j] * xh[j];
                            }
                            let inv = 1.0 / c as f64;
                            for j in 0..c {
                                g[r * c + j] += rs * (dxh[j] - inv * s1 - xh[j] * inv * s2);
                            }
                        }
                    });
                    acc.with(*gain, |g| {
                        for (d, xh) in dout.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            for j in 0..c {
                                g[j] += d[j] * xh[j];
                            }
                        }
                    });
                    acc.with(*bias, |g| {
                        for d in dout.chunks_exact(c) {
                            add_into(g, d);
                        }
                    });
                }
                Op::Gelu { a } => {
                    let av = &self.nodes[a.0].value;
                    acc.with(*a, |g| {
                        for ((g, d), &x) in g.iter_mut().zip(&dout).zip(av.data()) {
                            *g += d * (std_normal_cdf(x) + x * std_normal_pdf(x));
                        }
                    });
                }
                Op::Dropout { a, keep } => {
                    acc.with(*a, |g| {
                        for ((g, d), k) in g.iter_mut().zip(&dout).zip(keep) {
                            *g += d * k;
                        }
                    });
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    group,
                    heads,
                    probs,
                    keep,
                } => {
                    let shape = (*group, *heads);
                    attention_backward(&mut acc, &dout, [*q, *k, *v], shape, probs, keep.as_deref());
                }
                Op::GroupedLinearIn { x, w, b, widths } => {
                    let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                    let total: usize = widths.iter().sum();
                    let n = xv.shape()[0];
                    let e = wv.shape()[1];
                    let groups = widths.len();
                    let mut off = 0;
                    for (j, &wj) in widths.iter().enumerate() {
                        let dj = MatRef::strided(&dout, j * e, n, e, groups * e, 1);
                        acc.with(*w, |g| {
                            gemm(
                                1.0,
                                MatRef::strided(xv.data(), off, n, wj, total, 1).t(),
                                dj,
                                1.0,
                                MatMut::strided(g, off * e, wj, e, e, 1),
                            )
                        });
                        acc.with(*x, |g| {
                            gemm(
                                1.0,
                                dj,
                                MatRef::strided(wv.data(), off * e, wj, e, e, 1).t(),
                                1.0,
                                MatMut::strided(g, off, n, wj, total, 1),
                            )
                        });
                        off += wj;
                    }
                    acc.with(*b, |g| {
                        for row in dout.chunks_exact(groups * e) {
                            add_into(g, row);
                        }
                    });
                }
                Op::GroupedLinearOut { h, w, b, widths } => {
                    let (hv, wv) = (&self.nodes[h.0].value, &self.nodes[w.0].value);
                    let total: usize = widths.iter().sum();
                    let (n, groups, e) = (hv.shape()[0], hv.shape()[1], hv.shape()[2]);
                    let mut off = 0;
                    for (j, &wj) in widths.iter().enumerate() {
                        let dj = MatRef::strided(&dout, off, n, wj, total, 1);
                        acc.with(*w, |g| {
                            gemm(
                                1.0,
                                MatRef::strided(hv.data(), j * e, n, e, groups * e, 1).t(),
                                dj,
                                1.0,
                                MatMut::strided(g, off, e, wj, total, 1),
                            )
                        });
                        acc.with(*h, |g| {
                            gemm(
                                1.0,
                                dj,
                                MatRef::strided(wv.data(), off, e, wj, total, 1).t(),
                                1.0,
                                MatMut::strided(g, j * e, n, e, groups * e, 1),
                            )
                        });
                        off += wj;
                    }
                    acc.with(*b, |g| {
                        for row in dout.chunks_exact(total) {
                            add_into(g, row);
                        }
                    });
                }
                Op::GroupEmbeddings {
                    h,
                    index,
                    kind,
                    kinds,
                } => {
                    acc.with(*h, |g| add_into(g, &dout));
                    let ie = self.nodes[index.0].value.len();
                    let e = self.nodes[kind.0].value.shape()[1];
                    let mut col = vec![0.0; ie];
                    for row in dout.chunks_exact(ie) {
                        add_into(&mut col, row);
                    }
                    acc.with(*index, |g| add_into(g, &col));
                    acc.with(*kind, |g| {
                        for (j, &t) in kinds.iter().enumerate() {
                            for c in 0..e {
                                g[t * e + c] += col[j * e + c];
                            }
                        }
                    });
                }
                Op::ScalarWithGrad { a, grad } => {
                    acc.with(*a, |g| {
                        g.iter_mut().zip(grad).for_each(|(g, d)| *g += d * dout[0])
                    });
                }
            }
        }
        Ok(())
    }
}

/// Gradient buffers for nodes in flight during one backward pass.
struct Accum<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl Accum<'_> {
    fn with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let g = self.grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(g);
    }
}

fn attention_backward(
    acc: &mut Accum<'_>,
    dout: &[f64],
    [q, k, v]: [Var; 3],
    (group, heads): (usize, usize),
    probs: &[f64],
    keep: Option<&[f64]>,
) {
    let (qv, kv, vv) = (
        &acc.nodes[q.0].value,
        &acc.nodes[k.0].value,
        &acc.nodes[v.0].value,
    );
    let h = qv.last_dim();
    let rows = qv.outer_len();
    let hk = h / heads;
    let scale = 1.0 / (hk as f64).sqrt();
    let tt = group * group;
    let mut dq = vec![0.0; rows * h];
    let mut dk = vec![0.0; rows * h];
    let mut dv = vec![0.0; rows * h];
    let mut pd = vec![0.0; tt];
    let mut dp = vec![0.0; tt];
    for g in 0..rows / group {
        for j in 0..heads {
            let off = g * group * h + j * hk;
            let block = g * heads + j;
            let p = &probs[block * tt..(block + 1) * tt];
            let view = |d| MatRef::strided(d, off, group, hk, h, 1);
            match keep {
                Some(keep) => {
                    let kb = &keep[block * tt..(block + 1) * tt];
                    pd.iter_mut()
                        .zip(p.iter().zip(kb))
                        .for_each(|(o, (p, k))| *o = p * k);
                }
                None => pd.copy_from_slice(p),
            }
            // dV += P'^T dO
            gemm(
                1.0,
                MatRef::dense(&pd, group, group).t(),
                view(dout),
                1.0,
                MatMut::strided(&mut dv, off, group, hk, h, 1),
            );
            // dP' = dO V^T, then back through dropout
            gemm(
                1.0,
                view(dout),
                view(vv.data()).t(),
                0.0,
                MatMut::dense(&mut dp, group, group),
            );
            if let Some(keep) = keep {
                let kb = &keep[block * tt..(block + 1) * tt];
                dp.iter_mut().zip(kb).for_each(|(d, k)| *d *= k);
            }
            // softmax backward in place: dS = P * (dP - rowdot(dP, P))
            for r in 0..group {
                let pr = &p[r * group..(r + 1) * group];
                let dr = &mut dp[r * group..(r + 1) * group];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                dr.iter_mut().zip(pr).for_each(|(d, p)| *d = p * (*d - dot));
            }
            let ds = MatRef::dense(&dp, group, group);
            gemm(
                scale,
                ds,
                view(kv.data()),
                1.0,
                MatMut::strided(&mut dq, off, group, hk, h, 1),
            );
            gemm(
                scale,
                ds.t(),
                view(qv.data()),
                1.0,
                MatMut::strided(&mut dk, off, group, hk, h, 1),
            );
        }
    }
    acc.with(q, |g| add_into(g, &dq));
    acc.with(k, |g| add_into(g, &dk));
    acc.with(v, |g| add_into(g, &dv));
}

fn add_into(g: &mut [f64], d: &[f64]) {
    g.iter_mut().zip(d).for_each(|(a, b)| *a += b);
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_rows(data: &mut [f64], cols: usize) {
    for row in data.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            z += *x;
        }
        row.iter_mut().for_each(|x| *x /= z);
    }
}

fn dropout_keep(len: usize, p: f64, rng: &mut Rng) -> Vec<f64> {
    let survive = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { survive })
        .collect()
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
