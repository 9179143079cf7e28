//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients for
//! every node that depends on a parameter leaf. Nodes created through
//! [`Graph::input`] or [`Graph::detach`] are constants: no gradient flows into
//! or through them.

use rand::Rng;

use crate::diffcore::params::{ParamId, ParamStore};
use crate::diffcore::{DiffError, Tensor};
use crate::scalar::{Scalar, Strides};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

enum Op<F> {
    Constant,
    Param(ParamId),
    Conv1d {
        input: Var,
        kernel: Var,
        dilation: usize,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    WeightNorm {
        direction: Var,
        scale: Var,
        eps: F,
    },
    Prelu {
        input: Var,
        slope: Var,
        axis: Axis,
    },
    Mask {
        input: Var,
        mask: Vec<F>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, F),
    Abs(Var),
    Softplus(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    GatherColumns {
        input: Var,
        cols: Vec<usize>,
    },
    ConcatCols(Var, Var),
    GroupSoftmax {
        input: Var,
        group: usize,
    },
    HoaLoss {
        probs: Var,
        targets: Vec<F>,
        mask: Vec<bool>,
        group: usize,
        weight: F,
    },
    NormalizeRows {
        input: Var,
        eps: F,
    },
    SqDistSum {
        a: Var,
        b: Var,
        weight: F,
    },
    SqErrSum {
        pred: Var,
        target: Vec<F>,
        weight: F,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recorded computation.
pub struct Graph<F: Scalar = f64> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, dim: impl Into<String>, expected: usize, found: usize) -> DiffError {
    DiffError::Shape {
        op,
        dim: dim.into(),
        expected,
        found,
    }
}

fn rank_err(op: &'static str, expected: usize, found: usize) -> DiffError {
    DiffError::Rank { op, expected, found }
}

/// Per-leaf gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    params: Vec<(Var, ParamId)>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient for one node; `None` when nothing flowed into it.
    pub fn of(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    /// Every parameter leaf of the graph with the parameter it is bound to.
    pub fn param_leaves(&self) -> &[(Var, ParamId)] {
        &self.params
    }

    /// Sums the gradients of every leaf bound to each parameter.
    /// Entries stay `None` for parameters that received no gradient at all.
    pub fn param_grads(&self, n_params: usize) -> Vec<Option<Vec<F>>> {
        let mut out: Vec<Option<Vec<F>>> = vec![None; n_params];
        for &(v, pid) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                match &mut out[pid.0] {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<(), DiffError> {
        let found = self.value(v).ndim();
        if found != rank {
            return Err(rank_err(op, rank, found));
        }
        Ok(())
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Differentiable leaf bound to a stored parameter. Binding the same
    /// parameter twice produces two independent leaves.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let value = store.get(id).tensor.clone();
        self.push(value, Op::Param(id), true)
    }

    /// Stop-gradient: a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    /// Causal dilated 1-D convolution with left zero padding of
    /// `(k - 1) * dilation` so the output has the input's length and frame `t`
    /// only reads frames `<= t`.
    ///
    /// `input` is `[C_in x T]`, `kernel` is `[C_out x C_in x k]`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, dilation: usize) -> Result<Var, DiffError> {
        self.expect_rank("conv1d", input, 2)?;
        self.expect_rank("conv1d", kernel, 3)?;
        if dilation == 0 {
            return Err(DiffError::Invalid("conv1d dilation must be >= 1".into()));
        }
        let x = self.value(input);
        let w = self.value(kernel);
        let (c_in, t_len) = (x.dim(0), x.dim(1));
        let (c_out, w_in, k) = (w.dim(0), w.dim(1), w.dim(2));
        if w_in != c_in {
            return Err(shape_err("conv1d", "kernel input channels", c_in, w_in));
        }
        if t_len == 0 {
            return Err(shape_err("conv1d", "time length (>= 1)", 1, 0));
        }
        let out = conv1d_forward(x.data(), w.data(), c_in, c_out, k, t_len, dilation);
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(
            Tensor::new(vec![c_out, t_len], out)?,
            Op::Conv1d {
                input,
                kernel,
                dilation,
            },
            rg,
        ))
    }

    /// Adds a per-channel bias `[C]` to a `[C x T]` map.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var, DiffError> {
        self.expect_rank("channel_bias", input, 2)?;
        let x = self.value(input);
        let b = self.value(bias);
        let (c, t) = (x.dim(0), x.dim(1));
        if b.len() != c {
            return Err(shape_err("channel_bias", "bias length", c, b.len()));
        }
        let mut out = x.data().to_vec();
        for ch in 0..c {
            let bv = b.data()[ch];
            out[ch * t..(ch + 1) * t].iter_mut().for_each(|v| *v += bv);
        }
        let rg = self.rg(&[input, bias]);
        Ok(self.push(Tensor::new(vec![c, t], out)?, Op::ChannelBias { input, bias }, rg))
    }

    /// Weight normalization: `scale[o] * direction[o] / (||direction[o]|| + eps)`,
    /// row-wise over the leading (output) dimension.
    pub fn weight_norm(&mut self, direction: Var, scale: Var, eps: F) -> Result<Var, DiffError> {
        let d = self.value(direction);
        let s = self.value(scale);
        let rows = d.dim(0);
        if s.len() != rows {
            return Err(shape_err("weight_norm", "scale length", rows, s.len()));
        }
        let per = d.len() / rows.max(1);
        let mut out = vec![F::zero(); d.len()];
        for o in 0..rows {
            let row = &d.data()[o * per..(o + 1) * per];
            let norm = row.iter().map(|&x| x * x).sum::<F>().sqrt();
            let f = s.data()[o] / (norm + eps);
            for (dst, &src) in out[o * per..(o + 1) * per].iter_mut().zip(row) {
                *dst = f * src;
            }
        }
        let shape = d.shape().to_vec();
        let rg = self.rg(&[direction, scale]);
        Ok(self.push(Tensor::new(shape, out)?, Op::WeightNorm { direction, scale, eps }, rg))
    }

    /// PReLU with one slope per channel. For `Axis::Rows` the channel is the
    /// row index (`[C x T]` maps); for `Axis::Cols` it is the column index
    /// (`[B x F]` batches).
    pub fn prelu(&mut self, input: Var, slope: Var, axis: Axis) -> Result<Var, DiffError> {
        self.expect_rank("prelu", input, 2)?;
        let x = self.value(input);
        let a = self.value(slope);
        let (r, c) = (x.dim(0), x.dim(1));
        let n_ch = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
        };
        if a.len() != n_ch {
            return Err(shape_err("prelu", "slope count", n_ch, a.len()));
        }
        let mut out = x.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                let v = &mut out[i * c + j];
                if *v < F::zero() {
                    let s = match axis {
                        Axis::Rows => a.data()[i],
                        Axis::Cols => a.data()[j],
                    };
                    *v = *v * s;
                }
            }
        }
        let rg = self.rg(&[input, slope]);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::Prelu { input, slope, axis }, rg))
    }

    /// Inverted dropout with a mask drawn from `rng`. `rate == 0` returns the
    /// input unchanged.
    pub fn dropout<R: Rng>(&mut self, input: Var, rate: F, rng: &mut R) -> Result<Var, DiffError> {
        if rate <= F::zero() {
            return Ok(input);
        }
        if rate >= F::one() {
            return Err(DiffError::Invalid("dropout rate must be < 1".into()));
        }
        let keep = F::one() - rate;
        let inv = F::one() / keep;
        let n = self.value(input).len();
        let p = rate.as_f64();
        let mask: Vec<F> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { inv })
            .collect();
        let x = self.value(input);
        let out: Vec<F> = x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let shape = x.shape().to_vec();
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mask { input, mask }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            let axis = sa
                .iter()
                .zip(sb)
                .position(|(x, y)| x != y)
                .unwrap_or(sa.len().min(sb.len()));
            return Err(shape_err(
                op,
                format!("axis {axis}"),
                sa.get(axis).copied().unwrap_or(0),
                sb.get(axis).copied().unwrap_or(0),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("add", a, b)?;
        let va = self.value(a);
        let out: Vec<F> = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("sub", a, b)?;
        let va = self.value(a);
        let out: Vec<F> = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.abs());
        let rg = self.rg(&[a]);
        self.push(value, Op::Abs(a), rg)
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let rg = self.rg(&[a]);
        self.push(value, Op::Softplus(a), rg)
    }

    /// Affine map `x W^T + b` per row. Accepts `[F_in]` or `[B x F_in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, DiffError> {
        self.expect_rank("linear", weight, 2)?;
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (f_out, f_in) = (w.dim(0), w.dim(1));
        let (batch, x_in, vector) = match x.ndim() {
            1 => (1, x.dim(0), true),
            2 => (x.dim(0), x.dim(1), false),
            n => return Err(rank_err("linear", 2, n)),
        };
        if x_in != f_in {
            return Err(shape_err("linear", "input features", f_in, x_in));
        }
        if b.len() != f_out {
            return Err(shape_err("linear", "bias length", f_out, b.len()));
        }
        let mut out = Vec::with_capacity(batch * f_out);
        for _ in 0..batch {
            out.extend_from_slice(b.data());
        }
        // out += x W^T
        F::gemm_acc(
            batch,
            f_in,
            f_out,
            x.data(),
            Strides(f_in, 1),
            w.data(),
            Strides(1, f_in),
            &mut out,
            Strides(f_out, 1),
        );
        let shape = if vector { vec![f_out] } else { vec![batch, f_out] };
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { input, weight, bias }, rg))
    }

    /// Picks frames out of a channel-major `[D x T]` map, giving `[B x D]`.
    pub fn gather_columns(&mut self, input: Var, cols: &[usize]) -> Result<Var, DiffError> {
        self.expect_rank("gather_columns", input, 2)?;
        let x = self.value(input);
        let (d, t) = (x.dim(0), x.dim(1));
        if let Some(&bad) = cols.iter().find(|&&c| c >= t) {
            return Err(shape_err("gather_columns", "column index bound", t, bad));
        }
        let mut out = vec![F::zero(); cols.len() * d];
        for (b, &c) in cols.iter().enumerate() {
            for ch in 0..d {
                out[b * d + ch] = x.data()[ch * t + c];
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(
            Tensor::new(vec![cols.len(), d], out)?,
            Op::GatherColumns {
                input,
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    /// `[B x D1] ++ [B x D2] -> [B x (D1 + D2)]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.expect_rank("concat_cols", a, 2)?;
        self.expect_rank("concat_cols", b, 2)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim(0) != vb.dim(0) {
            return Err(shape_err("concat_cols", "batch rows", va.dim(0), vb.dim(0)));
        }
        let (rows, d1, d2) = (va.dim(0), va.dim(1), vb.dim(1));
        let mut out = Vec::with_capacity(rows * (d1 + d2));
        for r in 0..rows {
            out.extend_from_slice(va.row(r));
            out.extend_from_slice(vb.row(r));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![rows, d1 + d2], out)?, Op::ConcatCols(a, b), rg))
    }

    /// Softmax over consecutive groups of `group` entries along the last axis.
    pub fn group_softmax(&mut self, input: Var, group: usize) -> Result<Var, DiffError> {
        let x = self.value(input);
        if group == 0 || x.len() % group != 0 {
            return Err(shape_err("group_softmax", "group size divides length", group, x.len()));
        }
        if !x.is_finite() {
            return Err(DiffError::NonFinite("group_softmax input".into()));
        }
        let mut out = x.data().to_vec();
        for chunk in out.chunks_mut(group) {
            softmax_in_place(chunk);
        }
        let shape = x.shape().to_vec();
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::new(shape, out)?, Op::GroupSoftmax { input, group }, rg))
    }

    /// `weight * sum_b mask[b] * sum_i EMD2(targets[b,i], probs[b,i])`, where
    /// each row of `probs` is split into histograms of `group` bins.
    pub fn hoa_loss(
        &mut self,
        probs: Var,
        targets: &[F],
        mask: &[bool],
        group: usize,
        weight: F,
    ) -> Result<Var, DiffError> {
        self.expect_rank("hoa_loss", probs, 2)?;
        let p = self.value(probs);
        if targets.len() != p.len() {
            return Err(shape_err("hoa_loss", "target length", p.len(), targets.len()));
        }
        if mask.len() != p.dim(0) {
            return Err(shape_err("hoa_loss", "mask length", p.dim(0), mask.len()));
        }
        if group == 0 || p.dim(1) % group != 0 {
            return Err(shape_err("hoa_loss", "bins divide row width", group, p.dim(1)));
        }
        let cols = p.dim(1);
        let mut total = F::zero();
        for (b, &m) in mask.iter().enumerate() {
            if !m {
                continue;
            }
            let row = &p.data()[b * cols..(b + 1) * cols];
            let trow = &targets[b * cols..(b + 1) * cols];
            for (ph, th) in row.chunks(group).zip(trow.chunks(group)) {
                total += crate::hoa::emd2_unchecked(th, ph);
            }
        }
        let rg = self.rg(&[probs]);
        Ok(self.push(
            Tensor::scalar(weight * total),
            Op::HoaLoss {
                probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                group,
                weight,
            },
            rg,
        ))
    }

    /// Row-wise `x / (||x||_2 + eps)`.
    pub fn normalize_rows(&mut self, input: Var, eps: F) -> Result<Var, DiffError> {
        self.expect_rank("normalize_rows", input, 2)?;
        let x = self.value(input);
        let (r, c) = (x.dim(0), x.dim(1));
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt() + eps;
            row.iter_mut().for_each(|v| *v = *v / n);
        }
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::NormalizeRows { input, eps }, rg))
    }

    /// `weight * sum ||a_b - b_b||^2` over all rows.
    pub fn sq_dist_sum(&mut self, a: Var, b: Var, weight: F) -> Result<Var, DiffError> {
        self.same_shape("sq_dist_sum", a, b)?;
        let total: F = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(weight * total), Op::SqDistSum { a, b, weight }, rg))
    }

    /// `weight * sum (pred - target)^2` against a constant target.
    pub fn sq_err_sum(&mut self, pred: Var, target: &[F], weight: F) -> Result<Var, DiffError> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(shape_err("sq_err_sum", "target length", p.len(), target.len()));
        }
        let total: F = p.data().iter().zip(target).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(weight * total),
            Op::SqErrSum {
                pred,
                target: target.to_vec(),
                weight,
            },
            rg,
        ))
    }

    /// Reverse sweep from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, DiffError> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", "loss elements", 1, self.value(loss).len()));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(pid) => Some((Var(i), pid)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Conv1d {
                input,
                kernel,
                dilation,
            } => {
                let x = self.value(*input);
                let w = self.value(*kernel);
                let (c_in, t_len) = (x.dim(0), x.dim(1));
                let (c_out, k) = (w.dim(0), w.dim(2));
                let d = *dilation;
                let xd = x.data();
                let wd = w.data();
                self.accumulate(grads, *input, |gx| {
                    for j in 0..k {
                        let shift = (k - 1 - j) * d;
                        if shift >= t_len {
                            continue;
                        }
                        // gx[:, ..T-s] += W_j^T g[:, s..]
                        F::gemm_acc(
                            c_in,
                            c_out,
                            t_len - shift,
                            &wd[j..],
                            Strides(k, c_in * k),
                            &g[shift..],
                            Strides(t_len, 1),
                            gx,
                            Strides(t_len, 1),
                        );
                    }
                });
                self.accumulate(grads, *kernel, |gw| {
                    for j in 0..k {
                        let shift = (k - 1 - j) * d;
                        if shift >= t_len {
                            continue;
                        }
                        // W_j += g[:, s..] x[:, ..T-s]^T
                        F::gemm_acc(
                            c_out,
                            t_len - shift,
                            c_in,
                            &g[shift..],
                            Strides(t_len, 1),
                            xd,
                            Strides(1, t_len),
                            &mut gw[j..],
                            Strides(c_in * k, k),
                        );
                    }
                });
            }
            Op::ChannelBias { input, bias } => {
                let t = self.value(*input).dim(1);
                self.accumulate(grads, *input, |gx| add_into(gx, g));
                self.accumulate(grads, *bias, |gb| {
                    for (ch, b) in gb.iter_mut().enumerate() {
                        *b += g[ch * t..(ch + 1) * t].iter().copied().sum::<F>();
                    }
                });
            }
            Op::WeightNorm { direction, scale, eps } => {
                let dv = self.value(*direction);
                let sv = self.value(*scale);
                let rows = dv.dim(0);
                let per = dv.len() / rows.max(1);
                let mut norms = Vec::with_capacity(rows);
                let mut gdots = Vec::with_capacity(rows);
                for o in 0..rows {
                    let row = &dv.data()[o * per..(o + 1) * per];
                    norms.push(row.iter().map(|&x| x * x).sum::<F>().sqrt());
                    gdots.push(dot(&g[o * per..(o + 1) * per], row));
                }
                self.accumulate(grads, *scale, |gs| {
                    for o in 0..rows {
                        gs[o] += gdots[o] / (norms[o] + *eps);
                    }
                });
                self.accumulate(grads, *direction, |gd| {
                    for o in 0..rows {
                        let s = sv.data()[o];
                        let den = norms[o] + *eps;
                        let a = s / den;
                        let row = &dv.data()[o * per..(o + 1) * per];
                        let go = &g[o * per..(o + 1) * per];
                        let corr = if norms[o] > F::zero() {
                            s * gdots[o] / (den * den * norms[o])
                        } else {
                            F::zero()
                        };
                        for i in 0..per {
                            gd[o * per + i] += a * go[i] - corr * row[i];
                        }
                    }
                });
            }
            Op::Prelu { input, slope, axis } => {
                let x = self.value(*input);
                let a = self.value(*slope);
                let (r, c) = (x.dim(0), x.dim(1));
                let ch = |i: usize, j: usize| match axis {
                    Axis::Rows => i,
                    Axis::Cols => j,
                };
                self.accumulate(grads, *input, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            let p = i * c + j;
                            gx[p] += if x.data()[p] < F::zero() {
                                g[p] * a.data()[ch(i, j)]
                            } else {
                                g[p]
                            };
                        }
                    }
                });
                self.accumulate(grads, *slope, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            let p = i * c + j;
                            if x.data()[p] < F::zero() {
                                ga[ch(i, j)] += g[p] * x.data()[p];
                            }
                        }
                    }
                });
            }
            Op::Mask { input, mask } => {
                self.accumulate(grads, *input, |gx| {
                    for ((dst, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *dst += gi * m;
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s));
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *f));
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, |ga| {
                    for ((d, &s), &xv) in ga.iter_mut().zip(g).zip(x.data()) {
                        if xv > F::zero() {
                            *d += s;
                        } else if xv < F::zero() {
                            *d -= s;
                        }
                    }
                });
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, |ga| {
                    for ((d, &s), &xv) in ga.iter_mut().zip(g).zip(x.data()) {
                        *d += s * sigmoid(xv);
                    }
                });
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (f_out, f_in) = (w.dim(0), w.dim(1));
                let batch = x.len() / f_in.max(1);
                // gx += g W, gW += g^T x
                self.accumulate(grads, *input, |gx| {
                    F::gemm_acc(
                        batch,
                        f_out,
                        f_in,
                        g,
                        Strides(f_out, 1),
                        w.data(),
                        Strides(f_in, 1),
                        gx,
                        Strides(f_in, 1),
                    );
                });
                self.accumulate(grads, *weight, |gw| {
                    F::gemm_acc(
                        f_out,
                        batch,
                        f_in,
                        g,
                        Strides(1, f_out),
                        x.data(),
                        Strides(f_in, 1),
                        gw,
                        Strides(f_in, 1),
                    );
                });
                self.accumulate(grads, *bias, |gb| {
                    for r in 0..batch {
                        add_into(gb, &g[r * f_out..(r + 1) * f_out]);
                    }
                });
            }
            Op::GatherColumns { input, cols } => {
                let x = self.value(*input);
                let (d, t) = (x.dim(0), x.dim(1));
                self.accumulate(grads, *input, |gx| {
                    for (b, &c) in cols.iter().enumerate() {
                        for ch in 0..d {
                            gx[ch * t + c] += g[b * d + ch];
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (d1, d2) = (self.value(*a).dim(1), self.value(*b).dim(1));
                let rows = self.value(*a).dim(0);
                self.accumulate(grads, *a, |ga| {
                    for r in 0..rows {
                        add_into(&mut ga[r * d1..(r + 1) * d1], &g[r * (d1 + d2)..r * (d1 + d2) + d1]);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for r in 0..rows {
                        add_into(
                            &mut gb[r * d2..(r + 1) * d2],
                            &g[r * (d1 + d2) + d1..(r + 1) * (d1 + d2)],
                        );
                    }
                });
            }
            Op::GroupSoftmax { input, group } => {
                let y = &node.value;
                self.accumulate(grads, *input, |gx| {
                    for ((gxc, yc), gc) in gx.chunks_mut(*group).zip(y.data().chunks(*group)).zip(g.chunks(*group)) {
                        let s = dot(yc, gc);
                        for i in 0..*group {
                            gxc[i] += yc[i] * (gc[i] - s);
                        }
                    }
                });
            }
            Op::HoaLoss {
                probs,
                targets,
                mask,
                group,
                weight,
            } => {
                let p = self.value(*probs);
                let cols = p.dim(1);
                let scale = g[0] * *weight;
                self.accumulate(grads, *probs, |gp| {
                    for (b, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        let base = b * cols;
                        for start in (0..cols).step_by(*group) {
                            let ph = &p.data()[base + start..base + start + group];
                            let th = &targets[base + start..base + start + group];
                            let dst = &mut gp[base + start..base + start + group];
                            crate::hoa::emd2_grad_accumulate(th, ph, scale, dst);
                        }
                    }
                });
            }
            Op::NormalizeRows { input, eps } => {
                let x = self.value(*input);
                let c = x.dim(1).max(1);
                self.accumulate(grads, *input, |gx| {
                    for ((gxr, xr), gr) in gx.chunks_mut(c).zip(x.data().chunks(c)).zip(g.chunks(c)) {
                        let n = xr.iter().map(|&v| v * v).sum::<F>().sqrt();
                        let den = n + *eps;
                        let gd = dot(gr, xr);
                        let corr = if n > F::zero() { gd / (den * den * n) } else { F::zero() };
                        for i in 0..xr.len() {
                            gxr[i] += gr[i] / den - corr * xr[i];
                        }
                    }
                });
            }
            Op::SqDistSum { a, b, weight } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let two = F::lit(2.0) * g[0] * *weight;
                self.accumulate(grads, *a, |ga| {
                    for ((d, &x), &y) in ga.iter_mut().zip(va.data()).zip(vb.data()) {
                        *d += two * (x - y);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((d, &x), &y) in gb.iter_mut().zip(va.data()).zip(vb.data()) {
                        *d -= two * (x - y);
                    }
                });
            }
            Op::SqErrSum { pred, target, weight } => {
                let vp = self.value(*pred);
                let two = F::lit(2.0) * g[0] * *weight;
                self.accumulate(grads, *pred, |gp| {
                    for ((d, &x), &y) in gp.iter_mut().zip(vp.data()).zip(target) {
                        *d += two * (x - y);
                    }
                });
            }
        }
    }
}

/// Forward kernel shared with the inference path.
pub(crate) fn conv1d_forward<F: Scalar>(
    x: &[F],
    w: &[F],
    c_in: usize,
    c_out: usize,
    k: usize,
    t_len: usize,
    dilation: usize,
) -> Vec<F> {
    let mut out = vec![F::zero(); c_out * t_len];
    for j in 0..k {
        let shift = (k - 1 - j) * dilation;
        if shift >= t_len {
            continue;
        }
        // out[:, s..] += W_j x[:, ..T-s]
        F::gemm_acc(
            c_out,
            c_in,
            t_len - shift,
            &w[j..],
            Strides(c_in * k, k),
            x,
            Strides(t_len, 1),
            &mut out[shift..],
            Strides(t_len, 1),
        );
    }
    out
}

#[inline]
pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

pub(crate) fn softplus<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Max-subtracted softmax.
pub fn softmax_in_place<F: Scalar>(v: &mut [F]) {
    let m = v.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x = *x / s);
}

/// Softmax of a single logit vector.
pub fn softmax<F: Scalar>(logits: &[F]) -> Result<Vec<F>, DiffError> {
    if logits.is_empty() {
        return Err(shape_err("softmax", "length (>= 1)", 1, 0));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(DiffError::NonFinite("softmax input".into()));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}
