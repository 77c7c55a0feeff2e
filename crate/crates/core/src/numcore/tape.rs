//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. [`Tape::backward`] walks the nodes in reverse and
//! accumulates adjoints into the parents that require gradients. Leaves are
//! constants (no gradient), inputs (gradient, no parameter), or parameters
//! bound to a [`ParamId`].
//!
//! Shape errors inside the tape are programming errors and panic; the public
//! value-level APIs validate user input before it reaches the tape.

use super::params::{ParamId, Params};
use super::stats::{log_sum_exp, mean_var, sigmoid, softmax};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule of an operation defined outside this module.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Adjoints for each input; `None` where `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelOp {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Constant,
    Input,
    Param(ParamId),
    Conv3x3 { x: Var, w: Var, b: Var },
    Silu(Var),
    AvgPool2(Var),
    ChannelMean(Var),
    ChannelStd(Var),
    Channel { x: Var, v: Var, op: ChannelOp },
    ClampMin0(Var),
    Axpby { a: Var, b: Var, wa: f64, wb: f64 },
    AddConst(Var),
    Mean(Vec<Var>),
    Sum(Vec<Var>),
    Scale { x: Var, s: f64 },
    MaskedMean { x: Var, weights: Vec<f64> },
    Broadcast { v: Var },
    Concat(Vec<Var>),
    Linear { x: Var, w: Var, b: Var },
    PairDiff(Var),
    Upsample { x: Var, table: UpsampleTable },
    BceLogits { x: Var, target: Vec<f64> },
    SoftmaxXent { x: Var, target: usize },
    SumSquares(Var),
    Dot { x: Var, w: Vec<f64> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Leaf that receives a gradient but is not a stored parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, params: &Params, id: ParamId) -> Var {
        let p = params.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    /// 3×3 same-padded convolution. `x: [H, W, Ci]`, `w: [3, 3, Ci, Co]`, `b: [Co]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = conv3x3_forward(self.value(x), self.value(w), self.value(b));
        let rg = self.rg(&[x, w, b]);
        self.push(out, Op::Conv3x3 { x, w, b }, rg)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v * sigmoid(v))
            .collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        let rg = self.rg(&[x]);
        self.push(out, Op::Silu(x), rg)
    }

    /// 2×2 average pooling with stride 2 (trailing odd row/column dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let out = avg_pool2_forward(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::AvgPool2(x), rg)
    }

    /// Spatial mean per channel, `[.., C] -> [C]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = last_dim(t);
        let (mean, _) = mean_var(t.data(), t.len() / c, c);
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(mean), Op::ChannelMean(x), rg)
    }

    /// `sqrt(var + eps)` per channel with population variance.
    pub fn channel_std(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let c = last_dim(t);
        let (_, var) = mean_var(t.data(), t.len() / c, c);
        let std = var.iter().map(|v| (v + eps).sqrt()).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(std), Op::ChannelStd(x), rg)
    }

    /// Applies `op` between every pixel of `x: [.., C]` and the vector `v: [C]`.
    pub fn channel(&mut self, x: Var, v: Var, op: ChannelOp) -> Var {
        let (t, vv) = (self.value(x), self.value(v));
        let c = last_dim(t);
        assert_eq!(vv.len(), c, "channel op: vector of {} for {c} channels", vv.len());
        let vd = vv.data();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let b = vd[i % c];
                match op {
                    ChannelOp::Add => a + b,
                    ChannelOp::Sub => a - b,
                    ChannelOp::Mul => a * b,
                    ChannelOp::Div => a / b,
                }
            })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[x, v]);
        self.push(out, Op::Channel { x, v, op }, rg)
    }

    pub fn clamp_min0(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[x]);
        self.push(out, Op::ClampMin0(x), rg)
    }

    /// `wa * a + wb * b` for same-shaped operands.
    pub fn axpby(&mut self, a: Var, b: Var, wa: f64, wb: f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "axpby shapes");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| wa * x + wb * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Axpby { a, b, wa, wb }, rg)
    }

    /// `x + c` with a constant `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape(), c.shape(), "add_const shapes");
        let data = t.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let out = Tensor::new(t.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[x]);
        self.push(out, Op::AddConst(x), rg)
    }

    /// Elementwise mean of same-shaped tensors.
    pub fn mean(&mut self, parts: &[Var]) -> Var {
        let mut out = self.sum_values(parts);
        out.scale_assign(1.0 / parts.len() as f64);
        let rg = self.rg(parts);
        self.push(out, Op::Mean(parts.to_vec()), rg)
    }

    /// Elementwise sum of same-shaped tensors.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let out = self.sum_values(parts);
        let rg = self.rg(parts);
        self.push(out, Op::Sum(parts.to_vec()), rg)
    }

    fn sum_values(&self, parts: &[Var]) -> Tensor {
        assert!(!parts.is_empty(), "sum of nothing");
        let mut out = self.value(parts[0]).clone();
        for p in &parts[1..] {
            assert_eq!(out.shape(), self.value(*p).shape(), "sum shapes");
            out.add_assign(self.value(*p));
        }
        out
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_assign(s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, s }, rg)
    }

    /// Weighted spatial average `sum_j m_j x_j / sum_j m_j`, `[.., C] -> [C]`.
    ///
    /// Panics when the mask has no positive weight.
    pub fn masked_mean(&mut self, x: Var, mask: &[f64]) -> Var {
        let t = self.value(x);
        let c = last_dim(t);
        assert_eq!(mask.len() * c, t.len(), "masked_mean: mask length");
        let total: f64 = mask.iter().sum();
        assert!(total > 0.0, "masked_mean: empty mask");
        let weights: Vec<f64> = mask.iter().map(|m| m / total).collect();
        let mut out = vec![0.0; c];
        for (row, &wj) in t.data().chunks_exact(c).zip(&weights) {
            if wj != 0.0 {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += wj * v;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(out), Op::MaskedMean { x, weights }, rg)
    }

    /// Tiles a `[C]` vector to `[H, W, C]`.
    pub fn broadcast(&mut self, v: Var, h: usize, w: usize) -> Var {
        let vv = self.value(v).data().to_vec();
        let c = vv.len();
        let mut data = Vec::with_capacity(h * w * c);
        for _ in 0..h * w {
            data.extend_from_slice(&vv);
        }
        let out = Tensor::new(vec![h, w, c], data).unwrap();
        let rg = self.rg(&[v]);
        self.push(out, Op::Broadcast { v }, rg)
    }

    /// Concatenation along the last (channel) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let lead = self.value(parts[0]).shape();
        let lead = lead[..lead.len() - 1].to_vec();
        let pixels: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| last_dim(self.value(*p))).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; pixels * total];
        let mut off = 0;
        for (p, &cw) in parts.iter().zip(&widths) {
            let t = self.value(*p);
            assert_eq!(&t.shape()[..t.shape().len() - 1], &lead[..], "concat shapes");
            for (j, row) in t.data().chunks_exact(cw).enumerate() {
                data[j * total + off..j * total + off + cw].copy_from_slice(row);
            }
            off += cw;
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, data).unwrap();
        let rg = self.rg(parts);
        self.push(out, Op::Concat(parts.to_vec()), rg)
    }

    /// Row-wise affine map: `x: [.., Ci]`, `w: [Ci, Co]`, `b: [Co]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = linear_forward(self.value(x), self.value(w), self.value(b));
        let rg = self.rg(&[x, w, b]);
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    /// `x[.., 1] - x[.., 0]` for a trailing axis of size two.
    pub fn pair_diff(&mut self, x: Var) -> Var {
        let t = self.value(x);
        assert_eq!(last_dim(t), 2, "pair_diff needs two channels");
        let data = t.data().chunks_exact(2).map(|p| p[1] - p[0]).collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let out = Tensor::new(shape, data).unwrap();
        let rg = self.rg(&[x]);
        self.push(out, Op::PairDiff(x), rg)
    }

    /// Bilinear resize of `[H, W, C]` to `[out_h, out_w, C]` (half-pixel centres).
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let t = self.value(x);
        let table = UpsampleTable::new(t.shape()[0], t.shape()[1], out_h, out_w);
        let out = table.forward(t);
        let rg = self.rg(&[x]);
        self.push(out, Op::Upsample { x, table }, rg)
    }

    /// Mean binary cross-entropy of `sigmoid(x)` against `target`, from logits.
    pub fn bce_with_logits(&mut self, x: Var, target: &[f64]) -> Var {
        let t = self.value(x);
        assert_eq!(t.len(), target.len(), "bce target length");
        let n = t.len() as f64;
        let loss = t
            .data()
            .iter()
            .zip(target)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.rg(&[x]);
        self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                x,
                target: target.to_vec(),
            },
            rg,
        )
    }

    /// `-log softmax(x)[target]` for a vector `x`.
    pub fn softmax_cross_entropy(&mut self, x: Var, target: usize) -> Var {
        let t = self.value(x);
        assert!(target < t.len(), "softmax_cross_entropy target");
        let loss = log_sum_exp(t.data()) - t.data()[target];
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(loss), Op::SoftmaxXent { x, target }, rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let loss = self.value(x).sum_squares();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(loss), Op::SumSquares(x), rg)
    }

    /// Inner product with a constant weight tensor.
    pub fn dot_const(&mut self, x: Var, w: &[f64]) -> Var {
        let t = self.value(x);
        assert_eq!(t.len(), w.len(), "dot_const length");
        let v = t.data().iter().zip(w).map(|(a, b)| a * b).sum();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::scalar(v),
            Op::Dot {
                x,
                w: w.to_vec(),
            },
            rg,
        )
    }

    /// Records an externally computed `output` with a custom backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// `(x - mean) / std` per channel, composed from primitive ops.
    pub fn standardize(&mut self, x: Var, eps: f64) -> (Var, Var, Var) {
        let mu = self.channel_mean(x);
        let sigma = self.channel_std(x, eps);
        let centred = self.channel(x, mu, ChannelOp::Sub);
        (self.channel(centred, sigma, ChannelOp::Div), mu, sigma)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0]).unwrap());
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds `scale ×` every parameter-leaf adjoint into `params`' gradients.
    pub fn accumulate_param_grads(
        &self,
        grads: &Gradients,
        params: &mut Params,
        scale: f64,
    ) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                params.accumulate_grad(*id, g, scale)?;
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::Conv3x3 { x, w, b } => {
                let (dx, dw, db) = conv3x3_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    self.needs(*x),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *w, dw);
                self.acc(grads, *b, db);
            }
            Op::Silu(x) => {
                let t = self.value(*x);
                let data = t
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * (s + v * s * (1.0 - s))
                    })
                    .collect();
                self.acc(grads, *x, Tensor::new(t.shape().to_vec(), data).unwrap());
            }
            Op::AvgPool2(x) => {
                let dx = avg_pool2_backward(self.value(*x).shape(), g);
                self.acc(grads, *x, dx);
            }
            Op::ChannelMean(x) => {
                let t = self.value(*x);
                let c = last_dim(t);
                let inv = c as f64 / t.len() as f64;
                let data = (0..t.len()).map(|i| g.data()[i % c] * inv).collect();
                self.acc(grads, *x, Tensor::new(t.shape().to_vec(), data).unwrap());
            }
            Op::ChannelStd(x) => {
                // d sigma_c / d x_i = (x_i - mu_c) / (N sigma_c)
                let t = self.value(*x);
                let c = last_dim(t);
                let n = t.len() / c;
                let (mean, _) = mean_var(t.data(), n, c);
                let sd = out.data();
                let data = t
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let k = i % c;
                        g.data()[k] * (v - mean[k]) / (n as f64 * sd[k])
                    })
                    .collect();
                self.acc(grads, *x, Tensor::new(t.shape().to_vec(), data).unwrap());
            }
            Op::Channel { x, v, op } => {
                let (t, vv) = (self.value(*x), self.value(*v));
                let c = vv.len();
                let vd = vv.data();
                if self.needs(*x) {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| match op {
                            ChannelOp::Add | ChannelOp::Sub => gv,
                            ChannelOp::Mul => gv * vd[i % c],
                            ChannelOp::Div => gv / vd[i % c],
                        })
                        .collect();
                    self.acc(grads, *x, Tensor::new(t.shape().to_vec(), data).unwrap());
                }
                if self.needs(*v) {
                    let mut dv = vec![0.0; c];
                    for (i, (&gv, &xv)) in g.data().iter().zip(t.data()).enumerate() {
                        let k = i % c;
                        dv[k] += match op {
                            ChannelOp::Add => gv,
                            ChannelOp::Sub => -gv,
                            ChannelOp::Mul => gv * xv,
                            ChannelOp::Div => -gv * xv / (vd[k] * vd[k]),
                        };
                    }
                    self.acc(grads, *v, Tensor::new(vv.shape().to_vec(), dv).unwrap());
                }
            }
            Op::ClampMin0(x) => {
                let t = self.value(*x);
                let data = t
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.acc(grads, *x, Tensor::new(t.shape().to_vec(), data).unwrap());
            }
            Op::Axpby { a, b, wa, wb } => {
                let mut ga = g.clone();
                ga.scale_assign(*wa);
                self.acc(grads, *a, ga);
                let mut gb = g.clone();
                gb.scale_assign(*wb);
                self.acc(grads, *b, gb);
            }
            Op::AddConst(x) => self.acc(grads, *x, g.clone()),
            Op::Mean(parts) => {
                let mut gp = g.clone();
                gp.scale_assign(1.0 / parts.len() as f64);
                for p in parts {
                    self.acc(grads, *p, gp.clone());
                }
            }
            Op::Sum(parts) => {
                for p in parts {
                    self.acc(grads, *p, g.clone());
                }
            }
            Op::Scale { x, s } => {
                let mut gx = g.clone();
                gx.scale_assign(*s);
                self.acc(grads, *x, gx);
            }
            Op::MaskedMean { x, weights } => {
                let t = self.value(*x);
                let c = g.len();
                let mut data = vec![0.0; t.len()];
                for (row, &wj) in data.chunks_exact_mut(c).zip(weights) {
                    if wj != 0.0 {
                        for (r, gv) in row.iter_mut().zip(g.data()) {
                            *r = wj * gv;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(t.shape().to_vec(), data).unwrap());
            }
            Op::Broadcast { v } => {
                let c = self.value(*v).len();
                let mut dv = vec![0.0; c];
                for row in g.data().chunks_exact(c) {
                    for (d, r) in dv.iter_mut().zip(row) {
                        *d += r;
                    }
                }
                self.acc(grads, *v, Tensor::from_vec(dv));
            }
            Op::Concat(parts) => {
                let total = last_dim(g);
                let mut off = 0;
                for p in parts {
                    let t = self.value(*p);
                    let cw = last_dim(t);
                    if self.needs(*p) {
                        let mut data = Vec::with_capacity(t.len());
                        for row in g.data().chunks_exact(total) {
                            data.extend_from_slice(&row[off..off + cw]);
                        }
                        self.acc(grads, *p, Tensor::new(t.shape().to_vec(), data).unwrap());
                    }
                    off += cw;
                }
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) =
                    linear_backward(self.value(*x), self.value(*w), g, self.needs(*x));
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *w, dw);
                self.acc(grads, *b, db);
            }
            Op::PairDiff(x) => {
                let t = self.value(*x);
                let mut data = Vec::with_capacity(t.len());
                for &gv in g.data() {
                    data.push(-gv);
                    data.push(gv);
                }
                self.acc(grads, *x, Tensor::new(t.shape().to_vec(), data).unwrap());
            }
            Op::Upsample { x, table } => {
                let dx = table.backward(self.value(*x).shape(), g);
                self.acc(grads, *x, dx);
            }
            Op::BceLogits { x, target } => {
                let t = self.value(*x);
                let s = g.item() / t.len() as f64;
                let data = t
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&z, &y)| s * (sigmoid(z) - y))
                    .collect();
                self.acc(grads, *x, Tensor::new(t.shape().to_vec(), data).unwrap());
            }
            Op::SoftmaxXent { x, target } => {
                let t = self.value(*x);
                let mut p = softmax(t.data());
                p[*target] -= 1.0;
                p.iter_mut().for_each(|v| *v *= g.item());
                self.acc(grads, *x, Tensor::new(t.shape().to_vec(), p).unwrap());
            }
            Op::SumSquares(x) => {
                let t = self.value(*x);
                let s = 2.0 * g.item();
                let data = t.data().iter().map(|v| s * v).collect();
                self.acc(grads, *x, Tensor::new(t.shape().to_vec(), data).unwrap());
            }
            Op::Dot { x, w } => {
                let t = self.value(*x);
                let data = w.iter().map(|v| v * g.item()).collect();
                self.acc(grads, *x, Tensor::new(t.shape().to_vec(), data).unwrap());
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.needs(*v)).collect();
                let gs = op.backward(&vals, out, g, &needs);
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        self.acc(grads, *v, gi);
                    }
                }
            }
        }
    }
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().expect("rank-0 tensor")
}

fn conv3x3_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let &[h, wd, ci] = x.shape() else {
        panic!("conv3x3 input must be [H, W, C], got {:?}", x.shape())
    };
    assert_eq!(&w.shape()[..3], &[3, 3, ci], "conv3x3 weight shape");
    let co = w.shape()[3];
    assert_eq!(b.len(), co, "conv3x3 bias shape");
    let (xd, wdt) = (x.data(), w.data());
    let mut out = vec![0.0; h * wd * co];
    for y in 0..h {
        for xx in 0..wd {
            let o = &mut out[(y * wd + xx) * co..(y * wd + xx + 1) * co];
            o.copy_from_slice(b.data());
            for ky in 0..3 {
                let Some(sy) = (y + ky).checked_sub(1).filter(|&s| s < h) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(sx) = (xx + kx).checked_sub(1).filter(|&s| s < wd) else {
                        continue;
                    };
                    let inp = &xd[(sy * wd + sx) * ci..(sy * wd + sx + 1) * ci];
                    let wk = &wdt[(ky * 3 + kx) * ci * co..(ky * 3 + kx + 1) * ci * co];
                    for (i, &a) in inp.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        for (ov, wv) in o.iter_mut().zip(&wk[i * co..(i + 1) * co]) {
                            *ov += a * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, wd, co], out).unwrap()
}

fn conv3x3_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let &[h, wd, ci] = x.shape() else { unreachable!() };
    let co = w.shape()[3];
    let (xd, wdt, gd) = (x.data(), w.data(), g.data());
    let mut dx = if need_dx { vec![0.0; xd.len()] } else { Vec::new() };
    let mut dw = vec![0.0; wdt.len()];
    let mut db = vec![0.0; co];
    for y in 0..h {
        for xx in 0..wd {
            let go = &gd[(y * wd + xx) * co..(y * wd + xx + 1) * co];
            for (d, gv) in db.iter_mut().zip(go) {
                *d += gv;
            }
            for ky in 0..3 {
                let Some(sy) = (y + ky).checked_sub(1).filter(|&s| s < h) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(sx) = (xx + kx).checked_sub(1).filter(|&s| s < wd) else {
                        continue;
                    };
                    let base = (sy * wd + sx) * ci;
                    let kb = (ky * 3 + kx) * ci * co;
                    for i in 0..ci {
                        let a = xd[base + i];
                        let wrow = &wdt[kb + i * co..kb + (i + 1) * co];
                        if need_dx {
                            dx[base + i] += wrow.iter().zip(go).map(|(p, q)| p * q).sum::<f64>();
                        }
                        if a != 0.0 {
                            for (d, gv) in dw[kb + i * co..kb + (i + 1) * co].iter_mut().zip(go) {
                                *d += a * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    (
        need_dx.then(|| Tensor::new(x.shape().to_vec(), dx).unwrap()),
        Tensor::new(w.shape().to_vec(), dw).unwrap(),
        Tensor::from_vec(db),
    )
}

fn avg_pool2_forward(x: &Tensor) -> Tensor {
    let &[h, w, c] = x.shape() else {
        panic!("avg_pool2 input must be [H, W, C]")
    };
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..oh {
        for xx in 0..ow {
            let o = &mut out[(y * ow + xx) * c..(y * ow + xx + 1) * c];
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let s = ((2 * y + dy) * w + 2 * xx + dx) * c;
                for (ov, v) in o.iter_mut().zip(&xd[s..s + c]) {
                    *ov += 0.25 * v;
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out).unwrap()
}

fn avg_pool2_backward(shape: &[usize], g: &Tensor) -> Tensor {
    let (w, c) = (shape[1], shape[2]);
    let (oh, ow) = (g.shape()[0], g.shape()[1]);
    let mut dx = vec![0.0; shape.iter().product()];
    let gd = g.data();
    for y in 0..oh {
        for xx in 0..ow {
            let go = &gd[(y * ow + xx) * c..(y * ow + xx + 1) * c];
            for (dy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let s = ((2 * y + dy) * w + 2 * xx + ddx) * c;
                for (d, gv) in dx[s..s + c].iter_mut().zip(go) {
                    *d += 0.25 * gv;
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), dx).unwrap()
}

fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let ci = last_dim(x);
    assert_eq!(w.shape(), &[ci, b.len()], "linear weight shape");
    let co = b.len();
    let rows = x.len() / ci;
    let wd = w.data();
    let mut out = Vec::with_capacity(rows * co);
    for row in x.data().chunks_exact(ci) {
        let start = out.len();
        out.extend_from_slice(b.data());
        let o = &mut out[start..];
        for (i, &a) in row.iter().enumerate() {
            for (ov, wv) in o.iter_mut().zip(&wd[i * co..(i + 1) * co]) {
                *ov += a * wv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = co;
    Tensor::new(shape, out).unwrap()
}

fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let ci = last_dim(x);
    let co = last_dim(g);
    let wd = w.data();
    let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
    let mut dw = vec![0.0; wd.len()];
    let mut db = vec![0.0; co];
    for (r, (row, go)) in x.data().chunks_exact(ci).zip(g.data().chunks_exact(co)).enumerate() {
        for (d, gv) in db.iter_mut().zip(go) {
            *d += gv;
        }
        for (i, &a) in row.iter().enumerate() {
            let wrow = &wd[i * co..(i + 1) * co];
            if need_dx {
                dx[r * ci + i] = wrow.iter().zip(go).map(|(p, q)| p * q).sum();
            }
            for (d, gv) in dw[i * co..(i + 1) * co].iter_mut().zip(go) {
                *d += a * gv;
            }
        }
    }
    (
        need_dx.then(|| Tensor::new(x.shape().to_vec(), dx).unwrap()),
        Tensor::new(w.shape().to_vec(), dw).unwrap(),
        Tensor::from_vec(db),
    )
}

/// Precomputed source indices and weights for a bilinear resize.
#[derive(Debug, Clone)]
pub struct UpsampleTable {
    out_h: usize,
    out_w: usize,
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

impl UpsampleTable {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Self {
            out_h,
            out_w,
            rows: axis_table(in_h, out_h),
            cols: axis_table(in_w, out_w),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (w, c) = (x.shape()[1], x.shape()[2]);
        let xd = x.data();
        let mut out = vec![0.0; self.out_h * self.out_w * c];
        for (oy, &(y0, y1, ly)) in self.rows.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in self.cols.iter().enumerate() {
                let o = &mut out[(oy * self.out_w + ox) * c..(oy * self.out_w + ox + 1) * c];
                for (yy, wy) in [(y0, 1.0 - ly), (y1, ly)] {
                    for (xx, wx) in [(x0, 1.0 - lx), (x1, lx)] {
                        let wt = wy * wx;
                        if wt == 0.0 {
                            continue;
                        }
                        let s = (yy * w + xx) * c;
                        for (ov, v) in o.iter_mut().zip(&xd[s..s + c]) {
                            *ov += wt * v;
                        }
                    }
                }
            }
        }
        Tensor::new(vec![self.out_h, self.out_w, c], out).unwrap()
    }

    fn backward(&self, in_shape: &[usize], g: &Tensor) -> Tensor {
        let (w, c) = (in_shape[1], in_shape[2]);
        let gd = g.data();
        let mut dx = vec![0.0; in_shape.iter().product()];
        for (oy, &(y0, y1, ly)) in self.rows.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in self.cols.iter().enumerate() {
                let go = &gd[(oy * self.out_w + ox) * c..(oy * self.out_w + ox + 1) * c];
                for (yy, wy) in [(y0, 1.0 - ly), (y1, ly)] {
                    for (xx, wx) in [(x0, 1.0 - lx), (x1, lx)] {
                        let wt = wy * wx;
                        if wt == 0.0 {
                            continue;
                        }
                        let s = (yy * w + xx) * c;
                        for (d, gv) in dx[s..s + c].iter_mut().zip(go) {
                            *d += wt * gv;
                        }
                    }
                }
            }
        }
        Tensor::new(in_shape.to_vec(), dx).unwrap()
    }
}

fn axis_table(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}
