//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value plus whatever
//! the backward rule needs. Because nodes can only reference earlier nodes,
//! the tape is always in topological order and [`Graph::backward`] is a single
//! reverse sweep.

use crate::align::{align_sample, align_sample_backward};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::ops::conv::{
    channel_sums, conv2d_forward, conv2d_input_grad, conv2d_weight_grad, conv_transpose2d_backward,
    conv_transpose2d_forward, ConvGeom,
};
use crate::ops::loss::{cross_entropy_backward, cross_entropy_forward};
use crate::ops::norm::{batchnorm_backward, batchnorm_eval, batchnorm_train, BnSaved};
use crate::ops::sample::{
    avg_pool_to_bins, avg_pool_to_bins_backward, bilinear_resize, bilinear_resize_backward,
};
use crate::params::ParamId;
use crate::tensor::{Real, Tensor4};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Input,
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<T>,
    },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    Channels {
        x: Var,
        start: usize,
    },
    AvgPool(Var),
    Resize(Var),
    Align {
        f: Var,
        delta: Var,
    },
    Crop(Var),
    Sum(Var),
    Dot {
        x: Var,
        weights: Tensor4<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: LabelMap,
        pixel_weight: Vec<T>,
        denom: T,
        probs: Tensor4<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv2d_transpose",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Concat(_) => "concat_channels",
            Op::Channels { .. } => "channels",
            Op::AvgPool(_) => "avg_pool_to_bins",
            Op::Resize(_) => "bilinear_resize",
            Op::Align { .. } => "align_sample",
            Op::Crop(_) => "crop",
            Op::Sum(_) => "sum",
            Op::Dot { .. } => "dot",
            Op::CrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics produced by a training-mode batchnorm, for updating the
/// running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Output of [`Graph::cross_entropy`].
#[derive(Debug)]
pub struct LossOutput {
    pub loss: Var,
    /// Unweighted `-log p(label)` per pixel (zero where ignored).
    pub pixel_loss: Vec<f64>,
}

/// The tape.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    checked: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
        }
    }

    /// With checking on (the default) every op output is scanned for NaN/Inf.
    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if self.checked {
            value.ensure_finite(op.name())?;
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor4<T>) -> Result<Var> {
        self.push(t, Op::Input, false)
    }

    /// A free variable whose gradient is reported by backward.
    pub fn leaf(&mut self, t: Tensor4<T>) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    /// A trainable parameter. Gradients are collected per [`ParamId`].
    pub fn param(&mut self, id: ParamId, t: Tensor4<T>) -> Result<Var> {
        self.push(t, Op::Param(id), true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let bias = b.map(|b| self.value(b).data().to_vec());
        let y = conv2d_forward(self.value(x), self.value(w), bias.as_deref(), geom)?;
        let g = self.grad_of(&[x, w]) || b.is_some_and(|b| self.nodes[b.0].needs_grad);
        self.push(y, Op::Conv2d { x, w, b, geom }, g)
    }

    /// Transposed convolution; `w` is `C_in x C_out x k x k`.
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let bias = b.map(|b| self.value(b).data().to_vec());
        let y = conv_transpose2d_forward(self.value(x), self.value(w), bias.as_deref(), geom)?;
        let g = self.grad_of(&[x, w]) || b.is_some_and(|b| self.nodes[b.0].needs_grad);
        self.push(y, Op::ConvTranspose2d { x, w, b, geom }, g)
    }

    /// Batchnorm with batch statistics. Returns the output and the batch
    /// statistics for the caller's running estimate.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let (y, saved) = batchnorm_train(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        let stats = BatchStats {
            mean: saved.mean.clone(),
            var: saved.batch_var.clone(),
        };
        let g = self.grad_of(&[x, gamma, beta]);
        let v = self.push(y, Op::BatchNorm { x, gamma, beta, saved }, g)?;
        Ok((v, stats))
    }

    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (y, saved) = batchnorm_eval(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            eps,
        )?;
        let g = self.grad_of(&[x, gamma, beta]);
        self.push(y, Op::BatchNorm { x, gamma, beta, saved }, g)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let g = self.grad_of(&[x]);
        self.push(y, Op::Relu(x), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() != vb.dims() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", va.dims(), vb.dims())));
        }
        let mut y = va.clone();
        for (o, v) in y.data_mut().iter_mut().zip(vb.data()) {
            *o += *v;
        }
        let g = self.grad_of(&[a, b]);
        self.push(y, Op::Add(a, b), g)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let y = self.value(x).map(|v| v * s);
        let g = self.grad_of(&[x]);
        self.push(y, Op::Scale(x, s), g)
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?);
        let [n, _, h, w] = first.dims();
        let mut c_total = 0;
        for p in parts {
            let d = self.value(*p).dims();
            if (d[0], d[2], d[3]) != (n, h, w) {
                return Err(Error::shape("concat_channels", format!("{:?} vs {:?}", first.dims(), d)));
            }
            c_total += d[1];
        }
        let mut data = Vec::with_capacity(n * c_total * h * w);
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(self.value(*p).sample(i));
            }
        }
        let y = Tensor4::from_vec([n, c_total, h, w], data)?;
        let g = self.grad_of(parts);
        self.push(y, Op::Concat(parts.to_vec()), g)
    }

    /// Channels `start..end` of `x`.
    pub fn channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        if start >= end || end > self.value(x).c() {
            return Err(Error::shape("channels", format!("range {start}..{end} of {}", self.value(x).c())));
        }
        let y = self.value(x).channels(start, end);
        let g = self.grad_of(&[x]);
        self.push(y, Op::Channels { x, start }, g)
    }

    pub fn avg_pool_to_bins(&mut self, x: Var, k: usize) -> Result<Var> {
        let y = avg_pool_to_bins(self.value(x), k)?;
        let g = self.grad_of(&[x]);
        self.push(y, Op::AvgPool(x), g)
    }

    pub fn bilinear_resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let y = bilinear_resize(self.value(x), h, w)?;
        let g = self.grad_of(&[x]);
        self.push(y, Op::Resize(x), g)
    }

    /// Offset-guided sampling, see [`crate::align`].
    pub fn align_sample(&mut self, f: Var, delta: Var) -> Result<Var> {
        let y = align_sample(self.value(f), self.value(delta))?;
        let g = self.grad_of(&[f, delta]);
        self.push(y, Op::Align { f, delta }, g)
    }

    /// Top-left `h x w` window.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let src = self.value(x);
        let [n, c, sh, sw] = src.dims();
        if h > sh || w > sw || h == 0 || w == 0 {
            return Err(Error::shape("crop", format!("{h}x{w} out of {sh}x{sw}")));
        }
        if (h, w) == (sh, sw) {
            let y = src.clone();
            let g = self.grad_of(&[x]);
            return self.push(y, Op::Crop(x), g);
        }
        let y = Tensor4::from_fn([n, c, h, w], |a, b, yy, xx| src.at(a, b, yy, xx));
        let g = self.grad_of(&[x]);
        self.push(y, Op::Crop(x), g)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64_lossy()).sum();
        let g = self.grad_of(&[x]);
        self.push(Tensor4::scalar(T::from_f64_lossy(s)), Op::Sum(x), g)
    }

    /// `sum(x * weights)` for a constant `weights` of the same shape.
    pub fn dot(&mut self, x: Var, weights: Tensor4<T>) -> Result<Var> {
        let v = self.value(x);
        if v.dims() != weights.dims() {
            return Err(Error::shape("dot", format!("{:?} vs {:?}", v.dims(), weights.dims())));
        }
        let s: f64 = v
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a.to_f64_lossy() * b.to_f64_lossy())
            .sum();
        let g = self.grad_of(&[x]);
        self.push(Tensor4::scalar(T::from_f64_lossy(s)), Op::Dot { x, weights }, g)
    }

    /// `sum_p pixel_weight[p] * (-log softmax(logits)[label_p]) / denom`.
    /// Ignored pixels contribute nothing; `denom == 0` gives a zero loss.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &LabelMap,
        pixel_weight: Vec<T>,
        denom: T,
    ) -> Result<LossOutput> {
        if pixel_weight.len() != labels.data.len() {
            return Err(Error::shape("softmax_cross_entropy", "pixel weights differ from label count"));
        }
        let fwd = cross_entropy_forward(self.value(logits), labels, &pixel_weight, denom)?;
        let g = self.grad_of(&[logits]);
        let loss = self.push(
            Tensor4::scalar(fwd.loss),
            Op::CrossEntropy {
                logits,
                labels: labels.clone(),
                pixel_weight,
                denom,
                probs: fwd.probs,
            },
            g,
        )?;
        Ok(LossOutput {
            loss,
            pixel_loss: fwd.pixel_loss,
        })
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        let node = self
            .nodes
            .get(root.0)
            .ok_or_else(|| Error::Backward("root is not on this tape (no forward pass recorded)".into()))?;
        if node.value.len() != 1 {
            return Err(Error::Backward(format!(
                "root must be a scalar, got {:?}",
                node.value.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor4::scalar(T::one()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor4<T>, grads: &mut [Option<Tensor4<T>>]) -> Result<()> {
        let mut acc = |v: Var, d: Tensor4<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (a, b) in existing.data_mut().iter_mut().zip(d.data()) {
                        *a += *b;
                    }
                }
                slot => *slot = Some(d),
            }
        };
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Input | Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, geom } => {
                if needs(*x) {
                    acc(*x, conv2d_input_grad(g, self.value(*w), self.value(*x).dims(), *geom));
                }
                if needs(*w) {
                    acc(*w, conv2d_weight_grad(self.value(*x), g, *geom));
                }
                if let Some(b) = b {
                    let db = channel_sums(g);
                    acc(*b, Tensor4::from_vec(self.value(*b).dims(), db)?);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (dx, dw) = conv_transpose2d_backward(self.value(*x), self.value(*w), g, *geom)?;
                acc(*x, dx);
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, Tensor4::from_vec(self.value(*b).dims(), channel_sums(g))?);
                }
            }
            Op::BatchNorm { x, gamma, beta, saved } => {
                let (dx, dg, db) = batchnorm_backward(self.value(*x), self.value(*gamma).data(), saved, g);
                acc(*x, dx);
                acc(*gamma, Tensor4::from_vec(self.value(*gamma).dims(), dg)?);
                acc(*beta, Tensor4::from_vec(self.value(*beta).dims(), db)?);
            }
            Op::Relu(x) => {
                let mut d = g.clone();
                for (o, v) in d.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if *v <= T::zero() {
                        *o = T::zero();
                    }
                }
                acc(*x, d);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Scale(x, s) => acc(*x, g.map(|v| v * *s)),
            Op::Concat(parts) => {
                let [n, _, h, w] = g.dims();
                let mut start = 0;
                for p in parts {
                    let c = self.value(*p).c();
                    if needs(*p) {
                        acc(*p, g.channels(start, start + c));
                    }
                    start += c;
                }
                debug_assert_eq!(start * n * h * w, g.len());
            }
            Op::Channels { x, start } => {
                let src = self.value(*x);
                let [n, c, h, w] = src.dims();
                let gc = g.c();
                let mut d = Tensor4::zeros([n, c, h, w]);
                let plane = h * w;
                for i in 0..n {
                    let dst = (i * c + start) * plane;
                    d.data_mut()[dst..dst + gc * plane].copy_from_slice(g.sample(i));
                }
                acc(*x, d);
            }
            Op::AvgPool(x) => acc(*x, avg_pool_to_bins_backward(g, self.value(*x).dims())),
            Op::Resize(x) => acc(*x, bilinear_resize_backward(g, self.value(*x).dims())),
            Op::Align { f, delta } => {
                let (df, dd) = align_sample_backward(self.value(*f), self.value(*delta), g)?;
                acc(*f, df);
                acc(*delta, dd);
            }
            Op::Crop(x) => {
                let src = self.value(*x);
                let mut d = Tensor4::zeros(src.dims());
                let [n, c, h, w] = g.dims();
                for a in 0..n {
                    for b in 0..c {
                        for yy in 0..h {
                            for xx in 0..w {
                                d.set(a, b, yy, xx, g.at(a, b, yy, xx));
                            }
                        }
                    }
                }
                acc(*x, d);
            }
            Op::Sum(x) => acc(*x, Tensor4::full(self.value(*x).dims(), g.data()[0])),
            Op::Dot { x, weights } => {
                let s = g.data()[0];
                acc(*x, weights.map(|v| v * s));
            }
            Op::CrossEntropy {
                logits,
                labels,
                pixel_weight,
                denom,
                probs,
            } => acc(
                *logits,
                cross_entropy_backward(probs, labels, pixel_weight, *denom, g.data()[0]),
            ),
        }
        Ok(())
    }

    /// Gradient for every parameter that appears on the tape, summed over
    /// repeated registrations. Parameters not on the tape are absent.
    pub fn param_grads(&self, grads: &Grads<T>) -> Vec<(ParamId, Tensor4<T>)> {
        let mut out: Vec<(ParamId, Tensor4<T>)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                let g = grads.grads[i]
                    .clone()
                    .unwrap_or_else(|| Tensor4::zeros(node.value.dims()));
                match out.iter_mut().find(|(pid, _)| *pid == id) {
                    Some((_, existing)) => existing.axpy(T::one(), &g),
                    None => out.push((id, g)),
                }
            }
        }
        out
    }
}

/// Result of a backward sweep.
pub struct Grads<T> {
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor4<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape if nothing reached it.
    pub fn wrt(&self, v: Var, dims: [usize; 4]) -> Tensor4<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor4::zeros(dims))
    }
}
