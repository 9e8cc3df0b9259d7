//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value. Nodes built only
//! from constants never receive gradients, so frozen sub-networks cost nothing
//! on the backward pass.

use std::sync::Arc;

use crate::error::{MsnError, Result};
use crate::kernels::{self, AxisPlan};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    AvgPool2(Var),
    Resize {
        x: Var,
        rows: Arc<AxisPlan>,
        cols: Arc<AxisPlan>,
    },
    Crop {
        x: Var,
        y0: usize,
        x0: usize,
    },
    Concat(Vec<Var>),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Arc<Vec<u16>>,
        ignore: u16,
        scale: T,
        probs: Vec<T>,
    },
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Slice {
        x: Var,
        offset: usize,
    },
    Add(Var, Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by [`Var`]; `None` where no gradient flows.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (ci, h, w) = self.value(x).chw()?;
        let ks = match self.value(kernel).shape() {
            &[_, kin, kh, kw] if kin == ci && kh == kw && kh % 2 == 1 => kh,
            s => {
                return Err(MsnError::Shape(format!(
                    "kernel {:?} incompatible with input of {ci} channels",
                    s
                )))
            }
        };
        let co = self.value(kernel).shape()[0];
        if let Some(b) = bias {
            if self.value(b).len() != co {
                return Err(MsnError::Shape(format!(
                    "bias of {} for {co} output channels",
                    self.value(b).len()
                )));
            }
        }
        let out = kernels::conv2d(
            self.value(x).data(),
            ci,
            h,
            w,
            self.value(kernel).data(),
            co,
            ks,
            bias.map(|b| self.value(b).data()),
        );
        let needs = self.needs_grad(x)
            || self.needs_grad(kernel)
            || bias.is_some_and(|b| self.needs_grad(b));
        Ok(self.push(
            Tensor::from_vec(&[co, h, w], out)?,
            Op::Conv2d { x, kernel, bias },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let needs = self.needs_grad(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(MsnError::Shape(format!("cannot halve {h}x{w}")));
        }
        let out = kernels::avg_pool2(self.value(x).data(), c, h, w);
        let needs = self.needs_grad(x);
        Ok(self.push(
            Tensor::from_vec(&[c, h / 2, w / 2], out)?,
            Op::AvgPool2(x),
            needs,
        ))
    }

    /// Bilinear resize to `oh x ow` (half-pixel centres, edge clamped).
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if h == 0 || w == 0 || oh == 0 || ow == 0 {
            return Err(MsnError::Shape("zero-sized resize".into()));
        }
        let rows = Arc::new(AxisPlan::new(h, oh));
        let cols = Arc::new(AxisPlan::new(w, ow));
        let out = kernels::resize_bilinear(self.value(x).data(), c, h, w, &rows, &cols);
        let needs = self.needs_grad(x);
        Ok(self.push(
            Tensor::from_vec(&[c, oh, ow], out)?,
            Op::Resize { x, rows, cols },
            needs,
        ))
    }

    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, ch: usize, cw: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if y0 + ch > h || x0 + cw > w || ch == 0 || cw == 0 {
            return Err(MsnError::Shape(format!(
                "crop {ch}x{cw} at ({y0},{x0}) outside {h}x{w}"
            )));
        }
        let out = kernels::crop(self.value(x).data(), c, h, w, y0, x0, ch, cw);
        let needs = self.needs_grad(x);
        Ok(self.push(
            Tensor::from_vec(&[c, ch, cw], out)?,
            Op::Crop { x, y0, x0 },
            needs,
        ))
    }

    /// Channel concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, h, w) = self.value(parts[0]).chw()?;
        let mut data = Vec::new();
        let mut c = 0;
        for &p in parts {
            let (pc, ph, pw) = self.value(p).chw()?;
            if (ph, pw) != (h, w) {
                return Err(MsnError::Shape(format!(
                    "concat of {ph}x{pw} onto {h}x{w}"
                )));
            }
            data.extend_from_slice(self.value(p).data());
            c += pc;
        }
        let needs = parts.iter().any(|&p| self.needs_grad(p));
        Ok(self.push(
            Tensor::from_vec(&[c, h, w], data)?,
            Op::Concat(parts.to_vec()),
            needs,
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let out = kernels::softmax_channels(self.value(x).data(), c, h * w);
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::from_vec(&[c, h, w], out)?, Op::Softmax(x), needs))
    }

    /// Cross-entropy summed over non-ignored pixels and divided by `normalizer`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: Arc<Vec<u16>>,
        ignore: u16,
        normalizer: T,
    ) -> Result<Var> {
        let (c, h, w) = self.value(logits).chw()?;
        if labels.len() != h * w {
            return Err(MsnError::Shape(format!(
                "{} labels for a {h}x{w} map",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y != ignore && y as usize >= c) {
            return Err(MsnError::LabelOutOfRange {
                label: bad as usize,
                n_classes: c,
            });
        }
        let (sum, probs) = kernels::nll_sum(self.value(logits).data(), c, h * w, &labels, ignore);
        let scale = if normalizer > T::zero() {
            T::one() / normalizer
        } else {
            T::zero()
        };
        let needs = self.needs_grad(logits);
        Ok(self.push(
            Tensor::scalar(sum * scale),
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                scale,
                probs,
            },
            needs,
        ))
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let n_in = self.value(x).len();
        let (n_out, w_in) = match self.value(weight).shape() {
            &[o, i] => (o, i),
            s => return Err(MsnError::Shape(format!("dense weight {:?}", s))),
        };
        if w_in != n_in || self.value(bias).len() != n_out {
            return Err(MsnError::Shape(format!(
                "dense layer {n_out}x{w_in} applied to length {n_in}"
            )));
        }
        let out = kernels::linear(
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            n_out,
        );
        let needs = self.needs_grad(x) || self.needs_grad(weight) || self.needs_grad(bias);
        Ok(self.push(
            Tensor::from_vec(&[n_out], out)?,
            Op::Linear { x, weight, bias },
            needs,
        ))
    }

    /// A contiguous run of the flattened input, reshaped.
    pub fn slice(&mut self, x: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let src = self.value(x).data();
        if offset + n > src.len() {
            return Err(MsnError::Shape(format!(
                "slice {offset}+{n} of length {}",
                src.len()
            )));
        }
        let value = Tensor::from_vec(shape, src[offset..offset + n].to_vec())?;
        let needs = self.needs_grad(x);
        Ok(self.push(value, Op::Slice { x, offset }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(MsnError::Shape("add of mismatched shapes".into()));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let needs = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// The on/off pattern of every ReLU in the tape, in creation order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend(self.value(x).data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let seed = Tensor::full(self.value(output).shape(), T::one());
        self.backward_with(output, seed)
    }

    /// Backpropagates an arbitrary upstream gradient `seed` for `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if self.needs_grad(output) {
            grads[output.0] = Some(seed);
        }
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let shaped =
            |shape: &[usize], data: Vec<T>| Tensor::from_vec(shape, data).expect("gradient shape");
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, kernel, bias } => {
                let xv = self.value(*x);
                let kv = self.value(*kernel);
                let (ci, h, w) = xv.chw().expect("conv input");
                let (co, ks) = (kv.shape()[0], kv.shape()[2]);
                if self.needs_grad(*x) {
                    let dx = kernels::conv2d_grad_input(g.data(), ci, h, w, kv.data(), co, ks);
                    self.accumulate(grads, *x, shaped(xv.shape(), dx));
                }
                let kernel_needs = self.needs_grad(*kernel);
                let bias_needs = bias.is_some_and(|b| self.needs_grad(b));
                if kernel_needs || bias_needs {
                    let (dk, db) =
                        kernels::conv2d_grad_params(g.data(), xv.data(), ci, h, w, co, ks);
                    if kernel_needs {
                        self.accumulate(grads, *kernel, shaped(kv.shape(), dk));
                    }
                    if let Some(b) = bias {
                        self.accumulate(grads, *b, shaped(self.value(*b).shape(), db));
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, shaped(xv.shape(), data));
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = self.value(*x).chw().expect("pool input");
                let dx = kernels::avg_pool2_grad(g.data(), c, h, w);
                self.accumulate(grads, *x, shaped(&[c, h, w], dx));
            }
            Op::Resize { x, rows, cols } => {
                let (c, h, w) = self.value(*x).chw().expect("resize input");
                let dx = kernels::resize_bilinear_grad(g.data(), c, h, w, rows, cols);
                self.accumulate(grads, *x, shaped(&[c, h, w], dx));
            }
            Op::Crop { x, y0, x0 } => {
                let (c, h, w) = self.value(*x).chw().expect("crop input");
                let (_, ch, cw) = node.value.chw().expect("crop output");
                let dx = kernels::crop_grad(g.data(), c, h, w, *y0, *x0, ch, cw);
                self.accumulate(grads, *x, shaped(&[c, h, w], dx));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.needs_grad(p) {
                        let part = g.data()[offset..offset + n].to_vec();
                        self.accumulate(grads, p, shaped(self.value(p).shape(), part));
                    }
                    offset += n;
                }
            }
            Op::Softmax(x) => {
                let (c, h, w) = node.value.chw().expect("softmax output");
                let dx = kernels::softmax_channels_grad(node.value.data(), g.data(), c, h * w);
                self.accumulate(grads, *x, shaped(&[c, h, w], dx));
            }
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                scale,
                probs,
            } => {
                let (c, h, w) = self.value(*logits).chw().expect("logits");
                let plane = h * w;
                let k = g.data()[0] * *scale;
                let mut dx = vec![T::zero(); c * plane];
                for (p, &y) in labels.iter().enumerate() {
                    if y == *ignore {
                        continue;
                    }
                    for ch in 0..c {
                        let i = ch * plane + p;
                        let target = if ch == y as usize { T::one() } else { T::zero() };
                        dx[i] = (probs[i] - target) * k;
                    }
                }
                self.accumulate(grads, *logits, shaped(&[c, h, w], dx));
            }
            Op::Linear { x, weight, bias } => {
                let xv = self.value(*x).data();
                let wv = self.value(*weight);
                let n_in = xv.len();
                let gd = g.data();
                if self.needs_grad(*x) {
                    let mut dx = vec![T::zero(); n_in];
                    for (o, &go) in gd.iter().enumerate() {
                        let row = &wv.data()[o * n_in..(o + 1) * n_in];
                        for (d, &wr) in dx.iter_mut().zip(row) {
                            *d += go * wr;
                        }
                    }
                    self.accumulate(grads, *x, shaped(self.value(*x).shape(), dx));
                }
                if self.needs_grad(*weight) {
                    let mut dw = Vec::with_capacity(gd.len() * n_in);
                    for &go in gd {
                        dw.extend(xv.iter().map(|&xi| go * xi));
                    }
                    self.accumulate(grads, *weight, shaped(wv.shape(), dw));
                }
                self.accumulate(grads, *bias, g.clone());
            }
            Op::Slice { x, offset } => {
                let xv = self.value(*x);
                let mut dx = vec![T::zero(); xv.len()];
                dx[*offset..*offset + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, shaped(xv.shape(), dx));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
        }
    }
}
