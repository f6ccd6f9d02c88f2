//! Recording reverse-mode autodiff over dense `f64` tensors.
//!
//! Every operation appends a node holding its output value and enough
//! saved state for the backward pass. Nodes are created in topological
//! order by construction, so `backward` is a single reverse sweep with
//! gradient accumulation (summation) at fan-out points.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::conv::{self, Pad};
use crate::kernels::{dense, pool, resize};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf { name: Option<String> },
    Conv2d { x: Var, w: Var, b: Var, geom: conv::ConvGeom },
    ConvT2d { x: Var, w: Var, b: Var, geom: conv::ConvTGeom },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    GlobalAvgPool { x: Var },
    Bilinear { x: Var },
    ReplicatePad1 { x: Var },
    Dense { x: Var, w: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    AddScaled { a: Var, b: Var, w: f64 },
    Concat { parts: Vec<Var> },
    LeakyRelu { x: Var, slope: f64 },
    Relu { x: Var },
    Sigmoid { x: Var },
    Ln { x: Var },
    Clamp { x: Var, lo: f64, hi: f64 },
    OneMinus { x: Var },
    AddConst { x: Var },
    MulConst { x: Var, c: f64 },
    ScaleChannels { x: Var, s: Var },
    MulSpatial1 { x: Var, m: Var },
    Hypot { a: Var, b: Var },
    Dropout { x: Var, mask: Option<Vec<f64>> },
    SumAll { x: Var },
    MeanAll { x: Var },
    SumPerImage { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed per tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of named parameter leaves, summed per name.
    pub fn param_map(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (i, node) in tape.nodes.iter().enumerate() {
            if let Op::Leaf { name: Some(name) } = &node.op {
                if let Some(g) = &self.grads[i] {
                    out.entry(name.clone())
                        .and_modify(|acc| {
                            for (a, b) in acc.data.iter_mut().zip(&g.data) {
                                *a += b;
                            }
                        })
                        .or_insert_with(|| g.clone());
                }
            }
        }
        out
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), dropout_rng: None }
    }

    /// Attaches the RNG stream used by training-mode dropout.
    pub fn set_dropout_rng(&mut self, rng: ChaCha8Rng) {
        self.dropout_rng = Some(rng);
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

    /// Names of every parameter leaf recorded on the tape.
    pub fn param_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Leaf { name: Some(name) } => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that does not receive a gradient (inputs, targets, fixed kernels).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { name: None }, false)
    }

    /// Unnamed differentiable leaf, used by tests and gradient checks.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { name: None }, true)
    }

    /// Differentiable leaf bound to a parameter-store entry.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store.get(name)?;
        Ok(self.push(t.clone(), Op::Leaf { name: Some(name.to_string()) }, true))
    }

    // ---- structural ops -------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: Pad) -> Result<Var> {
        let geom = conv::conv2d_geom(&self.value(x).shape, &self.value(w).shape, stride, pad)?;
        let bias = self.value(b);
        if bias.shape != vec![geom.cout] {
            return Err(Error::shape(format!(
                "conv2d bias shape {:?} does not match {} output channels",
                bias.shape, geom.cout
            )));
        }
        let out = conv::conv2d_forward(self.value(x), self.value(w), self.value(b), &geom);
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let geom =
            conv::conv_transpose2d_geom(&self.value(x).shape, &self.value(w).shape, stride)?;
        let bias = self.value(b);
        if bias.shape != vec![geom.cout] {
            return Err(Error::shape(format!(
                "conv_transpose2d bias shape {:?} does not match {} output channels",
                bias.shape, geom.cout
            )));
        }
        let out =
            conv::conv_transpose2d_forward(self.value(x), self.value(w), self.value(b), &geom);
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::ConvT2d { x, w, b, geom }, rg))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = pool::maxpool2_forward(self.value(x))?;
        let rg = self.needs(x);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = pool::global_avg_pool_forward(self.value(x))?;
        let rg = self.needs(x);
        Ok(self.push(out, Op::GlobalAvgPool { x }, rg))
    }

    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = resize::bilinear_forward(self.value(x), out_h, out_w)?;
        let rg = self.needs(x);
        Ok(self.push(out, Op::Bilinear { x }, rg))
    }

    pub fn replicate_pad1(&mut self, x: Var) -> Result<Var> {
        let out = resize::replicate_pad1_forward(self.value(x))?;
        let rg = self.needs(x);
        Ok(self.push(out, Op::ReplicatePad1 { x }, rg))
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let bias = self.value(b);
        if bias.shape != vec![self.value(w).shape[0]] {
            return Err(Error::shape(format!(
                "dense bias shape {:?} does not match weight {:?}",
                bias.shape,
                self.value(w).shape
            )));
        }
        let out = dense::dense_forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Dense { x, w, b }, rg))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_channels(&tensors)?;
        let rg = parts.iter().any(|&v| self.needs(v));
        Ok(self.push(out, Op::Concat { parts: parts.to_vec() }, rg))
    }

    // ---- elementwise ops -------------------------------------------------

    fn check_same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::shape(format!(
                "{} shape mismatch: {:?} vs {:?}",
                op,
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op_name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce() -> Op,
    ) -> Result<Var> {
        self.check_same_shape(a, b, op_name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor { shape: ta.shape.clone(), data };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, op(), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, || Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, || Op::Sub { a, b })
    }

    /// Hadamard (elementwise) product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "hadamard", |x, y| x * y, || Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, || Op::Div { a, b })
    }

    /// `a + w * b`. At `w == 0` the output is a bitwise copy of `a`, which
    /// is what makes the residual blocks exact identities at zero scaling.
    pub fn add_scaled(&mut self, a: Var, b: Var, w: f64) -> Result<Var> {
        self.check_same_shape(a, b, "add_scaled")?;
        let out = if w == 0.0 {
            self.value(a).clone()
        } else {
            let (ta, tb) = (self.value(a), self.value(b));
            let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x + w * y).collect();
            Tensor { shape: ta.shape.clone(), data }
        };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::AddScaled { a, b, w }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: impl FnOnce() -> Op) -> Var {
        let tx = self.value(x);
        let data = tx.data.iter().map(|&v| f(v)).collect();
        let out = Tensor { shape: tx.shape.clone(), data };
        let rg = self.needs(x);
        self.push(out, op(), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v >= 0.0 { v } else { slope * v }, || Op::LeakyRelu { x, slope })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, || Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), || Op::Sigmoid { x })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, || Op::Ln { x })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), || Op::Clamp { x, lo, hi })
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 - v, || Op::OneMinus { x })
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, || Op::AddConst { x })
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, || Op::MulConst { x, c })
    }

    /// `sqrt(a^2 + b^2)` with subgradient 0 at the origin.
    pub fn hypot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "hypot", f64::hypot, || Op::Hypot { a, b })
    }

    /// Per-channel scaling: `x[n,c,h,w] * s[n,c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(s).shape != vec![n, c] {
            return Err(Error::shape(format!(
                "scale_channels expects scales [{}, {}], got {:?}",
                n,
                c,
                self.value(s).shape
            )));
        }
        let (tx, ts) = (self.value(x), self.value(s));
        let plane = h * w;
        let mut data = Vec::with_capacity(tx.data.len());
        for i in 0..n * c {
            let sv = ts.data[i];
            data.extend(tx.data[i * plane..(i + 1) * plane].iter().map(|&v| v * sv));
        }
        let out = Tensor { shape: vec![n, c, h, w], data };
        let rg = self.needs(x) || self.needs(s);
        Ok(self.push(out, Op::ScaleChannels { x, s }, rg))
    }

    /// Broadcast product of a one-channel map over all channels:
    /// `x[n,c,h,w] * m[n,1,h,w]`.
    pub fn mul_spatial1(&mut self, x: Var, m: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(m).shape != vec![n, 1, h, w] {
            return Err(Error::shape(format!(
                "mul_spatial1 expects map [{}, 1, {}, {}], got {:?}",
                n,
                h,
                w,
                self.value(m).shape
            )));
        }
        let (tx, tm) = (self.value(x), self.value(m));
        let plane = h * w;
        let mut data = Vec::with_capacity(tx.data.len());
        for b in 0..n {
            let m_img = &tm.data[b * plane..][..plane];
            for ch in 0..c {
                let x_img = &tx.data[(b * c + ch) * plane..][..plane];
                data.extend(x_img.iter().zip(m_img).map(|(&xv, &mv)| xv * mv));
            }
        }
        let out = Tensor { shape: vec![n, c, h, w], data };
        let rg = self.needs(x) || self.needs(m);
        Ok(self.push(out, Op::MulSpatial1 { x, m }, rg))
    }

    /// Inverted dropout: in training mode zeroes each element with
    /// probability `p` and scales survivors by `1/(1-p)`; identity in eval.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {} outside [0,1)", p)));
        }
        if !training || p == 0.0 {
            let out = self.value(x).clone();
            let rg = self.needs(x);
            return Ok(self.push(out, Op::Dropout { x, mask: None }, rg));
        }
        let rng = self
            .dropout_rng
            .as_mut()
            .ok_or_else(|| Error::usage("training-mode dropout requires a dropout RNG on the tape"))?;
        let keep = 1.0 - p;
        let inv = 1.0 / keep;
        let mask: Vec<f64> = (0..self.nodes[x.0].value.numel())
            .map(|_| if rng.gen::<f64>() < keep { inv } else { 0.0 })
            .collect();
        let tx = self.value(x);
        let data = tx.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor { shape: tx.shape.clone(), data };
        let rg = self.needs(x);
        Ok(self.push(out, Op::Dropout { x, mask: Some(mask) }, rg))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s = tx.data.iter().sum::<f64>() / tx.numel() as f64;
        let rg = self.needs(x);
        self.push(Tensor::scalar(s), Op::MeanAll { x }, rg)
    }

    /// Per-batch-element sum over all remaining axes: `[N,...] -> [N]`.
    pub fn sum_per_image(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() < 2 {
            return Err(Error::shape(format!(
                "sum_per_image needs a batch axis, got {:?}",
                tx.shape
            )));
        }
        let n = tx.shape[0];
        let per = tx.numel() / n;
        let data = (0..n)
            .map(|i| tx.data[i * per..(i + 1) * per].iter().sum())
            .collect();
        let rg = self.needs(x);
        Ok(self.push(Tensor { shape: vec![n], data }, Op::SumPerImage { x }, rg))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar output. Returns one gradient per
    /// reachable `requires_grad` node; gradients sum at fan-out points.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let g = match &rest[0] {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, g, before);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, i: usize, g: &Tensor, before: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut add_to = |v: Var, contrib: Tensor| {
            if !self.needs(v) {
                return;
            }
            match &mut before[v.0] {
                Some(acc) => {
                    for (a, c) in acc.data.iter_mut().zip(&contrib.data) {
                        *a += c;
                    }
                }
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Conv2d { x, w, b, geom } => {
                if self.needs(*x) {
                    add_to(*x, conv::conv2d_grad_input(g, self.value(*w), geom));
                }
                if self.needs(*w) {
                    add_to(*w, conv::conv2d_grad_weight(g, self.value(*x), geom));
                }
                if self.needs(*b) {
                    add_to(*b, conv::conv2d_grad_bias(g, geom));
                }
            }
            Op::ConvT2d { x, w, b, geom } => {
                if self.needs(*x) {
                    add_to(*x, conv::conv_transpose2d_grad_input(g, self.value(*w), geom));
                }
                if self.needs(*w) {
                    add_to(*w, conv::conv_transpose2d_grad_weight(g, self.value(*x), geom));
                }
                if self.needs(*b) {
                    add_to(*b, conv::conv_transpose2d_grad_bias(g, geom));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                add_to(*x, pool::maxpool2_backward(g, argmax, &self.value(*x).shape));
            }
            Op::GlobalAvgPool { x } => {
                add_to(*x, pool::global_avg_pool_backward(g, &self.value(*x).shape));
            }
            Op::Bilinear { x } => {
                add_to(*x, resize::bilinear_backward(g, &self.value(*x).shape));
            }
            Op::ReplicatePad1 { x } => {
                add_to(*x, resize::replicate_pad1_backward(g, &self.value(*x).shape));
            }
            Op::Dense { x, w, b } => {
                if self.needs(*x) {
                    add_to(*x, dense::dense_grad_input(g, self.value(*w)));
                }
                if self.needs(*w) {
                    add_to(*w, dense::dense_grad_weight(g, self.value(*x)));
                }
                if self.needs(*b) {
                    add_to(*b, dense::dense_grad_bias(g));
                }
            }
            Op::Add { a, b } => {
                add_to(*a, g.clone());
                add_to(*b, g.clone());
            }
            Op::Sub { a, b } => {
                add_to(*a, g.clone());
                add_to(*b, self.map_like(g, |v| -v));
            }
            Op::Mul { a, b } => {
                add_to(*a, self.zip_like(g, self.value(*b), |gv, bv| gv * bv));
                add_to(*b, self.zip_like(g, self.value(*a), |gv, av| gv * av));
            }
            Op::Div { a, b } => {
                let tb = self.value(*b);
                add_to(*a, self.zip_like(g, tb, |gv, bv| gv / bv));
                let ta = self.value(*a);
                let data = g
                    .data
                    .iter()
                    .zip(&ta.data)
                    .zip(&tb.data)
                    .map(|((&gv, &av), &bv)| -gv * av / (bv * bv))
                    .collect();
                add_to(*b, Tensor { shape: g.shape.clone(), data });
            }
            Op::AddScaled { a, b, w } => {
                add_to(*a, g.clone());
                add_to(*b, self.map_like(g, |v| v * w));
            }
            Op::Concat { parts } => {
                let sizes: Vec<usize> = parts.iter().map(|&p| self.value(p).shape[1]).collect();
                let slices = g.split_channels(&sizes).expect("concat backward split");
                for (part, gs) in parts.iter().zip(slices) {
                    add_to(*part, gs);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let tx = self.value(*x);
                add_to(*x, self.zip_like(g, tx, |gv, xv| if xv >= 0.0 { gv } else { gv * slope }));
            }
            Op::Relu { x } => {
                let tx = self.value(*x);
                add_to(*x, self.zip_like(g, tx, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::Sigmoid { x } => {
                let ty = &node.value;
                add_to(*x, self.zip_like(g, ty, |gv, yv| gv * yv * (1.0 - yv)));
            }
            Op::Ln { x } => {
                let tx = self.value(*x);
                add_to(*x, self.zip_like(g, tx, |gv, xv| gv / xv));
            }
            Op::Clamp { x, lo, hi } => {
                let tx = self.value(*x);
                add_to(*x, self.zip_like(g, tx, |gv, xv| if xv >= *lo && xv <= *hi { gv } else { 0.0 }));
            }
            Op::OneMinus { x } => {
                add_to(*x, self.map_like(g, |v| -v));
            }
            Op::AddConst { x } => {
                add_to(*x, g.clone());
            }
            Op::MulConst { x, c } => {
                add_to(*x, self.map_like(g, |v| v * c));
            }
            Op::ScaleChannels { x, s } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("scale_channels shape");
                let plane = h * w;
                if self.needs(*x) {
                    let ts = self.value(*s);
                    let mut data = Vec::with_capacity(g.data.len());
                    for i in 0..n * c {
                        let sv = ts.data[i];
                        data.extend(g.data[i * plane..(i + 1) * plane].iter().map(|&v| v * sv));
                    }
                    add_to(*x, Tensor { shape: vec![n, c, h, w], data });
                }
                if self.needs(*s) {
                    let tx = self.value(*x);
                    let mut gs = Tensor::zeros(vec![n, c]);
                    for i in 0..n * c {
                        gs.data[i] = g.data[i * plane..(i + 1) * plane]
                            .iter()
                            .zip(&tx.data[i * plane..(i + 1) * plane])
                            .map(|(&gv, &xv)| gv * xv)
                            .sum();
                    }
                    add_to(*s, gs);
                }
            }
            Op::MulSpatial1 { x, m } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("mul_spatial1 shape");
                let plane = h * w;
                if self.needs(*x) {
                    let tm = self.value(*m);
                    let mut data = Vec::with_capacity(g.data.len());
                    for b in 0..n {
                        let m_img = &tm.data[b * plane..][..plane];
                        for ch in 0..c {
                            let g_img = &g.data[(b * c + ch) * plane..][..plane];
                            data.extend(g_img.iter().zip(m_img).map(|(&gv, &mv)| gv * mv));
                        }
                    }
                    add_to(*x, Tensor { shape: vec![n, c, h, w], data });
                }
                if self.needs(*m) {
                    let tx = self.value(*x);
                    let mut gm = Tensor::zeros(vec![n, 1, h, w]);
                    for b in 0..n {
                        let gm_img = &mut gm.data[b * plane..][..plane];
                        for ch in 0..c {
                            let g_img = &g.data[(b * c + ch) * plane..][..plane];
                            let x_img = &tx.data[(b * c + ch) * plane..][..plane];
                            for k in 0..plane {
                                gm_img[k] += g_img[k] * x_img[k];
                            }
                        }
                    }
                    add_to(*m, gm);
                }
            }
            Op::Hypot { a, b } => {
                let ty = &node.value;
                let ta = self.value(*a);
                let tb = self.value(*b);
                if self.needs(*a) {
                    let data = g
                        .data
                        .iter()
                        .zip(&ta.data)
                        .zip(&ty.data)
                        .map(|((&gv, &av), &yv)| if yv > 0.0 { gv * av / yv } else { 0.0 })
                        .collect();
                    add_to(*a, Tensor { shape: g.shape.clone(), data });
                }
                if self.needs(*b) {
                    let data = g
                        .data
                        .iter()
                        .zip(&tb.data)
                        .zip(&ty.data)
                        .map(|((&gv, &bv), &yv)| if yv > 0.0 { gv * bv / yv } else { 0.0 })
                        .collect();
                    add_to(*b, Tensor { shape: g.shape.clone(), data });
                }
            }
            Op::Dropout { x, mask } => match mask {
                Some(m) => {
                    let data = g.data.iter().zip(m).map(|(&gv, &mv)| gv * mv).collect();
                    add_to(*x, Tensor { shape: g.shape.clone(), data });
                }
                None => add_to(*x, g.clone()),
            },
            Op::SumAll { x } => {
                let tx = self.value(*x);
                add_to(*x, Tensor::full(tx.shape.clone(), g.data[0]));
            }
            Op::MeanAll { x } => {
                let tx = self.value(*x);
                add_to(*x, Tensor::full(tx.shape.clone(), g.data[0] / tx.numel() as f64));
            }
            Op::SumPerImage { x } => {
                let tx = self.value(*x);
                let n = tx.shape[0];
                let per = tx.numel() / n;
                let mut data = Vec::with_capacity(tx.numel());
                for i in 0..n {
                    data.extend(std::iter::repeat(g.data[i]).take(per));
                }
                add_to(*x, Tensor { shape: tx.shape.clone(), data });
            }
        }
    }

    fn map_like(&self, g: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: g.shape.clone(), data: g.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip_like(&self, g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: g.shape.clone(),
            data: g.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn square_sum_gradient() {
        // loss = sum(w ⊗ w), w = [3] -> grad 6
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new(vec![1], vec![3.0]).unwrap());
        let sq = tape.hadamard(w, w).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data[0], 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        // loss = sigmoid(w), w = 0 -> grad 0.25
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap());
        let s = tape.sigmoid(w);
        let loss = tape.sum_all(s);
        let grads = tape.backward(loss).unwrap();
        assert!((grads.get(w).unwrap().data[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn fanout_gradients_accumulate_by_summation() {
        // loss = sum(x + x) -> grad 2 per element, via two paths
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data, vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.hadamard(x, c).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data[0], 5.0);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn dropout_eval_is_identity_and_training_needs_rng() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.dropout(x, 0.5, false).unwrap();
        assert!(tape.value(y).bit_eq(&Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()));
        assert!(tape.dropout(x, 0.5, true).is_err());
    }
}
