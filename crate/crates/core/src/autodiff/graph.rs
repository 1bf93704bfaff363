//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. [`Graph::backward`]
//! walks the tape once in reverse and leaves a gradient on every leaf that
//! was created with `requires_grad`. A graph can be differentiated once;
//! a second call is an error, so gradients are never silently doubled.

use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeom, WindowGeom};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{conv_out_extent, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Abs(Var),
    Clamp { input: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    GlobalAvgPool(Var),
    ChannelScale { input: Var, scale: Var },
    ConcatChannels(Vec<Var>),
    Softmax { input: Var, axis: usize },
    LocalLogits { query: Var, key: Var, geom: WindowGeom },
    LocalAggregate { weights: Var, values: Var, geom: WindowGeom },
    GlobalLogits { query: Var, key: Var },
    GlobalAggregate { weights: Var, values: Var },
    UpsampleNearest { input: Var, factor: usize },
    CrossEntropy { logits: Var, labels: Rc<Vec<usize>> },
    MaskedL1 { pred: Var, target: Rc<Vec<f64>>, mask: Rc<Vec<bool>>, count: usize },
    GradReversal { input: Var, lambda: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Records executed ops so the chain rule can be replayed in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<(u64, ParamId), Var>,
    consumed: bool,
}

impl Graph {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient stored on a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Leaves created with `requires_grad`.
    pub fn leaves(&self) -> impl Iterator<Item = Var> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.tracked)
            .map(|(i, _)| Var(i))
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Adds a leaf; it is differentiated iff `tensor.requires_grad`.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        let tracked = tensor.requires_grad;
        tensor.grad = None;
        self.push(tensor, Op::Leaf, tracked)
    }

    /// Adds a constant (never differentiated).
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        tensor.grad = None;
        self.push(tensor, Op::Leaf, false)
    }

    /// Binds a stored parameter as a leaf. Binding the same parameter twice
    /// returns the same node, so shared weights are shared structurally.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.store_id(), id);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let t = store.get(id).clone().with_requires_grad();
        let v = self.leaf(t);
        self.bound.insert(key, v);
        v
    }

    /// The node a parameter was bound to, if any.
    pub fn bound_param(&self, store: &ParamStore, id: ParamId) -> Option<Var> {
        self.bound_param_key(store.store_id(), id)
    }

    pub(crate) fn bound_param_key(&self, store_id: u64, id: ParamId) -> Option<Var> {
        self.bound.get(&(store_id, id)).copied()
    }

    /// Copies the current value of `v` into a new untracked leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn map_unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(src.shape(), data).expect("same shape");
        let tracked = self.tracked(a);
        self.push(t, op, tracked)
    }

    fn zip_binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64, what: &str) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor::new(x.shape(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, Op::Add(a, b), |p, q| p + q, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, Op::Sub(a, b), |p, q| p - q, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, Op::Mul(a, b), |p, q| p * q, "mul")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map_unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.map_unary(a, Op::AddScalar(a), |x| x + k)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Numerical("ln of a non-positive value".into()));
        }
        Ok(self.map_unary(a, Op::Ln(a), f64::ln))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Abs(a), f64::abs)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map_unary(a, Op::Clamp { input: a, lo, hi }, |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / t.numel() as f64;
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(m), Op::Mean(a), tracked)
    }

    /// Forward identity; the backward pass multiplies the gradient by `-lambda`.
    pub fn gradient_reversal(&mut self, a: Var, lambda: f64) -> Var {
        let mut t = self.value(a).clone();
        let tracked = self.tracked(a);
        t.grad = None;
        t.requires_grad = false;
        self.push(t, Op::GradReversal { input: a, lambda }, tracked)
    }

    /// Cross-correlation of `input` `[B, Cin, H, W]` with `weight`
    /// `[Cout, Cin, kh, kw]` plus optional `bias` `[Cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (b, ci, h, w) = self.value(input).dims4()?;
        let (co, wci, kh, kw) = self.value(weight).dims4()?;
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        if wci != ci {
            return Err(Error::Shape(format!(
                "conv2d in_channels: input has {ci} channels but kernel expects {wci}"
            )));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [co] {
                return Err(Error::Shape(format!(
                    "conv2d bias: expected [{co}], got {:?}",
                    self.shape(bv)
                )));
            }
        }
        let ho = conv_out_extent(h, kh, stride, padding, "conv2d height")?;
        let wo = conv_out_extent(w, kw, stride, padding, "conv2d width")?;
        let geom = ConvGeom {
            batch: b,
            in_channels: ci,
            out_channels: co,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            padding,
            out_height: ho,
            out_width: wo,
        };
        let data = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|bv| self.value(bv).data()),
            &geom,
        );
        let tracked = self.tracked(input) || self.tracked(weight) || bias.is_some_and(|bv| self.tracked(bv));
        let t = Tensor::new(&[b, co, ho, wo], data)?;
        Ok(self.push(t, Op::Conv2d { input, weight, bias, geom }, tracked))
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(a).dims4()?;
        if h == 0 || w == 0 {
            return Err(Error::Shape("global_avg_pool: empty spatial extent".into()));
        }
        let hw = h * w;
        let src = self.value(a).data();
        let data = (0..b * c)
            .map(|i| src[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let t = Tensor::new(&[b, c, 1, 1], data)?;
        let tracked = self.tracked(a);
        Ok(self.push(t, Op::GlobalAvgPool(a), tracked))
    }

    /// `input[b, c, y, x] * scale[b, c, 0, 0]`.
    pub fn channel_scale(&mut self, input: Var, scale: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if self.shape(scale) != [b, c, 1, 1] {
            return Err(Error::Shape(format!(
                "channel_scale: scale must be [{b}, {c}, 1, 1], got {:?}",
                self.shape(scale)
            )));
        }
        let hw = h * w;
        let (x, s) = (self.value(input).data(), self.value(scale).data());
        let data = x.iter().enumerate().map(|(i, v)| v * s[i / hw]).collect();
        let t = Tensor::new(&[b, c, h, w], data)?;
        let tracked = self.tracked(input) || self.tracked(scale);
        Ok(self.push(t, Op::ChannelScale { input, scale }, tracked))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat_channels: no inputs".into()))?;
        let (b, _, h, w) = self.value(first).dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let (pb, pc, ph, pw) = self.value(p).dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(Error::Shape(format!(
                    "concat_channels: shape {:?} incompatible with {:?}",
                    self.shape(p),
                    self.shape(first)
                )));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(b * total_c * hw);
        for bi in 0..b {
            for &p in parts {
                let pc = self.shape(p)[1];
                data.extend_from_slice(&self.value(p).data()[bi * pc * hw..(bi + 1) * pc * hw]);
            }
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        let t = Tensor::new(&[b, total_c, h, w], data)?;
        Ok(self.push(t, Op::ConcatChannels(parts.to_vec()), tracked))
    }

    /// Softmax along `axis`. Entries where `mask` is false are excluded and
    /// come out as exactly zero.
    pub fn softmax(&mut self, a: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        if let Some(m) = mask {
            if m.len() != self.value(a).numel() {
                return Err(Error::Shape("softmax mask length differs from input".into()));
            }
        }
        let y = kernels::softmax_forward(self.value(a).data(), &shape, axis, mask)
            .ok_or_else(|| Error::Numerical("softmax over a fully masked slice".into()))?;
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::new(&shape, y)?, Op::Softmax { input: a, axis }, tracked))
    }

    fn window_geom(&self, a: Var, b: Var, window: usize, what: &str) -> Result<WindowGeom> {
        self.same_shape(a, b, what)?;
        let (batch, channels, height, width) = self.value(a).dims4()?;
        if window == 0 || window % 2 == 0 {
            return Err(Error::Config(format!("{what}: window must be odd and positive, got {window}")));
        }
        Ok(WindowGeom { batch, channels, height, width, window })
    }

    /// Inner products between each query pixel and the `window × window`
    /// neighbourhood around the same position in `key`. Output
    /// `[B, window², H, W]`; out-of-bounds slots hold 0.
    pub fn local_logits(&mut self, query: Var, key: Var, window: usize) -> Result<Var> {
        let geom = self.window_geom(query, key, window, "local_logits")?;
        let data = kernels::local_logits_forward(self.value(query).data(), self.value(key).data(), &geom);
        let t = Tensor::new(&[geom.batch, geom.positions(), geom.height, geom.width], data)?;
        let tracked = self.tracked(query) || self.tracked(key);
        Ok(self.push(t, Op::LocalLogits { query, key, geom }, tracked))
    }

    /// Weighted sum of `values` over the window using `weights`
    /// `[B, window², H, W]`.
    pub fn local_aggregate(&mut self, weights: Var, values: Var, window: usize) -> Result<Var> {
        let (batch, channels, height, width) = self.value(values).dims4()?;
        if window == 0 || window % 2 == 0 {
            return Err(Error::Config(format!("local_aggregate: window must be odd, got {window}")));
        }
        let geom = WindowGeom { batch, channels, height, width, window };
        if self.shape(weights) != [batch, geom.positions(), height, width] {
            return Err(Error::Shape(format!(
                "local_aggregate: weights {:?} do not match values {:?} with window {window}",
                self.shape(weights),
                self.shape(values)
            )));
        }
        let data = kernels::local_aggregate_forward(self.value(weights).data(), self.value(values).data(), &geom);
        let t = Tensor::new(&[batch, channels, height, width], data)?;
        let tracked = self.tracked(weights) || self.tracked(values);
        Ok(self.push(t, Op::LocalAggregate { weights, values, geom }, tracked))
    }

    /// Dense similarities between every query pixel and every key pixel,
    /// shape `[B, H*W, H, W]`.
    pub fn global_logits(&mut self, query: Var, key: Var) -> Result<Var> {
        self.same_shape(query, key, "global_logits")?;
        let (b, c, h, w) = self.value(query).dims4()?;
        let data = kernels::global_logits_forward(self.value(query).data(), self.value(key).data(), b, c, h * w);
        let t = Tensor::new(&[b, h * w, h, w], data)?;
        let tracked = self.tracked(query) || self.tracked(key);
        Ok(self.push(t, Op::GlobalLogits { query, key }, tracked))
    }

    pub fn global_aggregate(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(values).dims4()?;
        if self.shape(weights) != [b, h * w, h, w] {
            return Err(Error::Shape(format!(
                "global_aggregate: weights {:?} do not match values {:?}",
                self.shape(weights),
                self.shape(values)
            )));
        }
        let data = kernels::global_aggregate_forward(self.value(weights).data(), self.value(values).data(), b, c, h * w);
        let t = Tensor::new(&[b, c, h, w], data)?;
        let tracked = self.tracked(weights) || self.tracked(values);
        Ok(self.push(t, Op::GlobalAggregate { weights, values }, tracked))
    }

    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(a).dims4()?;
        if factor == 0 {
            return Err(Error::Config("upsample factor must be positive".into()));
        }
        if factor == 1 {
            return Ok(a);
        }
        let (ho, wo) = (h * factor, w * factor);
        let src = self.value(a).data();
        let mut data = vec![0.0; b * c * ho * wo];
        for p in 0..b * c {
            for y in 0..ho {
                for x in 0..wo {
                    data[(p * ho + y) * wo + x] = src[(p * h + y / factor) * w + x / factor];
                }
            }
        }
        let t = Tensor::new(&[b, c, ho, wo], data)?;
        let tracked = self.tracked(a);
        Ok(self.push(t, Op::UpsampleNearest { input: a, factor }, tracked))
    }

    /// Mean per-pixel cross-entropy of `logits` `[B, K, H, W]` against class
    /// indices laid out `[B, H, W]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k, h, w) = self.value(logits).dims4()?;
        let hw = h * w;
        if labels.len() != b * hw {
            return Err(Error::Shape(format!(
                "cross_entropy: {} labels for {} pixels",
                labels.len(),
                b * hw
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label(format!("label {bad} is not below num_classes {k}")));
        }
        let x = self.value(logits).data();
        let mut total = 0.0;
        for bi in 0..b {
            for p in 0..hw {
                let at = |c: usize| x[(bi * k + c) * hw + p];
                let max = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..k).map(|c| (at(c) - max).exp()).sum::<f64>().ln();
                total += lse - at(labels[bi * hw + p]);
            }
        }
        let loss = total / (b * hw) as f64;
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: Rc::new(labels.to_vec()) },
            tracked,
        ))
    }

    /// Mean `|pred - target|` over pixels where `mask` is true.
    pub fn masked_l1(&mut self, pred: Var, target: &[f64], mask: &[bool]) -> Result<Var> {
        let n = self.value(pred).numel();
        if target.len() != n || mask.len() != n {
            return Err(Error::Shape(format!(
                "masked_l1: prediction has {n} values, target {} and mask {}",
                target.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Label("masked_l1: depth mask is empty".into()));
        }
        let p = self.value(pred).data();
        let total: f64 = (0..n).filter(|&i| mask[i]).map(|i| (p[i] - target[i]).abs()).sum();
        let tracked = self.tracked(pred);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::MaskedL1 { pred, target: Rc::new(target.to_vec()), mask: Rc::new(mask.to_vec()), count },
            tracked,
        ))
    }

    /// Differentiates the scalar `root` (seed 1) and stores gradients on
    /// every tracked leaf. Leaves unreachable from `root` get zero gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.backward_with_seed(root, 1.0)
    }

    pub fn backward_with_seed(&mut self, root: Var, seed: f64) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph("backward already ran on this graph".into()));
        }
        if !self.value(root).is_scalar() {
            return Err(Error::Graph(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![seed]);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        let n = self.nodes.len();
        for node in self.nodes[..n].iter_mut() {
            if matches!(node.op, Op::Leaf) && node.tracked && node.value.grad.is_none() {
                node.value.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, d: Vec<f64>| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(d),
            }
        };
        let out = self.nodes[idx].value.data();
        match &self.nodes[idx].op {
            Op::Leaf => unreachable!(),
            Op::Conv2d { input, weight, bias, geom } => {
                let need_dx = self.tracked(*input);
                let need_dw = self.tracked(*weight);
                let need_db = bias.is_some_and(|b| self.tracked(b));
                let (dx, dw, db) = kernels::conv2d_backward(val(*input), val(*weight), g, geom, need_dx, need_dw, need_db);
                if let Some(dx) = dx {
                    send(*input, dx);
                }
                if let Some(dw) = dw {
                    send(*weight, dw);
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                send(*a, g.iter().zip(y).map(|(d, y)| d * y).collect());
                send(*b, g.iter().zip(x).map(|(d, x)| d * x).collect());
            }
            Op::Scale(a, k) => send(*a, g.iter().map(|d| d * k).collect()),
            Op::AddScalar(a) => send(*a, g.to_vec()),
            Op::Relu(a) => send(
                *a,
                g.iter().zip(val(*a)).map(|(d, &x)| if x > 0.0 { *d } else { 0.0 }).collect(),
            ),
            Op::Sigmoid(a) => send(*a, g.iter().zip(out).map(|(d, s)| d * s * (1.0 - s)).collect()),
            Op::Ln(a) => send(*a, g.iter().zip(val(*a)).map(|(d, x)| d / x).collect()),
            Op::Abs(a) => send(*a, g.iter().zip(val(*a)).map(|(d, x)| d * sign(*x)).collect()),
            Op::Clamp { input, lo, hi } => send(
                *input,
                g.iter()
                    .zip(val(*input))
                    .map(|(d, &x)| if x >= *lo && x <= *hi { *d } else { 0.0 })
                    .collect(),
            ),
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::GlobalAvgPool(a) => {
                let shape = self.nodes[a.0].value.shape();
                let hw = shape[2] * shape[3];
                let n = val(*a).len();
                send(*a, (0..n).map(|i| g[i / hw] / hw as f64).collect());
            }
            Op::ChannelScale { input, scale } => {
                let shape = self.nodes[input.0].value.shape();
                let hw = shape[2] * shape[3];
                let (x, s) = (val(*input), val(*scale));
                if self.tracked(*input) {
                    send(*input, g.iter().enumerate().map(|(i, d)| d * s[i / hw]).collect());
                }
                if self.tracked(*scale) {
                    let mut ds = vec![0.0; s.len()];
                    for (i, d) in g.iter().enumerate() {
                        ds[i / hw] += d * x[i];
                    }
                    send(*scale, ds);
                }
            }
            Op::ConcatChannels(parts) => {
                let shape = self.nodes[idx].value.shape();
                let (b, total_c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p.0].value.shape()[1];
                    if self.tracked(p) {
                        let mut d = Vec::with_capacity(b * pc * hw);
                        for bi in 0..b {
                            let start = (bi * total_c + offset) * hw;
                            d.extend_from_slice(&g[start..start + pc * hw]);
                        }
                        send(p, d);
                    }
                    offset += pc;
                }
            }
            Op::Softmax { input, axis } => {
                let shape = self.nodes[input.0].value.shape();
                send(*input, kernels::softmax_backward(out, g, shape, *axis));
            }
            Op::LocalLogits { query, key, geom } => {
                let (dq, dk) = kernels::local_logits_backward(val(*query), val(*key), g, geom);
                send(*query, dq);
                send(*key, dk);
            }
            Op::LocalAggregate { weights, values, geom } => {
                let (dw, dv) = kernels::local_aggregate_backward(val(*weights), val(*values), g, geom);
                send(*weights, dw);
                send(*values, dv);
            }
            Op::GlobalLogits { query, key } => {
                let s = self.nodes[query.0].value.shape();
                let (dq, dk) = kernels::global_logits_backward(val(*query), val(*key), g, s[0], s[1], s[2] * s[3]);
                send(*query, dq);
                send(*key, dk);
            }
            Op::GlobalAggregate { weights, values } => {
                let s = self.nodes[values.0].value.shape();
                let (dw, dv) = kernels::global_aggregate_backward(val(*weights), val(*values), g, s[0], s[1], s[2] * s[3]);
                send(*weights, dw);
                send(*values, dv);
            }
            Op::UpsampleNearest { input, factor } => {
                let s = self.nodes[input.0].value.shape();
                let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (ho, wo) = (h * factor, w * factor);
                let mut d = vec![0.0; bc * h * w];
                for p in 0..bc {
                    for y in 0..ho {
                        for x in 0..wo {
                            d[(p * h + y / factor) * w + x / factor] += g[(p * ho + y) * wo + x];
                        }
                    }
                }
                send(*input, d);
            }
            Op::CrossEntropy { logits, labels } => {
                let s = self.nodes[logits.0].value.shape();
                let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
                let x = val(*logits);
                let scale = g[0] / (b * hw) as f64;
                let mut d = vec![0.0; x.len()];
                for bi in 0..b {
                    for p in 0..hw {
                        let at = |c: usize| x[(bi * k + c) * hw + p];
                        let max = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = (0..k).map(|c| (at(c) - max).exp()).sum();
                        for c in 0..k {
                            let prob = (at(c) - max).exp() / z;
                            let target = if labels[bi * hw + p] == c { 1.0 } else { 0.0 };
                            d[(bi * k + c) * hw + p] = scale * (prob - target);
                        }
                    }
                }
                send(*logits, d);
            }
            Op::MaskedL1 { pred, target, mask, count } => {
                let p = val(*pred);
                let scale = g[0] / *count as f64;
                send(
                    *pred,
                    (0..p.len())
                        .map(|i| if mask[i] { scale * sign(p[i] - target[i]) } else { 0.0 })
                        .collect(),
                );
            }
            Op::GradReversal { input, lambda } => send(*input, g.iter().map(|d| -lambda * d).collect()),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
