use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::kernels::{self, ConvGeom, DynGeom, PoolGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Arithmetic width used by the matrix-product kernels (matmul, conv).
///
/// Storage is always `f64`; `Single` rounds operands to `f32` for the gemm
/// and widens the result back.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    Double,
    Single,
}

/// Handle to a node recorded on a [`Graph`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Softmax(Var, usize),
    Resize(Var),
    AvgPool(Var, PoolGeom),
    SeparableValid(Var, Vec<f64>),
    DynamicFilter {
        x: Var,
        f: Var,
        geom: DynGeom,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Tape of recorded operations in creation (hence topological) order.
///
/// One graph per forward pass. Parameters enter as leaves with
/// `requires_grad`; after [`Graph::backward`] their gradients are read back
/// with [`Graph::grad`]. A graph can be differentiated once.
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Length of the trailing block `b` is broadcast over, if `b` is a suffix of `a`.
fn broadcast_len(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Ok(b.iter().product())
    } else {
        Err(Error::shape(op, a, b))
    }
}

fn reduce_to(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; shape.len()];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn softmax_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::with_precision(Precision::Double)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
            consumed: false,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Hash of the side of its kink that every ReLU, abs and clamp input
    /// falls on. Two evaluations with equal signatures lie in the same
    /// smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => self.val(*a).iter().for_each(|&x| (x > 0.0).hash(&mut h)),
                Op::Abs(a) => self
                    .val(*a)
                    .iter()
                    .for_each(|&x| (x.partial_cmp(&0.0)).hash(&mut h)),
                Op::Clamp(a, lo, hi) => self
                    .val(*a)
                    .iter()
                    .for_each(|&x| ((x >= *lo) as u8 + (x > *hi) as u8).hash(&mut h)),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let n = &self.nodes[v.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = broadcast_len(name, ta.shape(), tb.shape())?;
        let bd = tb.data();
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(name, value, op, &[a])
    }

    /// `a + b`, where `b` may be broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * s, Op::Scale(a, s))
    }

    /// `a + s` for a constant `s`.
    pub fn shift(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("shift", a, |x| x + s, Op::Shift(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "sigmoid",
            a,
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(a),
        )
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary("ln", a, f64::ln, Op::Ln(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid("clamp", format!("empty range [{lo}, {hi}]")));
        }
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = kernels::compensated_sum(self.value(a).data());
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = kernels::compensated_sum(t.data()) / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut joined = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            joined += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * joined * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = joined;
        let value = Tensor::new(shape, data)?;
        self.push("concat", value, Op::Concat(parts.to_vec(), axis), parts)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::shape("reshape", t.shape(), shape));
        }
        let value = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let mut seen = vec![false; t.rank()];
        let valid = axes.len() == t.rank()
            && axes
                .iter()
                .all(|&x| x < seen.len() && !std::mem::replace(&mut seen[x], true));
        if !valid {
            return Err(Error::invalid(
                "permute",
                format!(
                    "{axes:?} is not a permutation of the axes of {:?}",
                    t.shape()
                ),
            ));
        }
        let (data, shape) = permute_data(t.data(), t.shape(), axes);
        let value = Tensor::new(shape, data)?;
        self.push("permute", value, Op::Permute(a, axes.to_vec()), &[a])
    }

    /// `[M,K]·[K,P]`, or batched `[B,M,K]·[B,K,P]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, p) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, p]) if k == k2 => (1, *m, *k, *p),
            ([b1, m, k], [b2, k2, p]) if k == k2 && b1 == b2 => (*b1, *m, *k, *p),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(batch * m * p);
        for i in 0..batch {
            let ai = &da[i * m * k..(i + 1) * m * k];
            let bi = &db[i * k * p..(i + 1) * k * p];
            data.extend(self.gemm(ai, bi, m, k, p, false, false));
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, p]);
        let value = Tensor::new(shape, data)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    #[allow(clippy::too_many_arguments)]
    fn gemm(
        &self,
        a: &[f64],
        b: &[f64],
        m: usize,
        k: usize,
        n: usize,
        at: bool,
        bt: bool,
    ) -> Vec<f64> {
        match self.precision {
            Precision::Double => kernels::matmul::<f64>(a, b, m, k, n, at, bt),
            Precision::Single => kernels::matmul::<f32>(a, b, m, k, n, at, bt),
        }
    }

    /// Cross-correlation of `x: [Ci,H,W]` with `w: [Co,Ci,K,K]` plus optional bias `[Co]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let ([ci, h, wd], [co, ci2, k, k2]) = (sx.as_slice(), sw.as_slice()) else {
            return Err(Error::shape("conv2d", &sx, &sw));
        };
        if ci != ci2 || k != k2 {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if k % 2 == 0 || stride == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {k} must be odd and stride {stride} positive"),
            ));
        }
        if h + 2 * pad < *k || wd + 2 * pad < *k {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {k} with pad {pad} does not fit a {h}x{wd} input"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [*co] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[*co]));
            }
        }
        let geom = ConvGeom {
            ci: *ci,
            h: *h,
            w: *wd,
            co: *co,
            k: *k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        let bd = b.map(|b| self.value(b).data());
        let data = match self.precision {
            Precision::Double => kernels::conv2d_forward::<f64>(xd, wdata, bd, &geom),
            Precision::Single => kernels::conv2d_forward::<f32>(xd, wdata, bd, &geom),
        };
        let value = Tensor::new(vec![geom.co, geom.ho, geom.wo], data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", value, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for {:?}", t.shape()),
            ));
        }
        let (outer, len, inner) = softmax_dims(t.shape(), axis);
        let x = t.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[at(j)] /= total;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), y)?;
        self.push("softmax", value, Op::Softmax(a, axis), &[a])
    }

    /// Bilinear resize of `[C,H,W]` with half-pixel centers (align-corners = false).
    pub fn resize_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = self.value(a);
        let &[c, h, w] = t.shape() else {
            return Err(Error::invalid(
                "resize_bilinear",
                format!("expected C×H×W, got {:?}", t.shape()),
            ));
        };
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid(
                "resize_bilinear",
                "output extent must be positive",
            ));
        }
        let data = kernels::resize_forward(t.data(), c, h, w, out_h, out_w);
        let value = Tensor::new(vec![c, out_h, out_w], data)?;
        self.push("resize_bilinear", value, Op::Resize(a), &[a])
    }

    /// Average pooling with a fixed `k²` divisor (padding counts as zeros).
    pub fn avgpool(&mut self, a: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let t = self.value(a);
        let &[c, h, w] = t.shape() else {
            return Err(Error::invalid(
                "avgpool",
                format!("expected C×H×W, got {:?}", t.shape()),
            ));
        };
        if k == 0 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::invalid(
                "avgpool",
                format!("window {k}/stride {stride}/pad {pad} on {h}x{w}"),
            ));
        }
        let geom = PoolGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        };
        let data = kernels::avgpool_forward(t.data(), &geom);
        let value = Tensor::new(vec![c, geom.ho, geom.wo], data)?;
        self.push("avgpool", value, Op::AvgPool(a, geom), &[a])
    }

    /// Per-channel separable filtering by `kernel ⊗ kernel`, keeping only
    /// positions where the window lies fully inside the input.
    pub fn separable_filter_valid(&mut self, a: Var, kernel: &[f64]) -> Result<Var> {
        let t = self.value(a);
        let &[c, h, w] = t.shape() else {
            return Err(Error::invalid(
                "separable_filter",
                format!("expected C×H×W, got {:?}", t.shape()),
            ));
        };
        let k = kernel.len();
        if k == 0 || h < k || w < k {
            return Err(Error::invalid(
                "separable_filter",
                format!("window {k} larger than input {h}x{w}"),
            ));
        }
        let data = kernels::separable_valid_forward(t.data(), c, h, w, kernel);
        let value = Tensor::new(vec![c, h + 1 - k, w + 1 - k], data)?;
        self.push(
            "separable_filter",
            value,
            Op::SeparableValid(a, kernel.to_vec()),
            &[a],
        )
    }

    /// Grouped, spatially varying filtering: `x: [C,H,W]`, `f: [G,H,W,K,K]`.
    /// Channel `c` uses the kernels of group `c / (C/G)` at each pixel.
    pub fn dynamic_filter(&mut self, x: Var, f: Var) -> Result<Var> {
        let (sx, sf) = (self.shape(x).to_vec(), self.shape(f).to_vec());
        let ([c, h, w], [g, fh, fw, k, k2]) = (sx.as_slice(), sf.as_slice()) else {
            return Err(Error::shape("dynamic_filter", &sx, &sf));
        };
        if h != fh || w != fw || k != k2 {
            return Err(Error::shape("dynamic_filter", &sx, &sf));
        }
        if *g == 0 || c % g != 0 {
            return Err(Error::invalid(
                "dynamic_filter",
                format!("{c} channels cannot be split into {g} groups"),
            ));
        }
        if k % 2 == 0 {
            return Err(Error::invalid(
                "dynamic_filter",
                format!("kernel size {k} must be odd"),
            ));
        }
        let geom = DynGeom {
            c: *c,
            h: *h,
            w: *w,
            groups: *g,
            k: *k,
        };
        let data =
            kernels::dynamic_filter_forward(self.value(x).data(), self.value(f).data(), &geom);
        let value = Tensor::new(sx.clone(), data)?;
        self.push(
            "dynamic_filter",
            value,
            Op::DynamicFilter { x, f, geom },
            &[x, f],
        )
    }

    /// Reverse sweep from a scalar root.
    ///
    /// Every trainable leaf ends with a gradient; leaves the root does not
    /// depend on receive zeros.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph(
                "graph already consumed by a previous backward".into(),
            ));
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Graph(format!(
                "root must be a scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        self.consumed = true;
        if self.nodes[root.0].requires_grad {
            self.nodes[root.0].grad = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g)?;
            self.nodes[i].grad = Some(g);
            for (v, d) in contributions {
                self.accumulate(v, d);
            }
        }
        for n in &mut self.nodes {
            if n.requires_grad && matches!(n.op, Op::Leaf) && n.grad.is_none() {
                n.grad = Some(vec![0.0; n.value.numel()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, d: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
            None => node.grad = Some(d),
        }
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                if self.wants(*b) {
                    out.push((*b, reduce_to(g, self.val(*b).len())));
                }
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                if self.wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    out.push((*b, reduce_to(&neg, self.val(*b).len())));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let nb = bv.len();
                if self.wants(*a) {
                    out.push((
                        *a,
                        g.iter()
                            .enumerate()
                            .map(|(j, gv)| gv * bv[j % nb])
                            .collect(),
                    ));
                }
                if self.wants(*b) {
                    let prod: Vec<f64> = g.iter().zip(av).map(|(gv, x)| gv * x).collect();
                    out.push((*b, reduce_to(&prod, nb)));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let nb = bv.len();
                if self.wants(*a) {
                    out.push((
                        *a,
                        g.iter()
                            .enumerate()
                            .map(|(j, gv)| gv / bv[j % nb])
                            .collect(),
                    ));
                }
                if self.wants(*b) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(av)
                        .enumerate()
                        .map(|(j, (gv, x))| -gv * x / (bv[j % nb] * bv[j % nb]))
                        .collect();
                    out.push((*b, reduce_to(&d, nb)));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.iter().map(|v| v * s).collect())),
            Op::Shift(a) | Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::Relu(a) => {
                let x = self.val(*a);
                out.push((
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Sigmoid(a) => out.push((
                *a,
                g.iter().zip(y).map(|(gv, s)| gv * s * (1.0 - s)).collect(),
            )),
            Op::Ln(a) => {
                let x = self.val(*a);
                out.push((*a, g.iter().zip(x).map(|(gv, xv)| gv / xv).collect()));
            }
            Op::Abs(a) => {
                let x = self.val(*a);
                out.push((*a, g.iter().zip(x).map(|(gv, &xv)| gv * sign(xv)).collect()));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.val(*a);
                out.push((
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gv, &xv)| if xv >= *lo && xv <= *hi { *gv } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; self.val(*a).len()])),
            Op::Mean(a) => {
                let n = self.val(*a).len();
                out.push((*a, vec![g[0] / n as f64; n]));
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut offset = 0;
                let mut grads: Vec<Vec<f64>> = parts
                    .iter()
                    .map(|p| Vec::with_capacity(self.val(*p).len()))
                    .collect();
                for _ in 0..outer {
                    for (pi, p) in parts.iter().enumerate() {
                        let block = self.shape(*p)[*axis] * inner;
                        grads[pi].extend_from_slice(&g[offset..offset + block]);
                        offset += block;
                    }
                }
                for (p, d) in parts.iter().zip(grads) {
                    if self.wants(*p) {
                        out.push((*p, d));
                    }
                }
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let (d, _) = permute_data(g, node.value.shape(), &inverse);
                out.push((*a, d));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let p = sb[sb.len() - 1];
                let batch = self.val(*a).len() / (m * k);
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    let mut da = Vec::with_capacity(av.len());
                    for i in 0..batch {
                        let gi = &g[i * m * p..(i + 1) * m * p];
                        let bi = &bv[i * k * p..(i + 1) * k * p];
                        da.extend(self.gemm(gi, bi, m, p, k, false, true));
                    }
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = Vec::with_capacity(bv.len());
                    for i in 0..batch {
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let gi = &g[i * m * p..(i + 1) * m * p];
                        db.extend(self.gemm(ai, gi, k, m, p, true, false));
                    }
                    out.push((*b, db));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (need_dx, need_dw) = (self.wants(*x), self.wants(*w));
                let grads = match self.precision {
                    Precision::Double => kernels::conv2d_backward::<f64>(
                        self.val(*x),
                        self.val(*w),
                        g,
                        geom,
                        need_dx,
                        need_dw,
                    ),
                    Precision::Single => kernels::conv2d_backward::<f32>(
                        self.val(*x),
                        self.val(*w),
                        g,
                        geom,
                        need_dx,
                        need_dw,
                    ),
                };
                if let Some(dx) = grads.dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = grads.dw {
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    out.push((*b, grads.db));
                }
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = softmax_dims(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                out.push((*a, dx));
            }
            Op::Resize(a) => {
                let &[c, h, w] = self.shape(*a) else {
                    unreachable!()
                };
                let (oh, ow) = node.value.hw();
                out.push((*a, kernels::resize_backward(g, c, h, w, oh, ow)));
            }
            Op::AvgPool(a, geom) => out.push((*a, kernels::avgpool_backward(g, geom))),
            Op::SeparableValid(a, kernel) => {
                let &[c, h, w] = self.shape(*a) else {
                    unreachable!()
                };
                out.push((*a, kernels::separable_valid_backward(g, c, h, w, kernel)));
            }
            Op::DynamicFilter { x, f, geom } => {
                let (dx, df) =
                    kernels::dynamic_filter_backward(self.val(*x), self.val(*f), g, geom);
                out.push((*x, dx));
                out.push((*f, df));
            }
        }
        out.retain(|(v, _)| self.wants(*v));
        for (_, d) in &out {
            check_finite("backward", d)?;
        }
        Ok(out)
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
