//! Reverse-mode automatic differentiation over a define-by-run tape.
//!
//! Every operation appends a node holding its output value; `backward`
//! walks the nodes in reverse insertion order, which is a valid reverse
//! topological order. Nodes that no trainable leaf feeds into are skipped.

use std::cell::RefCell;
use std::sync::Arc;

use super::conv::{conv_backward, conv_forward, upsample2_backward, upsample2_forward, ConvGeom};
use super::tensor::{Array, Real};

#[derive(Clone)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Exp(usize),
    Silu(usize),
    Sigmoid(usize),
    Relu(usize),
    Clamp(usize, T, T),
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Upsample2(usize),
    Concat(usize, usize),
    ChannelSlice {
        x: usize,
        start: usize,
        len: usize,
    },
    AddChannelBias(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Mean(usize),
    Mse(usize, usize),
    CrossEntropy {
        logits: usize,
        targets: Arc<Vec<u8>>,
    },
    SoftDice {
        logits: usize,
        targets: Arc<Vec<u8>>,
        include_background: bool,
    },
}

struct Node<T> {
    value: Arc<Array<T>>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Smoothing term of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&self, value: Array<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_shared(&self, value: Arc<Array<T>>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that receives a gradient in [`Tape::backward`].
    pub fn leaf(&self, value: Arc<Array<T>>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Arc<Array<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var<'_, T>) -> Grads<T> {
        assert!(std::ptr::eq(loss.tape, self), "loss recorded on another tape");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Array<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Array::full(nodes[loss.id].value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let needs = |i: usize| nodes[i].needs_grad;
            let val = |i: usize| nodes[i].value.as_ref();
            let mut acc = |i: usize, d: Array<T>| match &mut grads[i] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if needs(*a) {
                        acc(*a, g.clone());
                    }
                    if needs(*b) {
                        acc(*b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        acc(*a, g.clone());
                    }
                    if needs(*b) {
                        acc(*b, g.map(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        acc(*a, g.zip_map(val(*b), |x, y| x * y));
                    }
                    if needs(*b) {
                        acc(*b, g.zip_map(val(*a), |x, y| x * y));
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(*a, g.map(|x| x * c));
                }
                Op::AddScalar(a) => acc(*a, g),
                Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y)),
                Op::Silu(a) => {
                    let d = g.zip_map(val(*a), |gx, x| {
                        let s = T::one() / (T::one() + (-x).exp());
                        gx * s * (T::one() + x * (T::one() - s))
                    });
                    acc(*a, d)
                }
                Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |gx, s| gx * s * (T::one() - s))),
                Op::Relu(a) => acc(*a, g.zip_map(val(*a), |gx, x| if x > T::zero() { gx } else { T::zero() })),
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    acc(*a, g.zip_map(val(*a), |gx, x| if x >= lo && x <= hi { gx } else { T::zero() }))
                }
                Op::Conv { x, w, b, geom } => {
                    let cg = conv_backward(val(*x), val(*w), geom, &g, needs(*x));
                    if let Some(dx) = cg.input {
                        acc(*x, dx);
                    }
                    if needs(*w) {
                        acc(*w, cg.weight);
                    }
                    if let Some(b) = b {
                        if needs(*b) {
                            acc(*b, cg.bias);
                        }
                    }
                }
                Op::Upsample2(a) => {
                    let shape = val(*a).shape().to_vec();
                    acc(*a, upsample2_backward(&shape, &g))
                }
                Op::Concat(a, b) => {
                    let (sa, sb) = (val(*a).shape().to_vec(), val(*b).shape().to_vec());
                    let inner: usize = sa[2..].iter().product();
                    let (ca, cb) = (sa[1] * inner, sb[1] * inner);
                    let mut da = Vec::with_capacity(sa[0] * ca);
                    let mut db = Vec::with_capacity(sb[0] * cb);
                    for chunk in g.data().chunks(ca + cb) {
                        da.extend_from_slice(&chunk[..ca]);
                        db.extend_from_slice(&chunk[ca..]);
                    }
                    if needs(*a) {
                        acc(*a, Array::from_vec(&sa, da));
                    }
                    if needs(*b) {
                        acc(*b, Array::from_vec(&sb, db));
                    }
                }
                Op::ChannelSlice { x, start, len } => {
                    let xs = val(*x).shape().to_vec();
                    let inner: usize = xs[2..].iter().product();
                    let mut dx = Array::zeros(&xs);
                    for n in 0..xs[0] {
                        let src = &g.data()[n * len * inner..(n + 1) * len * inner];
                        let off = (n * xs[1] + start) * inner;
                        dx.data_mut()[off..off + len * inner].copy_from_slice(src);
                    }
                    acc(*x, dx)
                }
                Op::AddChannelBias(x, b) => {
                    if needs(*b) {
                        let bs = val(*b).shape().to_vec();
                        let inner = g.len() / (bs[0] * bs[1]);
                        let db: Vec<T> = g.data().chunks(inner).map(|c| c.iter().copied().sum()).collect();
                        acc(*b, Array::from_vec(&bs, db));
                    }
                    if needs(*x) {
                        acc(*x, g);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (n, din, dout) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                    if needs(*x) {
                        let mut dx = Array::zeros(&[n, din]);
                        T::gemm(n, dout, din, T::one(), g.data(), dout as isize, 1, wv.data(), din as isize, 1, T::zero(), dx.data_mut(), din as isize, 1);
                        acc(*x, dx);
                    }
                    if needs(*w) {
                        let mut dw = Array::zeros(&[dout, din]);
                        T::gemm(dout, n, din, T::one(), g.data(), 1, dout as isize, xv.data(), din as isize, 1, T::zero(), dw.data_mut(), din as isize, 1);
                        acc(*w, dw);
                    }
                    if needs(*b) {
                        let mut db = Array::zeros(&[dout]);
                        for row in g.data().chunks(dout) {
                            for (d, &r) in db.data_mut().iter_mut().zip(row) {
                                *d = *d + r;
                            }
                        }
                        acc(*b, db);
                    }
                }
                Op::Mean(a) => {
                    let n = val(*a).len();
                    let v = g.item() / T::of(n as f64);
                    acc(*a, Array::full(val(*a).shape(), v))
                }
                Op::Mse(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let scale = g.item() * T::of(2.0 / av.len() as f64);
                    let d = av.zip_map(bv, |x, y| (x - y) * scale);
                    if needs(*b) {
                        acc(*b, d.map(|x| -x));
                    }
                    if needs(*a) {
                        acc(*a, d);
                    }
                }
                Op::CrossEntropy { logits, targets } => {
                    let lv = val(*logits);
                    let mut d = softmax_channels(lv);
                    let (n, k, s) = nks(lv.shape());
                    let scale = g.item() / T::of((n * s) as f64);
                    for b in 0..n {
                        for v in 0..s {
                            let t = targets[b * s + v] as usize;
                            let i = (b * k + t) * s + v;
                            d.data_mut()[i] = d.data()[i] - T::one();
                        }
                    }
                    acc(*logits, d.map(|x| x * scale))
                }
                Op::SoftDice {
                    logits,
                    targets,
                    include_background,
                } => {
                    let lv = val(*logits);
                    let p = softmax_channels(lv);
                    let (n, k, s) = nks(lv.shape());
                    let first = if *include_background { 0 } else { 1 };
                    let counted = (k - first) as f64;
                    let eps = T::of(DICE_SMOOTH);
                    let mut dp = Array::zeros(lv.shape());
                    for b in 0..n {
                        for c in first..k {
                            let (inter, psum, gsum) = dice_sums(&p, targets, b, c, k, s);
                            let den = psum + gsum + eps;
                            let num = T::of(2.0) * inter + eps;
                            let coef = -g.item() / T::of(n as f64 * counted);
                            for v in 0..s {
                                let gt = if targets[b * s + v] as usize == c { T::one() } else { T::zero() };
                                let dd = (T::of(2.0) * gt * den - num) / (den * den);
                                dp.data_mut()[(b * k + c) * s + v] = coef * dd;
                            }
                        }
                    }
                    acc(*logits, softmax_backward(&p, &dp))
                }
            }
        }
        Grads { grads }
    }
}

/// `(batch, channels, voxels)` view of a `[n, c, ...]` shape.
fn nks(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

/// Softmax over axis 1 of a `[n, c, ...]` array.
pub fn softmax_channels<T: Real>(x: &Array<T>) -> Array<T> {
    let (n, k, s) = nks(x.shape());
    let mut out = Array::zeros(x.shape());
    let src = x.data();
    let dst = out.data_mut();
    for b in 0..n {
        for v in 0..s {
            let at = |c: usize| (b * k + c) * s + v;
            let mut m = src[at(0)];
            for c in 1..k {
                m = m.max(src[at(c)]);
            }
            let mut z = T::zero();
            for c in 0..k {
                let e = (src[at(c)] - m).exp();
                dst[at(c)] = e;
                z = z + e;
            }
            for c in 0..k {
                dst[at(c)] = dst[at(c)] / z;
            }
        }
    }
    out
}

fn softmax_backward<T: Real>(p: &Array<T>, dp: &Array<T>) -> Array<T> {
    let (n, k, s) = nks(p.shape());
    let mut dz = Array::zeros(p.shape());
    for b in 0..n {
        for v in 0..s {
            let at = |c: usize| (b * k + c) * s + v;
            let dot: T = (0..k).map(|c| p.data()[at(c)] * dp.data()[at(c)]).sum();
            for c in 0..k {
                dz.data_mut()[at(c)] = p.data()[at(c)] * (dp.data()[at(c)] - dot);
            }
        }
    }
    dz
}

fn dice_sums<T: Real>(p: &Array<T>, targets: &[u8], b: usize, c: usize, k: usize, s: usize) -> (T, T, T) {
    let row = &p.data()[(b * k + c) * s..(b * k + c + 1) * s];
    let tg = &targets[b * s..(b + 1) * s];
    let mut inter = T::zero();
    let mut psum = T::zero();
    let mut gsum = T::zero();
    for (&pv, &t) in row.iter().zip(tg) {
        psum = psum + pv;
        if t as usize == c {
            inter = inter + pv;
            gsum = gsum + T::one();
        }
    }
    (inter, psum, gsum)
}

pub struct Grads<T> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Array<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Array<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> Arc<Array<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    fn unary(self, value: Array<T>, op: Op<T>) -> Self {
        let needs = self.tape.needs(self.id);
        self.tape.push(value, op, needs)
    }

    fn binary(self, other: Self, value: Array<T>, op: Op<T>) -> Self {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        let needs = self.tape.needs(self.id) || self.tape.needs(other.id);
        self.tape.push(value, op, needs)
    }

    pub fn add(self, other: Self) -> Self {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Self) -> Self {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Self) -> Self {
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: T) -> Self {
        let v = self.value().map(|a| a * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: T) -> Self {
        let v = self.value().map(|a| a + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn exp(self) -> Self {
        let v = self.value().map(|a| a.exp());
        self.unary(v, Op::Exp(self.id))
    }

    pub fn silu(self) -> Self {
        let v = self.value().map(|a| a / (T::one() + (-a).exp()));
        self.unary(v, Op::Silu(self.id))
    }

    pub fn sigmoid(self) -> Self {
        let v = self.value().map(|a| T::one() / (T::one() + (-a).exp()));
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn relu(self) -> Self {
        let v = self.value().map(|a| a.max(T::zero()));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn clamp(self, lo: T, hi: T) -> Self {
        let v = self.value().map(|a| a.max(lo).min(hi));
        self.unary(v, Op::Clamp(self.id, lo, hi))
    }

    pub fn conv(self, w: Self, b: Option<Self>, geom: ConvGeom) -> Self {
        let v = conv_forward(&self.value(), &w.value(), b.map(|b| b.value()).as_deref(), &geom);
        let needs = self.tape.needs(self.id) || self.tape.needs(w.id) || b.is_some_and(|b| self.tape.needs(b.id));
        self.tape.push(
            v,
            Op::Conv {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                geom,
            },
            needs,
        )
    }

    pub fn upsample2(self) -> Self {
        let v = upsample2_forward(&self.value());
        self.unary(v, Op::Upsample2(self.id))
    }

    /// Concatenates along the channel axis.
    pub fn concat(self, other: Self) -> Self {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        assert_eq!(sa[0], sb[0], "concat batch mismatch");
        assert_eq!(sa[2..], sb[2..], "concat spatial mismatch");
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * inner, sb[1] * inner);
        let mut data = Vec::with_capacity(a.len() + b.len());
        for n in 0..sa[0] {
            data.extend_from_slice(&a.data()[n * ca..(n + 1) * ca]);
            data.extend_from_slice(&b.data()[n * cb..(n + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        shape[1] += sb[1];
        self.binary(other, Array::from_vec(&shape, data), Op::Concat(self.id, other.id))
    }

    pub fn channel_slice(self, start: usize, len: usize) -> Self {
        let x = self.value();
        let xs = x.shape();
        assert!(start + len <= xs[1], "channel slice out of range");
        let inner: usize = xs[2..].iter().product();
        let mut data = Vec::with_capacity(xs[0] * len * inner);
        for n in 0..xs[0] {
            let off = (n * xs[1] + start) * inner;
            data.extend_from_slice(&x.data()[off..off + len * inner]);
        }
        let mut shape = xs.to_vec();
        shape[1] = len;
        self.unary(
            Array::from_vec(&shape, data),
            Op::ChannelSlice {
                x: self.id,
                start,
                len,
            },
        )
    }

    /// Adds a `[n, c]` bias to every voxel of a `[n, c, ...]` array.
    pub fn add_channel_bias(self, bias: Self) -> Self {
        let (x, b) = (self.value(), bias.value());
        assert_eq!(&x.shape()[..2], b.shape(), "channel bias shape mismatch");
        let inner = x.len() / b.len();
        let mut out = (*x).clone();
        for (chunk, &bv) in out.data_mut().chunks_mut(inner).zip(b.data()) {
            for v in chunk {
                *v = *v + bv;
            }
        }
        self.binary(bias, out, Op::AddChannelBias(self.id, bias.id))
    }

    /// `x·wᵀ + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(self, w: Self, b: Self) -> Self {
        let (xv, wv, bv) = (self.value(), w.value(), b.value());
        let (n, din, dout) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        assert_eq!(wv.shape()[1], din, "linear input width mismatch");
        let mut out = Array::zeros(&[n, dout]);
        for row in out.data_mut().chunks_mut(dout) {
            row.copy_from_slice(bv.data());
        }
        T::gemm(n, din, dout, T::one(), xv.data(), din as isize, 1, wv.data(), 1, din as isize, T::one(), out.data_mut(), dout as isize, 1);
        let needs = [self.id, w.id, b.id].iter().any(|&i| self.tape.needs(i));
        self.tape.push(
            out,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.id,
            },
            needs,
        )
    }

    pub fn mean(self) -> Self {
        let v = Array::scalar(self.value().mean());
        self.unary(v, Op::Mean(self.id))
    }

    /// Mean squared difference over all elements.
    pub fn mse(self, target: Self) -> Self {
        let (a, b) = (self.value(), target.value());
        assert_eq!(a.shape(), b.shape(), "mse shape mismatch");
        let s: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let v = Array::scalar(s / T::of(a.len() as f64));
        self.binary(target, v, Op::Mse(self.id, target.id))
    }

    /// Mean per-voxel softmax cross-entropy against integer class targets.
    pub fn cross_entropy(self, targets: Arc<Vec<u8>>) -> Self {
        let lv = self.value();
        let (n, k, s) = nks(lv.shape());
        assert_eq!(targets.len(), n * s, "target count mismatch");
        let mut total = 0.0f64;
        for b in 0..n {
            for v in 0..s {
                let at = |c: usize| lv.data()[(b * k + c) * s + v].f64();
                let m = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..k).map(|c| (at(c) - m).exp()).sum::<f64>().ln();
                let t = targets[b * s + v] as usize;
                assert!(t < k, "target class {t} out of range for {k} channels");
                total += lse - at(t);
            }
        }
        let v = Array::scalar(T::of(total / (n * s) as f64));
        self.unary(v, Op::CrossEntropy { logits: self.id, targets })
    }

    /// `1 − mean soft Dice` over classes (per sample, then averaged).
    pub fn soft_dice_loss(self, targets: Arc<Vec<u8>>, include_background: bool) -> Self {
        let lv = self.value();
        let p = softmax_channels(&lv);
        let (n, k, s) = nks(lv.shape());
        assert_eq!(targets.len(), n * s, "target count mismatch");
        let first = if include_background { 0 } else { 1 };
        assert!(k > first, "soft Dice needs at least one counted class");
        let eps = T::of(DICE_SMOOTH);
        let mut total = T::zero();
        for b in 0..n {
            for c in first..k {
                let (inter, psum, gsum) = dice_sums(&p, &targets, b, c, k, s);
                total = total + (T::of(2.0) * inter + eps) / (psum + gsum + eps);
            }
        }
        let mean = total / T::of((n * (k - first)) as f64);
        self.unary(
            Array::scalar(T::one() - mean),
            Op::SoftDice {
                logits: self.id,
                targets,
                include_background,
            },
        )
    }
}
