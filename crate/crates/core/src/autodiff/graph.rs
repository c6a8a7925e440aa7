//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] walks the tape once in reverse and returns the
//! gradient of a scalar with respect to every node that requires one.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use super::tensor::{
    broadcast_shape, col2im, im2col, nop_to_om, om_to_nop, split_axis, ConvGeom, Tensor,
};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Sqrt(usize),
    Square(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Broadcast(usize),
    SumAxis { a: usize, axis: usize, keepdim: bool },
    SumAll(usize),
    LogSoftmax(usize),
    Softmax(usize),
    Conv2d { x: usize, w: usize, geom: ConvGeom, cols: Option<Rc<Vec<f64>>> },
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { a: usize, axis: usize, start: usize },
    IndexSelect { a: usize, idx: Vec<usize> },
    GatherFlat { a: usize, idx: Vec<usize> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Values live as long as the graph.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::with_capacity(256)) }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(root.graph, self), "root belongs to another graph");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape().to_vec(), 1.0));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let val = |i: usize| nodes[i].value.clone();
            let mut send = |i: usize, t: Tensor| {
                if !nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.scale(-1.0));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    send(*a, g.zip(&val(*b), |x, y| x * y));
                    send(*b, g.zip(&val(*a), |x, y| x * y));
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    send(*a, g.zip(&bv, |x, y| x / y));
                    let av = val(*a);
                    let t = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(av.data())
                            .zip(bv.data())
                            .map(|((gg, x), y)| -gg * x / (y * y))
                            .collect(),
                    );
                    send(*b, t);
                }
                Op::AddScalar(a) => send(*a, g),
                Op::MulScalar(a, s) => send(*a, g.scale(*s)),
                Op::Exp(a) => send(*a, g.zip(&node.value, |x, y| x * y)),
                Op::Log(a) => send(*a, g.zip(&val(*a), |x, y| x / y)),
                Op::Relu(a) => send(*a, g.zip(&val(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
                Op::Tanh(a) => send(*a, g.zip(&node.value, |x, y| x * (1.0 - y * y))),
                Op::Sigmoid(a) => send(*a, g.zip(&node.value, |x, y| x * y * (1.0 - y))),
                Op::Sqrt(a) => {
                    // subgradient 0 at the origin, where sqrt is not differentiable
                    send(*a, g.zip(&node.value, |x, y| if y > 0.0 { x / (2.0 * y) } else { 0.0 }))
                }
                Op::Square(a) => send(*a, g.zip(&val(*a), |x, y| 2.0 * x * y)),
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        // C = op(A) op(B)
                        let ga = if *ta { bv.matmul_t(&g, *tb, true) } else { g.matmul_t(&bv, false, !*tb) };
                        send(*a, ga);
                    }
                    if nodes[*b].requires_grad {
                        let gb = if *tb { g.matmul_t(&av, true, *ta) } else { av.matmul_t(&g, !*ta, false) };
                        send(*b, gb);
                    }
                }
                Op::Reshape(a) => {
                    let shape = nodes[*a].value.shape().to_vec();
                    send(*a, g.reshape(shape));
                }
                Op::Permute(a, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    send(*a, g.permute(&inv));
                }
                Op::Broadcast(a) => {
                    let shape = nodes[*a].value.shape().to_vec();
                    send(*a, g.reduce_to(&shape));
                }
                Op::SumAxis { a, axis, keepdim } => {
                    let n = nodes[*a].value.shape()[*axis];
                    send(*a, g.expand_axis(*axis, n, *keepdim));
                }
                Op::SumAll(a) => {
                    let shape = nodes[*a].value.shape().to_vec();
                    send(*a, Tensor::full(shape, g.item()));
                }
                Op::LogSoftmax(a) => {
                    let c = *g.shape().last().unwrap();
                    let mut out = g.clone();
                    for (orow, (grow, yrow)) in out
                        .data_mut()
                        .chunks_mut(c)
                        .zip(g.data().chunks(c).zip(node.value.data().chunks(c)))
                    {
                        let s: f64 = grow.iter().sum();
                        for ((o, &gg), &y) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o = gg - y.exp() * s;
                        }
                    }
                    send(*a, out);
                }
                Op::Softmax(a) => {
                    let c = *g.shape().last().unwrap();
                    let mut out = g.clone();
                    for (orow, (grow, yrow)) in out
                        .data_mut()
                        .chunks_mut(c)
                        .zip(g.data().chunks(c).zip(node.value.data().chunks(c)))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for ((o, &gg), &y) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o = y * (gg - dot);
                        }
                    }
                    send(*a, out);
                }
                Op::Conv2d { x, w, geom, cols } => {
                    let o = nodes[*w].value.dim(0);
                    let p = geom.oh * geom.ow;
                    let gm = nop_to_om(g.data(), o, geom.n, p);
                    let gm = Tensor::new(vec![o, geom.n * p], gm);
                    if nodes[*w].requires_grad {
                        let cols = cols.as_ref().expect("conv cols saved when weight needs grad");
                        let ct = Tensor::new(vec![geom.col_rows(), geom.col_cols()], cols.to_vec());
                        let gw = gm.matmul_t(&ct, false, true);
                        send(*w, gw.reshape(nodes[*w].value.shape().to_vec()));
                    }
                    if nodes[*x].requires_grad {
                        let wm = val(*w).as_ref().clone().reshape(vec![o, geom.col_rows()]);
                        let gcols = wm.matmul_t(&gm, true, false);
                        let gx = col2im(gcols.data(), geom);
                        send(*x, Tensor::new(nodes[*x].value.shape().to_vec(), gx));
                    }
                }
                Op::Concat { parts, axis } => {
                    let mut start = 0;
                    for &p in parts {
                        let len = nodes[p].value.shape()[*axis];
                        send(p, g.narrow(*axis, start, len));
                        start += len;
                    }
                }
                Op::Narrow { a, axis, start } => {
                    let shape = nodes[*a].value.shape().to_vec();
                    let (outer, n, inner) = split_axis(&shape, *axis);
                    let len = g.shape()[*axis];
                    let mut full = vec![0.0; outer * n * inner];
                    for oi in 0..outer {
                        let dst = (oi * n + start) * inner;
                        let src = oi * len * inner;
                        full[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    send(*a, Tensor::new(shape, full));
                }
                Op::IndexSelect { a, idx } => {
                    let shape = nodes[*a].value.shape().to_vec();
                    let inner: usize = shape[1..].iter().product();
                    let mut full = vec![0.0; shape.iter().product()];
                    for (k, &i) in idx.iter().enumerate() {
                        for (d, s) in full[i * inner..(i + 1) * inner]
                            .iter_mut()
                            .zip(&g.data()[k * inner..(k + 1) * inner])
                        {
                            *d += s;
                        }
                    }
                    send(*a, Tensor::new(shape, full));
                }
                Op::GatherFlat { a, idx } => {
                    let shape = nodes[*a].value.shape().to_vec();
                    let mut full = vec![0.0; shape.iter().product()];
                    for (k, &i) in idx.iter().enumerate() {
                        full[i] += g.data()[k];
                    }
                    send(*a, Tensor::new(shape, full));
                }
            }
        }
        Gradients { grads }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.value().shape()[axis]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(self.id)
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.requires_grad();
        self.graph.push(value, op, rg)
    }

    fn same_graph(self, o: Var<'g>) {
        debug_assert!(std::ptr::eq(self.graph, o.graph), "vars from different graphs");
    }

    /// Broadcast both operands to a common shape.
    fn align(self, o: Var<'g>) -> (Var<'g>, Var<'g>) {
        self.same_graph(o);
        let (sa, sb) = (self.shape(), o.shape());
        if sa == sb {
            return (self, o);
        }
        let s = broadcast_shape(&sa, &sb)
            .unwrap_or_else(|| panic!("cannot broadcast {sa:?} with {sb:?}"));
        (self.broadcast_to(&s), o.broadcast_to(&s))
    }

    fn binary(self, o: Var<'g>, f: impl Fn(f64, f64) -> f64, mk: impl Fn(usize, usize) -> Op) -> Var<'g> {
        let (a, b) = self.align(o);
        let v = a.value().zip(&b.value(), f);
        let rg = a.requires_grad() || b.requires_grad();
        self.graph.push(v, mk(a.id, b.id), rg)
    }

    pub fn add(self, o: Var<'g>) -> Var<'g> {
        self.binary(o, |x, y| x + y, Op::Add)
    }

    pub fn sub(self, o: Var<'g>) -> Var<'g> {
        self.binary(o, |x, y| x - y, Op::Sub)
    }

    pub fn mul(self, o: Var<'g>) -> Var<'g> {
        self.binary(o, |x, y| x * y, Op::Mul)
    }

    pub fn div(self, o: Var<'g>) -> Var<'g> {
        self.binary(o, |x, y| x / y, Op::Div)
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        let v = self.value().map(|x| x + s);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(self, s: f64) -> Var<'g> {
        let v = self.value().scale(s);
        self.unary(v, Op::MulScalar(self.id, s))
    }

    pub fn exp(self) -> Var<'g> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn log(self) -> Var<'g> {
        let v = self.value().map(f64::ln);
        self.unary(v, Op::Log(self.id))
    }

    pub fn relu(self) -> Var<'g> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn tanh(self) -> Var<'g> {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'g> {
        let v = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(v, Op::Sigmoid(self.id))
    }

    /// Elementwise square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(self) -> Var<'g> {
        let v = self.value().map(f64::sqrt);
        self.unary(v, Op::Sqrt(self.id))
    }

    pub fn square(self) -> Var<'g> {
        let v = self.value().map(|x| x * x);
        self.unary(v, Op::Square(self.id))
    }

    pub fn matmul(self, o: Var<'g>) -> Var<'g> {
        self.matmul_t(o, false, false)
    }

    pub fn matmul_t(self, o: Var<'g>, ta: bool, tb: bool) -> Var<'g> {
        self.same_graph(o);
        let v = self.value().matmul_t(&o.value(), ta, tb);
        let rg = self.requires_grad() || o.requires_grad();
        self.graph.push(v, Op::MatMul { a: self.id, b: o.id, ta, tb }, rg)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let v = self.value().as_ref().clone().reshape(shape.to_vec());
        self.unary(v, Op::Reshape(self.id))
    }

    pub fn permute(self, perm: &[usize]) -> Var<'g> {
        let v = self.value().permute(perm);
        self.unary(v, Op::Permute(self.id, perm.to_vec()))
    }

    /// Swap the last two axes.
    pub fn t(self) -> Var<'g> {
        let r = self.shape().len();
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Var<'g> {
        if self.shape() == shape {
            return self;
        }
        let v = self.value().broadcast_to(shape);
        self.unary(v, Op::Broadcast(self.id))
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Var<'g> {
        let v = self.value().sum_axis(axis, keepdim);
        self.unary(v, Op::SumAxis { a: self.id, axis, keepdim })
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Var<'g> {
        let n = self.dim(axis) as f64;
        self.sum_axis(axis, keepdim).mul_scalar(1.0 / n)
    }

    pub fn sum(self) -> Var<'g> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'g> {
        let x = self.value();
        let c = *x.shape().last().expect("log_softmax of scalar");
        let mut out = x.as_ref().clone();
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.unary(out, Op::LogSoftmax(self.id))
    }

    pub fn softmax(self) -> Var<'g> {
        let x = self.value();
        let c = *x.shape().last().expect("softmax of scalar");
        let mut out = x.as_ref().clone();
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - m).exp());
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.unary(out, Op::Softmax(self.id))
    }

    /// NCHW cross-correlation with an OIHW kernel and zero padding.
    pub fn conv2d(self, kernel: Var<'g>, stride: usize, pad: usize) -> Var<'g> {
        self.same_graph(kernel);
        let (x, w) = (self.value(), kernel.value());
        let geom = ConvGeom::new(x.shape(), w.shape(), stride, pad);
        let cols = im2col(x.data(), &geom);
        let o = w.dim(0);
        let wm = Tensor::new(vec![o, geom.col_rows()], w.data().to_vec());
        let cm = Tensor::new(vec![geom.col_rows(), geom.col_cols()], cols);
        let out = wm.matmul(&cm);
        let p = geom.oh * geom.ow;
        let data = om_to_nop(out.data(), o, geom.n, p);
        let value = Tensor::new(vec![geom.n, o, geom.oh, geom.ow], data);
        let rg = self.requires_grad() || kernel.requires_grad();
        let cols = kernel.requires_grad().then(|| Rc::new(cm.into_data()));
        self.graph.push(value, Op::Conv2d { x: self.id, w: kernel.id, geom, cols }, rg)
    }

    pub fn concat(parts: &[Var<'g>], axis: usize) -> Var<'g> {
        let first = parts[0];
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = vals.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat(&refs, axis);
        let rg = parts.iter().any(|p| p.requires_grad());
        first.graph.push(v, Op::Concat { parts: parts.iter().map(|p| p.id).collect(), axis }, rg)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let v = self.value().narrow(axis, start, len);
        self.unary(v, Op::Narrow { a: self.id, axis, start })
    }

    pub fn index_select(self, idx: &[usize]) -> Var<'g> {
        let v = self.value().index_select(idx);
        self.unary(v, Op::IndexSelect { a: self.id, idx: idx.to_vec() })
    }

    /// Pick elements by flat (row-major) index into a rank-1 result.
    pub fn gather_flat(self, idx: &[usize]) -> Var<'g> {
        let x = self.value();
        let v = Tensor::new(vec![idx.len()], idx.iter().map(|&i| x.data()[i]).collect());
        self.unary(v, Op::GatherFlat { a: self.id, idx: idx.to_vec() })
    }

    /// Euclidean norm over the last axis (zero subgradient at the origin).
    pub fn norm_last(self) -> Var<'g> {
        let r = self.shape().len();
        self.square().sum_axis(r - 1, false).sqrt()
    }

    /// Row-wise L2 normalisation over the last axis.
    pub fn l2_normalize(self, eps: f64) -> Var<'g> {
        let r = self.shape().len();
        let n = self.square().sum_axis(r - 1, true).add_scalar(eps * eps).sqrt();
        self.div(n)
    }
}

macro_rules! impl_bin {
    ($tr:ident, $m:ident) => {
        impl<'g> $tr for Var<'g> {
            type Output = Var<'g>;
            fn $m(self, o: Var<'g>) -> Var<'g> {
                Var::$m(self, o)
            }
        }
    };
}
impl_bin!(Add, add);
impl_bin!(Sub, sub);
impl_bin!(Mul, mul);
impl_bin!(Div, div);

impl<'g> Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.mul_scalar(-1.0)
    }
}
