//! Minimal reverse-mode automatic differentiation over `f64` n-d arrays.
//!
//! A [`Tape`] records every operation in creation order, which is already a
//! topological order, so [`Tape::backward`] is a single reverse sweep.
//! [`Var`] is a cheap `Copy` handle into the tape.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn, Slice, Zip};

pub type Array = ArrayD<f64>;

/// A named tensor owned by a module. Frozen parameters enter the graph as
/// constants and never receive gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Array) -> Self {
        Self { name: name.into(), value, trainable: true }
    }

    pub fn frozen(name: impl Into<String>, value: Array) -> Self {
        Self { name: name.into(), value, trainable: false }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Ln(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Abs(usize),
    Square(usize),
    Sqrt(usize),
    Cos(usize),
    Sin(usize),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Sum { src: usize, axis: usize, keep: bool },
    Max { src: usize, axis: usize, keep: bool, argmax: ndarray::ArrayD<usize> },
    SumAll(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Narrow { src: usize, axis: usize, start: usize },
    Softmax(usize, usize),
    Conv2d { input: usize, weight: usize, bias: Option<usize>, pad: (usize, usize) },
    Conv1d { input: usize, weight: usize, bias: Option<usize>, stride: usize, pad: usize },
}

struct Node {
    value: Rc<Array>,
    op: Op,
    tracked: bool,
}

/// Records a computation graph for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(usize, String)>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.borrow().len()).finish()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: BTreeMap<usize, Array>,
    by_name: BTreeMap<String, Array>,
}

impl Gradients {
    /// Gradient of a tracked leaf, `None` if it did not influence the root.
    pub fn get(&self, var: Var<'_>) -> Option<&Array> {
        self.by_node.get(&var.id)
    }

    /// Gradient of a parameter, summed over every leaf created for it.
    pub fn param(&self, name: &str) -> Option<&Array> {
        self.by_name.get(name)
    }

    pub fn named(&self) -> &BTreeMap<String, Array> {
        &self.by_name
    }

    pub fn into_named(self) -> BTreeMap<String, Array> {
        self.by_name
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, tracked });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    fn value_of(&self, id: usize) -> Rc<Array> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Leaf that always receives a gradient, independent of any [`Param`].
    pub fn variable(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&self, p: &Param) -> Var<'_> {
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        if p.trainable {
            self.params.borrow_mut().push((v.id, p.name.clone()));
        }
        v
    }

    pub fn concat(&self, parts: &[Var<'_>], axis: usize) -> Var<'_> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let values: Vec<Rc<Array>> = parts.iter().map(|p| self.value_of(p.id)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let tracked = parts.iter().any(|p| self.tracked(p.id));
        self.push(out, Op::Concat(parts.iter().map(|p| p.id).collect(), axis), tracked)
    }

    /// Stack equally shaped tensors along a new axis.
    pub fn stack(&self, parts: &[Var<'_>], axis: usize) -> Var<'_> {
        let expanded: Vec<Var<'_>> = parts.iter().map(|p| p.unsqueeze(axis)).collect();
        self.concat(&expanded, axis)
    }

    /// Reverse sweep from `root`, seeded with ones of its shape.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Array>> = vec![None; root.id + 1];
        grads[root.id] = Some(ArrayD::ones(nodes[root.id].value.raw_dim()));
        let mut out = Gradients::default();

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let val = |i: usize| -> &Array { &nodes[i].value };
            let mut send = |i: usize, grad: Array| {
                if !nodes[i].tracked {
                    return;
                }
                match &mut grads[i] {
                    Some(acc) => *acc += &grad,
                    slot => *slot = Some(grad),
                }
            };
            match &node.op {
                Op::Leaf => {
                    out.by_node.insert(id, g);
                }
                Op::Add(a, b) => {
                    send(*a, unbroadcast(&g, val(*a).shape()));
                    send(*b, unbroadcast(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    send(*a, unbroadcast(&g, val(*a).shape()));
                    send(*b, unbroadcast(&g.mapv(|x| -x), val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    send(*a, unbroadcast(&(&g * val(*b)), val(*a).shape()));
                    send(*b, unbroadcast(&(&g * val(*a)), val(*b).shape()));
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    send(*a, unbroadcast(&(&g / vb), va.shape()));
                    let gb = -(&g * va) / &vb.mapv(|x| x * x);
                    send(*b, unbroadcast(&gb, vb.shape()));
                }
                Op::Neg(a) => send(*a, g.mapv(|x| -x)),
                Op::Scale(a, c) => send(*a, g.mapv(|x| x * c)),
                Op::Offset(a) => send(*a, g),
                Op::Exp(a) => send(*a, &g * &*node.value),
                Op::Ln(a) => send(*a, &g / val(*a)),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(*a)).for_each(|g, &x| {
                        if x <= 0.0 {
                            *g = 0.0
                        }
                    });
                    send(*a, ga)
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&*node.value).for_each(|g, &y| *g *= y * (1.0 - y));
                    send(*a, ga)
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&*node.value).for_each(|g, &y| *g *= 1.0 - y * y);
                    send(*a, ga)
                }
                Op::Abs(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(*a)).for_each(|g, &x| {
                        *g *= if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    send(*a, ga)
                }
                Op::Square(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(*a)).for_each(|g, &x| *g *= 2.0 * x);
                    send(*a, ga)
                }
                Op::Sqrt(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&*node.value).for_each(|g, &y| *g *= 0.5 / y);
                    send(*a, ga)
                }
                Op::Cos(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(*a)).for_each(|g, &x| *g *= -x.sin());
                    send(*a, ga)
                }
                Op::Sin(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(*a)).for_each(|g, &x| *g *= x.cos());
                    send(*a, ga)
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let k = vb.shape()[0];
                    let n = vb.shape()[1];
                    let a2 = as_matrix(va, k);
                    let g2 = as_matrix(&g, n);
                    let b2 = vb.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    if nodes[*a].tracked {
                        let ga = g2.dot(&b2.t());
                        send(*a, ga.into_dyn().into_shape_with_order(va.raw_dim()).unwrap());
                    }
                    if nodes[*b].tracked {
                        send(*b, a2.t().dot(&g2).into_dyn());
                    }
                }
                Op::BatchMatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (ga, gb) = bmm_backward(va, vb, &g);
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Sum { src, axis, keep } => {
                    let g = if *keep { g } else { g.insert_axis(Axis(*axis)) };
                    let full = g.broadcast(val(*src).raw_dim()).unwrap().to_owned();
                    send(*src, full);
                }
                Op::Max { src, axis, keep, argmax } => {
                    let g = if *keep { g.remove_axis(Axis(*axis)) } else { g };
                    let mut gs = ArrayD::zeros(val(*src).raw_dim());
                    Zip::from(gs.lanes_mut(Axis(*axis))).and(&g).and(argmax).for_each(
                        |mut lane, &gv, &i| lane[i] += gv,
                    );
                    send(*src, gs);
                }
                Op::SumAll(a) => {
                    let s = *g.first().unwrap();
                    send(*a, ArrayD::from_elem(val(*a).raw_dim(), s));
                }
                Op::Reshape(a) => {
                    send(*a, g.into_shape_with_order(val(*a).raw_dim()).unwrap());
                }
                Op::Permute(a, axes) => {
                    let mut inv = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    let back = g.permuted_axes(IxDyn(&inv)).as_standard_layout().into_owned();
                    send(*a, back);
                }
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = val(p).shape()[*axis];
                        let piece = g.slice_axis(Axis(*axis), Slice::from(start..start + len)).to_owned();
                        start += len;
                        send(p, piece);
                    }
                }
                Op::Narrow { src, axis, start } => {
                    let mut gs = ArrayD::zeros(val(*src).raw_dim());
                    let len = g.shape()[*axis];
                    gs.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len)).assign(&g);
                    send(*src, gs);
                }
                Op::Softmax(a, axis) => {
                    let y = &*node.value;
                    let gy = &g * y;
                    let s = gy.sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                    send(*a, &gy - &(y * &s));
                }
                Op::Conv2d { input, weight, bias, pad } => {
                    let (gi, gw, gb) = conv2d_backward(val(*input), val(*weight), &g, *pad);
                    send(*input, gi);
                    send(*weight, gw);
                    if let Some(b) = bias {
                        send(*b, gb);
                    }
                }
                Op::Conv1d { input, weight, bias, stride, pad } => {
                    let (gi, gw, gb) = conv1d_backward(val(*input), val(*weight), &g, *stride, *pad);
                    send(*input, gi);
                    send(*weight, gw);
                    if let Some(b) = bias {
                        send(*b, gb);
                    }
                }
            }
        }

        for (id, name) in self.params.borrow().iter() {
            if let Some(g) = out.by_node.get(id) {
                match out.by_name.get_mut(name) {
                    Some(acc) => *acc += g,
                    None => {
                        out.by_name.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        out
    }
}

fn unbroadcast(g: &Array, shape: &[usize]) -> Array {
    let mut g = g.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (i, &s) in shape.iter().enumerate() {
        if s == 1 && g.shape()[i] != 1 {
            g = g.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    g
}

fn as_matrix(a: &Array, cols: usize) -> Array2<f64> {
    let rows = a.len() / cols.max(1);
    a.as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, cols))
        .expect("matrix reshape")
}

fn batch_views(a: &Array) -> (usize, Vec<ArrayView2<'_, f64>>) {
    let nd = a.ndim();
    let (m, k) = (a.shape()[nd - 2], a.shape()[nd - 1]);
    let batch: usize = a.shape()[..nd - 2].iter().product();
    let flat = a.view().into_shape_with_order((batch, m, k)).expect("bmm operand must be contiguous");
    let views = (0..batch).map(|i| flat.index_axis_move(Axis(0), i)).collect::<Vec<_>>();
    (batch, views)
}

fn bmm_forward(a: &Array, b: &Array) -> Array {
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let (a, b) = (a.into_owned(), b.into_owned());
    let (batch, av) = batch_views(&a);
    let (_, bv) = batch_views(&b);
    let nd = a.ndim();
    let (m, n) = (a.shape()[nd - 2], b.shape()[nd - 1]);
    let mut out = Vec::with_capacity(batch * m * n);
    for (x, y) in av.iter().zip(&bv) {
        out.extend(x.dot(y).iter());
    }
    let mut shape = a.shape()[..nd - 2].to_vec();
    shape.extend([m, n]);
    ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap()
}

fn bmm_backward(a: &Array, b: &Array, g: &Array) -> (Array, Array) {
    let a = a.as_standard_layout().into_owned();
    let b = b.as_standard_layout().into_owned();
    let g = g.as_standard_layout().into_owned();
    let (_, av) = batch_views(&a);
    let (_, bv) = batch_views(&b);
    let (_, gv) = batch_views(&g);
    let mut ga = Vec::with_capacity(a.len());
    let mut gb = Vec::with_capacity(b.len());
    for ((x, y), gi) in av.iter().zip(&bv).zip(&gv) {
        ga.extend(gi.dot(&y.t()).iter());
        gb.extend(x.t().dot(gi).iter());
    }
    (
        ArrayD::from_shape_vec(a.raw_dim(), ga).unwrap(),
        ArrayD::from_shape_vec(b.raw_dim(), gb).unwrap(),
    )
}

/// Stride-1 2-D convolution (cross-correlation), NCHW layout.
pub(crate) fn conv2d_forward(x: &Array, w: &Array, b: Option<&Array>, pad: (usize, usize)) -> Array {
    let (bs, cin, h, wd) = dims4(x);
    let (cout, wcin, kh, kw) = dims4(w);
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    let oh = h + 2 * pad.0 + 1 - kh;
    let ow = wd + 2 * pad.1 + 1 - kw;
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let ws = w.as_standard_layout();
    let ws = ws.as_slice().unwrap();
    let mut out = vec![0.0; bs * cout * oh * ow];
    for n in 0..bs {
        for co in 0..cout {
            let o = &mut out[(n * cout + co) * oh * ow..][..oh * ow];
            if let Some(b) = b {
                o.fill(b[[co]]);
            }
            for ci in 0..cin {
                let xi = &xs[(n * cin + ci) * h * wd..][..h * wd];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = ws[((co * cin + ci) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (y0, y1) = valid_range(oh, h, ky, pad.0);
                        let (x0, x1) = valid_range(ow, wd, kx, pad.1);
                        for oy in y0..y1 {
                            let iy = oy + ky - pad.0;
                            let orow = &mut o[oy * ow..][..ow];
                            let irow = &xi[iy * wd..][..wd];
                            for ox in x0..x1 {
                                orow[ox] += wv * irow[ox + kx - pad.1];
                            }
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[bs, cout, oh, ow]), out).unwrap()
}

fn conv2d_backward(x: &Array, w: &Array, g: &Array, pad: (usize, usize)) -> (Array, Array, Array) {
    let (bs, cin, h, wd) = dims4(x);
    let (cout, _, kh, kw) = dims4(w);
    let (_, _, oh, ow) = dims4(g);
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let ws = w.as_standard_layout();
    let ws = ws.as_slice().unwrap();
    let gs = g.as_standard_layout();
    let gs = gs.as_slice().unwrap();
    let mut gx = vec![0.0; xs.len()];
    let mut gw = vec![0.0; ws.len()];
    let mut gb = vec![0.0; cout];
    for n in 0..bs {
        for co in 0..cout {
            let go = &gs[(n * cout + co) * oh * ow..][..oh * ow];
            gb[co] += go.iter().sum::<f64>();
            for ci in 0..cin {
                let base = (n * cin + ci) * h * wd;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                        let wv = ws[widx];
                        let (y0, y1) = valid_range(oh, h, ky, pad.0);
                        let (x0, x1) = valid_range(ow, wd, kx, pad.1);
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy + ky - pad.0;
                            let grow = &go[oy * ow..][..ow];
                            let off = base + iy * wd;
                            for ox in x0..x1 {
                                let ix = off + ox + kx - pad.1;
                                acc += grow[ox] * xs[ix];
                                gx[ix] += grow[ox] * wv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (
        ArrayD::from_shape_vec(x.raw_dim(), gx).unwrap(),
        ArrayD::from_shape_vec(w.raw_dim(), gw).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[cout]), gb).unwrap(),
    )
}

/// Output positions `o` in `[lo, hi)` whose input index `o + k - pad` lies inside `[0, len)`.
fn valid_range(out_len: usize, len: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(out_len);
    (lo, hi.max(lo))
}

pub(crate) fn conv1d_forward(x: &Array, w: &Array, b: Option<&Array>, stride: usize, pad: usize) -> Array {
    let (bs, cin, len) = dims3(x);
    let (cout, wcin, k) = dims3(w);
    assert_eq!(cin, wcin, "conv1d channel mismatch");
    let olen = (len + 2 * pad - k) / stride + 1;
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let ws = w.as_standard_layout();
    let ws = ws.as_slice().unwrap();
    let mut out = vec![0.0; bs * cout * olen];
    for n in 0..bs {
        for co in 0..cout {
            let o = &mut out[(n * cout + co) * olen..][..olen];
            if let Some(b) = b {
                o.fill(b[[co]]);
            }
            for ci in 0..cin {
                let xi = &xs[(n * cin + ci) * len..][..len];
                let wr = &ws[(co * cin + ci) * k..][..k];
                for (ot, ov) in o.iter_mut().enumerate() {
                    let start = (ot * stride) as isize - pad as isize;
                    for (kk, &wv) in wr.iter().enumerate() {
                        let i = start + kk as isize;
                        if i >= 0 && (i as usize) < len {
                            *ov += wv * xi[i as usize];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[bs, cout, olen]), out).unwrap()
}

fn conv1d_backward(x: &Array, w: &Array, g: &Array, stride: usize, pad: usize) -> (Array, Array, Array) {
    let (bs, cin, len) = dims3(x);
    let (cout, _, k) = dims3(w);
    let olen = g.shape()[2];
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let ws = w.as_standard_layout();
    let ws = ws.as_slice().unwrap();
    let gs = g.as_standard_layout();
    let gs = gs.as_slice().unwrap();
    let mut gx = vec![0.0; xs.len()];
    let mut gw = vec![0.0; ws.len()];
    let mut gb = vec![0.0; cout];
    for n in 0..bs {
        for co in 0..cout {
            let go = &gs[(n * cout + co) * olen..][..olen];
            gb[co] += go.iter().sum::<f64>();
            for ci in 0..cin {
                let xoff = (n * cin + ci) * len;
                let woff = (co * cin + ci) * k;
                for (ot, &gv) in go.iter().enumerate() {
                    let start = (ot * stride) as isize - pad as isize;
                    for kk in 0..k {
                        let i = start + kk as isize;
                        if i >= 0 && (i as usize) < len {
                            gw[woff + kk] += gv * xs[xoff + i as usize];
                            gx[xoff + i as usize] += gv * ws[woff + kk];
                        }
                    }
                }
            }
        }
    }
    (
        ArrayD::from_shape_vec(x.raw_dim(), gx).unwrap(),
        ArrayD::from_shape_vec(w.raw_dim(), gw).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[cout]), gb).unwrap(),
    )
}

fn dims4(a: &Array) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected a 4-d tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn dims3(a: &Array) -> (usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 3, "expected a 3-d tensor, got {s:?}");
    (s[0], s[1], s[2])
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Array> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let out = self.value().mapv(f);
        self.tape.push(out, op, self.is_tracked())
    }

    fn binary(self, other: Var<'t>, out: Array, op: Op) -> Var<'t> {
        let tracked = self.is_tracked() || other.is_tracked();
        self.tape.push(out, op, tracked)
    }

    pub fn add(self, o: Var<'t>) -> Var<'t> {
        let out = &*self.value() + &*o.value();
        self.binary(o, out, Op::Add(self.id, o.id))
    }

    pub fn sub(self, o: Var<'t>) -> Var<'t> {
        let out = &*self.value() - &*o.value();
        self.binary(o, out, Op::Sub(self.id, o.id))
    }

    pub fn mul(self, o: Var<'t>) -> Var<'t> {
        let out = &*self.value() * &*o.value();
        self.binary(o, out, Op::Mul(self.id, o.id))
    }

    pub fn div(self, o: Var<'t>) -> Var<'t> {
        let out = &*self.value() / &*o.value();
        self.binary(o, out, Op::Div(self.id, o.id))
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(|x| -x, Op::Neg(self.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(|x| x * c, Op::Scale(self.id, c))
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.unary(|x| x + c, Op::Offset(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, Op::Ln(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, Op::Abs(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, Op::Square(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(f64::cos, Op::Cos(self.id))
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(f64::sin, Op::Sin(self.id))
    }

    /// `[..., m, k] x [k, n] -> [..., m, n]`.
    pub fn matmul(self, w: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), w.value());
        assert_eq!(b.ndim(), 2, "matmul rhs must be 2-d");
        let (k, n) = (b.shape()[0], b.shape()[1]);
        assert_eq!(*a.shape().last().unwrap(), k, "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
        let a2 = as_matrix(&a, k);
        let b2 = b.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = a2.dot(&b2).into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap();
        self.binary(w, out, Op::MatMul(self.id, w.id))
    }

    /// Batched `[..., m, k] x [..., k, n]` with identical leading dims.
    pub fn bmm(self, o: Var<'t>) -> Var<'t> {
        let out = bmm_forward(&self.value(), &o.value());
        self.binary(o, out, Op::BatchMatMul(self.id, o.id))
    }

    pub fn sum_axis(self, axis: usize, keep: bool) -> Var<'t> {
        let mut out = self.value().sum_axis(Axis(axis));
        if keep {
            out = out.insert_axis(Axis(axis));
        }
        self.tape.push(out, Op::Sum { src: self.id, axis, keep }, self.is_tracked())
    }

    pub fn mean_axis(self, axis: usize, keep: bool) -> Var<'t> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis, keep).scale(1.0 / n)
    }

    pub fn max_axis(self, axis: usize, keep: bool) -> Var<'t> {
        let v = self.value();
        let mut reduced_shape = v.shape().to_vec();
        reduced_shape.remove(axis);
        let mut maxes = ArrayD::zeros(IxDyn(&reduced_shape));
        let mut argmax = ArrayD::<usize>::zeros(IxDyn(&reduced_shape));
        Zip::from(v.lanes(Axis(axis))).and(&mut maxes).and(&mut argmax).for_each(|lane, m, a| {
            let mut best = f64::NEG_INFINITY;
            let mut idx = 0;
            for (i, &x) in lane.iter().enumerate() {
                if x > best {
                    best = x;
                    idx = i;
                }
            }
            *m = best;
            *a = idx;
        });
        let out = if keep { maxes.insert_axis(Axis(axis)) } else { maxes };
        self.tape.push(out, Op::Max { src: self.id, axis, keep, argmax }, self.is_tracked())
    }

    pub fn sum_all(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(self.id), self.is_tracked())
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let out = self
            .value()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape {:?} -> {shape:?}: {e}", self.shape()));
        self.tape.push(out, Op::Reshape(self.id), self.is_tracked())
    }

    pub fn unsqueeze(self, axis: usize) -> Var<'t> {
        let mut s = self.shape();
        s.insert(axis, 1);
        self.reshape(&s)
    }

    pub fn squeeze(self, axis: usize) -> Var<'t> {
        let mut s = self.shape();
        assert_eq!(s[axis], 1, "squeeze of non-singleton axis");
        s.remove(axis);
        self.reshape(&s)
    }

    pub fn permute(self, axes: &[usize]) -> Var<'t> {
        let out = (*self.value()).clone().permuted_axes(IxDyn(axes)).as_standard_layout().into_owned();
        self.tape.push(out, Op::Permute(self.id, axes.to_vec()), self.is_tracked())
    }

    pub fn transpose(self, a: usize, b: usize) -> Var<'t> {
        let mut axes: Vec<usize> = (0..self.shape().len()).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let out = self.value().slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned();
        self.tape.push(out, Op::Narrow { src: self.id, axis, start }, self.is_tracked())
    }

    pub fn softmax(self, axis: usize) -> Var<'t> {
        let v = self.value();
        let mut out = (*v).clone();
        for mut lane in out.lanes_mut(Axis(axis)) {
            let m = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            lane.mapv_inplace(|x| (x - m).exp());
            let s = lane.sum();
            lane.mapv_inplace(|x| x / s);
        }
        self.tape.push(out, Op::Softmax(self.id, axis), self.is_tracked())
    }

    /// NCHW convolution, stride 1, zero padding `pad`.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, pad: (usize, usize)) -> Var<'t> {
        let bv = bias.map(|b| b.value());
        let out = conv2d_forward(&self.value(), &weight.value(), bv.as_deref(), pad);
        let tracked = self.is_tracked() || weight.is_tracked() || bias.is_some_and(|b| b.is_tracked());
        self.tape.push(
            out,
            Op::Conv2d { input: self.id, weight: weight.id, bias: bias.map(|b| b.id), pad },
            tracked,
        )
    }

    /// NCL convolution with zero padding.
    pub fn conv1d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, pad: usize) -> Var<'t> {
        let bv = bias.map(|b| b.value());
        let out = conv1d_forward(&self.value(), &weight.value(), bv.as_deref(), stride, pad);
        let tracked = self.is_tracked() || weight.is_tracked() || bias.is_some_and(|b| b.is_tracked());
        self.tape.push(
            out,
            Op::Conv1d { input: self.id, weight: weight.id, bias: bias.map(|b| b.id), stride, pad },
            tracked,
        )
    }
}

macro_rules! impl_binop {
    ($tr:ident, $m:ident) => {
        impl<'t> std::ops::$tr for Var<'t> {
            type Output = Var<'t>;
            fn $m(self, rhs: Var<'t>) -> Var<'t> {
                Var::$m(self, rhs)
            }
        }
    };
}
impl_binop!(Add, add);
impl_binop!(Sub, sub);
impl_binop!(Mul, mul);
impl_binop!(Div, div);

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
        let n = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(f)/d(input) for a scalar-valued graph builder.
    fn check_grad(shape: &[usize], seed: u64, f: impl Fn(Var<'_>) -> Var<'_>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = rand_array(&mut rng, shape);
        let tape = Tape::new();
        let x = tape.variable(x0.clone());
        let y = f(x);
        let grads = tape.backward(y);
        let g = grads.get(x).expect("input gradient");
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |d: f64| {
                let mut xp = x0.clone();
                xp.as_slice_mut().unwrap()[i] += d;
                let t = Tape::new();
                let v = f(t.variable(xp));
                *v.value().first().unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let ad = g.as_slice().unwrap()[i];
            assert!((fd - ad).abs() < 1e-6 * (1.0 + fd.abs()), "entry {i}: fd {fd} vs ad {ad}");
        }
    }

    #[test]
    fn broadcast_add_mul_grads() {
        check_grad(&[3, 4], 1, |x| {
            let t = x.tape();
            let b = t.constant(array![1.0, 2.0, -1.0, 0.5].into_dyn());
            (x * b + x.square()).sum_all()
        });
        check_grad(&[4], 2, |x| {
            let t = x.tape();
            let m = t.constant(ArrayD::from_elem(IxDyn(&[3, 4]), 1.5));
            (m / x.offset(3.0)).sum_all()
        });
    }

    #[test]
    fn elementwise_grads() {
        check_grad(&[5], 3, |x| (x.exp() + x.offset(2.0).ln() + x.tanh() + x.sigmoid()).sum_all());
        check_grad(&[5], 4, |x| (x.cos() * x.sin() + x.offset(2.0).sqrt()).sum_all());
    }

    #[test]
    fn matmul_and_bmm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = rand_array(&mut rng, &[4, 3]);
        check_grad(&[2, 5, 4], 5, move |x| x.matmul(x.tape().constant(w.clone())).square().sum_all());
        let other = rand_array(&mut rng, &[2, 4, 3]);
        check_grad(&[2, 5, 4], 6, move |x| x.bmm(x.tape().constant(other.clone())).square().sum_all());
    }

    #[test]
    fn reduction_and_shape_grads() {
        check_grad(&[2, 3, 4], 7, |x| x.max_axis(1, true).square().sum_all() + x.mean_axis(2, false).sum_all());
        check_grad(&[2, 3, 4], 8, |x| x.permute(&[2, 0, 1]).narrow(0, 1, 2).reshape(&[12]).square().sum_all());
        check_grad(&[2, 3], 9, |x| {
            let t = x.tape();
            t.concat(&[x, x.scale(2.0)], 1).softmax(1).narrow(1, 0, 2).square().sum_all()
        });
    }

    #[test]
    fn conv_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w2 = rand_array(&mut rng, &[3, 2, 3, 3]);
        let b2 = rand_array(&mut rng, &[3]);
        check_grad(&[1, 2, 4, 5], 12, move |x| {
            let t = x.tape();
            x.conv2d(t.constant(w2.clone()), Some(t.constant(b2.clone())), (1, 1)).square().sum_all()
        });
        let w1 = rand_array(&mut rng, &[2, 3, 3]);
        check_grad(&[2, 3, 7], 13, move |x| {
            let t = x.tape();
            x.conv1d(t.constant(w1.clone()), None, 2, 1).square().sum_all()
        });
    }

    #[test]
    fn conv_weight_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = rand_array(&mut rng, &[2, 2, 3, 4]);
        check_grad(&[4, 2, 3, 3], 22, move |w| {
            let t = w.tape();
            t.constant(x.clone()).conv2d(w, None, (1, 1)).sin().sum_all()
        });
    }

    #[test]
    fn conv2d_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = rand_array(&mut rng, &[1, 2, 4, 3]);
        let w = rand_array(&mut rng, &[2, 2, 3, 3]);
        let out = conv2d_forward(&x, &w, None, (1, 1));
        for co in 0..2 {
            for y in 0..4 {
                for xx in 0..3 {
                    let mut s = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                let ix = xx as isize + kx as isize - 1;
                                if (0..4).contains(&iy) && (0..3).contains(&ix) {
                                    s += w[[co, ci, ky, kx]] * x[[0, ci, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    assert!((out[[0, co, y, xx]] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let tape = Tape::new();
        let frozen = Param::frozen("a", array![1.0, 2.0].into_dyn());
        let live = Param::new("b", array![3.0, 4.0].into_dyn());
        let a = tape.param(&frozen);
        let b = tape.param(&live);
        let grads = tape.backward((a * b).sum_all());
        assert!(grads.param("a").is_none());
        assert_eq!(grads.param("b").unwrap(), &array![1.0, 2.0].into_dyn());
    }

    #[test]
    fn repeated_param_leaves_accumulate() {
        let tape = Tape::new();
        let p = Param::new("w", array![2.0].into_dyn());
        let a = tape.param(&p);
        let b = tape.param(&p);
        let grads = tape.backward((a * b).sum_all());
        assert_eq!(grads.param("w").unwrap()[[0]], 4.0);
    }
}
