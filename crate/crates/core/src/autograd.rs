//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of that scalar with respect to every node that requires one.
//! Graphs are cheap and meant to live for a single forward/backward pass.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    Silu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Silu => x * sigmoid(x),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if height + 2 * pad < kernel || width + 2 * pad < kernel || stride == 0 {
            return Err(Error::Shape(format!(
                "kernel {kernel} (stride {stride}, pad {pad}) does not fit a {height}x{width} input"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let l = self.cols();
        let k = self.kernel;
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * l..(row + 1) * l];
                    for oh in 0..self.out_h {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        for ow in 0..self.out_w {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            dst[oh * self.out_w + ow] = if ih >= 0
                                && iw >= 0
                                && (ih as usize) < self.height
                                && (iw as usize) < self.width
                            {
                                image[(c * self.height + ih as usize) * self.width + iw as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let l = self.cols();
        let k = self.kernel;
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * l..(row + 1) * l];
                    for oh in 0..self.out_h {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        if ih < 0 || ih as usize >= self.height {
                            continue;
                        }
                        for ow in 0..self.out_w {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            if iw < 0 || iw as usize >= self.width {
                                continue;
                            }
                            image[(c * self.height + ih as usize) * self.width + iw as usize] +=
                                src[oh * self.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// `c (+)= op(a) * op(b)` with `op(a)` of shape `[m, k]` and `op(b)` of shape `[k, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], acc: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if acc { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index touched by the strided
    // product to the provided slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBroadcast(usize, usize),
    MulBroadcast(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Act(usize, Activation),
    Reshape(usize),
    Gather(usize, Rc<Vec<usize>>),
    Embedding {
        table: usize,
        idx: Rc<Vec<usize>>,
    },
    Softmax(usize),
    LayerNorm(usize, f64),
    MeanSpatial(usize),
    Sum(usize),
    Mean(usize),
    Mse(usize, usize),
    CrossEntropy {
        logits: usize,
        labels: Rc<Vec<usize>>,
    },
    KlDiv {
        student: usize,
        teacher: usize,
        temperature: f64,
        scale: f64,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(loss.graph, self), "variable from another graph");
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.add_scaled(&delta, 1.0),
        slot @ None => *slot = Some(delta),
    }
}

fn needs(nodes: &[Node], id: usize) -> bool {
    nodes[id].requires_grad
}

fn backprop_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let val = |i: usize| nodes[i].value.as_ref();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            if needs(nodes, *a) {
                accumulate(nodes, grads, *a, g.zip_map(val(*b), |x, y| x * y).unwrap());
            }
            if needs(nodes, *b) {
                accumulate(nodes, grads, *b, g.zip_map(val(*a), |x, y| x * y).unwrap());
            }
        }
        Op::Scale(a, s) => {
            let s = *s;
            accumulate(nodes, grads, *a, g.map(|v| v * s));
        }
        Op::AddBroadcast(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            if needs(nodes, *b) {
                let bv = val(*b);
                let n = bv.len();
                let mut gb = vec![0.0; n];
                for chunk in g.data().chunks(n) {
                    gb.iter_mut().zip(chunk).for_each(|(d, s)| *d += s);
                }
                accumulate(nodes, grads, *b, Tensor::new(bv.shape(), gb).unwrap());
            }
        }
        Op::MulBroadcast(a, b) => {
            let av = val(*a);
            let bv = val(*b);
            let n = bv.len();
            if needs(nodes, *a) {
                let mut ga = g.clone();
                for chunk in ga.data_mut().chunks_mut(n) {
                    chunk.iter_mut().zip(bv.data()).for_each(|(d, s)| *d *= s);
                }
                accumulate(nodes, grads, *a, ga);
            }
            if needs(nodes, *b) {
                let mut gb = vec![0.0; n];
                for (gc, ac) in g.data().chunks(n).zip(av.data().chunks(n)) {
                    for j in 0..n {
                        gb[j] += gc[j] * ac[j];
                    }
                }
                accumulate(nodes, grads, *b, Tensor::new(bv.shape(), gb).unwrap());
            }
        }
        Op::Linear { x, w, b } => {
            let xv = val(*x);
            let wv = val(*w);
            let (out_f, in_f) = (wv.shape()[0], wv.shape()[1]);
            let rows = xv.len() / in_f;
            if needs(nodes, *x) {
                let mut gx = vec![0.0; xv.len()];
                gemm(rows, out_f, in_f, g.data(), false, wv.data(), false, &mut gx, false);
                accumulate(nodes, grads, *x, Tensor::new(xv.shape(), gx).unwrap());
            }
            if needs(nodes, *w) {
                let mut gw = vec![0.0; wv.len()];
                gemm(out_f, rows, in_f, g.data(), true, xv.data(), false, &mut gw, false);
                accumulate(nodes, grads, *w, Tensor::new(wv.shape(), gw).unwrap());
            }
            if let Some(b) = b {
                if needs(nodes, *b) {
                    let mut gb = vec![0.0; out_f];
                    for chunk in g.data().chunks(out_f) {
                        gb.iter_mut().zip(chunk).for_each(|(d, s)| *d += s);
                    }
                    accumulate(nodes, grads, *b, Tensor::new(&[out_f], gb).unwrap());
                }
            }
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let av = val(*a);
            let bv = val(*b);
            let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = out.shape()[2];
            if needs(nodes, *a) {
                let mut ga = vec![0.0; av.len()];
                for i in 0..bs {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                    // ga = g * op(b)^T
                    gemm(m, n, k, gi, false, bi, !trans_b, &mut ga[i * m * k..(i + 1) * m * k], false);
                }
                accumulate(nodes, grads, *a, Tensor::new(av.shape(), ga).unwrap());
            }
            if needs(nodes, *b) {
                let mut gb = vec![0.0; bv.len()];
                for i in 0..bs {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    let ai = &av.data()[i * m * k..(i + 1) * m * k];
                    let dst = &mut gb[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        gemm(n, m, k, gi, true, ai, false, dst, false);
                    } else {
                        gemm(k, m, n, ai, true, gi, false, dst, false);
                    }
                }
                accumulate(nodes, grads, *b, Tensor::new(bv.shape(), gb).unwrap());
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let xv = val(*x);
            let wv = val(*w);
            let bs = xv.shape()[0];
            let o = wv.shape()[0];
            let (r, l) = (geom.rows(), geom.cols());
            let in_len = geom.channels * geom.height * geom.width;
            let mut cols = vec![0.0; r * l];
            let mut gcols = vec![0.0; r * l];
            let mut gx = needs(nodes, *x).then(|| vec![0.0; xv.len()]);
            let mut gw = needs(nodes, *w).then(|| vec![0.0; wv.len()]);
            for i in 0..bs {
                let gi = &g.data()[i * o * l..(i + 1) * o * l];
                if let Some(gw) = gw.as_mut() {
                    geom.im2col(&xv.data()[i * in_len..(i + 1) * in_len], &mut cols);
                    gemm(o, l, r, gi, false, &cols, true, gw, true);
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(r, o, l, wv.data(), true, gi, false, &mut gcols, false);
                    geom.col2im(&gcols, &mut gx[i * in_len..(i + 1) * in_len]);
                }
            }
            if let Some(gx) = gx {
                accumulate(nodes, grads, *x, Tensor::new(xv.shape(), gx).unwrap());
            }
            if let Some(gw) = gw {
                accumulate(nodes, grads, *w, Tensor::new(wv.shape(), gw).unwrap());
            }
            if let Some(b) = b {
                accumulate(nodes, grads, *b, channel_sums(g, o));
            }
        }
        Op::ConvTranspose2d { x, w, b, geom } => {
            // `geom` describes the adjoint convolution: its input is this op's
            // output and its output grid is this op's input grid.
            let xv = val(*x);
            let wv = val(*w);
            let bs = xv.shape()[0];
            let cin = wv.shape()[0];
            let (r, l) = (geom.rows(), geom.cols());
            let out_len = geom.channels * geom.height * geom.width;
            let mut gcols = vec![0.0; r * l];
            let mut gx = needs(nodes, *x).then(|| vec![0.0; xv.len()]);
            let mut gw = needs(nodes, *w).then(|| vec![0.0; wv.len()]);
            for i in 0..bs {
                geom.im2col(&g.data()[i * out_len..(i + 1) * out_len], &mut gcols);
                let xi = &xv.data()[i * cin * l..(i + 1) * cin * l];
                if let Some(gx) = gx.as_mut() {
                    gemm(cin, r, l, wv.data(), false, &gcols, false, &mut gx[i * cin * l..(i + 1) * cin * l], false);
                }
                if let Some(gw) = gw.as_mut() {
                    gemm(cin, l, r, xi, false, &gcols, true, gw, true);
                }
            }
            if let Some(gx) = gx {
                accumulate(nodes, grads, *x, Tensor::new(xv.shape(), gx).unwrap());
            }
            if let Some(gw) = gw {
                accumulate(nodes, grads, *w, Tensor::new(wv.shape(), gw).unwrap());
            }
            if let Some(b) = b {
                accumulate(nodes, grads, *b, channel_sums(g, geom.channels));
            }
        }
        Op::Act(a, kind) => {
            let av = val(*a);
            let data = g
                .data()
                .iter()
                .zip(av.data())
                .zip(out.data())
                .map(|((gv, &x), &y)| gv * kind.derivative(x, y))
                .collect();
            accumulate(nodes, grads, *a, Tensor::new(av.shape(), data).unwrap());
        }
        Op::Reshape(a) => {
            let shape = val(*a).shape().to_vec();
            accumulate(nodes, grads, *a, g.clone().reshape(&shape).unwrap());
        }
        Op::Gather(a, idx) => {
            let av = val(*a);
            let mut ga = vec![0.0; av.len()];
            for (gv, &src) in g.data().iter().zip(idx.iter()) {
                ga[src] += gv;
            }
            accumulate(nodes, grads, *a, Tensor::new(av.shape(), ga).unwrap());
        }
        Op::Embedding { table, idx } => {
            let tv = val(*table);
            let dim = tv.shape()[1];
            let mut gt = vec![0.0; tv.len()];
            for (r, &row) in idx.iter().enumerate() {
                for j in 0..dim {
                    gt[row * dim + j] += g.data()[r * dim + j];
                }
            }
            accumulate(nodes, grads, *table, Tensor::new(tv.shape(), gt).unwrap());
        }
        Op::Softmax(a) => {
            let n = *out.shape().last().unwrap();
            let mut ga = vec![0.0; out.len()];
            for ((dst, gc), yc) in ga.chunks_mut(n).zip(g.data().chunks(n)).zip(out.data().chunks(n)) {
                let dot: f64 = gc.iter().zip(yc).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    dst[j] = yc[j] * (gc[j] - dot);
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(out.shape(), ga).unwrap());
        }
        Op::LayerNorm(a, eps) => {
            let av = val(*a);
            let n = *out.shape().last().unwrap();
            let mut ga = vec![0.0; out.len()];
            for (((dst, gc), yc), xc) in ga
                .chunks_mut(n)
                .zip(g.data().chunks(n))
                .zip(out.data().chunks(n))
                .zip(av.data().chunks(n))
            {
                let mu = xc.iter().sum::<f64>() / n as f64;
                let var = xc.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let gm = gc.iter().sum::<f64>() / n as f64;
                let gym = gc.iter().zip(yc).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for j in 0..n {
                    dst[j] = inv * (gc[j] - gm - yc[j] * gym);
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(out.shape(), ga).unwrap());
        }
        Op::MeanSpatial(a) => {
            let av = val(*a);
            let hw = av.shape()[2] * av.shape()[3];
            let mut ga = vec![0.0; av.len()];
            for (dst, gv) in ga.chunks_mut(hw).zip(g.data()) {
                dst.iter_mut().for_each(|d| *d = gv / hw as f64);
            }
            accumulate(nodes, grads, *a, Tensor::new(av.shape(), ga).unwrap());
        }
        Op::Sum(a) => {
            let shape = val(*a).shape().to_vec();
            accumulate(nodes, grads, *a, Tensor::full(&shape, g.item()));
        }
        Op::Mean(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, Tensor::full(av.shape(), g.item() / av.len() as f64));
        }
        Op::Mse(a, b) => {
            let av = val(*a);
            let bv = val(*b);
            let s = 2.0 * g.item() / av.len() as f64;
            let diff = av.zip_map(bv, |x, y| s * (x - y)).unwrap();
            if needs(nodes, *b) {
                accumulate(nodes, grads, *b, diff.map(|v| -v));
            }
            accumulate(nodes, grads, *a, diff);
        }
        Op::CrossEntropy { logits, labels } => {
            let lv = val(*logits);
            let n = lv.shape()[1];
            let bs = lv.shape()[0] as f64;
            let mut gl = softmax_rows(lv.data(), n, 1.0);
            for (i, &y) in labels.iter().enumerate() {
                gl[i * n + y] -= 1.0;
            }
            let s = g.item() / bs;
            gl.iter_mut().for_each(|v| *v *= s);
            accumulate(nodes, grads, *logits, Tensor::new(lv.shape(), gl).unwrap());
        }
        Op::KlDiv {
            student,
            teacher,
            temperature,
            scale,
        } => {
            let sv = val(*student);
            let tv = val(*teacher);
            let n = sv.shape()[1];
            let bs = sv.shape()[0] as f64;
            let ps = softmax_rows(sv.data(), n, *temperature);
            let pt = softmax_rows(tv.data(), n, *temperature);
            let s = g.item() * scale / (bs * temperature);
            if needs(nodes, *student) {
                let gs = ps.iter().zip(&pt).map(|(a, b)| s * (a - b)).collect();
                accumulate(nodes, grads, *student, Tensor::new(sv.shape(), gs).unwrap());
            }
            if needs(nodes, *teacher) {
                let mut gt = vec![0.0; pt.len()];
                for ((dst, pc), qc) in gt.chunks_mut(n).zip(pt.chunks(n)).zip(ps.chunks(n)) {
                    let logs: Vec<f64> = pc
                        .iter()
                        .zip(qc)
                        .map(|(p, q)| if *p > 0.0 { p.ln() - q.ln() } else { 0.0 })
                        .collect();
                    let kl: f64 = pc.iter().zip(&logs).map(|(p, l)| p * l).sum();
                    for j in 0..n {
                        dst[j] = s * pc[j] * (logs[j] - kl);
                    }
                }
                accumulate(nodes, grads, *teacher, Tensor::new(tv.shape(), gt).unwrap());
            }
        }
    }
}

fn channel_sums(g: &Tensor, channels: usize) -> Tensor {
    let hw = g.len() / (g.shape()[0] * channels);
    let mut gb = vec![0.0; channels];
    for (i, chunk) in g.data().chunks(hw).enumerate() {
        gb[i % channels] += chunk.iter().sum::<f64>();
    }
    Tensor::new(&[channels], gb).unwrap()
}

/// Row-wise `softmax(x / temperature)` over rows of length `n`.
pub fn softmax_rows(x: &[f64], n: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (dst, row) in out.chunks_mut(n).zip(x.chunks(n)) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v / temperature - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

/// Row-wise `log_softmax(x / temperature)`.
pub fn log_softmax_rows(x: &[f64], n: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (dst, row) in out.chunks_mut(n).zip(x.chunks(n)) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
        let lse = max + row.iter().map(|&v| (v / temperature - max).exp()).sum::<f64>().ln();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = v / temperature - lse;
        }
    }
    out
}

/// Per-variable gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like it when nothing flowed back.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape().as_slice()))
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
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn same_graph(&self, other: Var<'g>) {
        assert!(std::ptr::eq(self.graph, other.graph), "variables from different graphs");
    }

    fn derive(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'g> {
        let req = self.graph.requires(parents);
        self.graph.push(value, op, req)
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other);
        let v = self.value().zip_map(&other.value(), |a, b| a + b)?;
        Ok(self.derive(v, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other);
        let v = self.value().zip_map(&other.value(), |a, b| a - b)?;
        Ok(self.derive(v, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other);
        let v = self.value().zip_map(&other.value(), |a, b| a * b)?;
        Ok(self.derive(v, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let v = self.value().map(|a| a * s);
        self.derive(v, Op::Scale(self.id, s), &[self.id])
    }

    fn check_suffix(&self, other: &Var<'g>) -> Result<()> {
        let a = self.shape();
        let b = other.shape();
        if b.len() > a.len() || a[a.len() - b.len()..] != b[..] {
            return Err(Error::Shape(format!("cannot broadcast {b:?} onto {a:?}")));
        }
        Ok(())
    }

    /// `self + other` where `other`'s shape is a suffix of `self`'s.
    pub fn add_broadcast(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other);
        self.check_suffix(&other)?;
        let b = other.value();
        let mut v = (*self.value()).clone();
        for chunk in v.data_mut().chunks_mut(b.len()) {
            chunk.iter_mut().zip(b.data()).for_each(|(d, s)| *d += s);
        }
        Ok(self.derive(v, Op::AddBroadcast(self.id, other.id), &[self.id, other.id]))
    }

    /// `self * other` where `other`'s shape is a suffix of `self`'s.
    pub fn mul_broadcast(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other);
        self.check_suffix(&other)?;
        let b = other.value();
        let mut v = (*self.value()).clone();
        for chunk in v.data_mut().chunks_mut(b.len()) {
            chunk.iter_mut().zip(b.data()).for_each(|(d, s)| *d *= s);
        }
        Ok(self.derive(v, Op::MulBroadcast(self.id, other.id), &[self.id, other.id]))
    }

    /// Affine map over the last axis: `self @ w^T + b` with `w: [out, in]`.
    pub fn linear(self, w: Var<'g>, b: Option<Var<'g>>) -> Result<Var<'g>> {
        self.same_graph(w);
        let x = self.value();
        let wv = w.value();
        let (out_f, in_f) = (wv.shape()[0], wv.shape()[1]);
        if x.shape().last() != Some(&in_f) {
            return Err(Error::Shape(format!(
                "linear layer expects last axis {in_f}, got input {:?}",
                x.shape()
            )));
        }
        let rows = x.len() / in_f;
        let mut y = vec![0.0; rows * out_f];
        gemm(rows, in_f, out_f, x.data(), false, wv.data(), true, &mut y, false);
        let mut parents = vec![self.id, w.id];
        if let Some(b) = b {
            let bv = b.value();
            bv.expect_shape(&[out_f])?;
            for chunk in y.chunks_mut(out_f) {
                chunk.iter_mut().zip(bv.data()).for_each(|(d, s)| *d += s);
            }
            parents.push(b.id);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = out_f;
        let v = Tensor::new(&shape, y)?;
        Ok(self.derive(
            v,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
            &parents,
        ))
    }

    /// Batched product of `[B, M, K]` and `[B, K, N]` (or `[B, N, K]` with `trans_b`).
    pub fn batch_matmul(self, other: Var<'g>, trans_b: bool) -> Result<Var<'g>> {
        self.same_graph(other);
        let a = self.value();
        let b = other.value();
        if a.shape().len() != 3 || b.shape().len() != 3 || a.shape()[0] != b.shape()[0] {
            return Err(Error::Shape(format!(
                "batch_matmul needs matching 3-d operands, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (kb, n) = if trans_b {
            (b.shape()[2], b.shape()[1])
        } else {
            (b.shape()[1], b.shape()[2])
        };
        if kb != k {
            return Err(Error::Shape(format!(
                "inner dimensions differ: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut y = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                false,
                &b.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut y[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let v = Tensor::new(&[bs, m, n], y)?;
        Ok(self.derive(
            v,
            Op::BatchMatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
            &[self.id, other.id],
        ))
    }

    /// 2-d convolution of `[B, C, H, W]` with `w: [O, C, k, k]`.
    pub fn conv2d(self, w: Var<'g>, b: Option<Var<'g>>, stride: usize, pad: usize) -> Result<Var<'g>> {
        self.same_graph(w);
        let x = self.value();
        let wv = w.value();
        if x.shape().len() != 4 || wv.shape().len() != 4 || wv.shape()[1] != x.shape()[1] {
            return Err(Error::Shape(format!(
                "conv2d: input {:?} incompatible with kernel {:?}",
                x.shape(),
                wv.shape()
            )));
        }
        let (bs, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let o = wv.shape()[0];
        let geom = ConvGeom::new(c, h, wd, wv.shape()[2], stride, pad)?;
        let (r, l) = (geom.rows(), geom.cols());
        let in_len = c * h * wd;
        let mut cols = vec![0.0; r * l];
        let mut y = vec![0.0; bs * o * l];
        for i in 0..bs {
            geom.im2col(&x.data()[i * in_len..(i + 1) * in_len], &mut cols);
            gemm(o, r, l, wv.data(), false, &cols, false, &mut y[i * o * l..(i + 1) * o * l], false);
        }
        let mut parents = vec![self.id, w.id];
        if let Some(b) = b {
            add_channel_bias(&mut y, &b.value(), o, l)?;
            parents.push(b.id);
        }
        let v = Tensor::new(&[bs, o, geom.out_h, geom.out_w], y)?;
        Ok(self.derive(
            v,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                geom,
            },
            &parents,
        ))
    }

    /// Transposed convolution of `[B, Cin, H, W]` with `w: [Cin, Cout, k, k]`.
    pub fn conv_transpose2d(self, w: Var<'g>, b: Option<Var<'g>>, stride: usize, pad: usize) -> Result<Var<'g>> {
        self.same_graph(w);
        let x = self.value();
        let wv = w.value();
        if x.shape().len() != 4 || wv.shape().len() != 4 || wv.shape()[0] != x.shape()[1] {
            return Err(Error::Shape(format!(
                "conv_transpose2d: input {:?} incompatible with kernel {:?}",
                x.shape(),
                wv.shape()
            )));
        }
        let (bs, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, k) = (wv.shape()[1], wv.shape()[2]);
        let out_h = (h - 1) * stride + k;
        let out_w = (wd - 1) * stride + k;
        if out_h <= 2 * pad || out_w <= 2 * pad {
            return Err(Error::Shape("transposed convolution output is empty".into()));
        }
        let geom = ConvGeom::new(cout, out_h - 2 * pad, out_w - 2 * pad, k, stride, pad)?;
        debug_assert_eq!((geom.out_h, geom.out_w), (h, wd));
        let (r, l) = (geom.rows(), geom.cols());
        let out_len = cout * geom.height * geom.width;
        let mut cols = vec![0.0; r * l];
        let mut y = vec![0.0; bs * out_len];
        for i in 0..bs {
            gemm(r, cin, l, wv.data(), true, &x.data()[i * cin * l..(i + 1) * cin * l], false, &mut cols, false);
            geom.col2im(&cols, &mut y[i * out_len..(i + 1) * out_len]);
        }
        let mut parents = vec![self.id, w.id];
        if let Some(b) = b {
            add_channel_bias(&mut y, &b.value(), cout, geom.height * geom.width)?;
            parents.push(b.id);
        }
        let v = Tensor::new(&[bs, cout, geom.height, geom.width], y)?;
        Ok(self.derive(
            v,
            Op::ConvTranspose2d {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                geom,
            },
            &parents,
        ))
    }

    pub fn act(self, kind: Activation) -> Var<'g> {
        let v = self.value().map(|x| kind.apply(x));
        self.derive(v, Op::Act(self.id, kind), &[self.id])
    }

    pub fn tanh(self) -> Var<'g> {
        self.act(Activation::Tanh)
    }

    pub fn relu(self) -> Var<'g> {
        self.act(Activation::Relu)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.act(Activation::Sigmoid)
    }

    pub fn silu(self) -> Var<'g> {
        self.act(Activation::Silu)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.derive(v, Op::Reshape(self.id), &[self.id]))
    }

    /// `out.flat[i] = self.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(self, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        if shape.iter().product::<usize>() != index.len() || index.iter().any(|&i| i >= a.len()) {
            return Err(Error::Shape("gather index does not fit".into()));
        }
        let data = index.iter().map(|&i| a.data()[i]).collect();
        let v = Tensor::new(shape, data)?;
        Ok(self.derive(v, Op::Gather(self.id, index), &[self.id]))
    }

    /// Rows of a `[num, dim]` table selected by `idx`.
    pub fn embedding(self, idx: &[usize]) -> Result<Var<'g>> {
        let t = self.value();
        if t.shape().len() != 2 {
            return Err(Error::Shape("embedding table must be 2-d".into()));
        }
        let (num, dim) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= num) {
            return Err(Error::Data(format!("index {bad} outside embedding table of {num} rows")));
        }
        let v = t.select(idx);
        debug_assert_eq!(v.shape(), &[idx.len(), dim]);
        Ok(self.derive(
            v,
            Op::Embedding {
                table: self.id,
                idx: Rc::new(idx.to_vec()),
            },
            &[self.id],
        ))
    }

    pub fn softmax(self) -> Var<'g> {
        let a = self.value();
        let n = *a.shape().last().unwrap();
        let v = Tensor::new(a.shape(), softmax_rows(a.data(), n, 1.0)).unwrap();
        self.derive(v, Op::Softmax(self.id), &[self.id])
    }

    /// Normalise the last axis to zero mean and unit variance.
    pub fn layer_norm(self, eps: f64) -> Var<'g> {
        let a = self.value();
        let n = *a.shape().last().unwrap();
        let mut y = a.data().to_vec();
        for chunk in y.chunks_mut(n) {
            let mu = chunk.iter().sum::<f64>() / n as f64;
            let var = chunk.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            chunk.iter_mut().for_each(|v| *v = (*v - mu) * inv);
        }
        let v = Tensor::new(a.shape(), y).unwrap();
        self.derive(v, Op::LayerNorm(self.id, eps), &[self.id])
    }

    /// `[B, C, H, W] -> [B, C]` spatial average.
    pub fn mean_spatial(self) -> Result<Var<'g>> {
        let a = self.value();
        if a.shape().len() != 4 {
            return Err(Error::Shape("mean_spatial needs a 4-d input".into()));
        }
        let (b, c) = (a.shape()[0], a.shape()[1]);
        let hw = a.shape()[2] * a.shape()[3];
        let data = a.data().chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect();
        let v = Tensor::new(&[b, c], data)?;
        Ok(self.derive(v, Op::MeanSpatial(self.id), &[self.id]))
    }

    pub fn sum(self) -> Var<'g> {
        let v = Tensor::scalar(self.value().sum());
        self.derive(v, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'g> {
        let v = Tensor::scalar(self.value().mean());
        self.derive(v, Op::Mean(self.id), &[self.id])
    }

    /// Mean over all elements of `(self - target)^2`.
    pub fn mse(self, target: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(target);
        let d = self.value().zip_map(&target.value(), |a, b| (a - b) * (a - b))?;
        let v = Tensor::scalar(d.mean());
        Ok(self.derive(v, Op::Mse(self.id, target.id), &[self.id, target.id]))
    }

    /// Mean softmax cross-entropy of `[B, N]` logits against class labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'g>> {
        let l = self.value();
        if l.shape().len() != 2 || l.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: logits {:?} vs {} labels",
                l.shape(),
                labels.len()
            )));
        }
        let n = l.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
            return Err(Error::Data(format!("label {bad} outside {n} classes")));
        }
        let ls = log_softmax_rows(l.data(), n, 1.0);
        let loss = -labels.iter().enumerate().map(|(i, &y)| ls[i * n + y]).sum::<f64>() / labels.len() as f64;
        Ok(self.derive(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                labels: Rc::new(labels.to_vec()),
            },
            &[self.id],
        ))
    }

    /// Batch-mean `KL(softmax(teacher/T) || softmax(self/T))`, multiplied by `scale`.
    pub fn kl_div(self, teacher: Var<'g>, temperature: f64, scale: f64) -> Result<Var<'g>> {
        self.same_graph(teacher);
        let s = self.value();
        let t = teacher.value();
        t.expect_shape(s.shape())?;
        let v = Tensor::scalar(scale * kl_value(&s, &t, temperature)?);
        Ok(self.derive(
            v,
            Op::KlDiv {
                student: self.id,
                teacher: teacher.id,
                temperature,
                scale,
            },
            &[self.id, teacher.id],
        ))
    }
}

fn add_channel_bias(y: &mut [f64], bias: &Tensor, channels: usize, plane: usize) -> Result<()> {
    bias.expect_shape(&[channels])?;
    for (i, chunk) in y.chunks_mut(plane).enumerate() {
        let b = bias.data()[i % channels];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(())
}

/// Batch-mean `KL(softmax(teacher/T) || softmax(student/T))` for `[B, N]` logits.
pub fn kl_value(student: &Tensor, teacher: &Tensor, temperature: f64) -> Result<f64> {
    student.expect_shape(teacher.shape())?;
    if student.shape().len() != 2 {
        return Err(Error::Shape("logits must be [batch, classes]".into()));
    }
    let n = student.shape()[1];
    let ls = log_softmax_rows(student.data(), n, temperature);
    let lt = log_softmax_rows(teacher.data(), n, temperature);
    let mut total = 0.0;
    for (a, b) in lt.iter().zip(&ls) {
        let p = a.exp();
        if p > 0.0 {
            total += p * (a - b);
        }
    }
    Ok((total / student.shape()[0] as f64).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            let scale = x.abs().max(y.abs()).max(1e-3);
            assert!((x - y).abs() / scale < tol, "analytic {x} vs numeric {y}");
        }
    }

    /// Check d(f)/d(input) for a unary graph builder.
    fn check_unary(x: Tensor, build: impl for<'g> Fn(Var<'g>) -> Var<'g>) {
        let g = Graph::new();
        let v = g.param(x.clone());
        let loss = build(v);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(v).unwrap().clone();
        let numeric = numeric_grad(&x, |t| {
            let g = Graph::new();
            build(g.param(t.clone())).item()
        });
        assert_close(&analytic, &numeric, 1e-5);
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn conv2d_gradients() {
        let mut r = rng();
        let x = Tensor::randn(&mut r, &[2, 2, 5, 5], 1.0);
        let w = Tensor::randn(&mut r, &[3, 2, 3, 3], 0.5);
        let b = Tensor::randn(&mut r, &[3], 0.5);
        let probe = Tensor::randn(&mut r, &[2, 3, 3, 3], 1.0);
        for (stride, pad) in [(1, 1), (2, 1)] {
            let geo_probe = if stride == 1 { Tensor::randn(&mut r, &[2, 3, 5, 5], 1.0) } else { probe.clone() };
            let wc = w.clone();
            let bc = b.clone();
            let pc = geo_probe.clone();
            check_unary(x.clone(), move |v| {
                let g = v.graph();
                let y = v.conv2d(g.constant(wc.clone()), Some(g.constant(bc.clone())), stride, pad).unwrap();
                y.mul(g.constant(pc.clone())).unwrap().sum()
            });
            let xc = x.clone();
            let pc = geo_probe.clone();
            check_unary(w.clone(), move |v| {
                let g = v.graph();
                let y = g.constant(xc.clone()).conv2d(v, None, stride, pad).unwrap();
                y.mul(g.constant(pc.clone())).unwrap().sum()
            });
        }
    }

    #[test]
    fn conv_transpose2d_gradients() {
        let mut r = rng();
        let x = Tensor::randn(&mut r, &[2, 2, 4, 4], 1.0);
        let w = Tensor::randn(&mut r, &[2, 3, 3, 3], 0.5);
        let b = Tensor::randn(&mut r, &[3], 0.5);
        for (stride, pad, out) in [(1, 1, 4), (2, 1, 7)] {
            let probe = Tensor::randn(&mut r, &[2, 3, out, out], 1.0);
            let (wc, bc, pc) = (w.clone(), b.clone(), probe.clone());
            check_unary(x.clone(), move |v| {
                let g = v.graph();
                let y = v
                    .conv_transpose2d(g.constant(wc.clone()), Some(g.constant(bc.clone())), stride, pad)
                    .unwrap();
                y.mul(g.constant(pc.clone())).unwrap().sum()
            });
            let (xc, pc) = (x.clone(), probe.clone());
            check_unary(w.clone(), move |v| {
                let g = v.graph();
                let y = g.constant(xc.clone()).conv_transpose2d(v, None, stride, pad).unwrap();
                y.mul(g.constant(pc.clone())).unwrap().sum()
            });
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> for shared weights.
        let mut r = rng();
        let x = Tensor::randn(&mut r, &[1, 2, 5, 5], 1.0);
        let w = Tensor::randn(&mut r, &[3, 2, 3, 3], 1.0);
        let g = Graph::new();
        let cx = g.constant(x.clone()).conv2d(g.constant(w.clone()), None, 2, 1).unwrap();
        let y = Tensor::randn(&mut r, &cx.shape(), 1.0);
        let lhs: f64 = cx.value().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let ty = g.constant(y).conv_transpose2d(g.constant(w), None, 2, 1).unwrap();
        assert_eq!(ty.shape(), x.shape());
        let rhs: f64 = ty.value().data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn linear_matmul_and_pointwise_gradients() {
        let mut r = rng();
        let x = Tensor::randn(&mut r, &[3, 4], 1.0);
        let w = Tensor::randn(&mut r, &[5, 4], 1.0);
        let b = Tensor::randn(&mut r, &[5], 1.0);
        for act in [Activation::Tanh, Activation::Relu, Activation::Sigmoid, Activation::Silu] {
            let (wc, bc) = (w.clone(), b.clone());
            check_unary(x.clone(), move |v| {
                let g = v.graph();
                let y = v.linear(g.constant(wc.clone()), Some(g.constant(bc.clone()))).unwrap();
                y.act(act).layer_norm(1e-5).softmax().mul(y).unwrap().sum()
            });
        }
        let xc = x.clone();
        check_unary(w.clone(), move |v| {
            let g = v.graph();
            g.constant(xc.clone()).linear(v, None).unwrap().silu().mean()
        });
        let a = Tensor::randn(&mut r, &[2, 3, 4], 1.0);
        let bm = Tensor::randn(&mut r, &[2, 5, 4], 1.0);
        for trans in [true, false] {
            let bb = if trans { bm.clone() } else { bm.clone().reshape(&[2, 4, 5]).unwrap() };
            let bc = bb.clone();
            check_unary(a.clone(), move |v| {
                let g = v.graph();
                v.batch_matmul(g.constant(bc.clone()), trans).unwrap().tanh().sum()
            });
            let ac = a.clone();
            check_unary(bb, move |v| {
                let g = v.graph();
                g.constant(ac.clone()).batch_matmul(v, trans).unwrap().tanh().sum()
            });
        }
    }

    #[test]
    fn broadcast_gather_and_loss_gradients() {
        let mut r = rng();
        let x = Tensor::randn(&mut r, &[3, 4], 1.0);
        let bias = Tensor::randn(&mut r, &[4], 1.0);
        let bc = bias.clone();
        check_unary(x.clone(), move |v| {
            let g = v.graph();
            let b = g.constant(bc.clone());
            v.add_broadcast(b).unwrap().mul_broadcast(b).unwrap().tanh().sum()
        });
        let xc = x.clone();
        check_unary(bias, move |v| {
            let g = v.graph();
            g.constant(xc.clone()).mul_broadcast(v).unwrap().add_broadcast(v).unwrap().tanh().sum()
        });
        let idx = Rc::new(vec![3, 0, 0, 11, 5, 6]);
        check_unary(x.clone(), move |v| v.gather(idx.clone(), &[2, 3]).unwrap().tanh().sum());
        check_unary(x.clone(), |v| v.embedding(&[2, 0, 2]).unwrap().relu().sum());
        let t = Tensor::randn(&mut r, &[3, 4], 1.0);
        let tc = t.clone();
        check_unary(x.clone(), move |v| v.mse(v.graph().constant(tc.clone())).unwrap());
        check_unary(x.clone(), |v| v.cross_entropy(&[1, 3, 0]).unwrap());
        let tc = t.clone();
        check_unary(x.clone(), move |v| v.kl_div(v.graph().constant(tc.clone()), 2.5, 6.25).unwrap());
        let sc = x.clone();
        check_unary(t, move |v| v.graph().constant(sc.clone()).kl_div(v, 1.7, 1.0).unwrap());
        let img = Tensor::randn(&mut r, &[2, 3, 2, 2], 1.0);
        check_unary(img, |v| v.mean_spatial().unwrap().tanh().sum());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::new();
        let c = g.constant(Tensor::full(&[2], 3.0));
        let p = g.param(Tensor::full(&[2], 2.0));
        let loss = c.mul(p).unwrap().sum();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn kl_of_identical_logits_is_zero() {
        let t = Tensor::new(&[1, 3], vec![0.3, -1.0, 2.0]).unwrap();
        assert!(kl_value(&t, &t, 1.0).unwrap().abs() < 1e-15);
    }
}
