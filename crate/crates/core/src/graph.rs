//! Define-by-run reverse-mode tape over [`Tensor`].
//!
//! Every forward pass builds a fresh `Graph`; `backward` walks the tape in
//! reverse and accumulates gradients for trainable leaves. The op set is
//! exactly what the pipeline needs — no broadcasting rules beyond
//! right-aligned suffix broadcast.

use std::rc::Rc;

use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// b's shape is a right-aligned suffix of a's shape.
    AddBcast(Var, Var),
    /// b's shape is a right-aligned suffix of a's shape.
    MulBcast(Var, Var),
    Scale(Var, f64),
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    /// Softmax over the last axis restricted to `mask`; unmasked rows sum to 1,
    /// masked entries are exactly 0, fully-masked rows are all-zero.
    MaskedSoftmax {
        x: Var,
        mask: Rc<Vec<bool>>,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    /// x has last dim 1; repeats it n times.
    RepeatLast {
        x: Var,
        n: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(Var),
    /// One-hot of the last-axis argmax (ties -> lowest index); identity gradient.
    StraightThrough(Var),
    /// Sum over masked rows of -log softmax(logits)[label]; scalar output.
    CrossEntropySum {
        logits: Var,
        labels: Rc<Vec<usize>>,
        mask: Rc<Vec<bool>>,
    },
    SumAll(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, or zeros of the given shape when it never received one.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.grads[v.0].as_ref() {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-trainable input (data, masks, noise).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf; receives a gradient in `backward`.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).mul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    fn check_suffix(&self, a: Var, b: Var, what: &str) {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        assert!(
            sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb,
            "{what}: {:?} is not a suffix of {:?}",
            sb,
            sa
        );
    }

    pub fn add_bcast(&mut self, a: Var, b: Var) -> Var {
        self.check_suffix(a, b, "add_bcast");
        let bl = self.value(b).len();
        let bd = self.value(b).data().to_vec();
        let mut v = self.value(a).clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x += bd[i % bl];
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::AddBcast(a, b), ng)
    }

    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Var {
        self.check_suffix(a, b, "mul_bcast");
        let bl = self.value(b).len();
        let bd = self.value(b).data().to_vec();
        let mut v = self.value(a).clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x *= bd[i % bl];
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MulBcast(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let v = self.value(a).matmul(self.value(b), ta, tb);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Matmul { a, b, ta, tb }, ng)
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        self.bmm_t(a, b, false, false)
    }

    pub fn bmm_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let v = self.value(a).bmm(self.value(b), ta, tb);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Bmm { a, b, ta, tb }, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        let ng = self.needs(a);
        self.push(v, Op::LeakyRelu(a, slope), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let mask = Rc::new(vec![true; self.value(x).len()]);
        self.masked_softmax(x, mask)
    }

    pub fn masked_softmax(&mut self, x: Var, mask: Rc<Vec<bool>>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), mask.len(), "masked_softmax mask length");
        let cols = *xv.shape().last().expect("masked_softmax needs rank >= 1");
        let v = masked_softmax_value(xv, &mask, cols);
        let ng = self.needs(x);
        self.push(v, Op::MaskedSoftmax { x, mask }, ng)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let v = reduce_axis(self.value(x), axis, false);
        let ng = self.needs(x);
        self.push(v, Op::SumAxis { x, axis }, ng)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let v = reduce_axis(self.value(x), axis, true);
        let ng = self.needs(x);
        self.push(v, Op::MeanAxis { x, axis }, ng)
    }

    pub fn repeat_last(&mut self, x: Var, n: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(
            *xv.shape().last().expect("repeat_last rank"),
            1,
            "repeat_last input must end in 1"
        );
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut data = Vec::with_capacity(xv.len() * n);
        for &v in xv.data() {
            data.extend(std::iter::repeat(v).take(n));
        }
        let ng = self.needs(x);
        self.push(Tensor::new(shape, data), Op::RepeatLast { x, n }, ng)
    }

    /// Mean over the last axis, kept and broadcast back to the input shape.
    pub fn mean_last_bcast(&mut self, x: Var) -> Var {
        let rank = self.value(x).rank();
        let n = *self.value(x).shape().last().unwrap();
        let m = self.mean_axis(x, rank - 1);
        let mut shape = self.value(m).shape().to_vec();
        shape.push(1);
        let m1 = self.reshape(m, shape);
        self.repeat_last(m1, n)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let first = self.value(parts[0]).shape().to_vec();
        let mut axis_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                if d != axis {
                    assert_eq!(a, b, "concat non-axis dim mismatch");
                }
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; shape.iter().product()];
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            let pa = pv.shape()[axis];
            let chunk = pa * inner;
            for o in 0..outer {
                let src = &pv.data()[o * chunk..(o + 1) * chunk];
                let dst_start = o * axis_total * inner + offset * inner;
                data[dst_start..dst_start + chunk].copy_from_slice(src);
            }
            offset += pa;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::new(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        assert!(start + len <= shape[axis], "slice out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_start = o * shape[axis] * inner + start * inner;
            let dst_start = o * len * inner;
            data[dst_start..dst_start + len * inner]
                .copy_from_slice(&xv.data()[src_start..src_start + len * inner]);
        }
        let ng = self.needs(x);
        self.push(
            Tensor::new(out_shape, data),
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let v = self.value(x).clone().reshaped(shape);
        let ng = self.needs(x);
        self.push(v, Op::Reshape(x), ng)
    }

    pub fn straight_through(&mut self, soft: Var) -> Var {
        let xv = self.value(soft);
        let cols = *xv.shape().last().expect("straight_through rank");
        let mut data = vec![0.0; xv.len()];
        for r in 0..xv.len() / cols {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            data[r * cols + best] = 1.0;
        }
        let ng = self.needs(soft);
        self.push(
            Tensor::new(xv.shape().to_vec(), data),
            Op::StraightThrough(soft),
            ng,
        )
    }

    /// Sum of -log p(label) over rows with mask=true. Returns a scalar var.
    pub fn cross_entropy_sum(&mut self, logits: Var, labels: Rc<Vec<usize>>, mask: Rc<Vec<bool>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rank(), 2, "cross_entropy_sum expects 2D logits");
        let (n, c) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(labels.len(), n);
        assert_eq!(mask.len(), n);
        let mut total = 0.0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let row = &lv.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[labels[i]];
        }
        let ng = self.needs(logits);
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropySum {
                logits,
                labels,
                mask,
            },
            ng,
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).data().iter().sum());
        let ng = self.needs(x);
        self.push(v, Op::SumAll(x), ng)
    }

    /// Reverse pass from a scalar loss. Gradients accumulate for every node
    /// on a path from a trainable leaf to `loss`.
    pub fn backward(&mut self, loss: Var) -> GradStore {
        assert_eq!(
            self.value(loss).len(),
            1,
            "backward expects a scalar loss"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![1.0],
        ));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        GradStore { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.needs(v) {
            return;
        }
        debug_assert_eq!(self.value(v).shape(), delta.shape(), "grad shape mismatch");
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, g.mul(self.value(*b)));
                self.accumulate(grads, *b, g.mul(self.value(*a)));
            }
            Op::AddBcast(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    self.accumulate(grads, *b, reduce_to_suffix(g, self.value(*b).shape()));
                }
            }
            Op::MulBcast(a, b) => {
                if self.needs(*a) {
                    let bl = self.value(*b).len();
                    let bd = self.value(*b).data();
                    let mut da = g.clone();
                    for (i, x) in da.data_mut().iter_mut().enumerate() {
                        *x *= bd[i % bl];
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let prod = g.mul(self.value(*a));
                    self.accumulate(grads, *b, reduce_to_suffix(&prod, self.value(*b).shape()));
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.scale(*c));
            }
            Op::Matmul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da = if !ta {
                        g.matmul(bv, false, !tb)
                    } else {
                        bv.matmul(g, *tb, true)
                    };
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = if !tb {
                        av.matmul(g, !ta, false)
                    } else {
                        g.matmul(av, true, *ta)
                    };
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da = if !ta {
                        g.bmm(bv, false, !tb)
                    } else {
                        bv.bmm(g, *tb, true)
                    };
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = if !tb {
                        av.bmm(g, !ta, false)
                    } else {
                        g.bmm(av, true, *ta)
                    };
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let mut da = g.clone();
                for (x, &inp) in da.data_mut().iter_mut().zip(av.data()) {
                    if inp < 0.0 {
                        *x = 0.0;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::LeakyRelu(a, slope) => {
                let av = self.value(*a);
                let mut da = g.clone();
                for (x, &inp) in da.data_mut().iter_mut().zip(av.data()) {
                    if inp < 0.0 {
                        *x *= slope;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let yv = &self.nodes[idx].value;
                let mut da = g.clone();
                for (x, &y) in da.data_mut().iter_mut().zip(yv.data()) {
                    *x *= y * (1.0 - y);
                }
                self.accumulate(grads, *a, da);
            }
            Op::Tanh(a) => {
                let yv = &self.nodes[idx].value;
                let mut da = g.clone();
                for (x, &y) in da.data_mut().iter_mut().zip(yv.data()) {
                    *x *= 1.0 - y * y;
                }
                self.accumulate(grads, *a, da);
            }
            Op::MaskedSoftmax { x, mask } => {
                let yv = &self.nodes[idx].value;
                let cols = *yv.shape().last().unwrap();
                let mut dx = Tensor::zeros(yv.shape());
                for r in 0..yv.len() / cols {
                    let y = &yv.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let m = &mask[r * cols..(r + 1) * cols];
                    let dot: f64 = (0..cols).filter(|&j| m[j]).map(|j| gr[j] * y[j]).sum();
                    for j in 0..cols {
                        if m[j] {
                            dx.data_mut()[r * cols + j] = y[j] * (gr[j] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SumAxis { x, axis } => {
                self.accumulate(grads, *x, spread_axis(g, self.value(*x).shape(), *axis, 1.0));
            }
            Op::MeanAxis { x, axis } => {
                let n = self.value(*x).shape()[*axis] as f64;
                self.accumulate(
                    grads,
                    *x,
                    spread_axis(g, self.value(*x).shape(), *axis, 1.0 / n),
                );
            }
            Op::RepeatLast { x, n } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (i, chunk) in g.data().chunks(*n).enumerate() {
                    dx.data_mut()[i] = chunk.iter().sum();
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { parts, axis } => {
                let shape = self.nodes[idx].value.shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let pa = self.value(p).shape()[*axis];
                    if self.needs(p) {
                        let mut dp = Tensor::zeros(self.value(p).shape());
                        for o in 0..outer {
                            let src_start = o * total * inner + offset * inner;
                            let dst_start = o * pa * inner;
                            dp.data_mut()[dst_start..dst_start + pa * inner]
                                .copy_from_slice(&g.data()[src_start..src_start + pa * inner]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += pa;
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                let xs = self.value(*x).shape().to_vec();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let mut dx = Tensor::zeros(&xs);
                for o in 0..outer {
                    let dst_start = o * xs[*axis] * inner + start * inner;
                    let src_start = o * len * inner;
                    dx.data_mut()[dst_start..dst_start + len * inner]
                        .copy_from_slice(&g.data()[src_start..src_start + len * inner]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let dx = g.clone().reshaped(self.value(*x).shape().to_vec());
                self.accumulate(grads, *x, dx);
            }
            Op::StraightThrough(x) => {
                self.accumulate(grads, *x, g.clone());
            }
            Op::CrossEntropySum {
                logits,
                labels,
                mask,
            } => {
                let lv = self.value(*logits);
                let (n, c) = (lv.shape()[0], lv.shape()[1]);
                let gs = g.item();
                let mut dl = Tensor::zeros(lv.shape());
                for i in 0..n {
                    if !mask[i] {
                        continue;
                    }
                    let row = &lv.data()[i * c..(i + 1) * c];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
                    let s: f64 = exps.iter().sum();
                    for j in 0..c {
                        let p = exps[j] / s;
                        dl.data_mut()[i * c + j] =
                            gs * (p - if j == labels[i] { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::SumAll(x) => {
                let gs = g.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gs));
            }
        }
    }
}

fn masked_softmax_value(x: &Tensor, mask: &[bool], cols: usize) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.len() / cols {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let m = &mask[r * cols..(r + 1) * cols];
        let mut max = f64::NEG_INFINITY;
        for j in 0..cols {
            if m[j] && row[j] > max {
                max = row[j];
            }
        }
        if max == f64::NEG_INFINITY {
            continue; // fully masked row stays zero
        }
        let mut sum = 0.0;
        for j in 0..cols {
            if m[j] {
                let e = (row[j] - max).exp();
                out.data_mut()[r * cols + j] = e;
                sum += e;
            }
        }
        for j in 0..cols {
            if m[j] {
                out.data_mut()[r * cols + j] /= sum;
            }
        }
    }
    out
}

fn reduce_axis(x: &Tensor, axis: usize, mean: bool) -> Tensor {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape.remove(axis);
    let mut out = Tensor::zeros(&out_shape);
    for o in 0..outer {
        for j in 0..n {
            for i in 0..inner {
                out.data_mut()[o * inner + i] += x.data()[(o * n + j) * inner + i];
            }
        }
    }
    if mean {
        out = out.scale(1.0 / n as f64);
    }
    out
}

fn spread_axis(g: &Tensor, target: &[usize], axis: usize, factor: f64) -> Tensor {
    let outer: usize = target[..axis].iter().product();
    let n = target[axis];
    let inner: usize = target[axis + 1..].iter().product();
    let mut out = Tensor::zeros(target);
    for o in 0..outer {
        for j in 0..n {
            for i in 0..inner {
                out.data_mut()[(o * n + j) * inner + i] = g.data()[o * inner + i] * factor;
            }
        }
    }
    out
}

/// Sum `g` over its leading axes so the result has `suffix` shape.
fn reduce_to_suffix(g: &Tensor, suffix: &[usize]) -> Tensor {
    let sl: usize = suffix.iter().product();
    let mut out = Tensor::zeros(suffix);
    for (i, &v) in g.data().iter().enumerate() {
        out.data_mut()[i % sl] += v;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite-difference check of d(loss)/d(input) for a scalar-loss
    /// graph builder, evaluated against the tape.
    fn fd_check(build: impl Fn(&mut Graph, Var) -> Var, input: Tensor, tol: f64) {
        let mut g = Graph::new();
        let x = g.param(input.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(x).expect("input grad").clone();

        let eps = 1e-6;
        for i in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[i] += eps;
            let mut minus = input.clone();
            minus.data_mut()[i] -= eps;
            let eval = |t: Tensor| {
                let mut g = Graph::new();
                let x = g.param(t);
                let loss = build(&mut g, x);
                g.value(loss).item()
            };
            let numeric = (eval(plus) - eval(minus)) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (a - numeric).abs() / denom < tol,
                "coord {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::randn(shape, 1.0, rng)
    }

    #[test]
    fn fd_elementwise_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_tensor(&[2, 3], &mut rng);
        let x = rand_tensor(&[2, 3], &mut rng);
        fd_check(
            move |g, v| {
                let w = g.constant(w.clone());
                let a = g.mul(v, w);
                let b = g.sigmoid(a);
                let c = g.tanh(b);
                let d = g.leaky_relu(c, 0.2);
                g.sum_all(d)
            },
            x,
            1e-5,
        );
    }

    #[test]
    fn fd_matmul_both_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = rand_tensor(&[3, 4], &mut rng);
        let x = rand_tensor(&[2, 3], &mut rng);
        let bc = b.clone();
        fd_check(
            move |g, v| {
                let b = g.param(bc.clone());
                let c = g.matmul(v, b);
                let r = g.relu(c);
                g.sum_all(r)
            },
            x,
            1e-5,
        );
        // rhs gradient, with transposes
        let a = rand_tensor(&[3, 2], &mut rng);
        fd_check(
            move |g, v| {
                let a = g.constant(a.clone());
                let c = g.matmul_t(a, v, true, true);
                g.sum_all(c)
            },
            rand_tensor(&[4, 3], &mut rng),
            1e-5,
        );
    }

    #[test]
    fn fd_bmm_transposed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = rand_tensor(&[2, 4, 3], &mut rng);
        let x = rand_tensor(&[2, 5, 3], &mut rng);
        fd_check(
            move |g, v| {
                let b = g.constant(b.clone());
                let c = g.bmm_t(v, b, false, true);
                g.sum_all(c)
            },
            x,
            1e-5,
        );
    }

    #[test]
    fn fd_masked_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[3, 4], &mut rng);
        let w = rand_tensor(&[3, 4], &mut rng);
        let mask = Rc::new(vec![
            true, true, false, true, //
            true, false, false, true, //
            false, false, false, false,
        ]);
        fd_check(
            move |g, v| {
                let y = g.masked_softmax(v, mask.clone());
                let w = g.constant(w.clone());
                let p = g.mul(y, w);
                g.sum_all(p)
            },
            x,
            1e-5,
        );
    }

    #[test]
    fn masked_softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0]));
        let mask = Rc::new(vec![true, false, true, true, true, true]);
        let y = g.masked_softmax(x, mask);
        let d = g.value(y).data();
        assert!((d[0] + d[2] - 1.0).abs() < 1e-12);
        assert_eq!(d[1], 0.0);
        assert!((d[3] + d[4] + d[5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fd_reductions_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[2, 3, 4], &mut rng);
        let w = rand_tensor(&[2, 4], &mut rng);
        fd_check(
            move |g, v| {
                let s = g.mean_axis(v, 1);
                let w = g.constant(w.clone());
                let p = g.mul(s, w);
                g.sum_all(p)
            },
            x.clone(),
            1e-5,
        );
        let w2 = rand_tensor(&[2, 3, 4], &mut rng);
        fd_check(
            move |g, v| {
                let m = g.mean_last_bcast(v);
                let w = g.constant(w2.clone());
                let p = g.mul(m, w);
                g.sum_all(p)
            },
            x,
            1e-5,
        );
    }

    #[test]
    fn fd_concat_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&[2, 3], &mut rng);
        let other = rand_tensor(&[2, 2], &mut rng);
        let w = rand_tensor(&[2, 4], &mut rng);
        fd_check(
            move |g, v| {
                let o = g.constant(other.clone());
                let c = g.concat(&[v, o], 1);
                let s = g.slice(c, 1, 1, 4);
                let w = g.constant(w.clone());
                let p = g.mul(s, w);
                g.sum_all(p)
            },
            x,
            1e-5,
        );
    }

    #[test]
    fn fd_broadcast_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&[2, 3, 4], &mut rng);
        let b = rand_tensor(&[3, 4], &mut rng);
        let bc = b.clone();
        // gradient wrt broadcast operand
        fd_check(
            move |g, v| {
                let a = g.constant(x.clone());
                let y = g.mul_bcast(a, v);
                let z = g.sigmoid(y);
                g.sum_all(z)
            },
            bc,
            1e-5,
        );
        let x2 = rand_tensor(&[2, 3, 4], &mut rng);
        let b2 = rand_tensor(&[4], &mut rng);
        fd_check(
            move |g, v| {
                let b = g.constant(b2.clone());
                let y = g.add_bcast(v, b);
                let z = g.tanh(y);
                g.sum_all(z)
            },
            x2,
            1e-5,
        );
    }

    #[test]
    fn fd_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&[4, 3], &mut rng);
        let labels = Rc::new(vec![0usize, 2, 1, 1]);
        let mask = Rc::new(vec![true, true, false, true]);
        fd_check(
            move |g, v| g.cross_entropy_sum(v, labels.clone(), mask.clone()),
            x,
            1e-5,
        );
    }

    #[test]
    fn straight_through_is_onehot_with_identity_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 3], vec![0.2, 0.5, 0.3, 0.4, 0.4, 0.2]));
        let h = g.straight_through(x);
        assert_eq!(g.value(h).data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]); // tie -> lowest index
        let w = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = g.mul(h, w);
        let loss = g.sum_all(p);
        let grads = g.backward(loss);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn grad_accumulates_over_reuse() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x);
        let grads = {
            let loss = g.sum_all(y);
            g.backward(loss)
        };
        assert!((grads.get(x).unwrap().item() - 6.0).abs() < 1e-12);
    }
}
