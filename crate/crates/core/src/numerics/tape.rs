//! Wengert tape: reverse-mode differentiation by operation recording.
//!
//! Forward calls record one node per primitive application; inputs are
//! always older nodes, so walking the node list backwards is an exact
//! reverse topological order. A tape is single-threaded; independent
//! samples run on independent tapes.

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, sigmoid_scalar, GROUP_NORM_EPS};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddConst,
    Abs,
    Sqrt,
    Swish,
    Affine,
    Conv3x3,
    Conv1x1,
    AddChannelBias,
    GroupNorm { groups: usize },
    AvgPool2,
    Upsample2,
    ConcatChannels,
    ConcatFlat,
    Reshape,
    Sum,
    Mean,
}

struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape { nodes: Vec::with_capacity(n) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input; `backward` reports its gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, vec![], value, true)
    }

    /// A non-differentiable input; backward never visits it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, vec![], value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, inputs, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name(&op) });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(op, inputs, value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::add(self.value(a), self.value(b))?;
        self.record(Op::Add, vec![a, b], v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::sub(self.value(a), self.value(b))?;
        self.record(Op::Sub, vec![a, b], v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::mul(self.value(a), self.value(b))?;
        self.record(Op::Mul, vec![a, b], v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::div(self.value(a), self.value(b))?;
        self.record(Op::Div, vec![a, b], v)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = kernels::scale(self.value(a), s)?;
        self.record(Op::Scale(s), vec![a], v)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = kernels::add_const(self.value(a), c)?;
        self.record(Op::AddConst, vec![a], v)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = kernels::abs(self.value(a))?;
        self.record(Op::Abs, vec![a], v)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = kernels::sqrt(self.value(a))?;
        self.record(Op::Sqrt, vec![a], v)
    }

    pub fn swish(&mut self, a: Var) -> Result<Var> {
        let v = kernels::swish(self.value(a))?;
        self.record(Op::Swish, vec![a], v)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let v = kernels::affine(self.value(x), self.value(w), self.value(b))?;
        self.record(Op::Affine, vec![x, w, b], v)
    }

    pub fn conv3x3(&mut self, x: Var, k: Var) -> Result<Var> {
        let v = kernels::conv3x3(self.value(x), self.value(k))?;
        self.record(Op::Conv3x3, vec![x, k], v)
    }

    pub fn conv1x1(&mut self, x: Var, k: Var) -> Result<Var> {
        let v = kernels::conv1x1(self.value(x), self.value(k))?;
        self.record(Op::Conv1x1, vec![x, k], v)
    }

    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let v = kernels::add_channel_bias(self.value(x), self.value(b))?;
        self.record(Op::AddChannelBias, vec![x, b], v)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let v = kernels::group_norm(self.value(x), self.value(gamma), self.value(beta), groups)?;
        self.record(Op::GroupNorm { groups }, vec![x, gamma, beta], v)
    }

    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let v = kernels::avgpool2(self.value(x))?;
        self.record(Op::AvgPool2, vec![x], v)
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let v = kernels::upsample2(self.value(x))?;
        self.record(Op::Upsample2, vec![x], v)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::concat_channels(self.value(a), self.value(b))?;
        self.record(Op::ConcatChannels, vec![a, b], v)
    }

    pub fn concat_flat(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::concat_flat(self.value(a), self.value(b))?;
        self.record(Op::ConcatFlat, vec![a, b], v)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = kernels::reshape(self.value(a), shape)?;
        self.record(Op::Reshape, vec![a], v)
    }

    /// Flatten to a vector [n].
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        self.reshape(a, &[n])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = kernels::sum(self.value(a))?;
        self.record(Op::Sum, vec![a], v)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = kernels::mean(self.value(a))?;
        self.record(Op::Mean, vec![a], v)
    }

    /// sum(a*b) as a composition; both factors may carry gradient.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Backpropagate from a scalar root. Adjoints of nodes not on a path
    /// to the root stay unset and read back as zero.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = &self.nodes[root.0].value;
        if !root_val.is_scalar() {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            if adj[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = adj[i].take().unwrap();
            self.vjp(i, &g, &mut adj);
            // reattach so the caller can also read interior adjoints
            adj[i] = Some(g);
        }
        Ok(Gradients { adj })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, delta: &Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(t) => t.axpy(1.0, delta),
            slot @ None => *slot = Some(delta.clone()),
        }
    }

    fn vjp(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let inp = |k: usize| -> &Tensor { &self.nodes[node.inputs[k].0].value };
        match node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add => {
                self.accumulate(adj, node.inputs[0], g);
                self.accumulate(adj, node.inputs[1], g);
            }
            Op::Sub => {
                self.accumulate(adj, node.inputs[0], g);
                let mut neg = g.clone();
                neg.scale_in_place(-1.0);
                self.accumulate(adj, node.inputs[1], &neg);
            }
            Op::Mul => {
                let (a, b) = (inp(0), inp(1));
                let da = kernels::mul(g, b).expect("mul vjp");
                let db = kernels::mul(g, a).expect("mul vjp");
                self.accumulate(adj, node.inputs[0], &da);
                self.accumulate(adj, node.inputs[1], &db);
            }
            Op::Div => {
                let (a, b) = (inp(0), inp(1));
                let mut da = Tensor::zeros(a.shape());
                let mut db = Tensor::zeros(b.shape());
                for j in 0..a.numel() {
                    let bj = b.data()[j];
                    da.data_mut()[j] = g.data()[j] / bj;
                    db.data_mut()[j] = -g.data()[j] * a.data()[j] / (bj * bj);
                }
                self.accumulate(adj, node.inputs[0], &da);
                self.accumulate(adj, node.inputs[1], &db);
            }
            Op::Scale(s) => {
                let mut da = g.clone();
                da.scale_in_place(s);
                self.accumulate(adj, node.inputs[0], &da);
            }
            Op::AddConst => {
                self.accumulate(adj, node.inputs[0], g);
            }
            Op::Abs => {
                let x = inp(0);
                let mut da = Tensor::zeros(x.shape());
                for j in 0..x.numel() {
                    let s = if x.data()[j] > 0.0 {
                        1.0
                    } else if x.data()[j] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    da.data_mut()[j] = g.data()[j] * s;
                }
                self.accumulate(adj, node.inputs[0], &da);
            }
            Op::Sqrt => {
                let y = &node.value;
                let mut da = Tensor::zeros(y.shape());
                for j in 0..y.numel() {
                    da.data_mut()[j] = g.data()[j] * 0.5 / y.data()[j];
                }
                self.accumulate(adj, node.inputs[0], &da);
            }
            Op::Swish => {
                let x = inp(0);
                let mut da = Tensor::zeros(x.shape());
                for j in 0..x.numel() {
                    let s = sigmoid_scalar(x.data()[j]);
                    da.data_mut()[j] = g.data()[j] * (s + x.data()[j] * s * (1.0 - s));
                }
                self.accumulate(adj, node.inputs[0], &da);
            }
            Op::Affine => {
                let (x, w) = (inp(0), inp(1));
                let n_in = x.numel();
                let n_out = node.value.numel();
                let mut dx = Tensor::zeros(x.shape());
                let mut dw = Tensor::zeros(w.shape());
                for o in 0..n_out {
                    let go = g.data()[o];
                    let row = &w.data()[o * n_in..(o + 1) * n_in];
                    for j in 0..n_in {
                        dx.data_mut()[j] += go * row[j];
                        dw.data_mut()[o * n_in + j] += go * x.data()[j];
                    }
                }
                self.accumulate(adj, node.inputs[0], &dx);
                self.accumulate(adj, node.inputs[1], &dw);
                self.accumulate(adj, node.inputs[2], g);
            }
            Op::Conv3x3 => {
                let (x, k) = (inp(0), inp(1));
                let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let c_out = k.shape()[0];
                let mut dx = Tensor::zeros(x.shape());
                let mut dk = Tensor::zeros(k.shape());
                for co in 0..c_out {
                    let g_base = co * h * w;
                    for ci in 0..c_in {
                        let kbase = (co * c_in + ci) * 9;
                        let i_base = ci * h * w;
                        for y in 0..h {
                            for x_ in 0..w {
                                let go = g.data()[g_base + y * w + x_];
                                if go == 0.0 {
                                    continue;
                                }
                                for dy in 0..3usize {
                                    let sy = y as isize + dy as isize - 1;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    let row = i_base + sy as usize * w;
                                    for dxx in 0..3usize {
                                        let sx = x_ as isize + dxx as isize - 1;
                                        if sx < 0 || sx >= w as isize {
                                            continue;
                                        }
                                        let src = row + sx as usize;
                                        dx.data_mut()[src] += go * k.data()[kbase + dy * 3 + dxx];
                                        dk.data_mut()[kbase + dy * 3 + dxx] += go * x.data()[src];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(adj, node.inputs[0], &dx);
                self.accumulate(adj, node.inputs[1], &dk);
            }
            Op::Conv1x1 => {
                let (x, k) = (inp(0), inp(1));
                let c_in = x.shape()[0];
                let hw = x.shape()[1] * x.shape()[2];
                let c_out = k.shape()[0];
                let mut dx = Tensor::zeros(x.shape());
                let mut dk = Tensor::zeros(k.shape());
                for co in 0..c_out {
                    let g_base = co * hw;
                    for ci in 0..c_in {
                        let kwt = k.data()[co * c_in + ci];
                        let i_base = ci * hw;
                        let mut acc = 0.0;
                        for p in 0..hw {
                            let go = g.data()[g_base + p];
                            dx.data_mut()[i_base + p] += go * kwt;
                            acc += go * x.data()[i_base + p];
                        }
                        dk.data_mut()[co * c_in + ci] += acc;
                    }
                }
                self.accumulate(adj, node.inputs[0], &dx);
                self.accumulate(adj, node.inputs[1], &dk);
            }
            Op::AddChannelBias => {
                let x = inp(0);
                let c = x.shape()[0];
                let hw = x.shape()[1] * x.shape()[2];
                let mut db = Tensor::zeros(&[c]);
                for ch in 0..c {
                    let mut acc = 0.0;
                    for p in 0..hw {
                        acc += g.data()[ch * hw + p];
                    }
                    db.data_mut()[ch] = acc;
                }
                self.accumulate(adj, node.inputs[0], g);
                self.accumulate(adj, node.inputs[1], &db);
            }
            Op::GroupNorm { groups } => {
                let (x, gamma) = (inp(0), inp(1));
                let c = x.shape()[0];
                let hw = x.shape()[1] * x.shape()[2];
                let per = c / groups;
                let m = (per * hw) as f64;
                let mut dx = Tensor::zeros(x.shape());
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                for grp in 0..groups {
                    let base = grp * per * hw;
                    let xs = &x.data()[base..base + per * hw];
                    let mut mean = 0.0;
                    for &v in xs {
                        mean += v;
                    }
                    mean /= m;
                    let mut var = 0.0;
                    for &v in xs {
                        let d = v - mean;
                        var += d * d;
                    }
                    var /= m;
                    let inv_std = 1.0 / (var + GROUP_NORM_EPS).sqrt();
                    // group means of gamma*g and gamma*g*xhat
                    let mut mg = 0.0;
                    let mut mgx = 0.0;
                    for cc in 0..per {
                        let ch = grp * per + cc;
                        let ga = gamma.data()[ch];
                        for p in 0..hw {
                            let idx = ch * hw + p;
                            let xh = (x.data()[idx] - mean) * inv_std;
                            let gg = g.data()[idx];
                            dbeta.data_mut()[ch] += gg;
                            dgamma.data_mut()[ch] += gg * xh;
                            mg += ga * gg;
                            mgx += ga * gg * xh;
                        }
                    }
                    mg /= m;
                    mgx /= m;
                    for cc in 0..per {
                        let ch = grp * per + cc;
                        let ga = gamma.data()[ch];
                        for p in 0..hw {
                            let idx = ch * hw + p;
                            let xh = (x.data()[idx] - mean) * inv_std;
                            dx.data_mut()[idx] =
                                inv_std * (ga * g.data()[idx] - mg - xh * mgx);
                        }
                    }
                }
                self.accumulate(adj, node.inputs[0], &dx);
                self.accumulate(adj, node.inputs[1], &dgamma);
                self.accumulate(adj, node.inputs[2], &dbeta);
            }
            Op::AvgPool2 => {
                let x = inp(0);
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = Tensor::zeros(x.shape());
                for ch in 0..c {
                    let ob = ch * oh * ow;
                    let ib = ch * h * w;
                    for y in 0..oh {
                        for x_ in 0..ow {
                            let go = 0.25 * g.data()[ob + y * ow + x_];
                            let r0 = ib + (2 * y) * w + 2 * x_;
                            let r1 = r0 + w;
                            dx.data_mut()[r0] += go;
                            dx.data_mut()[r0 + 1] += go;
                            dx.data_mut()[r1] += go;
                            dx.data_mut()[r1 + 1] += go;
                        }
                    }
                }
                self.accumulate(adj, node.inputs[0], &dx);
            }
            Op::Upsample2 => {
                let x = inp(0);
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = Tensor::zeros(x.shape());
                for ch in 0..c {
                    let ib = ch * h * w;
                    let ob = ch * oh * ow;
                    for y in 0..h {
                        for x_ in 0..w {
                            let r0 = ob + (2 * y) * ow + 2 * x_;
                            let r1 = r0 + ow;
                            dx.data_mut()[ib + y * w + x_] +=
                                g.data()[r0] + g.data()[r0 + 1] + g.data()[r1] + g.data()[r1 + 1];
                        }
                    }
                }
                self.accumulate(adj, node.inputs[0], &dx);
            }
            Op::ConcatChannels | Op::ConcatFlat => {
                let (a, b) = (inp(0), inp(1));
                let na = a.numel();
                let mut da = Tensor::zeros(a.shape());
                let mut db = Tensor::zeros(b.shape());
                da.data_mut().copy_from_slice(&g.data()[..na]);
                db.data_mut().copy_from_slice(&g.data()[na..]);
                self.accumulate(adj, node.inputs[0], &da);
                self.accumulate(adj, node.inputs[1], &db);
            }
            Op::Reshape => {
                let x = inp(0);
                let da = Tensor::new(x.shape().to_vec(), g.data().to_vec())
                    .expect("reshape vjp");
                self.accumulate(adj, node.inputs[0], &da);
            }
            Op::Sum => {
                let x = inp(0);
                let da = Tensor::filled(x.shape(), g.item());
                self.accumulate(adj, node.inputs[0], &da);
            }
            Op::Mean => {
                let x = inp(0);
                let da = Tensor::filled(x.shape(), g.item() / x.numel() as f64);
                self.accumulate(adj, node.inputs[0], &da);
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Constant => "constant",
        Op::Add => "add",
        Op::Sub => "sub",
        Op::Mul => "mul",
        Op::Div => "div",
        Op::Scale(_) => "scale",
        Op::AddConst => "add_const",
        Op::Abs => "abs",
        Op::Sqrt => "sqrt",
        Op::Swish => "swish",
        Op::Affine => "affine",
        Op::Conv3x3 => "conv3x3",
        Op::Conv1x1 => "conv1x1",
        Op::AddChannelBias => "add_channel_bias",
        Op::GroupNorm { .. } => "group_norm",
        Op::AvgPool2 => "avgpool2",
        Op::Upsample2 => "upsample2",
        Op::ConcatChannels => "concat_channels",
        Op::ConcatFlat => "concat_flat",
        Op::Reshape => "reshape",
        Op::Sum => "sum",
        Op::Mean => "mean",
    }
}

pub struct Gradients {
    adj: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adj.get(v.0).and_then(|t| t.as_ref())
    }

    /// Gradient of `v`, zeros when `v` does not influence the root.
    pub fn grad(&self, v: Var, tape: &Tape) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(tape.shape(v)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        // d(x*y)/dx at (2,3) = 3
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.leaf(Tensor::scalar(3.0));
        let p = tape.mul(x, y).unwrap();
        let g = tape.backward(p).unwrap();
        assert_eq!(g.grad(x, &tape).item(), 3.0);
        assert_eq!(g.grad(y, &tape).item(), 2.0);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let s = tape.sum(c).unwrap();
        let _ = x;
        let g = tape.backward(s).unwrap();
        assert_eq!(g.grad(x, &tape).item(), 0.0);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        let y = tape.abs(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn repeated_input_accumulates() {
        // d(x*x)/dx = 2x
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(4.0));
        let p = tape.mul(x, x).unwrap();
        let g = tape.backward(p).unwrap();
        assert_eq!(g.grad(x, &tape).item(), 8.0);
    }

    #[test]
    fn unused_leaf_reads_back_as_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.leaf(Tensor::scalar(1.0));
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.grad(x, &tape).data(), &[0.0, 0.0, 0.0]);
        assert!(g.get(x).is_none());
    }
}
