//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and the indices
//! of its inputs. [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients. Nodes that do not depend on any tracked leaf are
//! skipped during the backward sweep.
//!
//! The operation set is deliberately small: it is exactly what the host
//! models and the attention block need, expressed over region-major
//! activations so that whole batches reduce to a handful of matrix products.

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatMut, MatRef, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Concat(Var, Var),
    Tile { x: Var, reps: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Mse { pred: Var, target: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Extracts `(batch, rows, cols)` from a 3-D shape; a matrix is a batch
/// of one.
fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape()[..] {
        [b, r, c] => Ok((b, r, c)),
        [r, c] => Ok((1, r, c)),
        _ => Err(Error::shape(format!("{what}: expected 2-D or 3-D tensor, got {:?}", t.shape()))),
    }
}

fn last_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A leaf whose gradient will be computed.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Mutable value of a leaf. Nodes computed from it are stale until the
    /// tape is truncated below them and the computation replayed.
    pub fn leaf_mut(&mut self, v: Var) -> Result<&mut Tensor> {
        let node = &mut self.nodes[v.0];
        match node.op {
            Op::Leaf => Ok(&mut node.value),
            _ => Err(Error::invalid("only leaves can be modified in place")),
        }
    }

    /// Drops every node from `len` on; handles to them become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Batched matrix product over 3-D operands `[batch, rows, cols]`.
    /// A batch dimension of 1 broadcasts against the other operand, and a
    /// 2-D operand counts as a batch of one.
    /// `ta` / `tb` transpose the trailing two axes of the operand.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (ba, ra, ca) = dims3(av, "bmm lhs")?;
        let (bb, rb, cb) = dims3(bv, "bmm rhs")?;
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 || !(ba == bb || ba == 1 || bb == 1) {
            return Err(Error::shape(format!(
                "bmm {:?}{} x {:?}{}",
                av.shape(),
                if ta { "^T" } else { "" },
                bv.shape(),
                if tb { "^T" } else { "" }
            )));
        }
        let bt = ba.max(bb);
        let mut out = vec![0.0; bt * m * n];
        let (a_rs, a_cs) = if ta { (1, ca) } else { (ca, 1) };
        let (b_rs, b_cs) = if tb { (1, cb) } else { (cb, 1) };
        for t in 0..bt {
            let a_off = if ba == 1 { 0 } else { t * ra * ca };
            let b_off = if bb == 1 { 0 } else { t * rb * cb };
            gemm(
                (m, k, n),
                MatRef::new(&av.data()[a_off..a_off + ra * ca], a_rs, a_cs),
                MatRef::new(&bv.data()[b_off..b_off + rb * cb], b_rs, b_cs),
                MatMut::new(&mut out[t * m * n..(t + 1) * m * n], n, 1),
                false,
            );
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(&[bt, m, n], out)?, Op::Bmm { a, b, ta, tb }, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Add(a, b), tracked))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let width = last_dim(xv);
        if bv.len() != width {
            return Err(Error::shape(format!(
                "bias of length {} for last axis {}",
                bv.len(),
                width
            )));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(width) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(out, Op::AddBias(x, bias), tracked))
    }

    /// Elementwise (Hadamard) product of two tensors of the same shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "mul {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = av.zip_map(bv, |x, y| x * y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Mul(a, b), tracked))
    }

    /// `scale * x + shift`, with `scale` and `shift` fixed.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let tracked = self.tracked(x);
        self.push(out, Op::Affine { x, scale }, tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let tracked = self.tracked(x);
        self.push(out, Op::Relu(x), tracked)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let tracked = self.tracked(x);
        self.push(out, Op::Tanh(x), tracked)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let width = last_dim(&out);
        for row in out.data_mut().chunks_mut(width) {
            softmax_in_place(row);
        }
        let tracked = self.tracked(x);
        self.push(out, Op::Softmax(x), tracked)
    }

    /// Layer normalisation along the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let width = last_dim(xv);
        let gv = self.value(gain);
        let bv = self.value(bias);
        if gv.len() != width || bv.len() != width {
            return Err(Error::shape(format!(
                "layer norm over width {} with gain {:?} and bias {:?}",
                width,
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.len() / width;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let src = &xv.data()[r * width..(r + 1) * width];
            let mean = src.iter().sum::<f64>() / width as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..width {
                let h = (src[j] - mean) * inv;
                xhat[r * width + j] = h;
                out[r * width + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            tracked,
        ))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape(format!("concat {:?} with {:?}", sa, sb)));
        }
        let (wa, wb) = (last_dim(av), last_dim(bv));
        let rows = av.len() / wa;
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * wa..(r + 1) * wa]);
            out.extend_from_slice(&bv.data()[r * wb..(r + 1) * wb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = wa + wb;
        let out = Tensor::new(&shape, out)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Concat(a, b), tracked))
    }

    /// Repeats `x` along a new leading axis of size `reps`.
    pub fn tile(&mut self, x: Var, reps: usize) -> Result<Var> {
        let xv = self.value(x);
        let mut shape = vec![reps];
        shape.extend_from_slice(xv.shape());
        let mut out = Vec::with_capacity(reps * xv.len());
        for _ in 0..reps {
            out.extend_from_slice(xv.data());
        }
        let out = Tensor::new(&shape, out)?;
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::Tile { x, reps }, tracked))
    }

    /// Slice `start..start + len` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "narrow axis {axis} range {start}..{} of {:?}",
                start + len,
                shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[axis] = len;
        let out = Tensor::new(&new_shape, out)?;
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::Narrow { x, axis, start }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::Reshape(x), tracked))
    }

    /// Mean squared error between two tensors of equal shape, as a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let pv = self.value(pred);
        let tv = self.value(target);
        if pv.shape() != tv.shape() {
            return Err(Error::shape(format!(
                "mse between {:?} and {:?}",
                pv.shape(),
                tv.shape()
            )));
        }
        let n = pv.len().max(1) as f64;
        let loss = pv
            .data()
            .iter()
            .zip(tv.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let tracked = self.tracked(pred) || self.tracked(target);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }, tracked))
    }

    /// Back-propagates from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.shape(output), 1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (x, d) in g.data_mut().iter_mut().zip(delta.data()) {
                    *x += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Bmm { a, b, ta, tb } => self.bmm_backward(*a, *b, *ta, *tb, g, grads),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.tracked(*bias) {
                    let width = self.value(*bias).len();
                    let mut gb = vec![0.0; width];
                    for row in g.data().chunks(width) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(self.shape(*bias), gb)?);
                }
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Relu(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y))?;
                self.accumulate(grads, *x, d);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let width = last_dim(y);
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d
                    .chunks_mut(width)
                    .zip(y.data().chunks(width))
                    .zip(g.data().chunks(width))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..width {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape(), d)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let width = gv.len();
                let rows = g.len() / width;
                let mut dgain = vec![0.0; width];
                let mut dbias = vec![0.0; width];
                let mut dx = vec![0.0; g.len()];
                let inv_w = 1.0 / width as f64;
                let mut dxhat = vec![0.0; width];
                for r in 0..rows {
                    let gr = &g.data()[r * width..(r + 1) * width];
                    let hr = &xhat[r * width..(r + 1) * width];
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..width {
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                        dxhat[j] = gr[j] * gv.data()[j];
                        sum_d += dxhat[j];
                        sum_dh += dxhat[j] * hr[j];
                    }
                    let inv = inv_std[r];
                    for j in 0..width {
                        dx[r * width + j] =
                            inv * (dxhat[j] - inv_w * sum_d - hr[j] * inv_w * sum_dh);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape(), dx)?);
                self.accumulate(grads, *gain, Tensor::new(gv.shape(), dgain)?);
                self.accumulate(grads, *bias, Tensor::new(self.shape(*bias), dbias)?);
            }
            Op::Concat(a, b) => {
                let (wa, wb) = (last_dim(self.value(*a)), last_dim(self.value(*b)));
                let mut ga = Vec::with_capacity(self.value(*a).len());
                let mut gb = Vec::with_capacity(self.value(*b).len());
                for row in g.data().chunks(wa + wb) {
                    ga.extend_from_slice(&row[..wa]);
                    gb.extend_from_slice(&row[wa..]);
                }
                self.accumulate(grads, *a, Tensor::new(self.shape(*a), ga)?);
                self.accumulate(grads, *b, Tensor::new(self.shape(*b), gb)?);
            }
            Op::Tile { x, reps } => {
                let len = self.value(*x).len();
                let mut gx = vec![0.0; len];
                for r in 0..*reps {
                    for (acc, v) in gx.iter_mut().zip(&g.data()[r * len..(r + 1) * len]) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), gx)?);
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let dim = shape[*axis];
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(shape, gx)?);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.clone().reshape(self.shape(*x))?);
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let tv = self.value(*target);
                let scale = 2.0 * g.data()[0] / pv.len().max(1) as f64;
                let d = pv.zip_map(tv, |p, t| scale * (p - t))?;
                if self.tracked(*target) {
                    self.accumulate(grads, *target, d.map(|v| -v));
                }
                self.accumulate(grads, *pred, d);
            }
        }
        Ok(())
    }

    fn bmm_backward(
        &self,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let av = self.value(a);
        let bv = self.value(b);
        let (ba, ra, ca) = dims3(av, "bmm lhs").expect("checked in forward");
        let (bb, rb, cb) = dims3(bv, "bmm rhs").expect("checked in forward");
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let n = if tb { rb } else { cb };
        let bt = g.shape()[0];
        let (a_rs, a_cs) = if ta { (1, ca) } else { (ca, 1) };
        let (b_rs, b_cs) = if tb { (1, cb) } else { (cb, 1) };

        if self.tracked(a) {
            // dA_eff = G * B_eff^T, written through A's own strides.
            let mut ga = vec![0.0; av.len()];
            for t in 0..bt {
                let a_off = if ba == 1 { 0 } else { t * ra * ca };
                let b_off = if bb == 1 { 0 } else { t * rb * cb };
                gemm(
                    (m, n, k),
                    MatRef::new(&g.data()[t * m * n..(t + 1) * m * n], n, 1),
                    MatRef::new(&bv.data()[b_off..b_off + rb * cb], b_rs, b_cs).t(),
                    MatMut::new(&mut ga[a_off..a_off + ra * ca], a_rs, a_cs),
                    true,
                );
            }
            self.accumulate(grads, a, Tensor::new(av.shape(), ga).expect("bmm grad shape"));
        }
        if self.tracked(b) {
            // dB_eff = A_eff^T * G.
            let mut gb = vec![0.0; bv.len()];
            for t in 0..bt {
                let a_off = if ba == 1 { 0 } else { t * ra * ca };
                let b_off = if bb == 1 { 0 } else { t * rb * cb };
                gemm(
                    (k, m, n),
                    MatRef::new(&av.data()[a_off..a_off + ra * ca], a_rs, a_cs).t(),
                    MatRef::new(&g.data()[t * m * n..(t + 1) * m * n], n, 1),
                    MatMut::new(&mut gb[b_off..b_off + rb * cb], b_rs, b_cs),
                    true,
                );
            }
            self.accumulate(grads, b, Tensor::new(bv.shape(), gb).expect("bmm grad shape"));
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
