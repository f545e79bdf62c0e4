//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Forward calls record one node per operation (kind, parent ids, cached
//! output). `backward` walks the node list once in reverse id order, so
//! parents are always visited after all of their consumers; an identical tape
//! yields bitwise-identical gradients. Tensors referenced by a tape are never
//! mutated — every op allocates its output.
//!
//! Every op validates its output for finiteness: NaN/Inf surfaces as a
//! numeric error at the op that produced it, never as a silent value.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{validate_axes, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Affine { x: NodeId, scale: f64 },
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Sum { x: NodeId, axes: Vec<usize>, keepdims: bool },
    Mean { x: NodeId, axes: Vec<usize>, keepdims: bool },
    Reshape(NodeId),
    ConcatLast(NodeId, NodeId),
    SliceLast { x: NodeId, from: usize, to: usize },
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push_unchecked(Op::Leaf { requires_grad: true }, value)
    }

    /// Non-differentiable input (data, noise, masks, hyperparameters).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_unchecked(Op::Leaf { requires_grad: false }, value)
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor<T>, ctx: &str) -> Result<NodeId> {
        value.check_finite(ctx)?;
        Ok(self.push_unchecked(op, value))
    }

    // ── elementwise binary (trailing-dims broadcasting) ────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        self.push(Op::Add(a, b), v, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(Op::Sub(a, b), v, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        self.push(Op::Mul(a, b), v, "mul")
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_broadcast(self.value(b), |x, y| x / y)?;
        self.push(Op::Div(a, b), v, "div")
    }

    // ── elementwise unary ──────────────────────────────────────────────

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|v| -v);
        self.push(Op::Neg(x), v, "neg")
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|v| v.exp());
        self.push(Op::Exp(x), v, "exp")
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).data().iter().any(|v| *v <= T::zero()) {
            return Err(Error::domain("log of non-positive input".to_string()));
        }
        let v = self.value(x).map(|v| v.ln());
        self.push(Op::Log(x), v, "log")
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|v| v.tanh());
        self.push(Op::Tanh(x), v, "tanh")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(Op::Relu(x), v, "relu")
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(softplus_stable);
        self.push(Op::Softplus(x), v, "softplus")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(sigmoid_stable);
        self.push(Op::Sigmoid(x), v, "sigmoid")
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|v| v * v);
        self.push(Op::Square(x), v, "square")
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).data().iter().any(|v| *v < T::zero()) {
            return Err(Error::domain("sqrt of negative input".to_string()));
        }
        let v = self.value(x).map(|v| v.sqrt());
        self.push(Op::Sqrt(x), v, "sqrt")
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo < hi) {
            return Err(Error::contract(format!("clamp bounds [{lo}, {hi}]")));
        }
        let (l, h) = (T::of(lo), T::of(hi));
        let v = self.value(x).map(|v| v.max(l).min(h));
        self.push(Op::Clamp { x, lo, hi }, v, "clamp")
    }

    /// `scale * x + shift` with compile-time constants.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let (k, c) = (T::of(scale), T::of(shift));
        let v = self.value(x).map(|v| k * v + c);
        self.push(Op::Affine { x, scale }, v, "affine")
    }

    // ── linear algebra ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::Matmul(a, b), v, "matmul")
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).transpose2()?;
        self.push(Op::Transpose(x), v, "transpose")
    }

    // ── shape ──────────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: NodeId, dims: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(dims)?;
        self.push(Op::Reshape(x), v, "reshape")
    }

    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let tb = self.value(b);
        let (ra, rb) = (ta.rank(), tb.rank());
        if ra != rb || ra == 0 || ta.dims()[..ra - 1] != tb.dims()[..rb - 1] {
            return Err(Error::dim(format!(
                "concat_last: incompatible shapes {:?} and {:?}",
                ta.dims(),
                tb.dims()
            )));
        }
        let wa = ta.dims()[ra - 1];
        let wb = tb.dims()[rb - 1];
        let rows = ta.len() / wa.max(1);
        let mut dims = ta.dims().to_vec();
        dims[ra - 1] = wa + wb;
        let mut data = Vec::with_capacity(rows * (wa + wb));
        for r in 0..rows {
            data.extend_from_slice(&ta.data()[r * wa..(r + 1) * wa]);
            data.extend_from_slice(&tb.data()[r * wb..(r + 1) * wb]);
        }
        let v = Tensor::from_parts(dims, data);
        self.push(Op::ConcatLast(a, b), v, "concat_last")
    }

    /// Slice `[from, to)` of the last axis.
    pub fn slice_last(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let t = self.value(x);
        let rank = t.rank();
        if rank == 0 {
            return Err(Error::dim("slice_last on rank-0 tensor".to_string()));
        }
        let w = t.dims()[rank - 1];
        if from >= to || to > w {
            return Err(Error::dim(format!("slice_last [{from}, {to}) out of width {w}")));
        }
        let rows = t.len() / w;
        let mut dims = t.dims().to_vec();
        dims[rank - 1] = to - from;
        let mut data = Vec::with_capacity(rows * (to - from));
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * w + from..r * w + to]);
        }
        let v = Tensor::from_parts(dims, data);
        self.push(Op::SliceLast { x, from, to }, v, "slice_last")
    }

    // ── reductions ─────────────────────────────────────────────────────

    pub fn sum(&mut self, x: NodeId, axes: &[usize], keepdims: bool) -> Result<NodeId> {
        let v = self.value(x).sum_axes(axes, keepdims)?;
        self.push(
            Op::Sum { x, axes: axes.to_vec(), keepdims },
            v,
            "sum",
        )
    }

    pub fn mean(&mut self, x: NodeId, axes: &[usize], keepdims: bool) -> Result<NodeId> {
        let v = self.value(x).mean_axes(axes, keepdims)?;
        self.push(
            Op::Mean { x, axes: axes.to_vec(), keepdims },
            v,
            "mean",
        )
    }

    /// Sum of every element, yielding a scalar node (shape `[]`).
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        if axes.is_empty() {
            return self.reshape(x, &[]);
        }
        self.sum(x, &axes, false)
    }

    /// Mean of every element, yielding a scalar node.
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        if axes.is_empty() {
            return self.reshape(x, &[]);
        }
        self.mean(x, &axes, false)
    }

    // ── composites ─────────────────────────────────────────────────────

    /// Numerically stable `log(sum(exp(x)))` over `axes` (keepdims). The max
    /// is detached: it enters as a constant, which leaves the gradient exact.
    pub fn logsumexp(&mut self, x: NodeId, axes: &[usize], keepdims: bool) -> Result<NodeId> {
        validate_axes(axes, self.value(x).rank())?;
        let maxes = reduce_max(self.value(x), axes);
        let m = self.constant(maxes);
        let shifted = self.sub(x, m)?;
        let e = self.exp(shifted)?;
        let s = self.sum(e, axes, true)?;
        let l = self.log(s)?;
        let out = self.add(l, m)?;
        if keepdims {
            Ok(out)
        } else {
            let dims: Vec<usize> = self
                .value(out)
                .dims()
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            self.reshape(out, &dims)
        }
    }

    // ── reverse pass ───────────────────────────────────────────────────

    /// Gradients of a scalar-valued `root` with respect to every node.
    /// Leaves that do not reach `root` get zero gradients.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar-valued, got shape {:?}",
                self.value(root).dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::ones(self.value(root).dims()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor<T>>],
        id: NodeId,
        contribution: Tensor<T>,
    ) -> Result<()> {
        if let Op::Leaf { requires_grad: false } = self.nodes[id.0].op {
            return Ok(());
        }
        debug_assert_eq!(contribution.dims(), self.value(id).dims());
        match &mut grads[id.0] {
            Some(existing) => *existing = existing.add(&contribution)?,
            slot @ None => *slot = Some(contribution),
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let value = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.reduce_to(self.value(*a).dims())?)?;
                self.accumulate(grads, *b, g.reduce_to(self.value(*b).dims())?)?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.reduce_to(self.value(*a).dims())?)?;
                let gb = g.map(|v| -v).reduce_to(self.value(*b).dims())?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::Mul(a, b) => {
                let ga = g.mul(self.value(*b))?.reduce_to(self.value(*a).dims())?;
                let gb = g.mul(self.value(*a))?.reduce_to(self.value(*b).dims())?;
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::Div(a, b) => {
                let ga = g
                    .zip_broadcast(self.value(*b), |gv, bv| gv / bv)?
                    .reduce_to(self.value(*a).dims())?;
                let gb_full = g
                    .zip_broadcast(value, |gv, ov| gv * ov)? // g * (a/b)
                    .zip_broadcast(self.value(*b), |t, bv| -(t / bv))?; // -g*a/b^2
                let gb = gb_full.reduce_to(self.value(*b).dims())?;
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::Neg(x) => self.accumulate(grads, *x, g.map(|v| -v))?,
            Op::Exp(x) => self.accumulate(grads, *x, g.mul(value)?)?,
            Op::Log(x) => {
                let gx = g.zip_broadcast(self.value(*x), |gv, xv| gv / xv)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Tanh(x) => {
                let gx = g.zip_broadcast(value, |gv, y| gv * (T::one() - y * y))?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Relu(x) => {
                let gx = g.zip_broadcast(self.value(*x), |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else {
                        T::zero()
                    }
                })?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Softplus(x) => {
                let gx = g.zip_broadcast(self.value(*x), |gv, xv| gv * sigmoid_stable(xv))?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_broadcast(value, |gv, y| gv * y * (T::one() - y))?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Square(x) => {
                let two = T::of(2.0);
                let gx = g.zip_broadcast(self.value(*x), |gv, xv| gv * two * xv)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Sqrt(x) => {
                let half = T::of(0.5);
                let gx = g.zip_broadcast(value, |gv, y| gv * half / y)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Clamp { x, lo, hi } => {
                let (l, h) = (T::of(*lo), T::of(*hi));
                let gx = g.zip_broadcast(self.value(*x), |gv, xv| {
                    if xv >= l && xv <= h {
                        gv
                    } else {
                        T::zero()
                    }
                })?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Affine { x, scale } => {
                let k = T::of(*scale);
                self.accumulate(grads, *x, g.map(|v| v * k))?;
            }
            Op::Matmul(a, b) => {
                let bt = self.value(*b).transpose2()?;
                let at = self.value(*a).transpose2()?;
                self.accumulate(grads, *a, g.matmul(&bt)?)?;
                self.accumulate(grads, *b, at.matmul(g)?)?;
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose2()?)?,
            Op::Sum { x, axes, keepdims } => {
                let gx = self.spread_reduction(g, *x, axes, *keepdims, None)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Mean { x, axes, keepdims } => {
                let count: usize = axes.iter().map(|&a| self.value(*x).dims()[a]).product();
                let inv = T::one() / T::of(count as f64);
                let gx = self.spread_reduction(g, *x, axes, *keepdims, Some(inv))?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.reshape(self.value(*x).dims())?)?;
            }
            Op::ConcatLast(a, b) => {
                let wa = *self.value(*a).dims().last().unwrap();
                let wb = *self.value(*b).dims().last().unwrap();
                let w = wa + wb;
                let rows = g.len() / w;
                let mut ga = Vec::with_capacity(rows * wa);
                let mut gb = Vec::with_capacity(rows * wb);
                for r in 0..rows {
                    ga.extend_from_slice(&g.data()[r * w..r * w + wa]);
                    gb.extend_from_slice(&g.data()[r * w + wa..(r + 1) * w]);
                }
                self.accumulate(
                    grads,
                    *a,
                    Tensor::from_parts(self.value(*a).dims().to_vec(), ga),
                )?;
                self.accumulate(
                    grads,
                    *b,
                    Tensor::from_parts(self.value(*b).dims().to_vec(), gb),
                )?;
            }
            Op::SliceLast { x, from, to } => {
                let src = self.value(*x);
                let w = *src.dims().last().unwrap();
                let ww = to - from;
                let rows = src.len() / w;
                let mut gx = vec![T::zero(); src.len()];
                for r in 0..rows {
                    gx[r * w + from..r * w + to]
                        .copy_from_slice(&g.data()[r * ww..(r + 1) * ww]);
                }
                self.accumulate(grads, *x, Tensor::from_parts(src.dims().to_vec(), gx))?;
            }
        }
        Ok(())
    }

    fn spread_reduction(
        &self,
        g: &Tensor<T>,
        x: NodeId,
        axes: &[usize],
        keepdims: bool,
        scale: Option<T>,
    ) -> Result<Tensor<T>> {
        let src_dims = self.value(x).dims();
        let g_keep = if keepdims {
            g.clone()
        } else {
            let mut dims = src_dims.to_vec();
            for &a in axes {
                dims[a] = 1;
            }
            g.reshape(&dims)?
        };
        let spread = g_keep.broadcast_to(src_dims)?;
        Ok(match scale {
            Some(k) => spread.scale(k),
            None => spread,
        })
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to node `id`; zero tensor if the node does not
    /// influence the root.
    pub fn wrt(&self, tape: &Tape<T>, id: NodeId) -> Tensor<T> {
        match &self.grads[id.index()] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(id).dims()),
        }
    }
}

fn softplus_stable<T: Scalar>(x: T) -> T {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^{-|x|})
    let zero = T::zero();
    let m = x.max(zero);
    m + (-x.abs()).exp().ln_1p()
}

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// Max over `axes` with keepdims, as a plain tensor (used by `logsumexp`).
fn reduce_max<T: Scalar>(t: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let mut reduced = vec![false; t.rank()];
    for &ax in axes {
        reduced[ax] = true;
    }
    let kept: Vec<usize> = t
        .dims()
        .iter()
        .enumerate()
        .map(|(i, &d)| if reduced[i] { 1 } else { d })
        .collect();
    let mut out = vec![T::neg_infinity(); kept.iter().product()];
    let out_strides = crate::tensor::contiguous_strides(&kept);
    let mut idx = vec![0usize; t.rank()];
    let mut out_off = 0usize;
    for &v in t.data() {
        if v > out[out_off] {
            out[out_off] = v;
        }
        for ax in (0..t.rank()).rev() {
            idx[ax] += 1;
            if !reduced[ax] {
                out_off += out_strides[ax];
            }
            if idx[ax] < t.dims()[ax] {
                break;
            }
            if !reduced[ax] {
                out_off -= out_strides[ax] * idx[ax];
            }
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(kept, out)
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// finite differences with step `h`:
/// `max_i |g_ad,i - g_fd,i| / max(1, |g_fd,i|)`.
///
/// `f` must build a scalar-valued graph from the given leaf. Run this in f64.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let root = f(&mut tape, xid)?;
    if tape.value(root).len() != 1 {
        return Err(Error::contract("grad_check: f must be scalar-valued".to_string()));
    }
    let grads = tape.backward(root)?;
    let g_ad = grads.wrt(&tape, xid);

    let eval = |xt: Tensor<T>| -> Result<f64> {
        let mut t = Tape::new();
        let id = t.leaf(xt);
        let r = f(&mut t, id)?;
        Ok(t.value(r).item()?.to64())
    };

    let step = T::of(h);
    let mut max_rel = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        if !fd.is_finite() {
            return Err(Error::numeric("non-finite finite-difference value".to_string()));
        }
        let ad = g_ad.data()[i].to64();
        let rel = (ad - fd).abs() / fd.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = t64(&[3], &[1.0, -2.0, 3.0]);
        let mut tape = Tape::new();
        let xid = tape.leaf(x);
        let sq = tape.square(xid).unwrap();
        let root = tape.sum_all(sq).unwrap();
        let g = tape.backward(root).unwrap().wrt(&tape, xid);
        assert_eq!(g.data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]));
        let c = tape.constant(Tensor::scalar(5.0));
        let root = tape.sum_all(c).unwrap();
        let g = tape.backward(root).unwrap().wrt(&tape, x);
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_times_b_transposed() {
        let a = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let mut tape = Tape::new();
        let aid = tape.leaf(a);
        let bid = tape.constant(b.clone());
        let prod = tape.matmul(aid, bid).unwrap();
        let root = tape.sum_all(prod).unwrap();
        let g = tape.backward(root).unwrap().wrt(&tape, aid);
        let ones = Tensor::<f64>::ones(&[2, 2]);
        let expect = ones.matmul(&b.transpose2().unwrap()).unwrap();
        assert_eq!(g, expect);
    }

    #[test]
    fn composite_matches_finite_differences() {
        // f(x) = mean(tanh(W x + b)) as a function of x
        let w = t64(&[3, 4], &[0.3, -0.1, 0.5, 0.2, 0.1, 0.4, -0.6, 0.7, -0.2, 0.9, 0.05, -0.3]);
        let b = t64(&[3, 1], &[0.1, -0.2, 0.3]);
        let x = t64(&[4, 1], &[0.5, -0.7, 0.2, 0.9]);
        let err = grad_check(
            |tape, xid| {
                let wid = tape.constant(w.clone());
                let bid = tape.constant(b.clone());
                let wx = tape.matmul(wid, xid)?;
                let pre = tape.add(wx, bid)?;
                let act = tape.tanh(pre)?;
                tape.mean_all(act)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn linear_function_fd_is_nearly_exact() {
        let x = t64(&[4], &[0.4, -1.2, 2.5, 0.3]);
        let err = grad_check(
            |tape, xid| {
                let k = tape.constant(t64(&[4], &[2.0, -1.0, 0.5, 3.0]));
                let prod = tape.mul(xid, k)?;
                tape.sum_all(prod)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "max rel err {err}");
    }

    #[test]
    fn zero_function_gradient_error_is_zero() {
        let x = t64(&[3], &[1.0, 2.0, 3.0]);
        let err = grad_check(
            |tape, xid| {
                let z = tape.affine(xid, 0.0, 0.0)?;
                tape.sum_all(z)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn softplus_at_zero_is_ln_two() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.softplus(x).unwrap();
        let v = tape.value(y).item().unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn exp_of_zero_is_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.exp(x).unwrap();
        assert_eq!(tape.value(y).item().unwrap(), 1.0);
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(0.0));
        assert!(matches!(tape.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn broadcast_add_gradient_reduces() {
        let a = t64(&[2, 3], &[1.0; 6]);
        let b = t64(&[3], &[1.0, 2.0, 3.0]);
        let mut tape = Tape::new();
        let aid = tape.constant(a);
        let bid = tape.leaf(b);
        let s = tape.add(aid, bid).unwrap();
        let root = tape.sum_all(s).unwrap();
        let g = tape.backward(root).unwrap().wrt(&tape, bid);
        assert_eq!(g.data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn mean_gradient_is_one_over_n() {
        let x = t64(&[4], &[1.0, 2.0, 3.0, 4.0]);
        let mut tape = Tape::new();
        let xid = tape.leaf(x);
        let root = tape.mean_all(xid).unwrap();
        let g = tape.backward(root).unwrap().wrt(&tape, xid);
        assert_eq!(g.data(), &[0.25; 4]);
    }

    #[test]
    fn logsumexp_matches_direct_computation() {
        let x = t64(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let l = tape.logsumexp(xid, &[1], false).unwrap();
        let got = tape.value(l);
        for r in 0..2 {
            let direct: f64 = x.row(r).unwrap().iter().map(|v| v.exp()).sum::<f64>().ln();
            assert!((got.data()[r] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn logsumexp_gradient_is_softmax() {
        let x = t64(&[3], &[0.5, -0.3, 1.7]);
        let err = grad_check(
            |tape, xid| {
                let l = tape.logsumexp(xid, &[0], false)?;
                tape.sum_all(l)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "max rel err {err}");
    }

    #[test]
    fn concat_slice_roundtrip_gradient() {
        let a = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let err = grad_check(
            |tape, xid| {
                let c = tape.constant(t64(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
                let cat = tape.concat_last(xid, c)?;
                let sl = tape.slice_last(cat, 1, 4)?;
                let sq = tape.square(sl)?;
                tape.sum_all(sq)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "max rel err {err}");
    }

    #[test]
    fn identical_tapes_give_bitwise_identical_gradients() {
        let run = || {
            let x = t64(&[8], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
            let mut tape = Tape::new();
            let xid = tape.leaf(x);
            let e = tape.exp(xid).unwrap();
            let s = tape.sigmoid(e).unwrap();
            let root = tape.mean_all(s).unwrap();
            tape.backward(root)
                .unwrap()
                .wrt(&tape, xid)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_production_is_numeric_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(1e308));
        let b = tape.constant(Tensor::scalar(1e308));
        // overflow to +inf must be caught
        assert!(matches!(tape.mul(a, b), Err(Error::Numeric(_))));
    }
}
