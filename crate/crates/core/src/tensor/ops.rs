//! Differentiable operations: forward evaluation on [`Tape`] plus the matching
//! backward rule in [`Op::backward`].

use super::gemm::gemm;
use super::shape::{broadcast_shapes, broadcast_strides, for_each_offset, for_each_offset2, numel, split_axis};
use super::tape::{GradBuffer, Node};
use super::{Mask, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Exp,
    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    LogClamped(f64),
    Tanh,
    Sigmoid,
    Elu,
    /// Huber-style smooth L1 with transition point 1.
    SmoothL1,
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Unary(Var, Unary),
    MatMul(Var, Var),
    TransposeLast(Var),
    Reshape(Var),
    BroadcastTo(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Sum { input: Var, axis: usize },
    Mean { input: Var, axis: usize },
    SumAll(Var),
    MaxPool { input: Var, argmax: Vec<Option<usize>> },
    Softmax { input: Var, mask: Vec<bool> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Conv1d { x: Var, kernel: Var, bias: Var },
    Dropout { input: Var, scale: Vec<T> },
    GatherRows { input: Var, indices: Vec<usize> },
    ScatterRows { input: Var, indices: Vec<usize> },
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!("{op}: axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Binary {
    fn apply<T: Real>(self, a: T, b: T) -> T {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
        }
    }
}

impl<T: Real> Tape<T> {
    fn binary(&mut self, a: Var, b: Var, kind: Binary, name: &'static str) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape =
            broadcast_shapes(ta.shape(), tb.shape()).ok_or_else(|| shape_err(name, ta.shape(), tb.shape()))?;
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| kind.apply(x, y)).collect()
        } else {
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            let mut out = Vec::with_capacity(numel(&out_shape));
            let (da, db) = (ta.data(), tb.data());
            for_each_offset2(&out_shape, &sa, &sb, |_, oa, ob| out.push(kind.apply(da[oa], db[ob])));
            out
        };
        let op = match kind {
            Binary::Add => Op::Add(a, b),
            Binary::Sub => Op::Sub(a, b),
            Binary::Mul => Op::Mul(a, b),
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, data)?, op, rg))
    }

    /// Elementwise `a + b` with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul, "mul")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let one = T::one();
        let half = T::lit(0.5);
        let value = self.value(x).map(|v| match kind {
            Unary::Exp => v.exp(),
            Unary::LogClamped(eps) => v.max(T::lit(eps)).ln(),
            Unary::Tanh => v.tanh(),
            Unary::Sigmoid => one / (one + (-v).exp()),
            Unary::Elu => {
                if v > T::zero() {
                    v
                } else {
                    v.exp_m1()
                }
            }
            Unary::SmoothL1 => {
                if v.abs() < one {
                    half * v * v
                } else {
                    v.abs() - half
                }
            }
        });
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Unary(x, kind), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Elu)
    }

    /// Batched matrix product `[.., m, k] × [.., k, n] → [.., m, n]`; batch
    /// axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shapes(ba, bb).ok_or_else(|| shape_err("matmul", sa, sb))?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); numel(&out_shape)];
        if numel(bb) == 1 {
            let rows = numel(ba) * m;
            gemm(rows, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        } else {
            let stra = broadcast_strides(ba, &batch);
            let strb = broadcast_strides(bb, &batch);
            let (da, db) = (ta.data(), tb.data());
            for_each_offset2(&batch, &stra, &strb, |i, ia, ib| {
                gemm(
                    m,
                    k,
                    n,
                    &da[ia * m * k..],
                    false,
                    &db[ib * k * n..],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            });
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() < 2 {
            return Err(Error::Dimension(format!("transpose needs rank >= 2, got {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let mut shape = s.to_vec();
        let rank = shape.len();
        shape.swap(rank - 2, rank - 1);
        let data = transpose_last(t.data(), r, c);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::TransposeLast(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Materializes `x` broadcast to `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        match broadcast_shapes(t.shape(), shape) {
            Some(s) if s == shape => {}
            _ => return Err(shape_err("broadcast_to", t.shape(), shape)),
        }
        let strides = broadcast_strides(t.shape(), shape);
        let mut data = Vec::with_capacity(numel(shape));
        let src = t.data();
        for_each_offset(shape, &strides, |off| data.push(src[off]));
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::BroadcastTo(x), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let base = self.value(*first).shape().to_vec();
        check_axis("concat", &base, axis)?;
        let mut extent = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let same_rest =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(shape_err("concat", &base, s));
            }
            extent += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("slice", t.shape(), axis)?;
        if start + len > t.shape()[axis] {
            return Err(Error::Dimension(format!(
                "slice {start}..{} out of range for axis {axis} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let (outer, ext, inner) = split_axis(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Slice { input: x, axis, start }, rg))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let t = self.value(x);
        check_axis("reduce", t.shape(), axis)?;
        let (outer, ext, inner) = split_axis(t.shape(), axis);
        let mut data = vec![T::zero(); outer * inner];
        let src = t.data();
        for o in 0..outer {
            for e in 0..ext {
                let row = &src[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (acc, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean {
            let inv = T::one() / T::lit(ext.max(1) as f64);
            data.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let rg = self.any_grad(&[x]);
        let op = if mean { Op::Mean { input: x, axis } } else { Op::Sum { input: x, axis } };
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Maximum over `axis` (removed from the output). With a mask, only valid
    /// positions compete; a fully masked lane reduces to zero.
    pub fn max_pool(&mut self, x: Var, axis: usize, mask: Option<&Mask>) -> Result<Var> {
        let t = self.value(x);
        check_axis("max_pool", t.shape(), axis)?;
        let valid = match mask {
            Some(m) => Some(m.broadcast_to(t.shape())?),
            None => None,
        };
        let (outer, ext, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best: Option<usize> = None;
                for e in 0..ext {
                    let idx = (o * ext + e) * inner + i;
                    if valid.as_ref().is_some_and(|v| !v[idx]) {
                        continue;
                    }
                    if best.is_none_or(|b| src[idx] > src[b]) {
                        best = Some(idx);
                    }
                }
                data.push(best.map_or(T::zero(), |b| src[b]));
                argmax.push(best);
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::MaxPool { input: x, argmax }, rg))
    }

    /// Softmax over the last axis restricted to valid positions. Masked
    /// positions get exactly zero probability.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if shape.is_empty() {
            return Err(Error::Dimension("softmax over a rank-0 tensor".into()));
        }
        let valid = match mask {
            Some(m) => m.broadcast_to(&shape)?,
            None => vec![true; t.len()],
        };
        let width = shape[shape.len() - 1];
        let src = t.data();
        let mut data = vec![T::zero(); src.len()];
        for (row, (xs, ys)) in src.chunks(width.max(1)).zip(data.chunks_mut(width.max(1))).enumerate() {
            let flags = &valid[row * width..(row + 1) * width];
            let max = xs
                .iter()
                .zip(flags)
                .filter(|(_, &f)| f)
                .map(|(&v, _)| v)
                .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
                .ok_or(Error::DegenerateRow { row })?;
            let mut total = T::zero();
            for ((y, &v), &f) in ys.iter_mut().zip(xs).zip(flags) {
                if f {
                    *y = (v - max).exp();
                    total += *y;
                }
            }
            let inv = T::one() / total;
            ys.iter_mut().for_each(|y| *y *= inv);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax { input: x, mask: valid }, rg))
    }

    /// Normalizes the last axis to zero mean and unit variance
    /// (`eps` inside the square root), then applies `gain * x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().ok_or_else(|| Error::Dimension("layer_norm on rank-0".into()))?;
        for p in [gain, bias] {
            if self.value(p).shape() != [d] {
                return Err(shape_err("layer_norm", t.shape(), self.value(p).shape()));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.len() / d.max(1);
        let inv_d = T::one() / T::lit(d as f64);
        let eps = T::lit(eps);
        let mut xhat = vec![T::zero(); t.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); t.len()];
        for r in 0..rows {
            let xs = &t.data()[r * d..(r + 1) * d];
            let mean = xs.iter().copied().sum::<T>() * inv_d;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (xs[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// Cross-correlation along time with zero 'same' padding.
    ///
    /// `x: [.., T, C_in]`, `kernel: [w, C_in, C_out]` with odd `w`,
    /// `bias: [C_out]` → `[.., T, C_out]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let (sx, sk) = (tx.shape(), tk.shape());
        if sx.len() < 2 || sk.len() != 3 || sk[1] != sx[sx.len() - 1] {
            return Err(shape_err("conv1d", sx, sk));
        }
        let (w, cin, cout) = (sk[0], sk[1], sk[2]);
        let steps = sx[sx.len() - 2];
        if w % 2 == 0 {
            return Err(Error::Dimension(format!("conv1d kernel width {w} must be odd")));
        }
        if w > steps + 2 * (w / 2) {
            return Err(Error::Dimension(format!("conv1d kernel width {w} exceeds padded length of {steps} steps")));
        }
        if self.value(bias).shape() != [cout] {
            return Err(shape_err("conv1d bias", sk, self.value(bias).shape()));
        }
        let seqs = tx.len() / (steps * cin);
        let cols = im2col(tx.data(), seqs, steps, cin, w);
        let mut out = vec![T::zero(); seqs * steps * cout];
        gemm(seqs * steps, w * cin, cout, &cols, false, tk.data(), false, &mut out, false);
        let bd = self.value(bias).data();
        for row in out.chunks_mut(cout) {
            for (o, &b) in row.iter_mut().zip(bd) {
                *o += b;
            }
        }
        let mut shape = sx.to_vec();
        let rank = shape.len();
        shape[rank - 1] = cout;
        let rg = self.any_grad(&[x, kernel, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv1d { x, kernel, bias }, rg))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// rescales survivors by `1 / (1 - rate)`. Identity outside training.
    pub fn dropout<R: rand::Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let n = self.value(x).len();
        let scale: Vec<T> = (0..n).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Dropout { input: x, scale }, rg))
    }

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.is_empty() {
            return Err(Error::Dimension("gather_rows on rank-0".into()));
        }
        let row = numel(&s[1..]);
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= s[0] {
                return Err(Error::Dimension(format!("gather index {i} out of range for {s:?}")));
            }
            data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
        }
        let mut shape = s.to_vec();
        shape[0] = indices.len();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::GatherRows { input: x, indices: indices.to_vec() }, rg))
    }

    /// Places row `i` of `x` at row `indices[i]` of a zero tensor with `rows`
    /// rows. Indices must be distinct.
    pub fn scatter_rows(&mut self, x: Var, indices: &[usize], rows: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.is_empty() || s[0] != indices.len() {
            return Err(Error::Dimension(format!("scatter_rows: {} indices for shape {s:?}", indices.len())));
        }
        let row = numel(&s[1..]);
        let mut seen = vec![false; rows];
        let mut data = vec![T::zero(); rows * row];
        for (src, &dst) in indices.iter().enumerate() {
            if dst >= rows || std::mem::replace(&mut seen[dst], true) {
                return Err(Error::Dimension(format!("scatter index {dst} invalid or repeated")));
            }
            data[dst * row..(dst + 1) * row].copy_from_slice(&t.data()[src * row..(src + 1) * row]);
        }
        let mut shape = s.to_vec();
        shape[0] = rows;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::ScatterRows { input: x, indices: indices.to_vec() }, rg))
    }
}

fn transpose_last<T: Real>(src: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    let mat = r * c;
    if mat == 0 {
        return out;
    }
    for (b, block) in src.chunks(mat).enumerate() {
        let dst = &mut out[b * mat..(b + 1) * mat];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = block[i * c + j];
            }
        }
    }
    out
}

/// `[seqs·T, w·C]` patch matrix for 'same'-padded 1D correlation.
fn im2col<T: Real>(x: &[T], seqs: usize, steps: usize, cin: usize, w: usize) -> Vec<T> {
    let pad = w / 2;
    let mut cols = vec![T::zero(); seqs * steps * w * cin];
    for s in 0..seqs {
        for t in 0..steps {
            let dst = &mut cols[(s * steps + t) * w * cin..(s * steps + t + 1) * w * cin];
            for j in 0..w {
                let src_t = t + j;
                if src_t < pad || src_t - pad >= steps {
                    continue;
                }
                let src = (s * steps + src_t - pad) * cin;
                dst[j * cin..(j + 1) * cin].copy_from_slice(&x[src..src + cin]);
            }
        }
    }
    cols
}

impl<T: Real> Op<T> {
    pub(crate) fn backward(&self, nodes: &[Node<T>], out: &Tensor<T>, g: &[T], grads: &mut GradBuffer<T>) {
        let val = |v: Var| &nodes[v.0].value;
        match self {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let same = ta.shape() == tb.shape();
                let sa = broadcast_strides(ta.shape(), out.shape());
                let sb = broadcast_strides(tb.shape(), out.shape());
                let (da, db) = (ta.data(), tb.data());
                for (side, var) in [(0, *a), (1, *b)] {
                    let Some(slot) = grads.slot(nodes, var) else { continue };
                    let factor = |oa: usize, ob: usize| -> T {
                        match (self, side) {
                            (Op::Add(..), _) => T::one(),
                            (Op::Sub(..), 0) => T::one(),
                            (Op::Sub(..), _) => -T::one(),
                            (Op::Mul(..), 0) => db[ob],
                            (Op::Mul(..), _) => da[oa],
                            _ => unreachable!(),
                        }
                    };
                    if same {
                        for (i, s) in slot.iter_mut().enumerate() {
                            *s += g[i] * factor(i, i);
                        }
                    } else {
                        for_each_offset2(out.shape(), &sa, &sb, |i, oa, ob| {
                            let dst = if side == 0 { oa } else { ob };
                            slot[dst] += g[i] * factor(oa, ob);
                        });
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(slot) = grads.slot(nodes, *x) {
                    for (s, &gi) in slot.iter_mut().zip(g) {
                        *s += gi * *c;
                    }
                }
            }
            Op::Unary(x, kind) => {
                let xs = val(*x).data();
                let ys = out.data();
                let one = T::one();
                if let Some(slot) = grads.slot(nodes, *x) {
                    for i in 0..slot.len() {
                        let d = match kind {
                            Unary::Exp => ys[i],
                            Unary::LogClamped(eps) => {
                                if xs[i] > T::lit(*eps) {
                                    one / xs[i]
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Tanh => one - ys[i] * ys[i],
                            Unary::Sigmoid => ys[i] * (one - ys[i]),
                            Unary::Elu => {
                                if xs[i] > T::zero() {
                                    one
                                } else {
                                    ys[i] + one
                                }
                            }
                            Unary::SmoothL1 => {
                                if xs[i].abs() < one {
                                    xs[i]
                                } else {
                                    xs[i].signum()
                                }
                            }
                        };
                        slot[i] += g[i] * d;
                    }
                }
            }
            Op::MatMul(a, b) => matmul_backward(nodes, *a, *b, out, g, grads),
            Op::TransposeLast(x) => {
                let s = out.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let gt = transpose_last(g, r, c);
                grads.add(nodes, *x, &gt);
            }
            Op::Reshape(x) => grads.add(nodes, *x, g),
            Op::BroadcastTo(x) => {
                if let Some(slot) = grads.slot(nodes, *x) {
                    let strides = broadcast_strides(val(*x).shape(), out.shape());
                    let mut i = 0;
                    for_each_offset(out.shape(), &strides, |off| {
                        slot[off] += g[i];
                        i += 1;
                    });
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, ext, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let e = val(v).shape()[*axis];
                    if let Some(slot) = grads.slot(nodes, v) {
                        for o in 0..outer {
                            let src = &g[(o * ext + offset) * inner..(o * ext + offset + e) * inner];
                            for (s, &gi) in slot[o * e * inner..(o + 1) * e * inner].iter_mut().zip(src) {
                                *s += gi;
                            }
                        }
                    }
                    offset += e;
                }
            }
            Op::Slice { input, axis, start } => {
                let ext = val(*input).shape()[*axis];
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                if let Some(slot) = grads.slot(nodes, *input) {
                    for o in 0..outer {
                        let dst = &mut slot[(o * ext + start) * inner..(o * ext + start + len) * inner];
                        for (s, &gi) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                            *s += gi;
                        }
                    }
                }
            }
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                let (outer, ext, inner) = split_axis(val(*input).shape(), *axis);
                let f = match self {
                    Op::Mean { .. } => T::one() / T::lit(ext.max(1) as f64),
                    _ => T::one(),
                };
                if let Some(slot) = grads.slot(nodes, *input) {
                    for o in 0..outer {
                        for e in 0..ext {
                            let dst = &mut slot[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                            for (s, &gi) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *s += gi * f;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(slot) = grads.slot(nodes, *x) {
                    slot.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::MaxPool { input, argmax } => {
                if let Some(slot) = grads.slot(nodes, *input) {
                    for (&gi, am) in g.iter().zip(argmax) {
                        if let Some(idx) = am {
                            slot[*idx] += gi;
                        }
                    }
                }
            }
            Op::Softmax { input, mask } => {
                let ys = out.data();
                let width = out.shape()[out.shape().len() - 1].max(1);
                if let Some(slot) = grads.slot(nodes, *input) {
                    for r in 0..ys.len() / width {
                        let range = r * width..(r + 1) * width;
                        let dot: T = ys[range.clone()].iter().zip(&g[range.clone()]).map(|(&y, &gi)| y * gi).sum();
                        for i in range {
                            if mask[i] {
                                slot[i] += ys[i] * (g[i] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = val(*gain).len();
                let gd = val(*gain).data();
                if let Some(slot) = grads.slot(nodes, *gain) {
                    for (r, grow) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            slot[j] += grow[j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(slot) = grads.slot(nodes, *bias) {
                    for grow in g.chunks(d) {
                        for j in 0..d {
                            slot[j] += grow[j];
                        }
                    }
                }
                if let Some(slot) = grads.slot(nodes, *x) {
                    let inv_d = T::one() / T::lit(d as f64);
                    for (r, grow) in g.chunks(d).enumerate() {
                        let h = &xhat[r * d..(r + 1) * d];
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..d {
                            let dh = grow[j] * gd[j];
                            sum_dh += dh;
                            sum_dh_h += dh * h[j];
                        }
                        for j in 0..d {
                            let dh = grow[j] * gd[j];
                            slot[r * d + j] += inv_std[r] * inv_d * (T::lit(d as f64) * dh - sum_dh - h[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Conv1d { x, kernel, bias } => {
                let (tx, tk) = (val(*x), val(*kernel));
                let sk = tk.shape();
                let (w, cin, cout) = (sk[0], sk[1], sk[2]);
                let steps = tx.shape()[tx.shape().len() - 2];
                let seqs = tx.len() / (steps * cin);
                let rows = seqs * steps;
                if let Some(slot) = grads.slot(nodes, *bias) {
                    for grow in g.chunks(cout) {
                        for (s, &gi) in slot.iter_mut().zip(grow) {
                            *s += gi;
                        }
                    }
                }
                if nodes[kernel.0].requires_grad {
                    let cols = im2col(tx.data(), seqs, steps, cin, w);
                    let slot = grads.slot(nodes, *kernel).expect("kernel requires grad");
                    gemm(w * cin, rows, cout, &cols, true, g, false, slot, true);
                }
                if let Some(slot) = grads.slot(nodes, *x) {
                    let mut dcols = vec![T::zero(); rows * w * cin];
                    gemm(rows, cout, w * cin, g, false, tk.data(), true, &mut dcols, false);
                    let pad = w / 2;
                    for s in 0..seqs {
                        for t in 0..steps {
                            let src = &dcols[(s * steps + t) * w * cin..(s * steps + t + 1) * w * cin];
                            for j in 0..w {
                                let src_t = t + j;
                                if src_t < pad || src_t - pad >= steps {
                                    continue;
                                }
                                let dst = (s * steps + src_t - pad) * cin;
                                for c in 0..cin {
                                    slot[dst + c] += src[j * cin + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::Dropout { input, scale } => {
                if let Some(slot) = grads.slot(nodes, *input) {
                    for ((s, &gi), &k) in slot.iter_mut().zip(g).zip(scale) {
                        *s += gi * k;
                    }
                }
            }
            Op::GatherRows { input, indices } => {
                let row = numel(&out.shape()[1..]);
                if let Some(slot) = grads.slot(nodes, *input) {
                    for (k, &i) in indices.iter().enumerate() {
                        for (s, &gi) in slot[i * row..(i + 1) * row].iter_mut().zip(&g[k * row..(k + 1) * row]) {
                            *s += gi;
                        }
                    }
                }
            }
            Op::ScatterRows { input, indices } => {
                let row = numel(&out.shape()[1..]);
                if let Some(slot) = grads.slot(nodes, *input) {
                    for (k, &i) in indices.iter().enumerate() {
                        for (s, &gi) in slot[k * row..(k + 1) * row].iter_mut().zip(&g[i * row..(i + 1) * row]) {
                            *s += gi;
                        }
                    }
                }
            }
        }
    }
}

fn matmul_backward<T: Real>(nodes: &[Node<T>], a: Var, b: Var, out: &Tensor<T>, g: &[T], grads: &mut GradBuffer<T>) {
    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
    let (sa, sb) = (ta.shape(), tb.shape());
    let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
    let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
    if numel(bb) == 1 {
        let rows = numel(ba) * m;
        if let Some(slot) = grads.slot(nodes, a) {
            gemm(rows, n, k, g, false, tb.data(), true, slot, true);
        }
        if let Some(slot) = grads.slot(nodes, b) {
            gemm(k, rows, n, ta.data(), true, g, false, slot, true);
        }
        return;
    }
    let batch = &out.shape()[..out.shape().len() - 2];
    let stra = broadcast_strides(ba, batch);
    let strb = broadcast_strides(bb, batch);
    if let Some(slot) = grads.slot(nodes, a) {
        for_each_offset2(batch, &stra, &strb, |i, ia, ib| {
            gemm(
                m,
                n,
                k,
                &g[i * m * n..],
                false,
                &tb.data()[ib * k * n..],
                true,
                &mut slot[ia * m * k..(ia + 1) * m * k],
                true,
            );
        });
    }
    if let Some(slot) = grads.slot(nodes, b) {
        for_each_offset2(batch, &stra, &strb, |i, ia, ib| {
            gemm(
                k,
                m,
                n,
                &ta.data()[ia * m * k..],
                true,
                &g[i * m * n..],
                false,
                &mut slot[ib * k * n..(ib + 1) * k * n],
                true,
            );
        });
    }
}
