//! Random-shape gradient cases for every differentiable tape operation.

use super::gradcheck::{max_rel_error, Build, Precision};
use mmtp::tensor::nn::{lstm_forward, EngineRng};
use mmtp::tensor::{Real, Tape, Unary, Var};
use mmtp::{Mask, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CASES_PER_OP: usize = 20;

pub struct OpReport {
    pub name: &'static str,
    pub cases: usize,
    pub worst_extended: f64,
    pub worst_single: f64,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values spread at least `gap` apart so max-selection is stable under ±h.
fn distinct_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * i as f64 / n.max(1) as f64).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

macro_rules! simple_op {
    ($name:ident, |$tape:ident, $xs:ident| $body:expr) => {
        struct $name;
        impl Build for $name {
            fn build<T: Real>(&self, $tape: &mut Tape<T>, $xs: &[Var]) -> Result<Var> {
                $body
            }
        }
    };
}

simple_op!(AddOp, |t, x| t.add(x[0], x[1]));
simple_op!(SubOp, |t, x| t.sub(x[0], x[1]));
simple_op!(MulOp, |t, x| t.mul(x[0], x[1]));
simple_op!(MatMulOp, |t, x| t.matmul(x[0], x[1]));
simple_op!(TransposeOp, |t, x| t.transpose(x[0]));
simple_op!(SumAllOp, |t, x| Ok(t.sum_all(x[0])));
simple_op!(LayerNormOp, |t, x| t.layer_norm(x[0], x[1], x[2], 1e-5));
simple_op!(ConvOp, |t, x| t.conv1d(x[0], x[1], x[2]));
simple_op!(LstmOp, |t, x| {
    let out = lstm_forward(t, x[0], x[1], x[2], x[3], Some(x[4]), Some(x[5]))?;
    let c = t.scale(out.cell, T::lit(0.5));
    let h = t.add(out.last, c)?;
    let all = t.sum(out.all, 1)?;
    t.mul(h, all)
});

struct ScaleOp(f64);
impl Build for ScaleOp {
    fn build<T: Real>(&self, t: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        Ok(t.scale(x[0], T::lit(self.0)))
    }
}

struct UnaryOp(Unary);
impl Build for UnaryOp {
    fn build<T: Real>(&self, t: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        Ok(t.unary(x[0], self.0))
    }
}

struct ReshapeOp(Vec<usize>);
impl Build for ReshapeOp {
    fn build<T: Real>(&self, t: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        t.reshape(x[0], &self.0)
    }
}

struct BroadcastOp(Vec<usize>);
impl Build for BroadcastOp {
    fn build<T: Real>(&self, t: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        t.broadcast_to(x[0], &self.0)
    }
}

struct ConcatOp(usize);
impl Build for ConcatOp {
    fn build<T: Real>(&self, t: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        t.concat(x, self.0)
    }
}

struct SliceOp {
    axis: usize,
    start: usize,
    len: usize,
}
impl Build for SliceOp {
    fn build<T: Real>(&self, t: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        t.slice(x[0], self.axis, self.start, self.len)
    }
}

struct ReduceOp {
    axis: usize,
    mean: bool,
}
impl Build for ReduceOp {
    fn build<T: Real>(&self, t: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        if self.mean {
            t.mean(x[0], self.axis)
        } else {
            t.sum(x[0], self.axis)
        }
    }
}

struct MaxPoolOp {
    axis: usize,
    mask: Option<Mask>,
}
impl Build for MaxPoolOp {
    fn build<T: Real>(&self, t: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        t.max_pool(x[0], self.axis, self.mask.as_ref())
    }
}

struct SoftmaxOp(Mask);
impl Build for SoftmaxOp {
    fn build<T: Real>(&self, t: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        t.softmax_masked(x[0], Some(&self.0))
    }
}

struct DropoutOp {
    rate: f64,
    seed: u64,
}
impl Build for DropoutOp {
    fn build<T: Real>(&self, t: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        let mut rng = EngineRng::seed_from_u64(self.seed);
        t.dropout(x[0], self.rate, true, &mut rng)
    }
}

struct GatherOp(Vec<usize>);
impl Build for GatherOp {
    fn build<T: Real>(&self, t: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        t.gather_rows(x[0], &self.0)
    }
}

struct ScatterOp(Vec<usize>, usize);
impl Build for ScatterOp {
    fn build<T: Real>(&self, t: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        t.scatter_rows(x[0], &self.0, self.1)
    }
}

fn run<B: Build>(
    name: &'static str,
    seed: u64,
    mut make: impl FnMut(&mut ChaCha8Rng) -> (B, Vec<Tensor<f64>>),
) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_extended, mut worst_single) = (0.0f64, 0.0f64);
    for case in 0..CASES_PER_OP {
        let (op, inputs) = make(&mut rng);
        let wseed = seed * 1000 + case as u64;
        worst_extended = worst_extended.max(max_rel_error(&op, &inputs, Precision::Extended, wseed)?);
        worst_single = worst_single.max(max_rel_error(&op, &inputs, Precision::Single, wseed)?);
    }
    Ok(OpReport { name, cases: CASES_PER_OP, worst_extended, worst_single })
}

/// Broadcast partner for a `[r, c]` operand.
fn partner_shape(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<usize> {
    match rng.random_range(0..4) {
        0 => vec![r, c],
        1 => vec![c],
        2 => vec![r, 1],
        _ => vec![1, c],
    }
}

pub fn run_suite() -> Result<Vec<OpReport>> {
    let mut out = Vec::new();
    out.push(run("add", 1, |rng| {
        let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 5));
        let s = partner_shape(rng, r, c);
        (AddOp, vec![rand_tensor(rng, &[r, c], -2.0, 2.0), rand_tensor(rng, &s, -2.0, 2.0)])
    })?);
    out.push(run("sub", 2, |rng| {
        let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 5));
        let s = partner_shape(rng, r, c);
        (SubOp, vec![rand_tensor(rng, &s, -2.0, 2.0), rand_tensor(rng, &[r, c], -2.0, 2.0)])
    })?);
    out.push(run("mul", 3, |rng| {
        let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 5));
        let s = partner_shape(rng, r, c);
        (MulOp, vec![rand_tensor(rng, &[r, c], -2.0, 2.0), rand_tensor(rng, &s, -2.0, 2.0)])
    })?);
    out.push(run("scale", 4, |rng| {
        let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
        (ScaleOp(rng.random_range(-2.0..2.0)), vec![rand_tensor(rng, &s, -2.0, 2.0)])
    })?);
    for (name, kind, lo, hi, seed) in [
        ("exp", Unary::Exp, -2.0, 2.0, 5),
        ("log", Unary::LogClamped(1e-12), 0.2, 2.0, 6),
        ("tanh", Unary::Tanh, -2.0, 2.0, 7),
        ("sigmoid", Unary::Sigmoid, -2.0, 2.0, 8),
        ("elu", Unary::Elu, -2.0, 2.0, 9),
        ("smooth_l1", Unary::SmoothL1, -2.0, 2.0, 10),
    ] {
        out.push(run(name, seed, |rng| {
            let s = [dim(rng, 1, 4), dim(rng, 1, 5)];
            (UnaryOp(kind), vec![rand_tensor(rng, &s, lo, hi)])
        })?);
    }
    out.push(run("matmul", 11, |rng| {
        let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
        let b = dim(rng, 2, 3);
        let (sa, sb) = match rng.random_range(0..4) {
            0 => (vec![m, k], vec![k, n]),
            1 => (vec![b, m, k], vec![k, n]),
            2 => (vec![b, m, k], vec![b, k, n]),
            _ => (vec![b, 1, m, k], vec![2, k, n]),
        };
        (MatMulOp, vec![rand_tensor(rng, &sa, -2.0, 2.0), rand_tensor(rng, &sb, -2.0, 2.0)])
    })?);
    out.push(run("transpose", 12, |rng| {
        let s = [dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4)];
        (TransposeOp, vec![rand_tensor(rng, &s, -2.0, 2.0)])
    })?);
    out.push(run("reshape", 13, |rng| {
        let (a, b) = (dim(rng, 1, 4), dim(rng, 1, 4));
        (ReshapeOp(vec![b, a]), vec![rand_tensor(rng, &[a, b], -2.0, 2.0)])
    })?);
    out.push(run("broadcast_to", 14, |rng| {
        let (a, b) = (dim(rng, 1, 4), dim(rng, 1, 4));
        (BroadcastOp(vec![2, a, b]), vec![rand_tensor(rng, &[a, 1], -2.0, 2.0)])
    })?);
    out.push(run("concat", 15, |rng| {
        let axis = rng.random_range(0..2);
        let base = [dim(rng, 1, 3), dim(rng, 1, 3)];
        let inputs = (0..dim(rng, 2, 3))
            .map(|_| {
                let mut s = base;
                s[axis] = dim(rng, 1, 3);
                rand_tensor(rng, &s, -2.0, 2.0)
            })
            .collect();
        (ConcatOp(axis), inputs)
    })?);
    out.push(run("slice", 16, |rng| {
        let s = [dim(rng, 2, 4), dim(rng, 2, 5)];
        let axis = rng.random_range(0..2);
        let len = dim(rng, 1, s[axis] - 1);
        let start = rng.random_range(0..=s[axis] - len);
        (SliceOp { axis, start, len }, vec![rand_tensor(rng, &s, -2.0, 2.0)])
    })?);
    out.push(run("sum", 17, |rng| {
        let s = [dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 3)];
        (ReduceOp { axis: rng.random_range(0..3), mean: false }, vec![rand_tensor(rng, &s, -2.0, 2.0)])
    })?);
    out.push(run("mean", 18, |rng| {
        let s = [dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 3)];
        (ReduceOp { axis: rng.random_range(0..3), mean: true }, vec![rand_tensor(rng, &s, -2.0, 2.0)])
    })?);
    out.push(run("sum_all", 19, |rng| {
        let s = [dim(rng, 1, 4), dim(rng, 1, 4)];
        (SumAllOp, vec![rand_tensor(rng, &s, -2.0, 2.0)])
    })?);
    out.push(run("max_pool", 20, |rng| {
        let s = [dim(rng, 1, 3), dim(rng, 2, 5), dim(rng, 1, 3)];
        let axis = rng.random_range(0..3);
        let mask = if rng.random_bool(0.5) {
            let flags = (0..s.iter().product()).map(|_| rng.random_bool(0.7)).collect();
            Some(Mask::new(s.to_vec(), flags).unwrap())
        } else {
            None
        };
        (MaxPoolOp { axis, mask }, vec![distinct_tensor(rng, &s)])
    })?);
    out.push(run("softmax_masked", 21, |rng| {
        let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 6));
        let mut flags: Vec<bool> = (0..r * c).map(|_| rng.random_bool(0.7)).collect();
        for row in 0..r {
            let keep = rng.random_range(0..c);
            flags[row * c + keep] = true;
        }
        (SoftmaxOp(Mask::new([r, c], flags).unwrap()), vec![rand_tensor(rng, &[r, c], -2.0, 2.0)])
    })?);
    out.push(run("layer_norm", 22, |rng| {
        let (r, d) = (dim(rng, 1, 4), dim(rng, 2, 6));
        (
            LayerNormOp,
            vec![
                rand_tensor(rng, &[r, d], -2.0, 2.0),
                rand_tensor(rng, &[d], -2.0, 2.0),
                rand_tensor(rng, &[d], -2.0, 2.0),
            ],
        )
    })?);
    out.push(run("conv1d", 23, |rng| {
        let (n, t, ci, co) = (dim(rng, 1, 2), dim(rng, 1, 5), dim(rng, 1, 3), dim(rng, 1, 3));
        let w = if rng.random_bool(0.5) { 3 } else { 1 };
        (
            ConvOp,
            vec![
                rand_tensor(rng, &[n, t, ci], -2.0, 2.0),
                rand_tensor(rng, &[w, ci, co], -2.0, 2.0),
                rand_tensor(rng, &[co], -2.0, 2.0),
            ],
        )
    })?);
    out.push(run("dropout", 24, |rng| {
        let s = [dim(rng, 1, 4), dim(rng, 1, 5)];
        let op = DropoutOp { rate: rng.random_range(0.1..0.6), seed: rng.random() };
        (op, vec![rand_tensor(rng, &s, -2.0, 2.0)])
    })?);
    out.push(run("gather_rows", 25, |rng| {
        let (n, c) = (dim(rng, 1, 4), dim(rng, 1, 3));
        let idx = (0..dim(rng, 1, 6)).map(|_| rng.random_range(0..n)).collect();
        (GatherOp(idx), vec![rand_tensor(rng, &[n, c], -2.0, 2.0)])
    })?);
    out.push(run("scatter_rows", 26, |rng| {
        let (rows, c) = (dim(rng, 2, 6), dim(rng, 1, 3));
        let mut idx: Vec<usize> = (0..rows).collect();
        for i in (1..rows).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        idx.truncate(dim(rng, 1, rows));
        let m = idx.len();
        (ScatterOp(idx, rows), vec![rand_tensor(rng, &[m, c], -2.0, 2.0)])
    })?);
    out.push(run("lstm", 27, |rng| {
        let (n, t, c, h) = (dim(rng, 1, 2), dim(rng, 1, 4), dim(rng, 1, 3), dim(rng, 1, 3));
        (
            LstmOp,
            vec![
                rand_tensor(rng, &[n, t, c], -2.0, 2.0),
                rand_tensor(rng, &[c, 4 * h], -1.0, 1.0),
                rand_tensor(rng, &[h, 4 * h], -1.0, 1.0),
                rand_tensor(rng, &[4 * h], -1.0, 1.0),
                rand_tensor(rng, &[n, h], -1.0, 1.0),
                rand_tensor(rng, &[n, h], -1.0, 1.0),
            ],
        )
    })?);
    Ok(out)
}
