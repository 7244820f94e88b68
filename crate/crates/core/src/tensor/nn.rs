//! Layers built from tape primitives, plus the forward context that binds a
//! [`ParamStore`] onto a fresh [`Tape`].

use rand::Rng;

use super::{Gradients, Mask, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// The engine's seedable generator. Every stochastic operation draws from one
/// of these so a run is reproducible from its seed.
pub type EngineRng = rand_chacha::ChaCha8Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// One forward pass: a tape, the parameters it reads, and the dropout switch.
pub struct Ctx<'a, T> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    training: bool,
    rng: Option<&'a mut EngineRng>,
}

impl<'a, T: Real> Ctx<'a, T> {
    /// Evaluation context: dropout disabled.
    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Self { tape: Tape::new(), store, bound: vec![None; store.len()], training: false, rng: None }
    }

    /// Training context: dropout draws from `rng`.
    pub fn train(store: &'a ParamStore<T>, rng: &'a mut EngineRng) -> Self {
        Self { tape: Tape::new(), store, bound: vec![None; store.len()], training: true, rng: Some(rng) }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// The tape leaf holding parameter `id`, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.training => self.tape.dropout(x, rate, true, rng),
            _ if !(0.0..1.0).contains(&rate) => Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)"))),
            _ => Ok(x),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// Gradients aligned with the parameter store; unused parameters map to
    /// `None`.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound.iter().map(|b| b.and_then(|v| grads.take(v))).collect()
    }

    /// The tape variable bound to `id`, if the forward pass read it.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }
}

/// Fully connected layer `x · W + b` over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[fan_in, fan_out], glorot(fan_in, fan_out), rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros([fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.param(self.w), cx.param(self.b));
        let y = cx.tape.matmul(x, w)?;
        cx.tape.add(y, b)
    }
}

/// `K` independent fully connected layers applied along a mode axis.
///
/// Input `[.., K or 1, 1, in]`, weights `[K, in, out]`, output
/// `[.., K, 1, out]`.
#[derive(Clone, Copy, Debug)]
pub struct StackedLinear {
    pub w: ParamId,
    pub b: ParamId,
}

impl StackedLinear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        stack: usize,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[stack, fan_in, fan_out], glorot(fan_in, fan_out), rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros([stack, 1, fan_out]));
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.param(self.w), cx.param(self.b));
        let y = cx.tape.matmul(x, w)?;
        cx.tape.add(y, b)
    }
}

/// Learned affine layer normalization over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full([dim], T::one()));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([dim]));
        Self { gain, bias }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (cx.param(self.gain), cx.param(self.bias));
        cx.tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Temporal convolution, width 3 by default, 'same' padding.
#[derive(Clone, Copy, Debug)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl Conv1d {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = glorot(width * c_in, width * c_out);
        let kernel = store.add_uniform(format!("{name}.kernel"), &[width, c_in, c_out], bound, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([c_out]));
        Self { kernel, bias }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (k, b) = (cx.param(self.kernel), cx.param(self.bias));
        cx.tape.conv1d(x, k, b)
    }
}

/// Result of running an LSTM over a batch of sequences.
#[derive(Clone, Copy, Debug)]
pub struct LstmOutput {
    /// Final hidden state `[N, H]`.
    pub last: Var,
    /// Hidden state at every step `[N, T, H]`.
    pub all: Var,
    /// Final cell state `[N, H]`.
    pub cell: Var,
}

/// Runs a single-layer LSTM over `x: [N, T, C]`.
///
/// Gate blocks in `w_ih: [C, 4H]`, `w_hh: [H, 4H]` and `bias: [4H]` are
/// ordered input, forget, candidate, output. Missing initial states are zero.
pub fn lstm_forward<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    h0: Option<Var>,
    c0: Option<Var>,
) -> Result<LstmOutput> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("lstm input must be [N, T, C], got {s:?}")));
    }
    let (n, steps) = (s[0], s[1]);
    if steps == 0 {
        return Err(Error::EmptySequence);
    }
    let hidden = tape.shape(w_hh)[0];
    if tape.shape(w_hh) != [hidden, 4 * hidden] || tape.shape(w_ih) != [s[2], 4 * hidden] {
        return Err(Error::Shape { op: "lstm", lhs: s.clone(), rhs: tape.shape(w_ih).to_vec() });
    }
    // Input contributions for every step at once: [N, T, 4H].
    let xw = tape.matmul(x, w_ih)?;
    let xw = tape.add(xw, bias)?;
    let mut h = match h0 {
        Some(h) => h,
        None => tape.constant(Tensor::zeros([n, hidden])),
    };
    let mut c = match c0 {
        Some(c) => c,
        None => tape.constant(Tensor::zeros([n, hidden])),
    };
    let mut hs = Vec::with_capacity(steps);
    for t in 0..steps {
        let xt = tape.slice(xw, 1, t, 1)?;
        let xt = tape.reshape(xt, &[n, 4 * hidden])?;
        let hw = tape.matmul(h, w_hh)?;
        let z = tape.add(xt, hw)?;
        let zi = tape.slice(z, 1, 0, hidden)?;
        let zf = tape.slice(z, 1, hidden, hidden)?;
        let zg = tape.slice(z, 1, 2 * hidden, hidden)?;
        let zo = tape.slice(z, 1, 3 * hidden, hidden)?;
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let g = tape.tanh(zg);
        let o = tape.sigmoid(zo);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        h = tape.mul(o, tc)?;
        hs.push(tape.reshape(h, &[n, 1, hidden])?);
    }
    let all = tape.concat(&hs, 1)?;
    Ok(LstmOutput { last: h, all, cell: c })
}

#[derive(Clone, Copy, Debug)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl Lstm {
    /// Weights uniform in `±1/√H`; forget-gate bias 1, other biases 0.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.add_uniform(format!("{name}.w_ih"), &[input, 4 * hidden], bound, rng);
        let w_hh = store.add_uniform(format!("{name}.w_hh"), &[hidden, 4 * hidden], bound, rng);
        let mut b = Tensor::zeros([4 * hidden]);
        b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = T::one());
        let bias = store.add(format!("{name}.bias"), b);
        Self { w_ih, w_hh, bias, hidden }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<LstmOutput> {
        let (wi, wh, b) = (cx.param(self.w_ih), cx.param(self.w_hh), cx.param(self.bias));
        lstm_forward(&mut cx.tape, x, wi, wh, b, None, None)
    }
}

/// Position-wise feed-forward block `FC(d→f) → ELU → FC(f→d)`, each FC
/// followed by dropout.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var, dropout: f64) -> Result<Var> {
        let h = self.up.forward(cx, x)?;
        let h = cx.tape.elu(h);
        let h = cx.dropout(h, dropout)?;
        let y = self.down.forward(cx, h)?;
        cx.dropout(y, dropout)
    }
}

/// Builds the `[rows, width]` mask used to hide padded keys.
pub fn row_mask(rows: usize, width: usize, valid: impl Fn(usize, usize) -> bool) -> Mask {
    let data = (0..rows * width).map(|i| valid(i / width, i % width)).collect();
    Mask::new([rows, width], data).expect("mask size")
}
