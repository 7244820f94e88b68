//! Cross-attention layers: agent-agent (standard multi-head) and agent-map
//! (multi-modal, one mode per head).
//!
//! Per-head projections are stored stacked, `W^Q, W^K: [h, d, d_k]` and
//! `W^V: [h, d, d_v]`, so every head owns its own slice. The query-key
//! product is evaluated as `(q W^Q_i W^K_iᵀ) Mᵀ` and the value read as
//! `(a_i M) W^V_i`; both are the textbook formulas reassociated so that the
//! keys are never projected one by one.

use rand::Rng;

use crate::error::Result;
use crate::tensor::nn::{glorot, Ctx, FeedForward, LayerNorm, Linear};
use crate::tensor::{Mask, ParamId, ParamStore, Real, Tensor, Var};

/// Stacked per-head projections.
#[derive(Clone, Copy, Debug)]
pub struct HeadProjections {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
}

/// Output of [`HeadProjections::attend`].
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `[B, h, d_v]`, one row per head.
    pub heads: Var,
    /// `[B, h, N]` attention scores; rows sum to 1 over valid keys.
    pub scores: Var,
}

impl HeadProjections {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        heads: usize,
        d_model: usize,
        d_k: usize,
        d_v: usize,
        rng: &mut R,
    ) -> Self {
        let wq = store.add_uniform(format!("{name}.wq"), &[heads, d_model, d_k], glorot(d_model, d_k), rng);
        let wk = store.add_uniform(format!("{name}.wk"), &[heads, d_model, d_k], glorot(d_model, d_k), rng);
        let wv = store.add_uniform(format!("{name}.wv"), &[heads, d_model, d_v], glorot(d_model, d_v), rng);
        Self { wq, wk, wv, heads, d_k, d_v }
    }

    /// Scaled dot-product attention of one query per batch row over `keys`.
    ///
    /// `query: [B, d]`, `keys: [B, N, d]` (keys double as values),
    /// `mask: [B, N]`. A row without any valid key is an error.
    pub fn attend<T: Real>(&self, cx: &mut Ctx<'_, T>, query: Var, keys: Var, mask: &Mask) -> Result<HeadOutputs> {
        let ks = cx.tape.shape(keys).to_vec();
        let (b, n, d) = (ks[0], ks[1], ks[2]);
        let (wq, wk, wv) = (cx.param(self.wq), cx.param(self.wk), cx.param(self.wv));

        let q = cx.tape.reshape(query, &[b, 1, 1, d])?;
        let q = cx.tape.matmul(q, wq)?; // [B, h, 1, d_k]
        let wk_t = cx.tape.transpose(wk)?;
        let u = cx.tape.matmul(q, wk_t)?; // [B, h, 1, d]
        let keys_t = cx.tape.transpose(keys)?;
        let keys_t = cx.tape.reshape(keys_t, &[b, 1, d, n])?;
        let logits = cx.tape.matmul(u, keys_t)?; // [B, h, 1, N]
        let logits = cx.tape.scale(logits, T::lit(1.0 / (self.d_k as f64).sqrt()));
        let mask4 = Mask::new([b, 1, 1, n], mask.data().to_vec())?;
        let attn = cx.tape.softmax_masked(logits, Some(&mask4))?;

        let values = cx.tape.reshape(keys, &[b, 1, n, d])?;
        let pooled = cx.tape.matmul(attn, values)?; // [B, h, 1, d]
        let heads = cx.tape.matmul(pooled, wv)?; // [B, h, 1, d_v]
        let heads = cx.tape.reshape(heads, &[b, self.heads, self.d_v])?;
        let scores = cx.tape.reshape(attn, &[b, self.heads, n])?;
        Ok(HeadOutputs { heads, scores })
    }
}

/// Standard multi-head attention: heads concatenated and projected by W^O.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub proj: HeadProjections,
    pub wo: Linear,
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        heads: usize,
        d_model: usize,
        head_dim: usize,
        rng: &mut R,
    ) -> Self {
        let proj = HeadProjections::new(store, name, heads, d_model, head_dim, head_dim, rng);
        let wo = Linear::new(store, &format!("{name}.wo"), heads * head_dim, d_model, rng);
        Self { proj, wo }
    }

    /// Returns the fused `[B, d]` output and the `[B, h, N]` scores.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, query: Var, keys: Var, mask: &Mask) -> Result<(Var, Var)> {
        let out = self.proj.attend(cx, query, keys, mask)?;
        let b = cx.tape.shape(query)[0];
        let cat = cx.tape.reshape(out.heads, &[b, self.proj.heads * self.proj.d_v])?;
        Ok((self.wo.forward(cx, cat)?, out.scores))
    }
}

/// The position-wise tail shared by both layers: residual, layer norm,
/// feed-forward, residual, layer norm.
#[derive(Clone, Copy, Debug)]
pub struct SublayerTail {
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

impl SublayerTail {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_model),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d_model, ffn_dim, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_model),
        }
    }

    /// `LN(x + FFN(x))` with `x = LN(residual + attended)`; `residual`
    /// broadcasts against `attended`.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, residual: Var, attended: Var, dropout: f64) -> Result<Var> {
        let a = cx.dropout(attended, dropout)?;
        let x = cx.tape.add(residual, a)?;
        let x = self.ln1.forward(cx, x)?;
        let f = self.ffn.forward(cx, x, dropout)?;
        let y = cx.tape.add(x, f)?;
        self.ln2.forward(cx, y)
    }
}

/// Agent-agent layer: the target's feature queries every agent, itself
/// included.
#[derive(Clone, Copy, Debug)]
pub struct AgentAgentLayer {
    pub mha: MultiHeadAttention,
    pub tail: SublayerTail,
}

impl AgentAgentLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        d_model: usize,
        heads: usize,
        head_dim: usize,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            mha: MultiHeadAttention::new(store, "agent_agent", heads, d_model, head_dim, rng),
            tail: SublayerTail::new(store, "agent_agent", d_model, ffn_dim, rng),
        }
    }

    /// `agents: [B, A, d]` with the target in slot 0. Returns the
    /// interaction feature `[B, d]` and the `[B, h, A]` scores.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, agents: Var, mask: &Mask, dropout: f64) -> Result<(Var, Var)> {
        let s = cx.tape.shape(agents).to_vec();
        let q = cx.tape.slice(agents, 1, 0, 1)?;
        let q = cx.tape.reshape(q, &[s[0], s[2]])?;
        let (fused, scores) = self.mha.forward(cx, q, agents, mask)?;
        Ok((self.tail.forward(cx, q, fused, dropout)?, scores))
    }
}

/// Agent-map layer. In multi-modal form each head's output is kept as one
/// mode (`d_v = d`, no W^O); in the ensemble ablation the heads are fused
/// as usual.
#[derive(Clone, Copy, Debug)]
pub struct AgentMapLayer {
    pub proj: HeadProjections,
    pub wo: Option<Linear>,
    pub tail: SublayerTail,
}

/// Output of [`AgentMapLayer::forward`].
#[derive(Clone, Copy, Debug)]
pub struct MapAttention {
    /// `[B, K, d]` mode features, or `[B, d]` when fused.
    pub features: Var,
    /// `[B, h, N]`.
    pub scores: Var,
}

impl AgentMapLayer {
    pub fn multimodal<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        d_model: usize,
        modes: usize,
        d_k: usize,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            proj: HeadProjections::new(store, "agent_map", modes, d_model, d_k, d_model, rng),
            wo: None,
            tail: SublayerTail::new(store, "agent_map", d_model, ffn_dim, rng),
        }
    }

    pub fn fused<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        d_model: usize,
        heads: usize,
        head_dim: usize,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mha = MultiHeadAttention::new(store, "agent_map", heads, d_model, head_dim, rng);
        Self { proj: mha.proj, wo: Some(mha.wo), tail: SublayerTail::new(store, "agent_map", d_model, ffn_dim, rng) }
    }

    /// `interaction: [B, d]`, `map: [B, N, d]`, `mask: [B, N]`.
    pub fn forward<T: Real>(
        &self,
        cx: &mut Ctx<'_, T>,
        interaction: Var,
        map: Var,
        mask: &Mask,
        dropout: f64,
    ) -> Result<MapAttention> {
        let out = self.proj.attend(cx, interaction, map, mask)?;
        let s = cx.tape.shape(interaction).to_vec();
        let features = match self.wo {
            None => {
                // The query is broadcast onto every mode for the residual.
                let q = cx.tape.reshape(interaction, &[s[0], 1, s[1]])?;
                self.tail.forward(cx, q, out.heads, dropout)?
            }
            Some(wo) => {
                let cat = cx.tape.reshape(out.heads, &[s[0], self.proj.heads * self.proj.d_v])?;
                let fused = wo.forward(cx, cat)?;
                self.tail.forward(cx, interaction, fused, dropout)?
            }
        };
        Ok(MapAttention { features, scores: out.scores })
    }
}

/// Per-head slice `i` of a stacked `[h, ..]` gradient or weight.
pub fn head_slice<T: Real>(t: &Tensor<T>, i: usize) -> &[T] {
    let per = t.len() / t.shape()[0];
    &t.data()[i * per..(i + 1) * per]
}
