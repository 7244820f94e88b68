//! Trajectory and score decoders, and the training objective.

use rand::Rng;

use crate::error::Result;
use crate::tensor::nn::{Ctx, Linear, StackedLinear};
use crate::tensor::{ParamStore, Real, Tensor, Unary, Var};

/// Epsilon of the clamped log in the score loss.
pub const LOG_EPS: f64 = 1e-12;

/// Hidden widths of the four-layer decoder MLP for a given model width:
/// `3d → 2d → d → d/2 → out`.
pub fn decoder_widths(d_model: usize, out: usize) -> [usize; 5] {
    [3 * d_model, 2 * d_model, d_model, (d_model / 2).max(1), out]
}

#[derive(Clone, Copy, Debug)]
enum Layer {
    Shared(Linear),
    Stacked(StackedLinear),
}

/// Four-layer MLP with ELU and dropout between layers. Shared across modes,
/// or one weight set per mode for the ensemble ablation.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    pub fn shared<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Layer::Shared(Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng)))
            .collect();
        Self { layers }
    }

    pub fn stacked<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        stack: usize,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Layer::Stacked(StackedLinear::new(store, &format!("{name}.{i}"), stack, w[0], w[1], rng)))
            .collect();
        Self { layers }
    }

    /// Shared: `[.., in]` → `[.., out]`. Stacked: `[B, 1, 1, in]` →
    /// `[B, K, 1, out]`.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var, dropout: f64) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Shared(l) => l.forward(cx, h)?,
                Layer::Stacked(l) => l.forward(cx, h)?,
            };
            if i < last {
                h = cx.tape.elu(h);
                h = cx.dropout(h, dropout)?;
            }
        }
        Ok(h)
    }
}

/// Index of the endpoint closest to `gt`, ties to the lowest index.
pub fn winner_index(endpoints: &[[f64; 2]], gt: [f64; 2]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, e) in endpoints.iter().enumerate() {
        let d = (e[0] - gt[0]).hypot(e[1] - gt[1]);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

/// Target distribution for the score loss: softmax of the negated endpoint
/// distances.
pub fn score_targets(endpoints: &[[f64; 2]], gt: [f64; 2]) -> Vec<f64> {
    let neg: Vec<f64> = endpoints.iter().map(|e| -(e[0] - gt[0]).hypot(e[1] - gt[1])).collect();
    let m = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = neg.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = ex.iter().sum();
    ex.iter().map(|v| v / z).collect()
}

/// Smooth-L1 with transition at 1: `½d²` below, `|d| − ½` above.
pub fn smooth_l1(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * a * a
    } else {
        a - 0.5
    }
}

/// Loss components of one batch, kept on the tape for backward.
#[derive(Clone, Debug)]
pub struct LossTerms {
    /// Batch-mean regression loss on the winning trajectories.
    pub traj: Var,
    /// Batch-mean cross entropy of the scores.
    pub score: Var,
    /// `score + α·traj`.
    pub total: Var,
    pub winners: Vec<usize>,
}

/// Logged values of one batch. `total` is recomputed from the components
/// in double precision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub traj: f64,
    pub score: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(traj: f64, score: f64, alpha: f64) -> Self {
        Self { traj, score, total: score + alpha * traj }
    }
}

/// Winner-take-all trajectory loss plus score cross entropy.
///
/// `traj: [B, K, 2·T_f]`, `probs: [B, K]`, `gt: [B, T_f, 2]`. The winners
/// and the score targets are computed from current values and enter the
/// graph as constants.
pub fn objective<T: Real>(
    cx: &mut Ctx<'_, T>,
    traj: Var,
    probs: Var,
    gt: &Tensor<f64>,
    alpha: f64,
) -> Result<LossTerms> {
    let s = cx.tape.shape(traj).to_vec();
    let (b, k, out) = (s[0], s[1], s[2]);
    let t_f = out / 2;
    let pred = cx.tape.value(traj).to_f64_vec();
    let gtv = gt.data();
    let mut winners = Vec::with_capacity(b);
    let mut targets = Vec::with_capacity(b * k);
    for bi in 0..b {
        let g = [gtv[(bi * t_f + t_f - 1) * 2], gtv[(bi * t_f + t_f - 1) * 2 + 1]];
        let ends: Vec<[f64; 2]> = (0..k)
            .map(|j| {
                let o = (bi * k + j) * out + out - 2;
                [pred[o], pred[o + 1]]
            })
            .collect();
        winners.push(bi * k + winner_index(&ends, g));
        targets.extend(score_targets(&ends, g));
    }

    let flat = cx.tape.reshape(traj, &[b * k, out])?;
    let chosen = cx.tape.gather_rows(flat, &winners)?;
    let gt_var = cx.constant(gt.cast::<T>().reshape([b, out])?);
    let diff = cx.tape.sub(chosen, gt_var)?;
    let sl1 = cx.tape.unary(diff, Unary::SmoothL1);
    let traj_sum = cx.tape.sum_all(sl1);
    let traj_loss = cx.tape.scale(traj_sum, T::lit(1.0 / b as f64));

    let logp = cx.tape.unary(probs, Unary::LogClamped(LOG_EPS));
    let p_gt = cx.constant(Tensor::from_f64([b, k], &targets)?);
    let ce = cx.tape.mul(p_gt, logp)?;
    let ce = cx.tape.sum_all(ce);
    let score_loss = cx.tape.scale(ce, T::lit(-1.0 / b as f64));

    let weighted = cx.tape.scale(traj_loss, T::lit(alpha));
    let total = cx.tape.add(score_loss, weighted)?;
    Ok(LossTerms {
        traj: traj_loss,
        score: score_loss,
        total,
        winners: winners.iter().enumerate().map(|(bi, w)| w - bi * k).collect(),
    })
}
