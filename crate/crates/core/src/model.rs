//! The assembled predictor.

use rand::SeedableRng;

use crate::attention::{AgentAgentLayer, AgentMapLayer, MapAttention};
use crate::config::{MapMode, ModelConfig, MultimodalMode};
use crate::data::SceneBatch;
use crate::encoders::{AgentEncoder, MapEncoder};
use crate::error::{Error, Result};
use crate::heads::{decoder_widths, Mlp};
use crate::scene::{PredictionSet, Scene, LANE_ATTR_DIM, STATE_DIM, WAYPOINT_DIM};
use crate::tensor::nn::{Ctx, EngineRng};
use crate::tensor::{Mask, ParamId, ParamStore, Real, Tensor, Var};

/// How map keys are laid out along the key axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapLayout {
    /// Every lane slot of the scene, valid or not.
    Full,
    /// Valid lanes only, padded to the largest count in the batch.
    Compact,
}

/// Lane slot and, in waypoint mode, waypoint index behind one map key;
/// `None` for padding.
pub type KeySlot = Option<(usize, Option<usize>)>;

/// Layer handles; the weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub agent: AgentEncoder,
    pub map: MapEncoder,
    pub agent_agent: AgentAgentLayer,
    pub agent_map: AgentMapLayer,
    pub traj: Mlp,
    pub score: Mlp,
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[B, K, 2·T_f]` predicted coordinates in meters, (x, y) interleaved.
    pub traj: Var,
    /// `[B, K]` mode probabilities.
    pub probs: Var,
    /// `[B, A, d]` agent features; padded slots are zero.
    pub agents: Var,
    /// `[B, d]` target agent feature.
    pub target: Var,
    /// `[B, d]` interaction feature.
    pub interaction: Var,
    /// `[B, N, d]` map keys and their `[B, N]` mask.
    pub map: Var,
    pub map_mask: Mask,
    /// `[B, K, d]` mode features, or `[B, d]` in ensemble mode.
    pub modes: Var,
    /// `[B, h, A]` agent-agent scores.
    pub agent_scores: Var,
    /// `[B, h, N]` agent-map scores.
    pub map_scores: Var,
    /// Per scene, the lane slot and waypoint each key stands for.
    pub keys: Vec<Vec<KeySlot>>,
}

impl Network {
    pub fn new<T: Real>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut EngineRng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let d = c.d_model;
        let agent = AgentEncoder::new(store, d, rng);
        let map = MapEncoder::new(store, d, c.map_mode == MapMode::Lane, rng);
        let agent_agent = AgentAgentLayer::new(store, d, c.n_heads, c.head_dim, c.ffn_dim, rng);
        let (agent_map, traj, score) = match c.multimodal_mode {
            MultimodalMode::Attention => (
                AgentMapLayer::multimodal(store, d, c.k, c.head_dim, c.ffn_dim, rng),
                Mlp::shared(store, "traj", &decoder_widths(d, 2 * c.t_f), rng),
                Mlp::shared(store, "score", &decoder_widths(d, 1), rng),
            ),
            MultimodalMode::Ensemble => (
                AgentMapLayer::fused(store, d, c.n_heads, c.head_dim, c.ffn_dim, rng),
                Mlp::stacked(store, "traj", c.k, &decoder_widths(d, 2 * c.t_f), rng),
                Mlp::stacked(store, "score", c.k, &decoder_widths(d, 1), rng),
            ),
        };
        Ok(Self { config: c.clone(), agent, map, agent_agent, agent_map, traj, score })
    }

    /// The stacked agent-map projections `[W^Q, W^K, W^V]`.
    pub fn agent_map_projections(&self) -> [ParamId; 3] {
        let p = &self.agent_map.proj;
        [p.wq, p.wk, p.wv]
    }

    /// Encodes the valid agents of a batch: `[B, A, d]`, zero rows for
    /// padded slots.
    pub fn encode_agents<T: Real>(&self, cx: &mut Ctx<'_, T>, batch: &SceneBatch) -> Result<Var> {
        let s = batch.agents.shape().to_vec();
        let (b, a, th) = (s[0], s[1], s[2]);
        let row = th * STATE_DIM;
        let inv = 1.0 / self.config.coord_scale;
        let src = batch.agents.data();
        let mut rows = Vec::new();
        let mut data = Vec::new();
        for (i, &ok) in batch.agent_mask.data().iter().enumerate() {
            if !ok {
                continue;
            }
            rows.push(i);
            for st in src[i * row..(i + 1) * row].chunks(STATE_DIM) {
                data.extend_from_slice(&[
                    T::lit(st[0] * inv),
                    T::lit(st[1] * inv),
                    T::lit(st[2] * inv),
                    T::lit(st[3] * inv),
                    T::lit(st[4]),
                ]);
            }
        }
        let x = cx.constant(Tensor::new([rows.len(), th, STATE_DIM], data)?);
        let enc = self.agent.forward(cx, x)?;
        let full = cx.tape.scatter_rows(enc, &rows, b * a)?;
        cx.tape.reshape(full, &[b, a, self.config.d_model])
    }

    /// Encodes the valid lanes and lays the keys out along one axis.
    /// Returns keys `[B, N, d]`, their mask, and the key-to-slot map. The
    /// second value is the pooled lane-mode feature before projection.
    #[allow(clippy::type_complexity)]
    pub fn encode_map<T: Real>(
        &self,
        cx: &mut Ctx<'_, T>,
        batch: &SceneBatch,
        layout: MapLayout,
    ) -> Result<(Var, Option<Var>, Mask, Vec<Vec<Option<(usize, Option<usize>)>>>)> {
        let s = batch.waypoints.shape().to_vec();
        let (b, l, w) = (s[0], s[1], s[2]);
        let inv = 1.0 / self.config.coord_scale;
        let lane_ok = batch.lane_mask.data();
        let counts: Vec<usize> =
            (0..b).map(|bi| lane_ok[bi * l..(bi + 1) * l].iter().filter(|&&v| v).count()).collect();
        if let Some(bi) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidScene(format!("scene {} has no valid lane", batch.ids[bi])));
        }
        let pad = match layout {
            MapLayout::Full => l,
            MapLayout::Compact => counts.iter().copied().max().unwrap_or(1),
        };
        let (wsrc, asrc) = (batch.waypoints.data(), batch.lane_attrs.data());
        let mut lane_rows = Vec::new(); // padded lane row of each valid lane
        let mut slots: Vec<Vec<Option<usize>>> = vec![vec![None; pad]; b];
        let mut wdata = Vec::new();
        let mut adata = Vec::new();
        for bi in 0..b {
            let mut rank = 0;
            for li in 0..l {
                if !lane_ok[bi * l + li] {
                    continue;
                }
                let r = if layout == MapLayout::Full { li } else { rank };
                rank += 1;
                lane_rows.push(bi * pad + r);
                slots[bi][r] = Some(li);
                let base = (bi * l + li) * w * WAYPOINT_DIM;
                for p in wsrc[base..base + w * WAYPOINT_DIM].chunks(WAYPOINT_DIM) {
                    wdata.extend_from_slice(&[T::lit(p[0] * inv), T::lit(p[1] * inv), T::lit(p[2])]);
                }
                let ab = (bi * l + li) * LANE_ATTR_DIM;
                adata.extend(asrc[ab..ab + LANE_ATTR_DIM].iter().map(|&v| T::lit(v)));
            }
        }
        let n = lane_rows.len();
        let d = self.config.d_model;
        let wv = cx.constant(Tensor::new([n, w, WAYPOINT_DIM], wdata)?);
        let av = cx.constant(Tensor::new([n, LANE_ATTR_DIM], adata)?);
        let enc = self.map.forward(cx, wv, av)?;
        match enc.lanes {
            None => {
                let flat = cx.tape.reshape(enc.waypoints, &[n * w, d])?;
                let rows: Vec<usize> = lane_rows.iter().flat_map(|&r| (0..w).map(move |k| r * w + k)).collect();
                let full = cx.tape.scatter_rows(flat, &rows, b * pad * w)?;
                let keys = cx.tape.reshape(full, &[b, pad * w, d])?;
                let mut mask = vec![false; b * pad * w];
                rows.iter().for_each(|&r| mask[r] = true);
                let map = slots
                    .iter()
                    .map(|sl| sl.iter().flat_map(|s| (0..w).map(move |k| s.map(|li| (li, Some(k))))).collect())
                    .collect();
                Ok((keys, None, Mask::new([b, pad * w], mask)?, map))
            }
            Some(lanes) => {
                let full = cx.tape.scatter_rows(lanes, &lane_rows, b * pad)?;
                let keys = cx.tape.reshape(full, &[b, pad, d])?;
                let mut mask = vec![false; b * pad];
                lane_rows.iter().for_each(|&r| mask[r] = true);
                let map = slots.iter().map(|sl| sl.iter().map(|s| s.map(|li| (li, None))).collect()).collect();
                Ok((keys, enc.pooled, Mask::new([b, pad], mask)?, map))
            }
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, batch: &SceneBatch, layout: MapLayout) -> Result<Forward> {
        let c = &self.config;
        let (b, d, k) = (batch.len(), c.d_model, c.k);
        let agents = self.encode_agents(cx, batch)?;
        let target = cx.tape.slice(agents, 1, 0, 1)?;
        let target = cx.tape.reshape(target, &[b, d])?;
        let (interaction, agent_scores) = self.agent_agent.forward(cx, agents, &batch.agent_mask, c.dropout_rate)?;
        let (map, _, map_mask, keys) = self.encode_map(cx, batch, layout)?;
        let MapAttention { features: modes, scores: map_scores } =
            self.agent_map.forward(cx, interaction, map, &map_mask, c.dropout_rate)?;

        let (traj, logits) = match c.multimodal_mode {
            MultimodalMode::Attention => {
                let t = cx.tape.reshape(target, &[b, 1, d])?;
                let t = cx.tape.broadcast_to(t, &[b, k, d])?;
                let i = cx.tape.reshape(interaction, &[b, 1, d])?;
                let i = cx.tape.broadcast_to(i, &[b, k, d])?;
                let env = cx.tape.concat(&[t, i, modes], 2)?;
                let traj = self.traj.forward(cx, env, c.dropout_rate)?;
                let logits = self.score.forward(cx, env, c.dropout_rate)?;
                (traj, logits)
            }
            MultimodalMode::Ensemble => {
                let env = cx.tape.concat(&[target, interaction, modes], 1)?;
                let env = cx.tape.reshape(env, &[b, 1, 1, 3 * d])?;
                let traj = self.traj.forward(cx, env, c.dropout_rate)?;
                let logits = self.score.forward(cx, env, c.dropout_rate)?;
                (traj, logits)
            }
        };
        let traj = cx.tape.reshape(traj, &[b, k, 2 * c.t_f])?;
        let traj = cx.tape.scale(traj, T::lit(c.coord_scale));
        let logits = cx.tape.reshape(logits, &[b, k])?;
        let probs = cx.tape.softmax_masked(logits, None)?;
        Ok(Forward { traj, probs, agents, target, interaction, map, map_mask, modes, agent_scores, map_scores, keys })
    }
}

/// One scene's forecast with the agent-map attention behind it.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// Target-frame predictions.
    pub set: PredictionSet,
    /// One row per agent-map head over every waypoint slot (`L·W` entries,
    /// lane-major); in lane mode a lane's score is repeated on each of its
    /// waypoints. Padded slots hold zero.
    pub attention: Vec<Vec<f64>>,
}

/// Network plus weights.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub net: Network,
    pub params: ParamStore<f32>,
}

impl Predictor {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = EngineRng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = Network::new(config, &mut params, &mut rng)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    /// Inference with dropout off.
    pub fn predict(&self, scenes: &[Scene]) -> Result<Vec<Prediction>> {
        let layout = self.config().layout();
        let mut out = Vec::with_capacity(scenes.len());
        for chunk in scenes.chunks(64) {
            let refs: Vec<&Scene> = chunk.iter().collect();
            let batch = SceneBatch::stack(&refs, &layout)?;
            let mut cx = Ctx::eval(&self.params);
            let f = self.net.forward(&mut cx, &batch, MapLayout::Compact)?;
            out.extend(self.unpack(&cx, &f, &layout)?);
        }
        Ok(out)
    }

    fn unpack(&self, cx: &Ctx<'_, f32>, f: &Forward, layout: &crate::scene::SceneLayout) -> Result<Vec<Prediction>> {
        let c = self.config();
        let traj = cx.value(f.traj).to_f64_vec();
        let probs = cx.value(f.probs).to_f64_vec();
        let scores = cx.value(f.map_scores);
        let (heads, n) = (scores.shape()[1], scores.shape()[2]);
        let scores = scores.to_f64_vec();
        let (k, out) = (c.k, 2 * c.t_f);
        let w = layout.waypoints_per_lane;
        let mut preds = Vec::with_capacity(f.keys.len());
        for (bi, keys) in f.keys.iter().enumerate() {
            let trajectories = (0..k)
                .map(|j| {
                    let o = (bi * k + j) * out;
                    traj[o..o + out].chunks(2).map(|p| [p[0], p[1]]).collect()
                })
                .collect();
            let set = PredictionSet { trajectories, probs: probs[bi * k..(bi + 1) * k].to_vec() };
            let attention = (0..heads)
                .map(|h| {
                    let mut row = vec![0.0; layout.max_lanes * w];
                    for (key, slot) in keys.iter().enumerate() {
                        let v = scores[(bi * heads + h) * n + key];
                        match slot {
                            Some((li, Some(wi))) => row[li * w + wi] = v,
                            Some((li, None)) => row[li * w..(li + 1) * w].iter_mut().for_each(|r| *r = v),
                            None => {}
                        }
                    }
                    row
                })
                .collect();
            preds.push(Prediction { set, attention });
        }
        Ok(preds)
    }
}
