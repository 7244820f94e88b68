//! Stacking scenes into batch tensors and seeded epoch ordering.

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::scene::{Scene, SceneLayout, LANE_ATTR_DIM, STATE_DIM, WAYPOINT_DIM};
use crate::tensor::nn::EngineRng;
use crate::tensor::{Mask, Tensor};

/// Scenes stacked along a leading batch axis `B`.
#[derive(Clone, Debug)]
pub struct SceneBatch {
    /// `[B, A, T_h, 5]`; slot 0 is the target.
    pub agents: Tensor<f64>,
    /// `[B, A]`: agent observed at t₀.
    pub agent_mask: Mask,
    /// `[B, L, W, 3]`.
    pub waypoints: Tensor<f64>,
    /// `[B, L, 7]` one-hot lane attributes.
    pub lane_attrs: Tensor<f64>,
    /// `[B, L]`.
    pub lane_mask: Mask,
    /// `[B, T_f, 2]`, present when every scene has a future.
    pub future: Option<Tensor<f64>>,
    pub ids: Vec<String>,
    pub layout: SceneLayout,
}

impl SceneBatch {
    pub fn stack(scenes: &[&Scene], layout: &SceneLayout) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Dimension("cannot batch zero scenes".into()));
        }
        let (b, a, th) = (scenes.len(), layout.agents(), layout.t_h);
        let (l, w) = (layout.max_lanes, layout.waypoints_per_lane);
        let mut agents = Vec::with_capacity(b * a * th * STATE_DIM);
        let mut agent_mask = Vec::with_capacity(b * a);
        let mut waypoints = Vec::with_capacity(b * l * w * WAYPOINT_DIM);
        let mut lane_attrs = Vec::with_capacity(b * l * LANE_ATTR_DIM);
        let mut lane_mask = Vec::with_capacity(b * l);
        let mut future = Vec::with_capacity(b * layout.t_f * 2);
        let with_future = scenes.iter().all(|s| s.future.is_some());
        for s in scenes {
            s.validate(layout)?;
            for h in std::iter::once(&s.target).chain(&s.neighbors) {
                agent_mask.push(h.is_present());
                for st in &h.states {
                    agents.extend_from_slice(&st.features());
                }
            }
            for lane in &s.lanes {
                lane_mask.push(lane.valid);
                lane_attrs.extend_from_slice(&lane.attributes());
                for p in &lane.waypoints {
                    waypoints.extend_from_slice(&[p.x, p.y, p.psi]);
                }
            }
            if let (true, Some(f)) = (with_future, &s.future) {
                future.extend(f.iter().flatten());
            }
        }
        Ok(Self {
            agents: Tensor::new([b, a, th, STATE_DIM], agents)?,
            agent_mask: Mask::new([b, a], agent_mask)?,
            waypoints: Tensor::new([b, l, w, WAYPOINT_DIM], waypoints)?,
            lane_attrs: Tensor::new([b, l, LANE_ATTR_DIM], lane_attrs)?,
            lane_mask: Mask::new([b, l], lane_mask)?,
            future: if with_future { Some(Tensor::new([b, layout.t_f, 2], future)?) } else { None },
            ids: scenes.iter().map(|s| s.id.clone()).collect(),
            layout: *layout,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Scene order for one epoch: a permutation of `0..n` drawn from a
/// generator seeded by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = EngineRng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Batches of one epoch in `order`; the last batch may be short.
pub fn batches<'a>(
    scenes: &'a [Scene],
    order: &'a [usize],
    batch_size: usize,
    layout: &'a SceneLayout,
) -> impl Iterator<Item = Result<SceneBatch>> + 'a {
    order.chunks(batch_size.max(1)).map(move |chunk| {
        let picked: Vec<&Scene> = chunk.iter().map(|&i| &scenes[i]).collect();
        SceneBatch::stack(&picked, layout)
    })
}
