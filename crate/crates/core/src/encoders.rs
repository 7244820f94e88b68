//! Agent and map encoders.
//!
//! Both encoders run only on valid rows. The caller gathers valid agents or
//! lanes into a compact tensor, and the results are scattered back into
//! padded slots whose rows are zero. Padded contents are never read, so
//! masking is exact.

use rand::Rng;

use crate::error::Result;
use crate::scene::{LANE_ATTR_DIM, STATE_DIM, WAYPOINT_DIM};
use crate::tensor::nn::{Conv1d, Ctx, Linear, Lstm};
use crate::tensor::{ParamStore, Real, Var};

/// Temporal convolution width of the agent encoder.
pub const CONV_WIDTH: usize = 3;

/// Shared encoder for every agent: conv over time, ELU, then an LSTM whose
/// final hidden state is the agent feature.
#[derive(Clone, Copy, Debug)]
pub struct AgentEncoder {
    pub conv: Conv1d,
    pub lstm: Lstm,
}

impl AgentEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, d_model: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv1d::new(store, "agent.conv", CONV_WIDTH, STATE_DIM, d_model, rng),
            lstm: Lstm::new(store, "agent.lstm", d_model, d_model, rng),
        }
    }

    /// `histories: [N, T_h, 5]` → `[N, d]`.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, histories: Var) -> Result<Var> {
        let h = self.conv.forward(cx, histories)?;
        let h = cx.tape.elu(h);
        Ok(self.lstm.forward(cx, h)?.last)
    }
}

/// Waypoint encoder: per-waypoint FC, lane-wide max-pooled context, lane
/// attribute FC, and a final FC over their concatenation.
#[derive(Clone, Copy, Debug)]
pub struct MapEncoder {
    pub waypoint: Linear,
    pub attrs: Linear,
    pub fuse: Linear,
    /// Projection after pooling a lane's waypoints (lane mode only).
    pub lane: Option<Linear>,
}

/// Intermediate results of [`MapEncoder::forward`].
#[derive(Clone, Copy, Debug)]
pub struct MapEncoding {
    /// `[N, W, d]` per-waypoint features.
    pub waypoints: Var,
    /// `[N, d]` max over each lane's waypoint features (lane mode).
    pub pooled: Option<Var>,
    /// `[N, d]` lane features after the projection (lane mode).
    pub lanes: Option<Var>,
}

impl MapEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        d_model: usize,
        lane_mode: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            waypoint: Linear::new(store, "map.waypoint", WAYPOINT_DIM, d_model, rng),
            attrs: Linear::new(store, "map.attrs", LANE_ATTR_DIM, d_model, rng),
            fuse: Linear::new(store, "map.fuse", 3 * d_model, d_model, rng),
            lane: lane_mode.then(|| Linear::new(store, "map.lane", d_model, d_model, rng)),
        }
    }

    /// `waypoints: [N, W, 3]` and `attrs: [N, 7]` for N valid lanes.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, waypoints: Var, attrs: Var) -> Result<MapEncoding> {
        let s = cx.tape.shape(waypoints).to_vec();
        let (n, w) = (s[0], s[1]);
        let wp = self.waypoint.forward(cx, waypoints)?;
        let wp = cx.tape.elu(wp);
        let d = cx.tape.shape(wp)[2];

        let agg = cx.tape.max_pool(wp, 1, None)?;
        let agg = cx.tape.reshape(agg, &[n, 1, d])?;
        let agg = cx.tape.broadcast_to(agg, &[n, w, d])?;

        let lane = self.attrs.forward(cx, attrs)?;
        let lane = cx.tape.elu(lane);
        let lane = cx.tape.reshape(lane, &[n, 1, d])?;
        let lane = cx.tape.broadcast_to(lane, &[n, w, d])?;

        let cat = cx.tape.concat(&[wp, agg, lane], 2)?;
        let out = self.fuse.forward(cx, cat)?;
        match self.lane {
            None => Ok(MapEncoding { waypoints: out, pooled: None, lanes: None }),
            Some(proj) => {
                let pooled = cx.tape.max_pool(out, 1, None)?;
                let lanes = proj.forward(cx, pooled)?;
                Ok(MapEncoding { waypoints: out, pooled: Some(pooled), lanes: Some(lanes) })
            }
        }
    }
}
