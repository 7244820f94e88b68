//! Agents, lanes and scenes in the target-centric frame.
//!
//! A raw scene is built in world coordinates with any number of candidate
//! neighbors and lanes. [`Scene::assemble`] normalizes it onto the target's
//! current pose and fills the fixed neighbor and lane slots.

use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Features per agent timestep: x, y, vx, vy, heading.
pub const STATE_DIM: usize = 5;
/// Features per waypoint: x, y, direction.
pub const WAYPOINT_DIM: usize = 3;
/// One-hot lane attributes: turn (3), intersection (2), traffic control (2).
pub const LANE_ATTR_DIM: usize = 7;
/// Sampling interval of every sequence, seconds.
pub const DT: f64 = 0.1;

/// Fixed extents of the scene tensors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub t_h: usize,
    pub t_f: usize,
    pub max_neighbors: usize,
    pub neighbor_radius_m: f64,
    pub max_lanes: usize,
    pub waypoints_per_lane: usize,
}

impl Default for SceneLayout {
    fn default() -> Self {
        Self { t_h: 20, t_f: 30, max_neighbors: 10, neighbor_radius_m: 30.0, max_lanes: 40, waypoints_per_lane: 10 }
    }
}

impl SceneLayout {
    /// Agent slots per scene, target first.
    pub fn agents(&self) -> usize {
        self.max_neighbors + 1
    }
}

/// Wraps an angle to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub heading: f64,
}

impl AgentState {
    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.vx, self.vy, self.heading].iter().all(|v| v.is_finite())
    }

    pub fn features(&self) -> [f64; STATE_DIM] {
        [self.x, self.y, self.vx, self.vy, self.heading]
    }
}

/// Fixed-length state sequence, oldest first. Invalid steps hold zeros.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentHistory {
    pub states: Vec<AgentState>,
    pub valid: Vec<bool>,
}

impl AgentHistory {
    pub fn new(mut states: Vec<AgentState>, valid: Vec<bool>) -> Result<Self> {
        if states.len() != valid.len() {
            return Err(Error::InvalidScene(format!("history has {} states but {} flags", states.len(), valid.len())));
        }
        for (s, &ok) in states.iter_mut().zip(&valid) {
            if !ok {
                *s = AgentState::default();
            } else if !s.is_finite() {
                return Err(Error::InvalidScene("non-finite agent state".into()));
            }
        }
        Ok(Self { states, valid })
    }

    /// An empty slot of length `t_h`.
    pub fn absent(t_h: usize) -> Self {
        Self { states: vec![AgentState::default(); t_h], valid: vec![false; t_h] }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// The state at t₀, if observed.
    pub fn current(&self) -> Option<&AgentState> {
        match self.valid.last() {
            Some(true) => self.states.last(),
            _ => None,
        }
    }

    /// A slot counts as present when the agent is observed at t₀.
    pub fn is_present(&self) -> bool {
        self.current().is_some()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Turn {
    #[default]
    None,
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub waypoints: Vec<Waypoint>,
    pub turn: Turn,
    pub in_intersection: bool,
    pub traffic_control: bool,
    pub valid: bool,
}

impl Lane {
    pub fn new(waypoints: Vec<Waypoint>, turn: Turn, in_intersection: bool, traffic_control: bool) -> Self {
        Self { waypoints, turn, in_intersection, traffic_control, valid: true }
    }

    /// An all-zero padding slot.
    pub fn absent(waypoints: usize) -> Self {
        Self {
            waypoints: vec![Waypoint::default(); waypoints],
            turn: Turn::None,
            in_intersection: false,
            traffic_control: false,
            valid: false,
        }
    }

    /// One-hot encoding of the categorical attributes.
    pub fn attributes(&self) -> [f64; LANE_ATTR_DIM] {
        let mut a = [0.0; LANE_ATTR_DIM];
        if !self.valid {
            return a;
        }
        a[match self.turn {
            Turn::None => 0,
            Turn::Left => 1,
            Turn::Right => 2,
        }] = 1.0;
        a[if self.in_intersection { 4 } else { 3 }] = 1.0;
        a[if self.traffic_control { 6 } else { 5 }] = 1.0;
        a
    }

    /// Smallest waypoint distance to `(x, y)`.
    pub fn min_distance(&self, x: f64, y: f64) -> f64 {
        self.waypoints.iter().map(|w| (w.x - x).hypot(w.y - y)).fold(f64::INFINITY, f64::min)
    }
}

/// Rigid pose: translation plus heading.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    /// Maps a point given in this pose's local frame to the parent frame.
    pub fn to_parent(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        (c * x - s * y + self.x, s * x + c * y + self.y)
    }

    /// Maps a parent-frame point into this pose's local frame.
    pub fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (x - self.x, y - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    fn rotate_to_parent(&self, vx: f64, vy: f64) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        (c * vx - s * vy, s * vx + c * vy)
    }

    fn rotate_to_local(&self, vx: f64, vy: f64) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        (c * vx + s * vy, -s * vx + c * vy)
    }

    /// `self ∘ inner`: local coordinates of `inner` mapped through both.
    pub fn compose(&self, inner: &Pose) -> Pose {
        let (x, y) = self.to_parent(inner.x, inner.y);
        Pose { x, y, heading: wrap_angle(self.heading + inner.heading) }
    }
}

/// Which two lane slots diverge at a fork, and which one the ground truth
/// takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fork {
    pub branch_lanes: [usize; 2],
    pub gt_branch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub target: AgentHistory,
    pub neighbors: Vec<AgentHistory>,
    pub lanes: Vec<Lane>,
    pub future: Option<Vec<[f64; 2]>>,
    /// Pose of this scene's frame in world coordinates.
    pub frame: Pose,
    pub fork: Option<Fork>,
}

impl Scene {
    /// Normalizes a world-frame scene and fills the fixed slots.
    pub fn assemble(raw: Scene, layout: &SceneLayout) -> Result<Scene> {
        let mut s = normalize_scene(raw)?;
        s.neighbors = select_neighbors(&s.neighbors, layout);
        let (lanes, picked) = select_lanes(&s.lanes, layout)?;
        s.lanes = lanes;
        s.fork = s.fork.and_then(|f| {
            let slot = |lane: usize| picked.iter().position(|&p| p == lane);
            Some(Fork { branch_lanes: [slot(f.branch_lanes[0])?, slot(f.branch_lanes[1])?], gt_branch: f.gt_branch })
        });
        s.validate(layout)?;
        Ok(s)
    }

    /// Checks slot counts and sequence lengths against `layout`.
    pub fn validate(&self, layout: &SceneLayout) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScene(m));
        if self.target.len() != layout.t_h {
            return bad(format!("target history has {} steps, expected {}", self.target.len(), layout.t_h));
        }
        if !self.target.is_present() {
            return bad("target is not observed at the current step".into());
        }
        if self.neighbors.len() != layout.max_neighbors {
            return bad(format!("{} neighbor slots, expected {}", self.neighbors.len(), layout.max_neighbors));
        }
        if let Some(h) = self.neighbors.iter().find(|h| h.len() != layout.t_h) {
            return bad(format!("neighbor history has {} steps, expected {}", h.len(), layout.t_h));
        }
        if self.lanes.len() != layout.max_lanes {
            return bad(format!("{} lane slots, expected {}", self.lanes.len(), layout.max_lanes));
        }
        if let Some(l) = self.lanes.iter().find(|l| l.waypoints.len() != layout.waypoints_per_lane) {
            return bad(format!("lane has {} waypoints, expected {}", l.waypoints.len(), layout.waypoints_per_lane));
        }
        if !self.lanes.iter().any(|l| l.valid) {
            return bad("scene has no valid lane".into());
        }
        if let Some(f) = &self.future {
            if f.len() != layout.t_f {
                return bad(format!("future has {} steps, expected {}", f.len(), layout.t_f));
            }
        }
        Ok(())
    }

    pub fn valid_lanes(&self) -> usize {
        self.lanes.iter().filter(|l| l.valid).count()
    }

    pub fn valid_neighbors(&self) -> usize {
        self.neighbors.iter().filter(|h| h.is_present()).count()
    }

    /// Ground-truth endpoint, if the future is known.
    pub fn gt_endpoint(&self) -> Option<[f64; 2]> {
        self.future.as_ref().and_then(|f| f.last().copied())
    }

    /// Applies `f` to every positional quantity, in place.
    fn transform(&mut self, pose: &Pose, to_local: bool) {
        let point = |x: f64, y: f64| if to_local { pose.to_local(x, y) } else { pose.to_parent(x, y) };
        let rot = |x: f64, y: f64| if to_local { pose.rotate_to_local(x, y) } else { pose.rotate_to_parent(x, y) };
        let dh = if to_local { -pose.heading } else { pose.heading };
        for h in std::iter::once(&mut self.target).chain(self.neighbors.iter_mut()) {
            for (s, &ok) in h.states.iter_mut().zip(&h.valid) {
                if !ok {
                    continue;
                }
                (s.x, s.y) = point(s.x, s.y);
                (s.vx, s.vy) = rot(s.vx, s.vy);
                s.heading = wrap_angle(s.heading + dh);
            }
        }
        for lane in self.lanes.iter_mut().filter(|l| l.valid) {
            for w in lane.waypoints.iter_mut() {
                (w.x, w.y) = point(w.x, w.y);
                w.psi = wrap_angle(w.psi + dh);
            }
        }
        if let Some(f) = self.future.as_mut() {
            for p in f.iter_mut() {
                let (x, y) = point(p[0], p[1]);
                *p = [x, y];
            }
        }
    }
}

/// Moves a scene into its target's frame: translate the current target
/// position to the origin, then rotate by the negated heading. The composed
/// pose is kept in `frame` so [`denormalize_scene`] can undo it.
pub fn normalize_scene(mut raw: Scene) -> Result<Scene> {
    let cur = *raw
        .target
        .current()
        .ok_or_else(|| Error::InvalidScene("target is not observed at the current step".into()))?;
    if !cur.is_finite() {
        return Err(Error::InvalidScene("non-finite target pose".into()));
    }
    let pose = Pose { x: cur.x, y: cur.y, heading: cur.heading };
    raw.transform(&pose, true);
    // Pin the target pose exactly; rotation rounding would leave ~1e-16.
    if let Some(last) = raw.target.states.last_mut() {
        last.x = 0.0;
        last.y = 0.0;
        last.heading = 0.0;
    }
    raw.frame = raw.frame.compose(&pose);
    Ok(raw)
}

/// Maps a scene back to world coordinates.
pub fn denormalize_scene(mut s: Scene) -> Scene {
    let frame = s.frame;
    s.transform(&frame, false);
    s.frame = Pose::default();
    s
}

fn by_distance(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

/// Keeps the nearest neighbors observed at t₀ within the radius, padding
/// the remaining slots. Distances are measured from the target at the
/// origin, so `candidates` must already be target-centric. Candidates with a
/// non-finite current position are ignored.
pub fn select_neighbors(candidates: &[AgentHistory], layout: &SceneLayout) -> Vec<AgentHistory> {
    let mut ranked: Vec<(usize, f64)> = candidates
        .iter()
        .enumerate()
        .filter_map(|(i, h)| {
            let s = h.current()?;
            let d = s.x.hypot(s.y);
            (d.is_finite() && d <= layout.neighbor_radius_m).then_some((i, d))
        })
        .collect();
    ranked.sort_by(by_distance);
    let mut out: Vec<AgentHistory> =
        ranked.iter().take(layout.max_neighbors).map(|&(i, _)| candidates[i].clone()).collect();
    out.resize_with(layout.max_neighbors, || AgentHistory::absent(layout.t_h));
    out
}

/// Keeps the lanes closest to the origin (minimum waypoint distance), ties
/// to the lower input index. Returns the slots and, per filled slot, the
/// index of the candidate it came from.
pub fn select_lanes(candidates: &[Lane], layout: &SceneLayout) -> Result<(Vec<Lane>, Vec<usize>)> {
    if let Some(l) = candidates.iter().find(|l| l.valid && l.waypoints.len() != layout.waypoints_per_lane) {
        return Err(Error::InvalidScene(format!(
            "lane has {} waypoints, expected {}",
            l.waypoints.len(),
            layout.waypoints_per_lane
        )));
    }
    let mut ranked: Vec<(usize, f64)> =
        candidates.iter().enumerate().filter(|(_, l)| l.valid).map(|(i, l)| (i, l.min_distance(0.0, 0.0))).collect();
    if ranked.is_empty() {
        return Err(Error::InvalidScene("scene has no lanes".into()));
    }
    ranked.sort_by(by_distance);
    ranked.truncate(layout.max_lanes);
    let picked: Vec<usize> = ranked.iter().map(|&(i, _)| i).collect();
    let mut lanes: Vec<Lane> = picked.iter().map(|&i| candidates[i].clone()).collect();
    lanes.resize_with(layout.max_lanes, || Lane::absent(layout.waypoints_per_lane));
    Ok((lanes, picked))
}

/// K predicted futures with one probability each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub trajectories: Vec<Vec<[f64; 2]>>,
    pub probs: Vec<f64>,
}

impl PredictionSet {
    pub fn modes(&self) -> usize {
        self.probs.len()
    }

    /// Checks the simplex and finiteness invariants.
    pub fn validate(&self) -> Result<()> {
        if self.trajectories.len() != self.probs.len() || self.probs.is_empty() {
            return Err(Error::Dimension(format!(
                "{} trajectories with {} probabilities",
                self.trajectories.len(),
                self.probs.len()
            )));
        }
        let sum: f64 = self.probs.iter().sum();
        if self.probs.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-5 {
            return Err(Error::Dimension(format!("probabilities {:?} are not on the simplex", self.probs)));
        }
        if self.trajectories.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("non-finite predicted coordinate".into()));
        }
        Ok(())
    }

    pub fn endpoints(&self) -> Vec<[f64; 2]> {
        self.trajectories.iter().map(|t| t.last().copied().unwrap_or([0.0, 0.0])).collect()
    }

    /// The same predictions expressed in the parent frame of `frame`.
    pub fn to_parent(&self, frame: &Pose) -> PredictionSet {
        let trajectories = self
            .trajectories
            .iter()
            .map(|t| {
                t.iter()
                    .map(|p| {
                        let (x, y) = frame.to_parent(p[0], p[1]);
                        [x, y]
                    })
                    .collect()
            })
            .collect();
        PredictionSet { trajectories, probs: self.probs.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_angle(0.25), 0.25);
    }

    #[test]
    fn pose_round_trip() {
        let p = Pose { x: 3.0, y: -2.0, heading: 0.7 };
        let (lx, ly) = p.to_local(10.0, 4.0);
        let (x, y) = p.to_parent(lx, ly);
        assert!((x - 10.0).abs() < 1e-12 && (y - 4.0).abs() < 1e-12);
    }

    #[test]
    fn lane_attributes_one_hot() {
        let l = Lane::new(vec![Waypoint::default(); 10], Turn::Left, true, false);
        assert_eq!(l.attributes(), [0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        assert_eq!(Lane::absent(10).attributes(), [0.0; 7]);
    }
}
