//! Synthetic driving scenes with known geometry.
//!
//! Every preset lays out a small road map around a junction at the origin
//! of a local road frame (incoming traffic drives along +x), rolls the target
//! along one lane at constant speed, scatters neighbors over the other lanes
//! and finally places the whole map at a random world pose.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::geometry::resample;
use crate::error::{Error, Result};
use crate::scene::{wrap_angle, AgentHistory, AgentState, Fork, Lane, Pose, Scene, SceneLayout, Turn, Waypoint, DT};
use crate::tensor::nn::EngineRng;

/// Length of every generated lane segment, meters.
pub const LANE_LENGTH: f64 = 50.0;
/// Lateral spacing between parallel lanes, meters.
pub const LANE_WIDTH: f64 = 3.5;
/// Spacing of the dense polyline a lane is resampled from, meters.
const DENSE_STEP: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetKind {
    Straight,
    LeftTurn,
    RightTurn,
    Fork,
    Intersection,
}

impl PresetKind {
    pub const ALL: [PresetKind; 5] =
        [PresetKind::Straight, PresetKind::LeftTurn, PresetKind::RightTurn, PresetKind::Fork, PresetKind::Intersection];

    pub fn name(self) -> &'static str {
        match self {
            PresetKind::Straight => "straight",
            PresetKind::LeftTurn => "left_turn",
            PresetKind::RightTurn => "right_turn",
            PresetKind::Fork => "fork",
            PresetKind::Intersection => "intersection",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioPreset {
    pub kind: PresetKind,
    /// Target speed range, m/s.
    pub speed: (f64, f64),
    /// Turn curvature range, 1/m.
    pub curvature: (f64, f64),
    /// Inclusive range of neighbors placed on the map.
    pub neighbors: (usize, usize),
    /// Standard deviation of the position noise, meters.
    pub noise_std: f64,
}

impl ScenarioPreset {
    pub fn new(kind: PresetKind) -> Self {
        let (speed, curvature, neighbors) = match kind {
            PresetKind::Straight => ((5.0, 15.0), (0.0, 0.0), (0, 4)),
            PresetKind::LeftTurn | PresetKind::RightTurn => ((5.0, 10.0), (0.025, 0.04), (0, 4)),
            PresetKind::Fork => ((8.0, 12.0), (0.025, 0.045), (0, 3)),
            PresetKind::Intersection => ((5.0, 10.0), (0.03, 0.045), (1, 6)),
        };
        Self { kind, speed, curvature, neighbors, noise_std: 0.05 }
    }

    pub fn with_noise(mut self, std: f64) -> Self {
        self.noise_std = std;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.speed.0 <= self.speed.1
            && self.speed.0 >= 0.0
            && self.curvature.0 <= self.curvature.1
            && self.curvature.0 >= 0.0
            && self.neighbors.0 <= self.neighbors.1
            && self.noise_std >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid preset {self:?}")))
        }
    }
}

/// A straight line or circular arc, parametrized by arc length.
#[derive(Clone, Copy, Debug)]
struct Segment {
    x: f64,
    y: f64,
    heading: f64,
    /// Signed curvature, positive turning left.
    curvature: f64,
    length: f64,
}

impl Segment {
    fn line(x: f64, y: f64, heading: f64, length: f64) -> Self {
        Self { x, y, heading, curvature: 0.0, length }
    }

    /// Pose at arc length `s`; beyond either end the tangent line continues.
    fn at(&self, s: f64) -> (f64, f64, f64) {
        let (ext, s) = if s < 0.0 {
            (s, 0.0)
        } else if s > self.length {
            (s - self.length, self.length)
        } else {
            (0.0, s)
        };
        let (x, y, h) = if self.curvature.abs() < 1e-12 {
            (self.x + s * self.heading.cos(), self.y + s * self.heading.sin(), self.heading)
        } else {
            let k = self.curvature;
            let h = self.heading + k * s;
            (self.x + (h.sin() - self.heading.sin()) / k, self.y - (h.cos() - self.heading.cos()) / k, h)
        };
        (x + ext * h.cos(), y + ext * h.sin(), wrap_angle(h))
    }

    fn end(&self) -> (f64, f64, f64) {
        self.at(self.length)
    }

    /// The segment that continues straight on from this one's end.
    fn then_line(&self, length: f64) -> Self {
        let (x, y, h) = self.end();
        Segment::line(x, y, h, length)
    }

    fn then_arc(&self, curvature: f64, length: f64) -> Self {
        let (x, y, h) = self.end();
        Segment { x, y, heading: h, curvature, length }
    }

    fn dense(&self) -> Vec<Waypoint> {
        let n = (self.length / DENSE_STEP).ceil().max(1.0) as usize;
        (0..=n)
            .map(|i| {
                let (x, y, psi) = self.at(self.length * i as f64 / n as f64);
                Waypoint { x, y, psi }
            })
            .collect()
    }
}

/// A chain of segments driven end to end.
#[derive(Clone, Debug)]
struct Route(Vec<Segment>);

impl Route {
    fn at(&self, mut s: f64) -> (f64, f64, f64) {
        let last = self.0.len() - 1;
        for (i, seg) in self.0.iter().enumerate() {
            if s <= seg.length || i == last {
                return seg.at(s);
            }
            s -= seg.length;
        }
        unreachable!("route has at least one segment")
    }
}

struct MapLane {
    seg: Segment,
    turn: Turn,
    in_intersection: bool,
    traffic_control: bool,
}

impl MapLane {
    fn plain(seg: Segment) -> Self {
        Self { seg, turn: Turn::None, in_intersection: false, traffic_control: false }
    }

    fn to_lane(&self, waypoints: usize) -> Lane {
        Lane::new(resample(&self.seg.dense(), waypoints), self.turn, self.in_intersection, self.traffic_control)
    }
}

/// The map and the target's route through it. `route_s0` is the target's
/// arc length on the route at t₀.
struct Layout {
    lanes: Vec<MapLane>,
    route: Route,
    route_s0: f64,
    fork: Option<Fork>,
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Two-way road along the x axis: three incoming segments ending at
/// the origin and one opposing lane per segment.
fn approach(lanes: &mut Vec<MapLane>) -> Segment {
    let l = LANE_LENGTH;
    lanes.push(MapLane::plain(Segment::line(-2.0 * l, 0.0, 0.0, l)));
    let last = Segment::line(-l, 0.0, 0.0, l);
    lanes.push(MapLane::plain(last));
    for x0 in [0.0, -l] {
        lanes.push(MapLane::plain(Segment::line(x0, LANE_WIDTH, PI, l)));
    }
    last
}

fn straight_map<R: Rng>(rng: &mut R) -> Layout {
    let mut lanes = Vec::new();
    let incoming = approach(&mut lanes);
    let ahead = incoming.then_line(LANE_LENGTH);
    lanes.push(MapLane::plain(ahead));
    lanes.push(MapLane::plain(Segment::line(LANE_LENGTH, LANE_WIDTH, PI, LANE_LENGTH)));
    // A parallel same-direction lane on the right.
    for x0 in [-LANE_LENGTH, 0.0] {
        lanes.push(MapLane::plain(Segment::line(x0, -LANE_WIDTH, 0.0, LANE_LENGTH)));
    }
    Layout { lanes, route: Route(vec![incoming, ahead]), route_s0: rng.random_range(5.0..45.0), fork: None }
}

fn turn_map<R: Rng>(rng: &mut R, preset: &ScenarioPreset, left: bool) -> Layout {
    let mut lanes = Vec::new();
    let incoming = approach(&mut lanes);
    let k = uniform(rng, preset.curvature);
    let sign = if left { 1.0 } else { -1.0 };
    // Arc long enough for a right angle, capped at one lane length.
    let arc_len = (FRAC_PI_2 / k).min(LANE_LENGTH);
    let arc = incoming.then_arc(sign * k, arc_len);
    let exit = arc.then_line(LANE_LENGTH);
    let turn = if left { Turn::Left } else { Turn::Right };
    lanes.push(MapLane { seg: arc, turn, in_intersection: true, traffic_control: false });
    lanes.push(MapLane::plain(exit));
    lanes.push(MapLane {
        seg: incoming.then_line(LANE_LENGTH),
        turn: Turn::None,
        in_intersection: true,
        traffic_control: false,
    });
    Layout { lanes, route: Route(vec![incoming, arc, exit]), route_s0: rng.random_range(30.0..48.0), fork: None }
}

fn fork_map<R: Rng>(rng: &mut R, preset: &ScenarioPreset) -> Layout {
    let mut lanes = Vec::new();
    let incoming = approach(&mut lanes);
    // Independent curvatures: one branch says nothing about the other.
    let left = incoming.then_arc(uniform(rng, preset.curvature), LANE_LENGTH);
    let right = incoming.then_arc(-uniform(rng, preset.curvature), LANE_LENGTH);
    let first = lanes.len();
    lanes.push(MapLane { seg: left, turn: Turn::Left, in_intersection: false, traffic_control: false });
    lanes.push(MapLane { seg: right, turn: Turn::Right, in_intersection: false, traffic_control: false });
    lanes.push(MapLane::plain(left.then_line(LANE_LENGTH)));
    lanes.push(MapLane::plain(right.then_line(LANE_LENGTH)));
    let gt_branch = rng.random_range(0..2);
    let branch = if gt_branch == 0 { left } else { right };
    // The fork point lies 0 to 6 m ahead of the target.
    let ahead = rng.random_range(0.0..6.0);
    Layout {
        lanes,
        route: Route(vec![incoming, branch, branch.then_line(LANE_LENGTH)]),
        route_s0: LANE_LENGTH - ahead,
        fork: Some(Fork { branch_lanes: [first, first + 1], gt_branch }),
    }
}

fn intersection_map<R: Rng>(rng: &mut R, preset: &ScenarioPreset) -> Layout {
    let l = LANE_LENGTH;
    let mut lanes = Vec::new();
    let incoming = approach(&mut lanes);
    for l0 in lanes.iter_mut() {
        l0.traffic_control = true;
    }
    let k = uniform(rng, preset.curvature);
    let conn = |seg: Segment, turn: Turn| MapLane { seg, turn, in_intersection: true, traffic_control: true };
    // The junction box spans x in [0, 2w]; crossing road runs along y.
    let w = 2.0 * LANE_WIDTH;
    let through = incoming.then_line(w);
    let left = incoming.then_arc(k, FRAC_PI_2 / k);
    let right = incoming.then_arc(-k, FRAC_PI_2 / k);
    lanes.push(conn(through, Turn::None));
    lanes.push(conn(left, Turn::Left));
    lanes.push(conn(right, Turn::Right));
    let exits = [through.then_line(l), left.then_line(l), right.then_line(l)];
    for e in exits {
        lanes.push(MapLane::plain(e));
    }
    // Crossing traffic, both directions, and the far side of the main road.
    lanes.push(MapLane::plain(Segment::line(LANE_WIDTH, -l, FRAC_PI_2, 2.0 * l)));
    lanes.push(MapLane::plain(Segment::line(-LANE_WIDTH, l, -FRAC_PI_2, 2.0 * l)));
    lanes.push(MapLane::plain(Segment::line(w + l, LANE_WIDTH, PI, l)));
    let choice = rng.random_range(0..3);
    let (conn_seg, exit) = match choice {
        0 => (through, exits[0]),
        1 => (left, exits[1]),
        _ => (right, exits[2]),
    };
    Layout { lanes, route: Route(vec![incoming, conn_seg, exit]), route_s0: rng.random_range(35.0..49.0), fork: None }
}

/// Normal noise clipped to a disc of radius 1.5σ, so that two consecutive
/// samples never differ by more than 3σ.
fn clipped_noise<R: Rng>(rng: &mut R, std: f64) -> (f64, f64) {
    if std <= 0.0 {
        return (0.0, 0.0);
    }
    let n = Normal::new(0.0, std).expect("positive std");
    let (dx, dy) = (n.sample(rng), n.sample(rng));
    let r = dx.hypot(dy);
    let cap = 1.5 * std;
    if r > cap {
        (dx * cap / r, dy * cap / r)
    } else {
        (dx, dy)
    }
}

fn roll<R: Rng>(
    rng: &mut R,
    route: &Route,
    s0: f64,
    speed: f64,
    noise: f64,
    t_h: usize,
    t_f: usize,
) -> (AgentHistory, Vec<[f64; 2]>) {
    let mut states = Vec::with_capacity(t_h);
    for i in 0..t_h {
        let s = s0 - speed * DT * (t_h - 1 - i) as f64;
        let (x, y, h) = route.at(s);
        let (nx, ny) = clipped_noise(rng, noise);
        states.push(AgentState { x: x + nx, y: y + ny, vx: speed * h.cos(), vy: speed * h.sin(), heading: h });
    }
    let future = (1..=t_f)
        .map(|i| {
            let (x, y, _) = route.at(s0 + speed * DT * i as f64);
            let (nx, ny) = clipped_noise(rng, noise);
            [x + nx, y + ny]
        })
        .collect();
    let valid = vec![true; t_h];
    (AgentHistory::new(states, valid).expect("finite generated states"), future)
}

/// Generates one normalized scene. The same `(preset, seed)` always
/// yields the same scene.
pub fn generate_scene(preset: &ScenarioPreset, seed: u64, layout: &SceneLayout) -> Result<Scene> {
    preset.validate()?;
    let mut rng = EngineRng::seed_from_u64(seed);
    let map = match preset.kind {
        PresetKind::Straight => straight_map(&mut rng),
        PresetKind::LeftTurn => turn_map(&mut rng, preset, true),
        PresetKind::RightTurn => turn_map(&mut rng, preset, false),
        PresetKind::Fork => fork_map(&mut rng, preset),
        PresetKind::Intersection => intersection_map(&mut rng, preset),
    };
    let speed = uniform(&mut rng, preset.speed);
    let (target, future) = roll(&mut rng, &map.route, map.route_s0, speed, preset.noise_std, layout.t_h, layout.t_f);

    let n_neighbors = rng.random_range(preset.neighbors.0..=preset.neighbors.1);
    let mut neighbors = Vec::with_capacity(n_neighbors);
    for _ in 0..n_neighbors {
        let lane = &map.lanes[rng.random_range(0..map.lanes.len())];
        let route = Route(vec![lane.seg]);
        let s0 = rng.random_range(0.0..lane.seg.length);
        let v = uniform(&mut rng, (preset.speed.0 * 0.5, preset.speed.1));
        let (mut h, _) = roll(&mut rng, &route, s0, v, preset.noise_std, layout.t_h, 0);
        // Some tracks start late.
        if rng.random_bool(0.3) {
            let missing = rng.random_range(1..layout.t_h / 2 + 1);
            for i in 0..missing {
                h.valid[i] = false;
                h.states[i] = AgentState::default();
            }
        }
        neighbors.push(h);
    }

    let lanes: Vec<Lane> = map.lanes.iter().map(|l| l.to_lane(layout.waypoints_per_lane)).collect();
    let raw = Scene {
        id: format!("{}-{seed}", preset.kind.name()),
        target,
        neighbors,
        lanes,
        future: Some(future),
        frame: Pose::default(),
        fork: map.fork,
    };
    // Place the road frame somewhere in the world.
    let world = Pose {
        x: rng.random_range(-1000.0..1000.0),
        y: rng.random_range(-1000.0..1000.0),
        heading: rng.random_range(-PI..PI),
    };
    Scene::assemble(place(raw, &world), layout)
}

/// Expresses a road-frame scene in the parent frame of `pose`.
fn place(mut s: Scene, pose: &Pose) -> Scene {
    s.frame = *pose;
    crate::scene::denormalize_scene(s)
}

/// `count` scenes cycling through `kinds`, seeded `seed, seed + 1, ...`.
pub fn generate_mixed(kinds: &[PresetKind], count: usize, seed: u64, layout: &SceneLayout) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| generate_scene(&ScenarioPreset::new(kinds[i % kinds.len()]), seed.wrapping_add(i as u64), layout))
        .collect()
}
