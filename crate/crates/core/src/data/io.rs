//! JSON scene files.
//!
//! ```json
//! {
//!   "id": "scene-0",
//!   "agents": [{"track_id": "av", "is_target": true,
//!               "states": [[t, x, y, vx, vy, heading], ...]}],
//!   "lanes": [{"waypoints": [[x, y, psi], ...], "turn": "left",
//!              "in_intersection": true, "traffic_control": false}],
//!   "future": [[x, y], ...],
//!   "fork": {"branch_lanes": [2, 3], "gt_branch": 0}
//! }
//! ```
//!
//! Coordinates are world-frame meters and timestamps seconds at 10 Hz. A
//! state may also be given as `[t, x, y]`; velocities are then finite
//! differences and the heading follows the velocity. The current step t₀ is
//! the target's last timestamp; `future` holds the T_f positions after it.
//! `fork.branch_lanes` index into `lanes`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::error::Category;

use super::geometry::resample;
use crate::error::{Error, Result};
use crate::scene::{
    denormalize_scene, AgentHistory, AgentState, Fork, Lane, Pose, Scene, SceneLayout, Turn, Waypoint, DT,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub id: String,
    pub agents: Vec<AgentRecord>,
    pub lanes: Vec<LaneRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub future: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fork: Option<Fork>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentRecord {
    pub track_id: String,
    pub states: Vec<Vec<f64>>,
    #[serde(default)]
    pub is_target: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneRecord {
    pub waypoints: Vec<[f64; 3]>,
    #[serde(default)]
    pub turn: Turn,
    #[serde(default)]
    pub in_intersection: bool,
    #[serde(default)]
    pub traffic_control: bool,
}

fn json_error(e: serde_json::Error) -> Error {
    match e.classify() {
        Category::Data => Error::Schema(e.to_string()),
        Category::Io => Error::Io(e.into()),
        Category::Syntax | Category::Eof => Error::Parse { line: e.line(), column: e.column(), message: e.to_string() },
    }
}

impl SceneFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(json_error)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Builds the normalized, slotted scene.
    pub fn into_scene(self, layout: &SceneLayout) -> Result<Scene> {
        let targets: Vec<usize> = self.agents.iter().enumerate().filter(|(_, a)| a.is_target).map(|(i, _)| i).collect();
        let ti = match targets[..] {
            [i] => i,
            [] => return Err(Error::Schema("no agent has is_target = true".into())),
            _ => return Err(Error::Schema(format!("{} agents are marked as target", targets.len()))),
        };
        for a in &self.agents {
            check_states(a)?;
        }
        let t0 = self.agents[ti]
            .states
            .last()
            .map(|s| s[0])
            .ok_or_else(|| Error::InvalidScene("target has no states".into()))?;
        let target = history(&self.agents[ti], t0, layout.t_h)?;
        let mut neighbors = Vec::new();
        for (i, a) in self.agents.iter().enumerate() {
            if i != ti {
                neighbors.push(history(a, t0, layout.t_h)?);
            }
        }
        let lanes = self
            .lanes
            .iter()
            .map(|l| {
                let pts: Vec<Waypoint> = l.waypoints.iter().map(|w| Waypoint { x: w[0], y: w[1], psi: w[2] }).collect();
                if pts.len() < 2 {
                    return Err(Error::Schema("a lane needs at least two waypoints".into()));
                }
                if pts.iter().any(|w| !(w.x.is_finite() && w.y.is_finite() && w.psi.is_finite())) {
                    return Err(Error::InvalidScene("non-finite waypoint".into()));
                }
                Ok(Lane::new(resample(&pts, layout.waypoints_per_lane), l.turn, l.in_intersection, l.traffic_control))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(f) = &self.future {
            if f.len() != layout.t_f {
                return Err(Error::Schema(format!("future has {} points, expected {}", f.len(), layout.t_f)));
            }
        }
        if let Some(f) = &self.fork {
            if f.branch_lanes.iter().any(|&l| l >= lanes.len()) || f.gt_branch > 1 {
                return Err(Error::Schema("fork refers to a missing lane or branch".into()));
            }
        }
        let raw = Scene {
            id: self.id,
            target,
            neighbors,
            lanes,
            future: self.future,
            frame: Pose::default(),
            fork: self.fork,
        };
        Scene::assemble(raw, layout)
    }

    /// World-frame file for a normalized scene. Only present agents and
    /// valid lanes are written, in slot order, with t₀ = 0.
    pub fn from_scene(scene: &Scene) -> Self {
        let world = denormalize_scene(scene.clone());
        let t_h = world.target.len();
        let record = |id: String, h: &AgentHistory, is_target: bool| AgentRecord {
            track_id: id,
            states: h
                .states
                .iter()
                .zip(&h.valid)
                .enumerate()
                .filter(|(_, (_, &ok))| ok)
                .map(|(i, (s, _))| {
                    let t = (i as f64 - (t_h as f64 - 1.0)) * DT;
                    vec![t, s.x, s.y, s.vx, s.vy, s.heading]
                })
                .collect(),
            is_target,
        };
        let mut agents = vec![record("target".into(), &world.target, true)];
        for (i, h) in world.neighbors.iter().enumerate().filter(|(_, h)| h.is_present()) {
            agents.push(record(format!("neighbor-{i}"), h, false));
        }
        let lanes = world
            .lanes
            .iter()
            .filter(|l| l.valid)
            .map(|l| LaneRecord {
                waypoints: l.waypoints.iter().map(|w| [w.x, w.y, w.psi]).collect(),
                turn: l.turn,
                in_intersection: l.in_intersection,
                traffic_control: l.traffic_control,
            })
            .collect();
        SceneFile { id: world.id, agents, lanes, future: world.future, fork: world.fork }
    }
}

fn check_states(a: &AgentRecord) -> Result<()> {
    let mut prev = f64::NEG_INFINITY;
    for s in &a.states {
        if s.len() != 6 && s.len() != 3 {
            return Err(Error::Schema(format!(
                "agent {}: a state has {} values, expected [t, x, y] or [t, x, y, vx, vy, heading]",
                a.track_id,
                s.len()
            )));
        }
        if !(s[0] > prev) {
            return Err(Error::Schema(format!("agent {}: timestamps are not strictly increasing", a.track_id)));
        }
        prev = s[0];
    }
    Ok(())
}

/// Places an agent's states on the T_h grid ending at `t0`. States outside
/// the window are dropped; off-grid timestamps are a schema error.
fn history(a: &AgentRecord, t0: f64, t_h: usize) -> Result<AgentHistory> {
    let mut states = vec![AgentState::default(); t_h];
    let mut valid = vec![false; t_h];
    let short = a.states.iter().any(|s| s.len() == 3);
    let mut steps: Vec<(i64, &Vec<f64>)> = Vec::with_capacity(a.states.len());
    for s in &a.states {
        let k = (s[0] - t0) / DT;
        let r = k.round();
        if (k - r).abs() > 1e-3 {
            return Err(Error::Schema(format!("agent {}: timestamp {} is off the 10 Hz grid", a.track_id, s[0])));
        }
        steps.push((r as i64, s));
    }
    for (j, &(k, s)) in steps.iter().enumerate() {
        let slot = k + t_h as i64 - 1;
        if slot < 0 || slot >= t_h as i64 {
            continue;
        }
        let slot = slot as usize;
        let (vx, vy, heading) = if short { differenced(&steps, j) } else { (s[3], s[4], s[5]) };
        states[slot] = AgentState { x: s[1], y: s[2], vx, vy, heading };
        valid[slot] = true;
    }
    AgentHistory::new(states, valid)
}

/// Velocity from the neighboring samples of step `j`; heading along it.
fn differenced(steps: &[(i64, &Vec<f64>)], j: usize) -> (f64, f64, f64) {
    let (lo, hi) = match (j.checked_sub(1), steps.get(j + 1)) {
        (Some(p), _) => (p, j),
        (None, Some(_)) => (j, j + 1),
        (None, None) => return (0.0, 0.0, 0.0),
    };
    let dt = (steps[hi].0 - steps[lo].0) as f64 * DT;
    let (a, b) = (steps[lo].1, steps[hi].1);
    let (vx, vy) = ((b[1] - a[1]) / dt, (b[2] - a[2]) / dt);
    let heading = if vx.hypot(vy) > 1e-9 { vy.atan2(vx) } else { 0.0 };
    (vx, vy, heading)
}

pub fn load_scene(path: &Path, layout: &SceneLayout) -> Result<Scene> {
    let text = fs::read_to_string(path)?;
    SceneFile::from_json(&text)?.into_scene(layout)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    fs::write(path, SceneFile::from_scene(scene).to_json()?)?;
    Ok(())
}

/// Sorted `*.json` paths of a dataset directory.
pub fn scene_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Loads every scene of a directory; an empty directory is an error.
pub fn load_dir(dir: &Path, layout: &SceneLayout) -> Result<Vec<Scene>> {
    let paths = scene_paths(dir)?;
    if paths.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    paths.iter().map(|p| load_scene(p, layout)).collect()
}
