//! Model and run configuration.
//!
//! Both structs deserialize from JSON with every field optional; missing
//! fields take the defaults below. Unknown keys are rejected and all of
//! them are listed in the error.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::scene::SceneLayout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapMode {
    /// One key per waypoint.
    Waypoint,
    /// One key per lane, pooled over its waypoints.
    Lane,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MultimodalMode {
    /// Each agent-map attention head yields one mode.
    Attention,
    /// A fused map feature feeds K separate decoders.
    Ensemble,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Heads of the agent-agent layer.
    pub n_heads: usize,
    /// Per-head query/key/value width of the agent-agent layer.
    pub head_dim: usize,
    /// Number of predicted modes.
    pub k: usize,
    pub t_h: usize,
    pub t_f: usize,
    pub max_neighbors: usize,
    pub neighbor_radius_m: f64,
    pub max_lanes: usize,
    pub waypoints_per_lane: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
    pub map_mode: MapMode,
    pub multimodal_mode: MultimodalMode,
    /// Positions and velocities are divided by this before entering the
    /// network, and predicted coordinates multiplied by it.
    pub coord_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let layout = SceneLayout::default();
        Self {
            d_model: 256,
            n_heads: 6,
            head_dim: 64,
            k: 6,
            t_h: layout.t_h,
            t_f: layout.t_f,
            max_neighbors: layout.max_neighbors,
            neighbor_radius_m: layout.neighbor_radius_m,
            max_lanes: layout.max_lanes,
            waypoints_per_lane: layout.waypoints_per_lane,
            ffn_dim: 1024,
            dropout_rate: 0.1,
            map_mode: MapMode::Waypoint,
            multimodal_mode: MultimodalMode::Attention,
            coord_scale: 10.0,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for desk-scale experiments.
    pub fn reduced() -> Self {
        Self { d_model: 64, head_dim: 16, ffn_dim: 256, ..Self::default() }
    }

    pub fn layout(&self) -> SceneLayout {
        SceneLayout {
            t_h: self.t_h,
            t_f: self.t_f,
            max_neighbors: self.max_neighbors,
            neighbor_radius_m: self.neighbor_radius_m,
            max_lanes: self.max_lanes,
            waypoints_per_lane: self.waypoints_per_lane,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("k", self.k),
            ("t_h", self.t_h),
            ("t_f", self.t_f),
            ("max_lanes", self.max_lanes),
            ("waypoints_per_lane", self.waypoints_per_lane),
            ("ffn_dim", self.ffn_dim),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model < 2 {
            return Err(Error::Config("d_model must be at least 2".into()));
        }
        if !(self.neighbor_radius_m >= 0.0) {
            return Err(Error::Config("neighbor_radius_m must be non-negative".into()));
        }
        if !(self.coord_scale > 0.0) || !self.coord_scale.is_finite() {
            return Err(Error::Config("coord_scale must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.multimodal_mode == MultimodalMode::Attention && self.k != self.n_heads {
            return Err(Error::Config(format!(
                "attention mode needs k == n_heads, got k = {} and n_heads = {}",
                self.k, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        check_keys(&v, &Self::default(), "")?;
        let c: Self = serde_json::from_value(v)?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs between learning-rate halvings.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub alpha: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Epochs between checkpoints; 0 writes only the final one.
    pub save_every: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 100,
            batch_size: 64,
            lr: 1e-4,
            lr_decay_every: 20,
            lr_decay_factor: 0.5,
            alpha: 0.5,
            clip_norm: 5.0,
            seed: 0,
            save_every: 0,
            max_steps: None,
            data_dir: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = epoch.checked_div(self.lr_decay_every).unwrap_or(0);
        self.lr * self.lr_decay_factor.powi(halvings as i32)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::Config("lr_decay_factor must be positive".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be non-negative".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        check_keys(&v, &Self::default(), "")?;
        let c: Self = serde_json::from_value(v)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Lists every key of `v` that the serialized `template` does not have,
/// descending into nested objects.
fn check_keys<S: Serialize>(v: &Value, template: &S, prefix: &str) -> Result<()> {
    let t = serde_json::to_value(template)?;
    let mut unknown = Vec::new();
    collect_unknown(v, &t, prefix, &mut unknown);
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
    }
}

fn collect_unknown(v: &Value, t: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(vm), Value::Object(tm)) = (v, t) else { return };
    for (k, val) in vm {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match tm.get(k) {
            None => out.push(path),
            Some(tv) => collect_unknown(val, tv, &path, out),
        }
    }
}
