//! Command implementations behind the `mmtp` binary.

pub mod svg;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mmtp::checkpoint;
use mmtp::data::{generate_mixed, load_dir, load_scene, save_scene, PresetKind};
use mmtp::train::{train, TrainOutcome};
use mmtp::{MetricReport, PredictionSet, RunConfig};
use serde::Serialize;

/// Writes `count` generated scenes into `out` and returns their paths.
/// `preset` is a preset name or `mixed`.
pub fn gen_data(preset: &str, count: usize, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    let kinds: Vec<PresetKind> = match preset {
        "mixed" => PresetKind::ALL.to_vec(),
        name => match PresetKind::parse(name) {
            Some(k) => vec![k],
            None => {
                let names: Vec<&str> = PresetKind::ALL.iter().map(|k| k.name()).collect();
                bail!("unknown preset {name:?}; expected one of {} or mixed", names.join(", "))
            }
        },
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let scenes = generate_mixed(&kinds, count, seed, &RunConfig::default().model.layout())?;
    let mut paths = Vec::with_capacity(count);
    for s in &scenes {
        let path = out.join(format!("{}.json", s.id));
        save_scene(s, &path).with_context(|| format!("writing {}", path.display()))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Resolves the run configuration from a file plus command-line overrides.
pub fn run_config(
    config: Option<&Path>,
    data: Option<&Path>,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(d) = data {
        cfg.data_dir = Some(d.to_path_buf());
    }
    if let Some(o) = out {
        cfg.out_dir = Some(o.to_path_buf());
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Trains on `cfg.data_dir`, writing checkpoints and `metrics.csv` into
/// `cfg.out_dir`. `on_epoch` receives one summary line per epoch.
pub fn train_cmd(cfg: &RunConfig, mut on_epoch: impl FnMut(String)) -> Result<TrainOutcome> {
    let data = cfg.data_dir.as_deref().context("no data directory given (--data or data_dir)")?;
    let out = cfg.out_dir.as_deref().context("no output directory given (--out or out_dir)")?;
    if !data.is_dir() {
        bail!("data directory {} does not exist", data.display());
    }
    let scenes = load_dir(data, &cfg.model.layout())?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let outcome = train(&scenes, cfg, Some(out), |e| {
        on_epoch(format!(
            "epoch {:>4}  steps {:>4}  traj {:.4}  score {:.4}  total {:.4}  lr {:.3e}",
            e.epoch, e.steps, e.traj, e.score, e.total, e.lr
        ))
    })?;
    Ok(outcome)
}

/// Metrics of a checkpoint on every scene of `data`.
pub fn eval(ckpt: &Path, data: &Path) -> Result<MetricReport> {
    let predictor = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let scenes = load_dir(data, &predictor.config().layout())?;
    let preds = predictor.predict(&scenes)?;
    let mut pairs = Vec::with_capacity(scenes.len());
    for (p, s) in preds.iter().zip(&scenes) {
        let gt = s.future.as_deref().with_context(|| format!("scene {} has no ground-truth future", s.id))?;
        pairs.push((&p.set, gt));
    }
    Ok(MetricReport::evaluate(pairs)?)
}

#[derive(Serialize)]
struct PredictionFile<'a> {
    id: &'a str,
    /// Trajectories are in the target-centric frame of the scene.
    #[serde(flatten)]
    set: &'a PredictionSet,
}

/// Writes `<id>.pred.json` for every scene of `data` and returns the paths.
pub fn predict(ckpt: &Path, data: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let predictor = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let scenes = load_dir(data, &predictor.config().layout())?;
    let preds = predictor.predict(&scenes)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut paths = Vec::with_capacity(scenes.len());
    for (p, s) in preds.iter().zip(&scenes) {
        let path = out.join(format!("{}.pred.json", s.id));
        let json = serde_json::to_string_pretty(&PredictionFile { id: &s.id, set: &p.set })?;
        fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Renders the attention of every mode for one scene.
pub fn viz(ckpt: &Path, scene: &Path, min_score: f64) -> Result<String> {
    let predictor = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let layout = predictor.config().layout();
    let scene = load_scene(scene, &layout)?;
    let pred = predictor.predict(std::slice::from_ref(&scene))?.remove(0);
    Ok(svg::render(&scene, &pred, layout.waypoints_per_lane, min_score))
}
