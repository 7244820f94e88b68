//! Training loop: forward, loss, backward, global-norm clipping, Nadam.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{batches, epoch_order, SceneBatch};
use crate::error::{Error, Result};
use crate::heads::{objective, LossBreakdown};
use crate::model::{MapLayout, Predictor};
use crate::scene::Scene;
use crate::tensor::nn::{Ctx, EngineRng};
use crate::tensor::{clip_global_norm, Nadam, NadamConfig, Real, Tensor};

pub const METRICS_HEADER: &str = "epoch,step,traj_loss,score_loss,total,lr";

/// One optimizer step as logged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.epoch, self.step, self.loss.traj, self.loss.score, self.loss.total, self.lr)
    }
}

/// Means over the steps of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub traj: f64,
    pub score: f64,
    pub total: f64,
    pub lr: f64,
}

/// Model, optimizer and dropout stream of one run.
pub struct Trainer {
    pub predictor: Predictor,
    pub config: RunConfig,
    opt: Nadam<f32>,
    rng: EngineRng,
    step: usize,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let predictor = Predictor::new(&config.model, config.seed)?;
        let opt = Nadam::new(NadamConfig::default(), &predictor.params);
        let rng = EngineRng::seed_from_u64(config.seed.wrapping_add(0x5EED));
        Ok(Self { predictor, config, opt, rng, step: 0 })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One forward/backward/update on `batch` at learning rate `lr`.
    pub fn step(&mut self, batch: &SceneBatch, lr: f64, epoch: usize) -> Result<LossBreakdown> {
        let gt = batch
            .future
            .as_ref()
            .ok_or_else(|| Error::InvalidScene("training scenes need a ground-truth future".into()))?;
        let alpha = self.config.alpha;
        let mut cx = Ctx::train(&self.predictor.params, &mut self.rng);
        let f = self.predictor.net.forward(&mut cx, batch, MapLayout::Compact)?;
        let terms = objective(&mut cx, f.traj, f.probs, gt, alpha)?;
        let traj = cx.value(terms.traj).item()?.as_f64();
        let score = cx.value(terms.score).item()?.as_f64();
        if !traj.is_finite() || !score.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: self.step, traj, score });
        }
        let mut grads = cx.tape.backward(terms.total)?;
        let grads = cx.param_grads(&mut grads);
        drop(cx);

        let mut dense: Vec<Tensor<f32>> = grads
            .into_iter()
            .zip(self.predictor.params.iter())
            .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec())))
            .collect();
        clip_global_norm(&mut dense, self.config.clip_norm)?;
        let dense: Vec<Option<Tensor<f32>>> = dense.into_iter().map(Some).collect();
        self.opt.step(&mut self.predictor.params, &dense, lr)?;
        self.step += 1;
        Ok(LossBreakdown::new(traj, score, alpha))
    }
}

/// What a finished run leaves behind.
pub struct TrainOutcome {
    pub predictor: Predictor,
    pub log: Vec<StepLog>,
    pub epochs: Vec<EpochSummary>,
    /// Checkpoints written, in order; the last is the final model.
    pub checkpoints: Vec<PathBuf>,
}

/// Metrics CSV for a step log.
pub fn metrics_csv(log: &[StepLog]) -> String {
    let mut s = String::with_capacity(64 * (log.len() + 1));
    s.push_str(METRICS_HEADER);
    s.push('\n');
    for row in log {
        let _ = writeln!(s, "{}", row.csv_row());
    }
    s
}

/// Trains on `scenes` for `config.epochs` epochs (or until `max_steps`).
///
/// With `out_dir`, writes `metrics.csv`, a checkpoint every `save_every`
/// epochs and `final.mmtp`. `on_epoch` sees each epoch summary.
pub fn train(
    scenes: &[Scene],
    config: &RunConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<TrainOutcome> {
    if scenes.is_empty() {
        return Err(Error::Config("training needs at least one scene".into()));
    }
    let layout = config.model.layout();
    let mut trainer = Trainer::new(config.clone())?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let max_steps = config.max_steps.unwrap_or(usize::MAX);
    let mut log = Vec::new();
    let mut epochs = Vec::new();
    let mut checkpoints = Vec::new();
    'outer: for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let order = epoch_order(scenes.len(), config.seed, epoch);
        let first = log.len();
        for batch in batches(scenes, &order, config.batch_size, &layout) {
            if trainer.steps_taken() >= max_steps {
                break;
            }
            let loss = trainer.step(&batch?, lr, epoch)?;
            log.push(StepLog { epoch, step: trainer.steps_taken(), loss, lr });
        }
        let rows = &log[first..];
        if !rows.is_empty() {
            let n = rows.len() as f64;
            let summary = EpochSummary {
                epoch,
                steps: rows.len(),
                traj: rows.iter().map(|r| r.loss.traj).sum::<f64>() / n,
                score: rows.iter().map(|r| r.loss.score).sum::<f64>() / n,
                total: rows.iter().map(|r| r.loss.total).sum::<f64>() / n,
                lr,
            };
            on_epoch(&summary);
            epochs.push(summary);
        }
        if let Some(dir) = out_dir {
            if config.save_every > 0 && (epoch + 1) % config.save_every == 0 {
                let path = dir.join(format!("epoch_{:04}.mmtp", epoch + 1));
                checkpoint::save(&path, &trainer.predictor)?;
                checkpoints.push(path);
            }
        }
        if trainer.steps_taken() >= max_steps {
            break 'outer;
        }
    }
    if let Some(dir) = out_dir {
        fs::write(dir.join("metrics.csv"), metrics_csv(&log))?;
        let path = dir.join("final.mmtp");
        checkpoint::save(&path, &trainer.predictor)?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome { predictor: trainer.predictor, log, epochs, checkpoints })
}
