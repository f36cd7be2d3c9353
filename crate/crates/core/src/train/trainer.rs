//! Epoch loop with shuffled mini-batches, learning-rate decay and a CSV log.

use std::fs::File;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{Adam, DEFAULT_LR, LR_DECAY};
use super::network::{LocalizationMap, MaskNetwork};
use super::step::{train_step, TrainItem, TrainOptions};
use crate::error::{Error, Result};
use crate::spatial::SteeringTemplate;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub options: TrainOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            batch_size: 8,
            seed: 0,
            options: TrainOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    pub epoch: u32,
    /// Mean of the batch losses seen during the epoch.
    pub mean_loss: f64,
    /// Learning rate after the end-of-epoch schedule.
    pub lr: f64,
    pub steps: usize,
    pub skipped: usize,
}

pub struct Trainer<G, H> {
    pub net: G,
    pub map: H,
    pub optimizer: Adam,
    pub config: TrainConfig,
    pub epoch: u32,
    step: u64,
    last_loss: Option<f64>,
    log: Option<(csv::Writer<File>, PathBuf)>,
}

impl<G: MaskNetwork, H: LocalizationMap> Trainer<G, H> {
    pub fn new(net: G, map: H, config: TrainConfig) -> Self {
        let n = net.params().len() + map.params().len();
        Self {
            net,
            map,
            optimizer: Adam::new(n, config.lr),
            config,
            epoch: 0,
            step: 0,
            last_loss: None,
            log: None,
        }
    }

    /// Resumes from a saved optimizer state and epoch counter.
    pub fn resume(net: G, map: H, optimizer: Adam, epoch: u32, config: TrainConfig) -> Result<Self> {
        let n = net.params().len() + map.params().len();
        if optimizer.m.len() != n {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} entries, networks have {n} parameters",
                optimizer.m.len()
            )));
        }
        Ok(Self {
            step: optimizer.step,
            net,
            map,
            optimizer,
            config,
            epoch,
            last_loss: None,
            log: None,
        })
    }

    /// Writes one row per step: epoch, step, loss, lr, gradnorm.
    pub fn log_to(&mut self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["epoch", "step", "loss", "lr", "gradnorm"])
            .map_err(|e| csv_error(path, e))?;
        self.log = Some((w, path.to_path_buf()));
        Ok(())
    }

    pub fn run_epoch(&mut self, items: &[TrainItem], tpl: &SteeringTemplate) -> Result<EpochReport> {
        if items.is_empty() {
            return Err(Error::InvalidConfig("training corpus is empty".into()));
        }
        let batch = self.config.batch_size.max(1);
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(self.epoch as u64));
        order.shuffle(&mut rng);
        let (mut total, mut steps, mut skipped) = (0.0, 0, 0);
        for chunk in order.chunks(batch) {
            let refs: Vec<&TrainItem> = chunk.iter().map(|&i| &items[i]).collect();
            let lr = self.optimizer.lr;
            let rep = train_step(
                &refs,
                &mut self.net,
                &mut self.map,
                tpl,
                &mut self.optimizer,
                &self.config.options,
            )?;
            self.step += 1;
            steps += 1;
            if rep.skipped {
                skipped += 1;
            } else {
                total += rep.loss;
            }
            if let Some((w, path)) = self.log.as_mut() {
                w.write_record([
                    self.epoch.to_string(),
                    self.step.to_string(),
                    rep.loss.to_string(),
                    lr.to_string(),
                    rep.grad_norm.to_string(),
                ])
                .map_err(|e| csv_error(path, e))?;
            }
        }
        if let Some((w, path)) = self.log.as_mut() {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        let counted = steps - skipped;
        let mean_loss = if counted > 0 {
            total / counted as f64
        } else {
            f64::NAN
        };
        let lr = scheduled_lr(self.last_loss, mean_loss, self.optimizer.lr);
        if lr != self.optimizer.lr {
            self.optimizer.lr = lr;
            log::info!("epoch loss rose; learning rate now {lr:e}");
        }
        if mean_loss.is_finite() {
            self.last_loss = Some(mean_loss);
        }
        let report = EpochReport {
            epoch: self.epoch,
            mean_loss,
            lr: self.optimizer.lr,
            steps,
            skipped,
        };
        self.epoch += 1;
        Ok(report)
    }
}

/// Learning rate for the next epoch: decayed by `LR_DECAY` when the epoch
/// loss went up.
pub fn scheduled_lr(previous: Option<f64>, current: f64, lr: f64) -> f64 {
    match previous {
        Some(prev) if current > prev => lr * LR_DECAY,
        _ => lr,
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}
