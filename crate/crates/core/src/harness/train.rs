//! Training loop: sample a class, sample a set from it, minimise the
//! weighted objective, log every step.

use std::io::Write;
use std::path::PathBuf;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint;
use super::config::ExperimentConfig;
use super::data::load_manifest;
use super::model::{build_clip, LccoModel};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::nn::Optimizer;
use crate::types::ImageSet;

/// Offsets the sampling stream from the weight-initialisation stream.
const SAMPLER_STREAM: u64 = 0x5341_4d50;

pub const LOSS_LOG_HEADER: &str = "step\tl_iou\tl_cs\tl_c\tl_total";

pub fn loss_log_line(step: usize, r: &LossReport) -> String {
    format!("{step}\t{}\t{}\t{}\t{}", r.l_iou, r.l_cs, r.l_c, r.l_total)
}

pub struct Trainer {
    model: LccoModel,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(model: LccoModel) -> Self {
        let cfg = &model.config().train;
        let optimizer = Optimizer::new(cfg.optimizer);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SAMPLER_STREAM);
        Self {
            model,
            optimizer,
            rng,
            step: 0,
        }
    }

    pub fn model(&self) -> &LccoModel {
        &self.model
    }

    pub fn into_model(self) -> LccoModel {
        self.model
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// A class uniformly at random, then up to `set_size_train` of its
    /// images without replacement.
    pub fn sample(&mut self, classes: &[ImageSet]) -> Result<ImageSet> {
        if classes.is_empty() {
            return Err(Error::Data("no training sets".into()));
        }
        let class = &classes[self.rng.random_range(0..classes.len())];
        let n = self.model.config().train.set_size_train.min(class.len());
        let picks = index::sample(&mut self.rng, class.len(), n).into_vec();
        Ok(class.permuted(&picks))
    }

    /// One optimisation step on `set`; the report holds the loss before the
    /// update.
    pub fn step_on(&mut self, set: &ImageSet) -> Result<LossReport> {
        let out = self.model.forward_set(set)?;
        let (total, report) = self.model.loss(set, &out)?;
        let grads = total.backward()?;
        self.optimizer.step(self.model.params(), &grads);
        self.step += 1;
        Ok(report)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub reports: Vec<LossReport>,
    pub clip_checksum: String,
}

/// Trains on `cfg.train_manifest`, writing `loss_log.tsv`, optional
/// `checkpoint_<step>.lcco` files and the final `model.lcco` under
/// `cfg.output_dir`.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = cfg
        .train_manifest
        .as_ref()
        .ok_or_else(|| Error::Config("train_manifest is not set".into()))?;
    let size = (cfg.model.resolution, cfg.model.resolution);
    let sets = load_manifest(manifest, size, true)?;
    let clip = build_clip(&cfg.clip)?;
    let checksum_before = clip.parameter_checksum()?;
    let mut trainer = Trainer::new(LccoModel::new(cfg.clone(), clip.clone())?);

    let out_dir = &cfg.output_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("loss_log.tsv");
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "{LOSS_LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;

    let mut reports = Vec::with_capacity(cfg.train.steps);
    for step in 0..cfg.train.steps {
        let set = trainer.sample(&sets)?;
        let report = trainer.step_on(&set)?;
        writeln!(log, "{}", loss_log_line(step, &report)).map_err(|e| Error::io(&log_path, e))?;
        reports.push(report);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.train.steps {
            let path = out_dir.join(format!("checkpoint_{}.lcco", step + 1));
            checkpoint::save(&path, cfg, step + 1, trainer.model().params())?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let final_path = out_dir.join("model.lcco");
    checkpoint::save(&final_path, cfg, trainer.steps_done(), trainer.model().params())?;
    let checksum_after = clip.parameter_checksum()?;
    if checksum_after != checksum_before {
        return Err(Error::Data("CLIP parameters changed during training".into()));
    }
    Ok(TrainOutcome {
        checkpoint: final_path,
        loss_log: log_path,
        reports,
        clip_checksum: checksum_after,
    })
}
