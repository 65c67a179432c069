//! Epoch loops of the training regimes, with resumable checkpoints.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    compose_tensor, encoder_kld, Adam, AdamConfig, LossBundle, LrSchedule, Regime, DEFAULT_ALPHA,
};
use crate::checkpoint::Checkpoint;
use crate::evaluate::evaluate;
use crate::labels::LabelMap;
use crate::model::{FrozenFrameFeatures, ModelConfig, MultiTaskModel, Tasks};
use crate::nn::{ensure_finite, Mode};
use crate::params::Group;
use crate::scenegraph::{sg_loss, SceneSample};
use crate::seghead::seg_loss;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub alpha: f64,
    /// Epochs of the joint regimes, or of stage A.
    pub epochs: usize,
    pub stage_b_epochs: usize,
    pub batch: usize,
    pub lr: LrSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Stop a stage after this many validations without improvement.
    pub patience: Option<usize>,
    /// Validate every this many epochs (0: only at the end of each stage).
    pub eval_every: usize,
    /// Write the resume checkpoint every this many epochs (0: only at stage
    /// boundaries).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::S,
            alpha: DEFAULT_ALPHA,
            epochs: 130,
            stage_b_epochs: 130,
            batch: 4,
            lr: LrSchedule::default(),
            adam: AdamConfig::default(),
            seed: 0,
            patience: None,
            eval_every: 0,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha {} is outside (0, 1)",
                self.alpha
            )));
        }
        if !(self.lr.base > 0.0 && self.lr.base.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.lr.base
            )));
        }
        if !(self.lr.decay > 0.0 && self.lr.decay <= 1.0) {
            return Err(Error::Config(format!(
                "learning-rate decay {} is outside (0, 1]",
                self.lr.decay
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(())
    }

    fn budget(&self, stage: Stage) -> usize {
        match stage {
            Stage::B => self.stage_b_epochs,
            Stage::Done => 0,
            _ => self.epochs,
        }
    }
}

/// Position within a regime's stage sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Single stage of the joint regimes.
    Joint,
    /// Encoder and segmentation head on the segmentation loss.
    A,
    /// Interaction head on frozen encoder and segmentation features.
    B,
    Done,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::Joint => 1,
            Stage::A => 2,
            Stage::B => 3,
            Stage::Done => 4,
        }
    }

    pub fn first(regime: Regime) -> Stage {
        if regime.is_joint() {
            Stage::Joint
        } else {
            Stage::A
        }
    }

    fn next(self, regime: Regime) -> Stage {
        match (self, regime) {
            (Stage::A, Regime::S) => Stage::B,
            _ => Stage::Done,
        }
    }

    fn allowed(self, regime: Regime) -> bool {
        match regime {
            Regime::V | Regime::KD => matches!(self, Stage::Joint | Stage::Done),
            Regime::S => matches!(self, Stage::A | Stage::B | Stage::Done),
            Regime::STL => matches!(self, Stage::A | Stage::Done),
        }
    }
}

/// Stage marker stored with checkpoints: the next epoch to run in `stage`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: Stage,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub l_seg: f64,
    pub l_sg: f64,
    pub miou: f64,
    pub p_acc: f64,
    pub acc: f64,
    pub map: f64,
    pub recall: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub lr: f64,
    pub l_seg: f64,
    pub l_sg: f64,
    pub l_kld: f64,
    pub total: f64,
    pub val: Option<ValMetrics>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub history: Vec<EpochLog>,
    pub progress: Progress,
    /// Hash of the encoder and segmentation groups entering and leaving
    /// stage B.
    pub freeze_hashes: Option<(String, String)>,
}

const SHUFFLE: u64 = 1;
const DROPOUT: u64 = 2;

fn stream_rng(seed: u64, stage: Stage, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stage.tag() << 48) | (purpose << 40) | epoch as u64);
    rng
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// A resumable training run of one model under one regime.
pub struct Session<'a> {
    model: &'a mut MultiTaskModel,
    config: TrainConfig,
    adam: Adam,
    progress: Progress,
    teacher: Option<&'a MultiTaskModel>,
    log_path: Option<PathBuf>,
    checkpoint_path: Option<PathBuf>,
    meta: BTreeMap<String, String>,
    history: Vec<EpochLog>,
    cache: Option<Vec<FrozenFrameFeatures>>,
    freeze_before: Option<String>,
    freeze_hashes: Option<(String, String)>,
    best: Option<(f64, usize)>,
}

impl<'a> Session<'a> {
    pub fn new(model: &'a mut MultiTaskModel, config: TrainConfig) -> Result<Self> {
        let progress = Progress {
            stage: Stage::first(config.regime),
            epoch: 0,
        };
        let adam = Adam::new(config.adam);
        Self::build(model, config, adam, progress)
    }

    fn build(
        model: &'a mut MultiTaskModel,
        config: TrainConfig,
        adam: Adam,
        progress: Progress,
    ) -> Result<Self> {
        config.validate()?;
        if model.config().sgfseg && !config.regime.is_joint() {
            return Err(Error::Config(
                "scene-graph feature injection needs a joint regime (V or KD)".into(),
            ));
        }
        let mut s = Self {
            model,
            config,
            adam,
            progress,
            teacher: None,
            log_path: None,
            checkpoint_path: None,
            meta: BTreeMap::new(),
            history: Vec::new(),
            cache: None,
            freeze_before: None,
            freeze_hashes: None,
            best: None,
        };
        s.apply_freeze();
        Ok(s)
    }

    /// Continues a run from a checkpoint written by [`Session`]. Parameters,
    /// optimizer state and the stage marker are restored.
    pub fn resume(
        model: &'a mut MultiTaskModel,
        config: TrainConfig,
        ck: &Checkpoint,
    ) -> Result<Self> {
        let progress: Progress = serde_json::from_str(
            ck.meta
                .get("progress")
                .ok_or_else(|| Error::Checkpoint("checkpoint has no stage marker".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("unreadable stage marker: {e}")))?;
        if let Some(prev) = ck.meta.get("train_config") {
            let prev: TrainConfig = serde_json::from_str(prev)?;
            if prev.regime != config.regime {
                return Err(Error::Checkpoint(format!(
                    "checkpoint was written by a {} run and cannot resume as {}",
                    prev.regime.name(),
                    config.regime.name()
                )));
            }
        }
        if !progress.stage.allowed(config.regime) || progress.epoch > config.budget(progress.stage)
        {
            return Err(Error::Checkpoint(format!(
                "inconsistent stage marker {:?} epoch {} for regime {}",
                progress.stage,
                progress.epoch,
                config.regime.name()
            )));
        }
        ck.restore_into(model.store(), None)?;
        let adam = Adam::load_from(ck, model.store())?;
        Self::build(model, config, adam, progress)
    }

    pub fn with_teacher(mut self, teacher: &'a MultiTaskModel) -> Self {
        self.teacher = Some(teacher);
        self
    }

    /// Appends one JSON line per epoch to `path`.
    pub fn with_log(mut self, path: &Path) -> Self {
        self.log_path = Some(path.to_path_buf());
        self
    }

    /// Keeps a resumable checkpoint at `path`.
    pub fn with_checkpoint(mut self, path: &Path) -> Self {
        self.checkpoint_path = Some(path.to_path_buf());
        self
    }

    /// Extra metadata stored in every checkpoint.
    pub fn with_meta(mut self, key: &str, value: String) -> Self {
        self.meta.insert(key.to_string(), value);
        self
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    pub fn history(&self) -> &[EpochLog] {
        &self.history
    }

    pub fn model(&self) -> &MultiTaskModel {
        self.model
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    fn apply_freeze(&mut self) {
        let frozen: &[Group] = match self.progress.stage {
            Stage::Joint => &[],
            Stage::A => &[Group::SceneGraph],
            Stage::B => &[Group::Shared, Group::Segmentation],
            Stage::Done => &Group::ALL,
        };
        let store = self.model.store_mut();
        for g in Group::ALL {
            store.set_frozen(g, frozen.contains(&g));
        }
    }

    /// Runs until the regime is complete.
    pub fn run(&mut self, data: &TrainData) -> Result<TrainSummary> {
        self.run_epochs(data, usize::MAX)
    }

    /// Runs at most `max_epochs` epochs (across stages), then returns.
    pub fn run_epochs(&mut self, data: &TrainData, max_epochs: usize) -> Result<TrainSummary> {
        if data.train.is_empty() {
            return Err(Error::data("no training frames"));
        }
        if self.config.regime == Regime::KD && self.teacher.is_none() {
            return Err(Error::Config("distillation needs a teacher model".into()));
        }
        let mut ran = 0;
        while self.progress.stage != Stage::Done && ran < max_epochs {
            let stage = self.progress.stage;
            if self.progress.epoch >= self.config.budget(stage) {
                self.finish_stage(data)?;
                continue;
            }
            if stage == Stage::B {
                self.enter_stage_b(data)?;
            }
            let epoch = self.progress.epoch;
            let bundle = match stage {
                Stage::B => self.stage_b_epoch(data, epoch)?,
                _ => self.full_epoch(data, epoch)?,
            };
            let last = epoch + 1 == self.config.budget(stage);
            let validate = !data.val.is_empty()
                && (last
                    || self.config.patience.is_some()
                    || (self.config.eval_every > 0
                        && (epoch + 1).is_multiple_of(self.config.eval_every)));
            let val = if validate {
                Some(self.validate(data)?)
            } else {
                None
            };
            let line = EpochLog {
                stage,
                epoch,
                lr: self.config.lr.at(epoch),
                l_seg: bundle.l_seg,
                l_sg: bundle.l_sg,
                l_kld: bundle.l_kld,
                total: bundle.total,
                val,
            };
            self.write_log(&line)?;
            let stop = self.patience_exhausted(&line)?;
            self.history.push(line);
            self.progress.epoch += 1;
            ran += 1;
            if stop {
                log::info!(
                    "stopping stage {stage:?} early after epoch {epoch}: validation loss stalled"
                );
                self.finish_stage(data)?;
            } else if self.progress.epoch >= self.config.budget(stage) {
                self.finish_stage(data)?;
            } else if self.config.checkpoint_every > 0
                && self
                    .progress
                    .epoch
                    .is_multiple_of(self.config.checkpoint_every)
            {
                self.save_resume()?;
            }
        }
        if self.progress.stage != Stage::Done {
            self.save_resume()?;
        }
        Ok(TrainSummary {
            history: self.history.clone(),
            progress: self.progress,
            freeze_hashes: self.freeze_hashes.clone(),
        })
    }

    fn finish_stage(&mut self, data: &TrainData) -> Result<()> {
        if self.progress.stage == Stage::B {
            self.enter_stage_b(data)?;
            let after = self.frozen_hash()?;
            let before = self.freeze_before.take().expect("set on entry");
            if before != after {
                return Err(Error::invalid(
                    "frozen encoder/segmentation parameters changed during stage B",
                ));
            }
            self.freeze_hashes = Some((before, after));
            self.cache = None;
        }
        self.progress = Progress {
            stage: self.progress.stage.next(self.config.regime),
            epoch: 0,
        };
        self.best = None;
        self.apply_freeze();
        self.save_resume()
    }

    fn frozen_hash(&self) -> Result<String> {
        self.model
            .store()
            .hash_groups(&[Group::Shared, Group::Segmentation])
    }

    fn enter_stage_b(&mut self, data: &TrainData) -> Result<()> {
        if self.freeze_before.is_none() {
            self.freeze_before = Some(self.frozen_hash()?);
        }
        if self.cache.is_none() {
            let feats = data
                .train
                .iter()
                .map(|s| self.model.frozen_features(&s.image, &s.annotation))
                .collect::<Result<Vec<_>>>()?;
            self.cache = Some(feats);
        }
        Ok(())
    }

    fn order(&self, n: usize, stage: Stage, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut stream_rng(self.config.seed, stage, epoch, SHUFFLE));
        idx
    }

    fn full_epoch(&mut self, data: &TrainData, epoch: usize) -> Result<LossBundle> {
        let stage = self.progress.stage;
        let regime = self.config.regime;
        let tasks = if stage == Stage::A {
            Tasks::SEGMENTATION
        } else {
            Tasks::BOTH
        };
        let lr = self.config.lr.at(epoch);
        let dropout_rng = RefCell::new(stream_rng(self.config.seed, stage, epoch, DROPOUT));
        let order = self.order(data.train.len(), stage, epoch);
        let mut sums = [0f64; 3];
        for chunk in order.chunks(self.config.batch) {
            let frames: Vec<&SceneSample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let images = Tensor::stack(
                &frames.iter().map(|s| s.image.clone()).collect::<Vec<_>>(),
                0,
            )?;
            let masks = frames
                .iter()
                .map(|s| {
                    s.mask
                        .as_ref()
                        .ok_or_else(|| Error::data(format!("{} has no mask", s.frame_id)))
                })
                .collect::<Result<Vec<&LabelMap>>>()?;
            let masks = LabelMap::stack(&masks)?;
            let anns: Vec<_> = frames.iter().map(|s| &s.annotation).collect();
            let out =
                self.model
                    .forward(&images, &anns, tasks, Mode::Train { rng: &dropout_rng })?;
            let l_seg = seg_loss(&out.seg.logits, &masks)?;
            let l_sg = if tasks.interactions {
                let targets: Vec<_> = frames
                    .iter()
                    .flat_map(|s| s.annotation.targets.iter().copied())
                    .collect();
                Some(sg_loss(&Tensor::cat(&out.interactions, 0)?, &targets)?)
            } else {
                None
            };
            let l_kld = match (regime, self.teacher) {
                (Regime::KD, Some(teacher)) => {
                    let t = teacher
                        .encoder()
                        .encode(&images.to_dtype(teacher.dtype())?, Mode::Eval)?
                        .c5
                        .detach();
                    Some(encoder_kld(&out.pyramid.c5, &t)?)
                }
                _ => None,
            };
            let total = compose_tensor(
                regime,
                stage,
                Some(&l_seg),
                l_sg.as_ref(),
                l_kld.as_ref(),
                self.config.alpha,
            )?;
            ensure_finite(&total, "training loss")?;
            let grads = total.backward()?;
            self.adam.step(self.model.store(), &grads, lr)?;
            let w = frames.len() as f64;
            sums[0] += w * scalar(&l_seg)?;
            sums[1] += w * l_sg.as_ref().map(scalar).transpose()?.unwrap_or(0.0);
            sums[2] += w * l_kld.as_ref().map(scalar).transpose()?.unwrap_or(0.0);
        }
        let n = data.train.len() as f64;
        LossBundle::compose(
            regime,
            stage,
            sums[0] / n,
            sums[1] / n,
            sums[2] / n,
            self.config.alpha,
        )
    }

    fn stage_b_epoch(&mut self, data: &TrainData, epoch: usize) -> Result<LossBundle> {
        let lr = self.config.lr.at(epoch);
        let order = self.order(data.train.len(), Stage::B, epoch);
        let cache = self.cache.as_ref().expect("built on entry");
        let mut sum = 0.0;
        for chunk in order.chunks(self.config.batch) {
            let mut logits = Vec::with_capacity(chunk.len());
            let mut targets = Vec::new();
            for &i in chunk {
                let s = &data.train[i];
                logits.push(self.model.interactions_from(&cache[i], &s.annotation)?);
                targets.extend(s.annotation.targets.iter().copied());
            }
            let l_sg = sg_loss(&Tensor::cat(&logits, 0)?, &targets)?;
            ensure_finite(&l_sg, "training loss")?;
            if !targets.is_empty() {
                let grads = l_sg.backward()?;
                self.adam.step(self.model.store(), &grads, lr)?;
            }
            sum += chunk.len() as f64 * scalar(&l_sg)?;
        }
        LossBundle::compose(
            self.config.regime,
            Stage::B,
            0.0,
            sum / data.train.len() as f64,
            0.0,
            self.config.alpha,
        )
    }

    fn validate(&self, data: &TrainData) -> Result<ValMetrics> {
        let (r, _) = evaluate(self.model, &data.val, self.config.batch, false)?;
        Ok(ValMetrics {
            l_seg: r.l_seg,
            l_sg: r.l_sg,
            miou: r.seg.miou,
            p_acc: r.seg.pixel_acc,
            acc: r.sg.acc,
            map: r.sg.map,
            recall: r.sg.recall,
        })
    }

    fn patience_exhausted(&mut self, line: &EpochLog) -> Result<bool> {
        let (Some(patience), Some(val)) = (self.config.patience, &line.val) else {
            return Ok(false);
        };
        let monitored = LossBundle::compose(
            self.config.regime,
            line.stage,
            val.l_seg,
            val.l_sg,
            0.0,
            self.config.alpha,
        )?
        .total;
        match self.best {
            Some((best, _)) if monitored >= best => {
                let (b, stale) = self.best.expect("matched");
                self.best = Some((b, stale + 1));
                Ok(stale + 1 >= patience)
            }
            _ => {
                self.best = Some((monitored, 0));
                Ok(false)
            }
        }
    }

    fn write_log(&self, line: &EpochLog) -> Result<()> {
        let Some(path) = &self.log_path else {
            return Ok(());
        };
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        writeln!(f, "{}", serde_json::to_string(line)?).map_err(|e| Error::io(path, e))
    }

    fn save_resume(&self) -> Result<()> {
        let Some(path) = &self.checkpoint_path else {
            return Ok(());
        };
        self.checkpoint().and_then(|ck| ck.save(path))
    }

    /// Full training state as a checkpoint.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = model_checkpoint(self.model)?;
        self.adam.save_into(&mut ck)?;
        ck.meta
            .insert("progress".into(), serde_json::to_string(&self.progress)?);
        ck.meta
            .insert("train_config".into(), serde_json::to_string(&self.config)?);
        for (k, v) in &self.meta {
            ck.meta.insert(k.clone(), v.clone());
        }
        Ok(ck)
    }
}

fn model_checkpoint(model: &MultiTaskModel) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.meta.insert(
        "model_config".into(),
        serde_json::to_string(model.config())?,
    );
    ck.push_store(model.store())?;
    Ok(ck)
}

/// Writes model parameters plus `meta` (no optimizer state).
pub fn save_checkpoint(
    path: &Path,
    model: &MultiTaskModel,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let mut ck = model_checkpoint(model)?;
    ck.meta
        .extend(meta.iter().map(|(k, v)| (k.clone(), v.clone())));
    ck.save(path)
}

/// Rebuilds a model from a checkpoint's stored architecture and restores its
/// parameters in `dtype`.
pub fn load_model(ck: &Checkpoint, dtype: DType) -> Result<MultiTaskModel> {
    let config: ModelConfig = serde_json::from_str(
        ck.meta
            .get("model_config")
            .ok_or_else(|| Error::Checkpoint("checkpoint has no model configuration".into()))?,
    )?;
    let model = MultiTaskModel::new(config, dtype)?;
    ck.restore_into(model.store(), None)?;
    Ok(model)
}
