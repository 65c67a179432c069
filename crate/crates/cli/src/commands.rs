//! The subcommands, callable without going through argument parsing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use glore_mtl::backbone::load_encoder_weights;
use glore_mtl::checkpoint::Checkpoint;
use glore_mtl::datakit::{
    load_dataset, read_annotation, read_frame, read_rgb, resize_image, synth_generate, to_sample,
    to_tensor, write_dataset, ChannelStats, RawFrame, ResolutionPolicy, SplitSpec, Subset,
    SynthConfig, SOURCE_RESOLUTION,
};
use glore_mtl::evaluate::{evaluate, EdgePrediction, FramePrediction, MetricsRecord};
use glore_mtl::export::{export_frame, ExportedFrame};
use glore_mtl::gradcheck::Fault;
use glore_mtl::labels::{argmax_labels, LabelMap};
use glore_mtl::model::{MultiTaskModel, Tasks};
use glore_mtl::mtlopt::{load_model, save_checkpoint, Regime, Session, TrainData, TrainSummary};
use glore_mtl::nn::Mode;
use glore_mtl::precision::Precision;
use glore_mtl::scenegraph::{score_rows, sigmoid, SceneSample};
use glore_mtl::selftest::{run_all, SuiteResult};
use glore_mtl::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{Normalization, RunConfig};

pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const RESUME_FILE: &str = "checkpoint.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Preprocessing facts a checkpoint carries so evaluation and inference
/// reproduce training inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub height: usize,
    pub width: usize,
    pub stats: ChannelStats,
}

const INPUT_META: &str = "input";

impl InputSpec {
    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let s = ck.meta.get(INPUT_META).ok_or_else(|| {
            Error::Checkpoint("checkpoint does not record its input preprocessing".into())
        })?;
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub regime: String,
    pub epochs_run: usize,
    pub stage_reached: String,
    pub freeze_hashes: Option<(String, String)>,
    pub metrics_split: String,
    pub seconds: f64,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn policy(cfg: &RunConfig) -> ResolutionPolicy {
    if cfg.strict_resolution {
        ResolutionPolicy::Strict(SOURCE_RESOLUTION.0, SOURCE_RESOLUTION.1)
    } else {
        ResolutionPolicy::Lenient
    }
}

fn read_frames(
    root: &Path,
    split: &SplitSpec,
    subset: Subset,
    target: (usize, usize),
    policy: ResolutionPolicy,
) -> Result<Vec<RawFrame>> {
    load_dataset(root, split, subset)?
        .iter()
        .map(|r| read_frame(r, target, policy))
        .collect()
}

fn samples(frames: &[RawFrame], stats: &ChannelStats, dtype: DType) -> Result<Vec<SceneSample>> {
    frames.iter().map(|f| to_sample(f, stats, dtype)).collect()
}

/// Trains under `cfg` and returns the run directory.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let start = Instant::now();
    let root = cfg
        .data
        .clone()
        .ok_or_else(|| Error::Config("no dataset given (--data or `data = ...`)".into()))?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("no output directory given (--out or `out = ...`)".into()))?;
    create_dir(&out)?;
    cfg.precision.apply();
    let dtype = cfg.precision.dtype();
    write_file(&out.join(CONFIG_FILE), &cfg.to_text())?;

    let target = (cfg.height, cfg.width);
    let train_frames = read_frames(&root, &cfg.split, Subset::Train, target, policy(cfg))?;
    if train_frames.is_empty() {
        return Err(Error::Data(format!(
            "no training frames under {} for sequences {:?}",
            root.display(),
            cfg.split.train
        )));
    }
    let val_frames = read_frames(&root, &cfg.split, Subset::Test, target, policy(cfg))?;
    let stats = match cfg.normalization {
        Normalization::Dataset => ChannelStats::estimate(train_frames.iter().map(|f| &f.image))?,
        Normalization::Imagenet => ChannelStats::default(),
    };
    let data = TrainData {
        train: samples(&train_frames, &stats, dtype)?,
        val: samples(&val_frames, &stats, dtype)?,
    };
    log::info!(
        "{} training and {} validation frames",
        data.train.len(),
        data.val.len()
    );
    let input = InputSpec {
        height: cfg.height,
        width: cfg.width,
        stats,
    };

    let teacher = match cfg.train.regime {
        Regime::KD => Some(match &cfg.teacher {
            Some(p) => load_model(&Checkpoint::load(p)?, dtype)?,
            None => train_teacher(cfg, &data, &input, &out.join("teacher"))?,
        }),
        _ => None,
    };

    let resume_ck = resume
        .map(|p| {
            if p.is_dir() {
                Checkpoint::load(&p.join(RESUME_FILE))
            } else {
                Checkpoint::load(p)
            }
        })
        .transpose()?;
    let mut model = match &resume_ck {
        Some(ck) => {
            let m = load_model(ck, dtype)?;
            if m.config() != &cfg.model {
                return Err(Error::Checkpoint(
                    "checkpoint architecture differs from the configured model".into(),
                ));
            }
            m
        }
        None => {
            let m = MultiTaskModel::new(cfg.model.clone(), dtype)?;
            if let Some(w) = &cfg.encoder_weights {
                load_encoder_weights(m.store(), w, cfg.allow_random_encoder)?;
            }
            m
        }
    };
    let log_path = out.join(LOG_FILE);
    if resume_ck.is_none() && log_path.exists() {
        fs::remove_file(&log_path).map_err(|e| Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
    }
    let meta = run_meta(cfg, &input)?;
    let summary = {
        let session = match &resume_ck {
            Some(ck) => Session::resume(&mut model, cfg.train.clone(), ck)?,
            None => Session::new(&mut model, cfg.train.clone())?,
        };
        let mut session = session
            .with_log(&log_path)
            .with_checkpoint(&out.join(RESUME_FILE));
        for (k, v) in &meta {
            session = session.with_meta(k, v.clone());
        }
        if let Some(t) = &teacher {
            session = session.with_teacher(t);
        }
        session.run(&data)?
    };
    save_checkpoint(&out.join(MODEL_FILE), &model, &meta)?;

    let (split, eval_set) = if data.val.is_empty() {
        ("train", &data.train)
    } else {
        ("test", &data.val)
    };
    let (report, _) = evaluate(&model, eval_set, cfg.train.batch, false)?;
    write_file(
        &out.join(METRICS_FILE),
        &(serde_json::to_string_pretty(&report.record())? + "\n"),
    )?;
    write_summary(&out, cfg, &summary, split, start)?;
    Ok(out)
}

fn run_meta(cfg: &RunConfig, input: &InputSpec) -> Result<BTreeMap<String, String>> {
    let mut meta = BTreeMap::new();
    meta.insert(INPUT_META.to_string(), serde_json::to_string(input)?);
    meta.insert("precision".to_string(), cfg.precision.name().to_string());
    meta.insert("run_config".to_string(), cfg.to_text());
    Ok(meta)
}

fn write_summary(
    out: &Path,
    cfg: &RunConfig,
    s: &TrainSummary,
    split: &str,
    start: Instant,
) -> Result<()> {
    let summary = RunSummary {
        regime: cfg.train.regime.name().into(),
        epochs_run: s.history.len(),
        stage_reached: format!("{:?}", s.progress.stage),
        freeze_hashes: s.freeze_hashes.clone(),
        metrics_split: split.into(),
        seconds: start.elapsed().as_secs_f64(),
    };
    write_file(
        &out.join(SUMMARY_FILE),
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )
}

/// Trains the single-task segmentation teacher for distillation.
fn train_teacher(
    cfg: &RunConfig,
    data: &TrainData,
    input: &InputSpec,
    dir: &Path,
) -> Result<MultiTaskModel> {
    log::info!("training the single-task teacher in {}", dir.display());
    create_dir(dir)?;
    let mut tcfg = cfg.clone();
    tcfg.train.regime = Regime::STL;
    tcfg.model.sgfseg = false;
    tcfg.out = Some(dir.to_path_buf());
    write_file(&dir.join(CONFIG_FILE), &tcfg.to_text())?;
    let mut model = MultiTaskModel::new(tcfg.model.clone(), cfg.precision.dtype())?;
    if let Some(w) = &cfg.encoder_weights {
        load_encoder_weights(model.store(), w, cfg.allow_random_encoder)?;
    }
    let log = dir.join(LOG_FILE);
    let _ = fs::remove_file(&log);
    Session::new(&mut model, tcfg.train.clone())?
        .with_log(&log)
        .with_checkpoint(&dir.join(RESUME_FILE))
        .run(data)?;
    save_checkpoint(&dir.join(MODEL_FILE), &model, &run_meta(&tcfg, input)?)?;
    Ok(model)
}

fn open_model(checkpoint: &Path, precision: Precision) -> Result<(MultiTaskModel, InputSpec)> {
    precision.apply();
    let ck = Checkpoint::load(checkpoint)?;
    let input = InputSpec::from_checkpoint(&ck)?;
    Ok((load_model(&ck, precision.dtype())?, input))
}

/// Dataset-level metrics of a checkpoint on one subset of a split.
pub fn eval(
    checkpoint: &Path,
    data: &Path,
    split: &SplitSpec,
    subset: Subset,
    batch: usize,
    precision: Precision,
    predictions: Option<&Path>,
) -> Result<MetricsRecord> {
    let (model, input) = open_model(checkpoint, precision)?;
    let frames = read_frames(
        data,
        split,
        subset,
        (input.height, input.width),
        ResolutionPolicy::Lenient,
    )?;
    if frames.is_empty() {
        return Err(Error::Data(format!(
            "no frames of the requested subset under {}",
            data.display()
        )));
    }
    let set = samples(&frames, &input.stats, precision.dtype())?;
    let (report, preds) = evaluate(&model, &set, batch, predictions.is_some())?;
    if let Some(dir) = predictions {
        for (p, f) in preds.iter().zip(&frames) {
            export_frame(dir, &p.frame_id.replace('/', "_"), p, Some(&f.image))?;
        }
    }
    Ok(report.record())
}

/// Predicts one frame and writes its label map, prediction record and
/// overlay at the image's own resolution.
pub fn infer(
    checkpoint: &Path,
    image: &Path,
    annotation: &Path,
    out: &Path,
    precision: Precision,
) -> Result<ExportedFrame> {
    let (model, input) = open_model(checkpoint, precision)?;
    let img = read_rgb(image)?;
    let ann = read_annotation(annotation)?;
    ann.validate()?;
    let small = resize_image(&img, input.height, input.width);
    let x = to_tensor(&small, &input.stats)?.to_dtype(precision.dtype())?;
    let fwd = model.forward(&x.unsqueeze(0)?, &[&ann], Tasks::BOTH, Mode::Eval)?;
    let labels = argmax_labels(&fwd.seg.logits)?;
    let rows = score_rows(&sigmoid(&fwd.interactions[0])?)?;
    let stem = image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("frame")
        .to_string();
    let pred = FramePrediction {
        frame_id: stem.clone(),
        labels: LabelMap::new(1, input.height, input.width, labels.plane(0).to_vec())?,
        edges: ann
            .instruments()
            .into_iter()
            .zip(rows)
            .map(|(instrument_id, class_scores)| EdgePrediction {
                instrument_id,
                class_scores,
            })
            .collect(),
    };
    export_frame(out, &stem, &pred, Some(&img))
}

/// Writes a synthetic dataset and returns the number of frames.
pub fn synth(cfg: &SynthConfig, out: &Path) -> Result<usize> {
    let frames = synth_generate(cfg)?;
    write_dataset(out, &frames)?;
    Ok(frames.len())
}

pub fn selftest(fault: Option<&Fault>) -> Result<Vec<SuiteResult>> {
    Precision::Fixed.apply();
    run_all(fault)
}
