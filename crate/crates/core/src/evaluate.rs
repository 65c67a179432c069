//! Batched inference and dataset-level metrics.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::labels::{argmax_labels, LabelMap, NUM_INTERACTIONS, NUM_SEG_CLASSES};
use crate::model::{MultiTaskModel, Tasks};
use crate::nn::Mode;
use crate::scenegraph::{score_rows, sg_loss, sg_metrics, sigmoid, SceneSample, SgMetrics};
use crate::seghead::{seg_loss, ConfusionMatrix, SegMetrics};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgePrediction {
    pub instrument_id: usize,
    pub class_scores: [f64; NUM_INTERACTIONS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePrediction {
    pub frame_id: String,
    /// 1×H×W argmax labels.
    pub labels: LabelMap,
    pub edges: Vec<EdgePrediction>,
}

/// Serialized form of a frame's interaction predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub frame_id: String,
    pub edges: Vec<EdgePrediction>,
}

impl FramePrediction {
    pub fn record(&self) -> PredictionRecord {
        PredictionRecord {
            frame_id: self.frame_id.clone(),
            edges: self.edges.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seg: SegMetrics,
    pub sg: SgMetrics,
    /// Frame-weighted mean segmentation loss.
    pub l_seg: f64,
    /// Edge-weighted mean interaction loss.
    pub l_sg: f64,
    pub frames: usize,
}

/// Flat metrics record written by evaluation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub miou: f64,
    pub miou_all_classes: f64,
    pub per_class_iou: Vec<f64>,
    pub p_acc: f64,
    pub acc: f64,
    pub map: f64,
    pub recall: f64,
    pub exact_match: f64,
    pub frames: usize,
    pub edges: usize,
}

impl EvalReport {
    pub fn record(&self) -> MetricsRecord {
        MetricsRecord {
            miou: self.seg.miou,
            miou_all_classes: self.seg.miou_all_classes,
            per_class_iou: self.seg.per_class_iou.clone(),
            p_acc: self.seg.pixel_acc,
            acc: self.sg.acc,
            map: self.sg.map,
            recall: self.sg.recall,
            exact_match: self.sg.exact_match,
            frames: self.frames,
            edges: self.sg.edges,
        }
    }
}

/// Runs the model in evaluation mode over `samples` in batches, returning
/// dataset-level metrics and optionally every frame's prediction.
pub fn evaluate(
    model: &MultiTaskModel,
    samples: &[SceneSample],
    batch: usize,
    keep_predictions: bool,
) -> Result<(EvalReport, Vec<FramePrediction>)> {
    if samples.is_empty() {
        return Err(Error::data("nothing to evaluate"));
    }
    let mut cm = ConfusionMatrix::new(NUM_SEG_CLASSES);
    let mut scores = Vec::new();
    let mut targets = Vec::new();
    let mut preds = Vec::new();
    let (mut seg_sum, mut sg_sum) = (0.0, 0.0);
    for chunk in samples.chunks(batch.max(1)) {
        let images = Tensor::stack(
            &chunk.iter().map(|s| s.image.clone()).collect::<Vec<_>>(),
            0,
        )?;
        let anns: Vec<_> = chunk.iter().map(|s| &s.annotation).collect();
        let out = model.forward(&images, &anns, Tasks::BOTH, Mode::Eval)?;
        let labels = argmax_labels(&out.seg.logits)?;
        let (_, h, w) = labels.dims();
        for (i, s) in chunk.iter().enumerate() {
            let pred = LabelMap::new(1, h, w, labels.plane(i).to_vec())?;
            if let Some(gt) = &s.mask {
                cm.add(&pred, gt)?;
                seg_sum += seg_loss(&out.seg.logits.narrow(0, i, 1)?, gt)?
                    .to_dtype(candle_core::DType::F64)?
                    .to_scalar::<f64>()?;
            }
            let logits = &out.interactions[i];
            let e = logits.dim(0)?;
            if e > 0 {
                sg_sum += sg_loss(logits, &s.annotation.targets)?
                    .to_dtype(candle_core::DType::F64)?
                    .to_scalar::<f64>()?
                    * e as f64;
            }
            let rows = score_rows(&sigmoid(logits)?)?;
            scores.extend(rows.iter().copied());
            targets.extend(s.annotation.targets.iter().copied());
            if keep_predictions {
                preds.push(FramePrediction {
                    frame_id: s.frame_id.clone(),
                    labels: pred,
                    edges: s
                        .annotation
                        .instruments()
                        .into_iter()
                        .zip(rows)
                        .map(|(instrument_id, class_scores)| EdgePrediction {
                            instrument_id,
                            class_scores,
                        })
                        .collect(),
                });
            }
        }
    }
    let with_masks = samples.iter().filter(|s| s.mask.is_some()).count();
    let report = EvalReport {
        seg: cm.metrics(),
        sg: sg_metrics(&scores, &targets)?,
        l_seg: if with_masks == 0 {
            0.0
        } else {
            seg_sum / with_masks as f64
        },
        l_sg: if targets.is_empty() {
            0.0
        } else {
            sg_sum / targets.len() as f64
        },
        frames: samples.len(),
    };
    Ok((report, preds))
}
