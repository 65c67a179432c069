//! Segmentation decoders for the three global-reasoning variants, the
//! pixel-wise loss and confusion-matrix metrics.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::backbone::{FeaturePyramid, PYRAMID_CHANNELS};
use crate::glore::{GisfSource, GloReConfig, GloReOutput, GloReUnit, InjectionConfig, GISF_DIM};
use crate::kernels;
use crate::labels::{LabelMap, NUM_SEG_CLASSES};
use crate::nn::{dropout, ensure_finite, log_softmax, BatchNorm2d, Conv2d, Mode};
use crate::params::Init;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SegVariant {
    /// Global reasoning on the bottleneck only.
    GR,
    /// Global reasoning at every pyramid level.
    MSGR,
    /// Bottleneck global reasoning plus convolutional local reasoning at the
    /// finer levels.
    #[default]
    MSLRGR,
}

impl SegVariant {
    pub fn name(self) -> &'static str {
        match self {
            SegVariant::GR => "GR",
            SegVariant::MSGR => "MSGR",
            SegVariant::MSLRGR => "MSLRGR",
        }
    }
}

impl std::str::FromStr for SegVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "GR" => Ok(SegVariant::GR),
            "MSGR" => Ok(SegVariant::MSGR),
            "MSLRGR" => Ok(SegVariant::MSLRGR),
            _ => Err(Error::Config(format!(
                "unknown variant `{s}` (expected GR, MSGR or MSLRGR)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegHeadConfig {
    pub variant: SegVariant,
    pub classes: usize,
    pub decoder_width: usize,
    pub dropout: f64,
    pub nodes: usize,
    /// Latent width of the bottleneck unit; finer MSGR units use C/4.
    pub latent_c5: usize,
    pub gisf_source: GisfSource,
    pub injection: Option<InjectionConfig>,
}

impl Default for SegHeadConfig {
    fn default() -> Self {
        Self {
            variant: SegVariant::MSLRGR,
            classes: NUM_SEG_CLASSES,
            decoder_width: 64,
            dropout: 0.1,
            nodes: 16,
            latent_c5: 128,
            gisf_source: GisfSource::Reasoned,
            injection: None,
        }
    }
}

/// conv3×3-BN-ReLU, dropout, conv3×3.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
    p: f64,
    out: Conv2d,
}

impl DecoderBlock {
    pub fn new(init: &mut Init, c_in: usize, hidden: usize, c_out: usize, p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} is outside [0, 1)")));
        }
        Ok(Self {
            conv: Conv2d::new(&mut init.sub("conv"), c_in, hidden, 3, 1, 1, false)?,
            bn: BatchNorm2d::new(&mut init.sub("bn"), hidden)?,
            p,
            out: Conv2d::new(&mut init.sub("out"), hidden, c_out, 3, 1, 1, true)?,
        })
    }

    /// Returns the output and the hidden activation before dropout.
    fn forward_with_hidden(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let h = self.bn.forward(&self.conv.forward(x)?, mode)?.relu()?;
        let y = self.out.forward(&dropout(&h, self.p, mode)?)?;
        Ok((y, h))
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_with_hidden(x, mode)?.0)
    }
}

#[derive(Debug, Clone)]
struct LocalBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl LocalBlock {
    fn new(init: &mut Init, c: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut init.sub("conv"), c, c, 3, 1, 1, false)?,
            bn: BatchNorm2d::new(&mut init.sub("bn"), c)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, mode)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct SegOutput {
    /// B×K×H×W class scores at input resolution.
    pub logits: Tensor,
    /// B×64 interaction-space summaries of the bottleneck unit.
    pub gisf: Tensor,
    /// B×D spatially pooled penultimate decoder features.
    pub penultimate: Tensor,
    /// B×N×hw assignment of the bottleneck unit.
    pub assignment: Tensor,
}

#[derive(Debug, Clone)]
enum Head {
    Single {
        glore: GloReUnit,
        decoder: DecoderBlock,
    },
    Multi {
        /// GloRe units for levels c2..c4 (MSGR) or local blocks (MSLRGR).
        fine: Vec<Fine>,
        glore: GloReUnit,
        decoders: Vec<DecoderBlock>,
        fuse: Conv2d,
    },
}

#[derive(Debug, Clone)]
enum Fine {
    Global(GloReUnit),
    Local(LocalBlock),
}

#[derive(Debug, Clone)]
pub struct SegHead {
    config: SegHeadConfig,
    head: Head,
}

const LEVELS: [&str; 4] = ["c2", "c3", "c4", "c5"];

impl SegHead {
    /// Builds the head under the `seg.*` and `glore.*` namespaces of a
    /// root-level initializer.
    pub fn new(root: &mut Init, config: SegHeadConfig) -> Result<Self> {
        if config.classes < 2 {
            return Err(Error::Config(
                "segmentation needs at least two classes".into(),
            ));
        }
        let d = config.decoder_width;
        let unit = |init: &mut Init, level: usize, injection: Option<InjectionConfig>| {
            let c = PYRAMID_CHANNELS[level];
            let latent = if level == 3 {
                config.latent_c5
            } else {
                (c / 4).max(1)
            };
            let mut gc = GloReConfig::new(c, config.nodes, latent);
            gc.gisf_dim = GISF_DIM;
            gc.gisf_source = config.gisf_source;
            gc.injection = injection;
            GloReUnit::new(&mut init.sub(LEVELS[level]), gc)
        };
        let c5_unit = unit(&mut root.sub("glore"), 3, config.injection)?;
        let head = match config.variant {
            SegVariant::GR => Head::Single {
                glore: c5_unit,
                decoder: DecoderBlock::new(
                    &mut root.sub("seg.decoder.c5"),
                    PYRAMID_CHANNELS[3],
                    d,
                    config.classes,
                    config.dropout,
                )?,
            },
            SegVariant::MSGR | SegVariant::MSLRGR => {
                let mut fine = Vec::with_capacity(3);
                for level in 0..3 {
                    fine.push(match config.variant {
                        SegVariant::MSGR => {
                            Fine::Global(unit(&mut root.sub("glore"), level, None)?)
                        }
                        _ => Fine::Local(LocalBlock::new(
                            &mut root.sub(format!("seg.local.{}", LEVELS[level])),
                            PYRAMID_CHANNELS[level],
                        )?),
                    });
                }
                let mut decoders = Vec::with_capacity(4);
                for (level, &c) in PYRAMID_CHANNELS.iter().enumerate() {
                    decoders.push(DecoderBlock::new(
                        &mut root.sub(format!("seg.decoder.{}", LEVELS[level])),
                        c,
                        d,
                        d,
                        config.dropout,
                    )?);
                }
                let fuse =
                    Conv2d::new(&mut root.sub("seg.fuse"), d, config.classes, 3, 1, 1, true)?;
                Head::Multi {
                    fine,
                    glore: c5_unit,
                    decoders,
                    fuse,
                }
            }
        };
        Ok(Self { config, head })
    }

    pub fn config(&self) -> &SegHeadConfig {
        &self.config
    }

    pub fn variant(&self) -> SegVariant {
        self.config.variant
    }

    /// Width of [`SegOutput::penultimate`].
    pub fn penultimate_width(&self) -> usize {
        self.config.decoder_width
    }

    /// The bottleneck global reasoning unit (source of the interaction-space
    /// feature and target of scene-graph injection).
    pub fn bottleneck(&self) -> &GloReUnit {
        match &self.head {
            Head::Single { glore, .. } | Head::Multi { glore, .. } => glore,
        }
    }

    /// Every global reasoning unit, finest first.
    pub fn glore_units(&self) -> Vec<&GloReUnit> {
        match &self.head {
            Head::Single { glore, .. } => vec![glore],
            Head::Multi { fine, glore, .. } => fine
                .iter()
                .filter_map(|f| match f {
                    Fine::Global(u) => Some(u),
                    Fine::Local(_) => None,
                })
                .chain(std::iter::once(glore))
                .collect(),
        }
    }

    /// Segments an image batch of size `out_hw` from its pyramid.
    pub fn segment(
        &self,
        pyramid: &FeaturePyramid,
        out_hw: (usize, usize),
        injection: Option<&Tensor>,
        mode: Mode,
    ) -> Result<SegOutput> {
        self.run(pyramid, out_hw, injection, mode, true)
    }

    /// Same pipeline with every global reasoning unit bypassed.
    pub fn segment_without_global(
        &self,
        pyramid: &FeaturePyramid,
        out_hw: (usize, usize),
        mode: Mode,
    ) -> Result<Tensor> {
        Ok(self.run(pyramid, out_hw, None, mode, false)?.logits)
    }

    fn run(
        &self,
        pyramid: &FeaturePyramid,
        (h, w): (usize, usize),
        injection: Option<&Tensor>,
        mode: Mode,
        global: bool,
    ) -> Result<SegOutput> {
        let levels = pyramid.levels();
        for (level, t) in levels.iter().enumerate() {
            let c = t.dims4()?.1;
            if c != PYRAMID_CHANNELS[level] {
                return Err(Error::Shape(format!(
                    "pyramid level {} has {c} channels, expected {}",
                    LEVELS[level], PYRAMID_CHANNELS[level]
                )));
            }
        }
        let reason =
            |unit: &GloReUnit, x: &Tensor, inj: Option<&Tensor>| -> Result<Option<GloReOutput>> {
                if global {
                    unit.forward(x, inj).map(Some)
                } else {
                    Ok(None)
                }
            };
        let c5 = reason(self.bottleneck(), &pyramid.c5, injection)?;
        let c5_features = c5.as_ref().map_or(&pyramid.c5, |o| &o.y);
        let (logits, penultimate) = match &self.head {
            Head::Single { decoder, .. } => {
                let (y, hidden) = decoder.forward_with_hidden(c5_features, mode)?;
                (kernels::resize_bilinear(&y, h, w)?, spatial_mean(&hidden)?)
            }
            Head::Multi {
                fine,
                decoders,
                fuse,
                ..
            } => {
                let (th, tw) = (pyramid.c2.dim(2)?, pyramid.c2.dim(3)?);
                let mut sum: Option<Tensor> = None;
                for level in 0..4 {
                    let x = if level == 3 {
                        c5_features.clone()
                    } else {
                        match &fine[level] {
                            Fine::Global(u) => match reason(u, levels[level], None)? {
                                Some(o) => o.y,
                                None => levels[level].clone(),
                            },
                            Fine::Local(b) => b.forward(levels[level], mode)?,
                        }
                    };
                    let y = kernels::resize_bilinear(&decoders[level].forward(&x, mode)?, th, tw)?;
                    sum = Some(match sum {
                        None => y,
                        Some(s) => (s + y)?,
                    });
                }
                let agg = sum.expect("four levels");
                let logits = kernels::resize_bilinear(&fuse.forward(&agg)?, h, w)?;
                (logits, spatial_mean(&agg)?)
            }
        };
        ensure_finite(&logits, "segmentation logits")?;
        let b = pyramid.c5.dim(0)?;
        let (gisf, assignment) = match c5 {
            Some(o) => (o.gisf, o.assignment),
            None => {
                let dt = logits.dtype();
                (
                    Tensor::zeros((b, GISF_DIM), dt, logits.device())?,
                    Tensor::zeros((b, self.config.nodes, 0), dt, logits.device())?,
                )
            }
        };
        Ok(SegOutput {
            logits,
            gisf,
            penultimate,
            assignment,
        })
    }
}

fn spatial_mean(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.mean(D::Minus1)?)
}

/// Mean per-pixel categorical cross-entropy of B×K×H×W logits.
pub fn seg_loss(logits: &Tensor, mask: &LabelMap) -> Result<Tensor> {
    let (b, k, h, w) = logits.dims4()?;
    if mask.dims() != (b, h, w) {
        return Err(Error::Shape(format!(
            "logits {:?} do not match mask {}×{}×{}",
            logits.dims(),
            mask.batch,
            mask.height,
            mask.width
        )));
    }
    let target = mask.one_hot(k, logits.dtype())?;
    let ll = (log_softmax(logits, 1)? * target)?.sum_all()?;
    Ok((ll.neg()? / (b * h * w) as f64)?)
}

/// Dataset-level K×K confusion counts, rows indexed by ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::Shape(format!(
                "prediction {:?} and ground truth {:?} differ in shape",
                pred.dims(),
                gt.dims()
            )));
        }
        pred.check_range(self.classes)?;
        gt.check_range(self.classes)?;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn metrics(&self) -> SegMetrics {
        let k = self.classes;
        let total: u64 = self.counts.iter().sum();
        let correct: u64 = (0..k).map(|c| self.count(c, c)).sum();
        let mut per_class_iou = vec![0.0; k];
        let mut present = vec![false; k];
        for c in 0..k {
            let tp = self.count(c, c);
            let gt: u64 = (0..k).map(|p| self.count(c, p)).sum();
            let pr: u64 = (0..k).map(|g| self.count(g, c)).sum();
            let union = gt + pr - tp;
            if union > 0 {
                present[c] = true;
                per_class_iou[c] = tp as f64 / union as f64;
            }
        }
        let n_present = present.iter().filter(|&&p| p).count();
        let miou = if n_present == 0 {
            0.0
        } else {
            per_class_iou
                .iter()
                .zip(&present)
                .filter(|(_, &p)| p)
                .map(|(v, _)| v)
                .sum::<f64>()
                / n_present as f64
        };
        SegMetrics {
            miou,
            miou_all_classes: per_class_iou.iter().sum::<f64>() / k as f64,
            per_class_iou,
            present,
            pixel_acc: if total == 0 {
                0.0
            } else {
                correct as f64 / total as f64
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    /// Mean IoU over classes occurring in ground truth or prediction.
    pub miou: f64,
    /// Mean IoU over all classes, absent classes counting as zero.
    pub miou_all_classes: f64,
    /// IoU per class; zero when the class never occurs.
    pub per_class_iou: Vec<f64>,
    pub present: Vec<bool>,
    pub pixel_acc: f64,
}

pub fn seg_metrics(pred: &LabelMap, gt: &LabelMap) -> Result<SegMetrics> {
    let mut cm = ConfusionMatrix::new(NUM_SEG_CLASSES);
    cm.add(pred, gt)?;
    Ok(cm.metrics())
}
