//! Shared residual feature encoder (18-layer configuration) and per-box
//! visual features for graph nodes.

use std::path::Path;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::geometry::NormBox;
use crate::kernels;
use crate::nn::{ensure_finite, BatchNorm2d, Conv2d, Mode};
use crate::params::{Init, ParamStore};
use crate::{Error, Result};

/// Channel widths of the four pyramid levels.
pub const PYRAMID_CHANNELS: [usize; 4] = [64, 128, 256, 512];
/// Smallest accepted input side; anything smaller collapses the stride-32 map.
pub const MIN_INPUT_SIDE: usize = 32;
/// Side of the square crops encoded for box features.
pub const BOX_CROP: usize = 96;

/// Encoder maps at strides 4, 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub c2: Tensor,
    pub c3: Tensor,
    pub c4: Tensor,
    pub c5: Tensor,
}

impl FeaturePyramid {
    pub fn levels(&self) -> [&Tensor; 4] {
        [&self.c2, &self.c3, &self.c4, &self.c5]
    }
}

/// Which encoder level is pooled into a box's visual feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BoxFeatureLayer {
    #[default]
    C5,
    C4,
}

impl BoxFeatureLayer {
    pub fn width(self) -> usize {
        match self {
            BoxFeatureLayer::C5 => 512,
            BoxFeatureLayer::C4 => 256,
        }
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(init: &mut Init, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let conv1 = Conv2d::new(&mut init.sub("conv1"), c_in, c_out, 3, stride, 1, false)?;
        let bn1 = BatchNorm2d::new(&mut init.sub("bn1"), c_out)?;
        let conv2 = Conv2d::new(&mut init.sub("conv2"), c_out, c_out, 3, 1, 1, false)?;
        let bn2 = BatchNorm2d::new(&mut init.sub("bn2"), c_out)?;
        let downsample = if stride != 1 || c_in != c_out {
            let mut d = init.sub("downsample");
            Some((
                Conv2d::new(&mut d.sub("0"), c_in, c_out, 1, stride, 0, false)?,
                BatchNorm2d::new(&mut d.sub("1"), c_out)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?, mode)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

/// Residual encoder: 7×7 stem, 3×3 max pool, then four stages of two basic
/// blocks each with widths 64/128/256/512.
#[derive(Debug, Clone)]
pub struct Encoder {
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<BasicBlock>>,
}

impl Encoder {
    /// Registers parameters under `init`'s prefix (conventionally `encoder`).
    pub fn new(init: &mut Init) -> Result<Self> {
        let stem = Conv2d::new(&mut init.sub("conv1"), 3, 64, 7, 2, 3, false)?;
        let stem_bn = BatchNorm2d::new(&mut init.sub("bn1"), 64)?;
        let mut stages = Vec::with_capacity(4);
        let mut c_in = 64;
        for (i, &c_out) in PYRAMID_CHANNELS.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let mut s = init.sub(format!("layer{}", i + 1));
            let blocks = vec![
                BasicBlock::new(&mut s.sub("0"), c_in, c_out, stride)?,
                BasicBlock::new(&mut s.sub("1"), c_out, c_out, 1)?,
            ];
            stages.push(blocks);
            c_in = c_out;
        }
        Ok(Self {
            stem,
            stem_bn,
            stages,
        })
    }

    /// Encodes a normalized B×3×H×W batch.
    pub fn encode(&self, images: &Tensor, mode: Mode) -> Result<FeaturePyramid> {
        let (b, c, h, w) = images.dims4()?;
        if b == 0 || c != 3 {
            return Err(Error::Shape(format!(
                "encoder expects B×3×H×W with B ≥ 1, got {:?}",
                images.dims()
            )));
        }
        if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
            return Err(Error::invalid(format!(
                "input {h}×{w} is smaller than {MIN_INPUT_SIDE}×{MIN_INPUT_SIDE}"
            )));
        }
        ensure_finite(images, "encoder input")?;
        let x = self
            .stem_bn
            .forward(&self.stem.forward(images)?, mode)?
            .relu()?;
        let mut x = kernels::max_pool2d(&x, 3, 2, 1)?;
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x, mode)?;
            }
            levels.push(x.clone());
        }
        let mut it = levels.into_iter();
        Ok(FeaturePyramid {
            c2: it.next().expect("four stages"),
            c3: it.next().expect("four stages"),
            c4: it.next().expect("four stages"),
            c5: it.next().expect("four stages"),
        })
    }

    /// Crops each box from a normalized 3×H×W image, resizes the crop to
    /// 96×96, encodes it and global-average-pools the chosen level.
    ///
    /// Normalization uses running statistics regardless of training phase so
    /// that a box's feature does not depend on the other boxes in the frame;
    /// gradients still reach the encoder parameters.
    pub fn extract_box_features(
        &self,
        image: &Tensor,
        boxes: &[NormBox],
        layer: BoxFeatureLayer,
    ) -> Result<Tensor> {
        let (c, h, w) = image.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!(
                "expected a 3×H×W image, got {:?}",
                image.dims()
            )));
        }
        if boxes.is_empty() {
            return Ok(Tensor::zeros(
                (0, layer.width()),
                image.dtype(),
                image.device(),
            )?);
        }
        let mut crops = Vec::with_capacity(boxes.len());
        for (i, b) in boxes.iter().enumerate() {
            b.validate()
                .map_err(|e| Error::invalid(format!("box {i}: {e}")))?;
            let r = b.to_pixels(h, w).ok_or_else(|| {
                Error::invalid(format!("box {i} has zero area after pixel rounding"))
            })?;
            let crop = image
                .narrow(1, r.y0, r.height())?
                .narrow(2, r.x0, r.width())?
                .unsqueeze(0)?;
            crops.push(kernels::resize_bilinear(&crop, BOX_CROP, BOX_CROP)?);
        }
        let batch = Tensor::cat(&crops, 0)?;
        let pyramid = self.encode(&batch, Mode::Eval)?;
        let level = match layer {
            BoxFeatureLayer::C5 => pyramid.c5,
            BoxFeatureLayer::C4 => pyramid.c4,
        };
        Ok(level.flatten_from(2)?.mean(D::Minus1)?)
    }
}

/// Outcome of [`load_encoder_weights`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderInit {
    Loaded,
    RandomRetained,
}

/// Replaces every `encoder.*` entry of `store` with the checkpoint's arrays.
///
/// A missing file is an error unless `allow_random` is set, in which case the
/// current (random) initialization is kept and a warning is logged.
pub fn load_encoder_weights(
    store: &ParamStore,
    path: &Path,
    allow_random: bool,
) -> Result<EncoderInit> {
    if !path.exists() {
        if allow_random {
            log::warn!(
                "encoder weights {} not found; keeping random initialization",
                path.display()
            );
            return Ok(EncoderInit::RandomRetained);
        }
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "encoder checkpoint not found"),
        ));
    }
    let ck = Checkpoint::load(path)?;
    ck.restore_into(store, Some("encoder."))?;
    Ok(EncoderInit::Loaded)
}

/// Saves the `encoder.*` entries of `store`.
pub fn save_encoder_weights(store: &ParamStore, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::new();
    ck.meta.insert("kind".into(), "encoder".into());
    for (name, var) in store.iter().filter(|(n, _)| n.starts_with("encoder.")) {
        ck.push_tensor(name, var.as_tensor())?;
    }
    ck.save(path)
}
