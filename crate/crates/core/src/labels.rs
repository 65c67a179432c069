//! Fixed label vocabularies and dense label maps.

use candle_core::{DType, Device, Tensor};

use crate::{Error, Result};

/// Segmentation categories, indexed 0..7.
pub const SEG_CLASSES: [&str; 8] = [
    "background",
    "bipolar forceps",
    "prograsp forceps",
    "large needle driver",
    "monopolar curved scissors",
    "ultrasound probe",
    "suction tool",
    "clip applier",
];
pub const NUM_SEG_CLASSES: usize = SEG_CLASSES.len();

/// Tool-tissue interaction categories, indexed 0..12.
pub const INTERACTIONS: [&str; 13] = [
    "idle",
    "grasping",
    "retraction",
    "tissue manipulation",
    "tool manipulation",
    "cutting",
    "cauterization",
    "suction",
    "looping",
    "suturing",
    "clipping",
    "staple",
    "ultrasound sensing",
];
pub const NUM_INTERACTIONS: usize = INTERACTIONS.len();

pub const IDLE: usize = 0;
pub const RETRACTION: usize = 2;
pub const TISSUE_MANIPULATION: usize = 3;

/// Node vocabulary: 0 is the defective tissue, 1..7 are instrument classes
/// sharing their index with the segmentation categories.
pub const NODE_SEMANTICS: [&str; 8] = [
    "defective tissue",
    SEG_CLASSES[1],
    SEG_CLASSES[2],
    SEG_CLASSES[3],
    SEG_CLASSES[4],
    SEG_CLASSES[5],
    SEG_CLASSES[6],
    SEG_CLASSES[7],
];
pub const TISSUE_NODE: u8 = 0;

/// A batch of dense integer label maps in row-major B×H×W order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != batch * height * width {
            return Err(Error::Shape(format!(
                "label map {batch}×{height}×{width} needs {} values, got {}",
                batch * height * width,
                data.len()
            )));
        }
        Ok(Self {
            batch,
            height,
            width,
            data,
        })
    }

    pub fn filled(batch: usize, height: usize, width: usize, label: u8) -> Self {
        Self {
            batch,
            height,
            width,
            data: vec![label; batch * height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.height, self.width)
    }

    pub fn get(&self, b: usize, y: usize, x: usize) -> u8 {
        self.data[(b * self.height + y) * self.width + x]
    }

    pub fn plane(&self, b: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.data[b * n..(b + 1) * n]
    }

    /// Concatenates single-image maps of equal size.
    pub fn stack(maps: &[&LabelMap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::invalid("no label maps to stack"))?;
        let mut data = Vec::with_capacity(maps.iter().map(|m| m.data.len()).sum());
        let mut batch = 0;
        for m in maps {
            if (m.height, m.width) != (first.height, first.width) {
                return Err(Error::Shape(format!(
                    "cannot stack {}×{} with {}×{} label maps",
                    m.height, m.width, first.height, first.width
                )));
            }
            batch += m.batch;
            data.extend_from_slice(&m.data);
        }
        Self::new(batch, first.height, first.width, data)
    }

    /// First label outside `0..classes`, reported as (value, b, y, x).
    pub fn find_out_of_range(&self, classes: usize) -> Option<(u8, usize, usize, usize)> {
        let i = self.data.iter().position(|&v| v as usize >= classes)?;
        let plane = self.height * self.width;
        Some((
            self.data[i],
            i / plane,
            (i % plane) / self.width,
            i % self.width,
        ))
    }

    pub fn check_range(&self, classes: usize) -> Result<()> {
        match self.find_out_of_range(classes) {
            None => Ok(()),
            Some((v, b, y, x)) => Err(Error::invalid(format!(
                "label {v} at (batch {b}, row {y}, col {x}) is outside 0..{}",
                classes - 1
            ))),
        }
    }

    /// B×K×H×W one-hot encoding.
    pub fn one_hot(&self, classes: usize, dtype: DType) -> Result<Tensor> {
        self.check_range(classes)?;
        let plane = self.height * self.width;
        let mut out = vec![0f32; self.batch * classes * plane];
        for (i, &v) in self.data.iter().enumerate() {
            let (b, p) = (i / plane, i % plane);
            out[(b * classes + v as usize) * plane + p] = 1.0;
        }
        Ok(Tensor::from_vec(
            out,
            (self.batch, classes, self.height, self.width),
            &Device::Cpu,
        )?
        .to_dtype(dtype)?)
    }
}

/// Per-pixel argmax over the class axis of B×K×H×W scores; ties resolve to
/// the lowest class index.
pub fn argmax_labels(logits: &Tensor) -> Result<LabelMap> {
    let (b, k, h, w) = logits.dims4()?;
    let v = logits
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let plane = h * w;
    let mut data = Vec::with_capacity(b * plane);
    for bi in 0..b {
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..k {
                let s = v[(bi * k + c) * plane + p];
                if s > best_v {
                    best_v = s;
                    best = c;
                }
            }
            data.push(best as u8);
        }
    }
    LabelMap::new(b, h, w, data)
}
