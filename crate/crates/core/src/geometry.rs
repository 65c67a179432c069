//! Normalized bounding boxes.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Axis-aligned box in normalized image coordinates, `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct NormBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for NormBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<NormBox> for [f64; 4] {
    fn from(b: NormBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// Pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

impl NormBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && 0.0 <= self.x1
            && self.x1 < self.x2
            && self.x2 <= 1.0
            && 0.0 <= self.y1
            && self.y1 < self.y2
            && self.y2 <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "box {:?} is not a valid normalized xyxy box",
                self.to_array()
            )))
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        (*self).into()
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Rounds the box to pixel edges; `None` when it collapses to zero area.
    pub fn to_pixels(&self, height: usize, width: usize) -> Option<PixelRect> {
        let r = |v: f64, n: usize| ((v * n as f64).round().max(0.0) as usize).min(n);
        let rect = PixelRect {
            x0: r(self.x1, width),
            y0: r(self.y1, height),
            x1: r(self.x2, width),
            y1: r(self.y2, height),
        };
        (rect.x1 > rect.x0 && rect.y1 > rect.y0).then_some(rect)
    }

    /// Area of the intersection with another box (0 when disjoint).
    pub fn intersection(&self, other: &NormBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Euclidean distance between the closest points of two boxes.
    pub fn gap(&self, other: &NormBox) -> f64 {
        let dx = (other.x1 - self.x2).max(self.x1 - other.x2).max(0.0);
        let dy = (other.y1 - self.y2).max(self.y1 - other.y2).max(0.0);
        (dx * dx + dy * dy).sqrt()
    }
}
