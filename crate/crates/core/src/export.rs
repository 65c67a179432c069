//! Prediction files: palette label maps, per-frame JSON records and overlays.

use std::fs;
use std::path::{Path, PathBuf};

use crate::datakit::{overlay, resize_mask, write_mask, write_rgb, RgbImage};
use crate::evaluate::FramePrediction;
use crate::{Error, Result};

/// Blend weight of class colors in overlays.
pub const OVERLAY_OPACITY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ExportedFrame {
    pub labels: PathBuf,
    pub record: PathBuf,
    pub overlay: Option<PathBuf>,
}

/// Writes `<stem>_labels.png`, `<stem>.json` and, given the source image,
/// `<stem>_overlay.png` into `dir`. Labels are resized (nearest neighbour)
/// to the image when their sizes differ.
pub fn export_frame(
    dir: &Path,
    stem: &str,
    pred: &FramePrediction,
    image: Option<&RgbImage>,
) -> Result<ExportedFrame> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let labels = match image {
        Some(img) if (img.height, img.width) != (pred.labels.height, pred.labels.width) => {
            resize_mask(&pred.labels, img.height, img.width)
        }
        _ => pred.labels.clone(),
    };
    let label_path = dir.join(format!("{stem}_labels.png"));
    write_mask(&label_path, &labels, 0)?;
    let record_path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(&pred.record())?;
    fs::write(&record_path, json + "\n").map_err(|e| Error::io(&record_path, e))?;
    let overlay_path = match image {
        Some(img) => {
            let p = dir.join(format!("{stem}_overlay.png"));
            write_rgb(&p, &overlay(img, &labels, 0, OVERLAY_OPACITY)?)?;
            Some(p)
        }
        None => None,
    };
    Ok(ExportedFrame {
        labels: label_path,
        record: record_path,
        overlay: overlay_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{read_mask, read_rgb};
    use crate::evaluate::{EdgePrediction, PredictionRecord};
    use crate::labels::LabelMap;

    #[test]
    fn outputs_follow_the_source_image_size() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let labels = LabelMap::new(1, 2, 3, vec![0, 1, 2, 3, 4, 5])?;
        let pred = FramePrediction {
            frame_id: "seq_01/00000".into(),
            labels,
            edges: vec![EdgePrediction {
                instrument_id: 1,
                class_scores: [0.5; 13],
            }],
        };
        let img = RgbImage::new(4, 6);
        let out = export_frame(dir.path(), "f", &pred, Some(&img))?;
        let m = read_mask(&out.labels)?;
        assert_eq!((m.height, m.width), (4, 6));
        assert_eq!(m.get(0, 3, 5), 5);
        let o = read_rgb(out.overlay.as_ref().unwrap())?;
        assert_eq!((o.height, o.width), (4, 6));
        let rec: PredictionRecord =
            serde_json::from_str(&fs::read_to_string(&out.record).unwrap())?;
        assert_eq!(rec, pred.record());
        Ok(())
    }
}
