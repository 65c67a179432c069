//! Dataset layout, loading, preprocessing and synthetic data.
//!
//! On disk a dataset root holds one directory per video sequence:
//!
//! ```text
//! seq_02/images/00000.png        RGB frame
//! seq_02/masks/00000.png         8-bit palette label map, values 0..7
//! seq_02/annotations/00000.json  {boxes, semantics, edges, targets}
//! ```

mod pngio;
mod preprocess;
mod synth;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;

pub use pngio::{overlay, read_mask, read_rgb, write_mask, write_rgb, RgbImage, PALETTE};
pub use preprocess::{
    preprocess, resize_image, resize_mask, to_tensor, ChannelStats, ResolutionPolicy,
    SOURCE_RESOLUTION, TARGET_RESOLUTION,
};
pub use synth::{interaction_rule, mask_box, synth_generate, SynthConfig, SynthFrame, NEAR_MARGIN};

use crate::labels::{LabelMap, NUM_SEG_CLASSES};
use crate::scenegraph::{Annotation, SceneSample};
use crate::{Error, Result};

/// Sequence without tool-tissue interaction; never loaded.
pub const EXCLUDED_SEQUENCE: u32 = 13;
pub const DEFAULT_TRAIN: [u32; 11] = [2, 3, 4, 6, 7, 9, 10, 11, 12, 14, 15];
pub const DEFAULT_TEST: [u32; 3] = [1, 5, 16];
/// Held-out sequences of the four cross-validation folds.
pub const FOLD_TEST: [[u32; 3]; 4] = [[1, 5, 16], [2, 3, 15], [4, 6, 14], [4, 11, 12]];

/// Train/test assignment of sequence ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: BTreeSet<u32>,
    pub test: BTreeSet<u32>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: DEFAULT_TRAIN.into_iter().collect(),
            test: DEFAULT_TEST.into_iter().collect(),
        }
    }
}

impl SplitSpec {
    pub fn new(
        train: impl IntoIterator<Item = u32>,
        test: impl IntoIterator<Item = u32>,
    ) -> Result<Self> {
        let s = Self {
            train: train.into_iter().collect(),
            test: test.into_iter().collect(),
        };
        if let Some(x) = s.train.intersection(&s.test).next() {
            return Err(Error::Config(format!(
                "sequence {x} is in both train and test"
            )));
        }
        Ok(s)
    }

    /// Cross-validation fold `k` (1-based): its three held-out sequences
    /// against every other usable sequence.
    pub fn fold(k: usize) -> Result<Self> {
        let test = FOLD_TEST
            .get(k.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("fold {k} does not exist (1..=4)")))?;
        let train = (1..=16).filter(|s| *s != EXCLUDED_SEQUENCE && !test.contains(s));
        Self::new(train, test.iter().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    Train,
    Test,
    /// Every sequence on disk.
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub sequence: u32,
    pub stem: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub annotation: Annotation,
}

impl FrameRecord {
    pub fn frame_id(&self) -> String {
        format!("{}/{}", sequence_dir(self.sequence), self.stem)
    }
}

pub fn sequence_dir(seq: u32) -> String {
    format!("seq_{seq:02}")
}

fn parse_sequence(name: &str) -> Option<u32> {
    let digits = name.strip_prefix("seq_")?;
    (!digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()))
        .then(|| digits.parse().ok())
        .flatten()
}

/// Sequence ids present under `root`, ascending.
pub fn sequences_on_disk(root: &Path) -> Result<Vec<u32>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut seqs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if !entry.path().is_dir() {
            continue;
        }
        if let Some(s) = entry.file_name().to_str().and_then(parse_sequence) {
            seqs.push(s);
        }
    }
    seqs.sort_unstable();
    if seqs.is_empty() {
        return Err(Error::data(format!(
            "{} contains no seq_XX directories",
            root.display()
        )));
    }
    Ok(seqs)
}

pub fn read_annotation(path: &Path) -> Result<Annotation> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let a: Annotation =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    a.validate()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    Ok(a)
}

pub fn write_annotation(path: &Path, a: &Annotation) -> Result<()> {
    let text = serde_json::to_string_pretty(a)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Lists and validates the frames of the selected sequences. Masks are read
/// to reject labels outside 0..7.
pub fn load_dataset(root: &Path, split: &SplitSpec, subset: Subset) -> Result<Vec<FrameRecord>> {
    let mut records = Vec::new();
    for seq in sequences_on_disk(root)? {
        if seq == EXCLUDED_SEQUENCE {
            log::info!(
                "skipping {}: it has no tool-tissue interaction",
                sequence_dir(seq)
            );
            continue;
        }
        let wanted = match subset {
            Subset::Train => split.train.contains(&seq),
            Subset::Test => split.test.contains(&seq),
            Subset::All => true,
        };
        if !wanted {
            continue;
        }
        let dir = root.join(sequence_dir(seq));
        let images = dir.join("images");
        let mut stems = Vec::new();
        for entry in fs::read_dir(&images).map_err(|e| Error::io(&images, e))? {
            let p = entry.map_err(|e| Error::io(&images, e))?.path();
            if p.extension().is_some_and(|e| e == "png") {
                if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                    stems.push(stem.to_string());
                }
            }
        }
        stems.sort();
        for stem in stems {
            let mask_path = dir.join("masks").join(format!("{stem}.png"));
            let ann_path = dir.join("annotations").join(format!("{stem}.json"));
            for p in [&mask_path, &ann_path] {
                if !p.is_file() {
                    return Err(Error::data(format!(
                        "{}/{stem}: missing {}",
                        sequence_dir(seq),
                        p.display()
                    )));
                }
            }
            let mask = read_mask(&mask_path)?;
            mask.check_range(NUM_SEG_CLASSES)
                .map_err(|e| Error::data(format!("{}: {e}", mask_path.display())))?;
            records.push(FrameRecord {
                sequence: seq,
                image_path: images.join(format!("{stem}.png")),
                mask_path,
                annotation: read_annotation(&ann_path)?,
                stem,
            });
        }
    }
    Ok(records)
}

/// Writes generated frames in the on-disk layout.
pub fn write_dataset(root: &Path, frames: &[SynthFrame]) -> Result<()> {
    for f in frames {
        let dir = root.join(sequence_dir(f.sequence));
        for sub in ["images", "masks", "annotations"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let stem = f.stem();
        write_rgb(&dir.join("images").join(format!("{stem}.png")), &f.image)?;
        write_mask(&dir.join("masks").join(format!("{stem}.png")), &f.mask, 0)?;
        write_annotation(
            &dir.join("annotations").join(format!("{stem}.json")),
            &f.annotation,
        )?;
    }
    Ok(())
}

impl SynthFrame {
    pub fn stem(&self) -> String {
        format!("{:05}", self.index)
    }

    /// The frame as if read back from disk at its generated resolution.
    pub fn raw(&self) -> RawFrame {
        RawFrame {
            frame_id: format!("{}/{}", sequence_dir(self.sequence), self.stem()),
            image: self.image.clone(),
            mask: self.mask.clone(),
            annotation: self.annotation.clone(),
        }
    }
}

/// Decoded, resized frame before normalization.
#[derive(Debug, Clone)]
pub struct RawFrame {
    pub frame_id: String,
    pub image: RgbImage,
    pub mask: LabelMap,
    pub annotation: Annotation,
}

pub fn read_frame(
    record: &FrameRecord,
    target: (usize, usize),
    policy: ResolutionPolicy,
) -> Result<RawFrame> {
    let image = read_rgb(&record.image_path)?;
    let mask = read_mask(&record.mask_path)?;
    let (image, mask) = preprocess(&image, &mask, target, policy)
        .map_err(|e| Error::data(format!("{}: {e}", record.frame_id())))?;
    Ok(RawFrame {
        frame_id: record.frame_id(),
        image,
        mask,
        annotation: record.annotation.clone(),
    })
}

pub fn to_sample(frame: &RawFrame, stats: &ChannelStats, dtype: DType) -> Result<SceneSample> {
    Ok(SceneSample {
        frame_id: frame.frame_id.clone(),
        image: to_tensor(&frame.image, stats)?.to_dtype(dtype)?,
        mask: Some(frame.mask.clone()),
        annotation: frame.annotation.clone(),
    })
}
