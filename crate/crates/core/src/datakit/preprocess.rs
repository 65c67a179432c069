//! Resizing and channel normalization.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::pngio::RgbImage;
use crate::kernels::resize_plane;
use crate::labels::LabelMap;
use crate::{Error, Result};

/// Native resolution of the recorded frames.
pub const SOURCE_RESOLUTION: (usize, usize) = (1024, 1280);
/// Network input resolution.
pub const TARGET_RESOLUTION: (usize, usize) = (320, 400);

/// Per-channel mean and standard deviation of [0, 1]-scaled pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ChannelStats {
    /// Statistics of the ImageNet training images, for encoder weights
    /// pretrained there.
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl ChannelStats {
    /// Accumulates statistics over a set of images.
    pub fn estimate<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Result<Self> {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut n = 0u64;
        for img in images {
            for px in img.data.chunks_exact(3) {
                for k in 0..3 {
                    let v = px[k] as f64 / 255.0;
                    sum[k] += v;
                    sq[k] += v * v;
                }
            }
            n += (img.height * img.width) as u64;
        }
        if n == 0 {
            return Err(Error::data(
                "cannot estimate channel statistics from no pixels",
            ));
        }
        let mut out = Self {
            mean: [0.0; 3],
            std: [0.0; 3],
        };
        for k in 0..3 {
            let m = sum[k] / n as f64;
            out.mean[k] = m;
            out.std[k] = (sq[k] / n as f64 - m * m).max(0.0).sqrt().max(1e-3);
        }
        Ok(out)
    }
}

/// What to do when an input frame is not at the native resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ResolutionPolicy {
    /// Resize anything.
    #[default]
    Lenient,
    /// Reject frames that are not exactly this size.
    Strict(usize, usize),
}

impl ResolutionPolicy {
    pub fn check(&self, h: usize, w: usize) -> Result<()> {
        match *self {
            ResolutionPolicy::Strict(eh, ew) if (eh, ew) != (h, w) => {
                Err(Error::data(format!("frame is {h}×{w}, expected {eh}×{ew}")))
            }
            _ => Ok(()),
        }
    }
}

/// Bilinear resize of an RGB image (half-pixel centers), rounded to 8 bits.
pub fn resize_image(img: &RgbImage, h: usize, w: usize) -> RgbImage {
    if (img.height, img.width) == (h, w) {
        return img.clone();
    }
    let mut out = RgbImage::new(h, w);
    for k in 0..3 {
        let plane: Vec<f32> = img
            .data
            .iter()
            .skip(k)
            .step_by(3)
            .map(|&v| v as f32)
            .collect();
        let r = resize_plane(&plane, img.height, img.width, h, w);
        for (i, v) in r.into_iter().enumerate() {
            out.data[i * 3 + k] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

fn nearest(i: usize, src: usize, dst: usize) -> usize {
    (((i as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1)
}

/// Nearest-neighbor resize of every plane of a label map.
pub fn resize_mask(mask: &LabelMap, h: usize, w: usize) -> LabelMap {
    if (mask.height, mask.width) == (h, w) {
        return mask.clone();
    }
    let rows: Vec<usize> = (0..h).map(|y| nearest(y, mask.height, h)).collect();
    let cols: Vec<usize> = (0..w).map(|x| nearest(x, mask.width, w)).collect();
    let mut data = Vec::with_capacity(mask.batch * h * w);
    for b in 0..mask.batch {
        for &sy in &rows {
            for &sx in &cols {
                data.push(mask.get(b, sy, sx));
            }
        }
    }
    LabelMap {
        batch: mask.batch,
        height: h,
        width: w,
        data,
    }
}

/// Normalized 3×H×W float tensor of an image.
pub fn to_tensor(img: &RgbImage, stats: &ChannelStats) -> Result<Tensor> {
    let n = img.height * img.width;
    let mut v = vec![0f32; 3 * n];
    for (i, px) in img.data.chunks_exact(3).enumerate() {
        for k in 0..3 {
            v[k * n + i] = ((px[k] as f64 / 255.0 - stats.mean[k]) / stats.std[k]) as f32;
        }
    }
    Ok(Tensor::from_vec(
        v,
        (3, img.height, img.width),
        &Device::Cpu,
    )?)
}

/// Resizes an image and its mask to `target`; boxes are normalized and need
/// no change.
pub fn preprocess(
    image: &RgbImage,
    mask: &LabelMap,
    target: (usize, usize),
    policy: ResolutionPolicy,
) -> Result<(RgbImage, LabelMap)> {
    policy.check(image.height, image.width)?;
    if (mask.height, mask.width) != (image.height, image.width) {
        return Err(Error::data(format!(
            "mask is {}×{} but image is {}×{}",
            mask.height, mask.width, image.height, image.width
        )));
    }
    Ok((
        resize_image(image, target.0, target.1),
        resize_mask(mask, target.0, target.1),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn native_frames_shrink_to_network_size() -> Result<()> {
        let (h, w) = SOURCE_RESOLUTION;
        let img = RgbImage::new(h, w);
        let mut mask = LabelMap::filled(1, h, w, 0);
        for (i, v) in mask.data.iter_mut().enumerate() {
            *v = ((i / 7) % 8) as u8;
        }
        let (a, m) = preprocess(
            &img,
            &mask,
            TARGET_RESOLUTION,
            ResolutionPolicy::Strict(h, w),
        )?;
        assert_eq!((a.height, a.width), TARGET_RESOLUTION);
        assert_eq!((m.height, m.width), TARGET_RESOLUTION);
        let before: std::collections::BTreeSet<u8> = mask.data.iter().copied().collect();
        assert!(m.data.iter().all(|v| before.contains(v)));
        Ok(())
    }

    #[test]
    fn strict_policy_rejects_other_sizes() {
        let img = RgbImage::new(10, 10);
        let mask = LabelMap::filled(1, 10, 10, 0);
        assert!(preprocess(&img, &mask, (5, 5), ResolutionPolicy::Strict(1024, 1280)).is_err());
        assert!(preprocess(&img, &mask, (5, 5), ResolutionPolicy::Lenient).is_ok());
    }

    #[test]
    fn constant_images_stay_constant() {
        let mut img = RgbImage::new(7, 9);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&[10, 200, 33]);
        }
        let r = resize_image(&img, 4, 5);
        assert!(r.data.chunks_exact(3).all(|p| p == [10, 200, 33]));
    }

    #[test]
    fn normalization_uses_stats() -> Result<()> {
        let mut img = RgbImage::new(1, 2);
        img.data = vec![0, 255, 51, 255, 0, 51];
        let stats = ChannelStats::estimate([&img])?;
        let t = to_tensor(&img, &stats)?.flatten_all()?.to_vec1::<f32>()?;
        assert!((t[0] + 1.0).abs() < 1e-5 && (t[1] - 1.0).abs() < 1e-5);
        Ok(())
    }
}
