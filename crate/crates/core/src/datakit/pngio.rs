//! PNG reading and writing for RGB frames and palette-indexed label maps.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::labels::LabelMap;
use crate::{Error, Result};

/// 8-bit interleaved RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width * 3],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Display colors of the eight segmentation classes.
pub const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
];

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

fn decode(path: &Path, transform: Transformations) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(transform);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

/// Reads an 8-bit RGB image; gray, palette and alpha variants are converted.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let (info, buf) = decode(path, Transformations::normalize_to_color8())?;
    let (h, w) = (info.height as usize, info.width as usize);
    let channels = match info.color_type {
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Indexed => return Err(png_err(path, "palette was not expanded")),
    };
    let stride = info.line_size;
    let mut img = RgbImage::new(h, w);
    for y in 0..h {
        let row = &buf[y * stride..];
        for x in 0..w {
            let p = &row[x * channels..];
            let rgb = if channels >= 3 {
                [p[0], p[1], p[2]]
            } else {
                [p[0]; 3]
            };
            img.put(y, x, rgb);
        }
    }
    Ok(img)
}

fn encoder<'a>(path: &Path, w: usize, h: usize) -> Result<png::Encoder<'a, BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(png::Encoder::new(BufWriter::new(file), w as u32, h as u32))
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let mut enc = encoder(path, img.width, img.height)?;
    enc.set_color(ColorType::Rgb);
    enc.set_depth(BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer
        .write_image_data(&img.data)
        .map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// Reads a single-image label map stored as 8-bit palette indices (or 8-bit
/// gray values). Values are not range-checked here.
pub fn read_mask(path: &Path) -> Result<LabelMap> {
    let (info, buf) = decode(path, Transformations::IDENTITY)?;
    if info.bit_depth != BitDepth::Eight
        || !matches!(info.color_type, ColorType::Indexed | ColorType::Grayscale)
    {
        return Err(png_err(
            path,
            format!(
                "masks must be 8-bit indexed or gray, got {:?} {:?}",
                info.color_type, info.bit_depth
            ),
        ));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        data.extend_from_slice(&buf[y * info.line_size..y * info.line_size + w]);
    }
    LabelMap::new(1, h, w, data)
}

/// Writes one plane of `mask` as an 8-bit palette PNG.
pub fn write_mask(path: &Path, mask: &LabelMap, index: usize) -> Result<()> {
    let mut enc = encoder(path, mask.width, mask.height)?;
    enc.set_color(ColorType::Indexed);
    enc.set_depth(BitDepth::Eight);
    let mut palette = vec![0u8; 256 * 3];
    for (i, c) in PALETTE.iter().enumerate() {
        palette[i * 3..i * 3 + 3].copy_from_slice(c);
    }
    enc.set_palette(palette);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer
        .write_image_data(mask.plane(index))
        .map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// Blends class colors over an image at the given opacity (background kept).
pub fn overlay(image: &RgbImage, mask: &LabelMap, index: usize, opacity: f64) -> Result<RgbImage> {
    if (mask.height, mask.width) != (image.height, image.width) {
        return Err(Error::Shape(format!(
            "mask {}×{} does not match image {}×{}",
            mask.height, mask.width, image.height, image.width
        )));
    }
    let mut out = image.clone();
    let plane = mask.plane(index);
    for y in 0..image.height {
        for x in 0..image.width {
            let label = plane[y * image.width + x] as usize;
            if label == 0 || label >= PALETTE.len() {
                continue;
            }
            let src = image.pixel(y, x);
            let c = PALETTE[label];
            let mut px = [0u8; 3];
            for k in 0..3 {
                px[k] = ((1.0 - opacity) * src[k] as f64 + opacity * c[k] as f64).round() as u8;
            }
            out.put(y, x, px);
        }
    }
    Ok(out)
}
