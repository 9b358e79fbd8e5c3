//! PNG encodings for depth, labels, and RGB.
//!
//! Depth uses the 16-bit grayscale convention: raw = depth·256, raw 0
//! means invalid, so the representable range is (0, 256) meters at
//! ~3.9 mm resolution and save→load round trips are bit-exact. Labels
//! store object ids as raw 16-bit values; RGB is plain 8-bit.

use crate::depth::{DepthMap, LabelMap, SparseDepthMap};
use crate::error::{Error, Result};
use crate::tensor::NdArray;
use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use std::path::Path;

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.into(),
            problem: other.to_string(),
        },
    })
}

fn save_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.into(),
            problem: other.to_string(),
        },
    }
}

fn as_luma16(path: &Path, img: DynamicImage) -> Result<ImageBuffer<Luma<u16>, Vec<u16>>> {
    match img {
        DynamicImage::ImageLuma16(buf) => Ok(buf),
        other => Err(Error::Format {
            path: path.into(),
            problem: format!(
                "pixel format {:?}, expected 16-bit single-channel grayscale",
                other.color()
            ),
        }),
    }
}

/// Writes depth as 16-bit grayscale, raw = round(depth·256).
pub fn save_depth_png(path: impl AsRef<Path>, map: &DepthMap) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (map.height(), map.width());
    let raw: Vec<u16> = map
        .array()
        .data()
        .iter()
        .map(|&d| (d * 256.0).round().clamp(0.0, 65535.0) as u16)
        .collect();
    let buf = ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, raw)
        .expect("raw buffer sized from the map itself");
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| save_err(path, e))
}

/// Reads a 16-bit grayscale depth PNG; raw 0 stays invalid.
pub fn load_depth_png(path: impl AsRef<Path>) -> Result<SparseDepthMap> {
    let path = path.as_ref();
    let buf = as_luma16(path, open(path)?)?;
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let data: Vec<f64> = buf.as_raw().iter().map(|&r| r as f64 / 256.0).collect();
    Ok(SparseDepthMap::new(NdArray::from_vec(&[h, w], data)))
}

/// Writes object ids as raw 16-bit grayscale values.
pub fn save_labels_png(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    let path = path.as_ref();
    let buf = ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(
        labels.width() as u32,
        labels.height() as u32,
        labels.ids().to_vec(),
    )
    .expect("raw buffer sized from the map itself");
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| save_err(path, e))
}

pub fn load_labels_png(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let buf = as_luma16(path, open(path)?)?;
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    Ok(LabelMap::new(h, w, buf.as_raw().clone()))
}

/// Writes a `[3,H,W]` image with values in [0,1] as 8-bit RGB.
pub fn save_rgb_png(path: impl AsRef<Path>, rgb: &NdArray) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(rgb.rank(), 3, "rgb must be [3,H,W], got {:?}", rgb.shape());
    assert_eq!(rgb.shape()[0], 3, "rgb must have 3 channels");
    let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
    let mut raw = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                raw[(y * w + x) * 3 + c] =
                    (rgb.at3(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::from_raw(w as u32, h as u32, raw)
        .expect("raw buffer sized from the image itself");
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| save_err(path, e))
}

/// Reads an 8-bit RGB PNG into `[3,H,W]` with values in [0,1].
pub fn load_rgb_png(path: impl AsRef<Path>) -> Result<NdArray> {
    let path = path.as_ref();
    let img = open(path)?;
    let buf = match img {
        DynamicImage::ImageRgb8(buf) => buf,
        other => {
            return Err(Error::Format {
                path: path.into(),
                problem: format!("pixel format {:?}, expected 8-bit RGB", other.color()),
            })
        }
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let mut out = NdArray::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = buf.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out.set3(c, y, x, px.0[c] as f64 / 255.0);
            }
        }
    }
    Ok(out)
}
