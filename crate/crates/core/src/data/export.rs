//! 8-bit PNG export: value = round(clamp(x, 0, 1) * 255).

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, ImageEncoder};

use super::{ImageBatch, CHANNELS};
use crate::error::{Error, Result};
use crate::nn::Scalar;

pub fn quantize<F: Scalar>(v: F) -> u8 {
    let v = v.as_f64();
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round() as u8
}

fn interleave<F: Scalar>(planar: &[F], h: usize, w: usize) -> Vec<u8> {
    let mut rgb = vec![0u8; h * w * CHANNELS];
    for c in 0..CHANNELS {
        for p in 0..h * w {
            rgb[p * CHANNELS + c] = quantize(planar[c * h * w + p]);
        }
    }
    rgb
}

fn encode(path: &Path, rgb: &[u8], h: usize, w: usize) -> Result<()> {
    let file = BufWriter::new(fs::File::create(path)?);
    PngEncoder::new_with_quality(file, CompressionType::Default, FilterType::Adaptive)
        .write_image(rgb, w as u32, h as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image(e.to_string()))
}

pub fn write_png<F: Scalar>(path: &Path, planar: &[F], h: usize, w: usize) -> Result<()> {
    encode(path, &interleave(planar, h, w), h, w)
}

/// Reads an RGB PNG back into planar [0, 1] values.
pub fn read_png(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut planar = vec![0f32; CHANNELS * h * w];
    for p in 0..h * w {
        for c in 0..CHANNELS {
            planar[c * h * w + p] = raw[p * CHANNELS + c] as f32 / 255.0;
        }
    }
    Ok((planar, h, w))
}

/// Writes `000000.png`, `000001.png`, ... into `dir`.
pub fn export_images<F: Scalar>(images: &ImageBatch<F>, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    (0..images.b)
        .map(|i| {
            let path = dir.join(format!("{i:06}.png"));
            write_png(&path, images.image(i), images.h, images.w)?;
            Ok(path)
        })
        .collect()
}

/// Tiles the batch into a near-square grid with a 2-pixel black border.
pub fn write_grid_png<F: Scalar>(path: &Path, images: &ImageBatch<F>) -> Result<()> {
    if images.b == 0 {
        return Ok(());
    }
    let cols = (images.b as f64).sqrt().ceil() as usize;
    let rows = images.b.div_ceil(cols);
    let pad = 2;
    let (h, w) = (images.h, images.w);
    let gh = rows * (h + pad) + pad;
    let gw = cols * (w + pad) + pad;
    let mut rgb = vec![0u8; gh * gw * CHANNELS];
    for i in 0..images.b {
        let tile = interleave(images.image(i), h, w);
        let (oy, ox) = ((i / cols) * (h + pad) + pad, (i % cols) * (w + pad) + pad);
        for y in 0..h {
            let dst = ((oy + y) * gw + ox) * CHANNELS;
            rgb[dst..dst + w * CHANNELS].copy_from_slice(&tile[y * w * CHANNELS..(y + 1) * w * CHANNELS]);
        }
    }
    encode(path, &rgb, gh, gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;

    #[test]
    fn quantize_rule() {
        assert_eq!(quantize(-0.5f32), 0);
        assert_eq!(quantize(2.0f32), 255);
        assert_eq!(quantize(0.5f32), 128);
        assert_eq!(quantize(f32::NAN), 0);
    }

    #[test]
    fn export_roundtrip_and_fixed_point() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::synthetic(3, 32, 8).unwrap();
        let paths = export_images(&ds.images, &dir.path().join("a")).unwrap();
        assert_eq!(paths.len(), 3);
        assert!(paths[2].ends_with("000002.png"));
        let mut reread = Vec::new();
        for (i, p) in paths.iter().enumerate() {
            let (planar, h, w) = read_png(p).unwrap();
            assert_eq!((h, w), (32, 32));
            for (a, b) in planar.iter().zip(ds.image(i)) {
                assert_eq!(quantize(*a), quantize(*b));
            }
            reread.extend(planar);
        }
        let reread = ImageBatch::from_vec(3, 32, 32, reread).unwrap();
        let again = export_images(&reread, &dir.path().join("b")).unwrap();
        for (a, b) in paths.iter().zip(&again) {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        }
    }

    #[test]
    fn empty_export() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("empty");
        let none = ImageBatch::<f32>::zeros(0, 32, 32);
        assert!(export_images(&none, &out).unwrap().is_empty());
        assert_eq!(fs::read_dir(&out).unwrap().count(), 0);
    }

    #[test]
    fn grid_has_expected_size() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::synthetic(5, 8, 1).unwrap();
        let path = dir.path().join("grid.png");
        write_grid_png(&path, &ds.images).unwrap();
        let (_, h, w) = read_png(&path).unwrap();
        assert_eq!((h, w), (2 * 10 + 2, 3 * 10 + 2));
    }
}
