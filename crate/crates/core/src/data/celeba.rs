//! CelebA ingestion from a packed raw file (decoding happens upstream).
//!
//! Packed layout: magic `DAIM`, u32 count, u16 h, u16 w, then count x 3 x h x w
//! planar RGB bytes.

use std::fs;
use std::path::Path;

use super::{DataSource, Dataset, ImageBatch, CHANNELS};
use crate::bin::{Reader, Writer};
use crate::error::{Error, Result};

pub const CELEBA_H: usize = 218;
pub const CELEBA_W: usize = 178;
pub const CELEBA_CROP: usize = 160;
const OUT: usize = 32;
const POOL: usize = CELEBA_CROP / OUT;

/// Centre 160x160 crop followed by exact 5x5 box averaging down to 32x32.
pub fn preprocess_celeba(img: &[u8], h: usize, w: usize) -> Result<Vec<f32>> {
    if h != CELEBA_H || w != CELEBA_W || img.len() != CHANNELS * h * w {
        return Err(Error::DatasetFormat(format!(
            "expected a 3x{CELEBA_H}x{CELEBA_W} frame, got 3x{h}x{w} ({} bytes)",
            img.len()
        )));
    }
    let top = (h - CELEBA_CROP) / 2;
    let left = (w - CELEBA_CROP) / 2;
    let mut out = vec![0f32; CHANNELS * OUT * OUT];
    for c in 0..CHANNELS {
        for oy in 0..OUT {
            for ox in 0..OUT {
                let mut sum = 0u32;
                for dy in 0..POOL {
                    let row = (c * h + top + oy * POOL + dy) * w + left + ox * POOL;
                    sum += img[row..row + POOL].iter().map(|&b| b as u32).sum::<u32>();
                }
                out[(c * OUT + oy) * OUT + ox] = sum as f32 / (POOL * POOL) as f32 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Loads a packed file; raw 218x178 frames are preprocessed, 32x32 frames are used as is.
pub fn load_celeba_packed(path: &Path) -> Result<Dataset> {
    if !path.is_file() {
        return Err(Error::DatasetNotFound(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    let header = (|| -> std::result::Result<_, String> {
        r.expect_magic(b"DAIM")?;
        Ok((r.u32()? as usize, r.u16()? as usize, r.u16()? as usize))
    })();
    let (count, h, w) = header.map_err(Error::DatasetFormat)?;
    let frame = CHANNELS * h * w;
    if count == 0 || r.remaining() != count * frame {
        return Err(Error::DatasetFormat(format!(
            "{}: {count} frames of {frame} bytes expected, {} bytes present",
            path.display(),
            r.remaining()
        )));
    }
    let payload = r.bytes(count * frame).map_err(Error::DatasetFormat)?;
    let mut data = Vec::with_capacity(count * CHANNELS * OUT * OUT);
    for img in payload.chunks_exact(frame) {
        if (h, w) == (OUT, OUT) {
            data.extend(img.iter().map(|&b| b as f32 / 255.0));
        } else {
            data.extend(preprocess_celeba(img, h, w)?);
        }
    }
    Dataset::new(ImageBatch::from_vec(count, OUT, OUT, data)?, None, DataSource::CelebA)
}

pub fn write_celeba_packed(path: &Path, frames: &[Vec<u8>], h: usize, w: usize) -> Result<()> {
    let mut out = Writer::default();
    out.bytes(b"DAIM");
    out.u32(frames.len() as u32);
    out.u16(h as u16);
    out.u16(w as u16);
    for f in frames {
        if f.len() != CHANNELS * h * w {
            return Err(Error::DatasetFormat("frame size mismatch".into()));
        }
        out.bytes(f);
    }
    fs::write(path, out.buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_gray_is_preserved() {
        let img = vec![128u8; 3 * CELEBA_H * CELEBA_W];
        let out = preprocess_celeba(&img, CELEBA_H, CELEBA_W).unwrap();
        assert_eq!(out.len(), 3 * 32 * 32);
        assert!(out.iter().all(|&v| v == 128.0 / 255.0));
    }

    #[test]
    fn impulse_at_crop_centre_hits_one_cell() {
        let mut img = vec![0u8; 3 * CELEBA_H * CELEBA_W];
        // crop starts at row 29, col 9; crop centre (80, 80)
        let (y, x) = (29 + 80, 9 + 80);
        img[y * CELEBA_W + x] = 255;
        let out = preprocess_celeba(&img, CELEBA_H, CELEBA_W).unwrap();
        let nonzero: Vec<usize> = (0..out.len()).filter(|&i| out[i] != 0.0).collect();
        // (80, 80) lies in pooled cell (16, 16) of channel 0
        assert_eq!(nonzero, vec![16 * 32 + 16]);
        assert!((out[16 * 32 + 16] - 1.0 / 25.0).abs() < 1e-7);
    }

    #[test]
    fn transposed_dims_rejected() {
        let img = vec![0u8; 3 * CELEBA_H * CELEBA_W];
        assert!(matches!(
            preprocess_celeba(&img, CELEBA_W, CELEBA_H),
            Err(Error::DatasetFormat(_))
        ));
    }

    #[test]
    fn packed_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("celeba.daim");
        let frames = vec![vec![200u8; 3 * CELEBA_H * CELEBA_W], vec![10u8; 3 * CELEBA_H * CELEBA_W]];
        write_celeba_packed(&path, &frames, CELEBA_H, CELEBA_W).unwrap();
        let ds = load_celeba_packed(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.image(1)[5], 10.0 / 255.0);
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 1);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_celeba_packed(&path), Err(Error::DatasetFormat(_))));
    }
}
