//! Image datasets, the horizontal shift transform, and batching.

mod celeba;
mod cifar;
mod export;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Scalar;

pub use celeba::{load_celeba_packed, preprocess_celeba, write_celeba_packed, CELEBA_CROP, CELEBA_H, CELEBA_W};
pub use cifar::{load_cifar10, load_cifar10_files, load_cifar10_test, write_cifar10_batch, CIFAR_RECORD};
pub use export::{export_images, quantize, read_png, write_grid_png, write_png};

pub const CHANNELS: usize = 3;
pub const DEFAULT_MAX_SHIFT: u32 = 8;

/// Images of shape (b, 3, h, w), values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch<F = f32> {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> ImageBatch<F> {
    pub fn zeros(b: usize, h: usize, w: usize) -> Self {
        Self {
            b,
            h,
            w,
            data: vec![F::zero(); b * CHANNELS * h * w],
        }
    }

    pub fn from_vec(b: usize, h: usize, w: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != b * CHANNELS * h * w {
            return Err(Error::Config(format!(
                "image data has {} values, expected {}",
                data.len(),
                b * CHANNELS * h * w
            )));
        }
        Ok(Self { b, h, w, data })
    }

    pub fn image_len(&self) -> usize {
        CHANNELS * self.h * self.w
    }

    pub fn image(&self, i: usize) -> &[F] {
        let n = self.image_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [F] {
        let n = self.image_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.b == other.b && self.h == other.h && self.w == other.w
    }

    pub fn is_valid(&self) -> bool {
        self.data
            .iter()
            .all(|v| v.is_finite() && *v >= F::zero() && *v <= F::one())
    }

    pub fn cast<G: Scalar>(&self) -> ImageBatch<G> {
        ImageBatch {
            b: self.b,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| G::of_f64(v.as_f64())).collect(),
        }
    }

    /// Concatenates batches of equal image size.
    pub fn concat(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("nothing to concatenate".into()))?;
        let mut out = Self {
            b: 0,
            h: first.h,
            w: first.w,
            data: Vec::new(),
        };
        for p in parts {
            if p.h != out.h || p.w != out.w {
                return Err(Error::Config("image size mismatch".into()));
            }
            out.b += p.b;
            out.data.extend_from_slice(&p.data);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Cifar10,
    CelebA,
    Synthetic,
}

/// Training images held as one contiguous (N, 3, h, w) buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: ImageBatch<f32>,
    pub labels: Option<Vec<u8>>,
    pub source: DataSource,
}

impl Dataset {
    pub fn new(images: ImageBatch<f32>, labels: Option<Vec<u8>>, source: DataSource) -> Result<Self> {
        if images.b == 0 {
            return Err(Error::DatasetFormat("dataset is empty".into()));
        }
        if let Some(l) = &labels {
            if l.len() != images.b {
                return Err(Error::DatasetFormat(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.b
                )));
            }
        }
        Ok(Self {
            images,
            labels,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.images.b
    }

    pub fn is_empty(&self) -> bool {
        self.images.b == 0
    }

    pub fn dim(&self) -> usize {
        self.images.image_len()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        self.images.image(i)
    }

    pub fn gather(&self, indices: &[usize]) -> ImageBatch<f32> {
        let n = self.dim();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        ImageBatch {
            b: indices.len(),
            h: self.images.h,
            w: self.images.w,
            data,
        }
    }

    /// First `n` items.
    pub fn truncate(mut self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::Config(format!(
                "cannot keep {n} of {} items",
                self.len()
            )));
        }
        self.images.data.truncate(n * self.dim());
        self.images.b = n;
        if let Some(l) = &mut self.labels {
            l.truncate(n);
        }
        Ok(self)
    }

    /// SHA-256 over the image values, for run/checkpoint consistency checks.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::with_capacity(self.images.data.len() * 4 + 16);
        bytes.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.images.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        crate::bin::sha256_hex(&bytes)
    }

    /// Smooth random colour fields, useful when no real data is at hand.
    ///
    /// Each image is a sum of a few random low-frequency cosines per channel,
    /// then squashed into [0, 1].
    pub fn synthetic(n: usize, hw: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * CHANNELS * hw * hw);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(rng.random_range(0..10u8));
            for _ in 0..CHANNELS {
                let waves: Vec<(f32, f32, f32, f32)> = (0..3)
                    .map(|_| {
                        (
                            rng.random_range(0.0f32..3.0),
                            rng.random_range(0.0f32..3.0),
                            rng.random_range(0.0f32..std::f32::consts::TAU),
                            rng.random_range(0.2f32..1.0),
                        )
                    })
                    .collect();
                let offset = rng.random_range(-1.0f32..1.0);
                for y in 0..hw {
                    for x in 0..hw {
                        let (u, v) = (x as f32 / hw as f32, y as f32 / hw as f32);
                        let s: f32 = waves
                            .iter()
                            .map(|&(fx, fy, ph, a)| a * (std::f32::consts::TAU * (fx * u + fy * v) + ph).cos())
                            .sum();
                        let val = 1.0 / (1.0 + (-(s + offset)).exp());
                        // quantize like real 8-bit data
                        data.push((val * 255.0).round() / 255.0);
                    }
                }
            }
        }
        Self::new(ImageBatch::from_vec(n, hw, hw, data)?, Some(labels), DataSource::Synthetic)
    }
}

/// Integer horizontal shift, bounded by a maximum magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftParam {
    r: i32,
    max_shift: u32,
}

impl ShiftParam {
    pub fn new(r: i32, max_shift: u32) -> Result<Self> {
        if r.unsigned_abs() > max_shift {
            return Err(Error::ShiftOutOfRange { shift: r, max_shift });
        }
        Ok(Self { r, max_shift })
    }

    pub fn zero(max_shift: u32) -> Self {
        Self { r: 0, max_shift }
    }

    pub fn value(self) -> i32 {
        self.r
    }

    pub fn max_shift(self) -> u32 {
        self.max_shift
    }

    /// r / max_shift in [-1, 1]; 0 when shifting is disabled.
    pub fn normalized(self) -> f64 {
        if self.max_shift == 0 {
            0.0
        } else {
            self.r as f64 / self.max_shift as f64
        }
    }
}

/// Translates columns of one planar image by `r` (positive = right), zero-filling.
pub fn shift_image<F: Scalar>(img: &mut [F], h: usize, w: usize, r: i32) {
    if r == 0 {
        return;
    }
    let shift = r.unsigned_abs() as usize;
    for row in img.chunks_exact_mut(w).take(CHANNELS * h) {
        if shift >= w {
            row.fill(F::zero());
        } else if r > 0 {
            row.copy_within(0..w - shift, shift);
            row[..shift].fill(F::zero());
        } else {
            row.copy_within(shift..w, 0);
            row[w - shift..].fill(F::zero());
        }
    }
}

/// Applies the same shift to every image in the batch.
pub fn shift_transform<F: Scalar>(x: &ImageBatch<F>, r: ShiftParam) -> ImageBatch<F> {
    let mut out = x.clone();
    for i in 0..out.b {
        let (h, w) = (out.h, out.w);
        shift_image(out.image_mut(i), h, w, r.value());
    }
    out
}

/// One epoch's batches: a seeded permutation of `0..n` cut into chunks.
/// The last short batch is kept.
pub fn make_batches(n: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// A batch of images together with the dataset indices they came from.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: ImageBatch<f32>,
}

/// Yields batches in permutation order.
pub fn batch_stream(ds: &Dataset, batch_size: usize, epoch_seed: u64) -> Result<impl Iterator<Item = Batch> + '_> {
    let plan = make_batches(ds.len(), batch_size, epoch_seed)?;
    Ok(plan.into_iter().map(move |indices| Batch {
        images: ds.gather(&indices),
        indices,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_shift(img: &[f32], h: usize, w: usize, r: i32) -> Vec<f32> {
        let mut out = vec![0.0; img.len()];
        for c in 0..CHANNELS {
            for y in 0..h {
                for x in 0..w {
                    let src = x as i64 - r as i64;
                    if src >= 0 && (src as usize) < w {
                        out[(c * h + y) * w + x] = img[(c * h + y) * w + src as usize];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn shift_zero_is_identity() {
        let ds = Dataset::synthetic(3, 32, 1).unwrap();
        let out = shift_transform(&ds.images, ShiftParam::zero(8));
        assert_eq!(out.data, ds.images.data);
    }

    #[test]
    fn impulse_moves_right() {
        let mut x = ImageBatch::<f32>::zeros(1, 32, 32);
        for c in 0..3 {
            for y in 0..32 {
                x.data[(c * 32 + y) * 32 + 10] = 1.0;
            }
        }
        let out = shift_transform(&x, ShiftParam::new(3, 8).unwrap());
        for c in 0..3 {
            for y in 0..32 {
                let row = &out.data[(c * 32 + y) * 32..(c * 32 + y + 1) * 32];
                assert_eq!(row[13], 1.0);
                assert_eq!(row.iter().filter(|&&v| v != 0.0).count(), 1);
                assert!(row[..3].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn shift_out_of_range() {
        assert!(matches!(
            ShiftParam::new(9, 8),
            Err(Error::ShiftOutOfRange { shift: 9, max_shift: 8 })
        ));
        assert!(ShiftParam::new(-8, 8).is_ok());
        assert_eq!(ShiftParam::new(0, 0).unwrap().normalized(), 0.0);
    }

    #[test]
    fn shift_matches_naive_for_all_r() {
        let ds = Dataset::synthetic(1, 32, 4).unwrap();
        for r in -8..=8 {
            let out = shift_transform(&ds.images, ShiftParam::new(r, 8).unwrap());
            assert_eq!(out.data, naive_shift(ds.image(0), 32, 32, r));
        }
    }

    #[test]
    fn batches_partition() {
        let b = make_batches(10, 4, 3).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, make_batches(10, 4, 3).unwrap());
        assert_ne!(b, make_batches(10, 4, 4).unwrap());
        let big = make_batches(50_000, 256, 0).unwrap();
        assert_eq!(big.len(), 196);
        assert_eq!(big.last().unwrap().len(), 80);
        assert!(make_batches(5, 0, 0).is_err());
    }

    #[test]
    fn stream_carries_matching_images() {
        let ds = Dataset::synthetic(5, 8, 2).unwrap();
        for batch in batch_stream(&ds, 2, 9).unwrap() {
            for (j, &i) in batch.indices.iter().enumerate() {
                assert_eq!(batch.images.image(j), ds.image(i));
            }
        }
    }

    #[test]
    fn synthetic_values_in_range() {
        let ds = Dataset::synthetic(4, 32, 0).unwrap();
        assert!(ds.images.is_valid());
        assert_eq!(ds.content_hash(), Dataset::synthetic(4, 32, 0).unwrap().content_hash());
    }

    proptest! {
        #[test]
        fn shift_then_unshift_restores_unfilled_columns(r in -8i32..=8, seed in 0u64..1000) {
            let ds = Dataset::synthetic(1, 16, seed).unwrap();
            let x = &ds.images;
            let there = shift_transform(x, ShiftParam::new(r, 8).unwrap());
            let back = shift_transform(&there, ShiftParam::new(-r, 8).unwrap());
            let w = 16usize;
            let s = r.unsigned_abs() as usize;
            for (idx, (&a, &b)) in x.data.iter().zip(&back.data).enumerate() {
                let col = idx % w;
                let kept = if r >= 0 { col < w - s } else { col >= s };
                if kept {
                    prop_assert_eq!(a, b);
                } else {
                    prop_assert_eq!(b, 0.0);
                }
            }
        }
    }
}
