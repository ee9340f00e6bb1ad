//! Generation from fresh patterns, reconstruction of training items, and
//! desk-scale diagnostics.

use std::path::{Path, PathBuf};

use crate::codebook::DropoutPattern;
use crate::data::{export_images, Dataset, ImageBatch, ShiftParam};
use crate::error::{Error, Result};
use crate::model::Generator;
use crate::nn::Mode;
use crate::rng::{stream_rng, Stream};
use crate::training::Checkpoint;

/// Reported PSNR for identical images, and the ceiling for all values.
pub const PSNR_CAP: f64 = 99.0;

/// Images per forward pass at inference.
const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    pub count: usize,
    pub seed: u64,
    /// Per-cluster weights; `None` uses the training occupancy.
    pub cluster_weights: Option<Vec<f64>>,
    pub use_ema: bool,
}

impl SampleRequest {
    pub fn new(count: usize, seed: u64) -> Self {
        Self {
            count,
            seed,
            cluster_weights: None,
            use_ema: true,
        }
    }
}

fn decode_patterns(g: &mut Generator<f32>, patterns: &[DropoutPattern], max_shift: u32) -> Result<ImageBatch<f32>> {
    let mut parts = Vec::new();
    for chunk in patterns.chunks(CHUNK) {
        let refs: Vec<&DropoutPattern> = chunk.iter().collect();
        let shifts = vec![ShiftParam::zero(max_shift); chunk.len()];
        parts.push(g.forward(&refs, &shifts, Mode::Eval)?);
    }
    if parts.is_empty() {
        return Ok(ImageBatch::zeros(0, 32, 32));
    }
    ImageBatch::concat(&parts)
}

/// Fresh patterns decoded with r = 0 in eval mode. Sample `i` draws its
/// pattern from its own stream, so results do not depend on batching.
pub fn generate(ck: &Checkpoint, req: &SampleRequest) -> Result<(ImageBatch<f32>, Vec<DropoutPattern>)> {
    if req.count == 0 {
        return Err(Error::Config("sample count must be >= 1".into()));
    }
    let mut g = ck.generator(req.use_ema)?;
    let patterns = (0..req.count)
        .map(|i| {
            let mut rng = stream_rng(req.seed, Stream::Sample, i as u64);
            ck.codebook.sample_novel(req.cluster_weights.as_deref(), &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let images = decode_patterns(&mut g, &patterns, ck.train_cfg.max_shift)?;
    Ok((images, patterns))
}

/// Decodes the stored training patterns of `indices`. Also returns each
/// pattern's fingerprint so callers can log exactly which code was used.
pub fn reconstruct(ck: &Checkpoint, indices: &[usize], use_ema: bool) -> Result<(ImageBatch<f32>, Vec<String>)> {
    let patterns = indices
        .iter()
        .map(|&i| {
            if i >= ck.n_items {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: ck.n_items,
                });
            }
            ck.codebook.pattern(i).cloned()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut g = ck.generator(use_ema)?;
    let images = decode_patterns(&mut g, &patterns, ck.train_cfg.max_shift)?;
    Ok((images, patterns.iter().map(DropoutPattern::fingerprint).collect()))
}

/// Per-image 10 log10(1 / mse), capped at `PSNR_CAP`.
pub fn psnr(a: &ImageBatch<f32>, b: &ImageBatch<f32>) -> Result<Vec<f64>> {
    if !a.same_shape(b) {
        return Err(Error::Config(format!(
            "psnr shape mismatch: {}x{}x{} vs {}x{}x{}",
            a.b, a.h, a.w, b.b, b.h, b.w
        )));
    }
    Ok((0..a.b)
        .map(|i| {
            let (x, y) = (a.image(i), b.image(i));
            let mse = x
                .iter()
                .zip(y)
                .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
                .sum::<f64>()
                / x.len() as f64;
            if mse == 0.0 {
                PSNR_CAP
            } else {
                (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
            }
        })
        .collect())
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityReport {
    pub min_pairwise: f64,
    pub mean_pairwise: f64,
    /// Per sample: (nearest training index, L2 distance to it).
    pub nearest: Vec<(usize, f64)>,
}

/// Exact pairwise L2 statistics and brute-force nearest training neighbours.
pub fn diversity_report(images: &ImageBatch<f32>, train: Option<&Dataset>) -> Result<DiversityReport> {
    if images.b < 2 {
        return Err(Error::Config("diversity report needs at least 2 images".into()));
    }
    let mut min = f64::INFINITY;
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..images.b {
        for j in i + 1..images.b {
            let d = l2(images.image(i), images.image(j));
            min = min.min(d);
            sum += d;
            pairs += 1;
        }
    }
    let nearest = match train {
        Some(ds) => {
            if ds.dim() != images.image_len() {
                return Err(Error::Config("training images differ in size from samples".into()));
            }
            (0..images.b)
                .map(|i| {
                    let x = images.image(i);
                    (0..ds.len())
                        .map(|t| (t, l2(x, ds.image(t))))
                        .fold((0, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best })
                })
                .collect()
        }
        None => Vec::new(),
    };
    Ok(DiversityReport {
        min_pairwise: min,
        mean_pairwise: sum / pairs as f64,
        nearest,
    })
}

impl DiversityReport {
    /// `#` summary lines, then `sample_id<TAB>nn_train_id<TAB>nn_l2` rows.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# min_pairwise_l2\t{:.6}\n# mean_pairwise_l2\t{:.6}\n",
            self.min_pairwise, self.mean_pairwise
        );
        for (i, (t, d)) in self.nearest.iter().enumerate() {
            s.push_str(&format!("{i}\t{t}\t{d:.6}\n"));
        }
        s
    }
}

/// Lossless 8-bit PNGs named `000000.png`, ... for external FID/IS tools.
pub fn export_for_fid(images: &ImageBatch<f32>, dir: &Path) -> Result<Vec<PathBuf>> {
    export_images(images, dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::read_png;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(values: &[f32]) -> ImageBatch<f32> {
        let n = 3 * 4 * 4;
        let mut data = Vec::new();
        for &v in values {
            data.extend(std::iter::repeat_n(v, n));
        }
        ImageBatch::from_vec(values.len(), 4, 4, data).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let z = batch(&[0.0]);
        assert_eq!(psnr(&z, &z).unwrap(), vec![PSNR_CAP]);
        assert_eq!(psnr(&z, &batch(&[1.0])).unwrap(), vec![0.0]);
        // constant offset 0.1 -> mse 0.01 -> 20 dB
        let p = psnr(&batch(&[0.3]), &batch(&[0.4])).unwrap()[0];
        assert!((p - 20.0).abs() < 1e-5, "{p}");
        assert!(psnr(&z, &batch(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn diversity_against_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..4 * 48).map(|_| rng.random()).collect();
        let imgs = ImageBatch::from_vec(4, 4, 4, data.clone()).unwrap();
        let r = diversity_report(&imgs, None).unwrap();
        let mut dists = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                if i < j {
                    let mut s = 0.0f64;
                    for e in 0..48 {
                        let d = data[i * 48 + e] as f64 - data[j * 48 + e] as f64;
                        s += d * d;
                    }
                    dists.push(s.sqrt());
                }
            }
        }
        assert_eq!(r.min_pairwise, dists.iter().cloned().fold(f64::INFINITY, f64::min));
        assert_eq!(r.mean_pairwise, dists.iter().sum::<f64>() / 6.0);

        let same = batch(&[0.5, 0.5, 0.5]);
        assert_eq!(diversity_report(&same, None).unwrap().min_pairwise, 0.0);
        assert!(diversity_report(&batch(&[0.5]), None).is_err());
    }

    #[test]
    fn nearest_training_neighbours() {
        let train = Dataset::synthetic(5, 4, 1).unwrap();
        let picks = train.gather(&[3, 1]);
        let r = diversity_report(&picks, Some(&train)).unwrap();
        assert_eq!(r.nearest, vec![(3, 0.0), (1, 0.0)]);
        assert!(r.to_text().contains("0\t3\t0.000000\n"));
    }

    #[test]
    fn export_roundtrip_and_determinism() {
        let ds = Dataset::synthetic(3, 32, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = export_for_fid(&ds.images, &dir.path().join("a")).unwrap();
        assert_eq!(files.len(), 3);
        assert!(files[0].ends_with("000000.png"));
        for (i, f) in files.iter().enumerate() {
            let (px, h, w) = read_png(f).unwrap();
            assert_eq!((h, w), (32, 32));
            assert_eq!(px, ds.image(i));
        }
        let again = export_for_fid(&ds.images, &dir.path().join("b")).unwrap();
        for (a, b) in files.iter().zip(&again) {
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        }
        let empty = ImageBatch::<f32>::zeros(0, 32, 32);
        assert!(export_for_fid(&empty, &dir.path().join("c")).unwrap().is_empty());
    }
}
