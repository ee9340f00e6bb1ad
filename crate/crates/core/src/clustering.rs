//! k-means over raw flattened pixels, used to pick each item's first-layer
//! dropout channel.

use std::fs;
use std::path::Path;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use rayon::prelude::*;

use crate::bin::{Reader, Writer};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const DEFAULT_K: usize = 32;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_MAX_ITERS: usize = 100;

/// Fitted centroids (row-major, k x dim).
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub dim: usize,
    pub centroids: Vec<f64>,
    pub inertia: f64,
    pub seed: u64,
    /// Inertia after each assignment step.
    pub history: Vec<f64>,
}

impl ClusterModel {
    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }
}

fn sq_dist(a: &[f32], c: &[f64]) -> f64 {
    a.iter()
        .zip(c)
        .map(|(&x, &y)| {
            let d = x as f64 - y;
            d * d
        })
        .sum()
}

/// Nearest centroid and its squared distance; ties go to the lowest id.
fn nearest(x: &[f32], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(points: &[f32], dim: usize, centroids: &[f64]) -> Vec<(usize, f64)> {
    points
        .par_chunks_exact(dim)
        .map(|x| nearest(x, centroids, dim))
        .collect()
}

/// k-means++ seeding: first centre uniform, the rest proportional to squared
/// distance from the nearest chosen centre.
fn seed_centroids<R: Rng>(points: &[f32], dim: usize, k: usize, rng: &mut R) -> Vec<f64> {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centroids: Vec<f64> = row(rng.random_range(0..n)).iter().map(|&v| v as f64).collect();
    let mut d2: Vec<f64> = points.par_chunks_exact(dim).map(|x| sq_dist(x, &centroids)).collect();
    while centroids.len() < k * dim {
        let pick = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // all remaining mass is zero: duplicates only, any point will do
            Err(_) => rng.random_range(0..n),
        };
        let c: Vec<f64> = row(pick).iter().map(|&v| v as f64).collect();
        d2.par_iter_mut()
            .zip(points.par_chunks_exact(dim))
            .for_each(|(d, x)| *d = d.min(sq_dist(x, &c)));
        centroids.extend(c);
    }
    centroids
}

/// Lloyd iterations from k-means++ seeds until every centroid moves less than
/// `tol` (Euclidean) or `max_iters` is reached. Returns the model and the
/// final assignments.
pub fn kmeans_fit(ds: &Dataset, k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<(ClusterModel, Vec<u16>)> {
    let n = ds.len();
    let dim = ds.dim();
    if k == 0 || k > n {
        return Err(Error::ClusterConfig(format!("k = {k} must be in 1..={n}")));
    }
    if k > u16::MAX as usize + 1 {
        return Err(Error::ClusterConfig(format!("k = {k} exceeds u16 cluster ids")));
    }
    let points = &ds.images.data;
    let mut rng = stream_rng(seed, Stream::Init, 0);
    let mut centroids = seed_centroids(points, dim, k, &mut rng);
    let mut history: Vec<f64> = Vec::new();
    let labels;
    let mut iters = 0;
    loop {
        let mut assigned = assign(points, dim, &centroids);
        let inertia: f64 = assigned.iter().map(|a| a.1).sum();
        if let Some(&prev) = history.last() {
            assert!(
                inertia <= prev + 1e-9 * prev.abs().max(1.0),
                "k-means inertia increased: {prev} -> {inertia}"
            );
        }
        history.push(inertia);
        if iters == max_iters {
            labels = assigned.iter().map(|a| a.0).collect::<Vec<_>>();
            break;
        }
        iters += 1;

        let mut counts = vec![0usize; k];
        for a in &assigned {
            counts[a.0] += 1;
        }
        // re-seed empty clusters with the point farthest from its centre
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[assigned[i].0] > 1)
                .max_by(|&a, &b| assigned[a].1.total_cmp(&assigned[b].1).then(b.cmp(&a)))
                .expect("k <= n leaves a cluster with two points");
            counts[assigned[far].0] -= 1;
            counts[j] = 1;
            assigned[far] = (j, 0.0);
        }
        let mut sums = vec![0.0f64; k * dim];
        for (x, a) in points.chunks_exact(dim).zip(&assigned) {
            for (s, &v) in sums[a.0 * dim..(a.0 + 1) * dim].iter_mut().zip(x) {
                *s += v as f64;
            }
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            let inv = 1.0 / counts[j] as f64;
            let mut moved = 0.0;
            for (c, s) in centroids[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                let new = s * inv;
                moved += (new - *c) * (new - *c);
                *c = new;
            }
            shift = shift.max(moved.sqrt());
        }
        if shift < tol {
            let assigned = assign(points, dim, &centroids);
            let inertia: f64 = assigned.iter().map(|a| a.1).sum();
            let prev = *history.last().unwrap();
            assert!(inertia <= prev + 1e-9 * prev.abs().max(1.0), "k-means inertia increased");
            history.push(inertia);
            labels = assigned.iter().map(|a| a.0).collect();
            break;
        }
    }
    let model = ClusterModel {
        k,
        dim,
        centroids,
        inertia: *history.last().unwrap(),
        seed,
        history,
    };
    Ok((model, labels.into_iter().map(|l| l as u16).collect()))
}

/// Nearest centroid id; ties go to the lowest id.
pub fn kmeans_predict(model: &ClusterModel, x: &[f32]) -> Result<u16> {
    if x.len() != model.dim {
        return Err(Error::ClusterConfig(format!(
            "point has dimension {}, centroids have {}",
            x.len(),
            model.dim
        )));
    }
    Ok(nearest(x, &model.centroids, model.dim).0 as u16)
}

/// Number of items per cluster.
pub fn histogram(assignments: &[u16], k: usize) -> Vec<usize> {
    let mut h = vec![0; k];
    for &a in assignments {
        h[a as usize] += 1;
    }
    h
}

/// Contents of a `DACL` cluster file.
///
/// Layout (little-endian): magic `DACL`, u32 k, u32 dim, k x dim f32
/// centroids, then one u16 cluster id per item up to the end of the file.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterFile {
    pub k: usize,
    pub dim: usize,
    pub centroids: Vec<f32>,
    pub assignments: Vec<u16>,
}

const MAGIC: &[u8; 4] = b"DACL";

impl ClusterFile {
    pub fn new(model: &ClusterModel, assignments: Vec<u16>) -> Self {
        Self {
            k: model.k,
            dim: model.dim,
            centroids: model.centroids.iter().map(|&v| v as f32).collect(),
            assignments,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(self.k as u32);
        w.u32(self.dim as u32);
        for &v in &self.centroids {
            w.f32(v);
        }
        for &a in &self.assignments {
            w.u16(a);
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::decode_inner(bytes).map_err(Error::ClusterFormat)
    }

    fn decode_inner(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC)?;
        let k = r.u32()? as usize;
        let dim = r.u32()? as usize;
        if k == 0 || dim == 0 {
            return Err(format!("k = {k}, dim = {dim}"));
        }
        let n = k.checked_mul(dim).ok_or("centroid block overflows")?;
        if n.checked_mul(4).is_none_or(|b| b > r.remaining()) {
            return Err("truncated centroid block".into());
        }
        let centroids = (0..n).map(|_| r.f32()).collect::<std::result::Result<Vec<_>, _>>()?;
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err("non-finite centroid".into());
        }
        if r.remaining() % 2 != 0 {
            return Err("truncated assignment block".into());
        }
        let mut assignments = Vec::with_capacity(r.remaining() / 2);
        while r.remaining() > 0 {
            let a = r.u16()?;
            if a as usize >= k {
                return Err(format!("assignment {a} >= k = {k}"));
            }
            assignments.push(a);
        }
        Ok(Self {
            k,
            dim,
            centroids,
            assignments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DataSource, ImageBatch};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Normal;

    /// Dataset of 1x1 "images" (3 values each) from two blobs whose centres
    /// are 1.0 apart.
    fn blobs(per_blob: usize, seed: u64) -> (Dataset, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let centres = [[0.2f64, 0.3, 0.4], [0.2 + 1.0 / 3f64.sqrt(), 0.3 + 1.0 / 3f64.sqrt(), 0.4 + 1.0 / 3f64.sqrt()]];
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * per_blob {
            let l = i % 2;
            labels.push(l);
            for c in centres[l] {
                data.push((c + noise.sample(&mut rng)) as f32);
            }
        }
        let images = ImageBatch::from_vec(2 * per_blob, 1, 1, data).unwrap();
        (Dataset::new(images, None, DataSource::Synthetic).unwrap(), labels)
    }

    fn choose2(x: usize) -> f64 {
        (x * x.saturating_sub(1)) as f64 / 2.0
    }

    /// Adjusted Rand index from the contingency table.
    fn ari(a: &[usize], b: &[usize]) -> f64 {
        let ka = a.iter().max().unwrap() + 1;
        let kb = b.iter().max().unwrap() + 1;
        let mut table = vec![vec![0usize; kb]; ka];
        for (&x, &y) in a.iter().zip(b) {
            table[x][y] += 1;
        }
        let index: f64 = table.iter().flatten().map(|&v| choose2(v)).sum();
        let rows: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
        let cols: f64 = (0..kb).map(|j| choose2(table.iter().map(|r| r[j]).sum())).sum();
        let expected = rows * cols / choose2(a.len());
        (index - expected) / (0.5 * (rows + cols) - expected)
    }

    #[test]
    fn two_blobs_are_recovered() {
        let (ds, truth) = blobs(100, 4);
        let (model, labels) = kmeans_fit(&ds, 2, 9, DEFAULT_MAX_ITERS, DEFAULT_TOL).unwrap();
        let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        assert_eq!(ari(&truth, &labels), 1.0);
        assert!(model.history.windows(2).all(|w| w[1] <= w[0]));
        // a fresh point near blob 1's centre goes to blob 1's cluster
        let id = kmeans_predict(&model, &[0.78, 0.88, 0.98]).unwrap() as usize;
        assert_eq!(id, labels[1]);
    }

    #[test]
    fn ari_oracle_sanity() {
        assert_eq!(ari(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        assert!(ari(&[0, 0, 1, 1], &[0, 1, 0, 1]) < 0.0);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let ds = Dataset::synthetic(20, 4, 1).unwrap();
        let (model, labels) = kmeans_fit(&ds, 1, 0, DEFAULT_MAX_ITERS, DEFAULT_TOL).unwrap();
        assert!(labels.iter().all(|&l| l == 0));
        for d in 0..ds.dim() {
            let mean: f64 = (0..ds.len()).map(|i| ds.image(i)[d] as f64).sum::<f64>() / ds.len() as f64;
            assert!((model.centroids[d] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let ds = Dataset::synthetic(12, 4, 2).unwrap();
        let (model, labels) = kmeans_fit(&ds, 12, 3, DEFAULT_MAX_ITERS, DEFAULT_TOL).unwrap();
        assert_eq!(model.inertia, 0.0);
        let mut sorted = labels.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 12);
    }

    #[test]
    fn too_many_clusters_is_an_error() {
        let ds = Dataset::synthetic(3, 4, 2).unwrap();
        assert!(matches!(kmeans_fit(&ds, 4, 0, 10, 1e-4), Err(Error::ClusterConfig(_))));
        assert!(matches!(kmeans_fit(&ds, 0, 0, 10, 1e-4), Err(Error::ClusterConfig(_))));
    }

    #[test]
    fn deterministic_and_monotone_on_images() {
        let ds = Dataset::synthetic(60, 8, 3).unwrap();
        let a = kmeans_fit(&ds, 5, 7, DEFAULT_MAX_ITERS, DEFAULT_TOL).unwrap();
        let b = kmeans_fit(&ds, 5, 7, DEFAULT_MAX_ITERS, DEFAULT_TOL).unwrap();
        assert_eq!(a, b);
        assert!(a.0.history.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0]));
        assert_eq!(histogram(&a.1, 5).iter().sum::<usize>(), 60);
    }

    #[test]
    fn predict_ties_and_dimension() {
        let model = ClusterModel {
            k: 5,
            dim: 1,
            centroids: vec![10.0, 0.0, 7.0, 5.0, 2.0],
            inertia: 0.0,
            seed: 0,
            history: vec![],
        };
        assert_eq!(kmeans_predict(&model, &[5.0]).unwrap(), 3);
        // 1.0 is equidistant from centroids 1 (0.0) and 4 (2.0)
        assert_eq!(kmeans_predict(&model, &[1.0]).unwrap(), 1);
        assert!(matches!(kmeans_predict(&model, &[1.0, 2.0]), Err(Error::ClusterConfig(_))));
    }

    #[test]
    fn file_roundtrip_and_truncation() {
        let ds = Dataset::synthetic(10, 4, 5).unwrap();
        let (model, labels) = kmeans_fit(&ds, 3, 1, DEFAULT_MAX_ITERS, DEFAULT_TOL).unwrap();
        let file = ClusterFile::new(&model, labels);
        let bytes = file.encode();
        assert_eq!(ClusterFile::decode(&bytes).unwrap(), file);
        assert!(matches!(ClusterFile::decode(&bytes[..bytes.len() - 1]), Err(Error::ClusterFormat(_))));
        assert!(matches!(ClusterFile::decode(&bytes[..20]), Err(Error::ClusterFormat(_))));
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"DACX");
        assert!(matches!(ClusterFile::decode(&bad), Err(Error::ClusterFormat(_))));
    }
}
