//! Dropout-pattern codebook: one fixed, unique channel-activation pattern per
//! training item, plus sampling of fresh patterns from the same distribution.
//!
//! A pattern holds one sorted set of active channel indices per encoder
//! hierarchy. With clustering enabled, the first hierarchy carries the cluster
//! id: its lowest active channel equals the id and any further active channels
//! are drawn from `n_clusters..n_channels`.

mod file;
mod subset;

use std::collections::HashSet;
use std::path::Path;

use num_bigint::BigUint;
use num_traits::One;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use file::{decode_codebook, encode_codebook, load_codebook, save_codebook};
pub use subset::{binomial, rank_subset, unrank_subset};

/// Channel count and fixed active count of one dropout layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub n_channels: usize,
    pub k_active: usize,
}

impl LayerSpec {
    pub const fn new(n_channels: usize, k_active: usize) -> Self {
        Self {
            n_channels,
            k_active,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodebookSpec {
    pub layers: Vec<LayerSpec>,
    /// 1 means unclustered.
    pub n_clusters: usize,
    pub seed: u64,
}

impl CodebookSpec {
    /// Three hierarchies of 128/256/512 channels with 1/4/16 active.
    pub fn standard(n_clusters: usize, seed: u64) -> Self {
        Self {
            layers: vec![
                LayerSpec::new(128, 1),
                LayerSpec::new(256, 4),
                LayerSpec::new(512, 16),
            ],
            n_clusters,
            seed,
        }
    }

    pub fn from_channels(channels: &[usize], active: &[usize], n_clusters: usize, seed: u64) -> Result<Self> {
        if channels.len() != active.len() {
            return Err(Error::Config(format!(
                "{} channel counts but {} active counts",
                channels.len(),
                active.len()
            )));
        }
        let spec = Self {
            layers: channels
                .iter()
                .zip(active)
                .map(|(&n, &k)| LayerSpec::new(n, k))
                .collect(),
            n_clusters,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("codebook needs at least one layer".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.n_channels == 0 {
                return Err(Error::Config(format!("layer {l} has zero channels")));
            }
            if layer.k_active > layer.n_channels {
                return Err(Error::Config(format!(
                    "layer {l}: k_active {} > n_channels {}",
                    layer.k_active, layer.n_channels
                )));
            }
        }
        if self.n_clusters == 0 {
            return Err(Error::Config("n_clusters must be >= 1".into()));
        }
        if self.is_clustered() {
            let first = self.layers[0];
            if first.k_active == 0 {
                return Err(Error::Config(
                    "clustering needs at least one active channel in the first layer".into(),
                ));
            }
            if self.n_clusters > first.n_channels {
                return Err(Error::Config(format!(
                    "n_clusters {} exceeds first-layer channels {}",
                    self.n_clusters, first.n_channels
                )));
            }
            if first.k_active - 1 > first.n_channels - self.n_clusters {
                return Err(Error::Config(format!(
                    "first layer cannot hold {} active channels beside {} cluster channels",
                    first.k_active, self.n_clusters
                )));
            }
        }
        Ok(())
    }

    pub fn is_clustered(&self) -> bool {
        self.n_clusters > 1
    }

    /// Number of first-layer subsets compatible with a single cluster id.
    fn per_cluster_first_layer(&self) -> BigUint {
        let first = self.layers[0];
        binomial(first.n_channels - self.n_clusters, first.k_active - 1)
    }

    /// Patterns available to one cluster (the whole space when unclustered).
    pub fn capacity_per_cluster(&self) -> BigUint {
        if !self.is_clustered() {
            return capacity(self);
        }
        self.layers[1..]
            .iter()
            .fold(self.per_cluster_first_layer(), |acc, l| acc * binomial(l.n_channels, l.k_active))
    }

    pub fn total_active(&self) -> usize {
        self.layers.iter().map(|l| l.k_active).sum()
    }
}

/// Per-layer sorted active channel indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DropoutPattern {
    pub per_layer: Vec<Vec<usize>>,
}

impl DropoutPattern {
    pub fn check(&self, spec: &CodebookSpec) -> Result<()> {
        if self.per_layer.len() != spec.layers.len() {
            return Err(Error::PatternShapeMismatch(format!(
                "pattern has {} layers, spec has {}",
                self.per_layer.len(),
                spec.layers.len()
            )));
        }
        for (l, (active, layer)) in self.per_layer.iter().zip(&spec.layers).enumerate() {
            if active.len() != layer.k_active {
                return Err(Error::PatternShapeMismatch(format!(
                    "layer {l}: {} active channels, expected {}",
                    active.len(),
                    layer.k_active
                )));
            }
            subset::validate_subset(layer.n_channels, active)
                .map_err(|e| Error::PatternShapeMismatch(format!("layer {l}: {e}")))?;
        }
        Ok(())
    }

    /// Cross-layer rank tuple under the lexicographic subset order.
    pub fn ranks(&self, spec: &CodebookSpec) -> Result<Vec<BigUint>> {
        self.per_layer
            .iter()
            .zip(&spec.layers)
            .map(|(active, layer)| rank_subset(layer.n_channels, active))
            .collect()
    }

    /// Short stable fingerprint, used when logging which pattern was decoded.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        for layer in &self.per_layer {
            bytes.extend_from_slice(&(layer.len() as u32).to_le_bytes());
            for &i in layer {
                bytes.extend_from_slice(&(i as u32).to_le_bytes());
            }
        }
        crate::bin::sha256_hex(&bytes)[..16].to_string()
    }
}

/// Mapping from training index to its fixed dropout pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codebook {
    pub spec: CodebookSpec,
    pub patterns: Vec<DropoutPattern>,
    pub cluster_of: Option<Vec<u16>>,
    /// Collisions rejected while building; not serialized.
    pub retries: u64,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn pattern(&self, index: usize) -> Result<&DropoutPattern> {
        self.patterns.get(index).ok_or(Error::IndexOutOfRange {
            index,
            len: self.patterns.len(),
        })
    }

    /// Items per cluster, as sampling weights.
    pub fn occupancy(&self) -> Option<Vec<f64>> {
        let clusters = self.cluster_of.as_ref()?;
        let mut counts = vec![0.0; self.spec.n_clusters];
        for &c in clusters {
            counts[c as usize] += 1.0;
        }
        Some(counts)
    }

    /// Fresh pattern; cluster weights default to training occupancy.
    pub fn sample_novel<R: Rng>(&self, weights: Option<&[f64]>, rng: &mut R) -> Result<DropoutPattern> {
        match weights {
            Some(w) => sample_novel_pattern(&self.spec, Some(w), rng),
            None => {
                let occ = self.occupancy();
                sample_novel_pattern(&self.spec, occ.as_deref(), rng)
            }
        }
    }

    pub fn hash(&self) -> String {
        crate::bin::sha256_hex(&encode_codebook(self))
    }
}

/// Exact number of distinct patterns the spec can express.
pub fn capacity(spec: &CodebookSpec) -> BigUint {
    spec.layers
        .iter()
        .enumerate()
        .fold(BigUint::one(), |acc, (l, layer)| {
            if l == 0 && spec.is_clustered() {
                acc * spec.n_clusters * spec.per_cluster_first_layer()
            } else {
                acc * binomial(layer.n_channels, layer.k_active)
            }
        })
}

/// Formats a big integer as `d.ddde+XX`.
pub fn scientific(value: &BigUint) -> String {
    let digits = value.to_str_radix(10);
    if digits.len() <= 3 {
        return digits;
    }
    let exp = digits.len() - 1;
    format!("{}.{}e{}", &digits[..1], &digits[1..4], exp)
}

fn uniform_subset<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut v = index::sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

fn first_layer_for_cluster<R: Rng>(spec: &CodebookSpec, cluster: usize, rng: &mut R) -> Vec<usize> {
    let first = spec.layers[0];
    let c = spec.n_clusters;
    let mut active = Vec::with_capacity(first.k_active);
    active.push(cluster);
    active.extend(
        uniform_subset(rng, first.n_channels - c, first.k_active - 1)
            .into_iter()
            .map(|i| i + c),
    );
    active
}

fn draw_pattern<R: Rng>(spec: &CodebookSpec, cluster: Option<usize>, rng: &mut R) -> DropoutPattern {
    let per_layer = spec
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| match (l, cluster) {
            (0, Some(c)) => first_layer_for_cluster(spec, c, rng),
            _ => uniform_subset(rng, layer.n_channels, layer.k_active),
        })
        .collect();
    DropoutPattern { per_layer }
}

/// Assigns one unique pattern per item, deterministically from `spec.seed`.
///
/// Patterns are drawn uniformly and collisions are rejected against the set
/// of patterns seen so far.
pub fn assign_patterns(n_items: usize, spec: &CodebookSpec, cluster_of: Option<&[u16]>) -> Result<Codebook> {
    spec.validate()?;
    let cap = capacity(spec);
    if BigUint::from(n_items) > cap {
        return Err(Error::CapacityExceeded {
            requested: n_items as u64,
            capacity: cap.to_string(),
        });
    }
    let clusters = match (spec.is_clustered(), cluster_of) {
        (true, Some(ids)) => {
            if ids.len() != n_items {
                return Err(Error::ClusterConfig(format!(
                    "{} cluster ids for {n_items} items",
                    ids.len()
                )));
            }
            if let Some(&bad) = ids.iter().find(|&&c| c as usize >= spec.n_clusters) {
                return Err(Error::ClusterConfig(format!(
                    "cluster id {bad} >= n_clusters {}",
                    spec.n_clusters
                )));
            }
            let per_cluster = spec.capacity_per_cluster();
            let mut counts = vec![0usize; spec.n_clusters];
            for &c in ids {
                counts[c as usize] += 1;
            }
            if let Some(&worst) = counts.iter().max() {
                if BigUint::from(worst) > per_cluster {
                    return Err(Error::CapacityExceeded {
                        requested: worst as u64,
                        capacity: per_cluster.to_string(),
                    });
                }
            }
            Some(ids.to_vec())
        }
        (true, None) => {
            return Err(Error::ClusterConfig(format!(
                "spec has {} clusters but no cluster assignment was given",
                spec.n_clusters
            )))
        }
        (false, _) => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::with_capacity(n_items);
    let mut patterns = Vec::with_capacity(n_items);
    let mut retries = 0u64;
    for i in 0..n_items {
        let cluster = clusters.as_ref().map(|c| c[i] as usize);
        loop {
            let p = draw_pattern(spec, cluster, &mut rng);
            if seen.insert(p.clone()) {
                patterns.push(p);
                break;
            }
            retries += 1;
        }
    }
    Ok(Codebook {
        spec: spec.clone(),
        patterns,
        cluster_of: clusters,
        retries,
    })
}

/// Draws a pattern from the training distribution.
///
/// For clustered specs the cluster is drawn proportionally to `cluster_weights`
/// (uniform when absent). Collisions with training patterns are not checked.
pub fn sample_novel_pattern<R: Rng>(
    spec: &CodebookSpec,
    cluster_weights: Option<&[f64]>,
    rng: &mut R,
) -> Result<DropoutPattern> {
    spec.validate()?;
    let cluster = if spec.is_clustered() {
        let uniform;
        let weights = match cluster_weights {
            Some(w) => w,
            None => {
                uniform = vec![1.0; spec.n_clusters];
                &uniform
            }
        };
        if weights.len() != spec.n_clusters {
            return Err(Error::Config(format!(
                "{} cluster weights for {} clusters",
                weights.len(),
                spec.n_clusters
            )));
        }
        let dist = WeightedIndex::new(weights)
            .map_err(|e| Error::Config(format!("invalid cluster weights: {e}")))?;
        Some(dist.sample(rng))
    } else {
        None
    };
    Ok(draw_pattern(spec, cluster, rng))
}

/// Loads a codebook and checks it was generated for `expected`.
pub fn load_codebook_for(path: &Path, expected: &CodebookSpec) -> Result<Codebook> {
    let cb = load_codebook(path)?;
    if cb.spec.layers != expected.layers || cb.spec.n_clusters != expected.n_clusters {
        return Err(Error::RunConfig(format!(
            "codebook {} layers/clusters do not match the run configuration",
            path.display()
        )));
    }
    Ok(cb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(layers: &[(usize, usize)], n_clusters: usize, seed: u64) -> CodebookSpec {
        CodebookSpec {
            layers: layers.iter().map(|&(n, k)| LayerSpec::new(n, k)).collect(),
            n_clusters,
            seed,
        }
    }

    /// Independent oracle: plain u128 multiplicative formula.
    fn binomial_u128(n: u128, k: u128) -> u128 {
        let mut acc = 1u128;
        for i in 0..k {
            acc = acc * (n - i) / (i + 1);
        }
        acc
    }

    #[test]
    fn capacity_examples() {
        let standard = CodebookSpec::standard(1, 0);
        let cap = capacity(&standard);
        let lo = BigUint::from(188u32) * BigUint::from(10u32).pow(38);
        let hi = BigUint::from(189u32) * BigUint::from(10u32).pow(38);
        assert!(cap >= lo && cap < hi, "capacity {cap}");
        let oracle =
            BigUint::from(binomial_u128(128, 1)) * binomial_u128(256, 4) * binomial_u128(512, 16);
        assert_eq!(cap, oracle);
        assert_eq!(capacity(&tiny(&[(7, 0)], 1, 0)), BigUint::one());
        assert_eq!(capacity(&tiny(&[(5, 2)], 1, 0)), BigUint::from(10u32));
    }

    #[test]
    fn clustered_capacity_matches_enumeration() {
        // first layer (6,2) with 3 clusters: lowest = cluster, other from {3,4,5}
        let spec = tiny(&[(6, 2), (4, 1)], 3, 0);
        assert_eq!(capacity(&spec), BigUint::from(3u32 * 3 * 4));
        assert_eq!(spec.capacity_per_cluster(), BigUint::from(12u32));
        let standard32 = CodebookSpec::standard(32, 0);
        assert_eq!(
            capacity(&standard32),
            BigUint::from(32u32) * binomial(256, 4) * binomial(512, 16)
        );
    }

    #[test]
    fn scientific_format() {
        assert_eq!(scientific(&BigUint::from(12345u32)), "1.234e4");
        assert_eq!(scientific(&BigUint::from(10u32)), "10");
        let cap = capacity(&CodebookSpec::standard(1, 0));
        assert!(scientific(&cap).starts_with("1.88"));
        assert!(scientific(&cap).ends_with("e40"));
    }

    #[test]
    fn spec_validation() {
        assert!(tiny(&[(4, 5)], 1, 0).validate().is_err());
        assert!(tiny(&[(4, 1)], 5, 0).validate().is_err());
        assert!(tiny(&[(4, 0)], 2, 0).validate().is_err());
        assert!(tiny(&[(4, 1)], 4, 0).validate().is_ok());
        assert!(tiny(&[(4, 2)], 4, 0).validate().is_err());
        assert!(CodebookSpec::from_channels(&[4, 8], &[1], 1, 0).is_err());
    }

    #[test]
    fn assign_small_is_deterministic_and_distinct() {
        let spec = tiny(&[(4, 1)], 1, 7);
        let a = assign_patterns(3, &spec, None).unwrap();
        let b = assign_patterns(3, &spec, None).unwrap();
        assert_eq!(a, b);
        let set: HashSet<_> = a.patterns.iter().collect();
        assert_eq!(set.len(), 3);
        for p in &a.patterns {
            p.check(&spec).unwrap();
        }
    }

    #[test]
    fn assign_full_capacity_terminates() {
        let spec = tiny(&[(4, 2)], 1, 1);
        let cb = assign_patterns(6, &spec, None).unwrap();
        let set: HashSet<_> = cb.patterns.iter().collect();
        assert_eq!(set.len(), 6);
    }

    #[test]
    fn capacity_exceeded() {
        let spec = tiny(&[(4, 2)], 1, 1);
        assert!(matches!(
            assign_patterns(17, &spec, None),
            Err(Error::CapacityExceeded { .. })
        ));
        // per-cluster capacity: (3,1) with 3 clusters has one pattern per cluster
        let spec = tiny(&[(3, 1)], 3, 1);
        assert!(matches!(
            assign_patterns(2, &spec, Some(&[0, 0])),
            Err(Error::CapacityExceeded { .. })
        ));
    }

    #[test]
    fn cluster_encoding() {
        let spec = tiny(&[(8, 3), (5, 2)], 4, 3);
        let ids: Vec<u16> = (0..40).map(|i| (i % 4) as u16).collect();
        let cb = assign_patterns(40, &spec, Some(&ids)).unwrap();
        for (p, &c) in cb.patterns.iter().zip(&ids) {
            assert_eq!(p.per_layer[0][0], c as usize);
            assert!(p.per_layer[0][1..].iter().all(|&i| i >= 4));
            p.check(&spec).unwrap();
        }
        assert!(matches!(
            assign_patterns(40, &spec, None),
            Err(Error::ClusterConfig(_))
        ));
        let bad: Vec<u16> = vec![4; 40];
        assert!(matches!(
            assign_patterns(40, &spec, Some(&bad)),
            Err(Error::ClusterConfig(_))
        ));
    }

    #[test]
    fn novel_full_layer_is_forced() {
        let spec = tiny(&[(5, 5)], 1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let p = sample_novel_pattern(&spec, None, &mut rng).unwrap();
            assert_eq!(p.per_layer[0], vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn novel_binary_channel_frequency() {
        let spec = tiny(&[(2, 1)], 1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 10_000;
        let zeros = (0..draws)
            .filter(|_| sample_novel_pattern(&spec, None, &mut rng).unwrap().per_layer[0][0] == 0)
            .count();
        let freq = zeros as f64 / draws as f64;
        // 6 sigma of Binomial(10000, 0.5) is 0.03
        assert!((0.47..=0.53).contains(&freq), "freq {freq}");
    }

    #[test]
    fn novel_degenerate_weights() {
        let spec = CodebookSpec::standard(32, 0);
        let mut w = vec![0.0; 32];
        w[5] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let p = sample_novel_pattern(&spec, Some(&w), &mut rng).unwrap();
            assert_eq!(p.per_layer[0], vec![5]);
            p.check(&spec).unwrap();
        }
        assert!(sample_novel_pattern(&spec, Some(&[0.0; 32]), &mut rng).is_err());
        assert!(sample_novel_pattern(&spec, Some(&[1.0; 3]), &mut rng).is_err());
    }

    #[test]
    fn novel_is_deterministic_given_rng() {
        let spec = CodebookSpec::standard(1, 0);
        let a = sample_novel_pattern(&spec, None, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_novel_pattern(&spec, None, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pattern_ranks_roundtrip() {
        let spec = CodebookSpec::standard(1, 0);
        let p = sample_novel_pattern(&spec, None, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let ranks = p.ranks(&spec).unwrap();
        for ((r, layer), active) in ranks.iter().zip(&spec.layers).zip(&p.per_layer) {
            assert_eq!(&unrank_subset(layer.n_channels, layer.k_active, r).unwrap(), active);
        }
    }
}
