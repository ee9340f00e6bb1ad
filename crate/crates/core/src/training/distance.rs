//! Reconstruction distances: mean squared error, and a perceptual distance on
//! unit-normalized features of a fixed convolutional stack.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::{Container, TensorRecord};
use crate::data::{ImageBatch, CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{AvgPool2x, Conv2d, FeatureMap, Relu, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    Mse,
    Perceptual,
}

impl std::str::FromStr for DistanceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Self::Mse),
            "perceptual" => Ok(Self::Perceptual),
            other => Err(Error::RunConfig(format!("unknown distance {other:?}"))),
        }
    }
}

impl std::fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mse => "mse",
            Self::Perceptual => "perceptual",
        })
    }
}

fn check_shapes<F: Scalar>(pred: &ImageBatch<F>, target: &ImageBatch<F>) -> Result<()> {
    if !pred.same_shape(target) {
        return Err(Error::Config(format!(
            "distance shape mismatch: {}x{}x{} vs {}x{}x{}",
            pred.b, pred.h, pred.w, target.b, target.h, target.w
        )));
    }
    Ok(())
}

/// Mean squared error over all elements and its gradient wrt `pred`.
pub fn mse<F: Scalar>(pred: &ImageBatch<F>, target: &ImageBatch<F>) -> Result<(f64, ImageBatch<F>)> {
    check_shapes(pred, target)?;
    let n = pred.data.len() as f64;
    let mut sum = 0.0f64;
    let scale = F::of_f64(2.0 / n);
    let grad = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&a, &b)| {
            let d = a - b;
            sum += d.as_f64() * d.as_f64();
            scale * d
        })
        .collect();
    Ok((sum / n, ImageBatch { data: grad, ..*pred }))
}

/// Fixed feature extractor: 3x3 conv + ReLU layers, optionally preceded by
/// 2x2 average pooling; every layer's activation is a tap.
#[derive(Debug, Clone)]
pub struct PerceptualNet<F> {
    convs: Vec<Conv2d<F>>,
    pool_before: Vec<bool>,
    relus: Vec<Relu>,
    in_sizes: Vec<(usize, usize)>,
}

const NORM_EPS: f64 = 1e-10;

impl<F: Scalar> PerceptualNet<F> {
    /// Random weights; only for tests and smoke runs, real assets are supplied externally.
    pub fn random(widths: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = CHANNELS;
        let mut convs = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            let mut c = Conv2d::new(&format!("perceptual.{i}"), cin, w, 3, 1, true, &mut rng);
            c.frozen = true;
            convs.push(c);
            cin = w;
        }
        let pool_before = (0..widths.len()).map(|i| i > 0).collect();
        Self::assemble(convs, pool_before)
    }

    fn assemble(convs: Vec<Conv2d<F>>, pool_before: Vec<bool>) -> Self {
        let n = convs.len();
        Self {
            convs,
            pool_before,
            relus: vec![Relu::default(); n],
            in_sizes: vec![(0, 0); n],
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.set("kind", "perceptual");
        c.set("layers", self.convs.len());
        c.set(
            "pool_before",
            self.pool_before.iter().map(|&p| if p { "1" } else { "0" }).collect::<Vec<_>>().join(","),
        );
        for (i, conv) in self.convs.iter().enumerate() {
            let w = &conv.weight;
            c.push(TensorRecord::new(
                format!("perceptual.{i}.weight"),
                &w.shape,
                w.value.iter().map(|v| v.as_f64() as f32).collect(),
            ));
            let b = conv.bias.as_ref().unwrap();
            c.push(TensorRecord::new(
                format!("perceptual.{i}.bias"),
                &b.shape,
                b.value.iter().map(|v| v.as_f64() as f32).collect(),
            ));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let bad = |m: String| Error::DistanceAsset(m);
        if c.get("kind") != Some("perceptual") {
            return Err(bad("asset kind is not 'perceptual'".into()));
        }
        let layers: usize = c
            .get("layers")
            .and_then(|v| v.parse().ok())
            .filter(|&n| n > 0)
            .ok_or_else(|| bad("missing or invalid 'layers'".into()))?;
        let pool_before: Vec<bool> = c
            .get("pool_before")
            .ok_or_else(|| bad("missing 'pool_before'".into()))?
            .split(',')
            .map(|s| match s.trim() {
                "0" => Ok(false),
                "1" => Ok(true),
                o => Err(bad(format!("bad pool flag {o:?}"))),
            })
            .collect::<Result<_>>()?;
        if pool_before.len() != layers {
            return Err(bad("pool_before length differs from layer count".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut convs = Vec::with_capacity(layers);
        let mut cin = CHANNELS;
        for i in 0..layers {
            let w = c
                .tensor(&format!("perceptual.{i}.weight"))
                .ok_or_else(|| bad(format!("missing perceptual.{i}.weight")))?;
            let b = c
                .tensor(&format!("perceptual.{i}.bias"))
                .ok_or_else(|| bad(format!("missing perceptual.{i}.bias")))?;
            if w.shape.len() != 4 || w.shape[1] != cin || w.shape[2] != 3 || w.shape[3] != 3 {
                return Err(bad(format!("layer {i}: weight shape {:?} invalid for {cin} inputs", w.shape)));
            }
            let cout = w.shape[0];
            if b.shape != [cout] {
                return Err(bad(format!("layer {i}: bias shape {:?}", b.shape)));
            }
            if w.data.iter().chain(&b.data).any(|v| !v.is_finite()) {
                return Err(bad(format!("layer {i}: non-finite weights")));
            }
            let mut conv = Conv2d::new(&format!("perceptual.{i}"), cin, cout, 3, 1, true, &mut rng);
            conv.weight.value = w.data.iter().map(|&v| F::of_f64(v as f64)).collect();
            conv.bias.as_mut().unwrap().value = b.data.iter().map(|&v| F::of_f64(v as f64)).collect();
            conv.frozen = true;
            convs.push(conv);
            cin = cout;
        }
        Ok(Self::assemble(convs, pool_before))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)
            .map_err(|e| Error::DistanceAsset(format!("{}: {e}", path.display())))?
            .map_err(Error::DistanceAsset)?;
        Self::from_container(&c)
    }

    fn input(x: &ImageBatch<F>) -> FeatureMap<F> {
        // (b, 3, h, w) in [0,1] -> (3, b, h, w) in [-1,1]
        let hw = x.h * x.w;
        let two = F::of_f64(2.0);
        let mut out = FeatureMap::zeros(CHANNELS, x.b, x.h, x.w);
        for c in 0..CHANNELS {
            for bi in 0..x.b {
                let src = &x.data[(bi * CHANNELS + c) * hw..][..hw];
                let dst = &mut out.data[(c * x.b + bi) * hw..][..hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = two * s - F::one();
                }
            }
        }
        out
    }

    fn features(&mut self, x: &ImageBatch<F>) -> Vec<FeatureMap<F>> {
        let mut h = Self::input(x);
        let mut taps = Vec::with_capacity(self.convs.len());
        for i in 0..self.convs.len() {
            self.in_sizes[i] = (h.h, h.w);
            if self.pool_before[i] {
                h = AvgPool2x.forward(&h);
            }
            let y = self.convs[i].forward(&h);
            h = self.relus[i].forward(y);
            taps.push(h.clone());
        }
        taps
    }

    fn backward(&mut self, mut d_taps: Vec<FeatureMap<F>>) -> FeatureMap<F> {
        let mut d = d_taps.pop().unwrap();
        for i in (0..self.convs.len()).rev() {
            d = self.relus[i].backward(d);
            d = self.convs[i].backward(&d);
            if self.pool_before[i] {
                let (h, w) = self.in_sizes[i];
                d = AvgPool2x.backward(&d, h, w);
            }
            if i > 0 {
                d.add_assign(&d_taps[i - 1]);
            }
        }
        d
    }

    /// Mean over layers of the spatial mean (summed over channels) of squared
    /// differences between unit-normalized features, averaged over the batch.
    /// Returns the gradient wrt `pred` when `want_grad`.
    pub fn distance(
        &mut self,
        pred: &ImageBatch<F>,
        target: &ImageBatch<F>,
        want_grad: bool,
    ) -> Result<(f64, Option<ImageBatch<F>>)> {
        check_shapes(pred, target)?;
        let target_feats = self.features(target);
        let pred_feats = self.features(pred);
        let n_layers = self.convs.len() as f64;
        let b = pred.b;
        let mut total = 0.0;
        let mut d_taps = Vec::with_capacity(pred_feats.len());
        for (fp, ft) in pred_feats.iter().zip(&target_feats) {
            let (c, hw) = (fp.c, fp.hw());
            let scale = 1.0 / (n_layers * hw as f64 * b as f64);
            let mut d = FeatureMap::zeros(c, b, fp.h, fp.w);
            for bi in 0..b {
                for p in 0..hw {
                    let idx = |ch: usize| (ch * b + bi) * hw + p;
                    let norm = |f: &FeatureMap<F>| (0..c).map(|ch| f.data[idx(ch)].as_f64().powi(2)).sum::<f64>().sqrt();
                    let (sp, st) = (norm(fp), norm(ft));
                    let (dp, dt) = (sp + NORM_EPS, st + NORM_EPS);
                    let mut dot = 0.0;
                    let mut g = vec![0.0; c];
                    for ch in 0..c {
                        let np = fp.data[idx(ch)].as_f64() / dp;
                        let nt = ft.data[idx(ch)].as_f64() / dt;
                        total += scale * (np - nt).powi(2);
                        g[ch] = 2.0 * scale * (np - nt);
                        dot += fp.data[idx(ch)].as_f64() * g[ch];
                    }
                    if want_grad {
                        for ch in 0..c {
                            let f = fp.data[idx(ch)].as_f64();
                            let mut v = g[ch] / dp;
                            if sp > 0.0 {
                                v -= f * dot / (sp * dp * dp);
                            }
                            d.data[idx(ch)] = F::of_f64(v);
                        }
                    }
                }
            }
            d_taps.push(d);
        }
        if !want_grad {
            return Ok((total, None));
        }
        let dx = self.backward(d_taps);
        // undo layout change and the [0,1] -> [-1,1] map
        let hw = pred.h * pred.w;
        let two = F::of_f64(2.0);
        let mut grad = ImageBatch::zeros(b, pred.h, pred.w);
        for c in 0..CHANNELS {
            for bi in 0..b {
                let src = &dx.data[(c * b + bi) * hw..][..hw];
                let dst = &mut grad.data[(bi * CHANNELS + c) * hw..][..hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = two * s;
                }
            }
        }
        Ok((total, Some(grad)))
    }
}

/// A configured distance, ready to score batches.
#[derive(Debug, Clone)]
pub enum Distance<F> {
    Mse,
    Perceptual(Box<PerceptualNet<F>>),
}

impl<F: Scalar> Distance<F> {
    /// The perceptual kind needs a feature asset.
    pub fn new(kind: DistanceKind, asset: Option<&Path>) -> Result<Self> {
        match kind {
            DistanceKind::Mse => Ok(Self::Mse),
            DistanceKind::Perceptual => {
                let path = asset.ok_or_else(|| {
                    Error::DistanceAsset("perceptual distance needs a feature asset path".into())
                })?;
                Ok(Self::Perceptual(Box::new(PerceptualNet::load(path)?)))
            }
        }
    }

    pub fn loss_and_grad(&mut self, pred: &ImageBatch<F>, target: &ImageBatch<F>) -> Result<(f64, ImageBatch<F>)> {
        match self {
            Self::Mse => mse(pred, target),
            Self::Perceptual(net) => {
                let (v, g) = net.distance(pred, target, true)?;
                Ok((v, g.unwrap()))
            }
        }
    }

    pub fn value(&mut self, pred: &ImageBatch<F>, target: &ImageBatch<F>) -> Result<f64> {
        match self {
            Self::Mse => Ok(mse(pred, target)?.0),
            Self::Perceptual(net) => Ok(net.distance(pred, target, false)?.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{shift_transform, Dataset, ShiftParam};
    use rand::Rng;

    #[test]
    fn mse_examples() {
        let zeros = ImageBatch::<f64>::zeros(1, 32, 32);
        let ones = ImageBatch {
            data: vec![1.0; 3 * 32 * 32],
            ..zeros.clone()
        };
        assert_eq!(mse(&zeros, &ones).unwrap().0, 1.0);
        assert_eq!(mse(&ones, &ones).unwrap().0, 0.0);
        let other = ImageBatch::<f64>::zeros(2, 32, 32);
        assert!(mse(&zeros, &other).is_err());
    }

    #[test]
    fn perceptual_identity_and_ordering() {
        let mut net = PerceptualNet::<f64>::random(&[8, 16, 16], 3);
        let ds = Dataset::synthetic(4, 32, 12).unwrap();
        let x: ImageBatch<f64> = ds.images.cast();
        let (same, _) = net.distance(&x, &x, false).unwrap();
        assert_eq!(same, 0.0);
        let shifted = shift_transform(&x, ShiftParam::new(4, 8).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut noisy = x.clone();
        noisy
            .data
            .iter_mut()
            .for_each(|v| *v = (*v + rng.random_range(-1.0 / 255.0..1.0 / 255.0)).clamp(0.0, 1.0));
        let d_shift = net.distance(&x, &shifted, false).unwrap().0;
        let d_noise = net.distance(&x, &noisy, false).unwrap().0;
        assert!(d_shift > d_noise, "{d_shift} <= {d_noise}");
        assert!(d_noise >= 0.0);
    }

    #[test]
    fn perceptual_gradient_matches_finite_differences() {
        let mut net = PerceptualNet::<f64>::random(&[4, 6], 5);
        let ds = Dataset::synthetic(2, 8, 2).unwrap();
        let target: ImageBatch<f64> = ds.images.cast();
        let mut pred = target.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        pred.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        let (_, grad) = net.distance(&pred, &target, true).unwrap();
        let grad = grad.unwrap();
        let eps = 1e-6;
        for i in [0usize, 17, 100, 250, 383] {
            let mut up = pred.clone();
            up.data[i] += eps;
            let mut dn = pred.clone();
            dn.data[i] -= eps;
            let fd = (net.distance(&up, &target, false).unwrap().0 - net.distance(&dn, &target, false).unwrap().0)
                / (2.0 * eps);
            let denom = fd.abs().max(grad.data[i].abs()).max(1e-8);
            assert!((fd - grad.data[i]).abs() / denom < 1e-4, "{i}: {fd} vs {}", grad.data[i]);
        }
    }

    #[test]
    fn asset_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feat.dawt");
        let net = PerceptualNet::<f32>::random(&[4, 8], 1);
        net.to_container().save(&path).unwrap();
        let mut loaded = Distance::<f32>::new(DistanceKind::Perceptual, Some(&path)).unwrap();
        let ds = Dataset::synthetic(2, 16, 3).unwrap();
        assert_eq!(loaded.value(&ds.images, &ds.images).unwrap(), 0.0);

        assert!(matches!(
            Distance::<f32>::new(DistanceKind::Perceptual, None),
            Err(Error::DistanceAsset(_))
        ));
        assert!(matches!(
            Distance::<f32>::new(DistanceKind::Perceptual, Some(&dir.path().join("missing"))),
            Err(Error::DistanceAsset(_))
        ));
        let mut c = net.to_container();
        c.tensors.remove(1);
        c.save(&path).unwrap();
        assert!(matches!(
            Distance::<f32>::new(DistanceKind::Perceptual, Some(&path)),
            Err(Error::DistanceAsset(_))
        ));
    }
}
