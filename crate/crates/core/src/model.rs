//! The generator: dropout pattern (+ shift) -> image.
//!
//! The encoder runs on a learnable constant tensor; a sample's only identity
//! is the set of channels its pattern keeps alive after each hierarchy. The
//! pooled code goes through a linear head to the latent, the shift amount is
//! embedded by a small MLP and joined to the latent, and a group-convolution
//! decoder upsamples 4x4 -> 32x32.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codebook::DropoutPattern;
use crate::data::{ImageBatch, ShiftParam, CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{
    BatchNorm2d, Buffer, ChannelMask, Conv2d, FeatureMap, GlobalAvgPool, Linear, Mode, Module, Param,
    ParamGroup, Relu, ResBlock, Scalar, Sigmoid, Silu, Upsample2x,
};
use crate::rng::{derive_seed, Stream};

/// Decoder input resolution; three 2x stages reach 32x32.
pub const DECODER_BASE: usize = 4;
pub const OUT_HW: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftConditioning {
    /// Embedding added to the latent.
    Add,
    /// Embedding concatenated to the latent.
    Concat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hierarchy_channels: Vec<usize>,
    pub active_channels: Vec<usize>,
    pub latent_dim: usize,
    pub encoder_spatial: usize,
    pub blocks_per_hierarchy: usize,
    pub decoder_channels: Vec<usize>,
    pub decoder_groups: usize,
    pub mlp_hidden: usize,
    pub shift_conditioning: ShiftConditioning,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::cifar10()
    }
}

impl ModelConfig {
    pub fn cifar10() -> Self {
        Self {
            hierarchy_channels: vec![128, 256, 512],
            active_channels: vec![1, 4, 16],
            latent_dim: 512,
            encoder_spatial: 4,
            blocks_per_hierarchy: 2,
            decoder_channels: vec![512, 256, 128, 64],
            decoder_groups: 8,
            mlp_hidden: 64,
            shift_conditioning: ShiftConditioning::Add,
        }
    }

    pub fn celeba() -> Self {
        Self {
            latent_dim: 256,
            ..Self::cifar10()
        }
    }

    /// Reduced model for CPU-scale memorization runs.
    pub fn toy() -> Self {
        Self {
            hierarchy_channels: vec![32, 64, 128],
            active_channels: vec![1, 2, 4],
            latent_dim: 64,
            encoder_spatial: 4,
            blocks_per_hierarchy: 1,
            decoder_channels: vec![128, 64, 32, 16],
            decoder_groups: 4,
            mlp_hidden: 16,
            shift_conditioning: ShiftConditioning::Add,
        }
    }

    /// Two hierarchies of 8 channels with 2 active; small enough for
    /// finite-difference checks.
    pub fn gradcheck() -> Self {
        Self {
            hierarchy_channels: vec![8, 8],
            active_channels: vec![2, 2],
            latent_dim: 8,
            encoder_spatial: 2,
            blocks_per_hierarchy: 1,
            decoder_channels: vec![8, 8, 4, 4],
            decoder_groups: 2,
            mlp_hidden: 4,
            shift_conditioning: ShiftConditioning::Add,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.hierarchy_channels.is_empty() {
            return err("at least one encoder hierarchy is required".into());
        }
        if self.hierarchy_channels.len() != self.active_channels.len() {
            return err(format!(
                "{} hierarchy channel counts but {} active counts",
                self.hierarchy_channels.len(),
                self.active_channels.len()
            ));
        }
        for (l, (&c, &k)) in self.hierarchy_channels.iter().zip(&self.active_channels).enumerate() {
            if c == 0 || k > c {
                return err(format!("hierarchy {l}: {k} active of {c} channels"));
            }
        }
        if self.latent_dim == 0 || self.encoder_spatial == 0 || self.mlp_hidden == 0 {
            return err("latent_dim, encoder_spatial and mlp_hidden must be positive".into());
        }
        if self.decoder_channels.len() != 4 {
            return err(format!(
                "decoder needs 4 channel counts (4x4 input, three 2x stages to {OUT_HW}x{OUT_HW}), got {}",
                self.decoder_channels.len()
            ));
        }
        if self.decoder_groups == 0 {
            return err("decoder_groups must be >= 1".into());
        }
        for &c in &self.decoder_channels {
            if c == 0 || c % self.decoder_groups != 0 {
                return err(format!(
                    "decoder channels {c} not divisible by {} groups",
                    self.decoder_groups
                ));
            }
        }
        Ok(())
    }

    fn decoder_input_dim(&self) -> usize {
        match self.shift_conditioning {
            ShiftConditioning::Add => self.latent_dim,
            ShiftConditioning::Concat => 2 * self.latent_dim,
        }
    }
}

#[derive(Debug, Clone)]
struct Hierarchy<F> {
    blocks: Vec<ResBlock<F>>,
    mask: ChannelMask,
    /// 1x1 conv + BN + ReLU into the next hierarchy's width.
    proj: Option<(Conv2d<F>, BatchNorm2d<F>, Relu)>,
}

#[derive(Debug, Clone)]
struct ShiftMlp<F> {
    fc1: Linear<F>,
    act: Silu<F>,
    fc2: Linear<F>,
}

#[derive(Debug, Clone)]
pub struct Generator<F> {
    cfg: ModelConfig,
    input_const: Param<F>,
    hierarchies: Vec<Hierarchy<F>>,
    pool: GlobalAvgPool,
    latent_head: Linear<F>,
    shift_mlp: ShiftMlp<F>,
    dec_fc: Linear<F>,
    dec_bn: BatchNorm2d<F>,
    dec_relu: Relu,
    stages: Vec<ResBlock<F>>,
    out_conv: Conv2d<F>,
    out_act: Sigmoid<F>,
    batch: usize,
}

impl<F: Scalar> Generator<F> {
    /// Fan-in scaled normal weights, unit BN scale, zero biases; deterministic in `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Init, 0));
        let s = cfg.encoder_spatial;
        let c0 = cfg.hierarchy_channels[0];
        let normal = Normal::new(0.0, 0.1).unwrap();
        let input_const = Param::new(
            "encoder.const",
            &[c0, s, s],
            (0..c0 * s * s).map(|_| F::of_f64(normal.sample(&mut rng))).collect(),
            false,
        );
        let n_h = cfg.hierarchy_channels.len();
        let mut hierarchies = Vec::with_capacity(n_h);
        for (l, &c) in cfg.hierarchy_channels.iter().enumerate() {
            let blocks = (0..cfg.blocks_per_hierarchy)
                .map(|j| ResBlock::new(&format!("encoder.h{l}.block{j}"), c, c, 1, &mut rng))
                .collect();
            let proj = cfg.hierarchy_channels.get(l + 1).map(|&next| {
                (
                    Conv2d::new(&format!("encoder.h{l}.proj"), c, next, 1, 1, false, &mut rng),
                    BatchNorm2d::new(&format!("encoder.h{l}.proj_bn"), next),
                    Relu::default(),
                )
            });
            hierarchies.push(Hierarchy {
                blocks,
                mask: ChannelMask::default(),
                proj,
            });
        }
        let c_last = *cfg.hierarchy_channels.last().unwrap();
        let latent_head = Linear::new("latent", c_last, cfg.latent_dim, true, &mut rng);
        let mut shift_mlp = ShiftMlp {
            fc1: Linear::new("shift_mlp.fc1", 1, cfg.mlp_hidden, true, &mut rng),
            act: Silu::default(),
            fc2: Linear::new("shift_mlp.fc2", cfg.mlp_hidden, cfg.latent_dim, true, &mut rng),
        };
        for p in shift_mlp.fc1.params_mut().into_iter().chain(shift_mlp.fc2.params_mut()) {
            p.group = ParamGroup::ShiftMlp;
        }
        let d = &cfg.decoder_channels;
        let dec_fc = Linear::new(
            "decoder.fc",
            cfg.decoder_input_dim(),
            d[0] * DECODER_BASE * DECODER_BASE,
            false,
            &mut rng,
        );
        let stages = (0..3)
            .map(|i| ResBlock::new(&format!("decoder.stage{i}"), d[i], d[i + 1], cfg.decoder_groups, &mut rng))
            .collect();
        let out_conv = Conv2d::new("decoder.out", d[3], CHANNELS, 3, 1, true, &mut rng);
        Ok(Self {
            dec_bn: BatchNorm2d::new("decoder.bn0", d[0]),
            cfg,
            input_const,
            hierarchies,
            pool: GlobalAvgPool::default(),
            latent_head,
            shift_mlp,
            dec_fc,
            dec_relu: Relu::default(),
            stages,
            out_conv,
            out_act: Sigmoid::default(),
            batch: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Maps patterns to latents, shape (latent_dim, b).
    pub fn encode(&mut self, patterns: &[&DropoutPattern], mode: Mode) -> Result<FeatureMap<F>> {
        let b = patterns.len();
        if b == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        for p in patterns {
            if p.per_layer.len() != self.hierarchies.len() {
                return Err(Error::PatternShapeMismatch(format!(
                    "pattern has {} layers, model has {} hierarchies",
                    p.per_layer.len(),
                    self.hierarchies.len()
                )));
            }
        }
        for (l, h) in self.hierarchies.iter_mut().enumerate() {
            let lists: Vec<&[usize]> = patterns.iter().map(|p| p.per_layer[l].as_slice()).collect();
            h.mask
                .set(self.cfg.hierarchy_channels[l], &lists)
                .map_err(|e| Error::PatternShapeMismatch(format!("hierarchy {l}: {e}")))?;
        }
        self.batch = b;
        let s = self.cfg.encoder_spatial;
        let c0 = self.cfg.hierarchy_channels[0];
        let mut x = FeatureMap::zeros(c0, b, s, s);
        for (c, chunk) in x.data.chunks_exact_mut(b * s * s).enumerate() {
            let src = &self.input_const.value[c * s * s..(c + 1) * s * s];
            for slab in chunk.chunks_exact_mut(s * s) {
                slab.copy_from_slice(src);
            }
        }
        for h in &mut self.hierarchies {
            for block in &mut h.blocks {
                x = block.forward(&x, mode);
            }
            x = h.mask.forward(x);
            if let Some((conv, bn, relu)) = &mut h.proj {
                let y = conv.forward(&x);
                x = relu.forward(bn.forward(&y, mode));
            }
        }
        let pooled = self.pool.forward(&x);
        Ok(self.latent_head.forward(&pooled))
    }

    /// Embeds normalized shift amounts, shape (latent_dim, b).
    pub fn shift_embed(&mut self, shifts: &[ShiftParam]) -> FeatureMap<F> {
        let input = shifts.iter().map(|r| F::of_f64(r.normalized())).collect();
        let x = FeatureMap::vectors(1, shifts.len(), input);
        let h = self.shift_mlp.fc1.forward(&x);
        let h = self.shift_mlp.act.forward(h);
        self.shift_mlp.fc2.forward(&h)
    }

    fn join(&self, latent: &FeatureMap<F>, emb: &FeatureMap<F>) -> FeatureMap<F> {
        match self.cfg.shift_conditioning {
            ShiftConditioning::Add => {
                let mut z = latent.clone();
                z.add_assign(emb);
                z
            }
            ShiftConditioning::Concat => {
                let mut data = latent.data.clone();
                data.extend_from_slice(&emb.data);
                FeatureMap::vectors(latent.c + emb.c, latent.b, data)
            }
        }
    }

    /// Decodes joined latents of shape (decoder input dim, b) into images.
    pub fn decode(&mut self, z: &FeatureMap<F>, mode: Mode) -> Result<ImageBatch<F>> {
        if z.c != self.cfg.decoder_input_dim() || z.h != 1 || z.w != 1 {
            return Err(Error::Config(format!(
                "decoder expects {} input features, got {}",
                self.cfg.decoder_input_dim(),
                z.c * z.h * z.w
            )));
        }
        let b = z.b;
        let d0 = self.cfg.decoder_channels[0];
        let hw = DECODER_BASE * DECODER_BASE;
        let flat = self.dec_fc.forward(z);
        // (d0 * hw, b) -> (d0, b, 4, 4)
        let mut x = FeatureMap::zeros(d0, b, DECODER_BASE, DECODER_BASE);
        for c in 0..d0 {
            for p in 0..hw {
                for bi in 0..b {
                    x.data[(c * b + bi) * hw + p] = flat.data[(c * hw + p) * b + bi];
                }
            }
        }
        let x = self.dec_bn.forward(&x, mode);
        let mut x = self.dec_relu.forward(x);
        for stage in &mut self.stages {
            let up = Upsample2x.forward(&x);
            x = stage.forward(&up, mode);
        }
        let y = self.out_conv.forward(&x);
        let y = self.out_act.forward(y);
        Ok(to_images(&y))
    }

    /// g(z, r): decode(join(encode(z), shift_embed(r))).
    pub fn forward(&mut self, patterns: &[&DropoutPattern], shifts: &[ShiftParam], mode: Mode) -> Result<ImageBatch<F>> {
        if shifts.len() != patterns.len() {
            return Err(Error::Config(format!(
                "{} shifts for {} patterns",
                shifts.len(),
                patterns.len()
            )));
        }
        let latent = self.encode(patterns, mode)?;
        let emb = self.shift_embed(shifts);
        let z = self.join(&latent, &emb);
        self.decode(&z, mode)
    }

    /// Accumulates parameter gradients for the last `forward` given d(loss)/d(output).
    pub fn backward(&mut self, d_out: &ImageBatch<F>) {
        let b = self.batch;
        assert_eq!(d_out.b, b, "backward batch does not match forward");
        let dy = from_images(d_out);
        let dy = self.out_act.backward(dy);
        let mut dx = self.out_conv.backward(&dy);
        for stage in self.stages.iter_mut().rev() {
            let d = stage.backward(dx);
            dx = Upsample2x.backward(&d);
        }
        let dx = self.dec_relu.backward(dx);
        let dx = self.dec_bn.backward(&dx);
        let d0 = self.cfg.decoder_channels[0];
        let hw = DECODER_BASE * DECODER_BASE;
        let mut dflat = vec![F::zero(); d0 * hw * b];
        for c in 0..d0 {
            for p in 0..hw {
                for bi in 0..b {
                    dflat[(c * hw + p) * b + bi] = dx.data[(c * b + bi) * hw + p];
                }
            }
        }
        let dz = self.dec_fc.backward(&FeatureMap::vectors(d0 * hw, b, dflat));
        let latent = self.cfg.latent_dim;
        let (d_latent, d_emb) = match self.cfg.shift_conditioning {
            ShiftConditioning::Add => (dz.clone(), dz),
            ShiftConditioning::Concat => (
                FeatureMap::vectors(latent, b, dz.data[..latent * b].to_vec()),
                FeatureMap::vectors(latent, b, dz.data[latent * b..].to_vec()),
            ),
        };
        let dh = self.shift_mlp.fc2.backward(&d_emb);
        let dh = self.shift_mlp.act.backward(dh);
        self.shift_mlp.fc1.backward(&dh);

        let dpool = self.latent_head.backward(&d_latent);
        let mut dx = self.pool.backward(&dpool);
        for h in self.hierarchies.iter_mut().rev() {
            if let Some((conv, bn, relu)) = &mut h.proj {
                let d = relu.backward(dx);
                let d = bn.backward(&d);
                dx = conv.backward(&d);
            }
            dx = h.mask.backward(dx);
            for block in h.blocks.iter_mut().rev() {
                dx = block.backward(dx);
            }
        }
        let s2 = self.cfg.encoder_spatial * self.cfg.encoder_spatial;
        for (c, chunk) in dx.data.chunks_exact(b * s2).enumerate() {
            let g = &mut self.input_const.grad[c * s2..(c + 1) * s2];
            for slab in chunk.chunks_exact(s2) {
                for (gv, &d) in g.iter_mut().zip(slab) {
                    *gv += d;
                }
            }
        }
    }

    fn encoder_params(&self) -> Vec<&Param<F>> {
        let mut v = vec![&self.input_const];
        for h in &self.hierarchies {
            for block in &h.blocks {
                v.extend(block.params());
            }
            if let Some((conv, bn, _)) = &h.proj {
                v.extend(conv.params());
                v.extend(bn.params());
            }
        }
        v.extend(self.latent_head.params());
        v
    }

    fn decoder_params(&self) -> Vec<&Param<F>> {
        let mut v = self.dec_fc.params();
        v.extend(self.dec_bn.params());
        for s in &self.stages {
            v.extend(s.params());
        }
        v.extend(self.out_conv.params());
        v
    }

    pub fn encoder_param_count(&self) -> usize {
        self.encoder_params().iter().map(|p| p.len()).sum()
    }

    pub fn decoder_param_count(&self) -> usize {
        self.decoder_params().iter().map(|p| p.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Param<F>> {
        self.params().into_iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<F>> {
        self.params_mut().into_iter().find(|p| p.name == name)
    }

    /// SHA-256 over all parameter and buffer values, as f64 little-endian.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::new();
        for p in self.params() {
            bytes.extend(p.name.as_bytes());
            p.value.iter().for_each(|v| bytes.extend(v.as_f64().to_le_bytes()));
        }
        for buf in self.buffers() {
            bytes.extend(buf.name.as_bytes());
            buf.value.iter().for_each(|v| bytes.extend(v.as_f64().to_le_bytes()));
        }
        crate::bin::sha256_hex(&bytes)
    }
}

impl<F: Scalar> Module<F> for Generator<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut v = self.encoder_params();
        v.extend(self.shift_mlp.fc1.params());
        v.extend(self.shift_mlp.fc2.params());
        v.extend(self.decoder_params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = vec![&mut self.input_const];
        for h in &mut self.hierarchies {
            for block in &mut h.blocks {
                v.extend(block.params_mut());
            }
            if let Some((conv, bn, _)) = &mut h.proj {
                v.extend(conv.params_mut());
                v.extend(bn.params_mut());
            }
        }
        v.extend(self.latent_head.params_mut());
        v.extend(self.shift_mlp.fc1.params_mut());
        v.extend(self.shift_mlp.fc2.params_mut());
        v.extend(self.dec_fc.params_mut());
        v.extend(self.dec_bn.params_mut());
        for s in &mut self.stages {
            v.extend(s.params_mut());
        }
        v.extend(self.out_conv.params_mut());
        v
    }

    fn buffers(&self) -> Vec<&Buffer<F>> {
        let mut v = Vec::new();
        for h in &self.hierarchies {
            for block in &h.blocks {
                v.extend(block.buffers());
            }
            if let Some((_, bn, _)) = &h.proj {
                v.extend(bn.buffers());
            }
        }
        v.extend(self.dec_bn.buffers());
        for s in &self.stages {
            v.extend(s.buffers());
        }
        v
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<F>> {
        let mut v = Vec::new();
        for h in &mut self.hierarchies {
            for block in &mut h.blocks {
                v.extend(block.buffers_mut());
            }
            if let Some((_, bn, _)) = &mut h.proj {
                v.extend(bn.buffers_mut());
            }
        }
        v.extend(self.dec_bn.buffers_mut());
        for s in &mut self.stages {
            v.extend(s.buffers_mut());
        }
        v
    }
}

/// (3, b, h, w) feature map -> (b, 3, h, w) images.
fn to_images<F: Scalar>(y: &FeatureMap<F>) -> ImageBatch<F> {
    let hw = y.hw();
    let mut out = ImageBatch::zeros(y.b, y.h, y.w);
    for c in 0..y.c {
        for bi in 0..y.b {
            out.data[(bi * y.c + c) * hw..][..hw].copy_from_slice(&y.data[(c * y.b + bi) * hw..][..hw]);
        }
    }
    out
}

fn from_images<F: Scalar>(x: &ImageBatch<F>) -> FeatureMap<F> {
    let hw = x.h * x.w;
    let mut out = FeatureMap::zeros(CHANNELS, x.b, x.h, x.w);
    for c in 0..CHANNELS {
        for bi in 0..x.b {
            out.data[(c * x.b + bi) * hw..][..hw].copy_from_slice(&x.data[(bi * CHANNELS + c) * hw..][..hw]);
        }
    }
    out
}
