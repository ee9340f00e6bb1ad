use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{gemm, Buffer, FeatureMap, Mode, Module, Param, Scalar, Strides};

fn kaiming<F: Scalar, R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Vec<F> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| F::of_f64(normal.sample(rng))).collect()
}

/// 2-D convolution, stride 1, "same" padding, kernel 1x1 or 3x3, optional groups.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub groups: usize,
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    /// Skip weight gradients (fixed feature extractors).
    pub frozen: bool,
    col: Vec<F>,
    in_shape: (usize, usize, usize, usize),
}

impl<F: Scalar> Conv2d<F> {
    pub fn new<R: Rng>(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        groups: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel must be 1 or 3");
        assert!(groups >= 1 && cin % groups == 0 && cout % groups == 0, "bad groups");
        let cin_g = cin / groups;
        let fan_in = cin_g * kernel * kernel;
        let shape = [cout, cin_g, kernel, kernel];
        let weight = Param::new(
            format!("{name}.weight"),
            &shape,
            kaiming(rng, shape.iter().product(), fan_in),
            true,
        );
        let bias = bias.then(|| Param::zeros(format!("{name}.bias"), &[cout], false));
        Self {
            cin,
            cout,
            kernel,
            groups,
            weight,
            bias,
            frozen: false,
            col: Vec::new(),
            in_shape: (0, 0, 0, 0),
        }
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    fn im2col(&mut self, x: &FeatureMap<F>) {
        let (b, h, w) = (x.b, x.h, x.w);
        let n = x.plane();
        let rows = self.cin * 9;
        self.col.clear();
        self.col.resize(rows * n, F::zero());
        for ci in 0..self.cin {
            let src = &x.data[ci * n..(ci + 1) * n];
            for ky in 0..3 {
                for kx in 0..3 {
                    let dst = &mut self.col[(ci * 9 + ky * 3 + kx) * n..][..n];
                    for bi in 0..b {
                        for y in 0..h {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let srow = &src[(bi * h + sy as usize) * w..][..w];
                            let drow = &mut dst[(bi * h + y) * w..][..w];
                            let (x0, x1) = match kx {
                                0 => (1, w),
                                1 => (0, w),
                                _ => (0, w.saturating_sub(1)),
                            };
                            for xx in x0..x1 {
                                drow[xx] = srow[xx + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, dcol: &[F], dx: &mut FeatureMap<F>) {
        let (b, h, w) = (dx.b, dx.h, dx.w);
        let n = dx.plane();
        for ci in 0..self.cin {
            let dst = &mut dx.data[ci * n..(ci + 1) * n];
            for ky in 0..3 {
                for kx in 0..3 {
                    let src = &dcol[(ci * 9 + ky * 3 + kx) * n..][..n];
                    for bi in 0..b {
                        for y in 0..h {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let srow = &src[(bi * h + y) * w..][..w];
                            let drow = &mut dst[(bi * h + sy as usize) * w..][..w];
                            let (x0, x1) = match kx {
                                0 => (1, w),
                                1 => (0, w),
                                _ => (0, w.saturating_sub(1)),
                            };
                            for xx in x0..x1 {
                                drow[xx + kx - 1] += srow[xx];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &FeatureMap<F>) -> FeatureMap<F> {
        assert_eq!(x.c, self.cin, "{}: channel mismatch", self.weight.name);
        self.in_shape = (x.c, x.b, x.h, x.w);
        let n = x.plane();
        if self.kernel == 3 {
            self.im2col(x);
        } else {
            self.col.clear();
            self.col.extend_from_slice(&x.data);
        }
        let mut y = FeatureMap::zeros(self.cout, x.b, x.h, x.w);
        let (cin_g, cout_g, taps) = (self.cin / self.groups, self.cout / self.groups, self.taps());
        let kdim = cin_g * taps;
        for g in 0..self.groups {
            gemm(
                cout_g,
                kdim,
                n,
                F::one(),
                &self.weight.value[g * cout_g * kdim..],
                Strides::rm(kdim),
                &self.col[g * kdim * n..],
                Strides::rm(n),
                F::zero(),
                &mut y.data[g * cout_g * n..],
                Strides::rm(n),
            );
        }
        if let Some(bias) = &self.bias {
            for (o, plane) in y.data.chunks_exact_mut(n).enumerate() {
                let bv = bias.value[o];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        y
    }

    pub fn backward(&mut self, dy: &FeatureMap<F>) -> FeatureMap<F> {
        let (c, b, h, w) = self.in_shape;
        let n = b * h * w;
        let (cin_g, cout_g, taps) = (self.cin / self.groups, self.cout / self.groups, self.taps());
        let kdim = cin_g * taps;
        if !self.frozen {
            for g in 0..self.groups {
                gemm(
                    cout_g,
                    n,
                    kdim,
                    F::one(),
                    &dy.data[g * cout_g * n..],
                    Strides::rm(n),
                    &self.col[g * kdim * n..],
                    Strides::tr(n),
                    F::one(),
                    &mut self.weight.grad[g * cout_g * kdim..],
                    Strides::rm(kdim),
                );
            }
            if let Some(bias) = &mut self.bias {
                for (o, plane) in dy.data.chunks_exact(n).enumerate() {
                    bias.grad[o] += plane.iter().copied().sum::<F>();
                }
            }
        }
        let mut dcol = vec![F::zero(); self.cin * taps * n];
        for g in 0..self.groups {
            gemm(
                kdim,
                cout_g,
                n,
                F::one(),
                &self.weight.value[g * cout_g * kdim..],
                Strides::tr(kdim),
                &dy.data[g * cout_g * n..],
                Strides::rm(n),
                F::zero(),
                &mut dcol[g * kdim * n..],
                Strides::rm(n),
            );
        }
        if self.kernel == 1 {
            return FeatureMap {
                c,
                b,
                h,
                w,
                data: dcol,
            };
        }
        let mut dx = FeatureMap::zeros(c, b, h, w);
        self.col2im(&dcol, &mut dx);
        dx
    }
}

impl<F: Scalar> Module<F> for Conv2d<F> {
    fn params(&self) -> Vec<&Param<F>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Fully connected layer on (features, batch) matrices.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub fin: usize,
    pub fout: usize,
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    input: Vec<F>,
    batch: usize,
}

impl<F: Scalar> Linear<F> {
    pub fn new<R: Rng>(name: &str, fin: usize, fout: usize, bias: bool, rng: &mut R) -> Self {
        Self {
            fin,
            fout,
            weight: Param::new(format!("{name}.weight"), &[fout, fin], kaiming(rng, fin * fout, fin), true),
            bias: bias.then(|| Param::zeros(format!("{name}.bias"), &[fout], false)),
            input: Vec::new(),
            batch: 0,
        }
    }

    pub fn forward(&mut self, x: &FeatureMap<F>) -> FeatureMap<F> {
        assert_eq!(x.c * x.h * x.w, self.fin, "{}: input size mismatch", self.weight.name);
        let b = x.b;
        // (c, b, h, w) with h = w = 1 is already (fin, b)
        assert!(x.h == 1 && x.w == 1);
        self.input.clear();
        self.input.extend_from_slice(&x.data);
        self.batch = b;
        let mut y = vec![F::zero(); self.fout * b];
        gemm(
            self.fout,
            self.fin,
            b,
            F::one(),
            &self.weight.value,
            Strides::rm(self.fin),
            &x.data,
            Strides::rm(b),
            F::zero(),
            &mut y,
            Strides::rm(b),
        );
        if let Some(bias) = &self.bias {
            for (o, row) in y.chunks_exact_mut(b).enumerate() {
                row.iter_mut().for_each(|v| *v += bias.value[o]);
            }
        }
        FeatureMap::vectors(self.fout, b, y)
    }

    pub fn backward(&mut self, dy: &FeatureMap<F>) -> FeatureMap<F> {
        let b = self.batch;
        gemm(
            self.fout,
            b,
            self.fin,
            F::one(),
            &dy.data,
            Strides::rm(b),
            &self.input,
            Strides::tr(b),
            F::one(),
            &mut self.weight.grad,
            Strides::rm(self.fin),
        );
        if let Some(bias) = &mut self.bias {
            for (o, row) in dy.data.chunks_exact(b).enumerate() {
                bias.grad[o] += row.iter().copied().sum::<F>();
            }
        }
        let mut dx = vec![F::zero(); self.fin * b];
        gemm(
            self.fin,
            self.fout,
            b,
            F::one(),
            &self.weight.value,
            Strides::tr(self.fin),
            &dy.data,
            Strides::rm(b),
            F::zero(),
            &mut dx,
            Strides::rm(b),
        );
        FeatureMap::vectors(self.fin, b, dx)
    }
}

impl<F: Scalar> Module<F> for Linear<F> {
    fn params(&self) -> Vec<&Param<F>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Per-channel batch normalization over (b, h, w).
#[derive(Debug, Clone)]
pub struct BatchNorm2d<F> {
    pub c: usize,
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Buffer<F>,
    pub running_var: Buffer<F>,
    pub momentum: f64,
    pub eps: f64,
    xhat: Vec<F>,
    inv_std: Vec<F>,
    mode: Mode,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(name: &str, c: usize) -> Self {
        Self {
            c,
            gamma: Param::new(format!("{name}.gamma"), &[c], vec![F::one(); c], false),
            beta: Param::zeros(format!("{name}.beta"), &[c], false),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                shape: vec![c],
                value: vec![F::zero(); c],
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                shape: vec![c],
                value: vec![F::one(); c],
            },
            momentum: 0.1,
            eps: 1e-5,
            xhat: Vec::new(),
            inv_std: Vec::new(),
            mode: Mode::Train,
        }
    }

    pub fn forward(&mut self, x: &FeatureMap<F>, mode: Mode) -> FeatureMap<F> {
        assert_eq!(x.c, self.c);
        self.mode = mode;
        let n = x.plane();
        let nf = F::of_f64(n as f64);
        let eps = F::of_f64(self.eps);
        let mom = F::of_f64(self.momentum);
        self.xhat.resize(x.data.len(), F::zero());
        self.inv_std.resize(self.c, F::zero());
        let mut y = x.clone();
        for ch in 0..self.c {
            let plane = &x.data[ch * n..(ch + 1) * n];
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = plane.iter().copied().sum::<F>() / nf;
                    let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
                    let unbiased = if n > 1 { var * nf / F::of_f64((n - 1) as f64) } else { var };
                    let rm = &mut self.running_mean.value[ch];
                    *rm = (F::one() - mom) * *rm + mom * mean;
                    let rv = &mut self.running_var.value[ch];
                    *rv = (F::one() - mom) * *rv + mom * unbiased;
                    (mean, var)
                }
                Mode::Eval => (self.running_mean.value[ch], self.running_var.value[ch]),
            };
            let inv = F::one() / (var + eps).sqrt();
            self.inv_std[ch] = inv;
            let (g, bt) = (self.gamma.value[ch], self.beta.value[ch]);
            let xh = &mut self.xhat[ch * n..(ch + 1) * n];
            for ((o, h), &v) in y.data[ch * n..(ch + 1) * n].iter_mut().zip(xh.iter_mut()).zip(plane) {
                *h = (v - mean) * inv;
                *o = g * *h + bt;
            }
        }
        y
    }

    pub fn backward(&mut self, dy: &FeatureMap<F>) -> FeatureMap<F> {
        let n = dy.plane();
        let nf = F::of_f64(n as f64);
        let mut dx = dy.clone();
        for ch in 0..self.c {
            let d = &dy.data[ch * n..(ch + 1) * n];
            let xh = &self.xhat[ch * n..(ch + 1) * n];
            let sum_d = d.iter().copied().sum::<F>();
            let sum_dx = d.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>();
            self.gamma.grad[ch] += sum_dx;
            self.beta.grad[ch] += sum_d;
            let scale = self.gamma.value[ch] * self.inv_std[ch];
            let out = &mut dx.data[ch * n..(ch + 1) * n];
            match self.mode {
                Mode::Train => {
                    for ((o, &g), &h) in out.iter_mut().zip(d).zip(xh) {
                        *o = scale * (g - sum_d / nf - h * sum_dx / nf);
                    }
                }
                Mode::Eval => out.iter_mut().zip(d).for_each(|(o, &g)| *o = scale * g),
            }
        }
        dx
    }
}

impl<F: Scalar> Module<F> for BatchNorm2d<F> {
    fn params(&self) -> Vec<&Param<F>> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.gamma, &mut self.beta]
    }
    fn buffers(&self) -> Vec<&Buffer<F>> {
        vec![&self.running_mean, &self.running_var]
    }
    fn buffers_mut(&mut self) -> Vec<&mut Buffer<F>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn forward<F: Scalar>(&mut self, mut x: FeatureMap<F>) -> FeatureMap<F> {
        self.mask.clear();
        self.mask.extend(x.data.iter().map(|&v| v > F::zero()));
        for (v, &m) in x.data.iter_mut().zip(&self.mask) {
            if !m {
                *v = F::zero();
            }
        }
        x
    }

    pub fn backward<F: Scalar>(&self, mut dy: FeatureMap<F>) -> FeatureMap<F> {
        for (v, &m) in dy.data.iter_mut().zip(&self.mask) {
            if !m {
                *v = F::zero();
            }
        }
        dy
    }
}

/// x * sigmoid(x).
#[derive(Debug, Clone, Default)]
pub struct Silu<F> {
    input: Vec<F>,
}

impl<F: Scalar> Silu<F> {
    pub fn forward(&mut self, mut x: FeatureMap<F>) -> FeatureMap<F> {
        self.input.clone_from(&x.data);
        x.data.iter_mut().for_each(|v| *v = *v / (F::one() + (-*v).exp()));
        x
    }

    pub fn backward(&self, mut dy: FeatureMap<F>) -> FeatureMap<F> {
        for (d, &x) in dy.data.iter_mut().zip(&self.input) {
            let s = F::one() / (F::one() + (-x).exp());
            *d *= s * (F::one() + x * (F::one() - s));
        }
        dy
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid<F> {
    out: Vec<F>,
}

impl<F: Scalar> Sigmoid<F> {
    pub fn forward(&mut self, mut x: FeatureMap<F>) -> FeatureMap<F> {
        x.data.iter_mut().for_each(|v| *v = F::one() / (F::one() + (-*v).exp()));
        self.out.clone_from(&x.data);
        x
    }

    pub fn backward(&self, mut dy: FeatureMap<F>) -> FeatureMap<F> {
        for (d, &s) in dy.data.iter_mut().zip(&self.out) {
            *d *= s * (F::one() - s);
        }
        dy
    }
}

/// Nearest-neighbour 2x upsampling.
#[derive(Debug, Clone, Copy, Default)]
pub struct Upsample2x;

impl Upsample2x {
    pub fn forward<F: Scalar>(&self, x: &FeatureMap<F>) -> FeatureMap<F> {
        let (h, w) = (x.h, x.w);
        let mut y = FeatureMap::zeros(x.c, x.b, 2 * h, 2 * w);
        for (src, dst) in x.data.chunks_exact(h * w).zip(y.data.chunks_exact_mut(4 * h * w)) {
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    dst[yy * 2 * w + xx] = src[(yy / 2) * w + xx / 2];
                }
            }
        }
        y
    }

    pub fn backward<F: Scalar>(&self, dy: &FeatureMap<F>) -> FeatureMap<F> {
        let (h, w) = (dy.h / 2, dy.w / 2);
        let mut dx = FeatureMap::zeros(dy.c, dy.b, h, w);
        for (src, dst) in dy.data.chunks_exact(4 * h * w).zip(dx.data.chunks_exact_mut(h * w)) {
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    dst[(yy / 2) * w + xx / 2] += src[yy * 2 * w + xx];
                }
            }
        }
        dx
    }
}

/// 2x2 average pooling.
#[derive(Debug, Clone, Copy, Default)]
pub struct AvgPool2x;

impl AvgPool2x {
    pub fn forward<F: Scalar>(&self, x: &FeatureMap<F>) -> FeatureMap<F> {
        let (h, w) = (x.h / 2, x.w / 2);
        let quarter = F::of_f64(0.25);
        let mut y = FeatureMap::zeros(x.c, x.b, h, w);
        for (src, dst) in x.data.chunks_exact(x.h * x.w).zip(y.data.chunks_exact_mut(h * w)) {
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    dst[(yy / 2) * w + xx / 2] += quarter * src[yy * x.w + xx];
                }
            }
        }
        y
    }

    pub fn backward<F: Scalar>(&self, dy: &FeatureMap<F>, in_h: usize, in_w: usize) -> FeatureMap<F> {
        let quarter = F::of_f64(0.25);
        let mut dx = FeatureMap::zeros(dy.c, dy.b, in_h, in_w);
        for (src, dst) in dy.data.chunks_exact(dy.h * dy.w).zip(dx.data.chunks_exact_mut(in_h * in_w)) {
            for yy in 0..2 * dy.h {
                for xx in 0..2 * dy.w {
                    dst[yy * in_w + xx] = quarter * src[(yy / 2) * dy.w + xx / 2];
                }
            }
        }
        dx
    }
}

/// Mean over (h, w): (c, b, h, w) -> (c, b).
#[derive(Debug, Clone, Copy, Default)]
pub struct GlobalAvgPool {
    h: usize,
    w: usize,
}

impl GlobalAvgPool {
    pub fn forward<F: Scalar>(&mut self, x: &FeatureMap<F>) -> FeatureMap<F> {
        self.h = x.h;
        self.w = x.w;
        let hw = F::of_f64(x.hw() as f64);
        let data = x.data.chunks_exact(x.hw()).map(|s| s.iter().copied().sum::<F>() / hw).collect();
        FeatureMap::vectors(x.c, x.b, data)
    }

    pub fn backward<F: Scalar>(&self, dy: &FeatureMap<F>) -> FeatureMap<F> {
        let hw = self.h * self.w;
        let scale = F::one() / F::of_f64(hw as f64);
        let mut dx = FeatureMap::zeros(dy.c, dy.b, self.h, self.w);
        for (d, out) in dy.data.iter().zip(dx.data.chunks_exact_mut(hw)) {
            out.fill(*d * scale);
        }
        dx
    }
}

/// Deterministic channel-wise dropout: per sample, only listed channels survive.
/// Survivors pass through unscaled.
#[derive(Debug, Clone, Default)]
pub struct ChannelMask {
    /// keep[c * b + bi]
    keep: Vec<bool>,
}

impl ChannelMask {
    /// `active[bi]` lists the surviving channels of sample `bi`; all must be < `c`.
    pub fn set(&mut self, c: usize, active: &[&[usize]]) -> Result<(), String> {
        let b = active.len();
        self.keep = vec![false; c * b];
        for (bi, list) in active.iter().enumerate() {
            for &ch in *list {
                if ch >= c {
                    return Err(format!("channel {ch} out of range for {c} channels"));
                }
                self.keep[ch * b + bi] = true;
            }
        }
        Ok(())
    }

    fn apply<F: Scalar>(&self, x: &mut FeatureMap<F>) {
        assert_eq!(self.keep.len(), x.c * x.b, "mask not set for this shape");
        let hw = x.hw();
        for (slab, &k) in x.data.chunks_exact_mut(hw).zip(&self.keep) {
            if !k {
                slab.fill(F::zero());
            }
        }
    }

    pub fn forward<F: Scalar>(&self, mut x: FeatureMap<F>) -> FeatureMap<F> {
        self.apply(&mut x);
        x
    }

    pub fn backward<F: Scalar>(&self, mut dy: FeatureMap<F>) -> FeatureMap<F> {
        self.apply(&mut dy);
        dy
    }
}

/// Post-activation residual block: relu(bn(conv(relu(bn(conv(x))))) + skip(x)).
///
/// The skip is the identity when shapes allow, otherwise an ungrouped 1x1
/// convolution with batch norm.
#[derive(Debug, Clone)]
pub struct ResBlock<F> {
    pub conv1: Conv2d<F>,
    pub bn1: BatchNorm2d<F>,
    relu1: Relu,
    pub conv2: Conv2d<F>,
    pub bn2: BatchNorm2d<F>,
    pub skip: Option<(Conv2d<F>, BatchNorm2d<F>)>,
    relu_out: Relu,
}

impl<F: Scalar> ResBlock<F> {
    pub fn new<R: Rng>(name: &str, cin: usize, cout: usize, groups: usize, rng: &mut R) -> Self {
        let conv1 = Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, groups, false, rng);
        let conv2 = Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, groups, false, rng);
        let skip = (cin != cout).then(|| {
            (
                Conv2d::new(&format!("{name}.skip"), cin, cout, 1, 1, false, rng),
                BatchNorm2d::new(&format!("{name}.skip_bn"), cout),
            )
        });
        Self {
            conv1,
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), cout),
            relu1: Relu::default(),
            conv2,
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), cout),
            skip,
            relu_out: Relu::default(),
        }
    }

    pub fn forward(&mut self, x: &FeatureMap<F>, mode: Mode) -> FeatureMap<F> {
        let h = self.conv1.forward(x);
        let h = self.bn1.forward(&h, mode);
        let h = self.relu1.forward(h);
        let h = self.conv2.forward(&h);
        let mut h = self.bn2.forward(&h, mode);
        match &mut self.skip {
            Some((conv, bn)) => {
                let s = conv.forward(x);
                h.add_assign(&bn.forward(&s, mode));
            }
            None => h.add_assign(x),
        }
        self.relu_out.forward(h)
    }

    pub fn backward(&mut self, dy: FeatureMap<F>) -> FeatureMap<F> {
        let d = self.relu_out.backward(dy);
        let dm = self.bn2.backward(&d);
        let dm = self.conv2.backward(&dm);
        let dm = self.relu1.backward(dm);
        let dm = self.bn1.backward(&dm);
        let mut dx = self.conv1.backward(&dm);
        match &mut self.skip {
            Some((conv, bn)) => {
                let ds = bn.backward(&d);
                dx.add_assign(&conv.backward(&ds));
            }
            None => dx.add_assign(&d),
        }
        dx
    }
}

impl<F: Scalar> Module<F> for ResBlock<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut v = self.conv1.params();
        v.extend(self.bn1.params());
        v.extend(self.conv2.params());
        v.extend(self.bn2.params());
        if let Some((c, b)) = &self.skip {
            v.extend(c.params());
            v.extend(b.params());
        }
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = self.conv1.params_mut();
        v.extend(self.bn1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.bn2.params_mut());
        if let Some((c, b)) = &mut self.skip {
            v.extend(c.params_mut());
            v.extend(b.params_mut());
        }
        v
    }
    fn buffers(&self) -> Vec<&Buffer<F>> {
        let mut v = self.bn1.buffers();
        v.extend(self.bn2.buffers());
        if let Some((_, b)) = &self.skip {
            v.extend(b.buffers());
        }
        v
    }
    fn buffers_mut(&mut self) -> Vec<&mut Buffer<F>> {
        let mut v = self.bn1.buffers_mut();
        v.extend(self.bn2.buffers_mut());
        if let Some((_, b)) = &mut self.skip {
            v.extend(b.buffers_mut());
        }
        v
    }
}
