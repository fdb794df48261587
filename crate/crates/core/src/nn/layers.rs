use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{gemm, MatMut, MatRef, Scalar, Tensor4};

/// Upper bound on im2col buffer elements per GEMM chunk.
const IM2COL_BUDGET: usize = 1 << 22;

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            value: vec![T::zero(); len],
            grad: vec![T::zero(); len],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let mut p = Self::zeros(shape);
        p.value.iter_mut().for_each(|x| *x = v);
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Pointwise nonlinearity applied after normalized convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Leaky rectifier with negative slope 0.1.
    #[default]
    LeakyRelu,
    Relu,
}

impl Activation {
    pub fn negative_slope(self) -> f64 {
        match self {
            Activation::LeakyRelu => 0.1,
            Activation::Relu => 0.0,
        }
    }
}

/// Stride-1 2-D convolution with symmetric zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub pad: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(cin: usize, cout: usize, kernel: usize, pad: usize) -> Self {
        Self {
            cin,
            cout,
            kernel,
            pad,
            weight: Param::zeros(&[cout, cin, kernel, kernel]),
            bias: Param::zeros(&[cout]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    /// He-normal weights scaled by fan-in, zero bias.
    pub fn init_he<R: Rng + ?Sized>(&mut self, rng: &mut R, negative_slope: f64) {
        let std = (2.0 / ((1.0 + negative_slope * negative_slope) * self.fan_in() as f64)).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        for w in &mut self.weight.value {
            *w = T::from_f64(normal.sample(rng)).unwrap();
        }
        self.bias.value.iter_mut().for_each(|b| *b = T::zero());
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h + 2 * self.pad + 1 - self.kernel, w + 2 * self.pad + 1 - self.kernel)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.pad == 0
    }

    fn chunk_len(&self, n: usize, out_plane: usize) -> usize {
        let per_sample = self.fan_in() * out_plane;
        (IM2COL_BUDGET / per_sample.max(1)).clamp(1, n.max(1))
    }

    fn im2col(&self, x: &Tensor4<T>, n0: usize, nc: usize, col: &mut [T]) {
        let (ho, wo) = self.output_hw(x.h, x.w);
        let cols = nc * ho * wo;
        let k = self.kernel;
        let pad = self.pad as isize;
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst_row = &mut col[row * cols..(row + 1) * cols];
                    let ox_lo = (pad - kx as isize).max(0) as usize;
                    let ox_hi = ((x.w as isize + pad - kx as isize).min(wo as isize)).max(0) as usize;
                    for s in 0..nc {
                        for oy in 0..ho {
                            let dst = &mut dst_row[(s * ho + oy) * wo..(s * ho + oy + 1) * wo];
                            let iy = oy as isize + ky as isize - pad;
                            if iy < 0 || iy >= x.h as isize || ox_lo >= ox_hi {
                                dst.iter_mut().for_each(|v| *v = T::zero());
                                continue;
                            }
                            dst[..ox_lo].iter_mut().for_each(|v| *v = T::zero());
                            dst[ox_hi..].iter_mut().for_each(|v| *v = T::zero());
                            let base = x.index(ci, n0 + s, iy as usize, 0);
                            let ix0 = (ox_lo as isize + kx as isize - pad) as usize;
                            dst[ox_lo..ox_hi]
                                .copy_from_slice(&x.data[base + ix0..base + ix0 + (ox_hi - ox_lo)]);
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, col: &[T], dx: &mut Tensor4<T>, n0: usize, nc: usize) {
        let (ho, wo) = self.output_hw(dx.h, dx.w);
        let cols = nc * ho * wo;
        let k = self.kernel;
        let pad = self.pad as isize;
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src_row = &col[row * cols..(row + 1) * cols];
                    let ox_lo = (pad - kx as isize).max(0) as usize;
                    let ox_hi = ((dx.w as isize + pad - kx as isize).min(wo as isize)).max(0) as usize;
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for s in 0..nc {
                        for oy in 0..ho {
                            let iy = oy as isize + ky as isize - pad;
                            if iy < 0 || iy >= dx.h as isize {
                                continue;
                            }
                            let src = &src_row[(s * ho + oy) * wo..(s * ho + oy + 1) * wo];
                            let base = dx.index(ci, n0 + s, iy as usize, 0);
                            let ix0 = (ox_lo as isize + kx as isize - pad) as usize;
                            let dst = &mut dx.data[base + ix0..base + ix0 + (ox_hi - ox_lo)];
                            for (d, &v) in dst.iter_mut().zip(&src[ox_lo..ox_hi]) {
                                *d = *d + v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Tensor4<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (ho, wo) = self.output_hw(x.h, x.w);
        let out_plane = ho * wo;
        let n = x.n;
        let mut y = Tensor4::zeros(self.cout, n, ho, wo);
        for co in 0..self.cout {
            let b = self.bias.value[co];
            y.data[co * n * out_plane..(co + 1) * n * out_plane]
                .iter_mut()
                .for_each(|v| *v = b);
        }
        let kdim = self.fan_in();
        let weight = MatRef { data: &self.weight.value, offset: 0, rs: kdim, cs: 1 };
        if self.is_pointwise() {
            gemm(
                self.cout,
                kdim,
                n * out_plane,
                T::one(),
                weight,
                MatRef { data: &x.data, offset: 0, rs: n * out_plane, cs: 1 },
                T::one(),
                MatMut { data: &mut y.data, offset: 0, rs: n * out_plane, cs: 1 },
            );
            return y;
        }
        let chunk = self.chunk_len(n, out_plane);
        let mut col = vec![T::zero(); kdim * chunk * out_plane];
        let mut n0 = 0;
        while n0 < n {
            let nc = chunk.min(n - n0);
            let cols = nc * out_plane;
            self.im2col(x, n0, nc, &mut col[..kdim * cols]);
            gemm(
                self.cout,
                kdim,
                cols,
                T::one(),
                weight,
                MatRef { data: &col, offset: 0, rs: cols, cs: 1 },
                T::one(),
                MatMut { data: &mut y.data, offset: n0 * out_plane, rs: n * out_plane, cs: 1 },
            );
            n0 += nc;
        }
        y
    }

    /// Accumulates parameter gradients and optionally returns the input gradient.
    pub fn backward(&mut self, x: &Tensor4<T>, dy: &Tensor4<T>, need_dx: bool) -> Option<Tensor4<T>> {
        let (ho, wo) = self.output_hw(x.h, x.w);
        let out_plane = ho * wo;
        let n = x.n;
        debug_assert_eq!(dy.dims(), [self.cout, n, ho, wo]);
        let kdim = self.fan_in();
        let row_len = n * out_plane;
        for co in 0..self.cout {
            let s: T = dy.data[co * row_len..(co + 1) * row_len].iter().copied().sum();
            self.bias.grad[co] = self.bias.grad[co] + s;
        }
        let mut dx = need_dx.then(|| Tensor4::zeros(x.c, n, x.h, x.w));

        if self.is_pointwise() {
            gemm(
                self.cout,
                row_len,
                kdim,
                T::one(),
                MatRef { data: &dy.data, offset: 0, rs: row_len, cs: 1 },
                MatRef { data: &x.data, offset: 0, rs: 1, cs: row_len },
                T::one(),
                MatMut { data: &mut self.weight.grad, offset: 0, rs: kdim, cs: 1 },
            );
            if let Some(dx) = dx.as_mut() {
                gemm(
                    kdim,
                    self.cout,
                    row_len,
                    T::one(),
                    MatRef { data: &self.weight.value, offset: 0, rs: 1, cs: kdim },
                    MatRef { data: &dy.data, offset: 0, rs: row_len, cs: 1 },
                    T::zero(),
                    MatMut { data: &mut dx.data, offset: 0, rs: row_len, cs: 1 },
                );
            }
            return dx;
        }

        let chunk = self.chunk_len(n, out_plane);
        let mut col = vec![T::zero(); kdim * chunk * out_plane];
        let mut dcol = if need_dx { vec![T::zero(); kdim * chunk * out_plane] } else { Vec::new() };
        let mut n0 = 0;
        while n0 < n {
            let nc = chunk.min(n - n0);
            let cols = nc * out_plane;
            self.im2col(x, n0, nc, &mut col[..kdim * cols]);
            let dy_chunk = MatRef { data: &dy.data, offset: n0 * out_plane, rs: row_len, cs: 1 };
            gemm(
                self.cout,
                cols,
                kdim,
                T::one(),
                dy_chunk,
                MatRef { data: &col, offset: 0, rs: 1, cs: cols },
                T::one(),
                MatMut { data: &mut self.weight.grad, offset: 0, rs: kdim, cs: 1 },
            );
            if let Some(dx) = dx.as_mut() {
                gemm(
                    kdim,
                    self.cout,
                    cols,
                    T::one(),
                    MatRef { data: &self.weight.value, offset: 0, rs: 1, cs: kdim },
                    dy_chunk,
                    T::zero(),
                    MatMut { data: &mut dcol, offset: 0, rs: cols, cs: 1 },
                );
                self.col2im_add(&dcol[..kdim * cols], dx, n0, nc);
            }
            n0 += nc;
        }
        dx
    }
}

/// Group normalization over (channels-in-group × H × W) of each sample, with affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm<T> {
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(groups > 0 && channels.is_multiple_of(groups), "groups must divide channels");
        Self {
            channels,
            groups,
            eps: 1e-5,
            gamma: Param::filled(&[channels], T::one()),
            beta: Param::zeros(&[channels]),
        }
    }

    fn forward_inplace(&self, x: &mut Tensor4<T>, keep: bool) -> Option<NormCache<T>> {
        let (n, plane) = (x.n, x.plane());
        let cpg = self.channels / self.groups;
        let count = T::from_usize(cpg * plane).unwrap();
        let eps = T::from_f64(self.eps).unwrap();
        let mut xhat = if keep { vec![T::zero(); x.data.len()] } else { Vec::new() };
        let mut inv_stds = vec![T::zero(); n * self.groups];
        for s in 0..n {
            for g in 0..self.groups {
                let channels = g * cpg..(g + 1) * cpg;
                let mut sum = T::zero();
                for c in channels.clone() {
                    let base = (c * n + s) * plane;
                    sum = sum + x.data[base..base + plane].iter().copied().sum();
                }
                let mean = sum / count;
                let mut var = T::zero();
                for c in channels.clone() {
                    let base = (c * n + s) * plane;
                    for &v in &x.data[base..base + plane] {
                        var = var + (v - mean) * (v - mean);
                    }
                }
                let inv_std = T::one() / (var / count + eps).sqrt();
                inv_stds[s * self.groups + g] = inv_std;
                for c in channels {
                    let base = (c * n + s) * plane;
                    let (gm, bt) = (self.gamma.value[c], self.beta.value[c]);
                    for i in base..base + plane {
                        let h = (x.data[i] - mean) * inv_std;
                        if keep {
                            xhat[i] = h;
                        }
                        x.data[i] = gm * h + bt;
                    }
                }
            }
        }
        keep.then_some(NormCache { xhat, inv_std: inv_stds })
    }

    /// Turns the output gradient into the input gradient in place.
    fn backward_inplace(&mut self, cache: &NormCache<T>, dy: &mut Tensor4<T>) {
        let (n, plane) = (dy.n, dy.plane());
        let cpg = self.channels / self.groups;
        let m = T::from_usize(cpg * plane).unwrap();
        for c in 0..self.channels {
            let mut dg = T::zero();
            let mut db = T::zero();
            for s in 0..n {
                let base = (c * n + s) * plane;
                for i in base..base + plane {
                    dg = dg + dy.data[i] * cache.xhat[i];
                    db = db + dy.data[i];
                }
            }
            self.gamma.grad[c] = self.gamma.grad[c] + dg;
            self.beta.grad[c] = self.beta.grad[c] + db;
        }
        for s in 0..n {
            for g in 0..self.groups {
                let inv_std = cache.inv_std[s * self.groups + g];
                let mut sum_d = T::zero();
                let mut sum_dx = T::zero();
                for c in g * cpg..(g + 1) * cpg {
                    let gm = self.gamma.value[c];
                    let base = (c * n + s) * plane;
                    for i in base..base + plane {
                        let d = dy.data[i] * gm;
                        sum_d = sum_d + d;
                        sum_dx = sum_dx + d * cache.xhat[i];
                    }
                }
                for c in g * cpg..(g + 1) * cpg {
                    let gm = self.gamma.value[c];
                    let base = (c * n + s) * plane;
                    for i in base..base + plane {
                        let d = dy.data[i] * gm;
                        dy.data[i] = inv_std / m * (m * d - sum_d - cache.xhat[i] * sum_dx);
                    }
                }
            }
        }
    }
}

/// 3×3 (or k×k) max pooling with stride and implicit −∞ padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl MaxPool2d {
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn forward<T: Scalar>(&self, x: &Tensor4<T>, keep: bool) -> (Tensor4<T>, Vec<u32>) {
        let (ho, wo) = self.output_hw(x.h, x.w);
        let planes = x.c * x.n;
        let mut y = Tensor4::zeros(x.c, x.n, ho, wo);
        let mut arg = if keep { vec![0u32; planes * ho * wo] } else { Vec::new() };
        for p in 0..planes {
            let src = &x.data[p * x.plane()..(p + 1) * x.plane()];
            for oy in 0..ho {
                let y0 = (oy * self.stride) as isize - self.pad as isize;
                for ox in 0..wo {
                    let x0 = (ox * self.stride) as isize - self.pad as isize;
                    let mut best = T::neg_infinity();
                    let mut best_i = 0usize;
                    for ky in 0..self.kernel as isize {
                        let iy = y0 + ky;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel as isize {
                            let ix = x0 + kx;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let i = iy as usize * x.w + ix as usize;
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (p * ho + oy) * wo + ox;
                    y.data[o] = best;
                    if keep {
                        arg[o] = best_i as u32;
                    }
                }
            }
        }
        (y, arg)
    }

    fn backward<T: Scalar>(&self, argmax: &[u32], dy: &Tensor4<T>, h: usize, w: usize) -> Tensor4<T> {
        let mut dx = Tensor4::zeros(dy.c, dy.n, h, w);
        let out_plane = dy.plane();
        for p in 0..dy.c * dy.n {
            for o in 0..out_plane {
                let src = p * out_plane + o;
                let dst = p * h * w + argmax[src] as usize;
                dx.data[dst] = dx.data[dst] + dy.data[src];
            }
        }
        dx
    }
}

/// Convolution followed by optional group norm, activation and max pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T> {
    pub name: String,
    pub conv: Conv2d<T>,
    pub norm: Option<GroupNorm<T>>,
    pub activation: Option<Activation>,
    pub pool: Option<(String, MaxPool2d)>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    input: Tensor4<T>,
    norm: Option<NormCache<T>>,
    positive: Vec<bool>,
    pre_pool_hw: (usize, usize),
    argmax: Vec<u32>,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn new(name: &str, conv: Conv2d<T>) -> Self {
        Self {
            name: name.to_string(),
            conv,
            norm: None,
            activation: None,
            pool: None,
        }
    }

    pub fn with_norm(mut self, groups: usize) -> Self {
        self.norm = Some(GroupNorm::new(self.conv.cout, groups));
        self
    }

    pub fn with_activation(mut self, act: Activation) -> Self {
        self.activation = Some(act);
        self
    }

    pub fn with_pool(mut self, name: &str, pool: MaxPool2d) -> Self {
        self.pool = Some((name.to_string(), pool));
        self
    }

    fn run(
        &self,
        input: Tensor4<T>,
        keep: bool,
        trace: Option<&mut Vec<(String, [usize; 3])>>,
    ) -> (Tensor4<T>, Option<BlockCache<T>>) {
        let mut z = self.conv.forward(&input);
        let mut trace = trace;
        if let Some(t) = trace.as_mut() {
            t.push((self.name.clone(), [z.h, z.w, z.c]));
        }
        let norm = self.norm.as_ref().and_then(|gn| gn.forward_inplace(&mut z, keep));
        let mut positive = Vec::new();
        if let Some(act) = self.activation {
            let slope = T::from_f64(act.negative_slope()).unwrap();
            if keep {
                positive = z.data.iter().map(|&v| v > T::zero()).collect();
            }
            for v in &mut z.data {
                if *v <= T::zero() {
                    *v = *v * slope;
                }
            }
        }
        let pre_pool_hw = (z.h, z.w);
        let (out, argmax) = match &self.pool {
            Some((pool_name, pool)) => {
                let (p, arg) = pool.forward(&z, keep);
                if let Some(t) = trace.as_mut() {
                    t.push((pool_name.clone(), [p.h, p.w, p.c]));
                }
                (p, arg)
            }
            None => (z, Vec::new()),
        };
        let cache = keep.then_some(BlockCache {
            input,
            norm,
            positive,
            pre_pool_hw,
            argmax,
        });
        (out, cache)
    }

    fn backward(&mut self, cache: &BlockCache<T>, dout: Tensor4<T>, need_dx: bool) -> Option<Tensor4<T>> {
        let mut dz = match &self.pool {
            Some((_, pool)) => pool.backward(&cache.argmax, &dout, cache.pre_pool_hw.0, cache.pre_pool_hw.1),
            None => dout,
        };
        if let Some(act) = self.activation {
            let slope = T::from_f64(act.negative_slope()).unwrap();
            for (d, &pos) in dz.data.iter_mut().zip(&cache.positive) {
                if !pos {
                    *d = *d * slope;
                }
            }
        }
        if let (Some(gn), Some(nc)) = (self.norm.as_mut(), cache.norm.as_ref()) {
            gn.backward_inplace(nc, &mut dz);
        }
        self.conv.backward(&cache.input, &dz, need_dx)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        f(format!("{prefix}.{}.weight", self.name), &self.conv.weight);
        f(format!("{prefix}.{}.bias", self.name), &self.conv.bias);
        if let Some(gn) = &self.norm {
            f(format!("{prefix}.{}.norm.gamma", self.name), &gn.gamma);
            f(format!("{prefix}.{}.norm.beta", self.name), &gn.beta);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(format!("{prefix}.{}.weight", self.name), &mut self.conv.weight);
        f(format!("{prefix}.{}.bias", self.name), &mut self.conv.bias);
        if let Some(gn) = &mut self.norm {
            f(format!("{prefix}.{}.norm.gamma", self.name), &mut gn.gamma);
            f(format!("{prefix}.{}.norm.beta", self.name), &mut gn.beta);
        }
    }
}

/// Sequence of conv blocks with a shared name prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack<T> {
    pub prefix: String,
    pub blocks: Vec<ConvBlock<T>>,
}

#[derive(Debug, Clone)]
pub struct StackCache<T> {
    blocks: Vec<BlockCache<T>>,
}

impl<T: Scalar> Stack<T> {
    pub fn new(prefix: &str, blocks: Vec<ConvBlock<T>>) -> Self {
        Self {
            prefix: prefix.to_string(),
            blocks,
        }
    }

    pub fn forward(&self, x: Tensor4<T>) -> Tensor4<T> {
        self.blocks.iter().fold(x, |h, b| b.run(h, false, None).0)
    }

    pub fn forward_train(&self, x: Tensor4<T>) -> (Tensor4<T>, StackCache<T>) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for b in &self.blocks {
            let (out, cache) = b.run(h, true, None);
            caches.push(cache.expect("cache requested"));
            h = out;
        }
        (h, StackCache { blocks: caches })
    }

    /// Output size `(H, W, C)` after every convolution and pooling layer.
    pub fn trace(&self, x: Tensor4<T>) -> (Tensor4<T>, Vec<(String, [usize; 3])>) {
        let mut shapes = Vec::new();
        let mut h = x;
        for b in &self.blocks {
            h = b.run(h, false, Some(&mut shapes)).0;
        }
        (h, shapes)
    }

    /// Backpropagates `dout`, accumulating parameter gradients.
    pub fn backward(&mut self, cache: &StackCache<T>, dout: Tensor4<T>, need_dx: bool) -> Option<Tensor4<T>> {
        let mut d = dout;
        let last = self.blocks.len();
        for (i, (block, bc)) in self.blocks.iter_mut().zip(&cache.blocks).enumerate().rev() {
            let want = need_dx || i > 0;
            match block.backward(bc, d, want) {
                Some(next) => d = next,
                None => {
                    debug_assert!(i == 0 && last > 0);
                    return None;
                }
            }
        }
        Some(d)
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Param<T>)) {
        for b in &self.blocks {
            b.visit(&self.prefix, f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Param<T>)) {
        let prefix = self.prefix.clone();
        for b in &mut self.blocks {
            b.visit_mut(&prefix, f);
        }
    }
}
