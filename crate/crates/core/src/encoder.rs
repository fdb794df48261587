//! Hierarchical patch encoder and relative-position classifier heads.
//!
//! The main encoder maps a 32×32 patch to an embedding. A 64×64 patch is cut
//! into four 32×32 quadrants that share the main encoder; the four embeddings
//! form a 2×2 map which the secondary encoder reduces to a single embedding.
//!
//! Main encoder (default widths), output size after each layer:
//!
//! | layer    | kernel / pad | output       |
//! |----------|--------------|--------------|
//! | conv1    | 5×5 / 0      | 28×28×96     |
//! | maxpool1 | 3×3 s2 / 1   | 14×14×96     |
//! | conv2    | 5×5 / 2      | 14×14×256    |
//! | maxpool2 | 3×3 s2 / 0   | 6×6×256      |
//! | conv3–5  | 3×3 / 1      | 6×6×{384,384,256} |
//! | maxpool3 | 3×3 s2 / 1   | 3×3×256      |
//! | conv6    | 2×2 / 0      | 2×2×128      |
//! | conv7    | 2×2 / 0      | 1×1×64       |
//!
//! Every convolution except the last of each encoder is followed by group
//! normalization and the configured activation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Rect};
use crate::nn::{Activation, Conv2d, ConvBlock, MaxPool2d, Param, Scalar, Stack, StackCache, Tensor4};

pub const EMBED_DIM: usize = 64;
pub const SMALL_PATCH: usize = 32;
pub const LARGE_PATCH: usize = 64;

/// Inference batch size for sliding-window encoding.
const ENCODE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Small32,
    Large64,
}

impl Scale {
    pub const ALL: [Scale; 2] = [Scale::Large64, Scale::Small32];

    pub fn patch_size(self) -> usize {
        match self {
            Scale::Small32 => SMALL_PATCH,
            Scale::Large64 => LARGE_PATCH,
        }
    }

    pub fn from_patch_size(size: usize) -> Result<Scale> {
        match size {
            SMALL_PATCH => Ok(Scale::Small32),
            LARGE_PATCH => Ok(Scale::Large64),
            other => Err(Error::Config(format!("unsupported scale {other}; expected 32 or 64"))),
        }
    }
}

impl std::fmt::Display for Scale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.patch_size())
    }
}

/// Latent feature of one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f32>,
    pub scale: Scale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Upper bound on GroupNorm groups; a layer with `c` channels uses `min(norm_groups, c)`.
    pub norm_groups: usize,
    pub activation: Activation,
    pub init_seed: u64,
    /// Output channels of conv1..conv6 of the main encoder.
    pub main_channels: [usize; 6],
    /// Width of the secondary encoder's hidden 1×1 map.
    pub secondary_hidden: usize,
    pub embed_dim: usize,
    /// Hidden width of each relative-position classifier head.
    pub head_hidden: usize,
    pub head_init: HeadInit,
}

/// Initialization of the classifier heads' output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// Same fan-in scaled draw as every other layer.
    #[default]
    Random,
    /// All-zero weights and bias, so the untrained head predicts uniformly.
    Zero,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            norm_groups: 32,
            activation: Activation::LeakyRelu,
            init_seed: 0,
            main_channels: [96, 256, 384, 384, 256, 128],
            secondary_hidden: 128,
            embed_dim: EMBED_DIM,
            head_hidden: 128,
            head_init: HeadInit::Random,
        }
    }
}

impl EncoderConfig {
    pub fn groups_for(&self, channels: usize) -> usize {
        self.norm_groups.min(channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.norm_groups == 0 {
            return Err(Error::Config("norm_groups must be positive".into()));
        }
        if self.main_channels.contains(&0)
            || self.secondary_hidden == 0
            || self.embed_dim == 0
            || self.head_hidden == 0
        {
            return Err(Error::Config("all encoder widths must be positive".into()));
        }
        for &c in self.main_channels.iter().chain(std::iter::once(&self.secondary_hidden)) {
            let g = self.groups_for(c);
            if c % g != 0 {
                return Err(Error::Config(format!("norm group count {g} does not divide {c} channels")));
            }
        }
        // the secondary hidden layer is 1×1, so each group needs at least two channels
        if self.secondary_hidden / self.groups_for(self.secondary_hidden) < 2 {
            return Err(Error::Config(format!(
                "secondary_hidden={} with {} groups normalizes single values",
                self.secondary_hidden,
                self.groups_for(self.secondary_hidden)
            )));
        }
        Ok(())
    }
}

/// Encoders plus one classifier head per scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: EncoderConfig,
    pub main: Stack<T>,
    pub secondary: Stack<T>,
    pub head_small: Stack<T>,
    pub head_large: Stack<T>,
    num_classes: usize,
}

/// Activations kept for the backward pass of one embedding batch.
pub struct EmbedCache<T> {
    main: StackCache<T>,
    secondary: Option<StackCache<T>>,
}

fn normed<T: Scalar>(cfg: &EncoderConfig, name: &str, conv: Conv2d<T>) -> ConvBlock<T> {
    let groups = cfg.groups_for(conv.cout);
    ConvBlock::new(name, conv).with_norm(groups).with_activation(cfg.activation)
}

impl<T: Scalar> Model<T> {
    pub fn new(config: EncoderConfig, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let [c1, c2, c3, c4, c5, c6] = config.main_channels;
        let e = config.embed_dim;
        let pool_pad1 = MaxPool2d { kernel: 3, stride: 2, pad: 1 };
        let pool_pad0 = MaxPool2d { kernel: 3, stride: 2, pad: 0 };
        let main = Stack::new(
            "main",
            vec![
                normed(&config, "conv1", Conv2d::new(3, c1, 5, 0)).with_pool("maxpool1", pool_pad1),
                normed(&config, "conv2", Conv2d::new(c1, c2, 5, 2)).with_pool("maxpool2", pool_pad0),
                normed(&config, "conv3", Conv2d::new(c2, c3, 3, 1)),
                normed(&config, "conv4", Conv2d::new(c3, c4, 3, 1)),
                normed(&config, "conv5", Conv2d::new(c4, c5, 3, 1)).with_pool("maxpool3", pool_pad1),
                normed(&config, "conv6", Conv2d::new(c5, c6, 2, 0)),
                ConvBlock::new("conv7", Conv2d::new(c6, e, 2, 0)),
            ],
        );
        // the second projection is listed with stride 2 on a 1×1 map; stride has no effect there
        let secondary = Stack::new(
            "secondary",
            vec![
                normed(&config, "conv1", Conv2d::new(e, config.secondary_hidden, 2, 0)),
                ConvBlock::new("conv2", Conv2d::new(config.secondary_hidden, e, 1, 0)),
            ],
        );
        let head = |prefix: &str| {
            Stack::new(
                prefix,
                vec![
                    ConvBlock::new("fc1", Conv2d::new(2 * e, config.head_hidden, 1, 0))
                        .with_activation(config.activation),
                    ConvBlock::new("fc2", Conv2d::new(config.head_hidden, num_classes, 1, 0)),
                ],
            )
        };
        let mut model = Self {
            head_small: head("head_small"),
            head_large: head("head_large"),
            config,
            main,
            secondary,
            num_classes,
        };
        model.initialize();
        Ok(model)
    }

    /// Fan-in scaled random weights from `init_seed`.
    fn initialize(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.init_seed);
        let slope = self.config.activation.negative_slope();
        for stack in [&mut self.main, &mut self.secondary, &mut self.head_small, &mut self.head_large] {
            for block in &mut stack.blocks {
                block.conv.init_he(&mut rng, slope);
            }
        }
        if self.config.head_init == HeadInit::Zero {
            for head in [&mut self.head_small, &mut self.head_large] {
                let last = head.blocks.last_mut().expect("head has layers");
                last.conv.weight.value.iter_mut().for_each(|w| *w = T::zero());
                last.conv.bias.value.iter_mut().for_each(|w| *w = T::zero());
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn head(&self, scale: Scale) -> &Stack<T> {
        match scale {
            Scale::Small32 => &self.head_small,
            Scale::Large64 => &self.head_large,
        }
    }

    fn head_mut(&mut self, scale: Scale) -> &mut Stack<T> {
        match scale {
            Scale::Small32 => &mut self.head_small,
            Scale::Large64 => &mut self.head_large,
        }
    }

    /// Embeds a `3×N×s×s` batch; returns `E×N×1×1`.
    pub fn embed(&self, scale: Scale, x: Tensor4<T>) -> Tensor4<T> {
        match scale {
            Scale::Small32 => self.main.forward(x),
            Scale::Large64 => {
                let n = x.n;
                let quads = split_quadrants(&x);
                let fibers = self.main.forward(quads);
                self.secondary.forward(as_quad_map(fibers, n))
            }
        }
    }

    pub fn embed_train(&self, scale: Scale, x: Tensor4<T>) -> (Tensor4<T>, EmbedCache<T>) {
        match scale {
            Scale::Small32 => {
                let (out, main) = self.main.forward_train(x);
                (out, EmbedCache { main, secondary: None })
            }
            Scale::Large64 => {
                let n = x.n;
                let quads = split_quadrants(&x);
                let (fibers, main) = self.main.forward_train(quads);
                let (out, secondary) = self.secondary.forward_train(as_quad_map(fibers, n));
                (out, EmbedCache { main, secondary: Some(secondary) })
            }
        }
    }

    pub fn embed_backward(&mut self, cache: &EmbedCache<T>, d_embed: Tensor4<T>) {
        let d_fibers = match &cache.secondary {
            Some(sc) => {
                let d_map = self.secondary.backward(sc, d_embed, true).expect("input gradient requested");
                let [c, n, _, _] = d_map.dims();
                Tensor4::from_vec(d_map.data, c, n * 4, 1, 1)
            }
            None => d_embed,
        };
        self.main.backward(&cache.main, d_fibers, false);
    }

    /// Logits `K×N` for a concatenated `(2E)×N` pair tensor.
    pub fn classify(&self, scale: Scale, pairs: Tensor4<T>) -> Tensor4<T> {
        self.head(scale).forward(pairs)
    }

    pub fn classify_train(&self, scale: Scale, pairs: Tensor4<T>) -> (Tensor4<T>, StackCache<T>) {
        self.head(scale).forward_train(pairs)
    }

    pub fn classify_backward(&mut self, scale: Scale, cache: &StackCache<T>, d_logits: Tensor4<T>) -> Tensor4<T> {
        self.head_mut(scale)
            .backward(cache, d_logits, true)
            .expect("input gradient requested")
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Param<T>)) {
        self.main.visit(f);
        self.secondary.visit(f);
        self.head_small.visit(f);
        self.head_large.visit(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.main.visit_mut(f);
        self.secondary.visit_mut(f);
        self.head_small.visit_mut(f);
        self.head_large.visit_mut(f);
    }

    /// `(name, shape)` of every trainable tensor, in a fixed order.
    pub fn parameter_manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, p| out.push((name, p.shape.clone())));
        out
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.len());
        n
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    /// Same architecture and weights in another element type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out = Model::<U>::new(self.config.clone(), self.num_classes).expect("config already validated");
        let mut values = Vec::new();
        self.visit_params(&mut |_, p| values.push(p.value.clone()));
        let mut it = values.into_iter();
        out.visit_params_mut(&mut |_, p| {
            let src = it.next().expect("same architecture");
            p.value = src.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect();
        });
        out
    }

    /// Output `(H, W, C)` after each main-encoder layer for a 32×32 input.
    pub fn main_layer_shapes(&self) -> Vec<(String, [usize; 3])> {
        self.main.trace(Tensor4::zeros(3, 1, SMALL_PATCH, SMALL_PATCH)).1
    }

    /// Output `(H, W, C)` after each secondary-encoder layer for a 64×64 input.
    pub fn secondary_layer_shapes(&self) -> Vec<(String, [usize; 3])> {
        let fibers = self.main.forward(Tensor4::zeros(3, 4, SMALL_PATCH, SMALL_PATCH));
        let map = as_quad_map(fibers, 1);
        let mut shapes = vec![("input".to_string(), [map.h, map.w, map.c])];
        shapes.extend(self.secondary.trace(map).1);
        shapes
    }
}

impl Model<f32> {
    fn check_patch(scale: Scale, patch: &Image) -> Result<()> {
        let s = scale.patch_size();
        if patch.height() != s || patch.width() != s {
            return Err(Error::shape(
                "encoder input",
                format!("{s}x{s}x3"),
                format!("{}x{}x3", patch.height(), patch.width()),
            ));
        }
        Ok(())
    }

    pub fn encode_small(&self, patch: &Image) -> Result<Embedding> {
        Ok(self.encode_batch(Scale::Small32, std::slice::from_ref(patch))?.remove(0))
    }

    pub fn encode_large(&self, patch: &Image) -> Result<Embedding> {
        Ok(self.encode_batch(Scale::Large64, std::slice::from_ref(patch))?.remove(0))
    }

    pub fn encode_batch(&self, scale: Scale, patches: &[Image]) -> Result<Vec<Embedding>> {
        for p in patches {
            Self::check_patch(scale, p)?;
        }
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(ENCODE_CHUNK) {
            let refs: Vec<&Image> = chunk.iter().collect();
            let emb = self.embed(scale, images_to_tensor(&refs));
            for n in 0..emb.n {
                out.push(Embedding {
                    vector: emb.column(n),
                    scale,
                });
            }
        }
        Ok(out)
    }

    /// Embeds every window of a sliding scan with the given stride, row-major.
    pub fn embed_windows(&self, image: &Image, scale: Scale, stride: usize) -> Result<WindowEmbeddings> {
        let patch = scale.patch_size();
        let grid = WindowGrid::new(image.height(), image.width(), patch, stride)?;
        let dim = self.embed_dim();
        let mut data = Vec::with_capacity(grid.len() * dim);
        if scale == Scale::Large64 && SMALL_PATCH.is_multiple_of(stride) {
            // quadrants of overlapping windows coincide on the finer grid, so encode each once
            let sub = WindowGrid::new(image.height(), image.width(), SMALL_PATCH, stride)?;
            let fibers = self.embed_grid_columns(image, &sub, Scale::Small32)?;
            let step = SMALL_PATCH / stride;
            let windows = grid.len();
            for chunk_start in (0..windows).step_by(ENCODE_CHUNK) {
                let chunk = (chunk_start..windows.min(chunk_start + ENCODE_CHUNK)).collect::<Vec<_>>();
                let n = chunk.len();
                let mut map = Tensor4::<f32>::zeros(dim, n, 2, 2);
                for (j, &w) in chunk.iter().enumerate() {
                    let (r, c) = (w / grid.cols, w % grid.cols);
                    for q in 0..4 {
                        let (sr, sc) = (r + (q / 2) * step, c + (q % 2) * step);
                        let src = (sr * sub.cols + sc) * dim;
                        for ch in 0..dim {
                            map.data[(ch * n + j) * 4 + q] = fibers[src + ch];
                        }
                    }
                }
                let out = self.secondary.forward(map);
                for j in 0..n {
                    data.extend((0..dim).map(|ch| out.data[ch * n + j]));
                }
            }
        } else {
            data = self.embed_grid_columns(image, &grid, scale)?;
        }
        Ok(WindowEmbeddings { grid, dim, data })
    }

    fn embed_grid_columns(&self, image: &Image, grid: &WindowGrid, scale: Scale) -> Result<Vec<f32>> {
        let dim = self.embed_dim();
        let mut data = Vec::with_capacity(grid.len() * dim);
        let rects: Vec<Rect> = (0..grid.len()).map(|i| grid.rect(i)).collect();
        for chunk in rects.chunks(ENCODE_CHUNK) {
            let patches = chunk.iter().map(|r| image.crop(*r)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Image> = patches.iter().collect();
            let emb = self.embed(scale, images_to_tensor(&refs));
            for j in 0..emb.n {
                data.extend((0..dim).map(|ch| emb.data[ch * emb.n + j]));
            }
        }
        Ok(data)
    }

    /// Twelve relative-position logits for an embedding pair.
    pub fn classify_pair(&self, e1: &Embedding, e2: &Embedding) -> Result<Vec<f32>> {
        if e1.scale != e2.scale {
            return Err(Error::ScaleMismatch(format!(
                "cannot classify a {} embedding against a {} embedding",
                e1.scale, e2.scale
            )));
        }
        let e = self.embed_dim();
        if e1.vector.len() != e || e2.vector.len() != e {
            return Err(Error::shape("embedding", e, e1.vector.len().max(e2.vector.len())));
        }
        let data = e1.vector.iter().chain(&e2.vector).copied().collect();
        let logits = self.classify(e1.scale, Tensor4::from_vec(data, 2 * e, 1, 1, 1));
        Ok(logits.data)
    }
}

/// Window layout of a sliding scan: `rows = (height − patch) / stride + 1`, likewise `cols`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowGrid {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
}

impl WindowGrid {
    pub fn new(height: usize, width: usize, patch: usize, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if height < patch || width < patch {
            return Err(Error::Geometry(format!("{height}x{width} image is smaller than a {patch}px window")));
        }
        Ok(Self {
            height,
            width,
            patch,
            stride,
            rows: (height - patch) / stride + 1,
            cols: (width - patch) / stride + 1,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rectangle of window `index` in row-major order.
    pub fn rect(&self, index: usize) -> Rect {
        let (r, c) = (index / self.cols, index % self.cols);
        Rect::square(r * self.stride, c * self.stride, self.patch)
    }
}

/// Row-major `grid.len() × dim` embeddings of every window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowEmbeddings {
    pub grid: WindowGrid,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl WindowEmbeddings {
    pub fn row(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }
}

/// Packs equally sized HWC images into a `3×N×H×W` tensor.
pub fn images_to_tensor<T: Scalar>(patches: &[&Image]) -> Tensor4<T> {
    let n = patches.len();
    let (h, w) = patches.first().map(|p| (p.height(), p.width())).unwrap_or((0, 0));
    let mut t = Tensor4::zeros(3, n, h, w);
    let plane = h * w;
    for (s, img) in patches.iter().enumerate() {
        debug_assert_eq!((img.height(), img.width()), (h, w));
        for (i, px) in img.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                t.data[(c * n + s) * plane + i] = T::from_single(px[c]);
            }
        }
    }
    t
}

/// `3×N×64×64` → `3×4N×32×32`, quadrant `q = 2·row + col` of sample `n` at `4n + q`.
pub fn split_quadrants<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let half = x.h / 2;
    let mut out = Tensor4::zeros(x.c, x.n * 4, half, half);
    for c in 0..x.c {
        for n in 0..x.n {
            for q in 0..4 {
                let (qy, qx) = ((q / 2) * half, (q % 2) * half);
                for y in 0..half {
                    let src = x.index(c, n, qy + y, qx);
                    let dst = out.index(c, n * 4 + q, y, 0);
                    out.data[dst..dst + half].copy_from_slice(&x.data[src..src + half]);
                }
            }
        }
    }
    out
}

/// `E×4N×1×1` fibers → `E×N×2×2` maps; the memory layouts coincide.
fn as_quad_map<T: Scalar>(fibers: Tensor4<T>, n: usize) -> Tensor4<T> {
    let c = fibers.c;
    Tensor4::from_vec(fibers.data, c, n, 2, 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            norm_groups: 2,
            main_channels: [4, 4, 4, 4, 4, 4],
            secondary_hidden: 4,
            embed_dim: 8,
            head_hidden: 6,
            init_seed: 7,
            ..EncoderConfig::default()
        }
    }

    fn random_patch(rng: &mut impl Rng, size: usize) -> Image {
        Image::new(size, size, (0..size * size * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn main_encoder_shape_chain() {
        let model = Model::<f32>::new(EncoderConfig::default(), 12).unwrap();
        let shapes = model.main_layer_shapes();
        let want: Vec<(&str, [usize; 3])> = vec![
            ("conv1", [28, 28, 96]),
            ("maxpool1", [14, 14, 96]),
            ("conv2", [14, 14, 256]),
            ("maxpool2", [6, 6, 256]),
            ("conv3", [6, 6, 384]),
            ("conv4", [6, 6, 384]),
            ("conv5", [6, 6, 256]),
            ("maxpool3", [3, 3, 256]),
            ("conv6", [2, 2, 128]),
            ("conv7", [1, 1, 64]),
        ];
        let got: Vec<(&str, [usize; 3])> = shapes.iter().map(|(n, s)| (n.as_str(), *s)).collect();
        assert_eq!(got, want);

        let sec = model.secondary_layer_shapes();
        assert_eq!(sec[0].1, [2, 2, 64]);
        assert_eq!(sec[1], ("conv1".to_string(), [1, 1, 128]));
        assert_eq!(sec[2], ("conv2".to_string(), [1, 1, 64]));
    }

    #[test]
    fn manifest_lists_table_shapes() {
        let model = Model::<f32>::new(EncoderConfig::default(), 12).unwrap();
        let manifest = model.parameter_manifest();
        assert_eq!(manifest[0], ("main.conv1.weight".to_string(), vec![96, 3, 5, 5]));
        let again = Model::<f32>::new(EncoderConfig::default(), 12).unwrap();
        assert_eq!(again, model);
    }

    #[test]
    fn encoders_produce_finite_embeddings_of_the_right_length() {
        let model = Model::<f32>::new(tiny_config(), 12).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let e = model.encode_small(&random_patch(&mut rng, 32)).unwrap();
        assert_eq!(e.vector.len(), 8);
        assert!(e.vector.iter().all(|v| v.is_finite()));
        let zero = Image::filled(32, 32, 0.0);
        assert_eq!(model.encode_small(&zero).unwrap(), model.encode_small(&zero).unwrap());
        let big = model.encode_large(&random_patch(&mut rng, 64)).unwrap();
        assert_eq!(big.scale, Scale::Large64);
        assert!(model.encode_small(&random_patch(&mut rng, 64)).is_err());
        assert!(matches!(model.encode_large(&random_patch(&mut rng, 32)), Err(Error::Shape { .. })));
    }

    #[test]
    fn default_embedding_is_64_wide() {
        let model = Model::<f32>::new(EncoderConfig::default(), 12).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        assert_eq!(model.encode_small(&random_patch(&mut rng, 32)).unwrap().vector.len(), 64);
        assert_eq!(model.encode_large(&random_patch(&mut rng, 64)).unwrap().vector.len(), 64);
    }

    #[test]
    fn batch_rows_equal_single_calls() {
        let model = Model::<f32>::new(tiny_config(), 12).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let patches: Vec<Image> = (0..5).map(|_| random_patch(&mut rng, 32)).collect();
        let batch = model.encode_batch(Scale::Small32, &patches).unwrap();
        for (p, b) in patches.iter().zip(&batch) {
            let single = model.encode_small(p).unwrap();
            for (x, y) in single.vector.iter().zip(&b.vector) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
    }

    fn tile_quadrants(quads: [&Image; 4]) -> Image {
        let mut out = Image::filled(64, 64, 0.0);
        for (q, img) in quads.iter().enumerate() {
            let (oy, ox) = ((q / 2) * 32, (q % 2) * 32);
            for y in 0..32 {
                for x in 0..32 {
                    for c in 0..3 {
                        out.set(oy + y, ox + x, c, img.get(y, x, c));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn quadrant_sharing_and_order_sensitivity() {
        let model = Model::<f32>::new(tiny_config(), 12).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let a = random_patch(&mut rng, 32);
        let same = tile_quadrants([&a, &a, &a, &a]);
        let x = images_to_tensor::<f32>(&[&same]);
        let fibers = model.main.forward(split_quadrants(&x));
        for q in 1..4 {
            for c in 0..fibers.c {
                assert_eq!(fibers.data[c * 4 + q], fibers.data[c * 4]);
            }
        }

        let quads: Vec<Image> = (0..4).map(|_| random_patch(&mut rng, 32)).collect();
        let p = tile_quadrants([&quads[0], &quads[1], &quads[2], &quads[3]]);
        let swapped = tile_quadrants([&quads[3], &quads[2], &quads[1], &quads[0]]);
        let e1 = model.encode_large(&p).unwrap();
        let e2 = model.encode_large(&swapped).unwrap();
        assert!(e1.vector.iter().zip(&e2.vector).any(|(a, b)| (a - b).abs() > 1e-4));
    }

    #[test]
    fn classify_pair_contract() {
        let model = Model::<f32>::new(tiny_config(), 12).unwrap();
        let e = Embedding { vector: vec![0.3; 8], scale: Scale::Small32 };
        let f = Embedding { vector: vec![-0.1; 8], scale: Scale::Large64 };
        let logits = model.classify_pair(&e, &e).unwrap();
        assert_eq!(logits.len(), 12);
        assert!(logits.iter().all(|v| v.is_finite()));
        assert!(matches!(model.classify_pair(&e, &f), Err(Error::ScaleMismatch(_))));
    }

    #[test]
    fn zeroed_head_gives_uniform_loss() {
        let config = EncoderConfig { head_init: HeadInit::Zero, ..tiny_config() };
        let model = Model::<f32>::new(config, 12).unwrap();
        let e = Embedding { vector: vec![0.3; 8], scale: Scale::Small32 };
        let logits = model.classify_pair(&e, &e).unwrap();
        assert_eq!(logits, vec![0.0; 12]);
        let loss = crate::pretext::ssl_loss(&logits.iter().map(|&v| f64::from(v)).collect::<Vec<_>>(), &[5]).unwrap();
        assert!((loss - 12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn invalid_group_config_is_rejected() {
        let cfg = EncoderConfig { norm_groups: 5, ..tiny_config() };
        assert!(Model::<f32>::new(cfg, 12).is_err());
        let cfg = EncoderConfig { secondary_hidden: 2, ..tiny_config() };
        assert!(Model::<f32>::new(cfg, 12).is_err());
    }

    #[test]
    fn window_embeddings_match_direct_crops() {
        let model = Model::<f32>::new(tiny_config(), 12).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let img = random_patch(&mut rng, 112);
        for (scale, stride) in [(Scale::Large64, 16), (Scale::Large64, 8), (Scale::Large64, 12), (Scale::Small32, 20)] {
            let win = model.embed_windows(&img, scale, stride).unwrap();
            let s = scale.patch_size();
            assert_eq!(win.grid.rows, (112 - s) / stride + 1);
            for i in 0..win.grid.len() {
                let direct = model.encode_batch(scale, &[img.crop(win.grid.rect(i)).unwrap()]).unwrap();
                for (a, b) in direct[0].vector.iter().zip(win.row(i)) {
                    assert!((a - b).abs() <= 1e-5, "{scale} stride {stride} window {i}");
                }
            }
        }
    }

    #[test]
    fn window_grid_counts() {
        let g = WindowGrid::new(256, 256, 32, 4).unwrap();
        assert_eq!((g.rows, g.cols, g.len()), (57, 57, 3249));
        assert_eq!(WindowGrid::new(256, 256, 32, 32).unwrap().rows, 8);
        assert_eq!(g.rect(58), Rect::square(4, 4, 32));
        assert!(WindowGrid::new(256, 256, 32, 0).is_err());
    }
}
