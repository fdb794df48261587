//! Relative-position context prediction on a 3×3 grid of patches.
//!
//! Two of the nine grid cells are drawn, each patch is jittered and
//! gray-shifted independently, and the pair is labelled with one of twelve
//! relative-position classes. The 36 unordered cell pairs collapse to those
//! twelve classes by canonicalizing the displacement sign, so the label does
//! not depend on which patch is presented first.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Rect};
use crate::nn::Scalar;

pub const GRID: usize = 3;
pub const NUM_CELLS: usize = GRID * GRID;
pub const NUM_RELATIVE_CLASSES: usize = 12;

/// Canonical `(Δrow, Δcol)` per class id, in lexicographic order.
///
/// A raw displacement is canonical when `Δrow > 0`, or `Δrow == 0 && Δcol > 0`.
pub const CANONICAL_DISPLACEMENTS: [(i32, i32); NUM_RELATIVE_CLASSES] = [
    (0, 1),
    (0, 2),
    (1, -2),
    (1, -1),
    (1, 0),
    (1, 1),
    (1, 2),
    (2, -2),
    (2, -1),
    (2, 0),
    (2, 1),
    (2, 2),
];

/// A cell of the 3×3 grid together with the pixel rectangle sampled for it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridPose {
    pub index: usize,
    pub row: usize,
    pub col: usize,
    pub rect: Rect,
}

impl GridPose {
    pub fn new(index: usize, rect: Rect) -> Result<Self> {
        if index >= NUM_CELLS {
            return Err(Error::InvalidInput(format!("grid index {index} outside 0..9")));
        }
        Ok(Self {
            index,
            row: index / GRID,
            col: index % GRID,
            rect,
        })
    }

    /// A pose with a placeholder rectangle, for label arithmetic only.
    pub fn cell(index: usize) -> Result<Self> {
        Self::new(index, Rect::square(0, 0, 0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelativeClass {
    pub id: usize,
    pub displacement: (i32, i32),
}

impl RelativeClass {
    pub fn from_id(id: usize) -> Result<Self> {
        CANONICAL_DISPLACEMENTS
            .get(id)
            .map(|&displacement| Self { id, displacement })
            .ok_or(Error::InvalidLabel {
                label: id,
                classes: NUM_RELATIVE_CLASSES,
            })
    }
}

fn canonicalize(dr: i32, dc: i32) -> (i32, i32) {
    if dr < 0 || (dr == 0 && dc < 0) {
        (-dr, -dc)
    } else {
        (dr, dc)
    }
}

pub fn relative_class_of(a: &GridPose, b: &GridPose) -> Result<RelativeClass> {
    relative_class_of_cells(a.index, b.index)
}

pub fn relative_class_of_cells(a: usize, b: usize) -> Result<RelativeClass> {
    if a >= NUM_CELLS || b >= NUM_CELLS {
        return Err(Error::InvalidInput(format!("grid indices ({a}, {b}) outside 0..9")));
    }
    if a == b {
        return Err(Error::InvalidPair(a));
    }
    let dr = (b / GRID) as i32 - (a / GRID) as i32;
    let dc = (b % GRID) as i32 - (a % GRID) as i32;
    let disp = canonicalize(dr, dc);
    let id = CANONICAL_DISPLACEMENTS
        .iter()
        .position(|&d| d == disp)
        .expect("every in-grid displacement is canonical after sign flip");
    Ok(RelativeClass { id, displacement: disp })
}

/// Class of every unordered cell pair `(i, j)`, `i < j`, in lexicographic order (36 entries).
pub fn enumerate_pair_classes() -> Vec<((usize, usize), RelativeClass)> {
    let mut table = Vec::with_capacity(36);
    for i in 0..NUM_CELLS {
        for j in i + 1..NUM_CELLS {
            let class = relative_class_of_cells(i, j).expect("distinct in-range cells");
            table.push(((i, j), class));
        }
    }
    table
}

/// Number of unordered cell pairs mapped to each class id.
pub fn class_multiplicities() -> [usize; NUM_RELATIVE_CLASSES] {
    let mut counts = [0; NUM_RELATIVE_CLASSES];
    for (_, class) in enumerate_pair_classes() {
        counts[class.id] += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretextConfig {
    pub patch_size: usize,
    /// Maximum per-axis jitter in pixels, applied in either direction.
    pub jitter_max: usize,
    /// Maximum additive gray shift in 1/255 units.
    pub gray_shift_max: u32,
    /// Pixels between adjacent nominal cells.
    pub grid_gap: usize,
}

impl Default for PretextConfig {
    fn default() -> Self {
        Self {
            patch_size: 64,
            jitter_max: 16,
            gray_shift_max: 16,
            grid_gap: 0,
        }
    }
}

impl PretextConfig {
    pub fn with_patch_size(patch_size: usize) -> Self {
        Self {
            patch_size,
            ..Self::default()
        }
    }

    /// Smallest image side that hosts the grid plus the jitter margin.
    pub fn min_image_side(&self) -> usize {
        GRID * self.patch_size + (GRID - 1) * self.grid_gap + 2 * self.jitter_max
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("pretext patch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub image_id: usize,
    /// Top-left corner of the nominal (unjittered) grid.
    pub grid_origin: (usize, usize),
    pub pose_a: GridPose,
    pub pose_b: GridPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPairSample {
    pub patch_a: Image,
    pub patch_b: Image,
    pub label: RelativeClass,
    pub meta: PairMeta,
}

/// Draws one jittered, gray-shifted patch pair from a 3×3 grid placed at a random origin.
pub fn sample_patch_pair<R: Rng + ?Sized>(
    image: &Image,
    image_id: usize,
    cfg: &PretextConfig,
    rng: &mut R,
) -> Result<PatchPairSample> {
    cfg.validate()?;
    let need = cfg.min_image_side();
    if image.height() < need || image.width() < need {
        return Err(Error::Geometry(format!(
            "image {}x{} too small for {}px context grid with {}px jitter: need at least {need}x{need}",
            image.height(),
            image.width(),
            cfg.patch_size,
            cfg.jitter_max
        )));
    }
    let pitch = cfg.patch_size + cfg.grid_gap;
    let extent = GRID * cfg.patch_size + (GRID - 1) * cfg.grid_gap;
    let jitter = cfg.jitter_max;
    let origin_y = rng.random_range(jitter..=image.height() - extent - jitter);
    let origin_x = rng.random_range(jitter..=image.width() - extent - jitter);

    let a = rng.random_range(0..NUM_CELLS);
    let mut b = rng.random_range(0..NUM_CELLS - 1);
    if b >= a {
        b += 1;
    }

    let j = jitter as i64;
    let mut pose = |index: usize| -> Result<GridPose> {
        let (row, col) = (index / GRID, index % GRID);
        let top = (origin_y + row * pitch) as i64 + rng.random_range(-j..=j);
        let left = (origin_x + col * pitch) as i64 + rng.random_range(-j..=j);
        GridPose::new(index, Rect::square(top as usize, left as usize, cfg.patch_size))
    };
    let pose_a = pose(a)?;
    let pose_b = pose(b)?;

    let max_shift = cfg.gray_shift_max as f32 / 255.0;
    let mut draw_patch = |p: &GridPose| -> Result<Image> {
        let mut tile = image.crop(p.rect)?;
        if max_shift > 0.0 {
            tile.shift_gray(rng.random_range(-max_shift..=max_shift));
        }
        Ok(tile)
    };
    let patch_a = draw_patch(&pose_a)?;
    let patch_b = draw_patch(&pose_b)?;
    Ok(PatchPairSample {
        patch_a,
        patch_b,
        label: relative_class_of(&pose_a, &pose_b)?,
        meta: PairMeta {
            image_id,
            grid_origin: (origin_y, origin_x),
            pose_a,
            pose_b,
        },
    })
}

/// A labelled patch pair produced by any pair-classification pretext task.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub patch_a: Image,
    pub patch_b: Image,
    pub label: usize,
}

/// Plug-in slot for pair-classification pretext tasks.
pub trait PairPretext {
    fn name(&self) -> &str;

    fn num_classes(&self) -> usize;

    fn patch_size(&self) -> usize;

    fn sample(&self, image: &Image, image_id: usize, rng: &mut dyn RngCore) -> Result<LabeledPair>;
}

/// The twelve-class relative-position task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextPrediction {
    pub config: PretextConfig,
}

impl ContextPrediction {
    pub fn new(config: PretextConfig) -> Self {
        Self { config }
    }
}

impl PairPretext for ContextPrediction {
    fn name(&self) -> &str {
        "context_prediction"
    }

    fn num_classes(&self) -> usize {
        NUM_RELATIVE_CLASSES
    }

    fn patch_size(&self) -> usize {
        self.config.patch_size
    }

    fn sample(&self, image: &Image, image_id: usize, rng: &mut dyn RngCore) -> Result<LabeledPair> {
        let s = sample_patch_pair(image, image_id, &self.config, rng)?;
        Ok(LabeledPair {
            patch_a: s.patch_a,
            patch_b: s.patch_b,
            label: s.label.id,
        })
    }
}

/// Mean softmax cross-entropy over a row-major `batch × classes` logit matrix,
/// with its gradient with respect to the logits.
pub fn cross_entropy<T: Scalar>(logits: &[T], classes: usize, labels: &[usize]) -> Result<(T, Vec<T>)> {
    if classes == 0 || logits.len() != labels.len() * classes {
        return Err(Error::shape(
            "cross-entropy logits",
            format!("{}x{classes}", labels.len()),
            logits.len(),
        ));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("cross-entropy over an empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidLabel { label: bad, classes });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite logit".into()));
    }
    let batch = T::from_usize(labels.len()).unwrap();
    let mut total = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for (row, &label) in labels.iter().enumerate() {
        let z = &logits[row * classes..(row + 1) * classes];
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = z.iter().map(|&v| (v - max).exp()).sum();
        let log_norm = max + sum.ln();
        total = total + (log_norm - z[label]);
        let g = &mut grad[row * classes..(row + 1) * classes];
        for (k, gk) in g.iter_mut().enumerate() {
            let p = (z[k] - log_norm).exp();
            let target = if k == label { T::one() } else { T::zero() };
            *gk = (p - target) / batch;
        }
    }
    Ok((total / batch, grad))
}

/// Mean cross-entropy of twelve-way relative-position logits.
pub fn ssl_loss(logits: &[f64], labels: &[usize]) -> Result<f64> {
    cross_entropy(logits, NUM_RELATIVE_CLASSES, labels).map(|(l, _)| l)
}
