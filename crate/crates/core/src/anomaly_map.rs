//! Patch score grids, pixel-level anomaly maps and scale fusion.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Model, Scale, WindowEmbeddings, WindowGrid};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::memory::{score_from_neighbors, AffinityConfig, MemoryBank, Neighbors};

#[derive(Debug, Clone, PartialEq)]
pub struct PatchScoreGrid {
    pub grid: WindowGrid,
    /// Row-major `rows × cols` scores.
    pub scores: Vec<f64>,
}

impl PatchScoreGrid {
    pub fn new(grid: WindowGrid, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != grid.len() {
            return Err(Error::shape("patch score grid", grid.len(), scores.len()));
        }
        if scores.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidInput("patch scores must be finite and nonnegative".into()));
        }
        Ok(Self { grid, scores })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.grid.cols + col]
    }
}

/// Patch size and stride of one contributing scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapSource {
    pub patch: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyMap {
    pub height: usize,
    pub width: usize,
    /// Row-major pixel scores.
    pub pixels: Vec<f64>,
    pub sources: Vec<MapSource>,
    /// Pixels inside no window; they carry score 0.
    pub uncovered: usize,
}

impl AnomalyMap {
    pub fn from_pixels(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::shape("anomaly map", height * width, pixels.len()));
        }
        Ok(Self {
            height,
            width,
            pixels,
            sources: Vec::new(),
            uncovered: 0,
        })
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn min(&self) -> f64 {
        self.pixels.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Row-major position of the largest value; the first one on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.pixels.iter().enumerate() {
            if *v > self.pixels[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }
}

/// Encoded windows of one image with their neighbours, reusable across `eta` and `lambda`.
#[derive(Debug, Clone)]
pub struct PatchNeighbors {
    pub windows: WindowEmbeddings,
    pub neighbors: Vec<Neighbors>,
}

impl PatchNeighbors {
    pub fn compute(image: &Image, model: &Model<f32>, bank: &MemoryBank, stride: usize, max_eta: usize) -> Result<Self> {
        if bank.dim() != model.embed_dim() {
            return Err(Error::shape("memory bank width", model.embed_dim(), bank.dim()));
        }
        let windows = model.embed_windows(image, bank.scale(), stride)?;
        let neighbors = bank.nearest_rows(&windows.data, max_eta)?;
        Ok(Self { windows, neighbors })
    }

    pub fn max_eta(&self) -> usize {
        self.neighbors.first().map_or(0, |n| n.rows.len())
    }

    /// Scores using the first `eta` retrieved neighbours of every window.
    pub fn scores(&self, bank: &MemoryBank, cfg: &AffinityConfig) -> Result<PatchScoreGrid> {
        cfg.validate()?;
        if cfg.eta > self.max_eta() {
            return Err(Error::InvalidInput(format!(
                "eta={} exceeds the {} cached neighbours",
                cfg.eta,
                self.max_eta()
            )));
        }
        let scores = self
            .neighbors
            .iter()
            .enumerate()
            .map(|(i, nn)| score_from_neighbors(self.windows.row(i), bank, nn, cfg.eta, cfg.lambda_cap))
            .collect::<Result<Vec<_>>>()?;
        PatchScoreGrid::new(self.windows.grid, scores)
    }
}

/// Slides the scale's window over `image` and scores every patch against `bank`.
pub fn score_patches(
    image: &Image,
    model: &Model<f32>,
    bank: &MemoryBank,
    scale: Scale,
    stride: usize,
    cfg: &AffinityConfig,
) -> Result<PatchScoreGrid> {
    if bank.scale() != scale {
        return Err(Error::ScaleMismatch(format!(
            "{scale} scan against a {} memory bank",
            bank.scale()
        )));
    }
    cfg.validate()?;
    PatchNeighbors::compute(image, model, bank, stride, cfg.eta)?.scores(bank, cfg)
}

/// Inclusive range of window indices along one axis whose span contains `pos`.
fn covering(pos: usize, patch: usize, stride: usize, count: usize) -> Option<(usize, usize)> {
    let first = if pos + 1 >= patch { (pos + 1 - patch).div_ceil(stride) } else { 0 };
    let last = (pos / stride).min(count - 1);
    (first <= last).then_some((first, last))
}

/// Per-pixel mean of the scores of every window containing the pixel.
pub fn aggregate_pixels(scores: &PatchScoreGrid) -> AnomalyMap {
    let g = scores.grid;
    // summed-area table over the score grid, (rows+1)×(cols+1)
    let w = g.cols + 1;
    let mut table = vec![0.0f64; (g.rows + 1) * w];
    for r in 0..g.rows {
        for c in 0..g.cols {
            table[(r + 1) * w + c + 1] = scores.get(r, c) + table[r * w + c + 1] + table[(r + 1) * w + c] - table[r * w + c];
        }
    }
    let rows: Vec<_> = (0..g.height).map(|y| covering(y, g.patch, g.stride, g.rows)).collect();
    let cols: Vec<_> = (0..g.width).map(|x| covering(x, g.patch, g.stride, g.cols)).collect();
    let mut pixels = vec![0.0; g.height * g.width];
    let mut uncovered = 0;
    for (y, ry) in rows.iter().enumerate() {
        for (x, cx) in cols.iter().enumerate() {
            match (ry, cx) {
                (Some((r0, r1)), Some((c0, c1))) => {
                    let sum = table[(r1 + 1) * w + c1 + 1] - table[r0 * w + c1 + 1] - table[(r1 + 1) * w + c0] + table[r0 * w + c0];
                    let count = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
                    pixels[y * g.width + x] = sum / count;
                }
                _ => uncovered += 1,
            }
        }
    }
    AnomalyMap {
        height: g.height,
        width: g.width,
        pixels,
        sources: vec![MapSource {
            patch: g.patch,
            stride: g.stride,
        }],
        uncovered,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Multiply,
    Mean,
}

fn check_same_size(a: &AnomalyMap, b: &AnomalyMap) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(
            "scale fusion",
            format!("{}x{}", a.height, a.width),
            format!("{}x{}", b.height, b.width),
        ));
    }
    Ok(())
}

fn batch_min(maps: &[AnomalyMap]) -> f64 {
    maps.iter().map(AnomalyMap::min).fold(f64::INFINITY, f64::min)
}

/// Fuses aligned per-image maps of two scales. For the product, each scale's batch minimum is
/// first shifted to zero.
pub fn fuse_scale_batches(first: &[AnomalyMap], second: &[AnomalyMap], mode: FusionMode) -> Result<Vec<AnomalyMap>> {
    if first.len() != second.len() {
        return Err(Error::shape("scale fusion batch", first.len(), second.len()));
    }
    // only the product needs nonnegative factors
    let (shift_a, shift_b) = match mode {
        FusionMode::Multiply => (batch_min(first), batch_min(second)),
        FusionMode::Mean => (0.0, 0.0),
    };
    first
        .iter()
        .zip(second)
        .map(|(a, b)| {
            check_same_size(a, b)?;
            let pixels = a
                .pixels
                .iter()
                .zip(&b.pixels)
                .map(|(&p, &q)| {
                    let (p, q) = (p - shift_a, q - shift_b);
                    match mode {
                        FusionMode::Multiply => p * q,
                        FusionMode::Mean => 0.5 * (p + q),
                    }
                })
                .collect();
            let mut sources = a.sources.clone();
            sources.extend_from_slice(&b.sources);
            Ok(AnomalyMap {
                height: a.height,
                width: a.width,
                pixels,
                sources,
                uncovered: a.uncovered.max(b.uncovered),
            })
        })
        .collect()
}

/// Fuses one image's maps; the shift uses the image itself as the batch.
pub fn fuse_scales(map64: &AnomalyMap, map32: &AnomalyMap, mode: FusionMode) -> Result<AnomalyMap> {
    let mut out = fuse_scale_batches(std::slice::from_ref(map64), std::slice::from_ref(map32), mode)?;
    Ok(out.remove(0))
}

/// Image-level detection score: the largest pixel score.
pub fn image_score(map: &AnomalyMap) -> f64 {
    map.max()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub height: usize,
    pub width: usize,
    /// Raw value mapped to gray level 0.
    pub min: f64,
    /// Raw value mapped to gray level 255.
    pub max: f64,
    pub sources: Vec<MapSource>,
    pub uncovered: usize,
}

/// Writes a min-max normalized 8-bit grayscale PNG and a JSON sidecar next to it.
pub fn save_heatmap(map: &AnomalyMap, png_path: &Path) -> Result<()> {
    let (lo, hi) = (map.min(), map.max());
    let span = hi - lo;
    let bytes: Vec<u8> = map
        .pixels
        .iter()
        .map(|v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    let gray = image::GrayImage::from_raw(map.width as u32, map.height as u32, bytes)
        .ok_or_else(|| Error::shape("heatmap buffer", map.height * map.width, 0))?;
    gray.save(png_path).map_err(|source| Error::Image {
        path: png_path.to_path_buf(),
        source,
    })?;
    let sidecar = HeatmapSidecar {
        height: map.height,
        width: map.width,
        min: lo,
        max: hi,
        sources: map.sources.clone(),
        uncovered: map.uncovered,
    };
    let side_path = png_path.with_extension("json");
    std::fs::write(&side_path, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side_path, e))
}

/// Row-major little-endian `f64` pixels, no header.
pub fn save_raw(map: &AnomalyMap, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        for v in &map.pixels {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_of(size: usize, patch: usize, stride: usize, f: impl Fn(usize) -> f64) -> PatchScoreGrid {
        let grid = WindowGrid::new(size, size, patch, stride).unwrap();
        PatchScoreGrid::new(grid, (0..grid.len()).map(f).collect()).unwrap()
    }

    fn brute_force(scores: &PatchScoreGrid) -> Vec<f64> {
        let g = scores.grid;
        let mut sum = vec![0.0; g.height * g.width];
        let mut count = vec![0usize; g.height * g.width];
        for i in 0..g.len() {
            let r = g.rect(i);
            for y in r.top..r.bottom() {
                for x in r.left..r.right() {
                    sum[y * g.width + x] += scores.scores[i];
                    count[y * g.width + x] += 1;
                }
            }
        }
        sum.iter().zip(&count).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect()
    }

    #[test]
    fn constant_grid_maps_to_the_constant() {
        let map = aggregate_pixels(&grid_of(64, 16, 8, |_| 2.5));
        assert!(map.pixels.iter().all(|&v| v == 2.5));
        assert_eq!(map.uncovered, 0);
    }

    #[test]
    fn interior_pixel_averages_four_windows() {
        let scores = grid_of(256, 32, 16, |i| i as f64);
        let map = aggregate_pixels(&scores);
        // pixel (40, 40) lies in windows with rows and cols {1, 2}
        let want = (scores.get(1, 1) + scores.get(1, 2) + scores.get(2, 1) + scores.get(2, 2)) / 4.0;
        assert!((map.get(40, 40) - want).abs() < 1e-12);
    }

    #[test]
    fn aggregation_matches_the_patch_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for stride in [3, 4, 5, 8, 16, 32, 40] {
            let vals: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..10.0)).collect();
            let scores = grid_of(64, 32, stride, |i| vals[i % vals.len()]);
            let map = aggregate_pixels(&scores);
            for (a, b) in map.pixels.iter().zip(brute_force(&scores)) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn gaps_are_flagged() {
        let map = aggregate_pixels(&grid_of(64, 8, 16, |_| 1.0));
        assert_eq!(map.uncovered, 64 * 64 - 16 * 64);
    }

    fn map(vals: &[f64]) -> AnomalyMap {
        AnomalyMap::from_pixels(1, vals.len(), vals.to_vec()).unwrap()
    }

    #[test]
    fn fusion_contract() {
        let a = map(&[1.0, 3.0, 2.0]);
        let zero = map(&[4.0, 4.0, 4.0]);
        let fused = fuse_scales(&a, &zero, FusionMode::Multiply).unwrap();
        assert!(fused.pixels.iter().all(|&v| v == 0.0));
        assert_eq!(fuse_scales(&a, &a, FusionMode::Mean).unwrap().pixels, vec![1.0, 3.0, 2.0]);
        let b = map(&[0.5, 0.1, 0.9]);
        assert_eq!(
            fuse_scales(&a, &b, FusionMode::Multiply).unwrap().pixels,
            fuse_scales(&b, &a, FusionMode::Multiply).unwrap().pixels
        );
        assert!(fuse_scales(&a, &map(&[1.0]), FusionMode::Mean).is_err());
    }

    #[test]
    fn batch_shift_uses_the_batch_minimum() {
        let first = vec![map(&[2.0, 3.0]), map(&[5.0, 4.0])];
        let second = vec![map(&[1.0, 1.0]), map(&[2.0, 3.0])];
        let fused = fuse_scale_batches(&first, &second, FusionMode::Multiply).unwrap();
        assert_eq!(fused[0].pixels, vec![0.0, 0.0]);
        assert_eq!(fused[1].pixels, vec![3.0, 4.0]);
    }

    #[test]
    fn image_score_is_the_max() {
        let mut m = map(&[0.7; 6]);
        assert_eq!(image_score(&m), 0.7);
        m.pixels[4] = 3.0;
        assert_eq!(image_score(&m), 3.0);
        assert_eq!(m.argmax(), (0, 4));
    }

    #[test]
    fn heatmap_export_writes_png_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let png = dir.path().join("h.png");
        let m = AnomalyMap::from_pixels(2, 2, vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        save_heatmap(&m, &png).unwrap();
        let gray = image::open(&png).unwrap().to_luma8();
        assert_eq!(gray.as_raw(), &vec![0, 64, 128, 255]);
        let side: HeatmapSidecar = serde_json::from_slice(&std::fs::read(png.with_extension("json")).unwrap()).unwrap();
        assert_eq!((side.min, side.max), (1.0, 5.0));
        let raw = dir.path().join("h.f64");
        save_raw(&m, &raw).unwrap();
        assert_eq!(std::fs::read(&raw).unwrap().len(), 32);
    }
}
