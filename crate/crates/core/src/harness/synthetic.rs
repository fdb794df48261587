//! Procedural textures with planted defects and exact masks.
//!
//! Textures drift smoothly across the image (hue, orientation, scale) so that
//! the relative position of two patches can be read from their content.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Label, Sample, Split};
use crate::error::{Error, Result};
use crate::image::{quantize_u8, Image, Mask};

/// Smallest per-channel change applied inside a defect, before quantization.
pub const MIN_DEFECT_SHIFT: f32 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureFamily {
    Checkerboard,
    Stripes,
    Blobs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectFamily {
    SquarePatch,
    Scratch,
    Blotch,
}

impl DefectFamily {
    pub fn name(self) -> &'static str {
        match self {
            DefectFamily::SquarePatch => "square_patch",
            DefectFamily::Scratch => "scratch",
            DefectFamily::Blotch => "blotch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub category: String,
    pub train_count: usize,
    pub test_count: usize,
    pub image_size: usize,
    pub texture: TextureFamily,
    pub defects: Vec<DefectFamily>,
    /// Inclusive range of the defect's characteristic size in pixels.
    pub defect_size_min: usize,
    pub defect_size_max: usize,
    /// Amplitude of per-pixel noise added to the clean render.
    pub noise: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            category: "synthetic".into(),
            train_count: 32,
            test_count: 40,
            image_size: 256,
            texture: TextureFamily::Stripes,
            defects: vec![DefectFamily::SquarePatch, DefectFamily::Scratch, DefectFamily::Blotch],
            defect_size_min: 16,
            defect_size_max: 40,
            noise: 0.02,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::Config("synthetic image_size must be positive".into()));
        }
        if self.defects.is_empty() && self.test_count > 1 {
            return Err(Error::Config("synthetic defects list is empty".into()));
        }
        if self.defect_size_min == 0 || self.defect_size_min > self.defect_size_max {
            return Err(Error::Config(format!(
                "defect size range [{}, {}] is empty",
                self.defect_size_min, self.defect_size_max
            )));
        }
        if self.defect_size_max > self.image_size {
            return Err(Error::Config(format!(
                "defect size {} exceeds the {}px image",
                self.defect_size_max, self.image_size
            )));
        }
        if !(0.0..0.1).contains(&self.noise) {
            return Err(Error::Config("synthetic noise must lie in [0, 0.1)".into()));
        }
        Ok(())
    }

    pub fn defective_count(&self) -> usize {
        self.test_count / 2
    }
}

/// Per-image random draw of texture parameters.
struct TextureParams {
    family: TextureFamily,
    phase: f32,
    angle0: f32,
    tint: [f32; 3],
    blobs: Vec<(f32, f32, f32)>,
}

impl TextureParams {
    fn draw(family: TextureFamily, size: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = size as f32;
        let blobs = if family == TextureFamily::Blobs {
            let count = (size * size) / 300;
            (0..count)
                .map(|_| (rng.random_range(0.0..s), rng.random_range(0.0..s), rng.random_range(0.8..1.2)))
                .collect()
        } else {
            Vec::new()
        };
        Self {
            family,
            phase: rng.random_range(0.0..2.0 * PI),
            angle0: rng.random_range(-0.15..0.15),
            tint: [
                rng.random_range(-0.04..0.04),
                rng.random_range(-0.04..0.04),
                rng.random_range(-0.04..0.04),
            ],
            blobs,
        }
    }

    /// Pattern intensity in [0, 1] at pixel `(y, x)`; `u`, `v` are the normalized coordinates.
    fn pattern(&self, y: f32, x: f32, u: f32, v: f32, half: f32) -> f32 {
        let (cy, cx) = (y - half, x - half);
        match self.family {
            TextureFamily::Stripes => {
                let angle = self.angle0 + 2.0 * (u - 0.5);
                let period = 6.0 * (22.0f32 / 6.0).powf(v);
                let t = cx * angle.cos() + cy * angle.sin();
                0.5 + 0.5 * (2.0 * PI * t / period + self.phase).sin()
            }
            TextureFamily::Checkerboard => {
                let cell = 4.0 * 4.0f32.powf(v);
                let skew = 1.6 * (u - 0.5);
                let a = (2.0 * PI * (cx + skew * cy) / (2.0 * cell) + self.phase).sin();
                let b = (2.0 * PI * cy / (2.0 * cell) + self.phase * 0.5).sin();
                0.5 + 0.5 * (3.0 * a * b).tanh()
            }
            TextureFamily::Blobs => {
                let sigma = 3.0 + 5.0 * u;
                let reach = (3.0 * sigma) * (3.0 * sigma);
                let mut acc = 0.0;
                for &(by, bx, w) in &self.blobs {
                    let d2 = (y - by) * (y - by) + (x - bx) * (x - bx);
                    if d2 < reach {
                        acc += w * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
                (acc * (0.6 + 0.6 * v)).min(1.0)
            }
        }
    }
}

fn render_clean(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Image {
    let size = spec.image_size;
    let params = TextureParams::draw(spec.texture, size, rng);
    let mut img = Image::filled(size, size, 0.0);
    let denom = (size.max(2) - 1) as f32;
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f32 / denom, y as f32 / denom);
            let p = params.pattern(y as f32, x as f32, u, v, size as f32 * 0.5);
            // red drifts with x, green with y; shading darkens toward one corner
            let dark = [0.12 + 0.30 * u, 0.12 + 0.30 * v, 0.30];
            let shade = 1.0 - 0.12 * (u + v) * 0.5;
            for c in 0..3 {
                let light = dark[c] + 0.42;
                let noise = if spec.noise > 0.0 { rng.random_range(-spec.noise..=spec.noise) } else { 0.0 };
                let val = (dark[c] + (light - dark[c]) * p) * shade + params.tint[c] + noise;
                img.set(y, x, c, f32::from(quantize_u8(val)) / 255.0);
            }
        }
    }
    img
}

/// Moves a channel value by `shift` away from the nearer end of [0, 1].
fn push_away(v: f32, shift: f32) -> f32 {
    if v >= 0.5 {
        v - shift
    } else {
        v + shift
    }
}

fn defect_region(family: DefectFamily, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Mask {
    let size = spec.image_size;
    let extent = rng.random_range(spec.defect_size_min..=spec.defect_size_max);
    let mut mask = Mask::empty(size, size);
    match family {
        DefectFamily::SquarePatch => {
            let top = rng.random_range(0..=size - extent);
            let left = rng.random_range(0..=size - extent);
            for y in top..top + extent {
                for x in left..left + extent {
                    mask.set(y, x, true);
                }
            }
        }
        DefectFamily::Scratch => {
            let length = 2.0 * extent as f32;
            let half_width = rng.random_range(1.0..2.0f32);
            let angle = rng.random_range(0.0..PI);
            let (dy, dx) = (angle.sin() * length * 0.5, angle.cos() * length * 0.5);
            let margin = length * 0.5 + half_width + 1.0;
            let s = size as f32;
            let (cy, cx) = if s > 2.0 * margin {
                (rng.random_range(margin..s - margin), rng.random_range(margin..s - margin))
            } else {
                (s * 0.5, s * 0.5)
            };
            let (ay, ax, by, bx) = (cy - dy, cx - dx, cy + dy, cx + dx);
            let len2 = (by - ay).powi(2) + (bx - ax).powi(2);
            for y in 0..size {
                for x in 0..size {
                    let (py, px) = (y as f32, x as f32);
                    let t = (((py - ay) * (by - ay) + (px - ax) * (bx - ax)) / len2).clamp(0.0, 1.0);
                    let (qy, qx) = (ay + t * (by - ay), ax + t * (bx - ax));
                    if (py - qy).powi(2) + (px - qx).powi(2) <= half_width * half_width {
                        mask.set(y, x, true);
                    }
                }
            }
        }
        DefectFamily::Blotch => {
            let ry = extent as f32 * 0.5;
            let rx = ry * rng.random_range(0.6..1.0f32);
            let cy = rng.random_range(ry..=size as f32 - ry);
            let cx = rng.random_range(rx..=size as f32 - rx);
            for y in 0..size {
                for x in 0..size {
                    let (py, px) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
                    if (py / ry).powi(2) + (px / rx).powi(2) <= 1.0 {
                        mask.set(y, x, true);
                    }
                }
            }
        }
    }
    mask
}

fn plant_defect(clean: &Image, family: DefectFamily, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (Image, Mask) {
    let mask = defect_region(family, spec, rng);
    let shift: [f32; 3] = match family {
        DefectFamily::SquarePatch => [
            rng.random_range(0.2..0.4),
            rng.random_range(0.2..0.4),
            rng.random_range(0.2..0.4),
        ],
        DefectFamily::Scratch => [0.35; 3],
        DefectFamily::Blotch => [rng.random_range(MIN_DEFECT_SHIFT..0.3); 3],
    };
    let mut img = clean.clone();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                for (c, s) in shift.iter().enumerate() {
                    let v = push_away(clean.get(y, x, c), *s);
                    img.set(y, x, c, f32::from(quantize_u8(v)) / 255.0);
                }
            }
        }
    }
    (img, mask)
}

/// Generated dataset plus the defect-free render behind every test image.
pub struct SyntheticOutput {
    pub dataset: Dataset,
    pub clean_test: Vec<Image>,
}

pub fn generate_with_references(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = |image, label, mask, split, name: String| Sample {
        image,
        label,
        mask,
        category: spec.category.clone(),
        split,
        name,
    };
    let mut train = Vec::with_capacity(spec.train_count);
    for i in 0..spec.train_count {
        let img = render_clean(spec, &mut rng);
        train.push(sample(img, Label::Normal, None, Split::Train, format!("train/good/{i:03}.png")));
    }
    let defective = spec.defective_count();
    let normal = spec.test_count - defective;
    let mut test = Vec::with_capacity(spec.test_count);
    let mut clean_test = Vec::with_capacity(spec.test_count);
    for i in 0..normal {
        let img = render_clean(spec, &mut rng);
        let mask = Mask::empty(spec.image_size, spec.image_size);
        clean_test.push(img.clone());
        test.push(sample(img, Label::Normal, Some(mask), Split::Test, format!("test/good/{i:03}.png")));
    }
    for i in 0..defective {
        let clean = render_clean(spec, &mut rng);
        let family = spec.defects[rng.random_range(0..spec.defects.len())];
        let (img, mask) = plant_defect(&clean, family, spec, &mut rng);
        clean_test.push(clean);
        test.push(sample(
            img,
            Label::Defective,
            Some(mask),
            Split::Test,
            format!("test/{}/{i:03}.png", family.name()),
        ));
    }
    Ok(SyntheticOutput {
        dataset: Dataset {
            category: spec.category.clone(),
            train,
            test,
        },
        clean_test,
    })
}

pub fn generate_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    generate_with_references(spec, seed).map(|o| o.dataset)
}
