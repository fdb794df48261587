//! Test-set scoring, AUROC reports, the η sweep and the per-category protocol.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use serde::{Deserialize, Serialize};

use crate::anomaly_map::{aggregate_pixels, fuse_scale_batches, image_score, AnomalyMap, PatchNeighbors};
use crate::checkpoint::Checkpoint;
use crate::encoder::{Model, Scale};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::memory::{build_memory, AffinityConfig, MemoryBank};
use crate::training::{train, TrainEvent, TrainReport};

use super::config::{EvalConfig, ExperimentConfig, MemoryConfig, SegmentationPooling};
use super::metrics::{auroc, per_image_segmentation_auroc, pooled_segmentation_auroc};
use super::mvtec::{category_kind, CategoryKind};
use super::{Dataset, Label, Sample};

/// Memory banks for both scales.
#[derive(Debug, Clone)]
pub struct ScaleBanks {
    pub large: MemoryBank,
    pub small: MemoryBank,
}

impl ScaleBanks {
    pub fn get(&self, scale: Scale) -> &MemoryBank {
        match scale {
            Scale::Large64 => &self.large,
            Scale::Small32 => &self.small,
        }
    }

    pub fn build(model: &Model<f32>, images: &[Image], cfg: &MemoryConfig) -> Result<Self> {
        let make = |scale: Scale| -> Result<MemoryBank> {
            let bank = build_memory(model, images, scale, cfg.stride(scale))?;
            if cfg.max_rows > 0 && bank.len() > cfg.max_rows {
                bank.subsample(cfg.max_rows, cfg.subsample_seed)
            } else {
                Ok(bank)
            }
        };
        let banks = Self {
            large: make(Scale::Large64)?,
            small: make(Scale::Small32)?,
        };
        banks.check()?;
        Ok(banks)
    }

    fn check(&self) -> Result<()> {
        for scale in Scale::ALL {
            if self.get(scale).scale() != scale {
                return Err(Error::ScaleMismatch(format!(
                    "bank in the {scale} slot holds {} features",
                    self.get(scale).scale()
                )));
            }
        }
        Ok(())
    }
}

/// Seeds and provenance recorded with every report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub category: String,
    pub config_hash: String,
    pub data_seed: Option<u64>,
    pub train_seed: Option<u64>,
    pub init_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub name: String,
    pub label: Label,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub eta: usize,
    pub detection_auroc: f64,
    pub segmentation_auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: RunMeta,
    pub detection_auroc: f64,
    pub segmentation_auroc: f64,
    pub segmentation_pooling: SegmentationPooling,
    pub affinity: AffinityConfig,
    pub stride_large: usize,
    pub stride_small: usize,
    pub bank_rows_large: usize,
    pub bank_rows_small: usize,
    pub images: Vec<ImageResult>,
    pub eta_sweep: Vec<SweepPoint>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "category            {}", self.meta.category);
        let _ = writeln!(s, "config hash         {}", self.meta.config_hash);
        let _ = writeln!(s, "eta / lambda        {} / {}", self.affinity.eta, self.affinity.lambda_cap);
        let _ = writeln!(s, "strides 64 / 32     {} / {}", self.stride_large, self.stride_small);
        let _ = writeln!(s, "bank rows 64 / 32   {} / {}", self.bank_rows_large, self.bank_rows_small);
        let defective = self.images.iter().filter(|r| r.label == Label::Defective).count();
        let _ = writeln!(s, "test images         {} ({} defective)", self.images.len(), defective);
        let _ = writeln!(s, "detection AUROC     {:.4}", self.detection_auroc);
        let _ = writeln!(
            s,
            "segmentation AUROC  {:.4} ({})",
            self.segmentation_auroc,
            match self.segmentation_pooling {
                SegmentationPooling::Pooled => "pooled pixels",
                SegmentationPooling::PerImage => "per-image mean",
            }
        );
        if !self.eta_sweep.is_empty() {
            let _ = writeln!(s, "\n  eta  detection  segmentation");
            for p in &self.eta_sweep {
                let _ = writeln!(s, "{:>5}  {:>9.4}  {:>12.4}", p.eta, p.detection_auroc, p.segmentation_auroc);
            }
        }
        s
    }

    /// Writes `<stem>.json` and `<stem>.txt` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        let text = dir.join(format!("{stem}.txt"));
        fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        fs::write(&text, self.render_text()).map_err(|e| Error::io(&text, e))?;
        Ok((json, text))
    }
}

/// Maps `f` over `items` on all available cores, keeping order.
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(|| part.iter().map(&f).collect::<Result<Vec<U>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Window embeddings and retrieved neighbours for every test image at both scales.
/// Scores for any `eta` up to `max_eta` are derived from this without re-encoding.
#[derive(Debug, Clone)]
pub struct NeighborCache {
    pub large: Vec<PatchNeighbors>,
    pub small: Vec<PatchNeighbors>,
}

impl NeighborCache {
    pub fn compute(model: &Model<f32>, banks: &ScaleBanks, test: &[Sample], cfg: &EvalConfig, max_eta: usize) -> Result<Self> {
        banks.check()?;
        let per_scale = |scale: Scale| {
            let bank = banks.get(scale);
            let eta = max_eta.min(bank.len());
            par_map(test, |s| PatchNeighbors::compute(&s.image, model, bank, cfg.stride(scale), eta))
        };
        Ok(Self {
            large: per_scale(Scale::Large64)?,
            small: per_scale(Scale::Small32)?,
        })
    }

    pub fn max_eta(&self) -> usize {
        self.large
            .iter()
            .chain(&self.small)
            .map(PatchNeighbors::max_eta)
            .min()
            .unwrap_or(0)
    }

    /// Fused per-image anomaly maps for one affinity setting.
    pub fn maps(&self, banks: &ScaleBanks, affinity: &AffinityConfig, cfg: &EvalConfig) -> Result<Vec<AnomalyMap>> {
        let scale_maps = |cached: &[PatchNeighbors], bank: &MemoryBank| -> Result<Vec<AnomalyMap>> {
            par_map(cached, |pn| Ok(aggregate_pixels(&pn.scores(bank, affinity)?)))
        };
        let large = scale_maps(&self.large, &banks.large)?;
        let small = scale_maps(&self.small, &banks.small)?;
        fuse_scale_batches(&large, &small, cfg.fusion)
    }
}

fn masks_for(test: &[Sample]) -> Result<Vec<Mask>> {
    test.iter()
        .map(|s| match (&s.mask, s.label) {
            (Some(m), _) => {
                if (m.height(), m.width()) != (s.image.height(), s.image.width()) {
                    Err(Error::shape(
                        "ground-truth mask",
                        format!("{}x{}", s.image.height(), s.image.width()),
                        format!("{}x{}", m.height(), m.width()),
                    ))
                } else {
                    Ok(m.clone())
                }
            }
            (None, Label::Normal) => Ok(Mask::empty(s.image.height(), s.image.width())),
            (None, Label::Defective) => Err(Error::MissingMask(PathBuf::from(&s.name))),
        })
        .collect()
}

/// Detection and segmentation AUROC of a set of fused maps.
pub fn score_maps(maps: &[AnomalyMap], test: &[Sample], masks: &[Mask], pooling: SegmentationPooling) -> Result<(f64, f64)> {
    let scores: Vec<f64> = maps.iter().map(image_score).collect();
    let labels: Vec<bool> = test.iter().map(Sample::is_defective).collect();
    let detection = auroc(&scores, &labels)?;
    let map_refs: Vec<&AnomalyMap> = maps.iter().collect();
    let mask_refs: Vec<&Mask> = masks.iter().collect();
    let segmentation = match pooling {
        SegmentationPooling::Pooled => pooled_segmentation_auroc(&map_refs, &mask_refs)?,
        SegmentationPooling::PerImage => per_image_segmentation_auroc(&map_refs, &mask_refs)?,
    };
    Ok((detection, segmentation))
}

/// Evaluation output: the report plus the fused maps at the configured η.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub maps: Vec<AnomalyMap>,
    pub cache: NeighborCache,
}

/// Scores every test image, computes both AUROCs and, when configured, the η sweep
/// from the same cached neighbours.
pub fn evaluate(model: &Model<f32>, banks: &ScaleBanks, test: &[Sample], cfg: &EvalConfig, meta: RunMeta) -> Result<Evaluation> {
    cfg.affinity.validate()?;
    let masks = masks_for(test)?;
    let max_eta = cfg.sweep_eta.iter().copied().chain([cfg.affinity.eta]).max().unwrap_or(1);
    let cache = NeighborCache::compute(model, banks, test, cfg, max_eta)?;
    let mut report = report_from_cache(&cache, banks, test, &masks, cfg, meta)?;
    report.eta_sweep = sweep_eta(&cache, banks, test, &masks, cfg, &cfg.sweep_eta)?;
    let maps = cache.maps(banks, &cfg.affinity, cfg)?;
    Ok(Evaluation { report, maps, cache })
}

fn report_from_cache(
    cache: &NeighborCache,
    banks: &ScaleBanks,
    test: &[Sample],
    masks: &[Mask],
    cfg: &EvalConfig,
    meta: RunMeta,
) -> Result<EvalReport> {
    let maps = cache.maps(banks, &cfg.affinity, cfg)?;
    let (detection, segmentation) = score_maps(&maps, test, masks, cfg.segmentation)?;
    Ok(EvalReport {
        meta,
        detection_auroc: detection,
        segmentation_auroc: segmentation,
        segmentation_pooling: cfg.segmentation,
        affinity: cfg.affinity,
        stride_large: cfg.stride_large,
        stride_small: cfg.stride_small,
        bank_rows_large: banks.large.len(),
        bank_rows_small: banks.small.len(),
        images: test
            .iter()
            .zip(&maps)
            .map(|(s, m)| ImageResult {
                name: s.name.clone(),
                label: s.label,
                score: image_score(m),
            })
            .collect(),
        eta_sweep: Vec::new(),
    })
}

/// AUROCs for each η, re-weighting cached neighbours only.
pub fn sweep_eta(
    cache: &NeighborCache,
    banks: &ScaleBanks,
    test: &[Sample],
    masks: &[Mask],
    cfg: &EvalConfig,
    etas: &[usize],
) -> Result<Vec<SweepPoint>> {
    etas.iter()
        .map(|&eta| {
            let affinity = AffinityConfig { eta, ..cfg.affinity };
            let maps = cache.maps(banks, &affinity, cfg)?;
            let (detection, segmentation) = score_maps(&maps, test, masks, cfg.segmentation)?;
            Ok(SweepPoint {
                eta,
                detection_auroc: detection,
                segmentation_auroc: segmentation,
            })
        })
        .collect()
}

/// Re-runs the sweep on an existing evaluation without re-encoding.
pub fn sweep_from_evaluation(eval: &Evaluation, banks: &ScaleBanks, test: &[Sample], cfg: &EvalConfig, etas: &[usize]) -> Result<Vec<SweepPoint>> {
    let masks = masks_for(test)?;
    let limit = eval.cache.max_eta();
    if let Some(&eta) = etas.iter().find(|&&e| e > limit) {
        return Err(Error::InvalidInput(format!("eta={eta} exceeds the {limit} cached neighbours")));
    }
    sweep_eta(&eval.cache, banks, test, &masks, cfg, etas)
}

/// Everything produced for one category.
#[derive(Debug, Clone)]
pub struct CategoryOutcome {
    pub checkpoint: Checkpoint,
    pub banks: ScaleBanks,
    pub train_report: TrainReport,
    pub evaluation: Evaluation,
}

/// Trains, builds banks and evaluates one dataset with `cfg`.
pub fn run_category(dataset: &Dataset, cfg: &ExperimentConfig, progress: &mut dyn FnMut(&TrainEvent)) -> Result<CategoryOutcome> {
    cfg.validate()?;
    let images = dataset.train_images();
    let (checkpoint, train_report) = train(&images, &cfg.training, &cfg.encoder, &cfg.pretext, progress)?;
    let banks = ScaleBanks::build(&checkpoint.model, &images, &cfg.memory)?;
    let meta = RunMeta {
        category: dataset.category.clone(),
        config_hash: cfg.hash()?,
        data_seed: Some(cfg.data_seed),
        train_seed: Some(cfg.training.seed),
        init_seed: Some(cfg.encoder.init_seed),
    };
    let evaluation = evaluate(&checkpoint.model, &banks, &dataset.test, &cfg.evaluation, meta)?;
    Ok(CategoryOutcome {
        checkpoint,
        banks,
        train_report,
        evaluation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    pub detection_auroc: f64,
    pub segmentation_auroc: f64,
}

/// Per-category results laid out as textures, objects, then means.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryTable {
    pub config_hash: String,
    pub rows: Vec<CategoryRow>,
}

impl CategoryTable {
    fn mean_of(rows: &[&CategoryRow]) -> Option<(f64, f64)> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((
            rows.iter().map(|r| r.detection_auroc).sum::<f64>() / n,
            rows.iter().map(|r| r.segmentation_auroc).sum::<f64>() / n,
        ))
    }

    pub fn mean(&self) -> Option<(f64, f64)> {
        Self::mean_of(&self.rows.iter().collect::<Vec<_>>())
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:<12} {:>10} {:>13}", "group", "category", "detection", "segmentation");
        let groups = [
            (CategoryKind::Texture, "Textures"),
            (CategoryKind::Object, "Objects"),
            (CategoryKind::Other, "Other"),
        ];
        for (kind, title) in groups {
            let rows: Vec<&CategoryRow> = self.rows.iter().filter(|r| category_kind(&r.category) == kind).collect();
            for (i, r) in rows.iter().enumerate() {
                let group = if i == 0 { title } else { "" };
                let _ = writeln!(
                    s,
                    "{:<12} {:<12} {:>10.2} {:>13.2}",
                    group,
                    r.category,
                    100.0 * r.detection_auroc,
                    100.0 * r.segmentation_auroc
                );
            }
            if let Some((d, g)) = Self::mean_of(&rows) {
                if kind != CategoryKind::Other {
                    let _ = writeln!(s, "{:<12} {:<12} {:>10.2} {:>13.2}", "", "mean", 100.0 * d, 100.0 * g);
                }
            }
        }
        if let Some((d, g)) = self.mean() {
            let _ = writeln!(s, "{:<12} {:<12} {:>10.2} {:>13.2}", "Mean", "", 100.0 * d, 100.0 * g);
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("categories.json");
        let text = dir.join("categories.txt");
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        fs::write(&text, self.render_text()).map_err(|e| Error::io(&text, e))
    }
}

/// Runs the full protocol over `categories` under `root`, writing each category's report and
/// the combined table into `out_dir`.
pub fn run_mvtec_protocol(
    root: &Path,
    categories: &[String],
    cfg: &ExperimentConfig,
    out_dir: &Path,
    progress: &mut dyn FnMut(&str, &TrainEvent),
) -> Result<CategoryTable> {
    let mut table = CategoryTable {
        config_hash: cfg.hash()?,
        rows: Vec::new(),
    };
    for category in categories {
        let dataset = super::mvtec::load_mvtec_category(root, category)?;
        let outcome = run_category(&dataset, cfg, &mut |ev| progress(category, ev))?;
        let report = &outcome.evaluation.report;
        report.write(out_dir, category)?;
        table.rows.push(CategoryRow {
            category: category.clone(),
            detection_auroc: report.detection_auroc,
            segmentation_auroc: report.segmentation_auroc,
        });
        table.write(out_dir)?;
    }
    Ok(table)
}
