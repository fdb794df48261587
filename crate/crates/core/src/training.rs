//! Joint optimization of both scales with the relative-position loss plus the
//! patch-distance (SVDD) loss.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, PretextScales};
use crate::encoder::{images_to_tensor, Embedding, EncoderConfig, Model, Scale};
use crate::error::{Error, Result};
use crate::image::{Image, Rect};
use crate::nn::{Adam, Scalar, Tensor4};
use crate::pretext::{cross_entropy, ContextPrediction, LabeledPair, PairPretext, PretextConfig, NUM_RELATIVE_CLASSES};

/// Stream tweak that separates the held-out evaluation pairs from the training stream.
const HOLDOUT_STREAM: u64 = 0x5ee_d0f4_01d0u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the patch-distance loss.
    pub alpha: f64,
    /// Per-axis offset bound for positive pairs, in pixels.
    pub svdd_offset_max: usize,
    /// Pretext pairs and positive pairs drawn per scale per step.
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Pairs processed per forward/backward chunk; affects memory only.
    pub micro_batch: usize,
    /// Share of training images kept aside for pretext accuracy.
    pub holdout_fraction: f64,
    /// Pretext pairs per scale in the held-out accuracy probe.
    pub holdout_pairs: usize,
    pub scales: Vec<Scale>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            svdd_offset_max: 4,
            batch_size: 64,
            epochs: 20,
            steps_per_epoch: 50,
            learning_rate: 1e-4,
            seed: 0,
            micro_batch: 16,
            holdout_fraction: 0.125,
            holdout_pairs: 256,
            scales: vec![Scale::Large64, Scale::Small32],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.steps_per_epoch == 0 || self.micro_batch == 0 {
            return bad("batch_size, epochs, steps_per_epoch and micro_batch must be positive");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must lie in [0, 1)");
        }
        if self.scales.is_empty() {
            return bad("at least one scale must be trained");
        }
        let mut seen = self.scales.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.scales.len() {
            return bad("scales must not repeat");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleAccuracy {
    pub scale: Scale,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ssl_loss: f64,
    pub svdd_loss: f64,
    pub total_loss: f64,
    /// Pretext accuracy pooled over every trained scale.
    pub holdout_accuracy: f64,
    pub accuracy_by_scale: Vec<ScaleAccuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Relative-position loss of the first batch, before any update.
    pub initial_ssl_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub train_images: usize,
    pub holdout_images: usize,
    /// Set when the dataset is too small to hold images out; accuracy then uses training images.
    pub holdout_from_training: bool,
    pub parameter_count: usize,
}

impl TrainReport {
    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.holdout_accuracy)
    }
}

/// Progress records; `Display` renders one `key=value` line.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainEvent {
    Step {
        epoch: usize,
        step: usize,
        loss: LossParts,
    },
    Epoch(EpochRecord),
}

impl fmt::Display for TrainEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainEvent::Step { epoch, step, loss } => write!(
                f,
                "event=step epoch={epoch} step={step} ssl={:.6} svdd={:.6} total={:.6}",
                loss.ssl, loss.svdd, loss.total
            ),
            TrainEvent::Epoch(r) => {
                write!(
                    f,
                    "event=epoch epoch={} ssl={:.6} svdd={:.6} total={:.6} holdout_acc={:.4}",
                    r.epoch, r.ssl_loss, r.svdd_loss, r.total_loss, r.holdout_accuracy
                )?;
                for s in &r.accuracy_by_scale {
                    write!(f, " acc_{}={:.4}", s.scale, s.accuracy)?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub ssl: f64,
    pub svdd: f64,
    pub total: f64,
}

pub fn total_loss(ssl: f64, svdd: f64, alpha: f64) -> f64 {
    ssl + alpha * svdd
}

/// Crop at `rect` and at `rect` shifted by a uniform integer offset per axis, clamped to the image.
pub fn make_positive_pair<R: Rng + ?Sized>(
    image: &Image,
    rect: Rect,
    offset_max: usize,
    rng: &mut R,
) -> Result<(Image, Image)> {
    let anchor = image.crop(rect)?;
    let m = offset_max as i64;
    let dy = rng.random_range(-m..=m);
    let dx = rng.random_range(-m..=m);
    let top = (rect.top as i64 + dy).clamp(0, (image.height() - rect.height) as i64) as usize;
    let left = (rect.left as i64 + dx).clamp(0, (image.width() - rect.width) as i64) as usize;
    let shifted = image.crop(Rect::new(top, left, rect.height, rect.width))?;
    Ok((anchor, shifted))
}

/// Sum over pairs of the Euclidean distance between the two embeddings.
pub fn svdd_loss(pairs: &[(Embedding, Embedding)]) -> Result<f64> {
    let mut total = 0.0;
    for (a, b) in pairs {
        if a.scale != b.scale {
            return Err(Error::ScaleMismatch(format!(
                "positive pair mixes {} and {} embeddings",
                a.scale, b.scale
            )));
        }
        if a.vector.len() != b.vector.len() {
            return Err(Error::shape("positive pair", a.vector.len(), b.vector.len()));
        }
        let sq: f64 = a
            .vector
            .iter()
            .zip(&b.vector)
            .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
            .sum();
        total += sq.sqrt();
    }
    Ok(total)
}

/// Training inputs for one scale in one step.
#[derive(Debug, Clone)]
pub struct ScaleBatch {
    pub scale: Scale,
    pub pretext: Vec<LabeledPair>,
    pub positives: Vec<(Image, Image)>,
}

#[derive(Debug, Clone)]
pub struct StepBatch {
    pub scales: Vec<ScaleBatch>,
}

fn pretext_for(pretext: &PretextScales, scale: Scale) -> PretextConfig {
    match scale {
        Scale::Small32 => pretext.small,
        Scale::Large64 => pretext.large,
    }
}

fn check_geometry(images: &[Image], pretext: &PretextScales, scales: &[Scale]) -> Result<()> {
    for &scale in scales {
        let p = pretext_for(pretext, scale);
        p.validate()?;
        if p.patch_size != scale.patch_size() {
            return Err(Error::Config(format!(
                "pretext patch size {} does not match the {} scale",
                p.patch_size, scale
            )));
        }
        let need = p.min_image_side();
        if let Some(img) = images.iter().find(|i| i.height() < need || i.width() < need) {
            return Err(Error::Geometry(format!(
                "training image {}x{} is below the {}x{} minimum of the {} scale",
                img.height(),
                img.width(),
                need,
                need,
                scale
            )));
        }
    }
    Ok(())
}

/// Draws the pretext and positive pairs of one step from `images`, with replacement.
pub fn sample_step_batch(
    images: &[Image],
    cfg: &TrainConfig,
    pretext: &PretextScales,
    rng: &mut dyn RngCore,
) -> Result<StepBatch> {
    if images.is_empty() {
        return Err(Error::Dataset("no images to sample from".into()));
    }
    let mut scales = Vec::with_capacity(cfg.scales.len());
    for &scale in &cfg.scales {
        let task = ContextPrediction::new(pretext_for(pretext, scale));
        let mut pairs = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let id = rng.random_range(0..images.len());
            pairs.push(task.sample(&images[id], id, rng)?);
        }
        let s = scale.patch_size();
        let mut positives = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let img = &images[rng.random_range(0..images.len())];
            if img.height() < s || img.width() < s {
                return Err(Error::Geometry(format!("image smaller than a {s}px patch")));
            }
            let rect = Rect::square(rng.random_range(0..=img.height() - s), rng.random_range(0..=img.width() - s), s);
            positives.push(make_positive_pair(img, rect, cfg.svdd_offset_max, rng)?);
        }
        scales.push(ScaleBatch {
            scale,
            pretext: pairs,
            positives,
        });
    }
    Ok(StepBatch { scales })
}

/// `E×2c` embeddings of `[a₀..a_c, b₀..b_c]` → `2E×c` concatenated pairs.
fn concat_pairs<T: Scalar>(emb: &Tensor4<T>, c: usize) -> Tensor4<T> {
    let e = emb.c;
    let mut out = Tensor4::zeros(2 * e, c, 1, 1);
    for ch in 0..e {
        let row = &emb.data[ch * 2 * c..(ch + 1) * 2 * c];
        out.data[ch * c..(ch + 1) * c].copy_from_slice(&row[..c]);
        out.data[(e + ch) * c..(e + ch + 1) * c].copy_from_slice(&row[c..]);
    }
    out
}

/// Inverse layout of [`concat_pairs`].
fn split_pairs<T: Scalar>(pairs: &Tensor4<T>, c: usize) -> Tensor4<T> {
    let e = pairs.c / 2;
    let mut out = Tensor4::zeros(e, 2 * c, 1, 1);
    for ch in 0..e {
        out.data[ch * 2 * c..ch * 2 * c + c].copy_from_slice(&pairs.data[ch * c..(ch + 1) * c]);
        out.data[ch * 2 * c + c..(ch + 1) * 2 * c].copy_from_slice(&pairs.data[(e + ch) * c..(e + ch + 1) * c]);
    }
    out
}

/// `K×c` channel-major logits → row-major `c×K`.
fn logits_rows<T: Scalar>(logits: &Tensor4<T>) -> Vec<T> {
    let (k, c) = (logits.c, logits.n);
    let mut rows = vec![T::zero(); k * c];
    for j in 0..k {
        for i in 0..c {
            rows[i * k + j] = logits.data[j * c + i];
        }
    }
    rows
}

fn non_finite(details: String) -> Error {
    Error::NonFiniteLoss {
        epoch: 0,
        step: 0,
        details,
    }
}

fn pair_images<'a>(pairs: &[(&'a Image, &'a Image)]) -> Vec<&'a Image> {
    pairs.iter().map(|p| p.0).chain(pairs.iter().map(|p| p.1)).collect()
}

/// Loss of one step, with its gradient accumulated into the model.
///
/// Step loss is the mean over scales of `ssl + alpha·svdd`.
fn run_step<T: Scalar>(model: &mut Model<T>, batch: &StepBatch, alpha: f64, micro: usize) -> Result<LossParts> {
    let num_scales = batch.scales.len() as f64;
    let k = model.num_classes();
    let mut ssl_sum = 0.0;
    let mut svdd_sum = 0.0;
    for sb in &batch.scales {
        let total_pairs = sb.pretext.len() as f64;
        let mut ssl = 0.0;
        for chunk in sb.pretext.chunks(micro) {
            let c = chunk.len();
            let refs: Vec<(&Image, &Image)> = chunk.iter().map(|p| (&p.patch_a, &p.patch_b)).collect();
            let x = images_to_tensor::<T>(&pair_images(&refs));
            let labels: Vec<usize> = chunk.iter().map(|p| p.label).collect();
            let share = c as f64 / total_pairs;
            let (emb, ecache) = model.embed_train(sb.scale, x);
            let (logits, hcache) = model.classify_train(sb.scale, concat_pairs(&emb, c));
            let rows = logits_rows(&logits);
            if rows.iter().any(|v| !v.is_finite()) {
                return Err(non_finite(format!("non-finite logits at scale {}", sb.scale)));
            }
            let (loss, grad) = cross_entropy(&rows, k, &labels)?;
            ssl += loss.to_f64().unwrap() * share;
            let w = T::from_f64(share / num_scales).unwrap();
            let mut d_logits = Tensor4::zeros(k, c, 1, 1);
            for i in 0..c {
                for j in 0..k {
                    d_logits.data[j * c + i] = grad[i * k + j] * w;
                }
            }
            let d_pairs = model.classify_backward(sb.scale, &hcache, d_logits);
            model.embed_backward(&ecache, split_pairs(&d_pairs, c));
        }

        let mut svdd = 0.0;
        for chunk in sb.positives.chunks(micro) {
            let c = chunk.len();
            let refs: Vec<(&Image, &Image)> = chunk.iter().map(|p| (&p.0, &p.1)).collect();
            let x = images_to_tensor::<T>(&pair_images(&refs));
            let (emb, ecache) = model.embed_train(sb.scale, x);
            let e = emb.c;
            let mut d_emb = Tensor4::zeros(e, 2 * c, 1, 1);
            let w = alpha / num_scales;
            for i in 0..c {
                let sq: f64 = (0..e)
                    .map(|ch| {
                        let d = (emb.data[ch * 2 * c + i] - emb.data[ch * 2 * c + c + i]).to_f64().unwrap();
                        d * d
                    })
                    .sum();
                let dist = sq.sqrt();
                if !dist.is_finite() {
                    return Err(non_finite(format!("non-finite positive-pair distance at scale {}", sb.scale)));
                }
                svdd += dist;
                if dist > 0.0 {
                    for ch in 0..e {
                        let d = emb.data[ch * 2 * c + i] - emb.data[ch * 2 * c + c + i];
                        let g = d * T::from_f64(w / dist).unwrap();
                        d_emb.data[ch * 2 * c + i] = g;
                        d_emb.data[ch * 2 * c + c + i] = -g;
                    }
                }
            }
            model.embed_backward(&ecache, d_emb);
        }
        ssl_sum += ssl;
        svdd_sum += svdd;
    }
    let ssl = ssl_sum / num_scales;
    let svdd = svdd_sum / num_scales;
    Ok(LossParts {
        ssl,
        svdd,
        total: total_loss(ssl, svdd, alpha),
    })
}

/// Loss of a fixed batch without touching gradients.
pub fn batch_loss<T: Scalar>(model: &Model<T>, batch: &StepBatch, alpha: f64, micro_batch: usize) -> Result<LossParts> {
    let micro = micro_batch.max(1);
    let num_scales = batch.scales.len() as f64;
    let k = model.num_classes();
    let mut ssl_sum = 0.0;
    let mut svdd_sum = 0.0;
    for sb in &batch.scales {
        let total_pairs = sb.pretext.len() as f64;
        for chunk in sb.pretext.chunks(micro) {
            let c = chunk.len();
            let refs: Vec<(&Image, &Image)> = chunk.iter().map(|p| (&p.patch_a, &p.patch_b)).collect();
            let emb = model.embed(sb.scale, images_to_tensor::<T>(&pair_images(&refs)));
            let rows = logits_rows(&model.classify(sb.scale, concat_pairs(&emb, c)));
            let labels: Vec<usize> = chunk.iter().map(|p| p.label).collect();
            let loss = cross_entropy(&rows, k, &labels)?.0.to_f64().unwrap();
            ssl_sum += loss * c as f64 / total_pairs;
        }
        for chunk in sb.positives.chunks(micro) {
            let c = chunk.len();
            let refs: Vec<(&Image, &Image)> = chunk.iter().map(|p| (&p.0, &p.1)).collect();
            let emb = model.embed(sb.scale, images_to_tensor::<T>(&pair_images(&refs)));
            for i in 0..c {
                let sq: f64 = (0..emb.c)
                    .map(|ch| {
                        let d = (emb.data[ch * 2 * c + i] - emb.data[ch * 2 * c + c + i]).to_f64().unwrap();
                        d * d
                    })
                    .sum();
                svdd_sum += sq.sqrt();
            }
        }
    }
    let ssl = ssl_sum / num_scales;
    let svdd = svdd_sum / num_scales;
    Ok(LossParts {
        ssl,
        svdd,
        total: total_loss(ssl, svdd, alpha),
    })
}

/// Adds the gradient of the step loss on `batch` to every parameter's `grad`.
pub fn accumulate_gradients<T: Scalar>(
    model: &mut Model<T>,
    batch: &StepBatch,
    alpha: f64,
    micro_batch: usize,
) -> Result<LossParts> {
    run_step(model, batch, alpha, micro_batch.max(1))
}

/// Fraction of pairs whose arg-max logit is the true relative-position class.
pub fn pretext_accuracy(model: &Model<f32>, scale: Scale, pairs: &[LabeledPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let k = model.num_classes();
    let mut correct = 0usize;
    for chunk in pairs.chunks(64) {
        let c = chunk.len();
        let refs: Vec<(&Image, &Image)> = chunk.iter().map(|p| (&p.patch_a, &p.patch_b)).collect();
        let emb = model.embed(scale, images_to_tensor::<f32>(&pair_images(&refs)));
        let rows = logits_rows(&model.classify(scale, concat_pairs(&emb, c)));
        for (i, p) in chunk.iter().enumerate() {
            let row = &rows[i * k..(i + 1) * k];
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += usize::from(best == p.label);
        }
    }
    correct as f64 / pairs.len() as f64
}

fn apply_update<T: Scalar>(model: &mut Model<T>, opt: &mut Adam) {
    opt.begin_step();
    let mut slot = 0;
    model.visit_params_mut(&mut |_, p| {
        opt.update(slot, p);
        slot += 1;
    });
}

/// Trains a fresh model on defect-free `images`.
pub fn train(
    images: &[Image],
    cfg: &TrainConfig,
    encoder: &EncoderConfig,
    pretext: &PretextScales,
    progress: &mut dyn FnMut(&TrainEvent),
) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    check_geometry(images, pretext, &cfg.scales)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng);
    let n = images.len();
    let n_holdout = if n >= 2 && cfg.holdout_fraction > 0.0 {
        ((n as f64 * cfg.holdout_fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let mut held: Vec<usize> = order[..n_holdout].to_vec();
    let mut kept: Vec<usize> = order[n_holdout..].to_vec();
    held.sort_unstable();
    kept.sort_unstable();
    let train_set: Vec<Image> = kept.iter().map(|&i| images[i].clone()).collect();
    let probe_set: Vec<Image> = if held.is_empty() {
        train_set.clone()
    } else {
        held.iter().map(|&i| images[i].clone()).collect()
    };

    let mut probe_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ HOLDOUT_STREAM);
    let mut probes = Vec::new();
    for &scale in &cfg.scales {
        let task = ContextPrediction::new(pretext_for(pretext, scale));
        let mut pairs = Vec::with_capacity(cfg.holdout_pairs);
        for _ in 0..cfg.holdout_pairs {
            let id = probe_rng.random_range(0..probe_set.len());
            pairs.push(task.sample(&probe_set[id], id, &mut probe_rng)?);
        }
        probes.push((scale, pairs));
    }

    let mut model = Model::<f32>::new(encoder.clone(), NUM_RELATIVE_CLASSES)?;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut initial_ssl_loss = f64::NAN;
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut ssl_acc = 0.0;
        let mut svdd_acc = 0.0;
        for step in 0..cfg.steps_per_epoch {
            let batch = sample_step_batch(&train_set, cfg, pretext, &mut rng)?;
            model.zero_grad();
            let loss = run_step(&mut model, &batch, cfg.alpha, cfg.micro_batch).map_err(|e| match e {
                Error::NonFiniteLoss { details, .. } => Error::NonFiniteLoss { epoch, step, details },
                other => other,
            })?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    details: format!("ssl={} svdd={}", loss.ssl, loss.svdd),
                });
            }
            if epoch == 0 && step == 0 {
                initial_ssl_loss = loss.ssl;
            }
            apply_update(&mut model, &mut opt);
            ssl_acc += loss.ssl;
            svdd_acc += loss.svdd;
            progress(&TrainEvent::Step { epoch, step, loss });
        }
        let steps = cfg.steps_per_epoch as f64;
        let (ssl_loss, svdd_loss) = (ssl_acc / steps, svdd_acc / steps);
        let mut accuracy_by_scale = Vec::new();
        let mut pooled = 0.0;
        let mut pooled_n = 0usize;
        for (scale, pairs) in &probes {
            let acc = pretext_accuracy(&model, *scale, pairs);
            pooled += acc * pairs.len() as f64;
            pooled_n += pairs.len();
            accuracy_by_scale.push(ScaleAccuracy { scale: *scale, accuracy: acc });
        }
        let record = EpochRecord {
            epoch,
            ssl_loss,
            svdd_loss,
            total_loss: total_loss(ssl_loss, svdd_loss, cfg.alpha),
            holdout_accuracy: if pooled_n == 0 { 0.0 } else { pooled / pooled_n as f64 },
            accuracy_by_scale,
        };
        progress(&TrainEvent::Epoch(record.clone()));
        records.push(record);
    }
    let report = TrainReport {
        initial_ssl_loss,
        epochs: records,
        train_images: train_set.len(),
        holdout_images: held.len(),
        holdout_from_training: held.is_empty(),
        parameter_count: model.parameter_count(),
    };
    Ok((
        Checkpoint {
            model,
            pretext: *pretext,
        },
        report,
    ))
}
