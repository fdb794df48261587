//! Threshold-free ranking metrics.

use crate::anomaly_map::AnomalyMap;
use crate::error::{Error, Result};
use crate::image::Mask;

/// Rank-based area under the ROC curve. Tied scores share their midrank, so a
/// positive tied with a negative counts half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auroc", scores.len(), labels.len()));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::InvalidInput(format!("auroc score {bad}")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::InvalidInput(format!(
            "auroc needs both classes, got {positives} positive and {negatives} negative"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut positive_rank_sum = 0.0f64;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks are 1-based: the run covers ranks start+1 ..= end
        let midrank = (start + 1 + end) as f64 / 2.0;
        let run_positives = order[start..end].iter().filter(|&&i| labels[i]).count();
        positive_rank_sum += midrank * run_positives as f64;
        start = end;
    }

    let p = positives as f64;
    let n = negatives as f64;
    Ok((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Pixel-level AUROC with every pixel of every map ranked together.
pub fn pooled_segmentation_auroc(maps: &[&AnomalyMap], masks: &[&Mask]) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::shape("segmentation maps vs masks", maps.len(), masks.len()));
    }
    let total: usize = maps.iter().map(|m| m.pixels.len()).sum();
    let mut scores = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for (map, mask) in maps.iter().zip(masks) {
        if (map.height, map.width) != (mask.height(), mask.width()) {
            return Err(Error::shape(
                "segmentation mask",
                format!("{}x{}", map.height, map.width),
                format!("{}x{}", mask.height(), mask.width()),
            ));
        }
        scores.extend_from_slice(&map.pixels);
        labels.extend_from_slice(mask.bits());
    }
    auroc(&scores, &labels)
}

/// Mean of per-image pixel AUROCs over images whose mask has both classes.
pub fn per_image_segmentation_auroc(maps: &[&AnomalyMap], masks: &[&Mask]) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::shape("segmentation maps vs masks", maps.len(), masks.len()));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for (map, mask) in maps.iter().zip(masks) {
        let positives = mask.count();
        if positives == 0 || positives == mask.bits().len() {
            continue;
        }
        sum += pooled_segmentation_auroc(&[map], &[mask])?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::InvalidInput("no mask contains both classes".into()));
    }
    Ok(sum / used as f64)
}

/// O(P·N) reference: fraction of positive/negative pairs ordered correctly, ties at half.
pub fn auroc_pairwise(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let mut wins = 0.0f64;
    let mut pairs = 0usize;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::InvalidInput("auroc needs both classes".into()));
    }
    Ok(wins / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_example() {
        let v = auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert!((v - 0.75).abs() < 1e-15);
    }

    #[test]
    fn separated_and_reversed() {
        let labels = [false, false, true, true];
        assert_eq!(auroc(&[1.0, 2.0, 3.0, 4.0], &labels).unwrap(), 1.0);
        assert_eq!(auroc(&[4.0, 3.0, 2.0, 1.0], &labels).unwrap(), 0.0);
        assert_eq!(auroc(&[1.0; 4], &labels).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::InvalidInput(_))));
        assert!(auroc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn matches_pairwise_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(2..60);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 * 0.5).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            let a = auroc(&scores, &labels).unwrap();
            let b = auroc_pairwise(&scores, &labels).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pooled_two_image_case() {
        // image A: pixels [0.9, 0.1] with mask [1, 0]; image B: [0.5, 0.2] with mask [0, 0]
        // negatives 0.1, 0.5, 0.2; the single positive 0.9 beats all → 1.0 pooled
        let a = AnomalyMap::from_pixels(1, 2, vec![0.9, 0.1]).unwrap();
        let b = AnomalyMap::from_pixels(1, 2, vec![0.5, 0.2]).unwrap();
        let ma = Mask::from_bits(1, 2, vec![true, false]).unwrap();
        let mb = Mask::from_bits(1, 2, vec![false, false]).unwrap();
        assert_eq!(pooled_segmentation_auroc(&[&a, &b], &[&ma, &mb]).unwrap(), 1.0);

        // lower the positive below B's 0.5: it now beats 0.1 and 0.2 only → 2/3 pooled,
        // while per-image averaging sees only image A and stays at 1.0
        let a = AnomalyMap::from_pixels(1, 2, vec![0.3, 0.1]).unwrap();
        let pooled = pooled_segmentation_auroc(&[&a, &b], &[&ma, &mb]).unwrap();
        assert!((pooled - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(per_image_segmentation_auroc(&[&a, &b], &[&ma, &mb]).unwrap(), 1.0);
    }
}
