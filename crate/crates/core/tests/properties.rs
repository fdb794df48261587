use proptest::prelude::*;

use patchctx_core::anomaly_map::{aggregate_pixels, fuse_scales, image_score, AnomalyMap, FusionMode, PatchScoreGrid};
use patchctx_core::encoder::{Embedding, Scale, WindowGrid};
use patchctx_core::harness::metrics::{auroc, auroc_pairwise};
use patchctx_core::memory::{affinity_weights, fuse};
use patchctx_core::pretext::{relative_class_of_cells, NUM_CELLS};
use patchctx_core::training::{svdd_loss, total_loss};

fn distances(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), 1e-6f64..50.0], 1..max_len)
}

/// Random orthogonal matrix from Gram-Schmidt on a seeded Gaussian-ish matrix.
fn orthogonal(dim: usize, raw: &[f64]) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(dim);
    for r in 0..dim {
        let mut v: Vec<f64> = raw[r * dim..(r + 1) * dim].to_vec();
        v[r] += 3.0;
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= dot * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|x| x / n).collect());
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn labels_ignore_argument_order(a in 0..NUM_CELLS, b in 0..NUM_CELLS) {
        prop_assume!(a != b);
        prop_assert_eq!(relative_class_of_cells(a, b).unwrap(), relative_class_of_cells(b, a).unwrap());
    }

    #[test]
    fn affinity_weights_form_a_distribution(d in distances(40), cap in 1.5f64..50.0) {
        let w = affinity_weights(&d, cap).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(w.iter().all(|&b| b > 0.0 && b <= 1.0));
    }

    #[test]
    fn closer_neighbours_weigh_no_less(d in distances(40), cap in 1.5f64..50.0) {
        let w = affinity_weights(&d, cap).unwrap();
        for i in 0..d.len() {
            for j in 0..d.len() {
                if d[i] <= d[j] {
                    prop_assert!(w[i] >= w[j] - 1e-15, "d {:?} w {:?}", d, w);
                }
            }
        }
    }

    #[test]
    fn uncapped_weights_ignore_distance_scale(d in prop::collection::vec(1.0f64..2.0, 2..8), c in 0.01f64..100.0) {
        // γ = Σd/dᵢ stays below a generous cap for these ratios
        let a = affinity_weights(&d, 1e6).unwrap();
        let scaled: Vec<f64> = d.iter().map(|x| x * c).collect();
        let b = affinity_weights(&scaled, 1e6).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_stays_in_the_convex_hull(
        rows in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 6), 1..10),
        d in prop::collection::vec(0.0f64..10.0, 10),
    ) {
        let w = affinity_weights(&d[..rows.len()], 20.0).unwrap();
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let fused = fuse(&refs, &w).unwrap();
        for (k, v) in fused.iter().enumerate() {
            let lo = rows.iter().map(|r| f64::from(r[k])).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|r| f64::from(r[k])).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*v >= lo - 1e-9 && *v <= hi + 1e-9);
        }
    }

    #[test]
    fn rank_auroc_matches_pairwise(
        data in prop::collection::vec((0u8..6, any::<bool>()), 2..80),
    ) {
        let scores: Vec<f64> = data.iter().map(|(s, _)| f64::from(*s)).collect();
        let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let fast = auroc(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&fast));
        prop_assert!((fast - auroc_pairwise(&scores, &labels).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn aggregation_matches_brute_force(
        side in 33usize..72,
        patch in prop_oneof![Just(32usize), Just(16)],
        stride in 1usize..40,
        seed in any::<u64>(),
    ) {
        let grid = WindowGrid::new(side, side, patch, stride).unwrap();
        let scores: Vec<f64> = (0..grid.len()).map(|i| ((seed ^ i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 40) as f64 / 1e4).collect();
        let map = aggregate_pixels(&PatchScoreGrid::new(grid, scores.clone()).unwrap());
        for y in (0..side).step_by(3) {
            for x in (0..side).step_by(3) {
                let hits: Vec<f64> = (0..grid.len()).filter(|&i| grid.rect(i).contains(y, x)).map(|i| scores[i]).collect();
                let expected = if hits.is_empty() { 0.0 } else { hits.iter().sum::<f64>() / hits.len() as f64 };
                prop_assert!((map.get(y, x) - expected).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn scale_fusion_is_commutative(
        a in prop::collection::vec(0.0f64..3.0, 36),
        b in prop::collection::vec(0.0f64..3.0, 36),
    ) {
        let ma = AnomalyMap::from_pixels(6, 6, a).unwrap();
        let mb = AnomalyMap::from_pixels(6, 6, b).unwrap();
        for mode in [FusionMode::Multiply, FusionMode::Mean] {
            let ab = fuse_scales(&ma, &mb, mode).unwrap();
            let ba = fuse_scales(&mb, &ma, mode).unwrap();
            prop_assert_eq!(&ab.pixels, &ba.pixels);
        }
        let same = fuse_scales(&ma, &ma, FusionMode::Mean).unwrap();
        for (x, y) in same.pixels.iter().zip(&ma.pixels) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn raising_a_pixel_never_lowers_the_image_score(
        px in prop::collection::vec(0.0f64..3.0, 25),
        at in 0usize..25,
        bump in 0.0f64..2.0,
    ) {
        let before = image_score(&AnomalyMap::from_pixels(5, 5, px.clone()).unwrap());
        let mut raised = px;
        raised[at] += bump;
        prop_assert!(image_score(&AnomalyMap::from_pixels(5, 5, raised).unwrap()) >= before);
    }

    #[test]
    fn clustering_loss_ignores_common_rotation(
        raw in prop::collection::vec(-1.0f64..1.0, 64),
        emb in prop::collection::vec(prop::collection::vec(-2.0f32..2.0, 8), 2..12),
    ) {
        let q = orthogonal(8, &raw);
        let rotate = |v: &[f32]| Embedding {
            vector: q.iter().map(|row| row.iter().zip(v).map(|(r, x)| r * f64::from(*x)).sum::<f64>() as f32).collect(),
            scale: Scale::Large64,
        };
        let plain = |v: &[f32]| Embedding { vector: v.to_vec(), scale: Scale::Large64 };
        let pairs: Vec<_> = emb.windows(2).map(|w| (plain(&w[0]), plain(&w[1]))).collect();
        let rotated: Vec<_> = emb.windows(2).map(|w| (rotate(&w[0]), rotate(&w[1]))).collect();
        let (a, b) = (svdd_loss(&pairs).unwrap(), svdd_loss(&rotated).unwrap());
        prop_assert!((a - b).abs() <= 1e-4 * a.max(1.0));
    }

    #[test]
    fn total_loss_is_exact_sum(ssl in 0.0f64..10.0, svdd in 0.0f64..1e4, alpha in 1e-6f64..1.0) {
        prop_assert_eq!(total_loss(ssl, svdd, alpha), ssl + alpha * svdd);
    }
}
