//! Metrics against a brute-force double loop over pixels.

use classwise_adapt::metrics::{mean_iou, mean_pixel_accuracy, pixel_accuracy, ConfusionMatrix, MeanMode, MetricsReport};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// PA, MPA and MIoU computed straight from pixel lists, with no confusion matrix.
fn oracle(pred: &Array2<u8>, gt: &Array2<u8>, k: usize, mode: MeanMode) -> (f64, f64, f64) {
    let pairs: Vec<(usize, usize)> = pred.iter().zip(gt.iter()).map(|(&p, &g)| (p as usize, g as usize)).collect();
    let correct = pairs.iter().filter(|(p, g)| p == g).count();
    let pa = correct as f64 / pairs.len() as f64;
    let (mut acc_sum, mut iou_sum, mut present) = (0.0, 0.0, 0usize);
    for c in 0..k {
        let truth = pairs.iter().filter(|(_, g)| *g == c).count();
        let predicted = pairs.iter().filter(|(p, _)| *p == c).count();
        let hit = pairs.iter().filter(|(p, g)| *p == c && *g == c).count();
        if truth == 0 {
            continue;
        }
        present += 1;
        acc_sum += hit as f64 / truth as f64;
        iou_sum += hit as f64 / (truth + predicted - hit) as f64;
    }
    let denom = match mode {
        MeanMode::Present => present as f64,
        MeanMode::Literal => k as f64,
    };
    (pa, acc_sum / denom, iou_sum / denom)
}

fn random_pair(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> (Array2<u8>, Array2<u8>) {
    let gt = Array2::from_shape_fn((h, w), |_| rng.random_range(0..k) as u8);
    // Bias predictions toward the truth so every metric sees a spread of values.
    let pred = gt.mapv(|g| if rng.random_bool(0.6) { g } else { rng.random_range(0..k) as u8 });
    (pred, gt)
}

#[test]
fn random_pairs_match_the_brute_force_oracle_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..300 {
        let k = rng.random_range(1..=8);
        let (pred, gt) = random_pair(&mut rng, k, 16, 16);
        let mut cm = ConfusionMatrix::new(k, None);
        cm.accumulate(&pred, &gt).unwrap();
        for mode in [MeanMode::Present, MeanMode::Literal] {
            let (pa, mpa, miou) = oracle(&pred, &gt, k, mode);
            assert_eq!(pixel_accuracy(&cm).unwrap(), pa, "case {case}");
            assert_eq!(mean_pixel_accuracy(&cm, mode).unwrap(), mpa, "case {case} {mode}");
            assert_eq!(mean_iou(&cm, mode).unwrap(), miou, "case {case} {mode}");
        }
    }
}

#[test]
fn counts_match_a_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (pred, gt) = random_pair(&mut rng, 5, 16, 16);
    let mut cm = ConfusionMatrix::new(5, None);
    cm.accumulate(&pred, &gt).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            let mut n = 0;
            for y in 0..16 {
                for x in 0..16 {
                    n += (gt[[y, x]] as usize == i && pred[[y, x]] as usize == j) as u64;
                }
            }
            assert_eq!(cm.get(i, j), n);
        }
    }
    assert_eq!(cm.total(), 256);
}

#[test]
fn hand_confusion_matrix() {
    let cm = ConfusionMatrix::from_counts(2, vec![1, 1, 0, 2]).unwrap();
    assert_eq!(pixel_accuracy(&cm).unwrap(), 0.75);
    assert_eq!(mean_pixel_accuracy(&cm, MeanMode::Present).unwrap(), 0.75);
    assert!((mean_iou(&cm, MeanMode::Present).unwrap() - 7.0 / 12.0).abs() < 1e-15);
}

#[test]
fn disjoint_prediction_scores_zero() {
    let gt = Array2::from_shape_fn((4, 4), |(y, x)| ((y + x) % 2) as u8);
    let pred = gt.mapv(|g| 1 - g);
    let mut cm = ConfusionMatrix::new(2, None);
    cm.accumulate(&pred, &gt).unwrap();
    assert_eq!(mean_pixel_accuracy(&cm, MeanMode::Present).unwrap(), 0.0);
    assert_eq!(mean_iou(&cm, MeanMode::Present).unwrap(), 0.0);
}

#[test]
fn uniform_random_predictions_score_one_over_k() {
    let k = 4;
    let n = 256 * 256;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let gt = Array2::from_shape_fn((256, 256), |_| rng.random_range(0..k) as u8);
    let pred = Array2::from_shape_fn((256, 256), |_| rng.random_range(0..k) as u8);
    let mut cm = ConfusionMatrix::new(k, None);
    cm.accumulate(&pred, &gt).unwrap();
    let p = 1.0 / k as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    assert!((pixel_accuracy(&cm).unwrap() - p).abs() < 3.0 * sigma);
}

#[test]
fn evaluating_the_truth_scores_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (_, gt) = random_pair(&mut rng, 6, 12, 12);
    let mut cm = ConfusionMatrix::new(6, Some(0));
    cm.accumulate(&gt, &gt).unwrap();
    let r = MetricsReport::from_confusion(&cm, MeanMode::Present).unwrap();
    assert_eq!((r.pa, r.mpa, r.miou), (1.0, 1.0, 1.0));
}

fn label_map(k: usize) -> impl Strategy<Value = Array2<u8>> {
    proptest::collection::vec(0..k as u8, 64).prop_map(|v| Array2::from_shape_vec((8, 8), v).unwrap())
}

proptest! {
    #[test]
    fn accumulation_is_additive(a in label_map(5), b in label_map(5), c in label_map(5), d in label_map(5)) {
        let mut whole = ConfusionMatrix::new(5, None);
        whole.accumulate(&a, &b).unwrap();
        whole.accumulate(&c, &d).unwrap();
        let mut left = ConfusionMatrix::new(5, None);
        left.accumulate(&a, &b).unwrap();
        let mut right = ConfusionMatrix::new(5, None);
        right.accumulate(&c, &d).unwrap();
        let mut ab = left.clone();
        ab.merge(&right).unwrap();
        let mut ba = right.clone();
        ba.merge(&left).unwrap();
        prop_assert_eq!(&ab, &whole);
        prop_assert_eq!(&ba, &whole);
    }

    #[test]
    fn class_permutation_leaves_means_unchanged(pred in label_map(4), gt in label_map(4), perm in Just([0u8, 1, 2, 3]).prop_shuffle()) {
        let mut cm = ConfusionMatrix::new(4, None);
        cm.accumulate(&pred, &gt).unwrap();
        let mut pcm = ConfusionMatrix::new(4, None);
        pcm.accumulate(&pred.mapv(|v| perm[v as usize]), &gt.mapv(|v| perm[v as usize])).unwrap();
        for mode in [MeanMode::Present, MeanMode::Literal] {
            let a = MetricsReport::from_confusion(&cm, mode).unwrap();
            let b = MetricsReport::from_confusion(&pcm, mode).unwrap();
            prop_assert_eq!(a.pa, b.pa);
            prop_assert!((a.mpa - b.mpa).abs() < 1e-12);
            prop_assert!((a.miou - b.miou).abs() < 1e-12);
            for c in 0..4 {
                prop_assert_eq!(a.per_class_iou[c], b.per_class_iou[perm[c] as usize]);
            }
        }
    }

    #[test]
    fn class_iou_never_exceeds_class_accuracy(pred in label_map(6), gt in label_map(6)) {
        let mut cm = ConfusionMatrix::new(6, None);
        cm.accumulate(&pred, &gt).unwrap();
        for (acc, iou) in cm.class_accuracy().into_iter().zip(cm.class_iou()) {
            if let (Some(a), Some(i)) = (acc, iou) {
                prop_assert!(i <= a);
                prop_assert!((0.0..=1.0).contains(&i));
            }
        }
    }

    #[test]
    fn ignored_pixels_never_count(pred in label_map(3), gt in label_map(3)) {
        let mut cm = ConfusionMatrix::new(3, Some(0));
        cm.accumulate(&pred, &gt).unwrap();
        let counted = gt.iter().filter(|&&g| g != 0).count() as u64;
        prop_assert_eq!(cm.total(), counted);
        prop_assert_eq!(cm.get(0, 0) + cm.get(0, 1) + cm.get(0, 2), 0);
    }
}
