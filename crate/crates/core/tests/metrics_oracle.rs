mod common;

use proptest::prelude::*;
use rand::Rng;
use sadlr::metrics::{
    iou, mean_iou, overall_iou, precision_at_k, IouSample, MetricAccumulator, THRESHOLDS,
};
use sadlr::BinaryMask;

/// Pixel-by-pixel counts from nested loops over coordinates.
fn naive_counts(pred: &BinaryMask, gt: &BinaryMask) -> (u64, u64) {
    let (mut i, mut u) = (0, 0);
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            let (a, b) = (pred.get(y, x), gt.get(y, x));
            if a && b {
                i += 1;
            }
            if a || b {
                u += 1;
            }
        }
    }
    (i, u)
}

fn naive_iou(i: u64, u: u64) -> f64 {
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

#[test]
fn metrics_match_pixel_counting_on_random_pairs() {
    let mut r = common::rng(2024);
    let mut acc = MetricAccumulator::new();
    let (mut ti, mut tu) = (0u64, 0u64);
    let mut ious = Vec::new();
    for _ in 0..1000 {
        let (h, w) = (r.gen_range(1..=16), r.gen_range(1..=16));
        let (dp, dg) = (r.gen::<f64>(), r.gen::<f64>());
        let pred = BinaryMask::from_fn(h, w, |_, _| r.gen::<f64>() < dp);
        let gt = BinaryMask::from_fn(h, w, |_, _| r.gen::<f64>() < dg);
        let (i, u) = naive_counts(&pred, &gt);
        let s = acc.push(&pred, &gt).unwrap();
        assert_eq!((s.intersection, s.union), (i, u));
        assert_eq!(s.iou, naive_iou(i, u));
        ti += i;
        tu += u;
        ious.push(naive_iou(i, u));
    }
    let report = acc.report().unwrap();
    assert_eq!(
        (report.intersection, report.union, report.count),
        (ti, tu, 1000)
    );
    assert!((report.overall_iou - naive_iou(ti, tu)).abs() <= 1e-12);
    let m = ious.iter().sum::<f64>() / ious.len() as f64;
    assert!((report.mean_iou - m).abs() <= 1e-12);
    for k in THRESHOLDS {
        let hits = ious.iter().filter(|&&v| v > k).count();
        assert!((report.p(k) - 100.0 * hits as f64 / 1000.0).abs() <= 1e-12);
    }
}

#[test]
fn iou_examples() {
    let gt = BinaryMask::new(2, 3, vec![1, 1, 0, 1, 1, 0]).unwrap();
    assert_eq!(iou(&gt, &gt).unwrap().iou, 1.0);
    assert_eq!(iou(&gt.complement(), &gt).unwrap().iou, 0.0);
    let half = BinaryMask::new(2, 3, vec![1, 1, 0, 0, 0, 0]).unwrap();
    let s = iou(&half, &gt).unwrap();
    assert_eq!((s.intersection, s.union, s.iou), (2, 4, 0.5));
    let empty = BinaryMask::zeros(2, 3);
    assert_eq!(iou(&empty, &empty).unwrap().iou, 1.0);
    assert!(iou(&empty, &BinaryMask::zeros(3, 2)).is_err());
}

#[test]
fn precision_examples() {
    assert_eq!(precision_at_k(&[1.0; 4], 0.9).unwrap(), 100.0);
    let p = precision_at_k(&[0.6, 0.4, 0.9], 0.5).unwrap();
    assert!((p - 200.0 / 3.0).abs() < 1e-12);
    assert_eq!(precision_at_k(&[0.9, 0.9], 0.9).unwrap(), 0.0);
    assert!(precision_at_k(&[], 0.5).is_err());
    assert!(precision_at_k(&[0.5], 1.0).is_err());
}

#[test]
fn accumulator_examples() {
    let sample = |i, u| IouSample {
        intersection: i,
        union: u,
        iou: naive_iou(i, u),
    };
    let one = [sample(3, 7)];
    assert_eq!(mean_iou(&one).unwrap(), overall_iou(&one).unwrap());

    let pair = [sample(100, 100), sample(0, 1)];
    assert_eq!(overall_iou(&pair).unwrap(), 100.0 / 101.0);
    assert_eq!(mean_iou(&pair).unwrap(), 0.5);

    let doubled: Vec<IouSample> = pair.iter().chain(pair.iter()).copied().collect();
    assert_eq!(overall_iou(&doubled).unwrap(), overall_iou(&pair).unwrap());
    assert_eq!(mean_iou(&doubled).unwrap(), mean_iou(&pair).unwrap());

    assert_eq!(overall_iou(&[sample(0, 0)]).unwrap(), 1.0);
    assert!(mean_iou(&[]).is_err());
}

#[test]
fn merged_accumulators_equal_one_pass() {
    let mut r = common::rng(7);
    let pairs: Vec<(BinaryMask, BinaryMask)> = (0..50)
        .map(|_| {
            (
                BinaryMask::from_fn(8, 8, |_, _| r.gen()),
                BinaryMask::from_fn(8, 8, |_, _| r.gen()),
            )
        })
        .collect();
    let mut whole = MetricAccumulator::new();
    let (mut a, mut b) = (MetricAccumulator::new(), MetricAccumulator::new());
    for (k, (p, g)) in pairs.iter().enumerate() {
        whole.push(p, g).unwrap();
        if k % 2 == 0 { &mut a } else { &mut b }.push(p, g).unwrap();
    }
    a.merge(b);
    let (x, y) = (whole.report().unwrap(), a.report().unwrap());
    assert_eq!(
        (x.intersection, x.union, x.overall_iou),
        (y.intersection, y.union, y.overall_iou)
    );
    assert!((x.mean_iou - y.mean_iou).abs() < 1e-12);
}

proptest! {
    #[test]
    fn precision_is_non_increasing_in_k(
        ious in prop::collection::vec(0.0f64..=1.0, 1..50),
        mut ks in prop::collection::vec(0.001f64..0.999, 2..8),
    ) {
        ks.sort_by(f64::total_cmp);
        let ps: Vec<f64> = ks.iter().map(|&k| precision_at_k(&ious, k).unwrap()).collect();
        for w in ps.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        prop_assert!(ps.iter().all(|p| (0.0..=100.0).contains(p)));
    }

    #[test]
    fn iou_is_bounded(bits in prop::collection::vec((0u8..2, 0u8..2), 1..64)) {
        let pred = BinaryMask::new(1, bits.len(), bits.iter().map(|b| b.0).collect()).unwrap();
        let gt = BinaryMask::new(1, bits.len(), bits.iter().map(|b| b.1).collect()).unwrap();
        let s = iou(&pred, &gt).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.iou));
        prop_assert!(s.intersection <= s.union);
    }
}
