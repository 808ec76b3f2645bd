use bsm_core::eval::{average_precision, coco_map, make_folds, match_ious, GroundTruth, SegDetection};
use bsm_core::imagecore::BinaryMask;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 16;

fn rect(x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
    BinaryMask::from_fn(SIDE, SIDE, |x, y| (x0..x1).contains(&x) && (y0..y1).contains(&y))
}

fn random_rect(rng: &mut ChaCha8Rng) -> BinaryMask {
    let x0 = rng.random_range(0..SIDE - 2);
    let y0 = rng.random_range(0..SIDE - 2);
    let x1 = rng.random_range(x0 + 1..=SIDE);
    let y1 = rng.random_range(y0 + 1..=SIDE);
    rect(x0, y0, x1, y1)
}

/// Independent reference: counts pixels directly, matches greedily and sums
/// precision-envelope values at each true positive.
fn brute_force_ap(dets: &[SegDetection], gts: &[GroundTruth], thresh: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let overlap = |a: &BinaryMask, b: &BinaryMask| {
        let mut i = 0.0;
        let mut u = 0.0;
        for y in 0..SIDE {
            for x in 0..SIDE {
                let (p, q) = (a.get(x, y), b.get(x, y));
                i += (p && q) as u8 as f64;
                u += (p || q) as u8 as f64;
            }
        }
        if u == 0.0 { 0.0 } else { i / u }
    };
    let mut order: Vec<&SegDetection> = dets.iter().filter(|d| gts.iter().any(|g| g.image_id == d.image_id)).collect();
    order.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut used = vec![false; gts.len()];
    let mut hits = Vec::new();
    for d in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.image_id != d.image_id {
                continue;
            }
            let v = overlap(&d.mask, &gt.mask);
            if v >= thresh && best.map_or(true, |(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
        }
        hits.push(best.is_some());
    }
    let mut tp = 0.0;
    let precision: Vec<f64> = hits
        .iter()
        .enumerate()
        .map(|(k, &h)| {
            tp += h as u8 as f64;
            tp / (k + 1) as f64
        })
        .collect();
    let mut ap = 0.0;
    for k in 0..hits.len() {
        if hits[k] {
            ap += precision[k..].iter().cloned().fold(0.0, f64::max);
        }
    }
    ap / gts.len() as f64
}

fn random_case(seed: u64) -> (Vec<SegDetection>, Vec<GroundTruth>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = rng.random_range(1..5);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for i in 0..images {
        let id = format!("im{i}");
        for _ in 0..rng.random_range(0..4) {
            gts.push(GroundTruth { image_id: id.clone(), mask: random_rect(&mut rng) });
        }
        for _ in 0..rng.random_range(0..5) {
            // Near copies of a ground truth or random boxes.
            let mask = match gts.iter().filter(|g| g.image_id == id).nth(rng.random_range(0..3)) {
                Some(g) if rng.random_bool(0.6) => {
                    let b = g.mask.bbox().unwrap();
                    let d = rng.random_range(0..2);
                    rect(b.x as usize + d, b.y as usize, (b.x + b.w) as usize, (b.y + b.h) as usize)
                }
                _ => random_rect(&mut rng),
            };
            dets.push(SegDetection { image_id: id.clone(), mask, score: rng.random_range(0.0..1.0) });
        }
    }
    (dets, gts)
}

#[test]
fn hand_case() {
    let gts = vec![
        GroundTruth { image_id: "a".into(), mask: rect(0, 0, 8, 8) },
        GroundTruth { image_id: "a".into(), mask: rect(8, 8, 16, 16) },
    ];
    let dets = vec![
        SegDetection { image_id: "a".into(), mask: rect(0, 0, 8, 8), score: 0.9 },
        SegDetection { image_id: "a".into(), mask: rect(0, 8, 4, 16), score: 0.8 },
        SegDetection { image_id: "a".into(), mask: rect(8, 8, 16, 16), score: 0.7 },
    ];
    let ap = average_precision(&dets, &gts, 0.5).unwrap();
    assert!((ap - 0.8333333333).abs() < 1e-6, "{ap}");
    assert!((brute_force_ap(&dets, &gts, 0.5) - 5.0 / 6.0).abs() < 1e-12);
}

#[test]
fn matches_brute_force_integrator() {
    for seed in 0..200 {
        let (dets, gts) = random_case(seed);
        for th in [0.3, 0.5, 0.75] {
            let got = average_precision(&dets, &gts, th).unwrap();
            let want = brute_force_ap(&dets, &gts, th);
            assert!((got - want).abs() <= 1e-9, "seed {seed} thresh {th}: {got} vs {want}");
        }
    }
}

#[test]
fn coco_map_bounds() {
    for seed in 0..100 {
        let (dets, gts) = random_case(seed);
        let ap50 = average_precision(&dets, &gts, 0.5).unwrap();
        let map = coco_map(&dets, &gts).unwrap();
        assert!((0.0..=1.0).contains(&ap50) && (0.0..=1.0).contains(&map));
        assert!(map <= ap50 + 1e-12, "seed {seed}: {map} > {ap50}");
    }
}

#[test]
fn perfect_and_empty_predictions() {
    let gts: Vec<GroundTruth> = (0..4).map(|i| GroundTruth { image_id: format!("{i}"), mask: rect(i, i, i + 5, i + 6) }).collect();
    let perfect: Vec<SegDetection> =
        gts.iter().map(|g| SegDetection { image_id: g.image_id.clone(), mask: g.mask.clone(), score: 1.0 }).collect();
    assert_eq!(coco_map(&perfect, &gts).unwrap(), 1.0);
    assert_eq!(coco_map(&[], &gts).unwrap(), 0.0);
    // Detections on an image without ground truth are ignored.
    let mut extra = perfect.clone();
    extra.push(SegDetection { image_id: "none".into(), mask: rect(0, 0, 3, 3), score: 2.0 });
    assert_eq!(coco_map(&extra, &gts).unwrap(), 1.0);
}

#[test]
fn matched_ious_cover_each_ground_truth_once() {
    for seed in 0..50 {
        let (dets, gts) = random_case(seed);
        let m = match_ious(&dets, &gts).unwrap();
        assert_eq!(m.len(), gts.len());
        let matched = m.iter().filter(|v| v.is_some()).count();
        assert!(matched <= dets.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn lowering_an_overlap_never_raises_ap(seed in any::<u64>(), shrink in 1usize..6) {
        // One ground truth per image, so a detection can only lose its match.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..6);
        let gts: Vec<GroundTruth> = (0..n).map(|i| GroundTruth { image_id: format!("{i}"), mask: rect(2, 2, 14, 14) }).collect();
        let mut dets: Vec<SegDetection> = (0..n + 2)
            .map(|_| {
                let i = rng.random_range(0..n);
                let w = rng.random_range(6..13);
                SegDetection { image_id: format!("{i}"), mask: rect(2, 2, 2 + w, 14), score: rng.random_range(0.0..1.0) }
            })
            .collect();
        let before = average_precision(&dets, &gts, 0.5).unwrap();
        let k = rng.random_range(0..dets.len());
        let b = dets[k].mask.bbox().unwrap();
        let w = (b.w as usize).saturating_sub(shrink).max(1);
        dets[k].mask = rect(2, 2, 2 + w, 14);
        let after = average_precision(&dets, &gts, 0.5).unwrap();
        prop_assert!(after <= before + 1e-12, "{} -> {}", before, after);
    }

    #[test]
    fn folds_partition_and_keep_pairs(n in 2usize..60, k in 2usize..6, seed in any::<u64>(), npairs in 0usize..5) {
        let ids: Vec<String> = (0..n).map(|i| format!("img{i}")).collect();
        let pairs: Vec<Vec<String>> = (0..npairs.min(n / 2)).map(|p| vec![ids[2 * p].clone(), ids[2 * p + 1].clone()]).collect();
        let groups = n - pairs.len();
        let r = make_folds(&ids, k, &pairs, seed);
        if k > groups {
            prop_assert!(r.is_err());
            return Ok(());
        }
        let f = r.unwrap();
        prop_assert_eq!(f.assignments.len(), n);
        prop_assert!(ids.iter().all(|id| f.fold_of(id).is_some_and(|x| x < k)));
        for p in &pairs {
            prop_assert_eq!(f.fold_of(&p[0]), f.fold_of(&p[1]));
        }
        let sizes = f.sizes();
        let max_group = if pairs.is_empty() { 1 } else { 2 };
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= max_group, "{:?}", sizes);
        prop_assert_eq!(&f, &make_folds(&ids, k, &pairs, seed).unwrap());
    }
}
