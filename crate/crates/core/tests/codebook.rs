use std::sync::OnceLock;

use bsm_core::codebook::{agglomerative_cluster, build_model, similarity, Model, ModelParams, TrainingSample};
use bsm_core::features::{SiftDescriptor, DESCRIPTOR_LEN};
use bsm_core::synth::{generate, SynthParams};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(bins: &[f64]) -> SiftDescriptor {
    let n = bins.iter().map(|v| v * v).sum::<f64>().sqrt();
    SiftDescriptor::from_slice(&bins.iter().map(|v| v / n).collect::<Vec<_>>()).unwrap()
}

/// Naive agglomeration: always merge the globally most similar pair of
/// clusters while it reaches `t`. Centroids are normalized member means.
fn exhaustive_merge(descs: &[SiftDescriptor], t: f64) -> Vec<Vec<usize>> {
    let mut clusters: Vec<Vec<usize>> = (0..descs.len()).map(|i| vec![i]).collect();
    let centroid = |c: &[usize]| SiftDescriptor::normalized_mean(c.iter().map(|&i| &descs[i]));
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let s = similarity(&centroid(&clusters[a]), &centroid(&clusters[b]));
                if best.map_or(true, |(_, _, bs)| s > bs) {
                    best = Some((a, b, s));
                }
            }
        }
        match best {
            Some((a, b, s)) if s >= t => {
                let moved = clusters.remove(b);
                clusters[a].extend(moved);
                clusters[a].sort();
            }
            _ => break,
        }
    }
    clusters.sort();
    clusters
}

/// Groups of descriptors around well-separated random prototypes.
fn grouped(rng: &mut ChaCha8Rng, groups: usize, per: usize, jitter: f64) -> Vec<SiftDescriptor> {
    let protos: Vec<Vec<f64>> = (0..groups)
        .map(|g| (0..DESCRIPTOR_LEN).map(|i| if i % groups == g { rng.random_range(0.5..1.0) } else { 0.0 }).collect())
        .collect();
    let mut out = Vec::new();
    for i in 0..groups * per {
        let p = &protos[i % groups];
        out.push(unit(&p.iter().map(|v| (v + rng.random_range(0.0..jitter)).max(0.0)).collect::<Vec<_>>()));
    }
    out
}

#[test]
fn two_tight_groups_match_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let descs = grouped(&mut rng, 2, 5, 0.02);
    for a in 0..10 {
        for b in 0..10 {
            let s = similarity(&descs[a], &descs[b]);
            if a % 2 == b % 2 {
                assert!(s > 0.95, "intra {a} {b}: {s}");
            } else {
                assert!(s < 0.3, "inter {a} {b}: {s}");
            }
        }
    }
    let c = agglomerative_cluster(&descs, 0.7).unwrap();
    let got: Vec<Vec<usize>> = c.clusters.iter().map(|c| c.members.clone()).collect();
    assert_eq!(got, vec![vec![0, 2, 4, 6, 8], vec![1, 3, 5, 7, 9]]);
    assert_eq!(got, exhaustive_merge(&descs, 0.7));
    assert!(c.merges.iter().all(|m| m.similarity >= 0.7));
}

#[test]
fn several_groups_match_exhaustive_oracle() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let descs = grouped(&mut rng, 4, 6, 0.1);
        let got: Vec<Vec<usize>> = agglomerative_cluster(&descs, 0.7).unwrap().clusters.into_iter().map(|c| c.members).collect();
        assert_eq!(got, exhaustive_merge(&descs, 0.7), "seed {seed}");
    }
}

#[test]
fn similarity_at_threshold() {
    // For unit a, b: |a - b|^2 = 2 - 2 a.b, so a.b = 0.91 gives |a - b| = 0.3 sqrt 2.
    let mut a = vec![0.0; DESCRIPTOR_LEN];
    a[0] = 1.0;
    let mut b = vec![0.0; DESCRIPTOR_LEN];
    b[0] = 0.91f64;
    b[1] = (1.0 - 0.91f64 * 0.91).sqrt();
    let s = similarity(&SiftDescriptor::from_slice(&a).unwrap(), &SiftDescriptor::from_slice(&b).unwrap());
    assert!((s - 0.7).abs() < 1e-12, "{s}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clusters_partition_the_input(seed in 0u64..10_000, n in 1usize..40, t in 0.3f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let descs: Vec<SiftDescriptor> = (0..n)
            .map(|_| unit(&(0..DESCRIPTOR_LEN).map(|i| if i < 8 { rng.random_range(0.0..1.0) } else { 0.0 }).collect::<Vec<_>>()))
            .collect();
        let c = agglomerative_cluster(&descs, t).unwrap();
        let mut all: Vec<usize> = c.clusters.iter().flat_map(|c| c.members.iter().copied()).collect();
        all.sort();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(c.merges.len(), n - c.clusters.len());
        for m in &c.merges {
            prop_assert!(m.similarity >= t);
        }
    }
}

fn synth_samples(n: usize) -> Vec<TrainingSample> {
    let p = SynthParams::default();
    (0..n)
        .map(|i| {
            let it = generate(&p, 7, i).unwrap();
            TrainingSample::new(it.id, it.image.to_gray(), it.mask).unwrap()
        })
        .collect()
}

fn model() -> &'static (Vec<TrainingSample>, Model) {
    static M: OnceLock<(Vec<TrainingSample>, Model)> = OnceLock::new();
    M.get_or_init(|| {
        let s = synth_samples(20);
        let m = build_model(&s, "disk", &ModelParams::default()).unwrap();
        (s, m)
    })
}

#[test]
fn occurrences_conserve_kept_keypoints() {
    let (_, m) = model();
    assert!(m.codewords.len() >= 10, "{} codewords", m.codewords.len());
    assert_eq!(m.occurrence_count(), m.stats.keypoints_kept);
    assert!(m.stats.keypoints_kept <= m.stats.keypoints_detected);
}

#[test]
fn occurrences_lie_on_foreground_and_agree_on_size() {
    let (samples, m) = model();
    let (mw, mh) = m.mean_object_size();
    for cw in &m.codewords {
        assert!(!cw.occurrences.is_empty());
        for o in &cw.occurrences {
            let s = samples.iter().find(|s| s.id == o.source_image).unwrap();
            assert!(s.mask.at(o.x, o.y), "occurrence off the mask in {}", o.source_image);
            assert!(o.shape_idx < cw.shape_codebook.len());
            assert!((o.obj_w - mw).abs() <= 0.1 * mw && (o.obj_h - mh).abs() <= 0.1 * mh);
            let (cx, cy) = s.bbox.center();
            assert!((o.x - o.dx - cx).abs() < 1e-9 && (o.y - o.dy - cy).abs() < 1e-9);
        }
        let members: usize = cw.shape_codebook.iter().map(|e| e.members).sum();
        assert_eq!(members, cw.occurrences.len());
    }
}

#[test]
fn model_round_trips_and_is_deterministic() {
    let (samples, m) = model();
    let text = m.to_json().unwrap();
    assert_eq!(&Model::from_json(&text).unwrap(), m);
    let again = build_model(samples, "disk", &ModelParams::default()).unwrap();
    assert_eq!(again.to_json().unwrap(), text);
}

#[test]
fn model_rejects_other_versions() {
    let (_, m) = model();
    let mut v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
    v["format_version"] = 99.into();
    assert!(Model::from_json(&v.to_string()).is_err());
}

#[test]
fn final_codewords_are_pairwise_below_threshold() {
    // The most similar remaining pair is always reciprocal, so clustering
    // can only stop once every pair of centres is below t.
    let (_, m) = model();
    let t = m.params.t;
    for a in 0..m.codewords.len() {
        for b in a + 1..m.codewords.len() {
            let s = similarity(&m.codewords[a].center, &m.codewords[b].center);
            assert!(s < t, "codewords {a} and {b} at {s}");
        }
    }
}

#[test]
fn empty_training_set_is_an_error() {
    assert!(build_model(&[], "disk", &ModelParams::default()).is_err());
}
