use std::collections::BTreeSet;

use decay_bench::embeddings::EmbeddingSequence;
use decay_bench::eval::{auroc, pr_curve};
use decay_bench::manifest::{
    kfold_identity_splits, split_identities, subset_by_identity_fraction, ClassScheme, DatasetManifest, Label, Split,
    Technique, VideoRecord,
};
use decay_bench::rng::round_half_up;
use decay_bench::temporal::{mask_features, standardize_length, Mode};
use ndarray::Array2;
use proptest::prelude::*;

fn manifest(videos: &[usize]) -> DatasetManifest {
    let records = videos
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| {
            (0..n).map(move |v| VideoRecord {
                video_id: format!("p{i}-v{v}"),
                path: format!("p{i}-v{v}.y4m").into(),
                label: if v % 2 == 1 { Label::Fake } else { Label::Real },
                technique: if v % 2 == 1 { Technique::LipSync } else { Technique::Real },
                engine: if v % 2 == 1 { "e".into() } else { "none".into() },
                identity_id: format!("p{i}"),
                dataset_version: "v".into(),
                split: Split::Train,
            })
        })
        .collect();
    DatasetManifest::new(records, ClassScheme::Binary).unwrap()
}

fn sequence(t: usize, d: usize, seed: u64) -> EmbeddingSequence {
    EmbeddingSequence {
        video_id: format!("v{seed}"),
        embeddings: Array2::from_shape_fn((t, d), |(i, j)| (i * 31 + j * 7) as f32 + seed as f32 * 0.5 + 1.0),
        label: 1,
        identity_id: "p".into(),
    }
}

proptest! {
    #[test]
    fn splits_are_identity_disjoint(videos in prop::collection::vec(1usize..4, 2..30), frac in 0.05f64..0.95, seed in 0u64..1000) {
        let m = manifest(&videos);
        let s = split_identities(&m, frac, seed).unwrap();
        let (train, held) = s.apply(&m);
        let a: BTreeSet<String> = train.identities().into_iter().collect();
        let b: BTreeSet<String> = held.identities().into_iter().collect();
        prop_assert!(a.is_disjoint(&b));
        prop_assert_eq!(train.len() + held.len(), m.len());
        prop_assert_eq!(s, split_identities(&m, frac, seed).unwrap());
    }

    #[test]
    fn subsets_keep_whole_identities(videos in prop::collection::vec(1usize..4, 1..30), frac in 0.01f64..=1.0, seed in 0u64..1000) {
        let m = manifest(&videos);
        let sub = subset_by_identity_fraction(&m, frac, seed).unwrap();
        let n = videos.len();
        prop_assert_eq!(sub.identities().len(), round_half_up(frac * n as f64).clamp(1, n));
        for id in sub.identities() {
            let i: usize = id[1..].parse().unwrap();
            prop_assert_eq!(sub.records.iter().filter(|r| r.identity_id == id).count(), videos[i]);
        }
    }

    #[test]
    fn folds_partition_identities(videos in prop::collection::vec(1usize..3, 5..30), k in 2usize..5, seed in 0u64..1000) {
        let m = manifest(&videos);
        let folds = kfold_identity_splits(&m, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let total: usize = folds.iter().map(|f| f.held_identities.len()).sum();
        prop_assert_eq!(total, videos.len());
    }

    #[test]
    fn standardize_hits_target(t in 1usize..60, target in 1usize..60, d in 1usize..16, seed in 0u64..100) {
        let seq = sequence(t, d, seed);
        for mode in [Mode::Train, Mode::Eval] {
            let out = standardize_length(&seq, target, mode, seed).unwrap();
            prop_assert_eq!(out.embeddings.dim(), (target, d));
            // every output row is one of the input rows
            for row in out.embeddings.rows() {
                prop_assert!(seq.embeddings.rows().into_iter().any(|r| r == row));
            }
        }
    }

    #[test]
    fn masking_zeroes_whole_columns(t in 1usize..20, d in 1usize..64, seed in 0u64..100, epoch in 0usize..20) {
        let seq = sequence(t, d, seed);
        let out = mask_features(&seq, 0.1, seed, epoch);
        let zeroed = (0..d).filter(|&j| out.embeddings.column(j).iter().all(|v| *v == 0.0)).count();
        prop_assert_eq!(zeroed, round_half_up(0.1 * d as f64));
    }

    #[test]
    fn auroc_flips_under_negation(scores in prop::collection::vec(0u8..8, 4..60), bits in prop::collection::vec(any::<bool>(), 60)) {
        let mut labels: Vec<bool> = bits[..scores.len()].to_vec();
        labels[0] = true;
        labels[1] = false;
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let a = auroc(&s, &labels).unwrap();
        prop_assert!((0.0..=100.0).contains(&a));
        prop_assert!((a + auroc(&neg, &labels).unwrap() - 100.0).abs() < 1e-9);
        let curve = pr_curve(&s, &labels).unwrap();
        prop_assert!(curve.iter().all(|p| (0.0..=1.0).contains(&p.precision) && (0.0..=1.0).contains(&p.recall)));
    }
}
