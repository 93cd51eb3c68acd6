use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use serval_core::compute::{conv2d, Tensor};
use serval_core::corpus::{
    av_categories, balance_subsample, class_weights_from_counts, load_manifest, map_labels, write_manifest,
    AvTarget, CorpusManifest, Partition, SampleRecord,
};
use serval_core::dsp::{log_mel, Waveform, LOG_FLOOR, N_MELS};
use serval_core::eval::{mcnemar, uar, ConfusionMatrix, Direction};

fn partition_of(i: u8) -> Partition {
    Partition::ALL[i as usize % 3]
}

prop_compose! {
    fn records(labels: Vec<&'static str>)(
        rows in proptest::collection::vec((0u8..3, 0usize..1000, 0u8..6), 1..40),
    ) -> Vec<SampleRecord> {
        let mut seen = BTreeSet::new();
        rows.into_iter()
            .filter(|(_, id, _)| seen.insert(*id))
            .map(|(p, id, l)| SampleRecord {
                corpus_id: "pc".into(),
                sample_id: format!("s{id}"),
                audio_path: format!("wav/s{id}.wav"),
                // speakers keyed by partition keep the split speaker-disjoint
                speaker_id: format!("spk{}_{}", p, id % 4),
                partition: partition_of(p),
                label: labels[l as usize % labels.len()].to_string(),
            })
            .collect()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn manifest_round_trip(recs in records(vec!["anger", "happiness", "neutral", "sadness", "fear"])) {
        let dir = tempfile::tempdir().unwrap();
        let m = CorpusManifest::from_records("pc", recs, dir.path().to_path_buf()).unwrap();
        let path = dir.path().join("pc.csv");
        write_manifest(&path, &m).unwrap();
        let back = load_manifest(&path).unwrap();
        prop_assert_eq!(&back.records, &m.records);
        prop_assert_eq!(&back.label_space, &m.label_space);
        let sorted: Vec<String> = m.records.iter().map(|r| r.label.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        prop_assert_eq!(&m.label_space, &sorted);
        prop_assert!(m.warnings.is_empty());
    }

    #[test]
    fn class_weights_balance_the_loss(counts in proptest::collection::vec(1usize..500, 1..8)) {
        let map: BTreeMap<String, usize> = counts.iter().enumerate().map(|(i, &c)| (format!("c{i}"), c)).collect();
        let w = class_weights_from_counts(&map).unwrap();
        let n: usize = counts.iter().sum();
        let total: f64 = map.iter().map(|(l, &c)| c as f64 * w.get(l).unwrap()).sum();
        prop_assert!((total - n as f64).abs() <= 1e-9 * n as f64);
        let max = *counts.iter().max().unwrap();
        let majority = map.iter().find(|(_, &c)| c == max).map(|(l, _)| w.get(l).unwrap()).unwrap();
        for l in map.keys() {
            let v = w.get(l).unwrap();
            prop_assert!(v > 0.0);
            prop_assert!(majority <= v + 1e-12);
        }
    }

    #[test]
    fn balancing_equalizes_classes(
        recs in records(av_categories().map(|(c, _)| c).take(12).collect()),
        seed in 0u64..1000,
        valence in any::<bool>(),
    ) {
        let target = if valence { AvTarget::Valence } else { AvTarget::Arousal };
        let m = CorpusManifest::from_records("pc", recs, "/".into()).unwrap();
        let b = balance_subsample(&m, target, seed).unwrap();
        let ids: BTreeSet<&str> = m.records.iter().map(|r| r.sample_id.as_str()).collect();
        prop_assert!(b.records.iter().all(|r| ids.contains(r.sample_id.as_str())));
        let mapped = map_labels(&b, target).unwrap();
        for p in Partition::ALL {
            let counts = mapped.class_counts(p);
            let distinct: BTreeSet<usize> = counts.values().copied().filter(|&c| c > 0).collect();
            prop_assert!(distinct.len() <= 1, "{p}: {counts:?}");
        }
    }

    #[test]
    fn uar_ignores_sample_order_and_class_names(
        pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60),
        shift in 1usize..4,
    ) {
        let classes: Vec<String> = (0..4).map(|i| format!("k{i}")).collect();
        let (r, p): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let base = uar(&ConfusionMatrix::from_indices(classes.clone(), &r, &p).unwrap()).unwrap();
        let (rr, pr): (Vec<usize>, Vec<usize>) = pairs.iter().rev().copied().unzip();
        let reversed = uar(&ConfusionMatrix::from_indices(classes.clone(), &rr, &pr).unwrap()).unwrap();
        let rot = |v: &[usize]| v.iter().map(|x| (x + shift) % 4).collect::<Vec<_>>();
        let renamed = uar(&ConfusionMatrix::from_indices(classes, &rot(&r), &rot(&p)).unwrap()).unwrap();
        prop_assert!((base - reversed).abs() < 1e-12);
        prop_assert!((base - renamed).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn mcnemar_is_antisymmetric(
        triples in proptest::collection::vec((0usize..3, 0usize..3, 0usize..3), 0..120),
    ) {
        let r: Vec<usize> = triples.iter().map(|t| t.0).collect();
        let a: Vec<usize> = triples.iter().map(|t| t.1).collect();
        let b: Vec<usize> = triples.iter().map(|t| t.2).collect();
        let ab = mcnemar(&a, &b, &r).unwrap();
        let ba = mcnemar(&b, &a, &r).unwrap();
        prop_assert_eq!((ab.b, ab.c), (ba.c, ba.b));
        prop_assert_eq!(ab.statistic, ba.statistic);
        prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
        prop_assert_eq!(ab.significant_at_05, ba.significant_at_05);
        let flipped = match ab.direction {
            Direction::Improvement => Direction::Decrease,
            Direction::Decrease => Direction::Improvement,
            Direction::None => Direction::None,
        };
        prop_assert_eq!(flipped, ba.direction);
        prop_assert!((0.0..=1.0).contains(&ab.p_value));
    }

    #[test]
    fn conv_output_extent_is_ceil(h in 1usize..64, w in 1usize..64, stride in 1usize..=2, k in prop::sample::select(vec![1usize, 3])) {
        let x = Tensor::<f32>::zeros(&[1, h, w, 2]);
        let kernel = Tensor::<f32>::zeros(&[k, k, 2, 3]);
        let y = conv2d(&x, &kernel, stride).unwrap();
        prop_assert_eq!(y.shape(), &[1, h.div_ceil(stride), w.div_ceil(stride), 3][..]);
    }

    #[test]
    fn log_mel_is_finite_and_floored(samples in proptest::collection::vec(-1.0e4f32..1.0e4, 0..3000)) {
        let m = log_mel(&Waveform::new(samples));
        prop_assert!(m.frames >= 1);
        prop_assert_eq!(m.values.len(), m.frames * N_MELS);
        let floor = LOG_FLOOR.ln() as f32;
        prop_assert!(m.values.iter().all(|v| v.is_finite() && *v >= floor - 1e-4));
    }
}
