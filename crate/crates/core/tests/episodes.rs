use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tbtnet::episodes::{
    build_fold_split, format_manifest, parse_manifest, test_pair_list, Dataset, EpisodeSampler,
    ManifestHeader, Partition, SyntheticDataset,
};

#[test]
fn every_training_class_is_drawn() {
    // Four classes leave three in each training partition.
    let ds = SyntheticDataset::new(4, 4, 32, 1).unwrap();
    for fold in 0..4 {
        let split = build_fold_split(ds.kind(), fold).unwrap();
        let sampler = EpisodeSampler::new(&ds, split, Partition::Train, 1, 32).unwrap();
        assert_eq!(sampler.classes().len(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(fold as u64);
        let seen: BTreeSet<usize> = (0..1000)
            .map(|_| sampler.sample_descriptor(&mut rng).class)
            .collect();
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), sampler.classes());
    }
}

#[test]
fn supports_and_query_are_distinct_images_of_the_class() {
    let ds = SyntheticDataset::new(8, 8, 32, 2).unwrap();
    let split = build_fold_split(ds.kind(), 1).unwrap();
    let sampler = EpisodeSampler::new(&ds, split, Partition::Test, 5, 32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let e = sampler.sample(&mut rng).unwrap();
        assert_eq!(e.shots(), 5);
        let ids: BTreeSet<&str> = std::iter::once(e.query.id.as_str())
            .chain(e.supports.iter().map(|s| s.id.as_str()))
            .collect();
        assert_eq!(ids.len(), 6);
        assert!(e.query.mask.has_foreground());
        assert!(e.supports.iter().all(|s| s.mask.has_foreground()));
        assert_eq!(e.query.image.dims(), &[3, 32, 32]);
    }
}

#[test]
fn manifest_text_round_trips() {
    let ds = SyntheticDataset::new(8, 4, 32, 4).unwrap();
    let split = build_fold_split(ds.kind(), 2).unwrap();
    let sampler = EpisodeSampler::new(&ds, split, Partition::Test, 5, 32).unwrap();
    let list = test_pair_list(&sampler, 9, 40).unwrap();
    let header = ManifestHeader {
        dataset: ds.kind().to_string(),
        fold: 2,
        shots: 5,
        seed: 9,
    };
    let parsed = parse_manifest(&format_manifest(&header, &list)).unwrap();
    assert_eq!(parsed.iter().map(|(_, d)| d.clone()).collect::<Vec<_>>(), list);
    assert_eq!(parsed[0].0, 3);
    let err = parse_manifest("a\tb\tnot_a_class\n").unwrap_err().to_string();
    assert!(err.contains("line 1"), "{err}");
}
