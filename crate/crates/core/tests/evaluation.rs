mod common;

use candle_core::{Device, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tbtnet::episodes::{
    build_fold_split, test_pair_list, Dataset, Episode, EpisodeSampler, Partition,
    SyntheticDataset,
};
use tbtnet::evaluation::{evaluate, kshot_merge, EvalOptions, IoUAccumulator, Segmenter};
use tbtnet::mask::BinaryMask;
use tbtnet::network::{binarize_logits, combine_level_losses};

/// Returns the ground truth as logits.
struct Oracle;

impl Segmenter for Oracle {
    fn support_logits(&self, e: &Episode) -> tbtnet::Result<Vec<Tensor>> {
        let (h, w) = e.query.mask.dims();
        let fg: Vec<f32> = e.query.mask.as_slice().iter().map(|&m| f32::from(m)).collect();
        let bg: Vec<f32> = fg.iter().map(|v| 1.0 - v).collect();
        let l = Tensor::from_vec([bg, fg].concat(), (2, h, w), &Device::Cpu)?;
        Ok(vec![l; e.shots()])
    }
}

/// Low-resolution random logits, independent of the input.
struct Noise(u64);

impl Segmenter for Noise {
    fn support_logits(&self, e: &Episode) -> tbtnet::Result<Vec<Tensor>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0 ^ e.query.id.len() as u64);
        let v: Vec<f32> = (0..2 * 8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        Ok(vec![Tensor::from_vec(v, (2, 8, 8), &Device::Cpu)?; e.shots()])
    }
}

fn sampler(ds: &SyntheticDataset, shots: usize) -> EpisodeSampler<'_> {
    let split = build_fold_split(ds.kind(), 0).unwrap();
    EpisodeSampler::new(ds, split, Partition::Test, shots, 32).unwrap()
}

#[test]
fn perfect_segmenter_scores_one() {
    let ds = SyntheticDataset::new(8, 6, 32, 3).unwrap();
    for shots in [1, 5] {
        let s = sampler(&ds, shots);
        let list = test_pair_list(&s, 1, 30).unwrap();
        let entries: Vec<_> = list.into_iter().enumerate().collect();
        let opts = EvalOptions {
            shots,
            ..EvalOptions::default()
        };
        let r = evaluate(&Oracle, &s, &entries, &opts).unwrap().report;
        assert_eq!(r.mean_iou, 1.0);
        assert_eq!(r.fb_iou, 1.0);
        assert_eq!(r.episodes, 30);
    }
}

#[test]
fn report_matches_brute_force_recount() {
    let ds = SyntheticDataset::new(8, 6, 32, 4).unwrap();
    let s = sampler(&ds, 1);
    let entries: Vec<_> = test_pair_list(&s, 2, 60).unwrap().into_iter().enumerate().collect();
    let opts = EvalOptions {
        shots: 1,
        keep_predictions: true,
        ..EvalOptions::default()
    };
    let out = evaluate(&Noise(7), &s, &entries, &opts).unwrap();
    let raw: Vec<(usize, Vec<u8>, Vec<u8>)> = out
        .predictions
        .iter()
        .map(|(d, p, t)| (d.class, p.as_slice().to_vec(), t.as_slice().to_vec()))
        .collect();
    let expected = common::brute_force_miou(&raw);
    assert!((out.report.mean_iou - expected).abs() < 1e-12);
    assert!(out.report.mean_iou > 0.0 && out.report.mean_iou < 1.0);

    // FB-IoU: mean of the pooled foreground and background IoUs.
    let inverted: Vec<_> = raw
        .iter()
        .map(|(_, p, t)| {
            let flip = |v: &Vec<u8>| v.iter().map(|&x| u8::from(x == 0)).collect::<Vec<_>>();
            (0, flip(p), flip(t))
        })
        .collect();
    let fg: Vec<_> = raw.iter().map(|(_, p, t)| (0, p.clone(), t.clone())).collect();
    let fb = (common::brute_force_miou(&fg) + common::brute_force_miou(&inverted)) / 2.0;
    assert!((out.report.fb_iou - fb).abs() < 1e-12);
}

#[test]
fn manifest_errors_carry_the_line_number() {
    let ds = SyntheticDataset::new(8, 6, 32, 4).unwrap();
    let s = sampler(&ds, 1);
    let mut entries: Vec<_> = test_pair_list(&s, 2, 3).unwrap().into_iter().enumerate().collect();
    entries[2].0 = 17;
    entries[2].1.query = "test/99999".into();
    let err = evaluate(&Oracle, &s, &entries, &EvalOptions { shots: 1, ..Default::default() })
        .unwrap_err()
        .to_string();
    assert!(err.contains("line 17"), "{err}");
}

fn mask_strategy(n: usize) -> impl Strategy<Value = Vec<u8>> {
    proptest::collection::vec(0u8..=1, n)
}

proptest! {
    #[test]
    fn binarize_ignores_shared_offsets_and_positive_scale(
        v in proptest::collection::vec(-5.0f64..5.0, 2 * 12),
        shift in -10.0f64..10.0,
        scale in 0.1f64..10.0,
    ) {
        let l = Tensor::from_vec(v.clone(), (2, 3, 4), &Device::Cpu).unwrap();
        let moved: Vec<f64> = v.iter().map(|x| x * scale + shift).collect();
        let m = Tensor::from_vec(moved, (2, 3, 4), &Device::Cpu).unwrap();
        let a = binarize_logits(&l).unwrap();
        prop_assert_eq!(a.as_slice().to_vec(), binarize_logits(&m).unwrap().as_slice().to_vec());
        for i in 0..12 {
            prop_assert_eq!(a.as_slice()[i] == 1, v[i] <= v[12 + i]);
        }
    }

    #[test]
    fn kshot_of_identical_maps_equals_one_shot(
        v in proptest::collection::vec(-4.0f64..4.0, 2 * 9),
        k in 1usize..6,
    ) {
        // Exact ties resolve the same way in both paths only away from 0.5.
        prop_assume!((0..9).all(|i| (v[i] - v[9 + i]).abs() > 1e-9));
        let l = Tensor::from_vec(v, (2, 3, 3), &Device::Cpu).unwrap();
        let one = kshot_merge(std::slice::from_ref(&l)).unwrap();
        prop_assert_eq!(one.as_slice().to_vec(), kshot_merge(&vec![l; k]).unwrap().as_slice().to_vec());
    }

    #[test]
    fn accumulator_merge_is_associative(
        ms in proptest::collection::vec((mask_strategy(16), mask_strategy(16), 0usize..3), 3..9),
        cut1 in 0usize..9,
        cut2 in 0usize..9,
    ) {
        let (lo, hi) = (cut1.min(cut2).min(ms.len()), cut1.max(cut2).min(ms.len()));
        let acc = |part: &[(Vec<u8>, Vec<u8>, usize)]| {
            let mut a = IoUAccumulator::new();
            for (p, t, c) in part {
                let p = BinaryMask::from_vec(4, 4, p.clone()).unwrap();
                let t = BinaryMask::from_vec(4, 4, t.clone()).unwrap();
                a.update(&p, &t, *c).unwrap();
            }
            a
        };
        let (a, b, c) = (acc(&ms[..lo]), acc(&ms[lo..hi]), acc(&ms[hi..]));
        let mut left = a.clone();
        left.merge(&b);
        left.merge(&c);
        let mut bc = b.clone();
        bc.merge(&c);
        let mut right = a;
        right.merge(&bc);
        prop_assert_eq!(&left, &right);
        prop_assert_eq!(&left, &acc(&ms));
        let raw: Vec<_> = ms.iter().map(|(p, t, c)| (*c, p.clone(), t.clone())).collect();
        prop_assert!((left.report().mean_iou - common::brute_force_miou(&raw)).abs() < 1e-12);
    }

    #[test]
    fn loss_weights_sum_to_one(l in 0.0f64..100.0, alpha in 0.0f64..(1.0 / 3.0)) {
        let total = combine_level_losses([l; 4], alpha);
        prop_assert!((total - l).abs() <= 1e-12 * l.max(1.0));
    }
}
