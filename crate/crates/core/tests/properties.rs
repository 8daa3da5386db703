mod common;

use proptest::prelude::*;

use tabs::data::{apportion, pad_crop, split_dataset, Metadata, Semantics, Volume, STRATA};
use tabs::metrics::{dice, hausdorff, jaccard, spearman, BinaryMap};
use tabs::tensor::{Tape, Tensor};

fn bitmap(dims: [usize; 3], bits: Vec<bool>) -> BinaryMap {
    BinaryMap::new(dims, bits).unwrap()
}

fn nonempty_bits(n: usize) -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), n).prop_filter("nonempty", |b| b.iter().any(|x| *x))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_sizes_and_strata(cov in prop::collection::vec(0.0f64..1.0, 5..240), seed in any::<u64>()) {
        let n = cov.len();
        let s = split_dataset(&cov, [3, 1, 1], seed).unwrap();
        prop_assert_eq!(vec![s.train.len(), s.val.len(), s.test.len()], apportion(n, &[3, 1, 1]));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| cov[a].total_cmp(&cov[b]).then(a.cmp(&b)));
        for b in 0..STRATA {
            let bin = &order[b * n / STRATA..(b + 1) * n / STRATA];
            for (part, w) in [(&s.train, 3.0), (&s.val, 1.0), (&s.test, 1.0)] {
                let got = bin.iter().filter(|i| part.contains(i)).count() as f64;
                let ideal = bin.len() as f64 * w / 5.0;
                prop_assert!((got - ideal).abs() < 1.0 + 1e-9, "bin {} part weight {}: {} vs {}", b, w, got, ideal);
            }
        }
    }

    #[test]
    fn dice_jaccard_relation(a in prop::collection::vec(any::<bool>(), 64), b in prop::collection::vec(any::<bool>(), 64)) {
        let (a, b) = (bitmap([4, 4, 4], a), bitmap([4, 4, 4], b));
        if let (Ok(d), Ok(j)) = (dice(&a, &b), jaccard(&a, &b)) {
            prop_assert!(j <= d);
            prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }

    #[test]
    fn hausdorff_is_a_metric(a in nonempty_bits(125), b in nonempty_bits(125), c in nonempty_bits(125)) {
        let dims = [5, 5, 5];
        let (a, b, c) = (bitmap(dims, a), bitmap(dims, b), bitmap(dims, c));
        let ab = hausdorff(&a, &b).unwrap();
        prop_assert_eq!(ab, hausdorff(&b, &a).unwrap());
        prop_assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
        prop_assert!(hausdorff(&a, &c).unwrap() <= ab + hausdorff(&b, &c).unwrap() + 1e-12);
    }

    #[test]
    fn spearman_ignores_monotone_maps(
        x in prop::collection::vec(0u32..1000, 10..80),
        seed in any::<u64>(),
    ) {
        let xs: Vec<f32> = x.iter().map(|v| *v as f32 / 1000.0).collect();
        let ys: Vec<f32> = xs.iter().enumerate().map(|(i, v)| v + ((seed >> (i % 60)) & 7) as f32 / 10.0).collect();
        let mask = vec![true; xs.len()];
        let cubed: Vec<f32> = xs.iter().map(|v| ((*v as f64).powi(3) * 5.0 + 1.0) as f32).collect();
        match (spearman(&xs, &ys, &mask), spearman(&cubed, &ys, &mask)) {
            (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b),
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
        }
    }

    #[test]
    fn pad_crop_keeps_mask_voxels(
        dims in prop::array::uniform3(3usize..14),
        lo in prop::array::uniform3(0usize..6),
        ext in prop::array::uniform3(1usize..6),
        target in 6usize..16,
    ) {
        let lo: [usize; 3] = std::array::from_fn(|k| lo[k].min(dims[k] - 1));
        let hi: [usize; 3] = std::array::from_fn(|k| (lo[k] + ext[k]).min(dims[k]));
        let n = dims.iter().product::<usize>();
        let data: Vec<f32> = (0..n)
            .map(|i| {
                let p = [i / (dims[1] * dims[2]), i / dims[2] % dims[1], i % dims[2]];
                (0..3).all(|k| p[k] >= lo[k] && p[k] < hi[k]) as u8 as f32
            })
            .collect();
        let mask = Volume::new(1, dims, Semantics::Mask, Metadata::default(), data).unwrap();
        let kept = mask.data.iter().sum::<f32>();
        let out = pad_crop(&mask, target, &mask).unwrap();
        prop_assert_eq!(out.dims(), [target; 3]);
        prop_assert_eq!(out.data.iter().sum::<f32>(), kept);
    }

    #[test]
    fn masked_loss_ignores_target_outside_mask(
        pred in prop::collection::vec(0.0f64..1.0, 24),
        target in prop::collection::vec(0.0f64..1.0, 24),
        noise in prop::collection::vec(-5.0f64..5.0, 24),
        mask in prop::collection::vec(any::<bool>(), 8),
    ) {
        prop_assume!(mask.iter().any(|m| *m));
        let loss = |t: Vec<f64>| {
            let mut tape = Tape::new();
            let p = tape.constant(Tensor::new(vec![3, 2, 2, 2], pred.clone()).unwrap());
            let l = tape.mse_loss(p, &Tensor::new(vec![3, 2, 2, 2], t).unwrap(), Some(&mask)).unwrap();
            tape.value(l).item()
        };
        let perturbed: Vec<f64> = target
            .iter()
            .enumerate()
            .map(|(i, v)| if mask[i % 8] { *v } else { v + noise[i] })
            .collect();
        prop_assert_eq!(loss(target.clone()), loss(perturbed));
    }

    #[test]
    fn volume_bytes_round_trip(
        dims in prop::array::uniform3(1usize..6),
        channels in 1usize..4,
        key in "[a-z]{1,8}",
        value in "[a-zA-Z0-9 ._-]{0,12}",
        seed in any::<u64>(),
    ) {
        let n = channels * dims.iter().product::<usize>();
        let data: Vec<f32> = (0..n).map(|i| ((seed >> (i % 64)) & 0xff) as f32 / 7.0).collect();
        let meta = Metadata::default().with(&key, value.trim());
        let v = Volume::new(channels, dims, Semantics::RawT1, meta, data).unwrap();
        let bytes = v.to_bytes();
        let back = Volume::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &v);
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}
