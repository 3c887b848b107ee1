use std::collections::BTreeMap;

use proptest::prelude::*;
use region_cam_core::locate::threshold_mask;
use region_cam_core::npy::{decode, encode};
use region_cam_core::occlude::occlusion_mask;
use region_cam_core::sim::Resolution;
use region_cam_core::*;

fn tensor(shape: Vec<usize>, lo: f32, hi: f32) -> impl Strategy<Value = Tensor<f32>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |v| Tensor::new(shape.clone(), v).unwrap())
}

fn hwk() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..7, 1usize..7, 1usize..9)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sim_is_positively_homogeneous(
        g in hwk().prop_flat_map(|(h, w, k)| tensor(vec![h, w, k], -4.0, 4.0)),
        e in 0i32..6,
    ) {
        // powers of two keep the scaling exact
        let a = 2f32.powi(e - 3);
        let scaled = compute_sim(&g.map(|x| x * a)).unwrap();
        let base = compute_sim(&g).unwrap().map(|x| x * a);
        prop_assert_eq!(scaled, base);
        prop_assert!(compute_sim(&g).unwrap().data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn fuse_without_tanh_ignores_order(
        a in tensor(vec![2, 3], 0.0, 2.0),
        b in tensor(vec![4, 6], 0.0, 2.0),
        c in tensor(vec![8, 12], 0.0, 2.0),
    ) {
        let fwd = fuse_sims(&[a.clone(), b.clone(), c.clone()], (8, 12), false).unwrap();
        let rev = fuse_sims(&[c, b, a], (8, 12), false).unwrap();
        for (x, y) in fwd.data().iter().zip(rev.data()) {
            prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
        }
    }

    #[test]
    fn propagation_stays_in_range_and_keeps_region_sums(
        (s, labels, m) in (1usize..10, 1usize..10, 1usize..6).prop_flat_map(|(h, w, m)| (
            tensor(vec![h, w], 0.0, 5.0),
            prop::collection::vec(0..m as i32, h * w)
                .prop_map(move |v| Tensor::new(vec![h, w], v).unwrap()),
            Just(m),
        ))
    ) {
        let lm = LabelMap::new("x", labels.clone(), m).unwrap();
        let out = propagate_once(&s, &lm).unwrap();
        let (lo, hi) = s.min_max();
        prop_assert!(out.data().iter().all(|&v| v >= lo && v <= hi));
        for r in 0..m as i32 {
            let (mut before, mut after) = (0.0f64, 0.0f64);
            for ((&a, &b), &l) in s.data().iter().zip(out.data()).zip(labels.data()) {
                if l == r {
                    before += f64::from(a);
                    after += f64::from(b);
                }
            }
            prop_assert!((before - after).abs() <= 1e-5 * before.max(1.0));
        }
    }

    #[test]
    fn seed_is_invariant_under_monotone_transform(
        a in prop::collection::vec(0u32..=64, 12),
        b in prop::collection::vec(0u32..=64, 12),
        t in 0u32..=64,
    ) {
        // k/64 grid values cube exactly in f32
        let map = |v: &[u32], f: fn(f32) -> f32| Tensor::new(vec![3, 4], v.iter().map(|&k| f(k as f32 / 64.0)).collect()).unwrap();
        let maps = |f: fn(f32) -> f32| BTreeMap::from([
            (1, ActivationMap::new(1, map(&a, f), Resolution::Image).unwrap()),
            (4, ActivationMap::new(4, map(&b, f), Resolution::Image).unwrap()),
        ]);
        let th = t as f32 / 64.0;
        let plain = make_seed(&maps(|x| x), th).unwrap();
        let cubed = make_seed(&maps(|x| x * x * x), th * th * th).unwrap();
        prop_assert_eq!(plain.labels, cubed.labels);
    }

    #[test]
    fn masks_shrink_as_fraction_grows(
        m in (1usize..12, 1usize..12).prop_flat_map(|(h, w)| tensor(vec![h, w], 0.0, 1.0)),
        f1 in 0.0f32..=1.0,
        f2 in 0.0f32..=1.0,
    ) {
        let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
        prop_assert!(threshold_mask(&m, hi).unwrap().is_subset_of(&threshold_mask(&m, lo).unwrap()));
        prop_assert!(occlusion_mask(&m, hi).unwrap().is_subset_of(&occlusion_mask(&m, lo).unwrap()));
    }

    #[test]
    fn box_iou_is_symmetric_and_bounded(
        a in (0usize..10, 0usize..10, 1usize..10, 1usize..10),
        b in (0usize..10, 0usize..10, 1usize..10, 1usize..10),
    ) {
        let ba = BBox::new(a.0, a.1, a.0 + a.2, a.1 + a.3).unwrap();
        let bb = BBox::new(b.0, b.1, b.0 + b.2, b.1 + b.3).unwrap();
        let v = box_iou(&ba, &bb);
        prop_assert_eq!(v, box_iou(&bb, &ba));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(box_iou(&ba, &ba), 1.0);
    }

    #[test]
    fn npy_round_trips(
        t in (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(a, b, c)| tensor(vec![a, b, c], -1e6, 1e6))
    ) {
        let back: Tensor<f32> = decode(&encode(&t)).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn confusion_accumulation_is_order_independent(
        imgs in prop::collection::vec(
            (prop::collection::vec(prop_oneof![0i32..3, Just(255)], 6), prop::collection::vec(0i32..3, 6)),
            1..5,
        )
    ) {
        let tensors: Vec<(Tensor<i32>, Tensor<i32>)> = imgs
            .iter()
            .map(|(g, p)| (Tensor::new(vec![2, 3], g.clone()).unwrap(), Tensor::new(vec![2, 3], p.clone()).unwrap()))
            .collect();
        let mut fwd = ConfusionMatrix::new(3);
        for (g, p) in &tensors {
            fwd.update(g, p, 255).unwrap();
        }
        let mut rev = ConfusionMatrix::new(3);
        for (g, p) in tensors.iter().rev() {
            rev.update(g, p, 255).unwrap();
        }
        prop_assert_eq!(&fwd, &rev);
        let (per_class, mean) = miou(&fwd);
        prop_assert!(per_class.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((0.0..=1.0).contains(&mean));
    }
}
