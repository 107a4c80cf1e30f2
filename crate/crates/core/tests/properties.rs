use peftsam_core::instanceseg::{
    derive_targets, dice, dice_masks, mean_segmentation_accuracy, watershed_decode, InstanceMap, DEFAULT_TAU_CENTER,
    DEFAULT_TAU_FG,
};
use peftsam_core::quant::{pack_nibbles, unpack_nibbles, QuantizedTensor};
use peftsam_core::synth::{render, GenSpec};
use peftsam_core::tensor::NdArray;
use proptest::prelude::*;

const N: usize = 24;

fn rect_map() -> impl Strategy<Value = InstanceMap> {
    prop::collection::vec((0..N - 2, 0..N - 2, 1usize..10, 1usize..10), 0..5).prop_map(|rects| {
        let mut labels = vec![0u32; N * N];
        for (id, (r0, c0, h, w)) in rects.into_iter().enumerate() {
            for r in r0..(r0 + h).min(N) {
                for c in c0..(c0 + w).min(N) {
                    labels[r * N + c] = id as u32 + 1;
                }
            }
        }
        InstanceMap::new(N, N, labels).unwrap()
    })
}

/// Maps every id through an injective function that keeps 0 as 0.
fn relabel(m: &InstanceMap, k: u32) -> InstanceMap {
    let labels = m.labels().iter().map(|&l| if l == 0 { 0 } else { l * 7 + k }).collect();
    InstanceMap::new(m.height(), m.width(), labels).unwrap()
}

fn blob_spec(seed: u64) -> GenSpec {
    GenSpec {
        image_size: 48,
        min_instances: 1,
        max_instances: 4,
        min_radius: 3.0,
        max_radius: 7.0,
        seed,
        ..GenSpec::default()
    }
}

/// True when `a` and `b` induce the same partition of the pixels.
fn same_partition(a: &InstanceMap, b: &InstanceMap) -> bool {
    let mut fwd = std::collections::HashMap::new();
    let mut back = std::collections::HashMap::new();
    a.labels().iter().zip(b.labels()).all(|(&x, &y)| {
        (x == 0) == (y == 0) && *fwd.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn msa_ignores_label_values(a in rect_map(), b in rect_map(), k in 1u32..50) {
        let s = mean_segmentation_accuracy(&a, &b).unwrap();
        prop_assert_eq!(s, mean_segmentation_accuracy(&relabel(&a, k), &relabel(&b, k + 3)).unwrap());
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn msa_is_symmetric_and_perfect_on_itself(a in rect_map(), b in rect_map()) {
        prop_assert_eq!(mean_segmentation_accuracy(&a, &b).unwrap(), mean_segmentation_accuracy(&b, &a).unwrap());
        prop_assert_eq!(mean_segmentation_accuracy(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn dice_is_symmetric_and_bounded(p in prop::collection::vec(0.0f64..1.0, 1..64), seed in any::<u64>()) {
        let t: Vec<f64> = p.iter().enumerate().map(|(i, v)| ((i as u64 ^ seed) % 3) as f64 / 2.0 * v).collect();
        let d = dice(&p, &t).unwrap();
        prop_assert_eq!(d, dice(&t, &p).unwrap());
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
    }

    #[test]
    fn binary_dice_of_a_mask_with_itself_is_one(m in prop::collection::vec(any::<bool>(), 1..64)) {
        prop_assert_eq!(dice_masks(&m, &m).unwrap(), 1.0);
    }

    #[test]
    fn targets_stay_in_range(map in rect_map()) {
        let t = derive_targets(&map);
        for p in 0..N * N {
            let fg = map.labels()[p] != 0;
            prop_assert_eq!(t.foreground[p], fg as u8 as f32);
            for v in [t.center[p], t.boundary[p]] {
                prop_assert!((0.0..=1.0).contains(&v));
                if !fg {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn watershed_labels_only_foreground(
        vals in prop::collection::vec(0.0f32..1.0, 3 * 16 * 16),
    ) {
        let pred = NdArray::new(vec![3, 16, 16], vals).unwrap();
        let out = watershed_decode(&pred, DEFAULT_TAU_CENTER, DEFAULT_TAU_FG).unwrap();
        let d = pred.data();
        for p in 0..256 {
            if d[512 + p] <= DEFAULT_TAU_FG {
                prop_assert_eq!(out.labels()[p], 0);
            }
        }
        // every instance holds at least one seed pixel
        for id in out.ids() {
            let seeded = out.mask(id).iter().enumerate().any(|(p, &m)| m && d[p] > DEFAULT_TAU_CENTER);
            prop_assert!(seeded, "instance {} has no seed", id);
        }
    }

    #[test]
    fn blobs_round_trip_through_targets(seed in any::<u64>(), index in 0usize..4) {
        let (_, truth) = render(&blob_spec(seed), 0, index).unwrap();
        let decoded = watershed_decode(&derive_targets(&truth).to_array(), DEFAULT_TAU_CENTER, DEFAULT_TAU_FG).unwrap();
        prop_assert!(same_partition(&truth, &decoded));
    }

    #[test]
    fn rendering_is_deterministic(seed in any::<u64>(), split in 0usize..3, index in 0usize..8) {
        let spec = blob_spec(seed);
        let (img, map) = render(&spec, split, index).unwrap();
        let (img2, map2) = render(&spec, split, index).unwrap();
        prop_assert_eq!(img.data(), img2.data());
        prop_assert_eq!(map.labels(), map2.labels());
        let n = map.ids().len();
        prop_assert!((spec.min_instances..=spec.max_instances).contains(&n));
        prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn nibbles_round_trip(codes in prop::collection::vec(-8i8..=7, 0..70)) {
        prop_assert_eq!(unpack_nibbles(&pack_nibbles(&codes), codes.len()), codes);
    }

    #[test]
    fn quantization_error_within_block_bound(
        vals in prop::collection::vec(-4.0f32..4.0, 1..200),
        block in 1usize..80,
    ) {
        let a = NdArray::new(vec![vals.len()], vals.clone()).unwrap();
        let q = QuantizedTensor::quantize(&a, block).unwrap();
        let d = q.dequantize::<f32>();
        for (chunk, dq) in vals.chunks(block).zip(d.data().chunks(block)) {
            let bound = chunk.iter().fold(0.0f32, |m, v| m.max(v.abs())) / 7.0;
            for (v, w) in chunk.iter().zip(dq) {
                prop_assert!((v - w).abs() <= bound * (1.0 + 1e-6));
            }
        }
    }
}

#[test]
fn msa_edge_cases() {
    let t: Vec<u32> = (0..100).map(|i| (i < 8) as u32).collect();
    let p: Vec<u32> = (0..100).map(|i| (2..12).contains(&i) as u32).collect();
    let (t, p) = (InstanceMap::new(10, 10, t).unwrap(), InstanceMap::new(10, 10, p).unwrap());
    // intersection 6, union 12 -> IoU 0.5, matched at no threshold
    assert_eq!(mean_segmentation_accuracy(&p, &t).unwrap(), 0.0);
    let empty = InstanceMap::empty(10, 10);
    assert_eq!(mean_segmentation_accuracy(&empty, &empty).unwrap(), 1.0);
    assert_eq!(mean_segmentation_accuracy(&p, &empty).unwrap(), 0.0);
}
