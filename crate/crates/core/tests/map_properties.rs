mod common;

use proptest::prelude::*;
use s2dtan::map::{
    build_map_stacked_pool, candidate_counts, compact_shapes, enumerate_candidates, from_compact,
    is_valid_candidate, pooling_layer_count, rearrange, recover, to_compact, Bin, MapCoord,
    SamplingConfig, TemporalFeatureMap, ValidityMask,
};
use s2dtan::nn::ops::conv2d_masked;

fn cfg(n: usize) -> SamplingConfig {
    SamplingConfig::new(n).unwrap()
}

fn sizes() -> impl Strategy<Value = usize> {
    (1usize..=8).prop_map(|k| 8 * k)
}

#[test]
fn oracle_counts_for_small_maps() {
    assert_eq!(common::brute_candidates(8).len(), 19);
    assert_eq!(common::brute_candidates(16).len(), 72);
    assert_eq!(enumerate_candidates(&cfg(8)).len(), 19);
    assert_eq!(enumerate_candidates(&cfg(16)).len(), 72);
}

#[test]
fn full_size_map() {
    let c = cfg(256);
    assert_eq!(compact_shapes(&c), [(256, 256), (96, 96), (32, 32)]);
    assert_eq!(pooling_layer_count(&c), 127);
    let brute = common::brute_candidates(256);
    assert_eq!(candidate_counts(&c).iter().sum::<usize>(), brute.len());
}

#[test]
fn rejects_bad_sizes() {
    for n in [0, 4, 12, 20] {
        assert!(SamplingConfig::new(n).is_err());
    }
    assert!(is_valid_candidate(&cfg(8), 0, 8).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn enumeration_matches_brute_force(n in sizes()) {
        let c = cfg(n);
        let mut ours: Vec<(usize, usize)> = enumerate_candidates(&c).iter().map(|m| (m.start, m.end)).collect();
        ours.sort();
        let mut brute = common::brute_candidates(n);
        brute.sort();
        prop_assert_eq!(&ours, &brute);
        let mask = ValidityMask::for_config(&c);
        prop_assert_eq!(mask.count(), brute.len());
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(mask.get(i, j), common::is_candidate(n, i, j));
            }
        }
    }

    #[test]
    fn bins_partition_candidates(n in sizes()) {
        let c = cfg(n);
        let total: usize = Bin::ALL.iter().map(|&b| ValidityMask::for_bin(&c, b).count()).sum();
        prop_assert_eq!(total, ValidityMask::for_config(&c).count());
        let counts = candidate_counts(&c);
        for b in Bin::ALL {
            prop_assert_eq!(counts[b as usize], ValidityMask::for_bin(&c, b).count());
        }
    }

    #[test]
    fn compact_positions_are_a_bijection(n in sizes()) {
        let c = cfg(n);
        let shapes = compact_shapes(&c);
        let mut seen = std::collections::BTreeSet::new();
        for m in enumerate_candidates(&c) {
            let (bin, u, w) = to_compact(&c, m).unwrap();
            let (rows, cols) = shapes[bin as usize];
            prop_assert!(u < rows && w < cols);
            prop_assert_eq!(from_compact(&c, bin, u, w), Some(m));
            prop_assert!(seen.insert((bin as usize, u, w)));
        }
        for i in 0..n {
            for j in i..n {
                if !common::is_candidate(n, i, j) {
                    prop_assert!(to_compact(&c, MapCoord::new(i, j)).is_err());
                }
            }
        }
    }

    #[test]
    fn stacked_pool_equals_direct_max(
        n in prop::sample::select(vec![8usize, 16, 32]),
        h in 1usize..=4,
        seed in any::<u64>(),
    ) {
        let mut rng = common::rng(seed);
        let projected = common::random_tensor(&mut rng, &[n, h], 1.0);
        let map = build_map_stacked_pool(&cfg(n), &projected).unwrap();
        let direct = common::direct_pool(n, h, projected.data());
        prop_assert_eq!(map.values().data(), direct.as_slice());
    }

    #[test]
    fn pooled_cells_cover_their_span(n in prop::sample::select(vec![8usize, 16]), seed in any::<u64>()) {
        // a valid cell is at least as large as every valid cell it contains
        let mut rng = common::rng(seed);
        let projected = common::random_tensor(&mut rng, &[n, 2], 1.0);
        let map = build_map_stacked_pool(&cfg(n), &projected).unwrap();
        let cands = enumerate_candidates(&cfg(n));
        for a in &cands {
            for b in &cands {
                if a.contains(b) {
                    for c in 0..2 {
                        prop_assert!(map.cell(a.start, a.end)[c] >= map.cell(b.start, b.end)[c]);
                    }
                }
            }
        }
    }

    #[test]
    fn rearrange_recover_round_trip(n in sizes(), h in 1usize..=3, seed in any::<u64>()) {
        let c = cfg(n);
        let mut rng = common::rng(seed);
        let mask = ValidityMask::for_config(&c);
        let mut values = common::random_tensor(&mut rng, &[n, n, h], 1.0);
        for cell in 0..n * n {
            if !mask.as_slice()[cell] {
                values.data_mut()[cell * h..(cell + 1) * h].fill(0.0);
            }
        }
        let map = TemporalFeatureMap::new(values.clone(), mask).unwrap();
        let back = recover(&c, &rearrange(&c, &map).unwrap()).unwrap();
        prop_assert_eq!(back.values(), &values);
    }

    #[test]
    fn invalid_cells_never_leak(n in prop::sample::select(vec![8usize, 16]), seed in any::<u64>()) {
        let c = cfg(n);
        let h = 2;
        let mut rng = common::rng(seed);
        let mask = ValidityMask::for_config(&c);
        let base = common::random_tensor(&mut rng, &[n, n, h], 1.0);
        let mut noisy = base.clone();
        for cell in 0..n * n {
            if !mask.as_slice()[cell] {
                for v in &mut noisy.data_mut()[cell * h..(cell + 1) * h] {
                    *v += 100.0;
                }
            }
        }
        // compact maps and their valid cells ignore invalid full-map cells
        let a = rearrange(&c, &TemporalFeatureMap::new(base.clone(), mask.clone()).unwrap()).unwrap();
        let b = rearrange(&c, &TemporalFeatureMap::new(noisy.clone(), mask.clone()).unwrap()).unwrap();
        prop_assert_eq!(&a, &b);

        // masked convolution on each compact map ignores invalid compact cells
        let k = common::random_tensor(&mut rng, &[3, 3, h, h], 1.0);
        let bias = common::random_tensor(&mut rng, &[h], 1.0);
        for bin in Bin::ALL {
            let m = a.get(bin);
            let mut perturbed = m.values.clone();
            for (cell, &ok) in m.mask.iter().enumerate() {
                if !ok {
                    perturbed.data_mut()[cell * h..(cell + 1) * h].fill(-7.5);
                }
            }
            let y0 = conv2d_masked(&m.values, &k, &bias, Some(&m.mask)).unwrap();
            let y1 = conv2d_masked(&perturbed, &k, &bias, Some(&m.mask)).unwrap();
            for (cell, &ok) in m.mask.iter().enumerate() {
                for ch in 0..h {
                    let (p, q) = (y0.data()[cell * h + ch], y1.data()[cell * h + ch]);
                    prop_assert!((p - q).abs() <= 1e-9);
                    if !ok {
                        prop_assert_eq!(p, 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn masked_conv_equals_zeroed_dense_conv() {
    let mut rng = common::rng(5);
    let (h, w, cin, cout) = (6, 7, 3, 2);
    let x = common::random_tensor(&mut rng, &[h, w, cin], 1.0);
    let k = common::random_tensor(&mut rng, &[3, 3, cin, cout], 1.0);
    let b = common::random_tensor(&mut rng, &[cout], 1.0);
    let mask: Vec<bool> = (0..h * w).map(|c| (c * 7 + 3) % 5 != 0).collect();
    let mut zeroed = x.clone();
    for (c, &ok) in mask.iter().enumerate() {
        if !ok {
            zeroed.data_mut()[c * cin..(c + 1) * cin].fill(0.0);
        }
    }
    let mut dense = conv2d_masked(&zeroed, &k, &b, None).unwrap();
    for (c, &ok) in mask.iter().enumerate() {
        if !ok {
            dense.data_mut()[c * cout..(c + 1) * cout].fill(0.0);
        }
    }
    let masked = conv2d_masked(&x, &k, &b, Some(&mask)).unwrap();
    assert!(masked.max_abs_diff(&dense) < 1e-12);
}
