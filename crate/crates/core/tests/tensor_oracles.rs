//! Independent reference implementations of the image primitives.

use proptest::prelude::*;
use snad_core::pipeline::{extract_local_features, HierarchyStack, PipelineConfig};
use snad_core::tensors::{
    aggregate_neighborhood, gaussian_filter, resize_bilinear, FeatureTensor, ScoreMap,
};

/// Mirror index with period `2n` (edge sample repeated).
fn mirror(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = ((i % (2 * n)) + 2 * n) % (2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Full 2-D convolution with the outer-product kernel, all in f64.
fn dense_gaussian(map: &ScoreMap, sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as i64;
    let g: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    let (h, w) = (map.height(), map.width());
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let wgt = g[(dy + r) as usize] * g[(dx + r) as usize];
                    let v = map.get(mirror(y as i64 + dy, h), mirror(x as i64 + dx, w));
                    acc += wgt * f64::from(v);
                }
            }
            out[y * w + x] = acc / norm;
        }
    }
    out
}

/// Tent-kernel evaluation over every source pixel.
fn brute_resize(map: &FeatureTensor, oh: usize, ow: usize) -> Vec<f64> {
    let (h, w, c) = (map.height(), map.width(), map.channels());
    let src = |o: usize, inp: usize, out: usize| {
        ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64)
    };
    let tent = |t: f64| (1.0 - t.abs()).max(0.0);
    let mut out = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        let sy = src(oy, h, oh);
        for ox in 0..ow {
            let sx = src(ox, w, ow);
            for ch in 0..c {
                let mut acc = 0.0;
                for iy in 0..h {
                    for ix in 0..w {
                        acc += tent(sy - iy as f64) * tent(sx - ix as f64) * f64::from(map.get(iy, ix, ch));
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

/// Mean over every in-bounds cell of the window.
fn naive_aggregate(map: &FeatureTensor, p: usize) -> Vec<f32> {
    let (h, w, c) = (map.height(), map.width(), map.channels());
    let r = (p / 2) as i64;
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            for ch in 0..c {
                let (mut sum, mut n) = (0f64, 0u32);
                for yy in y - r..=y + r {
                    for xx in x - r..=x + r {
                        if (0..h as i64).contains(&yy) && (0..w as i64).contains(&xx) {
                            sum += f64::from(map.get(yy as usize, xx as usize, ch));
                            n += 1;
                        }
                    }
                }
                out.push((sum / f64::from(n)) as f32);
            }
        }
    }
    out
}

fn score_map(max_side: usize) -> impl Strategy<Value = ScoreMap> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        prop::collection::vec(-1.0f32..1.0, h * w).prop_map(move |d| ScoreMap::new(h, w, d).unwrap())
    })
}

fn tensor(max_side: usize, max_c: usize) -> impl Strategy<Value = FeatureTensor> {
    (1..=max_side, 1..=max_side, 1..=max_c).prop_flat_map(|(h, w, c)| {
        prop::collection::vec(-1.0f32..1.0, h * w * c).prop_map(move |d| FeatureTensor::new(h, w, c, d).unwrap())
    })
}

/// Multiples of 2^-10 in [-64, 64]: window sums are exact in f64 in any order.
fn dyadic_tensor(max_side: usize, max_c: usize) -> impl Strategy<Value = FeatureTensor> {
    (1..=max_side, 1..=max_side, 1..=max_c).prop_flat_map(|(h, w, c)| {
        prop::collection::vec(-65536i32..=65536, h * w * c).prop_map(move |d| {
            FeatureTensor::new(h, w, c, d.into_iter().map(|v| v as f32 / 1024.0).collect()).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn separable_gaussian_matches_dense(map in score_map(24), sigma in 0.3f64..5.0) {
        let fast = gaussian_filter(&map, sigma).unwrap();
        let slow = dense_gaussian(&map, sigma);
        for (a, b) in fast.data().iter().zip(&slow) {
            prop_assert!((f64::from(*a) - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn bilinear_matches_tent_evaluation(map in tensor(9, 3), oh in 1usize..20, ow in 1usize..20) {
        let fast = resize_bilinear(&map, oh, ow).unwrap();
        let slow = brute_resize(&map, oh, ow);
        for (a, b) in fast.data().iter().zip(&slow) {
            prop_assert!((f64::from(*a) - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn aggregation_matches_enumeration(map in dyadic_tensor(10, 3), half in 0usize..4) {
        let p = 2 * half + 1;
        let fast = aggregate_neighborhood(&map, p).unwrap();
        prop_assert_eq!(fast.data(), &naive_aggregate(&map, p)[..]);
    }

    #[test]
    fn gaussian_preserves_constants(h in 1usize..16, w in 1usize..16, v in -5.0f32..5.0, sigma in 0.3f64..6.0) {
        let out = gaussian_filter(&ScoreMap::filled(h, w, v).unwrap(), sigma).unwrap();
        prop_assert!(out.data().iter().all(|x| (x - v).abs() <= 1e-5 * v.abs().max(1.0)));
    }

    #[test]
    fn resize_output_within_input_range(map in tensor(8, 2), oh in 1usize..24, ow in 1usize..24) {
        let out = resize_bilinear(&map, oh, ow).unwrap();
        let lo = map.data().iter().copied().fold(f32::INFINITY, f32::min);
        let hi = map.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
    }

    #[test]
    fn level_order_does_not_matter(a in tensor(6, 3), c2 in 1usize..4, seed in 0u32..100) {
        let b = FeatureTensor::from_fn(3, 3, c2, |y, x, c| ((y * 7 + x * 3 + c) as u32 ^ seed) as f32 * 0.01).unwrap();
        let s1 = HierarchyStack::new(vec![(2, a.clone()), (3, b.clone())]).unwrap();
        let s2 = HierarchyStack::new(vec![(3, b), (2, a)]).unwrap();
        let cfg = PipelineConfig::default();
        prop_assert_eq!(extract_local_features(&s1, &cfg).unwrap(), extract_local_features(&s2, &cfg).unwrap());
    }
}

#[test]
fn aggregation_example_values() {
    let map = FeatureTensor::new(3, 3, 1, (1..=9).map(|v| v as f32).collect()).unwrap();
    let out = aggregate_neighborhood(&map, 3).unwrap();
    assert_eq!(out.get(1, 1, 0), 5.0);
    assert_eq!(out.get(0, 0, 0), 3.0);
    assert_eq!(out.data(), &naive_aggregate(&map, 3)[..]);
}

#[test]
fn default_hierarchy_shapes() {
    let l2 = FeatureTensor::filled(28, 28, 512, 0.25).unwrap();
    let l3 = FeatureTensor::filled(14, 14, 1024, -1.5).unwrap();
    let stack = HierarchyStack::new(vec![(2, l2), (3, l3)]).unwrap();
    let out = extract_local_features(&stack, &PipelineConfig::default()).unwrap();
    assert_eq!((out.height(), out.width(), out.channels()), (28, 28, 1536));
    for y in [0, 13, 27] {
        let v = out.at(y, 5);
        assert!(v[..512].iter().all(|&x| x == 0.25));
        assert!(v[512..].iter().all(|&x| x == -1.5));
    }
}

#[test]
fn single_level_unit_patch_is_identity() {
    let map = FeatureTensor::from_fn(5, 4, 3, |y, x, c| (y as f32 - x as f32) * 0.5 + c as f32).unwrap();
    let cfg = PipelineConfig {
        patch_size: 1,
        selected_levels: vec![7],
    };
    let out = extract_local_features(&HierarchyStack::single(7, map.clone()), &cfg).unwrap();
    assert_eq!(out, map);
}
