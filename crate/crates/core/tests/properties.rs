use gantry::discriminator::{patchify, patchify_index, unpatchify};
use gantry::generator::{GeneratorConfig, Geometry};
use gantry::io::checkpoint::{bit_identical, decode, encode, CheckpointTensor};
use gantry::io::ppm::pixel_byte;
use gantry::io::ImageBatch;
use gantry::metrics::{block_macs, count_macs, frechet_distance, FeatureMoments, Projector};
use gantry::nn::{pixelshuffle_index, AttentionMask, Window};
use gantry::tensor::NeighborTable;
use gantry::train::{adam_step, AdamConfig, AdamState, LocalitySchedule};
use gantry::Tensor;
use proptest::prelude::*;

fn window() -> impl Strategy<Value = Window> {
    prop_oneof![(1usize..12).prop_map(Window::Bounded), Just(Window::Unbounded)]
}

fn moments(d: usize) -> impl Strategy<Value = FeatureMoments> {
    (prop::collection::vec(-2.0f64..2.0, d), prop::collection::vec(-1.0f64..1.0, d * (d + 2))).prop_map(move |(mean, a)| {
        // A Aᵀ is symmetric positive semi-definite.
        let cols = d + 2;
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = (0..cols).map(|k| a[i * cols + k] * a[j * cols + k]).sum();
            }
        }
        FeatureMoments::new(mean, cov, 100).unwrap()
    })
}

fn assert_close(a: f64, b: f64, tol: f64) -> Result<(), TestCaseError> {
    prop_assert!((a - b).abs() <= tol * (1.0 + a.abs().max(b.abs())), "{a} vs {b}");
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn growing_the_window_only_adds_pairs(side in 1usize..9, w in 1usize..9) {
        let small = AttentionMask::new(Window::Bounded(w), side).unwrap();
        let large = AttentionMask::new(Window::Bounded(w + 1), side).unwrap();
        for i in 0..side * side {
            prop_assert!(small.allowed(i, i));
            for j in 0..side * side {
                prop_assert!(!small.allowed(i, j) || large.allowed(i, j));
                prop_assert_eq!(small.allowed(i, j), small.allowed(j, i));
            }
        }
    }

    #[test]
    fn window_covering_the_grid_is_global(side in 1usize..9, extra in 0usize..4) {
        let mask = AttentionMask::new(Window::Bounded(side + extra), side).unwrap();
        prop_assert!(mask.is_global());
        let table = NeighborTable::grid(side, Some(side + extra));
        prop_assert_eq!(table.pairs(), side.pow(4));
    }

    #[test]
    fn neighbor_table_agrees_with_mask(side in 1usize..8, w in window()) {
        let mask = AttentionMask::new(w, side).unwrap();
        let table = mask.neighbor_table();
        for i in 0..side * side {
            for j in 0..side * side {
                prop_assert_eq!(table.allowed(i, j), mask.allowed(i, j));
            }
        }
    }

    #[test]
    fn monotone_schedules_never_shrink(gaps in prop::collection::vec(1usize..15, 0..5), mut windows in prop::collection::vec(window(), 5), epoch in 0usize..100) {
        windows.sort();
        let mut start = 0;
        let mut points = vec![(0, windows[0])];
        for (gap, w) in gaps.iter().zip(&windows[1..]) {
            start += gap;
            points.push((start, *w));
        }
        let schedule = LocalitySchedule::new(points).unwrap();
        prop_assert!(schedule.window_for_epoch(epoch) <= schedule.window_for_epoch(epoch + 1));
        let reparsed = LocalitySchedule::parse(&schedule.to_string()).unwrap();
        prop_assert_eq!(reparsed, schedule);
    }

    #[test]
    fn default_schedule_is_monotone(epoch in 0usize..200) {
        let s = LocalitySchedule::default();
        prop_assert!(s.window_for_epoch(epoch) <= s.window_for_epoch(epoch + 1));
    }

    #[test]
    fn frechet_is_symmetric_and_non_negative(a in moments(4), b in moments(4)) {
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        assert_close(ab, ba, 1e-8)?;
        prop_assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
    }

    #[test]
    fn moments_ignore_image_order(pixels in prop::collection::vec(-1.0f32..1.0, 6 * 4 * 4 * 3), rotate in 1usize..6) {
        let images = ImageBatch::new(Tensor::from_vec(pixels, &[6, 4, 4, 3]).unwrap()).unwrap();
        let order: Vec<usize> = (0..6).map(|i| (i + rotate) % 6).collect();
        let shuffled = ImageBatch::new(images.select(&order).unwrap()).unwrap();
        let p = Projector::new(3, 48, 5).unwrap();
        let (a, b) = (p.moments(&images).unwrap(), p.moments(&shuffled).unwrap());
        for (x, y) in a.mean.iter().zip(&b.mean).chain(a.covariance.iter().zip(&b.covariance)) {
            assert_close(*x, *y, 1e-12)?;
        }
    }

    #[test]
    fn macs_add_up_per_block(d0 in 1usize..5, d1 in 1usize..5, d2 in 1usize..5, ratio in 1usize..5, stage in 0usize..3) {
        let mut cfg = GeneratorConfig::preset("tiny", Geometry::Cifar).unwrap();
        cfg.depths = vec![d0, d1, d2];
        cfg.mlp_ratio = ratio;
        let report = count_macs(&cfg);
        prop_assert_eq!(report.layers.iter().map(|l| l.macs).sum::<u64>(), report.total());
        prop_assert_eq!(report.breakdown().total(), report.total());
        let mut deeper = cfg.clone();
        deeper.depths[stage] += 1;
        let (_, n, c) = cfg.stage_shape(stage);
        let (p, s, m) = block_macs(n, c, ratio);
        prop_assert_eq!(count_macs(&deeper).total(), report.total() + p + s + m);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        items in prop::collection::vec(("[a-z./_0-9]{1,24}", prop::collection::vec(1usize..4, 0..4)), 0..6),
        seed in any::<u32>(),
    ) {
        let tensors: Vec<CheckpointTensor> = items
            .iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let n: usize = shape.iter().product();
                // Arbitrary bit patterns, NaN payloads included.
                let words: Vec<u32> = (0..n as u32).map(|k| seed.rotate_left(k).wrapping_mul(2654435761).wrapping_add(i as u32)).collect();
                CheckpointTensor { name: name.clone(), shape: shape.clone(), data: words.iter().map(|w| f32::from_bits(*w)).collect() }
            })
            .collect();
        let back = decode(&encode(&tensors).unwrap()).unwrap();
        prop_assert!(bit_identical(&tensors, &back));
    }

    #[test]
    fn pixel_bytes_are_monotone(a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(pixel_byte(lo) <= pixel_byte(hi));
    }

    #[test]
    fn pixelshuffle_is_a_permutation(side in 1usize..6, quarter in 1usize..5) {
        let index = pixelshuffle_index(side, 4 * quarter).unwrap();
        let mut seen = vec![false; index.len()];
        for &i in &index {
            prop_assert!(!seen[i]);
            seen[i] = true;
        }
    }

    #[test]
    fn patchify_inverts(grid in 1usize..4, patch in 1usize..4, pixels in prop::collection::vec(-1.0f64..1.0, 2 * 81 * 3)) {
        let r = grid * patch;
        let img = Tensor::from_vec(pixels[..2 * r * r * 3].to_vec(), &[2, r, r, 3]).unwrap();
        let back = unpatchify(&patchify(&img, grid).unwrap(), grid).unwrap();
        prop_assert_eq!(back.data(), img.data());
        prop_assert_eq!(patchify_index(r, grid).unwrap().len(), r * r * 3);
    }

    #[test]
    fn broadcast_repeats_unit_axes(dims in prop::collection::vec((1usize..4, any::<bool>()), 1..5)) {
        let shape: Vec<usize> = dims.iter().map(|d| d.0).collect();
        let src_shape: Vec<usize> = dims.iter().map(|&(n, unit)| if unit { 1 } else { n }).collect();
        let n: usize = src_shape.iter().product();
        let x = Tensor::from_vec((0..n).map(|v| v as f64).collect(), &src_shape).unwrap();
        let y = x.broadcast_to(&shape).unwrap();
        let total: usize = shape.iter().product();
        for flat in 0..total {
            // Decompose the output index and read the source with unit axes pinned to 0.
            let (mut rem, mut src_index) = (flat, 0);
            let mut stride = 1;
            for d in (0..shape.len()).rev() {
                let i = rem % shape[d];
                rem /= shape[d];
                if src_shape[d] != 1 {
                    src_index += i * stride;
                }
                stride *= src_shape[d];
            }
            prop_assert_eq!(y.data()[flat], src_index as f64);
        }
    }

    #[test]
    fn adam_ignores_zero_gradients(values in prop::collection::vec(-3.0f64..3.0, 1..8), steps in 1usize..5) {
        let mut params = vec![Tensor::from_vec(values.clone(), &[values.len()]).unwrap()];
        let mut state = AdamState::new(&params);
        let zero = vec![Tensor::zeros(&[values.len()])];
        for _ in 0..steps {
            adam_step(&mut params, &zero, &mut state, &AdamConfig::default()).unwrap();
        }
        prop_assert_eq!(params[0].data(), values.as_slice());
    }
}
