//! Property tests over the tensor shape algebra, preprocessing, and the
//! interchange format.

use proptest::prelude::*;

use hyperform_core::rng::Rng;
use hyperform_core::skeleton::{block_count, load_jsonl, save_jsonl, split_blocks, synth_dataset};
use hyperform_core::tensor::tape::Tape;
use hyperform_core::Tensor;

fn arb_shape() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..=4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matricize_round_trips_every_mode(shape in arb_shape(), seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let t = Tensor::random_normal(&shape, 1.0, &mut rng);
        for mode in 1..=shape.len() {
            let m = t.matricize(mode).unwrap();
            let cols: usize = shape.iter().enumerate()
                .filter(|(d, _)| *d != mode - 1)
                .map(|(_, &s)| s)
                .product();
            prop_assert_eq!(m.shape(), &[shape[mode - 1], cols]);
            let back = Tensor::dematricize(&m, mode, &shape).unwrap();
            prop_assert_eq!(back, t.clone());
        }
    }

    #[test]
    fn permutation_scatter_then_inverse_is_identity(shape in arb_shape(), seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let t = Tensor::random_normal(&shape, 1.0, &mut rng);
        let mut perm: Vec<usize> = (1..=shape.len()).collect();
        rng.shuffle(&mut perm);
        let p = t.permute_modes(&perm).unwrap();
        let mut inverse = vec![0usize; perm.len()];
        for (k, &dst) in perm.iter().enumerate() {
            inverse[dst - 1] = k + 1;
        }
        let back = p.permute_modes(&inverse).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn softmax_rows_normalize_and_shift_invariant(
        rows in 1usize..5,
        cols in 1usize..6,
        seed in 0u64..1000,
        shift in -50.0f64..50.0,
    ) {
        let mut rng = Rng::new(seed);
        let x = Tensor::random_normal(&[rows, cols], 3.0, &mut rng);
        let mut tape = Tape::new();
        let s = tape.softmax_rows(&x);
        for r in 0..rows {
            let sum: f64 = s.data()[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }
        let shifted = x.map(|v| v + shift);
        let s2 = tape.softmax_rows(&shifted);
        prop_assert!(s.max_abs_diff(&s2) < 1e-9);
    }

    #[test]
    fn concat_then_slice_recovers_parts(
        base in arb_shape(),
        mode_pick in 0usize..4,
        extents in prop::collection::vec(1usize..4, 2..4),
        seed in 0u64..1000,
    ) {
        let mode = mode_pick % base.len() + 1;
        let mut rng = Rng::new(seed);
        let parts: Vec<Tensor> = extents.iter().map(|&e| {
            let mut shape = base.clone();
            shape[mode - 1] = e;
            Tensor::random_normal(&shape, 1.0, &mut rng)
        }).collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        let joined = Tensor::concat(mode, &refs).unwrap();
        let mut offset = 0;
        for part in &parts {
            let len = part.shape()[mode - 1];
            let slice = joined.slice_mode(mode, offset, len).unwrap();
            prop_assert_eq!(&slice, part);
            offset += len;
        }
    }

    #[test]
    fn block_count_matches_split(frames in 1usize..80, t in 1usize..15, s_off in 0usize..15) {
        let t_len = t;
        let stride = (s_off % t_len) + 1;
        let skel = Tensor::zeros(&[frames, 2, 2]);
        let blocked = split_blocks(&skel, t_len, stride).unwrap();
        prop_assert_eq!(blocked.block_count(), block_count(frames, t_len, stride));
        if frames >= t_len {
            prop_assert_eq!(blocked.block_count(), (frames - t_len) / stride + 1);
        } else {
            prop_assert_eq!(blocked.block_count(), 1);
        }
    }
}

#[test]
fn jsonl_round_trip_is_lossless_across_many_datasets() {
    let dir = std::env::temp_dir().join("hyperform_prop_jsonl");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("data.jsonl");
    for seed in 0..100 {
        let data = synth_dataset(2, 1, 6, 5, seed).unwrap();
        save_jsonl(&path, &data).unwrap();
        let back = load_jsonl(&path, 0).unwrap();
        assert_eq!(back, data, "seed {seed}");
    }
    std::fs::remove_file(&path).ok();
}
