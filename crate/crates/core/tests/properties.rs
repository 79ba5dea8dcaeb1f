use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tcnn::gpsa::{gated_attention, gpsa_forward, positional_logits, GpsaConfig, GpsaLayer};
use tcnn::tensor::no_grad;
use tcnn::tensor::ops;
use tcnn::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, spread in 0.1f64..60.0) {
        let x = Tensor::<f64>::randn(&[rows, cols], spread, &mut rng(seed));
        let p = ops::softmax(&x, 1).unwrap();
        for row in p.data().chunks(cols) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn delta_kernel_is_identity(seed in any::<u64>(), c in 1usize..4, h in 1usize..7, w in 1usize..7) {
        let x = Tensor::<f64>::randn(&[2, c, h, w], 1.0, &mut rng(seed));
        let mut f = vec![0.0; c * c * 9];
        for o in 0..c {
            f[(o * c + o) * 9 + 4] = 1.0;
        }
        let f = Tensor::from_vec(f, &[c, c, 3, 3]).unwrap();
        let y = ops::conv2d(&x, &f, 1, 1).unwrap();
        prop_assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0, stride in 1usize..3) {
        let mut r = rng(seed);
        let x = Tensor::<f64>::randn(&[2, 3, 6, 5], 1.0, &mut r);
        let y = Tensor::<f64>::randn(&[2, 3, 6, 5], 1.0, &mut r);
        let f = Tensor::<f64>::randn(&[4, 3, 3, 3], 1.0, &mut r);
        let mix = ops::add(&ops::scale(&x, a), &ops::scale(&y, b)).unwrap();
        let lhs = ops::conv2d(&mix, &f, stride, 1).unwrap();
        let cx = ops::conv2d(&x, &f, stride, 1).unwrap();
        let cy = ops::conv2d(&y, &f, stride, 1).unwrap();
        let rhs = ops::add(&ops::scale(&cx, a), &ops::scale(&cy, b)).unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((l - r).abs() < 1e-5);
        }
    }

    #[test]
    fn explicit_padding_matches_conv_padding(seed in any::<u64>(), p in 0usize..3, stride in 1usize..3, k in prop::sample::select(vec![1usize, 3, 5])) {
        let mut r = rng(seed);
        let x = Tensor::<f32>::randn(&[2, 2, 6, 7], 1.0, &mut r);
        let f = Tensor::<f32>::randn(&[3, 2, k, k], 1.0, &mut r);
        prop_assume!(k <= 6 + 2 * p);
        let direct = ops::conv2d(&x, &f, stride, p).unwrap();
        let padded = ops::conv2d(&ops::pad2d(&x, p).unwrap(), &f, stride, 0).unwrap();
        prop_assert_eq!(direct.shape(), padded.shape());
        prop_assert!(direct.data().iter().zip(padded.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn pad_then_crop_is_identity(seed in any::<u64>(), p in 0usize..4, h in 1usize..6, w in 1usize..6) {
        let x = Tensor::<f32>::randn(&[2, 3, h, w], 1.0, &mut rng(seed));
        let back = ops::crop2d(&ops::pad2d(&x, p).unwrap(), p, p, h, w).unwrap();
        prop_assert!(back.same_values(&x));
    }

    #[test]
    fn attention_rows_sum_to_one(seed in any::<u64>(), heads in 1usize..6, h in 1usize..5, w in 1usize..5) {
        let mut r = rng(seed);
        let mut layer = GpsaLayer::<f64>::random(GpsaConfig::new(heads, 3, 4), &mut r).unwrap();
        layer.gate = Tensor::uniform(&[heads], -4.0, 4.0, &mut r);
        layer.alpha_raw = Tensor::uniform(&[heads], -1.0, 3.0, &mut r);
        layer.centers = Tensor::uniform(&[heads, 2], -2.0, 2.0, &mut r);
        let x = Tensor::<f64>::randn(&[h * w, 3], 2.0, &mut r);
        let pl = layer.positional_logits(h, w).unwrap();
        for map in gated_attention(&x, &layer, &pl).unwrap() {
            for row in map.data().chunks(h * w) {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn positional_argmax_is_center(alpha in 0.05f64..50.0, dr in -2i64..3, dc in -2i64..3) {
        let (h, w) = (7usize, 7usize);
        let pl = positional_logits::<f64>(h, w, &[alpha], &[[dr as f64, dc as f64]]).unwrap();
        let q = 3 * w + 3;
        let row: Vec<f64> = (0..h * w).map(|k| pl.at(0, q, k)).collect();
        let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        prop_assert_eq!(best, ((3 + dr) as usize) * w + (3 + dc) as usize);
    }

    #[test]
    fn positional_logits_depend_only_on_offset(alpha in 0.05f64..5.0, cr in -2.0f64..2.0, cc in -2.0f64..2.0, tr in 0usize..3, tc in 0usize..3) {
        let (h, w) = (6usize, 6usize);
        let pl = positional_logits::<f64>(h, w, &[alpha], &[[cr, cc]]).unwrap();
        for qi in 0..h - tr {
            for qj in 0..w - tc {
                for ki in 0..h - tr {
                    for kj in 0..w - tc {
                        let base = pl.at(0, qi * w + qj, ki * w + kj);
                        let moved = pl.at(0, (qi + tr) * w + qj + tc, (ki + tr) * w + kj + tc);
                        prop_assert_eq!(base.to_bits(), moved.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn content_only_attention_is_permutation_equivariant(seed in any::<u64>(), perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut r = rng(seed);
        let mut layer = GpsaLayer::<f64>::random(GpsaConfig::new(3, 4, 5), &mut r).unwrap();
        // σ(−60) is below f64 resolution next to 1 − σ(−60).
        layer.gate = Tensor::full(&[3], -60.0);
        let (h, w) = (3usize, 4usize);
        let l = h * w;
        let x = Tensor::<f64>::randn(&[1, l, 4], 1.0, &mut r);
        let mut perm: Vec<usize> = (0..l).collect();
        perm.shuffle(&mut rng(perm_seed));
        let px: Vec<f64> = perm.iter().flat_map(|&i| x.data()[i * 4..(i + 1) * 4].to_vec()).collect();
        let px = Tensor::from_vec(px, &[1, l, 4]).unwrap();
        let (y, py) = no_grad(|| (gpsa_forward(&x, &layer, h, w).unwrap(), gpsa_forward(&px, &layer, h, w).unwrap()));
        for (row, &src) in perm.iter().enumerate() {
            for c in 0..5 {
                prop_assert!((py.data()[row * 5 + c] - y.data()[src * 5 + c]).abs() < 1e-10);
            }
        }
    }
}
