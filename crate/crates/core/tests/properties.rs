use fbk_core::bench::mac_closed_form;
use fbk_core::fb::dense::factor_terms_bounded;
use fbk_core::fb::{
    fb_backward, fb_conv_forward, fb_forward, sample_mask_with, DropFactorMask, FactorInit, FbConvLayer, FbLayerParams,
};
use fbk_core::oracles::{finite_diff_grad, interaction_matrix, leading_spectrum, naive_fb_gated, rel_err};
use fbk_core::rng::{stream, Stream};
use fbk_core::{ConvGeometry, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn instance(c: usize, n: usize, k: usize, batch: usize, seed: u64) -> (FbLayerParams<f64>, Tensor<f64>) {
    let mut rng = stream(seed, Stream::Probe);
    let params = FbLayerParams::init(c, n, k, &FactorInit { factor_std: Some(0.5) }, &mut rng);
    let x = Tensor::from_fn(&[batch, n], |_| rng.random_range(-1.0..1.0));
    (params, x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn factorized_equals_double_sum(c in 1usize..4, n in 1usize..=32, k in 0usize..=8, seed: u64, p in 0.05f64..=1.0, train: bool) {
        let (params, x) = instance(c, n, k, 2, seed);
        let mask = if train {
            sample_mask_with(k, p, &mut stream(seed, Stream::Mask)).unwrap()
        } else {
            DropFactorMask::inference(k, p).unwrap()
        };
        let (y, _) = fb_forward(&x, &params, &mask).unwrap();
        for s in 0..2 {
            let naive = naive_fb_gated(x.outer(s), &params, &mask.gates::<f64>()).unwrap();
            for (a, b) in y.outer(s).iter().zip(&naive) {
                prop_assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn swapping_features_with_their_parameters_is_invisible(n in 2usize..12, k in 0usize..5, seed: u64, i in 0usize..12, j in 0usize..12) {
        let (i, j) = (i % n, j % n);
        let (params, x) = instance(2, n, k, 1, seed);
        let mut swapped = params.clone();
        for row in swapped.weight.data_mut().chunks_mut(n) {
            row.swap(i, j);
        }
        for row in swapped.factors.data_mut().chunks_mut(n) {
            row.swap(i, j);
        }
        let mut xs = x.clone();
        xs.data_mut().swap(i, j);
        let mask = DropFactorMask::identity(k);
        let (a, _) = fb_forward(&x, &params, &mask).unwrap();
        let (b, _) = fb_forward(&xs, &swapped, &mask).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }

    #[test]
    fn pure_quadratic_part_is_nonnegative(n in 1usize..16, k in 0usize..6, seed: u64) {
        let (mut params, x) = instance(3, n, k, 4, seed);
        params.weight.fill_zero_inplace();
        params.bias.fill_zero_inplace();
        let (y, _) = fb_forward(&x, &params, &DropFactorMask::identity(k)).unwrap();
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn keep_all_training_equals_inference(n in 1usize..16, k in 0usize..6, seed: u64) {
        let (params, x) = instance(2, n, k, 3, seed);
        let (a, _) = fb_forward(&x, &params, &DropFactorMask::training(1.0, vec![true; k]).unwrap()).unwrap();
        let (b, _) = fb_forward(&x, &params, &DropFactorMask::inference(k, 1.0).unwrap()).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn inference_is_exact_mask_average(n in 1usize..6, k in 0usize..=6, seed: u64, p in 0.05f64..0.95) {
        let (params, x) = instance(2, n, k, 2, seed);
        let (inf, _) = fb_forward(&x, &params, &DropFactorMask::inference(k, p).unwrap()).unwrap();
        let mut mean = vec![0.0; inf.len()];
        for bits in 0u32..(1 << k) {
            let keep: Vec<bool> = (0..k).map(|t| bits >> t & 1 == 1).collect();
            let kept = keep.iter().filter(|&&b| b).count() as i32;
            let w = p.powi(kept) * (1.0 - p).powi(k as i32 - kept);
            let (y, _) = fb_forward(&x, &params, &DropFactorMask::training(p, keep).unwrap()).unwrap();
            for (m, v) in mean.iter_mut().zip(y.data()) {
                *m += w * v;
            }
        }
        for (a, b) in mean.iter().zip(inf.data()) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn bounded_inputs_bound_factor_terms(n in 1usize..16, k in 1usize..6, seed: u64) {
        let (params, x) = instance(2, n, k, 3, seed);
        let (_, cache) = fb_forward(&x, &params, &DropFactorMask::identity(k)).unwrap();
        prop_assert!(factor_terms_bounded(&params, cache.projections()));
    }

    #[test]
    fn interaction_matrix_is_symmetric_low_rank(n in 4usize..12, k in 1usize..4, seed: u64) {
        let (params, _) = instance(1, n, k, 1, seed);
        let m = interaction_matrix(&params, 0);
        let t = m.transpose2d().unwrap();
        prop_assert_eq!(m.data(), t.data());
        let spectrum = leading_spectrum(&m, k + 1, 300, &mut stream(seed, Stream::Probe)).unwrap();
        prop_assert!(spectrum[k] <= 1e-8 * spectrum[0].max(1.0), "{spectrum:?}");
    }

    #[test]
    fn fbkt_round_trip(shape in prop::collection::vec(1usize..5, 1..4), seed: u64) {
        let mut rng = stream(seed, Stream::Probe);
        let t: Tensor<f64> = Tensor::from_fn(&shape, |_| rng.random_range(-1e6..1e6));
        let h: Tensor<f32> = t.cast();
        prop_assert_eq!(Tensor::<f64>::from_bytes(&t.to_bytes()).unwrap(), t);
        prop_assert_eq!(Tensor::<f32>::from_bytes(&h.to_bytes()).unwrap(), h);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn analytic_gradients_match_finite_differences(k in prop::sample::select(vec![0usize, 1, 5]), seed: u64, train: bool) {
        let (params, x) = instance(2, 5, k, 2, seed);
        let mut rng = stream(seed, Stream::Mask);
        let mask = if train {
            sample_mask_with(k, 0.5, &mut rng).unwrap()
        } else {
            DropFactorMask::inference(k, 0.5).unwrap()
        };
        let probe = Tensor::from_fn(&[2, 2], |_| rng.random_range(-1.0..1.0));
        let (_, cache) = fb_forward(&x, &params, &mask).unwrap();
        let g = fb_backward(&probe, &cache, &params, &mask).unwrap();
        let loss = |x: &Tensor<f64>, p: &FbLayerParams<f64>| fb_forward(x, p, &mask).unwrap().0.dot(&probe).unwrap();

        let fd = finite_diff_grad(|v| loss(&Tensor::new(vec![2, 5], v.to_vec()).unwrap(), &params), x.data(), 1e-4);
        let mut pairs: Vec<(f64, f64)> = g.d_input.data().iter().copied().zip(fd).collect();
        let fd = finite_diff_grad(|v| {
            let mut p = params.clone();
            p.factors.data_mut().copy_from_slice(v);
            loss(&x, &p)
        }, params.factors.data(), 1e-4);
        pairs.extend(g.d_factors.data().iter().copied().zip(fd));
        let fd = finite_diff_grad(|v| {
            let mut p = params.clone();
            p.weight.data_mut().copy_from_slice(v);
            loss(&x, &p)
        }, params.weight.data(), 1e-4);
        pairs.extend(g.d_weight.data().iter().copied().zip(fd));
        for (a, b) in pairs {
            prop_assert!(rel_err(a, b) <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_commutes_with_interior_shifts(seed: u64, kernel in prop::sample::select(vec![1usize, 3]), dy in 0usize..3, dx in 0usize..3) {
        let (h, w) = (7, 7);
        let g = ConvGeometry::new(2, 2, kernel, 1, kernel / 2);
        let mut rng = stream(seed, Stream::Probe);
        let params = FbLayerParams::<f64>::init(2, g.patch_len(), 3, &FactorInit { factor_std: Some(0.5) }, &mut rng);
        let layer = FbConvLayer::new(g, params, 1.0).unwrap();
        let x = Tensor::from_fn(&[1, 2, h, w], |_| rng.random_range(-1.0..1.0));
        let shifted = Tensor::from_fn(&[1, 2, h, w], |i| {
            let (ch, r, c) = (i / (h * w), i / w % h, i % w);
            x.data()[ch * h * w + (r + h - dy) % h * w + (c + w - dx) % w]
        });
        let mask = DropFactorMask::identity(3);
        let (a, _) = fb_conv_forward(&x, &layer, &mask).unwrap();
        let (b, _) = fb_conv_forward(&shifted, &layer, &mask).unwrap();
        // Output positions whose window, before and after the shift, stays
        // clear of both the padding and the wrap-around seam.
        let half = kernel / 2;
        for ch in 0..2 {
            for r in half..h - half - dy {
                for c in half..w - half - dx {
                    let va = a.data()[ch * h * w + r * w + c];
                    let vb = b.data()[ch * h * w + (r + dy) * w + c + dx];
                    prop_assert!((va - vb).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn multiply_adds_are_affine_in_n_and_k() {
    let count = |n: usize, k: usize| {
        let (params, x) = instance(3, n, k, 2, 0);
        fb_forward(&x, &params, &DropFactorMask::identity(k))
            .unwrap()
            .1
            .mac_count() as i64
    };
    let ns = [64, 128, 256, 512, 1024];
    for k in [0, 4, 8] {
        let c: Vec<i64> = ns.iter().map(|&n| count(n, k)).collect();
        // Equal relative spacing in n: c(2n) - c(n) doubles from step to step.
        for w in c.windows(3) {
            assert_eq!(w[2] - w[1], 2 * (w[1] - w[0]));
        }
        for (&n, &m) in ns.iter().zip(&c) {
            assert_eq!(m as u64, mac_closed_form(2, 3, n as u64, k as u64));
        }
    }
    let c: Vec<i64> = (0..6).map(|k| count(32, k)).collect();
    assert!(c.windows(3).all(|w| w[2] - w[1] == w[1] - w[0]));
}
