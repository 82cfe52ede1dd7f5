use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fredft::conv::{conv2d, ConvSpec};
use fredft::detection::{ciou_loss, iou, synthetic_sample, varifocal_loss, BBox, SyntheticConfig, VarifocalParams};
use fredft::fft::{conjugate_symmetry_error, fft, fft2d, ifft, ifft2d, take_real};
use fredft::fusion::fdffl_routing;
use fredft::oracle::{circular_conv2d, naive_conv2d, naive_dft2d};
use fredft::tensor::{channel_shuffle, shuffle_source, softmax, SoftmaxAxis};
use fredft::{ComplexTensor, Shape, Tensor};

fn rand_tensor(shape: Shape, seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn bbox() -> impl Strategy<Value = BBox> {
    (0.1f64..0.9, 0.1f64..0.9, 0.02f64..0.5, 0.02f64..0.5).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h, 0).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fft_round_trips_any_length(n in 1usize..130, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let re: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let im: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let (fr, fi) = fft(&re, &im);
        let (br, bi) = ifft(&fr, &fi);
        for k in 0..n {
            prop_assert!((br[k] - re[k]).abs() < 1e-9 && (bi[k] - im[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn fft2d_matches_the_direct_sum(h in 1usize..13, w in 1usize..13, seed: u64) {
        let x = ComplexTensor::new(rand_tensor(Shape::new(1, 1, h, w), seed), rand_tensor(Shape::new(1, 1, h, w), seed ^ 1)).unwrap();
        let fast = fredft::fft::fft2d_complex(&x).unwrap();
        let slow = naive_dft2d(&x);
        prop_assert!(fast.re.max_abs_diff(&slow.re).unwrap() < 1e-9);
        prop_assert!(fast.im.max_abs_diff(&slow.im).unwrap() < 1e-9);
    }

    #[test]
    fn parseval_and_symmetry_hold_for_real_maps(h in 1usize..21, w in 1usize..21, seed: u64) {
        let x = rand_tensor(Shape::new(1, 2, h, w), seed);
        let s = fft2d(&x);
        prop_assert!(conjugate_symmetry_error(&s) < 1e-10);
        let e: f64 = x.data().iter().map(|v| v * v).sum();
        let es: f64 = s.re.data().iter().zip(s.im.data()).map(|(a, b)| a * a + b * b).sum::<f64>() / (h * w) as f64;
        prop_assert!((e - es).abs() <= 1e-9 * e.max(1.0));
        let back = ifft2d(&s).unwrap();
        prop_assert!(back.re.max_abs_diff(&x).unwrap() < 1e-9);
        prop_assert!(back.max_abs_imag() < 1e-9);
    }

    #[test]
    fn spectrum_product_is_circular_convolution(h in 1usize..13, w in 1usize..13, seed: u64) {
        let a = rand_tensor(Shape::new(1, 1, h, w), seed);
        let b = rand_tensor(Shape::new(1, 1, h, w), seed.wrapping_add(7));
        let p = fft2d(&a).mul(&fft2d(&b), false).unwrap();
        let via = take_real(&ifft2d(&p).unwrap(), Some(1e-9)).unwrap();
        prop_assert!(via.max_abs_diff(&circular_conv2d(&a, &b).unwrap()).unwrap() < 1e-8);
    }

    #[test]
    fn conv2d_agrees_with_the_direct_loop(cin in 1usize..4, cout in 1usize..4, k in prop::sample::select(vec![1usize, 3, 5]), d in 1usize..3, hw in 3usize..9, seed: u64) {
        let spec = ConvSpec::dilated(cin, cout, k, d);
        let x = rand_tensor(Shape::new(1, cin, hw, hw + 1), seed);
        let wt = rand_tensor(spec.weight_shape(), seed ^ 3);
        let bias: Vec<f64> = (0..cout).map(|i| i as f64 * 0.1).collect();
        let fast = conv2d(&x, &spec, &wt, Some(&bias)).unwrap();
        let slow = naive_conv2d(&x, &wt, Some(&bias), spec.geometry()).unwrap();
        prop_assert!(fast.max_abs_diff(&slow).unwrap() < 1e-10);
    }

    #[test]
    fn channel_shuffle_is_a_permutation(groups in 1usize..5, per in 1usize..5) {
        let c = groups * per;
        let x = Tensor::new(Shape::new(1, c, 1, 1), (0..c).map(|i| i as f64).collect()).unwrap();
        let y = channel_shuffle(&x, groups).unwrap();
        let mut seen: Vec<usize> = y.data().iter().map(|v| *v as usize).collect();
        for (o, &src) in seen.iter().enumerate() {
            prop_assert_eq!(src, shuffle_source(o, c, groups));
        }
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..c).collect::<Vec<_>>());
    }

    #[test]
    fn softmax_rows_are_distributions(c in 1usize..6, h in 1usize..5, w in 1usize..5, seed: u64) {
        let x = rand_tensor(Shape::new(2, c, h, w), seed).scale(20.0);
        let by_c = softmax(&x, SoftmaxAxis::Channel);
        let by_hw = softmax(&x, SoftmaxAxis::Spatial);
        prop_assert!(by_c.data().iter().chain(by_hw.data()).all(|&p| (0.0..=1.0).contains(&p)));
        for n in 0..2 {
            for p in 0..h * w {
                let s: f64 = (0..c).map(|ch| by_c.data()[(n * c + ch) * h * w + p]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
            for ch in 0..c {
                let base = (n * c + ch) * h * w;
                let s: f64 = by_hw.data()[base..base + h * w].iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ciou_is_symmetric_and_zero_only_on_equal_boxes(a in bbox(), b in bbox()) {
        let ab = ciou_loss(&a, &b).unwrap();
        prop_assert!((ab - ciou_loss(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ciou_loss(&a, &a).unwrap().abs() < 1e-10);
        if a != b {
            prop_assert!(ab > 0.0);
        }
        let i = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&i));
    }

    #[test]
    fn varifocal_orders_scores(p in 0.01f64..0.98, dp in 0.001f64..0.01, q in 0.05f64..1.0) {
        let vf = VarifocalParams::default();
        // negatives cost more as the score rises
        prop_assert!(varifocal_loss(p + dp, 0.0, &vf) > varifocal_loss(p, 0.0, &vf));
        // a positive of quality 1 costs less as the score rises
        prop_assert!(varifocal_loss(p + dp, 1.0, &vf) < varifocal_loss(p, 1.0, &vf));
        prop_assert!(varifocal_loss(p, q, &vf) >= 0.0);
    }
}

#[test]
fn fdffl_routing_uses_every_chunk_once() {
    for ce in [3, 6, 9, 12, 30] {
        let mut hits = vec![0; 3 * ce];
        for path in fdffl_routing(ce) {
            assert_eq!(path.len(), 3, "one chunk per branch");
            for (b, r) in path.iter().enumerate() {
                assert!(r.start >= b * ce && r.end <= (b + 1) * ce, "chunk stays inside branch {b}");
                for i in r.clone() {
                    hits[i] += 1;
                }
            }
        }
        assert!(hits.iter().all(|&h| h == 1), "ce {ce}: {hits:?}");
    }
}

#[test]
fn synthetic_samples_are_pure_functions_of_seed_and_index() {
    let cfg = SyntheticConfig::default();
    for i in [0, 5, 1999] {
        let (a, b) = (synthetic_sample(&cfg, i), synthetic_sample(&cfg, i));
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.rgb.data(), b.rgb.data());
        assert_eq!(a.ir.data(), b.ir.data());
    }
    let other = SyntheticConfig { seed: 1, ..cfg.clone() };
    assert_ne!(synthetic_sample(&cfg, 0).rgb.data(), synthetic_sample(&other, 0).rgb.data());
}
