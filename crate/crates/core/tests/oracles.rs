mod common;

use common::*;
use priorfuse_core::data::Plane;
use priorfuse_core::losses::sobel_magnitude;
use priorfuse_core::metrics;
use proptest::prelude::*;
use rand::Rng;

fn sobel_values(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    sobel_magnitude(&image(p, h, w))
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap()
}

#[test]
fn sobel_matches_direct_convolution() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let img: Vec<f64> = (0..256).map(|_| r.random()).collect();
        let ours = sobel_values(&img, 16, 16);
        let direct = sobel_magnitude_direct(&img, 16, 16);
        for (a, b) in ours.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn sobel_is_exactly_zero_on_constants() {
    for v in [0.0, 0.3, 1.0, 0.123456789] {
        assert!(sobel_values(&[v; 80], 8, 10).iter().all(|&g| g == 0.0));
    }
}

#[test]
fn metrics_match_direct_summation() {
    let mut r = rng(42);
    for _ in 0..20 {
        let (f, a, b) = (random_plane(32, 32, &mut r), random_plane(32, 32, &mut r), random_plane(32, 32, &mut r));
        assert!((metrics::mi(&f, &a, &b).unwrap() - mi_ref(&f, &a, &b)).abs() < 1e-6);
        assert!((metrics::ssim_sum(&f, &a, &b).unwrap() - ssim_sum_ref(&f, &a, &b)).abs() < 1e-6);
        assert!((metrics::psnr(&f, &a, &b).unwrap() - psnr_ref(&f, &a, &b)).abs() < 1e-6);
        assert!((metrics::scd(&f, &a, &b).unwrap() - scd_ref(&f, &a, &b)).abs() < 1e-6);
    }
}

#[test]
fn ssim_of_identical_images_is_exactly_two() {
    let x = random_plane(32, 32, &mut rng(7));
    assert_eq!(metrics::ssim_sum(&x, &x, &x).unwrap(), 2.0);
}

#[test]
fn scd_conventions() {
    let mut r = rng(8);
    let centred = |r: &mut rand_chacha::ChaCha8Rng| {
        Plane::new(32, 32, (0..1024).map(|_| r.random_range(-0.5f32..0.5)).collect()).unwrap()
    };
    let (a, b) = (centred(&mut r), centred(&mut r));
    let f = Plane::new(32, 32, a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect()).unwrap();
    assert!((metrics::scd(&f, &a, &b).unwrap() - 2.0).abs() < 1e-6);

    let flat = Plane::filled(32, 32, 0.4);
    let neg = |p: &Plane| p.data.iter().map(|&v| -(v as f64)).collect::<Vec<f64>>();
    let as64 = |p: &Plane| p.data.iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let expect = pearson_ref(&neg(&b), &as64(&a)) + pearson_ref(&neg(&a), &as64(&b));
    assert!((metrics::scd(&flat, &a, &b).unwrap() - expect).abs() < 1e-6);

    assert_eq!(metrics::scd(&a, &a, &a).unwrap(), 0.0);
}

#[test]
fn psnr_examples() {
    let a = random_plane(16, 16, &mut rng(9));
    let a = Plane::new(16, 16, a.data.iter().map(|v| v * 0.8).collect()).unwrap();
    let f = Plane::new(16, 16, a.data.iter().map(|v| v + 0.1).collect()).unwrap();
    assert!((metrics::psnr(&f, &a, &a).unwrap() - 20.0).abs() < 1e-4);
    assert_eq!(metrics::psnr(&a, &a, &a).unwrap(), f64::INFINITY);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metric_symmetry_in_sources(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let (f, a, b) = (random_plane(16, 16, &mut r), random_plane(16, 16, &mut r), random_plane(16, 16, &mut r));
        prop_assert!((metrics::mi(&f, &a, &b).unwrap() - metrics::mi(&f, &b, &a).unwrap()).abs() < 1e-9);
        prop_assert!((metrics::ssim_sum(&f, &a, &b).unwrap() - metrics::ssim_sum(&f, &b, &a).unwrap()).abs() < 1e-9);
        prop_assert!((metrics::psnr(&f, &a, &b).unwrap() - metrics::psnr(&f, &b, &a).unwrap()).abs() < 1e-9);
        let s = metrics::scd(&f, &a, &b).unwrap();
        prop_assert!((-2.0..=2.0).contains(&s));
    }

    #[test]
    fn sobel_invariant_to_brightness_offset(seed in 0u64..10_000, offset in -0.5f64..0.5) {
        let mut r = rng(seed);
        let img: Vec<f64> = (0..100).map(|_| r.random()).collect();
        let shifted: Vec<f64> = img.iter().map(|v| v + offset).collect();
        let (a, b) = (sobel_values(&img, 10, 10), sobel_values(&shifted, 10, 10));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
