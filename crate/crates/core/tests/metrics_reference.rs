mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxsr::metrics::{mse3d, psnr, ssim3d, SsimParams};
use voxsr::{DType, Dims, Volume};

use common::{mse_reference, ssim_reference};

fn random_volume(dims: Dims, dtype: DType, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f32> = (0..dims.len())
        .map(|_| match dtype {
            DType::F32 => rng.random::<f32>(),
            _ => rng.random_range(0..=dtype.max_value() as u32) as f32,
        })
        .collect();
    Volume::new(dims, dtype, 1.0, values).unwrap()
}

#[test]
fn ssim_matches_scalar_reference_for_every_dtype() {
    for (i, dtype) in [DType::U8, DType::U16, DType::F32].into_iter().enumerate() {
        let dims = Dims::new(16, 16, 16);
        let a = random_volume(dims, dtype, 10 + i as u64);
        let b = random_volume(dims, dtype, 20 + i as u64);
        let got = ssim3d(&a, &b, &SsimParams::for_dtype(dtype)).unwrap();
        let want = ssim_reference(&a, &b, 7, 1.5, dtype.max_value());
        assert!((got - want).abs() <= 1e-6, "{dtype}: {got} vs {want}");
    }
}

#[test]
fn ssim_of_correlated_pair_matches_reference() {
    // a blurred copy has strongly positive structure, unlike independent noise
    let dims = Dims::new(12, 14, 11);
    let a = random_volume(dims, DType::U8, 3);
    let b = voxsr::dataset::degrade(&a, 2).unwrap();
    let a = a.crop_leading(b.dims());
    let got = ssim3d(&a, &b, &SsimParams::for_dtype(DType::U8)).unwrap();
    let want = ssim_reference(&a, &b, 7, 1.5, 255.0);
    assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
    assert!(got > 0.0);
}

#[test]
fn ssim_of_opposite_constants_is_the_luminance_term() {
    let zero = Volume::filled(Dims::cube(8), DType::U8, 0.0).unwrap();
    let full = Volume::filled(Dims::cube(8), DType::U8, 255.0).unwrap();
    let c1 = (0.01f64 * 255.0).powi(2);
    let want = c1 / (255.0 * 255.0 + c1);
    let got = ssim3d(&zero, &full, &SsimParams::for_dtype(DType::U8)).unwrap();
    assert!((got - want).abs() <= 1e-15, "{got} vs {want}");
    assert!((got - 1.0e-4).abs() < 1e-6);
}

#[test]
fn psnr_of_sixteen_level_offset() {
    let a = Volume::filled(Dims::cube(5), DType::U8, 40.0).unwrap();
    let b = Volume::filled(Dims::cube(5), DType::U8, 56.0).unwrap();
    let p = psnr(&a, &b).unwrap();
    // 10·log10(255² / 256)
    assert!((p - 24.0484).abs() < 1e-4, "{p}");
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mse_matches_reference_and_is_symmetric(seed in any::<u64>(), d in 1usize..6, h in 1usize..6, w in 1usize..6) {
        let dims = Dims::new(d, h, w);
        let a = random_volume(dims, DType::U16, seed);
        let b = random_volume(dims, DType::U16, seed ^ 1);
        let m = mse3d(&a, &b).unwrap();
        prop_assert!((m - mse_reference(&a, &b)).abs() <= 1e-6 * m.max(1.0));
        prop_assert_eq!(m, mse3d(&b, &a).unwrap());
        prop_assert_eq!(mse3d(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn ssim_is_symmetric_bounded_and_one_on_the_diagonal(seed in any::<u64>()) {
        let dims = Dims::new(8, 9, 7);
        let a = random_volume(dims, DType::U8, seed);
        let b = random_volume(dims, DType::U8, seed.wrapping_add(1));
        let p = SsimParams::for_dtype(DType::U8);
        let ab = ssim3d(&a, &b, &p).unwrap();
        prop_assert_eq!(ab, ssim3d(&b, &a, &p).unwrap());
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert_eq!(ssim3d(&a, &a, &p).unwrap(), 1.0);
    }
}
