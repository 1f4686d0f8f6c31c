mod common;

use common::*;
use proptest::prelude::*;
use protoseg::surrogate::{corrupt_image, make_unlabeled_batch};
use protoseg::{Error, Image};

#[test]
fn zero_sigma_is_identity() {
    let mut r = rng(1);
    let img = random_image(&mut r, 3, 8, 8);
    assert_eq!(corrupt_image(&img, 0.0, 42).unwrap(), img);
}

#[test]
fn noise_statistics() {
    let img = Image::filled(1, 64, 64, 0.5);
    let out = corrupt_image(&img, 0.1, 7).unwrap();
    let n = out.data.len() as f64;
    let mean = out.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = out
        .data
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    assert!((var.sqrt() - 0.1).abs() < 0.015, "std {}", var.sqrt());
}

#[test]
fn clamped_to_unit_range() {
    let ones = Image::filled(3, 16, 16, 1.0);
    for sigma in [0.05, 0.5, 3.0] {
        let out = corrupt_image(&ones, sigma, 3).unwrap();
        assert!(out.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
    assert!(matches!(
        corrupt_image(&ones, -1.0, 0),
        Err(Error::NegativeSigma(_))
    ));
}

#[test]
fn batch_cardinality_and_determinism() {
    let mut r = rng(2);
    let pool: Vec<Image> = (0..12).map(|_| random_image(&mut r, 3, 8, 8)).collect();
    let b = make_unlabeled_batch(&pool, 5, 1, 0.1, 9).unwrap();
    assert_eq!(b.len(), 5);
    let b = make_unlabeled_batch(&pool, 10, 2, 0.1, 9).unwrap();
    assert_eq!(b.len(), 20);
    for i in 0..10 {
        assert_eq!(b.clean[2 * i], b.clean[2 * i + 1]);
        assert_ne!(b.corrupted[2 * i], b.corrupted[2 * i + 1]);
    }
    assert_eq!(b, make_unlabeled_batch(&pool, 10, 2, 0.1, 9).unwrap());
    assert!(matches!(
        make_unlabeled_batch(&[], 3, 1, 0.1, 0),
        Err(Error::EmptyUnlabeledPool)
    ));
}

#[test]
fn interior_noise_is_centred() {
    let img = Image::filled(1, 64, 64, 0.5);
    let mut total = 0.0;
    let mut count = 0.0;
    for seed in 0..8 {
        let out = corrupt_image(&img, 0.05, seed).unwrap();
        for &v in &out.data {
            total += v as f64 - 0.5;
            count += 1.0;
        }
    }
    // Standard error of the mean is 0.05 / sqrt(32768) ≈ 2.8e-4.
    assert!((total / count).abs() < 1.5e-3);
}

proptest! {
    #[test]
    fn shape_preserved_and_bounded(c in 1usize..4, h in 1usize..10, w in 1usize..10, sigma in 0.0f64..0.3, seed in any::<u64>()) {
        let mut r = rng(seed);
        let img = random_image(&mut r, c, h, w);
        let out = corrupt_image(&img, sigma, seed).unwrap();
        prop_assert_eq!(out.dims(), img.dims());
        for (a, b) in out.data.iter().zip(&img.data) {
            prop_assert!((0.0..=1.0).contains(a));
            prop_assert!(((a - b).abs() as f64) <= 6.0 * sigma + 1e-6);
        }
    }
}
