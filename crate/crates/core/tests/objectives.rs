mod common;

use common::*;
use proptest::prelude::*;
use protoseg::objectives::{
    few_shot_loss, joint_gradients, joint_loss, surrogate_loss, SegmentationTask, PROB_EPS,
};
use protoseg::{BinaryMask, Error, Image, Model, ProbabilityMask};
use rand::Rng;

fn prob_mask(h: usize, w: usize, data: Vec<f32>) -> ProbabilityMask {
    ProbabilityMask {
        height: h,
        width: w,
        data,
    }
}

#[test]
fn few_shot_loss_matches_scalar_loop() {
    let mut r = rng(1);
    for _ in 0..50 {
        let pred: Vec<f32> = (0..16).map(|_| r.random::<f32>()).collect();
        let target = random_mask(&mut r, 4, 4, 0.5);
        let t: Vec<f32> = target.data.iter().map(|&v| v as f32).collect();
        let got = few_shot_loss(&prob_mask(4, 4, pred.clone()), &target).unwrap();
        assert!((got - bce_oracle(&pred, &t)).abs() < 1e-6);
    }
}

#[test]
fn surrogate_loss_matches_scalar_loop() {
    let mut r = rng(2);
    for _ in 0..50 {
        let recon = random_image(&mut r, 1, 2, 2);
        let clean = random_image(&mut r, 1, 2, 2);
        let got = surrogate_loss(&recon, &clean).unwrap();
        assert!((got - bce_oracle(&recon.data, &clean.data)).abs() < 1e-6);
    }
}

#[test]
fn analytic_values() {
    let target = BinaryMask::new(2, 3, vec![1, 0, 1, 1, 0, 0]).unwrap();
    let half = prob_mask(2, 3, vec![0.5; 6]);
    assert!((few_shot_loss(&half, &target).unwrap() - std::f64::consts::LN_2).abs() <= 1e-9);

    let exact = prob_mask(2, 3, target.data.iter().map(|&v| v as f32).collect());
    let perfect = few_shot_loss(&exact, &target).unwrap();
    assert!((perfect - (-(1.0 - PROB_EPS).ln())).abs() < 1e-12);

    let mut r = rng(3);
    let clean = random_image(&mut r, 3, 4, 4);
    let recon = Image::filled(3, 4, 4, 0.5);
    assert!((surrogate_loss(&recon, &clean).unwrap() - std::f64::consts::LN_2).abs() <= 1e-9);

    let binary = Image::new(1, 2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    assert!(surrogate_loss(&binary, &binary).unwrap() < 1e-6);
}

#[test]
fn joint_loss_arithmetic() {
    assert_eq!(joint_loss(0.5, 0.25, 1.0).unwrap(), 0.75);
    assert_eq!(joint_loss(1.0, 0.5, 2.0).unwrap(), 2.0);
    let few = 0.123456789_f64;
    assert_eq!(joint_loss(few, 7.5, 0.0).unwrap().to_bits(), few.to_bits());
    assert!(matches!(
        joint_loss(1.0, 1.0, -0.1),
        Err(Error::NegativeLambda(_))
    ));
}

#[test]
fn minimum_at_target_with_binary_entropy_value() {
    for &x in &[0.0f32, 0.2, 0.5, 0.9, 1.0] {
        let clean = Image::new(1, 1, 1, vec![x]).unwrap();
        let mut best = (f64::INFINITY, 0.0f32);
        for i in 1..1000 {
            let y = i as f32 / 1000.0;
            let l = surrogate_loss(&Image::new(1, 1, 1, vec![y]).unwrap(), &clean).unwrap();
            assert!(l >= 0.0);
            if l < best.0 {
                best = (l, y);
            }
        }
        if x > 0.0 && x < 1.0 {
            assert!(
                (best.1 - x).abs() < 2e-3,
                "argmin {} for target {x}",
                best.1
            );
            let xe = x as f64;
            let entropy = -(xe * xe.ln() + (1.0 - xe) * (1.0 - xe).ln());
            assert!((best.0 - entropy).abs() < 1e-5);
        } else {
            assert!((best.1 - x).abs() <= 1e-3 + f32::EPSILON);
        }
    }
}

#[test]
fn errors() {
    let p = prob_mask(2, 2, vec![0.5; 4]);
    assert!(matches!(
        few_shot_loss(&p, &BinaryMask::zeros(2, 3)),
        Err(Error::ShapeMismatch(_))
    ));
    let a = Image::filled(1, 2, 2, 0.5);
    assert!(matches!(
        surrogate_loss(&a, &Image::filled(3, 2, 2, 0.5)),
        Err(Error::ShapeMismatch(_))
    ));
    let out_of_range = Image::new(1, 2, 2, vec![0.1, -0.2, 0.5, 0.5]).unwrap();
    assert!(matches!(
        surrogate_loss(&a, &out_of_range),
        Err(Error::RangeViolation(_))
    ));
}

#[test]
fn gradients_match_finite_differences() {
    let stats = gradcheck(GRADCHECK_SEED);
    assert!(
        stats.groups_checked.iter().all(|&g| g),
        "every parameter group checked"
    );
    assert!(stats.coordinates <= 2000);
    assert!(
        stats.fraction_within() >= 0.95,
        "{:.4} of {} coordinates within 1e-4",
        stats.fraction_within(),
        stats.coordinates
    );
    assert!(
        stats.worst <= 1e-3,
        "worst relative error {:e}",
        stats.worst
    );
}

#[test]
fn zero_lambda_matches_few_shot_only_gradients() {
    let config = gradcheck_config();
    let model = Model::<f32>::init(&config, 9).unwrap();
    let mut r = rng(9);
    let support = random_image(&mut r, 3, 8, 8);
    let query = random_image(&mut r, 3, 8, 8);
    let mut smask = random_mask(&mut r, 8, 8, 0.5);
    smask.set(0, 0, true);
    let target = random_mask(&mut r, 8, 8, 0.5);
    let supports = [(&support, &smask)];
    let tasks = [SegmentationTask {
        supports: &supports,
        query: &query,
        target: &target,
    }];
    let unl = random_image(&mut r, 3, 8, 8);
    let batch = protoseg::surrogate::corrupt_batch(&[&unl], 1, 0.1, 0).unwrap();
    let with_batch = joint_gradients(&model, &tasks, Some(&batch), 0.0).unwrap();
    let without = joint_gradients(&model, &tasks, None, 0.0).unwrap();
    assert_eq!(with_batch.grads, without.grads);
    assert_eq!(
        with_batch.report.total.to_bits(),
        without.report.few_shot.to_bits()
    );
    assert!(with_batch.grads.denoise.arrays_are_zero());
}

trait ZeroCheck {
    fn arrays_are_zero(&self) -> bool;
}

impl ZeroCheck for protoseg::network::UpDecoder<f32> {
    fn arrays_are_zero(&self) -> bool {
        self.head
            .weight
            .iter()
            .chain(&self.head.bias)
            .all(|&v| v == 0.0)
            && self
                .blocks
                .iter()
                .all(|b| b.conv.weight.iter().all(|&v| v == 0.0))
    }
}

proptest! {
    #[test]
    fn few_shot_loss_is_permutation_equivariant(
        values in prop::collection::vec((0.0f32..1.0, 0u8..2), 16),
        perm in Just((0..16usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let pred: Vec<f32> = values.iter().map(|v| v.0).collect();
        let target: Vec<u8> = values.iter().map(|v| v.1).collect();
        let a = few_shot_loss(&prob_mask(4, 4, pred.clone()), &BinaryMask::new(4, 4, target.clone()).unwrap()).unwrap();
        let pp: Vec<f32> = perm.iter().map(|&i| pred[i]).collect();
        let tp: Vec<u8> = perm.iter().map(|&i| target[i]).collect();
        let b = few_shot_loss(&prob_mask(4, 4, pp), &BinaryMask::new(4, 4, tp).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn losses_are_nonnegative(values in prop::collection::vec((0.0f32..=1.0, 0.0f32..=1.0), 1..32)) {
        let n = values.len();
        let recon = Image::new(1, 1, n, values.iter().map(|v| v.0).collect()).unwrap();
        let clean = Image::new(1, 1, n, values.iter().map(|v| v.1).collect()).unwrap();
        prop_assert!(surrogate_loss(&recon, &clean).unwrap() >= 0.0);
    }

    #[test]
    fn report_total_is_sum(few in 0.0f64..10.0, sur in 0.0f64..10.0, lambda in 0.0f64..5.0) {
        prop_assert!((joint_loss(few, sur, lambda).unwrap() - (few + lambda * sur)).abs() < 1e-12);
    }
}
