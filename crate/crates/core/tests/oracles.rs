mod common;

use proptest::prelude::*;
use ssprobe::calibration::{apply_temperature, TemperatureModel};
use ssprobe::metrics::{aupr, auroc, ece, fpr_at_95_tpr, mce, BinaryOutcome};
use ssprobe::probing::ProbingConfidence;
use ssprobe::tensor::{argmax_row, ImageBatch, LogitMatrix, Matrix};
use ssprobe::transforms::{apply_task, rotate_quarter, translate_reflect, ProbingTask};

fn check(r: common::Check) {
    match r {
        Ok(detail) => println!("{detail}"),
        Err(detail) => panic!("{detail}"),
    }
}

#[test]
fn metrics_match_brute_force() {
    check(common::metric_oracle_suite(7));
}

#[test]
fn ranking_metrics_ignore_monotone_transforms() {
    check(common::ranking_invariance_suite(11));
}

#[test]
fn analytic_gradients_match_finite_differences() {
    check(common::gradient_suite());
}

#[test]
fn calibration_invariants_hold() {
    check(common::calibration_suite(13));
}

#[test]
fn fusion_never_loses_to_base() {
    check(common::fusion_suite(17));
}

#[test]
fn transform_algebra() {
    check(common::transform_algebra_suite(19));
}

#[test]
fn oracles_agree_on_small_hand_cases() {
    let s = [0.9, 0.8, 0.8, 0.3];
    let l = [true, false, true, false];
    assert_eq!(common::pairwise_auroc(&s, &l), 0.875);
    assert_eq!(common::threshold_counts(&s, &l), vec![(1, 0), (2, 1), (2, 2)]);
    assert_eq!(common::oracle_aupr(&s, &l), 0.5 + 0.5 * (2.0 / 3.0));
    assert_eq!(common::oracle_fpr95(&s, &l), 0.5);
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..80)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(-20i32..20, n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
        .prop_map(|(s, l)| (s.into_iter().map(|v| v as f64 / 8.0).collect(), l))
        .prop_filter("both classes", |(_, l)| l.iter().any(|&v| v) && l.iter().any(|&v| !v))
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn affine_rescaling_keeps_ranking_metrics((s, l) in scored(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let o = BinaryOutcome::new(s.clone(), l.clone()).unwrap();
        let t = BinaryOutcome::new(s.iter().map(|v| a * v + b).collect(), l).unwrap();
        prop_assert!((auroc(&o).unwrap() - auroc(&t).unwrap()).abs() <= 1e-12);
        prop_assert!((aupr(&o).unwrap() - aupr(&t).unwrap()).abs() <= 1e-12);
        prop_assert!((fpr_at_95_tpr(&o).unwrap() - fpr_at_95_tpr(&t).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn auroc_matches_pairwise((s, l) in scored()) {
        let o = BinaryOutcome::new(s.clone(), l.clone()).unwrap();
        prop_assert!((auroc(&o).unwrap() - common::pairwise_auroc(&s, &l)).abs() <= 1e-9);
    }

    #[test]
    fn mce_bounds_ece(c in prop::collection::vec(0.0f64..=1.0, 1..120), seed in any::<u64>(), m in 1usize..30) {
        let ok: Vec<bool> = c.iter().enumerate().map(|(i, _)| (seed >> (i % 64)) & 1 == 1).collect();
        prop_assert!(mce(&c, &ok, m).unwrap() >= ece(&c, &ok, m).unwrap());
    }

    #[test]
    fn temperature_keeps_argmax(
        rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..30),
        a0 in -1.0f64..4.0,
        a1 in -3.0f64..3.0,
    ) {
        let n = rows.len();
        let logits = LogitMatrix::new(Matrix::from_rows(&rows).unwrap()).unwrap();
        let confs = ProbingConfidence::new(vec!["t".into()], vec![(0..n).map(|i| i as f64 / n as f64).collect()]).unwrap();
        let model = TemperatureModel { a0, tasks: confs.tasks.clone(), a: vec![a1] };
        let p = apply_temperature(&logits, &confs, &model).unwrap();
        for (i, r) in rows.iter().enumerate() {
            prop_assert_eq!(argmax_row(r).unwrap(), argmax_row(p.row(i)).unwrap());
        }
    }

    #[test]
    fn quarter_turn_inverse(n in 1usize..7, k in 0u8..4, seed in any::<u32>()) {
        let img: Vec<f32> = (0..n * n).map(|i| ((i as u32).wrapping_mul(seed) % 97) as f32).collect();
        let (once, _, _) = rotate_quarter(&img, 1, n, n, k).unwrap();
        let (back, _, _) = rotate_quarter(&once, 1, n, n, (4 - k) % 4).unwrap();
        prop_assert_eq!(back, img);
    }

    #[test]
    fn translation_keeps_value_range(w in 2usize..8, h in 2usize..8, dx in -7i32..7, dy in -7i32..7, seed in any::<u32>()) {
        prop_assume!((dx.unsigned_abs() as usize) < w && (dy.unsigned_abs() as usize) < h);
        let img: Vec<f32> = (0..w * h).map(|i| ((i as u32).wrapping_mul(seed | 1) % 31) as f32).collect();
        let out = translate_reflect(&img, 1, h, w, dx, dy).unwrap();
        let range = |v: &[f32]| v.iter().fold((f32::MAX, f32::MIN), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        let (lo, hi) = range(&img);
        let (olo, ohi) = range(&out);
        prop_assert!(olo >= lo && ohi <= hi);
    }

    #[test]
    fn task_batches_are_sample_major(n in 1usize..5) {
        let task = ProbingTask::default_translation();
        let batch = ImageBatch::new(n, 1, 9, 9, (0..n * 81).map(|v| (v % 81) as f32 / 81.0).collect()).unwrap();
        let (out, labels) = apply_task(&batch, &task).unwrap();
        prop_assert_eq!(out.len(), n * task.len());
        let want: Vec<usize> = (0..n).flat_map(|_| 0..task.len()).collect();
        prop_assert_eq!(labels, want);
    }
}
