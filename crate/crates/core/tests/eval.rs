use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use utnet::eval::{binarize, cdr_error, compute_cdr, pearson, roc_auc, seg_metrics, vertical_diameter, Grade, Mask};
use utnet::{Error, Tensor};

fn rows(h: usize, w: usize, r: std::ops::Range<usize>, c: std::ops::Range<usize>) -> Mask {
    Mask::from_fn(h, w, |y, x| r.contains(&y) && c.contains(&x))
}

fn ellipse(h: usize, w: usize, cy: f64, cx: f64, b: f64, a: f64) -> Mask {
    Mask::from_fn(h, w, |y, x| ((y as f64 - cy) / b).powi(2) + ((x as f64 - cx) / a).powi(2) <= 1.0)
}

#[test]
fn binarize_uses_greater_or_equal() {
    let half = Tensor::<f32>::full([3, 4], 0.5);
    assert_eq!(binarize(&half, 0.5).unwrap().count(), 12);
    assert!(binarize(&Tensor::<f32>::zeros([3, 4]), 0.5).unwrap().is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let map = Tensor::<f64>::from_fn([7, 9], |_| rng.random());
    let m = binarize(&map, 0.3).unwrap();
    for (i, &v) in map.data().iter().enumerate() {
        assert_eq!(m.data()[i] == 1, v >= 0.3);
    }
    assert!(matches!(binarize(&half, 1.0), Err(Error::Domain { .. })));
}

#[test]
fn mask_rejects_non_binary_values() {
    assert!(matches!(Mask::new(1, 3, vec![0, 2, 1]), Err(Error::Contract(_))));
}

#[test]
fn seg_metric_examples() {
    let gt = rows(10, 10, 2..6, 3..8);
    assert_eq!(seg_metrics(&gt, &gt).unwrap().values(), [1.0; 5]);
    let m = seg_metrics(&rows(10, 10, 7..9, 0..2), &gt).unwrap();
    assert_eq!((m.dsc, m.iou, m.sensitivity), (0.0, 0.0, 0.0));
    let e = Mask::empty(10, 10);
    assert_eq!(seg_metrics(&e, &e).unwrap().values(), [1.0; 5]);
}

#[test]
fn vertical_diameter_examples() {
    assert_eq!(vertical_diameter(&rows(9, 9, 4..5, 4..5)), 1);
    assert_eq!(vertical_diameter(&Mask::empty(5, 5)), 0);
    // centred between rows 39 and 40 with semi-axis 20: rows 20..=59
    assert_eq!(vertical_diameter(&ellipse(80, 80, 39.5, 40.0, 20.0, 15.0)), 40);
    let mut two = rows(50, 20, 1..11, 1..5);
    two = Mask::from_fn(50, 20, |y, x| two.get(y, x) || ((15..45).contains(&y) && (10..12).contains(&x)));
    assert_eq!(vertical_diameter(&two), 30);
}

#[test]
fn cdr_examples_and_errors() {
    let disc = rows(120, 40, 10..110, 5..35);
    let cup = rows(120, 40, 40..80, 10..30);
    let r = compute_cdr(&disc, &cup).unwrap();
    assert_eq!((r.d_cup, r.d_disc, r.cdr, r.grade), (40, 100, 0.4, Grade::Normal));
    let same = compute_cdr(&disc, &disc).unwrap();
    assert_eq!((same.cdr, same.grade), (1.0, Grade::OutOfRange));
    assert!(same.grade.is_glaucomatous());
    assert_eq!(Grade::of(0.45), Grade::Mild);
    assert_eq!(Grade::of(0.60), Grade::Severe);
    assert!(matches!(compute_cdr(&Mask::empty(4, 4), &Mask::empty(4, 4)), Err(Error::UndefinedCdr(_))));
}

#[test]
fn cdr_is_mirror_invariant() {
    let disc = ellipse(64, 64, 30.0, 20.0, 18.0, 14.0);
    let cup = ellipse(64, 64, 27.0, 17.0, 7.0, 5.0);
    let a = compute_cdr(&disc, &cup).unwrap();
    let b = compute_cdr(&disc.flip_horizontal(), &cup.flip_horizontal()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn cdr_error_examples() {
    assert_eq!(cdr_error(&[(0.3, 0.3), (0.7, 0.7)]).unwrap(), 0.0);
    assert!((cdr_error(&[(0.4, 0.5), (0.6, 0.55)]).unwrap() - 0.075).abs() < 1e-12);
    assert_eq!(
        cdr_error(&[(0.4, 0.5), (0.6, 0.55)]).unwrap(),
        cdr_error(&[(0.5, 0.4), (0.55, 0.6)]).unwrap()
    );
    assert!(matches!(cdr_error(&[]), Err(Error::Contract(_))));
}

#[test]
fn roc_examples() {
    let labels = [true, true, false, false];
    assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap().auc, 1.0);
    assert_eq!(roc_auc(&[0.5; 4], &labels).unwrap().auc, 0.5);
    assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::Contract(_))));
    let roc = roc_auc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap();
    assert_eq!(roc.points.last(), Some(&(1.0, 1.0)));
}

#[test]
fn pearson_examples() {
    let x = [0.1, 0.5, 0.3, 0.9, 0.7];
    let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
    assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
    assert!(matches!(pearson(&x, &[1.0; 5]), Err(Error::Contract(_))));
}

proptest! {
    #[test]
    fn auc_is_invariant_under_increasing_transforms(
        data in prop::collection::vec((0u8..20, any::<bool>()), 4..40)
    ) {
        let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 20.0).collect();
        let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let a = roc_auc(&scores, &labels).unwrap().auc;
        let moved: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert_eq!(a, roc_auc(&moved, &labels).unwrap().auc);
    }

    #[test]
    fn metrics_lie_in_unit_interval(seed in 0u64..5000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Mask::from_fn(8, 8, |_, _| rng.random_bool(0.5));
        let g = Mask::from_fn(8, 8, |_, _| rng.random_bool(0.5));
        for v in seg_metrics(&p, &g).unwrap().values() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
