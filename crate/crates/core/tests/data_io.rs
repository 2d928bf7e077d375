mod common;

use common::{normal_matrix, rng};
use esuot::data::{
    generate, load_csv, read_csv, resample_label_shift, rotate, save_csv, write_csv, Family, LabelShiftSpec,
    SyntheticSpec, MOONS_CENTER,
};
use esuot::error::Error;
use esuot::Dataset;
use proptest::prelude::*;
use rand::Rng;

fn spec(family: Family, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        family,
        n: 300,
        angle_deg: family.is_rotation().then_some(30.0),
        shift: None,
        noise: 0.1,
        seed,
    }
}

const FAMILIES: [Family; 4] = [
    Family::TwoMoonsRotation,
    Family::GaussianShift,
    Family::GaussianRingShift,
    Family::PortraitsLikeDrift,
];

#[test]
fn csv_round_trip_is_bit_identical() {
    let mut r = rng(3);
    let mut features = normal_matrix(&mut r, 1000, 3, 1e3);
    // awkward magnitudes and values that need all 17 digits
    features[[0, 0]] = 0.1 + 0.2;
    features[[1, 1]] = -1e-300;
    features[[2, 2]] = 123456789.123456789;
    let labels: Vec<usize> = (0..1000).map(|_| r.random_range(0..4)).collect();
    let data = Dataset::new(features, Some(labels), 2, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    save_csv(&data, &path).unwrap();
    let back = load_csv(&path).unwrap();
    assert_eq!(back.labels, data.labels);
    assert_eq!(back.domain_index, 2);
    for (a, b) in back.features.iter().zip(data.features.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn one_row_file_parses() {
    let d = read_csv("f0,f1,label,domain\n0.5,-1.0,1,0\n".as_bytes()).unwrap();
    assert_eq!(d.len(), 1);
    assert_eq!(d.dim(), 2);
    assert_eq!(d.labels().unwrap(), &[1]);
    assert_eq!(d.domain_index, 0);
}

#[test]
fn empty_label_column_gives_unlabeled_dataset() {
    let d = read_csv("f0,label,domain\n0.5,,1\n1.5,,1\n".as_bytes()).unwrap();
    assert!(d.labels.is_none());
    assert!(d.labels().is_err());
}

#[test]
fn malformed_rows_report_their_line() {
    let err = read_csv("f0,f1,label,domain\n0.5,1.0,0,0\n0.5,oops,0,0\n".as_bytes()).unwrap_err();
    match err {
        Error::Parse { line, .. } => assert_eq!(line, 3),
        other => panic!("unexpected {other:?}"),
    }
    assert!(read_csv("x,y\n1,2\n".as_bytes()).is_err());
}

#[test]
fn unlabeled_dataset_round_trips() {
    let mut r = rng(8);
    let data = Dataset::new(normal_matrix(&mut r, 20, 2, 1.0), None, 0, 2).unwrap();
    let mut buf = Vec::new();
    write_csv(&data, &mut buf).unwrap();
    let back = read_csv(buf.as_slice()).unwrap();
    assert!(back.labels.is_none());
    assert_eq!(back.features, data.features);
}

#[test]
fn generators_are_deterministic_and_seed_sensitive() {
    for family in FAMILIES {
        let a = generate(&spec(family, 1)).unwrap();
        let b = generate(&spec(family, 1)).unwrap();
        let c = generate(&spec(family, 2)).unwrap();
        assert_eq!(a, b, "{family}");
        assert_ne!(a.0.features, c.0.features, "{family}");
    }
}

#[test]
fn rotation_preserves_class_counts_and_radii() {
    let (src, tgt) = generate(&spec(Family::TwoMoonsRotation, 4)).unwrap();
    assert_eq!(src.class_counts(), tgt.class_counts());
    let back = rotate(&rotate(&src.features, 30.0, MOONS_CENTER), -30.0, MOONS_CENTER);
    for (a, b) in back.iter().zip(src.features.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gaussian_shift_moves_the_mean() {
    let s = SyntheticSpec {
        family: Family::GaussianShift,
        n: 2000,
        angle_deg: None,
        shift: Some(vec![4.0, 0.0]),
        noise: 0.0,
        seed: 0,
    };
    let (src, tgt) = generate(&s).unwrap();
    let ms = src.features.mean_axis(ndarray::Axis(0)).unwrap();
    let mt = tgt.features.mean_axis(ndarray::Axis(0)).unwrap();
    assert!((mt[0] - ms[0] - 4.0).abs() < 0.15);
    assert!((mt[1] - ms[1]).abs() < 0.15);
}

#[test]
fn label_shift_endpoints_are_single_class() {
    let (_, tgt) = generate(&spec(Family::TwoMoonsRotation, 0)).unwrap();
    for (prior, expect) in [(0.0, 0usize), (1.0, 1usize)] {
        let s = resample_label_shift(&tgt, &LabelShiftSpec { positive_prior: prior, n: 200, seed: 0 }).unwrap();
        assert_eq!(s.len(), 200);
        assert!(s.labels().unwrap().iter().all(|&l| l == expect));
    }
    assert!(resample_label_shift(&tgt, &LabelShiftSpec { positive_prior: 1.5, n: 10, seed: 0 }).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn label_shift_hits_the_rounded_prior(prior in 0.0f64..=1.0, n in 1usize..400, seed in 0u64..50) {
        let (_, tgt) = generate(&spec(Family::TwoMoonsRotation, seed)).unwrap();
        let s = resample_label_shift(&tgt, &LabelShiftSpec { positive_prior: prior, n, seed }).unwrap();
        let pos = s.labels().unwrap().iter().filter(|&&l| l == 1).count();
        prop_assert_eq!(pos, (prior * n as f64).round() as usize);
        prop_assert_eq!(s.len(), n);
    }
}
