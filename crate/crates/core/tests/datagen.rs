mod common;

use common::rng;
use metfa::datagen::{generate_pair, read_csv, sample_batch, write_csv, DomainData, DomainShiftSpec, SUPPORT_PER_CLASS};
use metfa::MetfaError;

/// `(domain, label, features)` for every row of the CSV export.
fn rows_of(data: &DomainData) -> Vec<(String, usize, Vec<f64>)> {
    let mut buf = Vec::new();
    write_csv(data, &mut buf).unwrap();
    let mut reader = csv::Reader::from_reader(buf.as_slice());
    let d = data.source_train.x.cols();
    reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            let x = (0..d).map(|j| r[3 + j].parse().unwrap()).collect();
            (r[0].to_string(), r[2].parse().unwrap(), x)
        })
        .collect()
}

fn column(rows: &[(String, usize, Vec<f64>)], domain: &str, class: usize, dim: usize) -> Vec<f64> {
    rows.iter().filter(|(d, c, _)| d == domain && *c == class).map(|(_, _, x)| x[dim]).collect()
}

fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn ks_statistic_by_hand() {
    assert_eq!(ks_statistic(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
    assert_eq!(ks_statistic(&[0.0, 1.0], &[2.0, 3.0]), 1.0);
    assert_eq!(ks_statistic(&[0.0, 2.0], &[1.0, 3.0]), 0.5);
}

#[test]
fn zero_shift_domains_pass_a_two_sample_ks_test() {
    let spec = DomainShiftSpec::default().without_shift();
    let rows = rows_of(&generate_pair(&spec).unwrap());
    let n = spec.n_source as f64;
    let critical = 1.628 * ((n + n) / (n * n)).sqrt();
    for c in 0..spec.num_classes {
        let s = column(&rows, "source", c, 0);
        let t = column(&rows, "target", c, 0);
        assert_eq!((s.len(), t.len()), (spec.n_source, spec.n_target));
        let d = ks_statistic(&s, &t);
        assert!(d < critical, "class {c}: D = {d:.4} ≥ {critical:.4}");
    }
}

#[test]
fn half_turn_swaps_two_class_means() {
    let spec = DomainShiftSpec {
        num_classes: 2,
        rotation_deg: 180.0,
        translation: 0.0,
        scale: 1.0,
        ..DomainShiftSpec::default()
    };
    let rows = rows_of(&generate_pair(&spec).unwrap());
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let tol = 0.2;
    assert!((mean(column(&rows, "source", 0, 0)) - spec.class_sep).abs() < tol);
    assert!((mean(column(&rows, "target", 0, 0)) + spec.class_sep).abs() < tol);
    assert!((mean(column(&rows, "target", 1, 0)) - spec.class_sep).abs() < tol);
}

#[test]
fn per_class_counts_and_stratified_split() {
    let spec = DomainShiftSpec { n_source: 50, n_target: 30, num_classes: 3, ..DomainShiftSpec::default() };
    let data = generate_pair(&spec).unwrap();
    for c in 0..3 {
        assert_eq!(data.source_train.y.iter().filter(|&&y| y == c).count(), 40);
        assert_eq!(data.source_test.y.iter().filter(|&&y| y == c).count(), 10);
    }
    assert_eq!(data.target_train.x.rows() + data.target_test.x.rows(), 90);
    assert_eq!(data.target_test.x.rows(), 18);
}

#[test]
fn generation_is_a_pure_function_of_the_spec() {
    let spec = DomainShiftSpec { n_source: 40, n_target: 40, ..DomainShiftSpec::default() };
    let a = generate_pair(&spec).unwrap();
    assert_eq!(a, generate_pair(&spec).unwrap());
    let b = generate_pair(&DomainShiftSpec { seed: 1, ..spec }).unwrap();
    assert_ne!(a.source_train.x, b.source_train.x);
}

#[test]
fn csv_round_trip() {
    let data = generate_pair(&DomainShiftSpec { n_source: 20, n_target: 20, ..DomainShiftSpec::default() }).unwrap();
    let mut buf = Vec::new();
    write_csv(&data, &mut buf).unwrap();
    let header = String::from_utf8(buf.clone()).unwrap().lines().next().unwrap().to_string();
    assert!(header.starts_with("domain,split,label,f0,"));
    assert!(header.ends_with(",f15,quarantined"));
    assert_eq!(read_csv(buf.as_slice()).unwrap(), data);
}

#[test]
fn batches_are_class_balanced() {
    let spec = DomainShiftSpec { num_classes: 6, n_source: 20, n_target: 20, ..DomainShiftSpec::default() };
    let data = generate_pair(&spec).unwrap();
    let b = sample_batch(&data, &mut rng(0)).unwrap();
    assert_eq!((b.x_s.rows(), b.x_t.rows(), b.y_t_eval.len()), (30, 30, 30));
    let mut hist = [0; 6];
    for &y in &b.y_s {
        hist[y] += 1;
    }
    assert_eq!(hist, [SUPPORT_PER_CLASS; 6]);
}

#[test]
fn batches_are_reproducible_from_the_rng() {
    let data = generate_pair(&DomainShiftSpec { n_source: 20, n_target: 20, ..DomainShiftSpec::default() }).unwrap();
    let a = sample_batch(&data, &mut rng(5)).unwrap();
    let b = sample_batch(&data, &mut rng(5)).unwrap();
    assert_eq!((a.x_s, a.y_s, a.x_t), (b.x_s, b.y_s, b.x_t));
}

#[test]
fn small_classes_are_rejected() {
    let data = generate_pair(&DomainShiftSpec { n_source: 5, n_target: 50, ..DomainShiftSpec::default() }).unwrap();
    assert!(matches!(sample_batch(&data, &mut rng(0)), Err(MetfaError::InsufficientData(_))));
}
