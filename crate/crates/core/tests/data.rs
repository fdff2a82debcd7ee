mod common;

use hidtreat::data::{load_csv, read_csv, write_csv};
use hidtreat::law::forward_sample;
use hidtreat::rng::stream_rng;
use hidtreat::{ObservedDataset, OutcomeKind};

#[test]
fn csv_round_trip() {
    let mut rng = stream_rng(1, 0);
    let law = common::random_law(&mut rng, OutcomeKind::Categorical(3), 2);
    let (data, _) = forward_sample(&law, 50, &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    write_csv(&path, &data).unwrap();
    let back = load_csv(&path, OutcomeKind::Categorical(3)).unwrap();
    assert_eq!(back, data);
}

#[test]
fn forward_sampling_is_reproducible() {
    let mut rng = stream_rng(2, 0);
    let law = common::random_law(&mut rng, OutcomeKind::Binary, 3);
    let a = forward_sample(&law, 200, &mut stream_rng(9, 4)).unwrap();
    let b = forward_sample(&law, 200, &mut stream_rng(9, 4)).unwrap();
    let c = forward_sample(&law, 200, &mut stream_rng(9, 5)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
}

#[test]
fn bad_rows_name_their_line() {
    let text = "y,a,z,x1\n1,0,1,0.5\n1,2,1,0.5\n";
    let err = read_csv(text.as_bytes(), OutcomeKind::Binary).unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");
    let text = "y,a,z,x1\n0.5,0,1,0.5\n";
    assert!(read_csv(text.as_bytes(), OutcomeKind::Binary).is_err());
    let text = "y,a,z\n0.5,0,1\n1.5,1,0\n";
    let d = read_csv(text.as_bytes(), OutcomeKind::Continuous).unwrap();
    assert_eq!((d.n(), d.d()), (2, 0));
}

#[test]
fn covariate_selection_keeps_rows() {
    let d = ObservedDataset::new(OutcomeKind::Binary, vec![0.0, 1.0], vec![0, 1], vec![1, 0], vec![1.0, 2.0, 3.0, 4.0], 2)
        .unwrap();
    let s = d.select_covariates(&[1]).unwrap();
    assert_eq!(s.x(), &[2.0, 4.0]);
    assert!(d.select_covariates(&[2]).is_err());
}
