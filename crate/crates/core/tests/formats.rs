use fewshot::{import_csv, load_features, save_features, Error, FeatureDataset, Record};
use std::fmt::Write as _;
use std::fs;

#[test]
fn csv_import_assigns_dense_ids_in_order_of_appearance() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.csv");
    let mut text = String::new();
    for i in 0..100 {
        let label = ["cat", "dog", "emu", "fox", "gnu"][(i * 3) % 5];
        writeln!(text, "{label},{},{},{}", i, i as f64 * 0.5, -(i as f64)).unwrap();
    }
    fs::write(&path, text).unwrap();
    let ds = import_csv(&path).unwrap();
    assert_eq!(ds.len(), 100);
    assert_eq!(ds.dim(), 3);
    assert_eq!(ds.num_classes(), 5);
    for c in 0..5 {
        assert_eq!(ds.class_members(c).len(), 20);
    }
    let names = ds.class_names().unwrap();
    assert_eq!(names[&0], "cat");
    assert_eq!(names[&1], "fox");
}

#[test]
fn csv_header_is_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.csv");
    fs::write(&path, "label,x,y\na,1,2\nb,3,4\n").unwrap();
    let ds = import_csv(&path).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.record(1).vector, vec![3.0, 4.0]);
}

#[test]
fn ragged_csv_row_names_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.csv");
    fs::write(&path, "a,1,2\nb,3\n").unwrap();
    match import_csv(&path) {
        Err(Error::Csv { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected csv error, got {other:?}"),
    }
}

#[test]
fn wrong_magic_names_the_expected_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.bin");
    fs::write(&path, b"XXXX\x01\x00\x00\x00").unwrap();
    let err = load_features(&path).unwrap_err();
    assert!(matches!(err, Error::BadMagic { .. }));
    assert!(err.to_string().contains("CFSL"), "{err}");
}

#[test]
fn truncated_feature_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.bin");
    let ds = FeatureDataset::new(
        2,
        vec![
            Record { class_id: 0, vector: vec![1.0, 2.0] },
            Record { class_id: 1, vector: vec![3.0, 4.0] },
        ],
        None,
    )
    .unwrap();
    save_features(&ds, &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 13]).unwrap();
    assert!(matches!(load_features(&path), Err(Error::Truncated { .. })));
}

#[test]
fn missing_file_is_an_io_error() {
    assert!(matches!(load_features("/nonexistent/f.bin"), Err(Error::Io { .. })));
}
