use std::fs;

use fedtp_core::data::{decode_records, load_cifar, CifarVariant, Inputs};
use fedtp_core::Error;

const PIXELS: usize = 3 * 32 * 32;

fn record10(label: u8, fill: u8) -> Vec<u8> {
    let mut r = vec![label];
    r.extend(std::iter::repeat_n(fill, PIXELS));
    r
}

fn record100(coarse: u8, fine: u8, fill: u8) -> Vec<u8> {
    let mut r = vec![coarse, fine];
    r.extend(std::iter::repeat_n(fill, PIXELS));
    r
}

#[test]
fn decodes_cifar10_records() {
    let bytes = [record10(3, 255), record10(9, 0), record10(0, 51)].concat();
    let ds = decode_records(&bytes, CifarVariant::Cifar10).unwrap();
    assert_eq!(ds.labels, [3, 9, 0]);
    assert_eq!(ds.num_classes, 10);
    assert!(ds.coarse.is_none());
    let Inputs::Images {
        channels,
        extent,
        pixels,
    } = &ds.inputs
    else {
        panic!("expected images")
    };
    assert_eq!((*channels, *extent), (3, 32));
    assert_eq!(pixels.len(), 3 * PIXELS);
    assert_eq!(pixels[0], 1.0);
    assert_eq!(pixels[PIXELS], 0.0);
    assert!((pixels[2 * PIXELS] - 0.2).abs() < 1e-15);
}

#[test]
fn decodes_cifar100_with_coarse_labels() {
    let bytes = [record100(19, 99, 10), record100(0, 4, 20)].concat();
    let ds = decode_records(&bytes, CifarVariant::Cifar100).unwrap();
    assert_eq!(ds.labels, [99, 4]);
    assert_eq!(ds.coarse.as_deref(), Some(&[19, 0][..]));
    assert_eq!((ds.num_classes, ds.num_coarse), (100, Some(20)));
}

#[test]
fn rejects_out_of_range_labels_and_ragged_input() {
    assert!(decode_records(&record10(10, 0), CifarVariant::Cifar10).is_err());
    assert!(decode_records(&record100(20, 1, 0), CifarVariant::Cifar100).is_err());
    let mut ragged = record10(1, 0);
    ragged.pop();
    assert!(decode_records(&ragged, CifarVariant::Cifar10).is_err());
}

#[test]
fn wrong_file_size_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("train.bin"), record100(1, 2, 3)).unwrap();
    fs::write(dir.path().join("test.bin"), record100(1, 2, 3)).unwrap();
    let err = load_cifar(dir.path(), CifarVariant::Cifar100).unwrap_err();
    match &err {
        Error::FileSize {
            path,
            expected,
            actual,
        } => {
            assert!(path.ends_with("train.bin"));
            assert_eq!(*expected, 50_000 * 3074);
            assert_eq!(*actual, 3074);
        }
        other => panic!("unexpected {other}"),
    }
    assert!(err.to_string().contains("train.bin"));
}

#[test]
fn missing_directory_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_cifar(&dir.path().join("nope"), CifarVariant::Cifar10)
        .unwrap_err()
        .to_string();
    assert!(err.contains("data_batch_1.bin"), "{err}");
}
