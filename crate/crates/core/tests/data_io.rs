mod common;

use std::fs;
use std::path::Path;

use fedvb::data::{decode_idx_images, decode_idx_labels, generate_synthetic, load_idx};

fn idx_images(pixels: &[[u8; 9]]) -> Vec<u8> {
    let mut b = vec![0, 0, 0x08, 0x03];
    b.extend_from_slice(&(pixels.len() as u32).to_be_bytes());
    b.extend_from_slice(&3u32.to_be_bytes());
    b.extend_from_slice(&3u32.to_be_bytes());
    for img in pixels {
        b.extend_from_slice(img);
    }
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 0x08, 0x01];
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

const IMAGES: [[u8; 9]; 2] = [
    [0, 255, 0, 51, 102, 153, 204, 255, 1],
    [10, 20, 30, 40, 50, 60, 70, 80, 90],
];

#[test]
fn two_image_fixture_decodes_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    fs::write(&img, idx_images(&IMAGES)).unwrap();
    fs::write(&lab, idx_labels(&[7, 2])).unwrap();
    let d = load_idx(&img, &lab).unwrap();
    assert_eq!(d.dim, 9);
    assert_eq!(d.labels, vec![7, 2]);
    assert_eq!(d.classes, 8);
    let expected: Vec<f64> = IMAGES.iter().flatten().map(|&b| b as f64 / 255.0).collect();
    assert_eq!(d.inputs, expected);
    assert_eq!(d.row(0)[0], 0.0);
    assert_eq!(d.row(0)[1], 1.0);
    assert_eq!(d.row(0)[3], 0.2);
}

#[test]
fn count_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    fs::write(&img, idx_images(&IMAGES)).unwrap();
    fs::write(&lab, idx_labels(&[0, 1, 2])).unwrap();
    let err = load_idx(&img, &lab).unwrap_err().to_string();
    assert!(err.contains('2') && err.contains('3'), "{err}");
}

#[test]
fn bad_magic_and_truncation_are_rejected() {
    let p = Path::new("fixture");
    let mut swapped = idx_images(&IMAGES);
    swapped[3] = 0x01;
    assert!(decode_idx_images(&swapped, p).is_err());
    assert!(decode_idx_labels(&idx_images(&IMAGES), p).is_err());
    let full = idx_images(&IMAGES);
    assert!(decode_idx_images(&full[..full.len() - 1], p).is_err());
    assert!(decode_idx_images(&full[..10], p).is_err());
    assert!(decode_idx_labels(&idx_labels(&[1, 2])[..9], p).is_err());
}

#[test]
fn missing_file_names_the_path() {
    let err = load_idx(
        Path::new("/nonexistent/a.idx"),
        Path::new("/nonexistent/b.idx"),
    )
    .unwrap_err();
    assert!(err.to_string().contains("/nonexistent/a.idx"), "{err}");
}

#[test]
fn synthetic_separable_limit_and_determinism() {
    let d = generate_synthetic(3, 6, 50, 0.0, 1).unwrap();
    assert_eq!(common::nearest_mean_accuracy(&d), 1.0);
    assert_eq!(d, generate_synthetic(3, 6, 50, 0.0, 1).unwrap());
    let all: Vec<usize> = (0..d.len()).collect();
    assert_eq!(d.label_histogram(&all), vec![50; 3]);
    assert!(generate_synthetic(1, 6, 5, 1.0, 0).is_err());
}
