use std::path::Path;

use sha2::{Digest, Sha256};

use hyperalign::data::{encode_features, read_features};
use hyperalign::encoder::Modality;

const GOLDEN_SHA256: &str = "8ab874e86d718c25a57895095937adc3e6ae4a91f31b056facbb11aabe27350e";

fn golden_path() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/golden.h2ar"))
}

#[test]
fn golden_file_checksum() {
    let bytes = std::fs::read(golden_path()).unwrap();
    let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(digest, GOLDEN_SHA256);
}

#[test]
fn golden_file_parses_to_pinned_values() {
    let seq = read_features(golden_path(), Modality::Text).unwrap();
    assert_eq!((seq.rows(), seq.cols()), (3, 4));
    let pinned: [f32; 12] = [
        0.0,
        -1.5,
        2.25,
        1024.0,
        0.1,
        -0.0,
        3.0e-5,
        -7.0,
        65504.0,
        1.0 / 3.0,
        -2.0,
        0.5,
    ];
    for (got, want) in seq.data().iter().zip(pinned) {
        assert_eq!(got.to_bits(), (want as f64).to_bits());
    }
}

#[test]
fn writer_reproduces_golden_bytes() {
    let bytes = std::fs::read(golden_path()).unwrap();
    let seq = read_features(golden_path(), Modality::PointCloud).unwrap();
    assert_eq!(encode_features(&seq), bytes);
}
