use proptest::prelude::*;
use quip_core::incoherence::{quip, QuipOptions};
use quip_core::linalg::{gaussian_matrix, uniform_matrix};
use quip_core::matio::*;
use quip_core::rng::streams;
use quip_core::{Error, Matrix, SymmetricPsd};

fn small_layer(bits: u32) -> QuantizedLayer {
    let w = gaussian_matrix(4, 4, 1.0, 3, streams::SYNTHETIC);
    let opts = QuipOptions {
        bits,
        seed: 11,
        measure_mu: false,
        ..Default::default()
    };
    quip(&w, &SymmetricPsd::identity(4), &opts).unwrap().layer
}

#[test]
fn qmat_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.qmat");
    let m = uniform_matrix(64, 48, -3.0, 3.0, 1, streams::SYNTHETIC);
    write_matrix(&m, &path).unwrap();
    let back = read_matrix(&path).unwrap();
    assert_eq!(back.shape(), m.shape());
    for (a, b) in back.as_slice().iter().zip(m.as_slice()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    let one = dir.path().join("one.qmat");
    write_matrix(&Matrix::from_rows(&[&[3.5]]), &one).unwrap();
    assert_eq!(std::fs::metadata(&one).unwrap().len(), 49);
}

#[test]
fn unwritable_path_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("missing").join("m.qmat");
    assert!(matches!(write_matrix(&Matrix::identity(2), &path), Err(Error::Io(_))));
    assert!(matches!(read_matrix(&path), Err(Error::Io(_))));
}

#[test]
fn calibration_matches_direct_sum() {
    let x = gaussian_matrix(100, 8, 1.0, 4, streams::SYNTHETIC);
    let h = hessian_from_calibration(&x).unwrap();
    let mut brute = Matrix::zeros(8, 8);
    for r in 0..100 {
        for i in 0..8 {
            for j in 0..8 {
                brute[(i, j)] += x[(r, i)] * x[(r, j)] / 100.0;
            }
        }
    }
    assert!(h.matrix().sub(&brute).unwrap().max_abs() <= 1e-12);
    h.validate_psd().unwrap();
}

#[test]
fn qz_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("l.qz");
    let layer = small_layer(2);
    write_quantized(&layer, &path).unwrap();
    let back = read_quantized(&path).unwrap();
    assert_eq!(back, layer);
    let a = back.dequantize().unwrap();
    let b = layer.dequantize().unwrap();
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn qz_rejects_out_of_range_code() {
    let layer = small_layer(2);
    let mut bytes = encode_quantized(&layer);
    let n = bytes.len();
    bytes[n - 2..].copy_from_slice(&4u16.to_le_bytes());
    assert!(matches!(decode_quantized(&bytes), Err(Error::Format(_))));
}

#[test]
fn qz_rejects_corruption() {
    let bytes = encode_quantized(&small_layer(3));
    assert!(matches!(decode_quantized(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[0] = b'Z';
    assert!(matches!(decode_quantized(&bad), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[7] = 1;
    assert!(matches!(decode_quantized(&bad), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad.push(0);
    assert!(matches!(decode_quantized(&bad), Err(Error::Format(_))));
}

#[test]
fn qz_layout_header() {
    let layer = small_layer(2);
    let bytes = encode_quantized(&layer);
    assert_eq!(&bytes[..6], b"QUIPZ\0");
    assert_eq!(bytes[6], 1);
    assert_eq!(bytes[7], 2);
    assert_eq!(&bytes[8..16], &4u64.to_le_bytes());
    assert_eq!(&bytes[16..24], &4u64.to_le_bytes());
    assert_eq!(&bytes[24..32], &layer.meta().scale.to_le_bytes());
    assert_eq!(&bytes[40..48], &11u64.to_le_bytes());
    // shapes 2x2 for both sides
    for k in 0..4 {
        assert_eq!(&bytes[48 + 4 * k..52 + 4 * k], &2u32.to_le_bytes());
    }
    assert_eq!(bytes.len(), 64 + 4 * 8 + 8 * 4 + 2 * 16);
}

fn finite_f64() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        Just(-0.0),
        Just(f64::MIN_POSITIVE / 4.0),
        Just(f64::MAX),
    ]
}

proptest! {
    #[test]
    fn qmat_bytes_roundtrip(rows in 0usize..6, cols in 0usize..6, seed in prop::collection::vec(finite_f64(), 36)) {
        let m = Matrix::from_vec(rows, cols, seed[..rows * cols].to_vec()).unwrap();
        let back = decode_matrix(&encode_matrix(&m)).unwrap();
        prop_assert_eq!(back.shape(), m.shape());
        for (a, b) in back.as_slice().iter().zip(m.as_slice()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn calibration_always_psd(rows in 1usize..20, cols in 1usize..10, seed in any::<u64>()) {
        let x = gaussian_matrix(rows, cols, 3.0, seed, streams::SYNTHETIC);
        let h = hessian_from_calibration(&x).unwrap();
        prop_assert!(h.validate_psd().is_ok());
    }
}
