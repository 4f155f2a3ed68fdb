use latmap::data::npy::{decode, encode, NpyError};
use latmap::data::{load_array_file, save_array_file, synthesize_dataset, DType, SynthSpec};
use latmap::Tensor;
use proptest::prelude::*;

fn replace_bytes(bytes: &[u8], from: &[u8], to: &[u8]) -> Vec<u8> {
    assert_eq!(from.len(), to.len());
    let at = bytes.windows(from.len()).position(|w| w == from).expect("pattern present");
    let mut out = bytes.to_vec();
    out[at..at + to.len()].copy_from_slice(to);
    out
}

proptest! {
    #[test]
    fn f64_round_trip_is_bit_identical(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n as u64).map(|i| f64::from_bits(
            (seed ^ i.wrapping_mul(0x9e37_79b9_7f4a_7c15)).rotate_left(7) & 0xffef_ffff_ffff_ffff,
        )).collect();
        let t = Tensor::new(shape, data).unwrap();
        let bytes = encode(&t, DType::F64).unwrap();
        let (back, dtype) = decode(&bytes).unwrap();
        prop_assert_eq!(dtype, DType::F64);
        prop_assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(encode(&back, DType::F64).unwrap(), bytes);
    }

    #[test]
    fn f32_round_trip_is_bit_identical(values in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..50)) {
        let n = values.len();
        let t = Tensor::new(vec![n], values.iter().map(|&v| v as f64).collect()).unwrap();
        let bytes = encode(&t, DType::F32).unwrap();
        let (back, dtype) = decode(&bytes).unwrap();
        prop_assert_eq!(dtype, DType::F32);
        for (a, b) in back.data().iter().zip(&values) {
            prop_assert_eq!((*a as f32).to_bits(), b.to_bits());
        }
        prop_assert_eq!(encode(&back, DType::F32).unwrap(), bytes);
    }

    #[test]
    fn u8_round_trip_is_exact(values in prop::collection::vec(any::<u8>(), 1..50)) {
        let t = Tensor::new(vec![values.len()], values.iter().map(|&v| v as f64).collect()).unwrap();
        let bytes = encode(&t, DType::U8).unwrap();
        let (back, _) = decode(&bytes).unwrap();
        prop_assert_eq!(back, t.clone());
        prop_assert_eq!(&bytes[bytes.len() - values.len()..], &values[..]);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = decode(&bytes);
    }

    #[test]
    fn corrupted_valid_files_never_panic(pos in 0usize..200, byte in any::<u8>()) {
        let t = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.5);
        let mut bytes = encode(&t, DType::F64).unwrap();
        let p = pos % bytes.len();
        bytes[p] = byte;
        let _ = decode(&bytes);
        bytes.truncate(p);
        prop_assert!(decode(&bytes).is_err());
    }
}

#[test]
fn malformed_headers_give_specified_errors() {
    let good = encode(&Tensor::zeros(&[2, 2]), DType::F64).unwrap();
    let mut bad_magic = good.clone();
    bad_magic[1] = b'X';
    assert!(matches!(decode(&bad_magic), Err(NpyError::BadMagic)));

    let mut bad_version = good.clone();
    bad_version[6] = 9;
    assert!(matches!(decode(&bad_version), Err(NpyError::UnsupportedVersion(9, _))));

    let swapped = replace_bytes(&good, b"<f8", b"<c8");
    assert!(matches!(decode(&swapped), Err(NpyError::UnknownDtype(_))));
    let fortran = replace_bytes(&good, b"False", b"True ");
    assert!(matches!(decode(&fortran), Err(NpyError::UnsupportedOrder)));
    let garbled = replace_bytes(&good, b"'shape'", b"'shope'");
    assert!(matches!(decode(&garbled), Err(NpyError::Header(_))));

    let truncated = &good[..good.len() - 3];
    assert!(matches!(decode(truncated), Err(NpyError::PayloadSize { .. })));
    assert!(matches!(decode(&good[..5]), Err(NpyError::BadMagic | NpyError::Header(_))));
}

#[test]
fn file_round_trip_of_synthetic_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synthesize_dataset(&SynthSpec::default(), 4).unwrap();
    let path = dir.path().join("images.npy");
    save_array_file(&path, ds.images(), DType::F64).unwrap();
    let back = load_array_file(&path).unwrap();
    assert_eq!(back.shape(), &[300, 16, 16, 1]);
    assert_eq!(&back, ds.images());
}
