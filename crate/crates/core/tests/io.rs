use coatsim::expand::{expand_quantize, ExpandedQuantState};
use coatsim::io::{load_expanded, load_quantized, load_tensor, save_expanded, save_quantized, save_tensor};
use coatsim::quant::{QuantGeometry, Quantizer, ScalePrecision};
use coatsim::tensor::TensorError;
use coatsim::{Fp8Format, Tensor};
use proptest::prelude::*;

fn shaped() -> impl Strategy<Value = Tensor> {
    (1usize..5, 1usize..5, 1usize..4).prop_flat_map(|(r, c, g)| {
        let cols = c * 4 * g;
        proptest::collection::vec(-1e3f32..1e3, r * cols).prop_map(move |d| Tensor::new(vec![r, cols], d).unwrap())
    })
}

fn geometry() -> impl Strategy<Value = QuantGeometry> {
    prop_oneof![
        Just(QuantGeometry::PerTensor),
        Just(QuantGeometry::PerGroup(4)),
        Just(QuantGeometry::PerGroup(2)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_round_trip(t in shaped()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        save_tensor(&t, &p).unwrap();
        prop_assert!(load_tensor(&p).unwrap().bitwise_eq(&t));
    }

    #[test]
    fn quantized_round_trip(
        t in shaped(),
        g in geometry(),
        format in prop_oneof![Just(Fp8Format::E4M3), Just(Fp8Format::E5M2), Just(Fp8Format::DE8)],
        fp32 in any::<bool>(),
    ) {
        let p = if fp32 { ScalePrecision::Fp32 } else { ScalePrecision::Bf16 };
        let q = Quantizer::new(g, format).with_scale_precision(p).quantize(&t).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.bin");
        save_quantized(&q, &path).unwrap();
        let back = load_quantized(&path).unwrap();
        prop_assert_eq!(&back, &q);
        prop_assert!(back.dequantize().bitwise_eq(&q.dequantize()));
    }

    #[test]
    fn expanded_round_trip(data in proptest::collection::vec(1e-6f32..1.0, 256)) {
        let s = expand_quantize(&Tensor::from_vec(data), 128, Fp8Format::E4M3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        save_expanded(&s, &path).unwrap();
        let back: ExpandedQuantState = load_expanded(&path).unwrap();
        prop_assert_eq!(&back, &s);
    }
}

#[test]
fn corrupt_records_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::new(vec![2, 4], (0..8).map(|i| i as f32).collect()).unwrap();
    let p = dir.path().join("t.bin");
    save_tensor(&t, &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&p, &bad).unwrap();
    assert!(matches!(load_tensor(&p), Err(TensorError::BadMagic { .. })));

    let mut bad = bytes.clone();
    bad[4] = 9;
    std::fs::write(&p, &bad).unwrap();
    assert!(matches!(load_tensor(&p), Err(TensorError::UnsupportedVersion(9))));

    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_tensor(&p).is_err());

    let mut long = bytes.clone();
    long.extend_from_slice(&[0; 4]);
    std::fs::write(&p, &long).unwrap();
    assert!(load_tensor(&p).is_err());

    // a tensor file is not a quantized record
    std::fs::write(&p, &bytes).unwrap();
    assert!(load_quantized(&p).is_err());
    assert!(load_tensor(dir.path().join("missing")).is_err());
}

#[test]
fn per_block_round_trip() {
    let t = Tensor::new(vec![8, 8], (0..64).map(|i| (i as f32 - 30.0) * 0.37).collect()).unwrap();
    let q = Quantizer::new(QuantGeometry::PerBlock(4), Fp8Format::E4M3).quantize(&t).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.bin");
    save_quantized(&q, &p).unwrap();
    assert_eq!(load_quantized(&p).unwrap(), q);
}
