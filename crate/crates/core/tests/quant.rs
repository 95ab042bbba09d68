use coatsim::codec::round_bf16;
use coatsim::quant::{dequantize, group_scale_max, GroupMap, QuantGeometry, Quantizer, ScalePrecision};
use coatsim::{Fp8Format, Tensor};
use proptest::prelude::*;

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|g| n % g == 0).collect()
}

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        proptest::collection::vec(prop_oneof![-1e4f32..1e4, -1e-3f32..1e-3, Just(0.0)], r * c)
            .prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
    })
}

fn fp32(geometry: QuantGeometry) -> Quantizer {
    Quantizer::new(geometry, Fp8Format::E4M3).with_scale_precision(ScalePrecision::Fp32)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    // two-stage max (1×G partials, then global) equals one absmax pass
    #[test]
    fn group_scaling_matches_single_pass(t in matrix(6, 48)) {
        let single = t.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        for g in divisors(t.last_dim()) {
            let (partials, global) = group_scale_max(&t, g).unwrap();
            prop_assert_eq!(global.to_bits(), single.to_bits());
            prop_assert_eq!(partials.numel(), t.numel() / g);
        }
    }

    // per-group quantization is per-tensor quantization of each group
    #[test]
    fn per_group_is_per_tensor_on_each_group(t in matrix(4, 32), pick in any::<prop::sample::Index>()) {
        let ds = divisors(t.last_dim());
        let g = ds[pick.index(ds.len())];
        let q = fp32(QuantGeometry::PerGroup(g)).quantize(&t).unwrap();
        for (i, chunk) in t.data().chunks(g).enumerate() {
            let one = fp32(QuantGeometry::PerTensor).quantize(&Tensor::from_vec(chunk.to_vec())).unwrap();
            prop_assert_eq!(one.scales()[0], q.scales()[i]);
            prop_assert_eq!(one.codes(), &q.codes()[i * g..(i + 1) * g]);
        }
    }

    #[test]
    fn round_trip_error_bounded(t in matrix(4, 32), bf16 in any::<bool>()) {
        let p = if bf16 { ScalePrecision::Bf16 } else { ScalePrecision::Fp32 };
        let q = Quantizer::new(QuantGeometry::PerGroup(t.last_dim()), Fp8Format::E4M3)
            .with_scale_precision(p)
            .quantize(&t)
            .unwrap();
        let y = dequantize(&q);
        let map = q.group_map();
        for (i, (&a, &b)) in t.data().iter().zip(y.data()).enumerate() {
            let s = q.scales()[map.group_of(i)];
            let bound = (a.abs() * 2f32.powi(-4)).max(s * 2f32.powi(-10));
            prop_assert!((a - b).abs() <= bound * 1.000_001, "{} -> {} (scale {:e})", a, b, s);
        }
    }

    #[test]
    fn scales_follow_absmax(t in matrix(3, 16)) {
        for (p, round) in [(ScalePrecision::Fp32, false), (ScalePrecision::Bf16, true)] {
            let q = Quantizer::new(QuantGeometry::PerGroup(t.last_dim()), Fp8Format::E4M3)
                .with_scale_precision(p)
                .quantize(&t)
                .unwrap();
            for (row, &s) in t.data().chunks(t.last_dim()).zip(q.scales()) {
                let absmax = row.iter().fold(0.0f32, |m, v| m.max(v.abs()));
                let raw = if absmax == 0.0 { 2f32.powi(-9) } else { absmax / 448.0 };
                let want = if round { round_bf16(raw) } else { raw }.max(f32::MIN_POSITIVE);
                prop_assert_eq!(s, want);
            }
        }
    }
}

#[test]
fn group_scaling_over_ten_thousand_tensors() {
    use rand::Rng;
    let mut rng = coatsim::rng::stream(7, 0);
    for _ in 0..10_000 {
        let rows = rng.random_range(1..5);
        let cols = [16, 24, 32, 48, 64][rng.random_range(0..5)];
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-10.0f32..10.0)).collect();
        let t = Tensor::new(vec![rows, cols], data).unwrap();
        let single = t.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        for g in divisors(cols) {
            assert_eq!(group_scale_max(&t, g).unwrap().1.to_bits(), single.to_bits());
        }
    }
}

#[test]
fn groups_stay_within_rows() {
    let map = GroupMap::new(QuantGeometry::PerGroup(8), &[4, 32]).unwrap();
    for i in 0..128 {
        assert_eq!(map.group_of(i) / 4, i / 32, "element {i}");
    }
    let map = GroupMap::new(QuantGeometry::PerBlock(4), &[8, 8]).unwrap();
    assert_eq!(map.groups(), 4);
    // a block spans four rows
    assert_eq!(map.group_of(0), map.group_of(3 * 8));
    assert_ne!(map.group_of(0), map.group_of(4 * 8));
}

#[test]
fn geometry_errors() {
    let t = Tensor::new(vec![2, 6], vec![1.0; 12]).unwrap();
    assert!(fp32(QuantGeometry::PerGroup(4)).quantize(&t).is_err());
    assert!(fp32(QuantGeometry::PerBlock(4)).quantize(&t).is_err());
    assert!(fp32(QuantGeometry::PerBlock(2)).quantize(&Tensor::from_vec(vec![1.0; 4])).is_err());
    let bad = Tensor::from_vec(vec![1.0, f32::NAN]);
    assert!(fp32(QuantGeometry::PerTensor).quantize(&bad).is_err());
}

#[test]
fn finer_groups_never_worse_on_outlier_rows() {
    // one huge channel per row: a single scale per row wastes the bulk
    let mut data = vec![0.01f32; 4 * 64];
    for r in 0..4 {
        data[r * 64 + 5] = 300.0;
    }
    let t = Tensor::new(vec![4, 64], data).unwrap();
    let err = |g| {
        let q = fp32(QuantGeometry::PerGroup(g)).quantize(&t).unwrap();
        coatsim::tensor::mse(t.data(), dequantize(&q).data())
    };
    assert!(err(16) <= err(64));
    assert!(err(64) > 0.0);
}
