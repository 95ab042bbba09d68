use coatsim::codec::E4M3_DYNAMIC_RANGE;
use coatsim::expand::{
    contract, dynamic_range, expand, expand_quantize, expand_quantize_with, optimal_k, plan, ExpandError,
    ExpansionConfig, ExpansionParams,
};
use coatsim::quant::{QuantGeometry, Quantizer, ScalePrecision};
use coatsim::tensor::mse;
use coatsim::{Fp8Format, Tensor};
use proptest::prelude::*;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// A positive group spanning exactly `range`, with random signs and
/// log-uniform interior magnitudes.
fn group(range: f64, n: usize) -> impl Strategy<Value = Vec<f32>> {
    (
        proptest::collection::vec(0.0f64..1.0, n - 2),
        proptest::collection::vec(any::<bool>(), n),
        -3.0f64..3.0,
    )
        .prop_map(move |(u, signs, shift)| {
            let lo = 10f64.powf(shift);
            let mut mags = vec![lo, lo * range];
            mags.extend(u.iter().map(|t| lo * range.powf(*t)));
            mags.iter()
                .zip(signs)
                .map(|(&m, neg)| if neg { -(m as f32) } else { m as f32 })
                .collect()
        })
}

fn f(x: f32, k: f32) -> f32 {
    let p = [ExpansionParams { k, c: 1.0 }];
    expand(&Tensor::from_vec(vec![x]), QuantGeometry::PerTensor, &p).unwrap().data()[0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    // R(f(X)) = R(X)^k. R^k is kept below 1e70 so the expanded group is
    // representable in f32 after centering by c.
    #[test]
    fn power_law((data, k) in (0.05f64..4.0).prop_flat_map(|lr| {
        let kmax = (70.0 / lr).min(20.0);
        (group(10f64.powf(lr), 16), 1.0f32..kmax as f32)
    })) {
        let x = Tensor::from_vec(data);
        let r = dynamic_range(x.data()).unwrap();
        let c = plan(&x, QuantGeometry::PerTensor, &ExpansionConfig::default()).unwrap()[0].params.c;
        let y = expand(&x, QuantGeometry::PerTensor, &[ExpansionParams { k, c }]).unwrap();
        let ry = dynamic_range(y.data()).unwrap();
        prop_assert!(rel(ry, r.powf(k as f64)) < 1e-6, "R={} k={} got {} want {}", r, k, ry, r.powf(k as f64));
    }

    #[test]
    fn optimal_k_reaches_e4m3_range(data in (0.27f64..5.36).prop_flat_map(|lr| group(10f64.powf(lr), 32))) {
        let x = Tensor::from_vec(data);
        let r = dynamic_range(x.data()).unwrap();
        let k = optimal_k(r).unwrap();
        prop_assert!((1.0..=20.0).contains(&k));
        let c = (x.data().iter().map(|v| v.abs()).fold(f32::MAX, f32::min) as f64
            * x.abs_max() as f64).sqrt() as f32;
        let y = expand(&x, QuantGeometry::PerTensor, &[ExpansionParams { k: k as f32, c }]).unwrap();
        prop_assert!(rel(dynamic_range(y.data()).unwrap(), E4M3_DYNAMIC_RANGE) < 1e-3);
    }

    #[test]
    fn contract_inverts_expand(data in (0.5f64..4.0).prop_flat_map(|lr| group(10f64.powf(lr), 32))) {
        let x = Tensor::from_vec(data);
        let params: Vec<_> = plan(&x, QuantGeometry::PerGroup(16), &ExpansionConfig::default())
            .unwrap()
            .into_iter()
            .map(|p| p.params)
            .collect();
        let y = expand(&x, QuantGeometry::PerGroup(16), &params).unwrap();
        let back = contract(&y, QuantGeometry::PerGroup(16), &params).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            prop_assert!(rel(*b as f64, *a as f64) < 1e-5);
        }
    }
}

// Properties of f(x) = sign(x)|x|^k, 10^4 randomized cases each.
mod transform {
    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn odd(x in -50f32..50.0, k in 1.0f32..20.0) {
            prop_assert_eq!(f(-x, k), -f(x, k));
        }

        #[test]
        fn monotone(a in -3f32..3.0, b in -3f32..3.0, k in 1.0f32..20.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(f(lo, k) <= f(hi, k));
        }

        #[test]
        fn fixes_zero_and_one(k in 1.0f32..20.0) {
            prop_assert_eq!(f(0.0, k), 0.0);
            prop_assert_eq!(f(1.0, k), 1.0);
            prop_assert_eq!(f(-1.0, k), -1.0);
        }

        #[test]
        fn ratio_scale_invariant(x in 0.5f32..2.0, y in 0.5f32..2.0, a in 0.5f32..2.0, k in 1.0f32..20.0) {
            let want = f(x, k) as f64 / f(y, k) as f64;
            let got = f(a * x, k) as f64 / f(a * y, k) as f64;
            // a·x and a·y are rounded to f32 before the transform
            let exact = ((a as f64 * x as f64) / (a as f64 * y as f64)).powf(k as f64);
            prop_assert!(rel(got, exact) < 1e-6 * k as f64);
            prop_assert!(rel(want, (x as f64 / y as f64).powf(k as f64)) < 1e-6);
        }
    }
}

#[test]
fn k_is_clamped() {
    assert_eq!(optimal_k(1.5).unwrap(), 20.0);
    assert_eq!(optimal_k(1e7).unwrap(), 1.0);
    assert!(rel(optimal_k(E4M3_DYNAMIC_RANGE.sqrt()).unwrap(), 2.0) < 1e-12);
    assert!(matches!(optimal_k(1.0), Err(ExpandError::DegenerateRange(_))));
    assert!(matches!(dynamic_range(&[0.0, 0.0]), Err(ExpandError::AllZeroGroup)));
    assert_eq!(dynamic_range(&[0.0, -2.0, 0.5]).unwrap(), 4.0);
}

#[test]
fn expanded_minimum_lands_on_smallest_subnormal() {
    let x = Tensor::from_vec((0..128).map(|i| 1e-3 * 1.05f32.powi(i)).collect());
    let q = Quantizer::new(QuantGeometry::PerGroup(128), Fp8Format::E4M3).with_scale_precision(ScalePrecision::Fp32);
    let s = expand_quantize_with(&x, &q, &ExpansionConfig::default()).unwrap();
    let scaled: Vec<f32> = s.quantized.codes().iter().map(|&b| Fp8Format::E4M3.decode(b)).collect();
    assert_eq!(scaled[0], 2f32.powi(-9));
    assert_eq!(scaled[127], 448.0);
}

#[test]
fn expansion_lowers_second_moment_error() {
    use coatsim::optim::{MomentPolicy, StateFormat};
    use coatsim::synth::{optimizer_states, OptimizerStateSpec};
    let plain = MomentPolicy::new(StateFormat::E4M3, false);
    let expanded = MomentPolicy::new(StateFormat::E4M3, true);
    for seed in 0..20u64 {
        let (_, v) = optimizer_states(&OptimizerStateSpec::new(8192, seed)).unwrap();
        let e_plain = mse(v.data(), &plain.round_trip(v.data()).unwrap());
        let e_exp = mse(v.data(), &expanded.round_trip(v.data()).unwrap());
        assert!(e_exp < e_plain, "seed {seed}: {e_exp:e} vs {e_plain:e}");
    }
}

#[test]
fn zero_group_keeps_identity() {
    let x = Tensor::from_vec(vec![0.0; 8]);
    let p = plan(&x, QuantGeometry::PerTensor, &ExpansionConfig::default()).unwrap();
    assert!(p[0].degenerate);
    assert_eq!(p[0].params, ExpansionParams::IDENTITY);
    let s = expand_quantize(&x, 8, Fp8Format::E4M3).unwrap();
    assert!(s.dequantize().data().iter().all(|&v| v == 0.0));
}

#[test]
fn invalid_params_rejected() {
    let x = Tensor::from_vec(vec![1.0; 4]);
    assert!(expand(&x, QuantGeometry::PerTensor, &[ExpansionParams { k: 0.5, c: 1.0 }]).is_err());
    assert!(expand(&x, QuantGeometry::PerTensor, &[ExpansionParams { k: 2.0, c: 0.0 }]).is_err());
    assert!(expand(&x, QuantGeometry::PerGroup(2), &[ExpansionParams::IDENTITY]).is_err());
}
