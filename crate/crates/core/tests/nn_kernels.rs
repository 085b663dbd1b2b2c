use nucleiquant::nn::grad_check::{kernel_suite, GradCheckConfig};
use nucleiquant::nn::mish::{mish, mish_derivative};
use nucleiquant::nn::{
    conv2d_forward, conv_output_extent, groupnorm_forward, transp_conv2d_forward, transp_output_extent, Conv2dParams,
    GroupNormParams, Tensor4,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// tanh(ln(1 + e)), 40 significant digits.
const MISH_ONE: f64 = 0.865_098_388_267_310_346_116_233_449_256_312_4;

#[test]
fn mish_point_values() {
    assert_eq!(mish(0.0), 0.0);
    assert!((mish(1.0) - MISH_ONE).abs() <= 1e-9);
    assert!((mish(1.0) - MISH_ONE).abs() <= 1e-15);
    assert!((mish(50.0) - 50.0).abs() <= 1e-9);
    assert!((mish(-1.0) - -0.303_401_461_374_108_9).abs() <= 1e-15);
    assert!((mish(-5.0) - -5.0 * 0.006_715_247_546_032_341).abs() <= 1e-15);
    assert!((mish_derivative(0.0) - 0.6).abs() <= 1e-12);
}

#[test]
fn mish_shape_on_dense_grid() {
    let mut min = f64::INFINITY;
    let mut prev = mish(0.0);
    for i in -20_000..=20_000 {
        let x = i as f64 * 1e-3;
        let y = mish(x);
        min = min.min(y);
        if x > 0.0 {
            assert!(y > prev, "not increasing at {x}");
            prev = y;
        }
    }
    assert!((min - -0.30884).abs() < 1e-4, "minimum {min}");
}

#[test]
fn kernel_gradients_pass() {
    let reports = kernel_suite(&GradCheckConfig::default());
    assert!(reports.len() >= 15);
    for r in &reports {
        assert!(r.passed, "{} max rel err {}", r.op, r.max_rel_err());
    }
}

#[test]
fn groupnorm_normalizes_each_group() {
    // With eps inside the square root the normalized variance is s2 / (s2 + eps),
    // where s2 is the group's biased input variance.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for groups in [1, 2, 4, 8] {
        let x = Tensor4::randn([3, 16, 6, 5], &mut rng);
        let params = GroupNormParams::new(16, groups);
        let (_, cache) = groupnorm_forward(&x, &params).unwrap();
        let per_group = x.len() / (3 * groups);
        for (xs, zs) in x.data().chunks(per_group).zip(cache.x_hat.data().chunks(per_group)) {
            let stats = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                (m, v.iter().map(|z| (z - m).powi(2)).sum::<f64>() / v.len() as f64)
            };
            let (_, s2) = stats(xs);
            let (m, v) = stats(zs);
            assert!(m.abs() <= 1e-10, "G={groups} mean {m}");
            assert!((v - s2 / (s2 + params.eps)).abs() <= 1e-12, "G={groups} var {v}");
        }
    }
}

#[test]
fn extent_table() {
    assert_eq!(conv_output_extent(256, 3, 1, 1), Some(256));
    assert_eq!(conv_output_extent(256, 3, 1, 2), Some(128));
    assert_eq!(transp_output_extent(128, 2, 0, 2), Some(256));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transposed_conv_is_the_adjoint(
        seed in any::<u64>(), n in 1usize..3, c_in in 1usize..4, c_out in 1usize..4,
        k in 1usize..4, s in 1usize..3, p in 0usize..2, extra in 0usize..4,
    ) {
        prop_assume!(p < k);
        // Input extent chosen so the transposed conv lands back on it exactly.
        let i = k + s * (extra + 1) - 2 * p;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv = Conv2dParams::init_uniform([c_out, c_in, k, k], c_out, c_in * k * k, s, p, &mut rng);
        conv.bias.fill(0.0);
        let x = Tensor4::randn([n, c_in, i, i], &mut rng);
        let o = conv_output_extent(i, k, p, s).unwrap();
        let u = Tensor4::randn([n, c_out, o, o], &mut rng);
        let transp = Conv2dParams { bias: vec![0.0; c_in], ..conv.clone() };
        let lhs = conv2d_forward(&x, &conv).unwrap().dot(&u);
        let back = transp_conv2d_forward(&u, &transp).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        let rhs = x.dot(&back);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn conv_extent_law(i in 1usize..300, f in 1usize..8, p in 0usize..4, s in 1usize..4) {
        match conv_output_extent(i, f, p, s) {
            Some(o) => prop_assert_eq!(o, (i + 2 * p - f) / s + 1),
            None => prop_assert!(i + 2 * p < f),
        }
        prop_assert_eq!(transp_output_extent(i, 2, 0, 2), Some(2 * i));
    }
}
