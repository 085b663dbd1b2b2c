//! End-to-end gradient check on a tiny network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DecoderLayout, NetConfig, Network};
use crate::nn::grad_check::{grad_check, kernel_suite, GradCheckConfig, GradCheckReport};
use crate::nn::Tensor4;

/// The end-to-end tolerance is this multiple of the kernel tolerance.
pub const NETWORK_TOL_FACTOR: f64 = 10.0;

/// Batch, extent, layout and skip setting of one end-to-end check.
#[derive(Debug, Clone, Copy)]
pub struct NetCase {
    pub batch: usize,
    pub extent: (usize, usize),
    pub layout: DecoderLayout,
    pub skip_connections: bool,
}

pub const NETWORK_CASES: [NetCase; 3] = [
    NetCase { batch: 2, extent: (16, 16), layout: DecoderLayout::Stacked, skip_connections: true },
    NetCase { batch: 1, extent: (32, 16), layout: DecoderLayout::Stacked, skip_connections: true },
    NetCase { batch: 1, extent: (16, 16), layout: DecoderLayout::Interleaved, skip_connections: false },
];

/// Checks every parameter gradient of a base-width-8, two-class network
/// against central differences of `<forward(x), u>`.
pub fn network_grad_check(case: NetCase, cfg: &GradCheckConfig) -> GradCheckReport {
    let (h, w) = case.extent;
    let config = NetConfig {
        base_width: 8,
        group_count: 4,
        num_classes: 2,
        input_extent: case.extent,
        layout: case.layout,
        skip_connections: case.skip_connections,
        seed: cfg.seed,
        ..NetConfig::default()
    };
    let net = Network::build(config).expect("tiny config is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let x = Tensor4::randn([case.batch, 3, h, w], &mut rng);
    let u = Tensor4::randn([case.batch, 3, h, w], &mut rng);

    let params = net.params();
    let names: Vec<String> = params.iter().map(|(p, _, _)| p.clone()).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let point: Vec<Vec<f64>> = params.iter().map(|(_, _, v)| v.to_vec()).collect();

    let with = |values: &[Vec<f64>]| {
        let mut n = net.clone();
        n.set_params(values).expect("same layout");
        n
    };
    let layout = match case.layout {
        DecoderLayout::Stacked => "stacked",
        DecoderLayout::Interleaved => "interleaved",
    };
    let skip = if case.skip_connections { "" } else { " no-skip" };
    grad_check(
        &format!("mgtunet {}x3x{h}x{w} {layout}{skip}", case.batch),
        &name_refs,
        &point,
        |values| with(values).forward(&x).expect("valid input").dot(&u),
        |values| {
            let n = with(values);
            let (_, tape) = n.forward_train(&x).expect("valid input");
            n.backward(&tape, &u).expect("matching shapes")
        },
        cfg,
    )
}

/// The kernel suite at `cfg.tol` followed by the end-to-end check at
/// `NETWORK_TOL_FACTOR * cfg.tol`.
pub fn full_suite(cfg: &GradCheckConfig) -> Vec<GradCheckReport> {
    let mut reports = kernel_suite(cfg);
    let net_cfg = GradCheckConfig {
        tol: cfg.tol * NETWORK_TOL_FACTOR,
        ..*cfg
    };
    reports.extend(NETWORK_CASES.iter().map(|&case| network_grad_check(case, &net_cfg)));
    reports
}
