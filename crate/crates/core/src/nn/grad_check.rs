//! Finite-difference verification of hand-written backward passes.
//!
//! Every op is reduced to a scalar `L = <f(inputs), u>` with a fixed random
//! `u`. For each parameter group the analytic directional derivative
//! `<dL/dθ, v>` is compared with the central difference
//! `(L(θ + h v) - L(θ - h v)) / 2h` along random directions `v` with unit-RMS entries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::conv::{conv2d_backward, conv2d_forward, transp_conv2d_backward, transp_conv2d_forward, Conv2dParams};
use super::group_norm::{groupnorm_backward, groupnorm_forward, GroupNormParams, DEFAULT_EPS};
use super::loss::smooth_l1;
use super::mish::{mish_backward, mish_forward};
use super::Tensor4;

/// Denominator floor for the relative error, for directions where both
/// derivatives vanish.
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Random directions probed per parameter group.
    pub probes: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-5,
            probes: 3,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub len: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub op: String,
    pub h: f64,
    pub tol: f64,
    pub groups: Vec<GroupCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Checks `grad` against central differences of `loss` around `point`.
///
/// `loss` and `grad` receive the full list of parameter groups; `grad` must
/// return one gradient buffer per group, matching lengths.
pub fn grad_check<L, G>(
    op: &str,
    names: &[&str],
    point: &[Vec<f64>],
    loss: L,
    grad: G,
    cfg: &GradCheckConfig,
) -> GradCheckReport
where
    L: Fn(&[Vec<f64>]) -> f64,
    G: Fn(&[Vec<f64>]) -> Vec<Vec<f64>>,
{
    assert_eq!(names.len(), point.len(), "one name per parameter group");
    let analytic = grad(point);
    assert_eq!(analytic.len(), point.len(), "one gradient per parameter group");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut groups = Vec::with_capacity(point.len());
    let mut work = point.to_vec();

    for (gi, name) in names.iter().enumerate() {
        let len = point[gi].len();
        assert_eq!(analytic[gi].len(), len, "gradient length for group {name}");
        let mut max_err: f64 = 0.0;
        if len > 0 {
            for _ in 0..cfg.probes {
                let mut dir: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                // Unit RMS entries: each coordinate moves by about h.
                let scale = (len as f64).sqrt() / norm;
                dir.iter_mut().for_each(|v| *v *= scale);

                for (w, (&p, &d)) in work[gi].iter_mut().zip(point[gi].iter().zip(&dir)) {
                    *w = p + cfg.h * d;
                }
                let plus = loss(&work);
                for (w, (&p, &d)) in work[gi].iter_mut().zip(point[gi].iter().zip(&dir)) {
                    *w = p - cfg.h * d;
                }
                let minus = loss(&work);
                work[gi].copy_from_slice(&point[gi]);

                let numeric = (plus - minus) / (2.0 * cfg.h);
                let exact: f64 = analytic[gi].iter().zip(&dir).map(|(g, d)| g * d).sum();
                max_err = max_err.max(relative_error(numeric, exact));
            }
        }
        groups.push(GroupCheck {
            name: name.to_string(),
            len,
            max_rel_err: max_err,
        });
    }
    let passed = groups.iter().all(|g| g.max_rel_err <= cfg.tol);
    GradCheckReport {
        op: op.to_string(),
        h: cfg.h,
        tol: cfg.tol,
        groups,
        passed,
    }
}

fn tensor(shape: [usize; 4], data: &[f64]) -> Tensor4 {
    Tensor4::from_vec(shape, data.to_vec()).expect("group length matches shape")
}

fn label(op: &str, shape: [usize; 4]) -> String {
    format!("{op} {}x{}x{}x{}", shape[0], shape[1], shape[2], shape[3])
}

pub fn check_mish(shape: [usize; 4], cfg: &GradCheckConfig) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x = Tensor4::randn(shape, &mut rng).map(|v| 2.0 * v);
    let u = Tensor4::randn(shape, &mut rng);
    grad_check(
        &label("mish", shape),
        &["x"],
        &[x.into_vec()],
        |g| mish_forward(&tensor(shape, &g[0])).dot(&u),
        |g| vec![mish_backward(&tensor(shape, &g[0]), &u).unwrap().into_vec()],
        cfg,
    )
}

pub fn check_groupnorm(shape: [usize; 4], num_groups: usize, cfg: &GradCheckConfig) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = shape[1];
    let x = Tensor4::randn(shape, &mut rng);
    let gamma = Tensor4::randn([1, 1, 1, c], &mut rng).map(|v| 1.0 + 0.5 * v);
    let beta = Tensor4::randn([1, 1, 1, c], &mut rng);
    let u = Tensor4::randn(shape, &mut rng);
    let params = |g: &[Vec<f64>]| GroupNormParams {
        num_groups,
        gamma: g[1].clone(),
        beta: g[2].clone(),
        eps: DEFAULT_EPS,
    };
    grad_check(
        &format!("{} G={num_groups}", label("groupnorm", shape)),
        &["x", "gamma", "beta"],
        &[x.into_vec(), gamma.into_vec(), beta.into_vec()],
        |g| groupnorm_forward(&tensor(shape, &g[0]), &params(g)).unwrap().0.dot(&u),
        |g| {
            let (_, cache) = groupnorm_forward(&tensor(shape, &g[0]), &params(g)).unwrap();
            let grads = groupnorm_backward(&cache, &u).unwrap();
            vec![grads.dx.into_vec(), grads.dgamma, grads.dbeta]
        },
        cfg,
    )
}

/// Geometry of a convolution under test.
#[derive(Debug, Clone, Copy)]
pub struct ConvCase {
    pub input: [usize; 4],
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub fn check_conv2d(case: ConvCase, cfg: &GradCheckConfig) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ConvCase {
        input,
        out_channels,
        kernel,
        stride,
        padding,
    } = case;
    let w_shape = [out_channels, input[1], kernel, kernel];
    let x = Tensor4::randn(input, &mut rng);
    let w = Tensor4::randn(w_shape, &mut rng);
    let b = Tensor4::randn([1, 1, 1, out_channels], &mut rng);
    let params = |g: &[Vec<f64>]| Conv2dParams {
        weight: tensor(w_shape, &g[1]),
        bias: g[2].clone(),
        stride,
        padding,
    };
    let probe = conv2d_forward(&x, &params(&[vec![], w.data().to_vec(), b.data().to_vec()])).unwrap();
    let u = Tensor4::randn(probe.shape(), &mut rng);
    grad_check(
        &format!("{} k={kernel} s={stride} p={padding}", label("conv2d", input)),
        &["x", "weight", "bias"],
        &[x.into_vec(), w.into_vec(), b.into_vec()],
        |g| conv2d_forward(&tensor(input, &g[0]), &params(g)).unwrap().dot(&u),
        |g| {
            let grads = conv2d_backward(&tensor(input, &g[0]), &params(g), &u).unwrap();
            vec![grads.dx.into_vec(), grads.dw.into_vec(), grads.db]
        },
        cfg,
    )
}

pub fn check_transp_conv2d(case: ConvCase, cfg: &GradCheckConfig) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ConvCase {
        input,
        out_channels,
        kernel,
        stride,
        padding,
    } = case;
    let w_shape = [input[1], out_channels, kernel, kernel];
    let x = Tensor4::randn(input, &mut rng);
    let w = Tensor4::randn(w_shape, &mut rng);
    let b = Tensor4::randn([1, 1, 1, out_channels], &mut rng);
    let params = |g: &[Vec<f64>]| Conv2dParams {
        weight: tensor(w_shape, &g[1]),
        bias: g[2].clone(),
        stride,
        padding,
    };
    let probe = transp_conv2d_forward(&x, &params(&[vec![], w.data().to_vec(), b.data().to_vec()])).unwrap();
    let u = Tensor4::randn(probe.shape(), &mut rng);
    grad_check(
        &format!("{} k={kernel} s={stride} p={padding}", label("transp_conv2d", input)),
        &["x", "weight", "bias"],
        &[x.into_vec(), w.into_vec(), b.into_vec()],
        |g| transp_conv2d_forward(&tensor(input, &g[0]), &params(g)).unwrap().dot(&u),
        |g| {
            let grads = transp_conv2d_backward(&tensor(input, &g[0]), &params(g), &u).unwrap();
            vec![grads.dx.into_vec(), grads.dw.into_vec(), grads.db]
        },
        cfg,
    )
}

/// SmoothL1 with residuals kept at least 0.2 away from the `|d| = 1` kink.
pub fn check_smooth_l1(shape: [usize; 4], cfg: &GradCheckConfig) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let target = Tensor4::randn(shape, &mut rng);
    let n = target.len();
    let pred: Vec<f64> = (0..n)
        .map(|i| {
            let magnitude = if rng.random_bool(0.5) {
                rng.random_range(0.05..0.8)
            } else {
                rng.random_range(1.2..3.0)
            };
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            target.data()[i] + sign * magnitude
        })
        .collect();
    grad_check(
        &label("smooth_l1", shape),
        &["pred"],
        &[pred],
        |g| smooth_l1(&tensor(shape, &g[0]), &target).unwrap().0,
        |g| vec![smooth_l1(&tensor(shape, &g[0]), &target).unwrap().1.into_vec()],
        cfg,
    )
}

/// Runs every kernel check on three or more seeded shapes each.
pub fn kernel_suite(cfg: &GradCheckConfig) -> Vec<GradCheckReport> {
    let mut reports = Vec::new();
    for shape in [[2, 3, 4, 4], [1, 2, 5, 3], [3, 1, 2, 6]] {
        reports.push(check_mish(shape, cfg));
    }
    for (shape, groups) in [([2, 4, 3, 3], 1), ([2, 4, 3, 3], 2), ([2, 4, 3, 3], 4), ([1, 8, 2, 3], 8)] {
        reports.push(check_groupnorm(shape, groups, cfg));
    }
    let conv_cases = [
        ConvCase { input: [2, 2, 5, 5], out_channels: 3, kernel: 3, stride: 1, padding: 1 },
        ConvCase { input: [1, 3, 6, 6], out_channels: 2, kernel: 3, stride: 2, padding: 1 },
        ConvCase { input: [2, 2, 4, 5], out_channels: 2, kernel: 1, stride: 1, padding: 0 },
    ];
    for case in conv_cases {
        reports.push(check_conv2d(case, cfg));
    }
    let transp_cases = [
        ConvCase { input: [2, 3, 3, 3], out_channels: 2, kernel: 2, stride: 2, padding: 0 },
        ConvCase { input: [1, 2, 2, 4], out_channels: 3, kernel: 3, stride: 2, padding: 1 },
        ConvCase { input: [2, 2, 3, 3], out_channels: 2, kernel: 3, stride: 1, padding: 0 },
    ];
    for case in transp_cases {
        reports.push(check_transp_conv2d(case, cfg));
    }
    for shape in [[2, 3, 4, 4], [1, 1, 3, 7], [4, 2, 2, 2]] {
        reports.push(check_smooth_l1(shape, cfg));
    }
    reports
}
