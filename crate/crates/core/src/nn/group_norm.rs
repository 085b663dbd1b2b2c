//! Group normalization over `(channels / G) * H * W` elements per sample and
//! group, with biased (population) variance and a per-channel affine.

use super::{NnError, Tensor4};

pub const DEFAULT_GROUPS: usize = 8;
// Small enough that unit-variance groups normalize to variance 1 within 1e-6.
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupNormParams {
    pub num_groups: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl GroupNormParams {
    /// Unit scale, zero shift.
    pub fn new(channels: usize, num_groups: usize) -> Self {
        Self {
            num_groups,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: DEFAULT_EPS,
        }
    }
}

/// Saved forward state for [`groupnorm_backward`].
#[derive(Debug, Clone)]
pub struct GroupNormCache {
    /// Pre-affine normalized input.
    pub x_hat: Tensor4,
    /// Per `(sample, group)` mean, row-major.
    pub mean: Vec<f64>,
    /// Per `(sample, group)` biased variance.
    pub var: Vec<f64>,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
    num_groups: usize,
}

fn check(x: &Tensor4, p: &GroupNormParams) -> Result<(), NnError> {
    let c = x.channels();
    if p.num_groups == 0 || c % p.num_groups != 0 {
        return Err(NnError::GroupMismatch {
            groups: p.num_groups,
            channels: c,
        });
    }
    if p.gamma.len() != c || p.beta.len() != c {
        return Err(NnError::Shape(format!(
            "affine parameters have {}/{} entries for {c} channels",
            p.gamma.len(),
            p.beta.len()
        )));
    }
    if p.eps.is_nan() || p.eps <= 0.0 {
        return Err(NnError::Shape(format!("epsilon must be positive, got {}", p.eps)));
    }
    Ok(())
}

pub fn groupnorm_forward(x: &Tensor4, p: &GroupNormParams) -> Result<(Tensor4, GroupNormCache), NnError> {
    check(x, p)?;
    let [n, c, h, w] = x.shape();
    let g = p.num_groups;
    let group_len = (c / g) * h * w;
    let mut x_hat = Tensor4::zeros(x.shape());
    let mut y = Tensor4::zeros(x.shape());
    let mut mean = Vec::with_capacity(n * g);
    let mut var = Vec::with_capacity(n * g);
    let mut inv_std = Vec::with_capacity(n * g);
    let plane = h * w;

    for (block_idx, block) in x.data().chunks(group_len.max(1)).enumerate().take(n * g) {
        let m = block.iter().sum::<f64>() / group_len as f64;
        let v = block.iter().map(|&e| (e - m) * (e - m)).sum::<f64>() / group_len as f64;
        let is = 1.0 / (v + p.eps).sqrt();
        mean.push(m);
        var.push(v);
        inv_std.push(is);
        let start = block_idx * group_len;
        let first_channel = (block_idx % g) * (c / g);
        for (j, &e) in block.iter().enumerate() {
            let ch = first_channel + j / plane;
            let nv = (e - m) * is;
            x_hat.data_mut()[start + j] = nv;
            y.data_mut()[start + j] = nv * p.gamma[ch] + p.beta[ch];
        }
    }
    Ok((
        y,
        GroupNormCache {
            x_hat,
            mean,
            var,
            inv_std,
            gamma: p.gamma.clone(),
            num_groups: g,
        },
    ))
}

/// Gradients w.r.t. input, gamma and beta.
pub struct GroupNormGrads {
    pub dx: Tensor4,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
}

pub fn groupnorm_backward(cache: &GroupNormCache, upstream: &Tensor4) -> Result<GroupNormGrads, NnError> {
    if upstream.shape() != cache.x_hat.shape() {
        return Err(NnError::ShapeMismatch {
            left: cache.x_hat.shape(),
            right: upstream.shape(),
        });
    }
    let [n, c, h, w] = upstream.shape();
    let g = cache.num_groups;
    let plane = h * w;
    let group_len = (c / g) * plane;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut dx = Tensor4::zeros(upstream.shape());

    for block_idx in 0..n * g {
        let start = block_idx * group_len;
        let first_channel = (block_idx % g) * (c / g);
        let up = &upstream.data()[start..start + group_len];
        let xh = &cache.x_hat.data()[start..start + group_len];
        // dL/dx_hat = upstream * gamma; reduce its mean and its projection onto x_hat.
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for j in 0..group_len {
            let ch = first_channel + j / plane;
            dgamma[ch] += up[j] * xh[j];
            dbeta[ch] += up[j];
            let d = up[j] * cache.gamma[ch];
            sum_d += d;
            sum_dx += d * xh[j];
        }
        let m = group_len as f64;
        let is = cache.inv_std[block_idx];
        let out = &mut dx.data_mut()[start..start + group_len];
        for j in 0..group_len {
            let ch = first_channel + j / plane;
            let d = up[j] * cache.gamma[ch];
            out[j] = is * (d - sum_d / m - xh[j] * sum_dx / m);
        }
    }
    Ok(GroupNormGrads { dx, dgamma, dbeta })
}
