use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BlockKind, MgtError, NetConfig};
use crate::nn::{
    conv2d_backward, conv2d_forward, groupnorm_backward, groupnorm_forward, mish_backward, mish_forward,
    smooth_l1, transp_conv2d_backward, transp_conv2d_forward, Conv2dParams, GroupNormCache, GroupNormParams,
    OptimizerState, Tensor4,
};

/// `conv -> Mish -> GroupNorm`.
#[derive(Debug, Clone, PartialEq)]
struct ConvUnit {
    path: String,
    conv: Conv2dParams,
    norm: GroupNormParams,
}

struct ConvUnitTape {
    input: Tensor4,
    pre_act: Tensor4,
    norm: GroupNormCache,
}

impl ConvUnit {
    fn new(path: String, c_in: usize, c_out: usize, stride: usize, groups: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            path,
            conv: Conv2dParams::init_uniform([c_out, c_in, 3, 3], c_out, c_in * 9, stride, 1, rng),
            norm: GroupNormParams::new(c_out, groups),
        }
    }

    fn forward(&self, x: &Tensor4) -> Result<(Tensor4, ConvUnitTape), MgtError> {
        let pre_act = conv2d_forward(x, &self.conv)?;
        let act = mish_forward(&pre_act);
        let (y, norm) = groupnorm_forward(&act, &self.norm)?;
        Ok((
            y,
            ConvUnitTape {
                input: x.clone(),
                pre_act,
                norm,
            },
        ))
    }

    /// Writes parameter gradients into `grad` and returns the input gradient.
    fn backward(&self, tape: &ConvUnitTape, upstream: &Tensor4, grad: &mut ConvUnit) -> Result<Tensor4, MgtError> {
        let gn = groupnorm_backward(&tape.norm, upstream)?;
        let d_pre = mish_backward(&tape.pre_act, &gn.dx)?;
        let conv = conv2d_backward(&tape.input, &self.conv, &d_pre)?;
        grad.conv.weight = conv.dw;
        grad.conv.bias = conv.db;
        grad.norm.gamma = gn.dgamma;
        grad.norm.beta = gn.dbeta;
        Ok(conv.dx)
    }

    fn visit<'a>(&'a self, out: &mut Vec<(String, Vec<usize>, &'a [f64])>) {
        out.push((format!("{}.conv.weight", self.path), self.conv.weight.shape().to_vec(), self.conv.weight.data()));
        out.push((format!("{}.conv.bias", self.path), vec![self.conv.bias.len()], &self.conv.bias));
        out.push((format!("{}.norm.gamma", self.path), vec![self.norm.gamma.len()], &self.norm.gamma));
        out.push((format!("{}.norm.beta", self.path), vec![self.norm.beta.len()], &self.norm.beta));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.conv.weight.data_mut());
        out.push(&mut self.conv.bias);
        out.push(&mut self.norm.gamma);
        out.push(&mut self.norm.beta);
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvBlock {
    units: [ConvUnit; 2],
}

impl ConvBlock {
    fn new(path: &str, c_in: usize, c_out: usize, groups: usize, rng: &mut ChaCha8Rng) -> Self {
        let first = ConvUnit::new(format!("{path}.0"), c_in, c_out, 1, groups, rng);
        let second = ConvUnit::new(format!("{path}.1"), c_out, c_out, 1, groups, rng);
        Self {
            units: [first, second],
        }
    }

    fn forward(&self, x: &Tensor4) -> Result<(Tensor4, [ConvUnitTape; 2]), MgtError> {
        let (a, t0) = self.units[0].forward(x)?;
        let (b, t1) = self.units[1].forward(&a)?;
        Ok((b, [t0, t1]))
    }

    fn backward(&self, tape: &[ConvUnitTape; 2], upstream: &Tensor4, grad: &mut ConvBlock) -> Result<Tensor4, MgtError> {
        let [g0, g1] = &mut grad.units;
        let d = self.units[1].backward(&tape[1], upstream, g1)?;
        self.units[0].backward(&tape[0], &d, g0)
    }
}

/// `transposed conv 2x2 s2 -> GroupNorm`.
#[derive(Debug, Clone, PartialEq)]
struct TranspUnit {
    path: String,
    conv: Conv2dParams,
    norm: GroupNormParams,
}

struct TranspTape {
    input: Tensor4,
    norm: GroupNormCache,
}

impl TranspUnit {
    fn new(path: String, c_in: usize, c_out: usize, groups: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            path,
            // Each output pixel sees c_in inputs through one kernel tap.
            conv: Conv2dParams::init_uniform([c_in, c_out, 2, 2], c_out, c_in, 2, 0, rng),
            norm: GroupNormParams::new(c_out, groups),
        }
    }

    fn forward(&self, x: &Tensor4) -> Result<(Tensor4, TranspTape), MgtError> {
        let up = transp_conv2d_forward(x, &self.conv)?;
        let (y, norm) = groupnorm_forward(&up, &self.norm)?;
        Ok((
            y,
            TranspTape {
                input: x.clone(),
                norm,
            },
        ))
    }

    fn backward(&self, tape: &TranspTape, upstream: &Tensor4, grad: &mut TranspUnit) -> Result<Tensor4, MgtError> {
        let gn = groupnorm_backward(&tape.norm, upstream)?;
        let conv = transp_conv2d_backward(&tape.input, &self.conv, &gn.dx)?;
        grad.conv.weight = conv.dw;
        grad.conv.bias = conv.db;
        grad.norm.gamma = gn.dgamma;
        grad.norm.beta = gn.dbeta;
        Ok(conv.dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderStage {
    block: ConvBlock,
    pool: ConvUnit,
}

#[derive(Debug, Clone, PartialEq)]
enum DecoderStep {
    /// Upsample; with `skip = Some(stage)` the output is concatenated with
    /// that encoder stage's ConvBlock output.
    Up { unit: TranspUnit, skip: Option<usize> },
    Block(ConvBlock),
}

/// Intermediate state recorded by [`Network::forward_train`].
pub struct Tape {
    encoder: Vec<([ConvUnitTape; 2], ConvUnitTape)>,
    decoder: Vec<DecoderTape>,
    head_input: Tensor4,
}

enum DecoderTape {
    Up { unit: TranspTape, up_channels: usize },
    Block([ConvUnitTape; 2]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetConfig,
    encoder: Vec<EncoderStage>,
    decoder: Vec<DecoderStep>,
    head: Conv2dParams,
}

impl Network {
    /// Builds the network with fan-in scaled uniform weights drawn from
    /// `config.seed`; GroupNorm starts at unit scale and zero shift.
    pub fn build(config: NetConfig) -> Result<Self, MgtError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let g = config.group_count;
        let specs = config.block_specs();
        let mut encoder = Vec::new();
        let mut decoder = Vec::new();
        let mut head = None;
        let mut pending_block: Option<ConvBlock> = None;
        let mut ups = 0;
        for spec in specs {
            let (i, o) = (spec.in_channels, spec.out_channels);
            match spec.kind {
                BlockKind::ConvBlock if encoder.len() < 4 && ups == 0 => {
                    let path = format!("encoder.{}.block", encoder.len());
                    pending_block = Some(ConvBlock::new(&path, i, o, g, &mut rng));
                }
                BlockKind::ConvPool => {
                    let stage = encoder.len();
                    let block = pending_block.take().expect("ConvBlock precedes ConvPool");
                    let pool = ConvUnit::new(format!("encoder.{stage}.pool"), i, o, 2, g, &mut rng);
                    encoder.push(EncoderStage { block, pool });
                }
                BlockKind::TranspConvBlock => {
                    let path = format!("decoder.{}.up", decoder.len());
                    let skip = config.skip_connections.then_some(3 - ups);
                    decoder.push(DecoderStep::Up {
                        unit: TranspUnit::new(path, i, o, g, &mut rng),
                        skip,
                    });
                    ups += 1;
                }
                BlockKind::ConvBlock => {
                    let path = format!("decoder.{}.block", decoder.len());
                    decoder.push(DecoderStep::Block(ConvBlock::new(&path, i, o, g, &mut rng)));
                }
                BlockKind::FinalConv => {
                    head = Some(Conv2dParams::init_uniform([o, i, 1, 1], o, i, 1, 0, &mut rng));
                }
            }
        }
        Ok(Self {
            config,
            encoder,
            decoder,
            head: head.expect("block specs end with the final conv"),
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor4) -> Result<(), MgtError> {
        let (h, w) = self.config.input_extent;
        if x.channels() != self.config.input_channels || x.height() != h || x.width() != w {
            return Err(MgtError::Nn(crate::nn::NnError::Shape(format!(
                "network expects (n, {}, {h}, {w}) input, got {:?}",
                self.config.input_channels,
                x.shape()
            ))));
        }
        Ok(())
    }

    /// Inference pass producing `(n, C + 1, H, W)` logits.
    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4, MgtError> {
        Ok(self.forward_train(x)?.0)
    }

    /// Forward pass that also records what [`Network::backward`] needs.
    pub fn forward_train(&self, x: &Tensor4) -> Result<(Tensor4, Tape), MgtError> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(4);
        let mut enc_tapes = Vec::with_capacity(4);
        let mut h = x.clone();
        for stage in &self.encoder {
            let (a, block_tape) = stage.block.forward(&h)?;
            let (p, pool_tape) = stage.pool.forward(&a)?;
            skips.push(a);
            enc_tapes.push((block_tape, pool_tape));
            h = p;
        }
        let mut dec_tapes = Vec::with_capacity(self.decoder.len());
        for step in &self.decoder {
            match step {
                DecoderStep::Up { unit, skip } => {
                    let (up, tape) = unit.forward(&h)?;
                    let up_channels = up.channels();
                    h = match skip {
                        Some(stage) => Tensor4::concat_channels(&up, &skips[*stage])?,
                        None => up,
                    };
                    dec_tapes.push(DecoderTape::Up { unit: tape, up_channels });
                }
                DecoderStep::Block(block) => {
                    let (y, tape) = block.forward(&h)?;
                    h = y;
                    dec_tapes.push(DecoderTape::Block(tape));
                }
            }
        }
        let out = conv2d_forward(&h, &self.head)?;
        Ok((
            out,
            Tape {
                encoder: enc_tapes,
                decoder: dec_tapes,
                head_input: h,
            },
        ))
    }

    /// A network of the same architecture with every parameter set to zero.
    fn zeros_like(&self) -> Network {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.fill(0.0);
        }
        z
    }

    /// Gradients of `<output, upstream>` w.r.t. every parameter, in
    /// [`Network::params`] order.
    pub fn backward(&self, tape: &Tape, upstream: &Tensor4) -> Result<Vec<Vec<f64>>, MgtError> {
        let mut grad = self.zeros_like();
        let head = conv2d_backward(&tape.head_input, &self.head, upstream)?;
        grad.head.weight = head.dw;
        grad.head.bias = head.db;
        let mut d = head.dx;

        let mut skip_grads: Vec<Option<Tensor4>> = vec![None; self.encoder.len()];
        for ((step, step_tape), grad_step) in self
            .decoder
            .iter()
            .zip(&tape.decoder)
            .zip(grad.decoder.iter_mut())
            .rev()
        {
            match (step, step_tape, grad_step) {
                (DecoderStep::Up { unit, skip }, DecoderTape::Up { unit: t, up_channels }, DecoderStep::Up { unit: g, .. }) => {
                    let d_up = match skip {
                        Some(stage) => {
                            let (d_up, d_skip) = d.split_channels(*up_channels);
                            skip_grads[*stage] = Some(d_skip);
                            d_up
                        }
                        None => d,
                    };
                    d = unit.backward(t, &d_up, g)?;
                }
                (DecoderStep::Block(block), DecoderTape::Block(t), DecoderStep::Block(g)) => {
                    d = block.backward(t, &d, g)?;
                }
                _ => unreachable!("tape recorded by this network"),
            }
        }

        for (((stage, (block_tape, pool_tape)), grad_stage), skip) in self
            .encoder
            .iter()
            .zip(&tape.encoder)
            .zip(grad.encoder.iter_mut())
            .zip(skip_grads)
            .rev()
        {
            let mut d_a = stage.pool.backward(pool_tape, &d, &mut grad_stage.pool)?;
            if let Some(s) = skip {
                d_a.add_assign(&s);
            }
            d = stage.block.backward(block_tape, &d_a, &mut grad_stage.block)?;
        }
        Ok(grad.params().into_iter().map(|(_, _, v)| v.to_vec()).collect())
    }

    /// Mean SmoothL1 loss of the forward output against `targets`.
    pub fn loss(&self, images: &Tensor4, targets: &Tensor4) -> Result<f64, MgtError> {
        Ok(smooth_l1(&self.forward(images)?, targets)?.0)
    }

    /// Mean SmoothL1 loss against `targets` and its parameter gradients.
    pub fn loss_and_grads(&self, images: &Tensor4, targets: &Tensor4) -> Result<(f64, Vec<Vec<f64>>), MgtError> {
        let (out, tape) = self.forward_train(images)?;
        let (loss, d_out) = smooth_l1(&out, targets)?;
        Ok((loss, self.backward(&tape, &d_out)?))
    }

    /// One optimizer step on a batch; returns the loss before the update.
    pub fn train_step(&mut self, images: &Tensor4, targets: &Tensor4, opt: &mut OptimizerState) -> Result<f64, MgtError> {
        let (loss, grads) = self.loss_and_grads(images, targets)?;
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let mut params = self.params_mut();
        opt.step(&mut params, &grad_refs)?;
        Ok(loss)
    }

    /// Every parameter buffer as `(path, shape, values)`, in a fixed order.
    pub fn params(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for stage in &self.encoder {
            for unit in &stage.block.units {
                unit.visit(&mut out);
            }
            stage.pool.visit(&mut out);
        }
        for step in &self.decoder {
            match step {
                DecoderStep::Up { unit, .. } => {
                    out.push((format!("{}.tconv.weight", unit.path), unit.conv.weight.shape().to_vec(), unit.conv.weight.data()));
                    out.push((format!("{}.tconv.bias", unit.path), vec![unit.conv.bias.len()], &unit.conv.bias));
                    out.push((format!("{}.norm.gamma", unit.path), vec![unit.norm.gamma.len()], &unit.norm.gamma));
                    out.push((format!("{}.norm.beta", unit.path), vec![unit.norm.beta.len()], &unit.norm.beta));
                }
                DecoderStep::Block(block) => {
                    for unit in &block.units {
                        unit.visit(&mut out);
                    }
                }
            }
        }
        out.push(("head.weight".into(), self.head.weight.shape().to_vec(), self.head.weight.data()));
        out.push(("head.bias".into(), vec![self.head.bias.len()], &self.head.bias));
        out
    }

    /// Mutable parameter buffers in [`Network::params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for stage in &mut self.encoder {
            for unit in &mut stage.block.units {
                unit.visit_mut(&mut out);
            }
            stage.pool.visit_mut(&mut out);
        }
        for step in &mut self.decoder {
            match step {
                DecoderStep::Up { unit, .. } => {
                    out.push(unit.conv.weight.data_mut());
                    out.push(&mut unit.conv.bias);
                    out.push(&mut unit.norm.gamma);
                    out.push(&mut unit.norm.beta);
                }
                DecoderStep::Block(block) => {
                    for unit in &mut block.units {
                        unit.visit_mut(&mut out);
                    }
                }
            }
        }
        out.push(self.head.weight.data_mut());
        out.push(&mut self.head.bias);
        out
    }

    /// Overwrites all parameters; `values` must follow [`Network::params`] order and lengths.
    pub fn set_params(&mut self, values: &[Vec<f64>]) -> Result<(), MgtError> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(MgtError::Config(format!(
                "{} parameter buffers supplied for {} slots",
                values.len(),
                slots.len()
            )));
        }
        for (i, (slot, v)) in slots.iter_mut().zip(values).enumerate() {
            if slot.len() != v.len() {
                return Err(MgtError::Config(format!(
                    "parameter {i}: {} values for {} slots",
                    v.len(),
                    slot.len()
                )));
            }
            slot.copy_from_slice(v);
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, _, v)| v.len()).sum()
    }

    /// Parameter storage at 4 bytes per scalar, the usual single-precision footprint.
    pub fn param_bytes_f32(&self) -> usize {
        self.param_count() * 4
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(extent: usize) -> NetConfig {
        NetConfig {
            base_width: 4,
            group_count: 2,
            input_extent: (extent, extent),
            seed: 3,
            ..NetConfig::default()
        }
    }

    #[test]
    fn toy_output_shape() {
        let net = Network::build(toy(32)).unwrap();
        let x = Tensor4::randn([1, 3, 32, 32], &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(net.forward(&x).unwrap().shape(), [1, 7, 32, 32]);
    }

    #[test]
    fn rejects_bad_extent_and_groups() {
        let mut cfg = toy(32);
        cfg.input_extent = (100, 96);
        assert!(matches!(Network::build(cfg), Err(MgtError::Config(_))));
        let mut cfg = toy(32);
        cfg.group_count = 8;
        assert!(matches!(Network::build(cfg), Err(MgtError::Config(_))));
        let mut cfg = toy(32);
        cfg.base_width = 6;
        cfg.group_count = 4;
        assert!(matches!(Network::build(cfg), Err(MgtError::Config(_))));
    }

    #[test]
    fn wrong_input_shape() {
        let net = Network::build(toy(16)).unwrap();
        assert!(net.forward(&Tensor4::zeros([1, 3, 32, 32])).is_err());
        assert!(net.forward(&Tensor4::zeros([1, 1, 16, 16])).is_err());
    }

    #[test]
    fn param_paths_are_unique() {
        for layout in [super::super::DecoderLayout::Stacked, super::super::DecoderLayout::Interleaved] {
            let mut cfg = toy(16);
            cfg.layout = layout;
            let net = Network::build(cfg).unwrap();
            let mut paths: Vec<String> = net.params().into_iter().map(|(p, _, _)| p).collect();
            let n = paths.len();
            paths.sort();
            paths.dedup();
            assert_eq!(paths.len(), n);
        }
    }

    #[test]
    fn zero_lr_step_keeps_weights() {
        let mut net = Network::build(toy(16)).unwrap();
        let before = net.clone();
        let x = Tensor4::randn([2, 3, 16, 16], &mut ChaCha8Rng::seed_from_u64(1));
        let t = Tensor4::zeros([2, 7, 16, 16]);
        let loss = net.train_step(&x, &t, &mut OptimizerState::sgd(0.0)).unwrap();
        assert!(loss.is_finite());
        assert_eq!(net, before);
    }
}
