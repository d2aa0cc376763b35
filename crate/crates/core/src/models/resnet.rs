use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{kaiming, Ctx, ModelError, ParamSet, Result, Task, BN_EPS};
use crate::autodiff::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub in_channels: usize,
    pub stem_filters: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub stage_filters: Vec<usize>,
    pub blocks_per_stage: usize,
    pub block_kernel: usize,
    pub num_outputs: usize,
    pub task: Task,
}

impl ResNetConfig {
    pub fn desk(in_channels: usize, num_outputs: usize, task: Task) -> Self {
        ResNetConfig {
            in_channels,
            stem_filters: 16,
            stem_kernel: 7,
            stem_stride: 2,
            pool_kernel: 3,
            pool_stride: 2,
            stage_filters: vec![16, 32, 64],
            blocks_per_stage: 2,
            block_kernel: 3,
            num_outputs,
            task,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(format!("resnet: {m}")));
        if self.stage_filters.is_empty() || self.blocks_per_stage == 0 {
            return bad("needs at least one stage with one block");
        }
        if self.stage_filters.windows(2).any(|w| w[1] < w[0]) {
            return bad("stage_filters must be nondecreasing");
        }
        if self.stem_kernel.is_multiple_of(2) || self.block_kernel.is_multiple_of(2) || self.pool_kernel.is_multiple_of(2) {
            return bad("kernels must be odd");
        }
        if self.stem_stride == 0 || self.pool_stride == 0 || self.stem_filters == 0 {
            return bad("strides and filter counts must be positive");
        }
        Ok(())
    }

    /// (kernel, stride) of every layer on the main path, input to output.
    pub fn layer_schedule(&self) -> Vec<(usize, usize)> {
        let mut v = vec![(self.stem_kernel, self.stem_stride), (self.pool_kernel, self.pool_stride)];
        let convs = self.stage_filters.len() * self.blocks_per_stage * 2;
        v.extend(std::iter::repeat_n((self.block_kernel, 1), convs));
        v
    }

    /// Length of the final feature maps for input length `t`.
    pub fn feature_len(&self, t: usize) -> Result<usize> {
        if t < self.stem_kernel {
            return Err(ModelError::TooShort {
                t,
                reason: format!("stem kernel is {}", self.stem_kernel),
            });
        }
        let pad = self.stem_kernel / 2;
        let t1 = (t + 2 * pad - self.stem_kernel) / self.stem_stride + 1;
        let ppad = self.pool_kernel / 2;
        if t1 + 2 * ppad < self.pool_kernel {
            return Err(ModelError::TooShort {
                t,
                reason: "pooling window exceeds stem output".into(),
            });
        }
        Ok((t1 + 2 * ppad - self.pool_kernel) / self.pool_stride + 1)
    }
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: usize,
    gamma: usize,
    beta: usize,
    running: usize,
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone)]
struct Block {
    c1: ConvBn,
    c2: ConvBn,
    proj: Option<ConvBn>,
}

#[derive(Debug, Clone)]
pub struct ResNet {
    pub config: ResNetConfig,
    stem: ConvBn,
    blocks: Vec<Block>,
    head_w: usize,
    head_b: usize,
}

/// Vars recorded by one ResNet pass.
#[derive(Debug, Clone)]
pub struct ResNetTrace {
    /// Branch output `[B, num_outputs]`.
    pub output: Var,
    /// Last-stage feature maps `[B, K, T']`.
    pub features: Var,
    /// Input to the first block, then each block's output.
    pub block_outputs: Vec<Var>,
}

#[allow(clippy::too_many_arguments)]
fn conv_bn(
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    params: &mut ParamSet,
    buffers: &mut ParamSet,
    rng: &mut ChaCha8Rng,
) -> ConvBn {
    let conv = params.add(format!("{name}.conv"), kaiming(rng, &[cout, cin, k], cin * k));
    let gamma = params.add(format!("{name}.bn.gamma"), Tensor::full(&[cout], 1.0));
    let beta = params.add(format!("{name}.bn.beta"), Tensor::zeros(&[cout]));
    let running = buffers.add(format!("{name}.bn.running_mean"), Tensor::zeros(&[cout]));
    buffers.add(format!("{name}.bn.running_var"), Tensor::full(&[cout], 1.0));
    ConvBn {
        conv,
        gamma,
        beta,
        running,
        stride,
        padding: k / 2,
    }
}

impl ResNet {
    pub(crate) fn build(config: ResNetConfig, params: &mut ParamSet, buffers: &mut ParamSet, rng: &mut ChaCha8Rng) -> Self {
        let stem = conv_bn(
            "resnet.stem",
            config.in_channels,
            config.stem_filters,
            config.stem_kernel,
            config.stem_stride,
            params,
            buffers,
            rng,
        );
        let mut blocks = Vec::new();
        let mut cin = config.stem_filters;
        let k = config.block_kernel;
        for (s, &cout) in config.stage_filters.iter().enumerate() {
            for b in 0..config.blocks_per_stage {
                let name = format!("resnet.stage{s}.block{b}");
                let c1 = conv_bn(&format!("{name}.conv1"), cin, cout, k, 1, params, buffers, rng);
                let c2 = conv_bn(&format!("{name}.conv2"), cout, cout, k, 1, params, buffers, rng);
                let proj = (cin != cout).then(|| conv_bn(&format!("{name}.proj"), cin, cout, 1, 1, params, buffers, rng));
                blocks.push(Block { c1, c2, proj });
                cin = cout;
            }
        }
        let head_w = params.add("resnet.head.weight", kaiming(rng, &[cin, config.num_outputs], cin));
        let head_b = params.add("resnet.head.bias", Tensor::zeros(&[config.num_outputs]));
        ResNet {
            config,
            stem,
            blocks,
            head_w,
            head_b,
        }
    }

    /// Indices of the stem convolution weights `[filters, C, K]`.
    pub fn stem_weight_index(&self) -> usize {
        self.stem.conv
    }

    fn apply_conv_bn(&self, ctx: &mut Ctx, x: Var, l: &ConvBn) -> crate::tensor::Result<Var> {
        let y = ctx.tape.conv1d(x, ctx.p(l.conv), None, l.stride, l.padding)?;
        let (g, b) = (ctx.p(l.gamma), ctx.p(l.beta));
        if ctx.mode.is_train() {
            let (y, stats) = ctx.tape.batch_norm(y, g, b, BN_EPS, None)?;
            ctx.bn_updates.push((l.running, stats.expect("training batch norm returns stats")));
            Ok(y)
        } else {
            let mean = ctx.buffers.tensors[l.running].data();
            let var = ctx.buffers.tensors[l.running + 1].data();
            Ok(ctx.tape.batch_norm(y, g, b, BN_EPS, Some((mean, var)))?.0)
        }
    }

    pub(crate) fn forward(&self, ctx: &mut Ctx, input: Var) -> Result<ResNetTrace> {
        let t = ctx.tape.shape(input)[1];
        self.config.feature_len(t)?;
        let x = ctx.tape.transpose_last2(input)?;
        let x = self.apply_conv_bn(ctx, x, &self.stem)?;
        let x = ctx.tape.relu(x)?;
        let c = &self.config;
        let mut x = ctx.tape.max_pool1d(x, c.pool_kernel, c.pool_stride, c.pool_kernel / 2)?;
        let mut block_outputs = vec![x];
        for b in &self.blocks {
            let y = self.apply_conv_bn(ctx, x, &b.c1)?;
            let y = ctx.tape.relu(y)?;
            let y = self.apply_conv_bn(ctx, y, &b.c2)?;
            let skip = match &b.proj {
                Some(p) => self.apply_conv_bn(ctx, x, p)?,
                None => x,
            };
            let y = ctx.tape.add(y, skip)?;
            x = ctx.tape.relu(y)?;
            block_outputs.push(x);
        }
        let pooled = ctx.tape.global_avg_pool(x)?;
        let output = ctx.linear(pooled, self.head_w, self.head_b)?;
        Ok(ResNetTrace {
            output,
            features: x,
            block_outputs,
        })
    }
}
