use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{kaiming, uniform, Ctx, ModelError, ParamSet, Result, Task};
use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

const POS_INIT: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum AttentionMode {
    Dense,
    /// Banded attention `|i - j| <= window` in layers `>= from_layer`.
    Windowed { window: usize, from_layer: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub in_channels: usize,
    pub max_len: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_ratio: usize,
    pub attention: AttentionMode,
    pub dropout: f64,
    pub num_outputs: usize,
    pub task: Task,
}

impl TransformerConfig {
    pub fn desk(in_channels: usize, max_len: usize, num_outputs: usize, task: Task) -> Self {
        TransformerConfig {
            in_channels,
            max_len: max_len.max(1),
            embed_dim: 32,
            layers: 3,
            heads: 4,
            head_dim: 8,
            ffn_ratio: 4,
            attention: AttentionMode::Dense,
            dropout: 0.1,
            num_outputs,
            task,
        }
    }

    /// Windowed attention in the later half of the stack.
    pub fn windowed(mut self, window: usize) -> Self {
        self.attention = AttentionMode::Windowed {
            window,
            from_layer: self.layers / 2,
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(format!("transformer: {m}")));
        if self.layers == 0 || self.heads == 0 || self.head_dim == 0 {
            return bad("layers, heads and head_dim must be positive".into());
        }
        if self.embed_dim != self.heads * self.head_dim {
            return bad(format!(
                "embed_dim {} != heads {} * head_dim {}",
                self.embed_dim, self.heads, self.head_dim
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)".into());
        }
        if let AttentionMode::Windowed { window, .. } = self.attention {
            if window % 2 == 0 {
                return bad(format!("window {window} must be odd"));
            }
        }
        Ok(())
    }

    pub fn window_for(&self, layer: usize) -> Option<usize> {
        match self.attention {
            AttentionMode::Windowed { window, from_layer } if layer >= from_layer => Some(window),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
struct Layer {
    ln1: (usize, usize),
    q: (usize, usize),
    k: (usize, usize),
    v: (usize, usize),
    o: (usize, usize),
    ln2: (usize, usize),
    ff1: (usize, usize),
    ff2: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Transformer {
    pub config: TransformerConfig,
    embed: (usize, usize),
    embed_ln: (usize, usize),
    pos: usize,
    layers: Vec<Layer>,
    final_ln: (usize, usize),
    head: (usize, usize),
}

/// Vars recorded by one transformer pass.
#[derive(Debug, Clone)]
pub struct TransformerTrace {
    pub output: Var,
    /// Token embeddings after positional encoding `[B, T, D]`.
    pub embedding: Var,
    /// Per layer, attention probabilities `[B * heads, T, T]`.
    pub attention: Vec<Var>,
    pub heads: usize,
}

/// Softmax(q kᵀ / sqrt(d)) v over `[N, T, d]` inputs; returns (output, weights).
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var, window: Option<usize>) -> crate::tensor::Result<(Var, Var)> {
    let d = *tape.shape(q).last().unwrap_or(&1);
    let q = tape.affine(q, 1.0 / (d as f64).sqrt(), 0.0)?;
    let kt = tape.transpose_last2(k)?;
    let scores = tape.bmm(q, kt)?;
    let attn = match window {
        Some(w) => tape.banded_softmax(scores, w)?,
        None => {
            let axis = tape.shape(scores).len() - 1;
            tape.softmax(scores, axis)?
        }
    };
    let out = tape.bmm(attn, v)?;
    Ok((out, attn))
}

fn linear_params(name: &str, fan_in: usize, fan_out: usize, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let w = params.add(format!("{name}.weight"), kaiming(rng, &[fan_in, fan_out], fan_in));
    let b = params.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
    (w, b)
}

fn ln_params(name: &str, d: usize, params: &mut ParamSet) -> (usize, usize) {
    let g = params.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0));
    let b = params.add(format!("{name}.beta"), Tensor::zeros(&[d]));
    (g, b)
}

impl Transformer {
    pub(crate) fn build(config: TransformerConfig, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Self {
        let d = config.embed_dim;
        let embed = linear_params("transformer.embed", config.in_channels, d, params, rng);
        let embed_ln = ln_params("transformer.embed.ln", d, params);
        let pos = params.add("transformer.pos", uniform(rng, &[config.max_len, d], POS_INIT));
        let hidden = d * config.ffn_ratio;
        let layers = (0..config.layers)
            .map(|l| {
                let n = format!("transformer.layer{l}");
                Layer {
                    ln1: ln_params(&format!("{n}.ln1"), d, params),
                    q: linear_params(&format!("{n}.q"), d, d, params, rng),
                    k: linear_params(&format!("{n}.k"), d, d, params, rng),
                    v: linear_params(&format!("{n}.v"), d, d, params, rng),
                    o: linear_params(&format!("{n}.o"), d, d, params, rng),
                    ln2: ln_params(&format!("{n}.ln2"), d, params),
                    ff1: linear_params(&format!("{n}.ff1"), d, hidden, params, rng),
                    ff2: linear_params(&format!("{n}.ff2"), hidden, d, params, rng),
                }
            })
            .collect();
        let final_ln = ln_params("transformer.final_ln", d, params);
        let head = linear_params("transformer.head", d, config.num_outputs, params, rng);
        Transformer {
            config,
            embed,
            embed_ln,
            pos,
            layers,
            final_ln,
            head,
        }
    }

    /// Name of the `[C, D]` patch-embedding weight.
    pub const EMBED_WEIGHT: &'static str = "transformer.embed.weight";
    pub const EMBED_BIAS: &'static str = "transformer.embed.bias";
    pub const POS: &'static str = "transformer.pos";

    pub(crate) fn forward(&self, ctx: &mut Ctx, input: Var) -> Result<TransformerTrace> {
        let c = &self.config;
        let s = ctx.tape.shape(input).to_vec();
        let (b, t, d) = (s[0], s[1], c.embed_dim);
        if t > c.max_len {
            return Err(ModelError::Config(format!(
                "sequence length {t} exceeds max positions {}",
                c.max_len
            )));
        }
        let x = ctx.tape.reshape(input, &[b * t, s[2]])?;
        let e = ctx.linear(x, self.embed.0, self.embed.1)?;
        let e = ctx.layer_norm(e, 1, self.embed_ln.0, self.embed_ln.1)?;
        let e = ctx.tape.reshape(e, &[b, t, d])?;
        let pos = ctx.tape.narrow_rows(ctx.p(self.pos), t)?;
        let embedding = ctx.tape.add_trailing(e, pos)?;
        let mut z = embedding;
        let mut attention = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let flat = ctx.tape.reshape(z, &[b * t, d])?;
            let h = ctx.layer_norm(flat, 1, layer.ln1.0, layer.ln1.1)?;
            let proj = |ctx: &mut Ctx, (w, bias): (usize, usize)| -> crate::tensor::Result<Var> {
                let y = ctx.linear(h, w, bias)?;
                let y = ctx.tape.reshape(y, &[b, t, d])?;
                ctx.tape.split_heads(y, c.heads)
            };
            let q = proj(ctx, layer.q)?;
            let k = proj(ctx, layer.k)?;
            let v = proj(ctx, layer.v)?;
            let (o, attn) = scaled_dot_attention(&mut ctx.tape, q, k, v, c.window_for(l))?;
            attention.push(attn);
            let o = ctx.tape.merge_heads(o, c.heads)?;
            let o = ctx.tape.reshape(o, &[b * t, d])?;
            let o = ctx.linear(o, layer.o.0, layer.o.1)?;
            let o = ctx.dropout(o, c.dropout)?;
            let res = ctx.tape.add(flat, o)?;
            let h = ctx.layer_norm(res, 1, layer.ln2.0, layer.ln2.1)?;
            let f = ctx.linear(h, layer.ff1.0, layer.ff1.1)?;
            let f = ctx.tape.gelu(f)?;
            let f = ctx.linear(f, layer.ff2.0, layer.ff2.1)?;
            let f = ctx.dropout(f, c.dropout)?;
            let res = ctx.tape.add(res, f)?;
            z = ctx.tape.reshape(res, &[b, t, d])?;
        }
        let flat = ctx.tape.reshape(z, &[b * t, d])?;
        let f = ctx.layer_norm(flat, 1, self.final_ln.0, self.final_ln.1)?;
        let f = ctx.tape.reshape(f, &[b, t, d])?;
        let pooled = ctx.tape.mean_axis(f, 1)?;
        let output = ctx.linear(pooled, self.head.0, self.head.1)?;
        Ok(TransformerTrace {
            output,
            embedding,
            attention,
            heads: c.heads,
        })
    }
}
