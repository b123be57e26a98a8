//! Tape-level building blocks of the forward pass.
//!
//! Embeddings flow through the network joint-major as `[B, N, T, D]`, so that
//! per-joint weights `[N, Din, Dout]` apply as one batched matmul per joint.

use ndtensor::{AttnMask, Element, Normalizer, Tape, Tensor, Var};
use rand::RngCore;

use super::params::BoundParams;
use super::{ModelConfig, ModelError, Result, TauMode, Variant};

/// Training mode carries the dropout random stream.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    fn dropout<T: Element>(&mut self, tape: &mut Tape<T>, x: Var, rate: f64) -> Result<Var> {
        Ok(match self {
            Mode::Eval => x,
            Mode::Train(rng) => tape.dropout(x, rate, true, &mut **rng)?,
        })
    }
}

/// Attention weight tensors and score counts of one layer.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// `[B, N, H, T, T]`
    pub temporal: Option<Var>,
    /// `[B, T, H, N, N]`
    pub spatial: Option<Var>,
    /// `[B, H, T·N, T·N]`, tokens in time-major order.
    pub full: Option<Var>,
    pub scores_per_sample: u64,
}

#[derive(Clone, Debug)]
pub struct Trace {
    /// `[B, T, N, 9]`
    pub prediction: Var,
    pub layers: Vec<LayerTrace>,
}

/// Projection weights of one attention module.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
}

impl AttentionParams {
    fn bind(p: &BoundParams<'_>, prefix: &str) -> Result<Self> {
        Ok(Self {
            query: p.var(&format!("{prefix}.query"))?,
            key: p.var(&format!("{prefix}.key"))?,
            value: p.var(&format!("{prefix}.value"))?,
            output: p.var(&format!("{prefix}.output"))?,
        })
    }
}

fn normalizer(tau: TauMode) -> Normalizer {
    match tau {
        TauMode::Softmax => Normalizer::Softmax,
        TauMode::SumNormalize => Normalizer::SumNormalize,
    }
}

/// `PE[t, 2k] = sin(t / 10000^(2k/D))`, `PE[t, 2k+1] = cos(t / 10000^(2k/D))`.
pub fn positional_encoding<T: Element>(frames: usize, dim: usize) -> Result<Tensor<T>> {
    if dim % 2 != 0 {
        return Err(ModelError::Config(format!("positional encoding needs an even width, got {dim}")));
    }
    let mut data = Vec::with_capacity(frames * dim);
    for t in 0..frames {
        for k in 0..dim / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * k as f64 / dim as f64);
            data.push(T::of(angle.sin()));
            data.push(T::of(angle.cos()));
        }
    }
    Ok(Tensor::new(vec![frames, dim], data)?)
}

/// `e[b, n, t] = x[b, n, t] · W[n] + b[n]` for joint-major tokens `[B, N, T, M]`.
pub fn embed_joints<T: Element>(tape: &mut Tape<T>, tokens: Var, weight: Var, bias: Var) -> Result<Var> {
    let (sx, sw) = (tape.shape(tokens), tape.shape(weight));
    if sx.len() != 4 || sw.len() != 3 || sx[1] != sw[0] {
        return Err(ModelError::Config(format!(
            "tokens {sx:?} do not match per-joint embedding {sw:?}"
        )));
    }
    let e = tape.matmul(tokens, weight)?;
    Ok(tape.add(e, bias)?)
}

/// Causal multi-head attention of every joint over its own past.
///
/// `e` is `[B, N, T, D]`; returns the summary (same shape) and the weights
/// `[B, N, H, T, T]`.
pub fn temporal_attention<T: Element>(
    tape: &mut Tape<T>,
    e: Var,
    w: &AttentionParams,
    heads: usize,
    tau: TauMode,
) -> Result<(Var, Var)> {
    let d = tape.shape(e)[3];
    let q = tape.matmul(e, w.query)?;
    let k = tape.matmul(e, w.key)?;
    let v = tape.matmul(e, w.value)?;
    let scores = tape.mha_scores(q, k, heads, T::of(1.0 / (d as f64).sqrt()))?;
    let weights = tape.attention_weights(scores, AttnMask::Causal { group: 1 }, normalizer(tau))?;
    let heads_out = tape.mha_apply(weights, v, heads)?;
    Ok((tape.matmul(heads_out, w.output)?, weights))
}

/// Unmasked multi-head attention among the joints of each frame.
///
/// `e` is `[B, N, T, D]`. Each projection may be per-joint (`[N, D, D]`) or
/// shared (`[D, D]`); the output projection is always shared. Returns the
/// summary `[B, N, T, D]` and the weights `[B, T, H, N, N]`.
pub fn spatial_attention<T: Element>(
    tape: &mut Tape<T>,
    e: Var,
    w: &AttentionParams,
    heads: usize,
    tau: TauMode,
) -> Result<(Var, Var)> {
    let d = tape.shape(e)[3];
    let frame_major = tape.permute(e, &[0, 2, 1, 3])?;
    let project = |tape: &mut Tape<T>, weight: Var| -> Result<Var> {
        if tape.shape(weight).len() == 3 {
            let p = tape.matmul(e, weight)?;
            Ok(tape.permute(p, &[0, 2, 1, 3])?)
        } else {
            Ok(tape.matmul(frame_major, weight)?)
        }
    };
    let q = project(tape, w.query)?;
    let k = project(tape, w.key)?;
    let v = project(tape, w.value)?;
    let scores = tape.mha_scores(q, k, heads, T::of(1.0 / (d as f64).sqrt()))?;
    let weights = tape.attention_weights(scores, AttnMask::None, normalizer(tau))?;
    let heads_out = tape.mha_apply(weights, v, heads)?;
    let out = tape.matmul(heads_out, w.output)?;
    Ok((tape.permute(out, &[0, 2, 1, 3])?, weights))
}

/// Attention over all `T·N` joint-time tokens; a token sees every joint of
/// its own and earlier frames. Same shapes as [`temporal_attention`] with
/// weights `[B, H, T·N, T·N]`.
fn full_attention<T: Element>(
    tape: &mut Tape<T>,
    e: Var,
    w: &AttentionParams,
    heads: usize,
    tau: TauMode,
) -> Result<(Var, Var)> {
    let s = tape.shape(e).to_vec();
    let (b, n, t, d) = (s[0], s[1], s[2], s[3]);
    let tokens = |tape: &mut Tape<T>, weight: Var| -> Result<Var> {
        let p = tape.matmul(e, weight)?;
        let p = tape.permute(p, &[0, 2, 1, 3])?;
        Ok(tape.reshape(p, &[b, t * n, d])?)
    };
    let q = tokens(tape, w.query)?;
    let k = tokens(tape, w.key)?;
    let v = tokens(tape, w.value)?;
    let scores = tape.mha_scores(q, k, heads, T::of(1.0 / (d as f64).sqrt()))?;
    let weights = tape.attention_weights(scores, AttnMask::Causal { group: n }, normalizer(tau))?;
    let heads_out = tape.mha_apply(weights, v, heads)?;
    let heads_out = tape.reshape(heads_out, &[b, t, n, d])?;
    let heads_out = tape.permute(heads_out, &[0, 2, 1, 3])?;
    Ok((tape.matmul(heads_out, w.output)?, weights))
}

/// `LN(residual + Dropout(W2 · ReLU(W1 · x + b1) + b2))`.
fn feed_forward_norm<T: Element>(
    tape: &mut Tape<T>,
    p: &BoundParams<'_>,
    ff: &str,
    norm: &str,
    x: Var,
    residual: Var,
    dropout: f64,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let h = tape.matmul(x, p.var(&format!("{ff}.w1"))?)?;
    let h = tape.add(h, p.var(&format!("{ff}.b1"))?)?;
    let h = tape.relu(h)?;
    let y = tape.matmul(h, p.var(&format!("{ff}.w2"))?)?;
    let y = tape.add(y, p.var(&format!("{ff}.b2"))?)?;
    let y = mode.dropout(tape, y, dropout)?;
    let sum = tape.add(residual, y)?;
    Ok(tape.layer_norm(sum, p.var(&format!("{norm}.gain"))?, p.var(&format!("{norm}.bias"))?)?)
}

/// One attention block on `[B, N, T, D]` embeddings: the attention summaries
/// are summed, passed through the feed-forward network, dropout, the residual
/// connection and layer norm.
pub fn attention_block<T: Element>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    p: &BoundParams<'_>,
    layer: usize,
    e: Var,
    mode: &mut Mode<'_>,
) -> Result<(Var, LayerTrace)> {
    let frames = tape.shape(e)[2];
    let temporal_w = AttentionParams::bind(p, &format!("layer{layer}.temporal"))?;
    let (h, tau) = (config.heads, config.tau);
    let mut trace = LayerTrace {
        temporal: None,
        spatial: None,
        full: None,
        scores_per_sample: 0,
    };
    let ff = format!("layer{layer}.ff");
    let norm = format!("layer{layer}.norm");
    let out = match config.variant {
        Variant::St => {
            let (t_sum, t_w) = temporal_attention(tape, e, &temporal_w, h, tau)?;
            let spatial_w = AttentionParams::bind(p, &format!("layer{layer}.spatial"))?;
            let (s_sum, s_w) = spatial_attention(tape, e, &spatial_w, h, tau)?;
            trace.temporal = Some(t_w);
            trace.spatial = Some(s_w);
            if config.ff_per_branch {
                let a = feed_forward_norm(tape, p, &format!("{ff}_temporal"), &format!("{norm}_temporal"), t_sum, e, config.dropout, mode)?;
                let b = feed_forward_norm(tape, p, &format!("{ff}_spatial"), &format!("{norm}_spatial"), s_sum, e, config.dropout, mode)?;
                tape.add(a, b)?
            } else {
                let sum = tape.add(t_sum, s_sum)?;
                feed_forward_norm(tape, p, &ff, &norm, sum, e, config.dropout, mode)?
            }
        }
        Variant::Vanilla1d => {
            let (t_sum, t_w) = temporal_attention(tape, e, &temporal_w, h, tau)?;
            trace.temporal = Some(t_w);
            feed_forward_norm(tape, p, &ff, &norm, t_sum, e, config.dropout, mode)?
        }
        Variant::Full2d => {
            let (f_sum, f_w) = full_attention(tape, e, &temporal_w, h, tau)?;
            trace.full = Some(f_w);
            feed_forward_norm(tape, p, &ff, &norm, f_sum, e, config.dropout, mode)?
        }
    };
    let batch = tape.shape(e)[0] as u64;
    trace.scores_per_sample = [trace.temporal, trace.spatial, trace.full]
        .iter()
        .flatten()
        .map(|w| tape.value(*w).numel() as u64 / (batch * h as u64))
        .sum();
    debug_assert_eq!(trace.scores_per_sample, config.scores_per_layer(frames));
    Ok((out, trace))
}

/// Full network on `[B, T, N, 9]` poses: per-joint embedding, positional
/// encoding, dropout, the attention blocks, a per-joint projection back to
/// rotations and the residual from the input pose.
pub fn forward_on_tape<T: Element>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    p: &BoundParams<'_>,
    input: Var,
    mut mode: Mode<'_>,
) -> Result<Trace> {
    let s = tape.shape(input).to_vec();
    if s.len() != 4 || s[2] != config.joints || s[3] != config.joint_dim || s[1] == 0 {
        return Err(ModelError::Config(format!(
            "input {s:?} does not match [B, T, {}, {}]",
            config.joints, config.joint_dim
        )));
    }
    let (b, t) = (s[0], s[1]);
    if t > config.window {
        return Err(ModelError::Config(format!("{t} frames exceed the model window {}", config.window)));
    }
    let mt = config.token_dim();
    let tokens = match config.variant {
        Variant::Vanilla1d => tape.reshape(input, &[b, 1, t, mt])?,
        _ => tape.permute(input, &[0, 2, 1, 3])?,
    };
    let e = embed_joints(tape, tokens, p.var("embed.weight")?, p.var("embed.bias")?)?;
    let pe = tape.constant(positional_encoding(t, config.embed_dim)?)?;
    let e = tape.add(e, pe)?;
    let mut e = mode.dropout(tape, e, config.dropout)?;
    let mut layers = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let (next, trace) = attention_block(tape, config, p, l, e, &mut mode)?;
        if !tape.value(next).all_finite() {
            return Err(ModelError::NonFinite { layer: l });
        }
        e = next;
        layers.push(trace);
    }
    let delta = tape.matmul(e, p.var("output.weight")?)?;
    let delta = tape.add(delta, p.var("output.bias")?)?;
    let delta = match config.variant {
        Variant::Vanilla1d => tape.reshape(delta, &[b, t, config.joints, config.joint_dim])?,
        _ => tape.permute(delta, &[0, 2, 1, 3])?,
    };
    debug_assert_eq!(tape.shape(delta), [b, t, config.joints, config.joint_dim]);
    let prediction = tape.add(input, delta)?;
    Ok(Trace { prediction, layers })
}
