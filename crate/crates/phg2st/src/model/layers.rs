//! Differentiable building blocks: multi-head self-attention, pre-LN
//! transformer blocks, single-head cross-attention, the ST-prompt encoder,
//! and validity-weighted neighbor pooling.

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorData, Var};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

/// Attention span of the prompt cross-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnScope {
    /// Every prompt token attends over all spot positions (default).
    Global,
    /// Each prompt token reads only its own spot's representation.
    Local,
}

/// Handles to a bound linear layer on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLayerNorm {
    pub gain: Var,
    pub bias: Var,
}

/// One pre-LN transformer block's parameters, bound to a tape.
#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub ln1: BoundLayerNorm,
    pub wq: BoundLinear,
    pub wk: BoundLinear,
    pub wv: BoundLinear,
    pub wo: BoundLinear,
    pub ln2: BoundLayerNorm,
    pub fc1: BoundLinear,
    pub fc2: BoundLinear,
}

#[derive(Clone, Debug)]
pub struct BoundCrossAttn {
    pub wq: BoundLinear,
    pub wk: BoundLinear,
    pub wv: BoundLinear,
    pub wo: BoundLinear,
}

#[derive(Clone, Debug)]
pub struct BoundPrompt {
    pub proj: BoundLinear,
    pub fc: BoundLinear,
    pub ln: BoundLayerNorm,
}

/// Multi-head self-attention over `x` `[n, d]` with `1/sqrt(d/heads)`
/// score scaling.
pub fn multi_head_self_attention(
    tape: &mut Tape,
    x: Var,
    wq: BoundLinear,
    wk: BoundLinear,
    wv: BoundLinear,
    wo: BoundLinear,
    heads: usize,
) -> Result<Var> {
    let d = tape.shape(x)[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Param {
            name: "heads",
            details: format!("{heads} heads do not divide width {d}"),
        });
    }
    let hd = d / heads;
    let q = tape.linear(x, wq.w, wq.b)?;
    let k = tape.linear(x, wk.w, wk.b)?;
    let v = tape.linear(x, wv.w, wv.b)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * hd, hd)?;
        let kh = tape.slice_cols(k, h * hd, hd)?;
        let vh = tape.slice_cols(v, h * hd, hd)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax(scaled, 1)?;
        head_outputs.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&head_outputs)?;
    tape.linear(merged, wo.w, wo.b)
}

/// Pre-LN transformer block:
/// `h = x + Drop(MHSA(LN1(x)))`, `out = h + Drop(MLP(LN2(h)))` with a
/// GELU MLP.
#[allow(clippy::too_many_arguments)]
pub fn transformer_block(
    tape: &mut Tape,
    x: Var,
    block: &BoundBlock,
    heads: usize,
    ln_eps: f64,
    p_drop: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let normed = tape.layer_norm(x, block.ln1.gain, block.ln1.bias, ln_eps)?;
    let attn =
        multi_head_self_attention(tape, normed, block.wq, block.wk, block.wv, block.wo, heads)?;
    let attn = tape.dropout(attn, p_drop, training, rng)?;
    let h = tape.add(x, attn)?;

    let normed2 = tape.layer_norm(h, block.ln2.gain, block.ln2.bias, ln_eps)?;
    let hidden = tape.linear(normed2, block.fc1.w, block.fc1.b)?;
    let act = tape.gelu(hidden);
    let mlp = tape.linear(act, block.fc2.w, block.fc2.b)?;
    let mlp = tape.dropout(mlp, p_drop, training, rng)?;
    tape.add(h, mlp)
}

/// Single-head cross-attention: queries from the prompt `[n, d_p]`, keys and
/// values from spot representations `[n, d]`. `Global` scope softmaxes each
/// query over all `n` positions; `Local` reduces to a per-position value
/// read (attention pinned to the diagonal).
pub fn cross_attention(
    tape: &mut Tape,
    prompt: Var,
    source: Var,
    ca: &BoundCrossAttn,
    scope: AttnScope,
) -> Result<Var> {
    if tape.shape(prompt)[0] != tape.shape(source)[0] {
        return Err(Error::Dim {
            op: "cross_attention",
            details: format!(
                "prompt {:?} vs source {:?}",
                tape.shape(prompt),
                tape.shape(source)
            ),
        });
    }
    match scope {
        AttnScope::Global => {
            let q = tape.linear(prompt, ca.wq.w, ca.wq.b)?;
            let k = tape.linear(source, ca.wk.w, ca.wk.b)?;
            let v = tape.linear(source, ca.wv.w, ca.wv.b)?;
            let d_attn = tape.shape(q)[1];
            let scores = tape.matmul_nt(q, k)?;
            let scaled = tape.scale(scores, 1.0 / (d_attn as f64).sqrt());
            let attn = tape.softmax(scaled, 1)?;
            let mixed = tape.matmul(attn, v)?;
            tape.linear(mixed, ca.wo.w, ca.wo.b)
        }
        AttnScope::Local => {
            let v = tape.linear(source, ca.wv.w, ca.wv.b)?;
            tape.linear(v, ca.wo.w, ca.wo.b)
        }
    }
}

/// ST-prompt encoder: `LN(Dropout(FC(GELU(Y_masked W))))`, mapping masked
/// expression `[n, m]` to prompt tokens `[n, d_p]`.
#[allow(clippy::too_many_arguments)]
pub fn encode_prompt(
    tape: &mut Tape,
    y_masked: Var,
    prompt: &BoundPrompt,
    ln_eps: f64,
    p_drop: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let projected = tape.linear(y_masked, prompt.proj.w, prompt.proj.b)?;
    let act = tape.gelu(projected);
    let fc = tape.linear(act, prompt.fc.w, prompt.fc.b)?;
    let dropped = tape.dropout(fc, p_drop, training, rng)?;
    tape.layer_norm(dropped, prompt.ln.gain, prompt.ln.bias, ln_eps)
}

/// Mean over the valid token rows of a `[SLOTS, d]` matrix, as `[1, d]`.
/// Implemented as a constant-weight matmul so gradients flow to the tokens.
pub fn neighbor_pool(tape: &mut Tape, tokens: Var, valid: &[bool]) -> Result<Var> {
    let slots = tape.shape(tokens)[0];
    if valid.len() != slots {
        return Err(Error::Dim {
            op: "neighbor_pool",
            details: format!("{} validity flags for {} tokens", valid.len(), slots),
        });
    }
    let count = valid.iter().filter(|v| **v).count();
    if count == 0 {
        return Err(Error::Param {
            name: "valid",
            details: "no valid tokens to pool".into(),
        });
    }
    let weight = 1.0 / count as f64;
    let row: Vec<f64> = valid.iter().map(|v| if *v { weight } else { 0.0 }).collect();
    let w = tape.constant(&TensorData { shape: vec![1, slots], data: row });
    tape.matmul(w, tokens)
}
