//! The PHG2ST model: a spot branch (slide-level hypergraph conv +
//! transformer), a neighbor branch (per-spot sub-hypergraph convs, validity
//! pooling, transformer), an ST-prompt encoder over partially observed
//! expression, prompt-queried cross-attention, additive fusion, and three
//! linear prediction heads (spot / neighbor / fused).

pub mod layers;

use crate::data::NeighborTensor;
use crate::error::{Error, Result};
use crate::hypergraph::{conv_block, Hypergraph};
use crate::rng::{seeded, streams};
use crate::tensor::{Tape, TensorData, Var};
use layers::{
    cross_attention, encode_prompt, neighbor_pool, transformer_block, AttnScope, BoundBlock,
    BoundCrossAttn, BoundLayerNorm, BoundLinear, BoundPrompt,
};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters. `d_feat` and `n_genes` come from the data;
/// the rest default to the reference configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Histology feature dimension of each spot / neighbor token.
    pub d_feat: usize,
    /// Number of genes predicted (and consumed by the prompt encoder).
    pub n_genes: usize,
    /// Width of both branch embeddings.
    pub d_model: usize,
    /// Width of the prompt tokens.
    pub d_prompt: usize,
    /// Inner width of the cross-attention score space.
    pub d_attn: usize,
    /// Self-attention heads per transformer block.
    pub heads: usize,
    /// Transformer blocks per branch.
    pub blocks: usize,
    /// MLP expansion factor inside each block.
    pub mlp_ratio: usize,
    /// Dropout probability (training only).
    pub dropout: f64,
    /// LayerNorm epsilon.
    pub ln_eps: f64,
    /// Cross-attention span.
    pub attention_scope: AttnScope,
    /// Enable the slide-level spot branch.
    pub spot_branch: bool,
    /// Enable the neighbor branch (and with it the prompt pathway).
    pub neighbor_branch: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_feat: 16,
            n_genes: 20,
            d_model: 256,
            d_prompt: 256,
            d_attn: 256,
            heads: 8,
            blocks: 2,
            mlp_ratio: 4,
            dropout: 0.1,
            ln_eps: 1e-5,
            attention_scope: AttnScope::Global,
            spot_branch: true,
            neighbor_branch: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 7] = [
            ("d_feat", self.d_feat),
            ("n_genes", self.n_genes),
            ("d_model", self.d_model),
            ("d_prompt", self.d_prompt),
            ("d_attn", self.d_attn),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Param { name, details: "must be positive".into() });
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Param {
                name: "heads",
                details: format!("{} does not divide d_model {}", self.heads, self.d_model),
            });
        }
        if !self.dropout.is_finite() || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Param {
                name: "dropout",
                details: format!("{} outside [0, 1)", self.dropout),
            });
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Param {
                name: "ln_eps",
                details: format!("{} must be positive", self.ln_eps),
            });
        }
        if !self.spot_branch && !self.neighbor_branch {
            return Err(Error::Config("at least one branch must be enabled".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LinearParams {
    pub w: TensorData,
    pub b: TensorData,
}

impl LinearParams {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero bias.
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        use rand::Rng;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            w: TensorData { shape: vec![fan_in, fan_out], data },
            b: TensorData::zeros(&[fan_out]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: TensorData,
    pub bias: TensorData,
}

impl LayerNormParams {
    fn unit(d: usize) -> Self {
        Self {
            gain: TensorData { shape: vec![d], data: vec![1.0; d] },
            bias: TensorData::zeros(&[d]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
    pub ln2: LayerNormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl BlockParams {
    fn init(d: usize, mlp_ratio: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1: LayerNormParams::unit(d),
            wq: LinearParams::init(d, d, rng),
            wk: LinearParams::init(d, d, rng),
            wv: LinearParams::init(d, d, rng),
            wo: LinearParams::init(d, d, rng),
            ln2: LayerNormParams::unit(d),
            fc1: LinearParams::init(d, d * mlp_ratio, rng),
            fc2: LinearParams::init(d * mlp_ratio, d, rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PromptParams {
    pub proj: LinearParams,
    pub fc: LinearParams,
    pub ln: LayerNormParams,
}

#[derive(Clone, Debug)]
pub struct CrossAttnParams {
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
}

#[derive(Clone, Debug)]
pub struct BranchParams {
    /// Hypergraph convolution weight, `d_feat -> d_model`.
    pub theta: TensorData,
    pub conv_ln: LayerNormParams,
    pub blocks: Vec<BlockParams>,
}

impl BranchParams {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            theta: LinearParams::init(cfg.d_feat, cfg.d_model, rng).w,
            conv_ln: LayerNormParams::unit(cfg.d_model),
            blocks: (0..cfg.blocks)
                .map(|_| BlockParams::init(cfg.d_model, cfg.mlp_ratio, rng))
                .collect(),
        }
    }
}

/// All trainable state. Tensor traversal order (`visit`/`visit_mut`) is
/// fixed and shared by tape binding, the optimizer, and checkpoints.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub prompt: PromptParams,
    pub spot: BranchParams,
    pub neighbor: BranchParams,
    pub cross: CrossAttnParams,
    pub head_spot: LinearParams,
    pub head_neighbor: LinearParams,
    pub head_fused: LinearParams,
}

fn visit_linear<'a>(out: &mut Vec<(String, &'a TensorData)>, prefix: &str, l: &'a LinearParams) {
    out.push((format!("{prefix}.w"), &l.w));
    out.push((format!("{prefix}.b"), &l.b));
}

fn visit_ln<'a>(out: &mut Vec<(String, &'a TensorData)>, prefix: &str, l: &'a LayerNormParams) {
    out.push((format!("{prefix}.gain"), &l.gain));
    out.push((format!("{prefix}.bias"), &l.bias));
}

fn visit_block<'a>(out: &mut Vec<(String, &'a TensorData)>, prefix: &str, b: &'a BlockParams) {
    visit_ln(out, &format!("{prefix}.ln1"), &b.ln1);
    visit_linear(out, &format!("{prefix}.wq"), &b.wq);
    visit_linear(out, &format!("{prefix}.wk"), &b.wk);
    visit_linear(out, &format!("{prefix}.wv"), &b.wv);
    visit_linear(out, &format!("{prefix}.wo"), &b.wo);
    visit_ln(out, &format!("{prefix}.ln2"), &b.ln2);
    visit_linear(out, &format!("{prefix}.fc1"), &b.fc1);
    visit_linear(out, &format!("{prefix}.fc2"), &b.fc2);
}

fn visit_branch<'a>(out: &mut Vec<(String, &'a TensorData)>, prefix: &str, b: &'a BranchParams) {
    out.push((format!("{prefix}.theta"), &b.theta));
    visit_ln(out, &format!("{prefix}.conv_ln"), &b.conv_ln);
    for (i, blk) in b.blocks.iter().enumerate() {
        visit_block(out, &format!("{prefix}.block{i}"), blk);
    }
}

fn visit_linear_mut<'a>(
    out: &mut Vec<(String, &'a mut TensorData)>,
    prefix: &str,
    l: &'a mut LinearParams,
) {
    out.push((format!("{prefix}.w"), &mut l.w));
    out.push((format!("{prefix}.b"), &mut l.b));
}

fn visit_ln_mut<'a>(
    out: &mut Vec<(String, &'a mut TensorData)>,
    prefix: &str,
    l: &'a mut LayerNormParams,
) {
    out.push((format!("{prefix}.gain"), &mut l.gain));
    out.push((format!("{prefix}.bias"), &mut l.bias));
}

fn visit_block_mut<'a>(
    out: &mut Vec<(String, &'a mut TensorData)>,
    prefix: &str,
    b: &'a mut BlockParams,
) {
    visit_ln_mut(out, &format!("{prefix}.ln1"), &mut b.ln1);
    visit_linear_mut(out, &format!("{prefix}.wq"), &mut b.wq);
    visit_linear_mut(out, &format!("{prefix}.wk"), &mut b.wk);
    visit_linear_mut(out, &format!("{prefix}.wv"), &mut b.wv);
    visit_linear_mut(out, &format!("{prefix}.wo"), &mut b.wo);
    visit_ln_mut(out, &format!("{prefix}.ln2"), &mut b.ln2);
    visit_linear_mut(out, &format!("{prefix}.fc1"), &mut b.fc1);
    visit_linear_mut(out, &format!("{prefix}.fc2"), &mut b.fc2);
}

fn visit_branch_mut<'a>(
    out: &mut Vec<(String, &'a mut TensorData)>,
    prefix: &str,
    b: &'a mut BranchParams,
) {
    out.push((format!("{prefix}.theta"), &mut b.theta));
    visit_ln_mut(out, &format!("{prefix}.conv_ln"), &mut b.conv_ln);
    for (i, blk) in b.blocks.iter_mut().enumerate() {
        visit_block_mut(out, &format!("{prefix}.block{i}"), blk);
    }
}

impl ModelParams {
    /// Deterministic initialization from `seed` on the parameter-init
    /// stream: the same seed and config always produce identical weights.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = &mut seeded(seed, streams::PARAM_INIT);
        let prompt = PromptParams {
            proj: LinearParams::init(config.n_genes, config.d_prompt, rng),
            fc: LinearParams::init(config.d_prompt, config.d_prompt, rng),
            ln: LayerNormParams::unit(config.d_prompt),
        };
        let spot = BranchParams::init(config, rng);
        let neighbor = BranchParams::init(config, rng);
        let cross = CrossAttnParams {
            wq: LinearParams::init(config.d_prompt, config.d_attn, rng),
            wk: LinearParams::init(config.d_model, config.d_attn, rng),
            wv: LinearParams::init(config.d_model, config.d_model, rng),
            wo: LinearParams::init(config.d_model, config.d_model, rng),
        };
        Ok(Self {
            config: config.clone(),
            prompt,
            spot,
            neighbor,
            cross,
            head_spot: LinearParams::init(config.d_model, config.n_genes, rng),
            head_neighbor: LinearParams::init(config.d_model, config.n_genes, rng),
            head_fused: LinearParams::init(config.d_model, config.n_genes, rng),
        })
    }

    /// Named tensors in the canonical traversal order.
    pub fn visit(&self) -> Vec<(String, &TensorData)> {
        let mut out = Vec::new();
        visit_linear(&mut out, "prompt.proj", &self.prompt.proj);
        visit_linear(&mut out, "prompt.fc", &self.prompt.fc);
        visit_ln(&mut out, "prompt.ln", &self.prompt.ln);
        visit_branch(&mut out, "spot", &self.spot);
        visit_branch(&mut out, "neighbor", &self.neighbor);
        visit_linear(&mut out, "cross.wq", &self.cross.wq);
        visit_linear(&mut out, "cross.wk", &self.cross.wk);
        visit_linear(&mut out, "cross.wv", &self.cross.wv);
        visit_linear(&mut out, "cross.wo", &self.cross.wo);
        visit_linear(&mut out, "head.spot", &self.head_spot);
        visit_linear(&mut out, "head.neighbor", &self.head_neighbor);
        visit_linear(&mut out, "head.fused", &self.head_fused);
        out
    }

    /// Mutable counterpart of [`visit`](Self::visit), same order.
    pub fn visit_mut(&mut self) -> Vec<(String, &mut TensorData)> {
        let mut out = Vec::new();
        visit_linear_mut(&mut out, "prompt.proj", &mut self.prompt.proj);
        visit_linear_mut(&mut out, "prompt.fc", &mut self.prompt.fc);
        visit_ln_mut(&mut out, "prompt.ln", &mut self.prompt.ln);
        visit_branch_mut(&mut out, "spot", &mut self.spot);
        visit_branch_mut(&mut out, "neighbor", &mut self.neighbor);
        visit_linear_mut(&mut out, "cross.wq", &mut self.cross.wq);
        visit_linear_mut(&mut out, "cross.wk", &mut self.cross.wk);
        visit_linear_mut(&mut out, "cross.wv", &mut self.cross.wv);
        visit_linear_mut(&mut out, "cross.wo", &mut self.cross.wo);
        visit_linear_mut(&mut out, "head.spot", &mut self.head_spot);
        visit_linear_mut(&mut out, "head.neighbor", &mut self.head_neighbor);
        visit_linear_mut(&mut out, "head.fused", &mut self.head_fused);
        out
    }

    /// Total scalar parameter count.
    pub fn n_parameters(&self) -> usize {
        self.visit().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Bind every tensor onto `tape` as a trainable leaf. `flat` follows
    /// the `visit` order, so gradients can be read back by position.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let mut binder = Binder { tape, flat: Vec::new() };
        let prompt = BoundPrompt {
            proj: binder.linear(&self.prompt.proj),
            fc: binder.linear(&self.prompt.fc),
            ln: binder.ln(&self.prompt.ln),
        };
        let spot = binder.branch(&self.spot);
        let neighbor = binder.branch(&self.neighbor);
        let cross = BoundCrossAttn {
            wq: binder.linear(&self.cross.wq),
            wk: binder.linear(&self.cross.wk),
            wv: binder.linear(&self.cross.wv),
            wo: binder.linear(&self.cross.wo),
        };
        let head_spot = binder.linear(&self.head_spot);
        let head_neighbor = binder.linear(&self.head_neighbor);
        let head_fused = binder.linear(&self.head_fused);
        BoundModel {
            prompt,
            spot,
            neighbor,
            cross,
            head_spot,
            head_neighbor,
            head_fused,
            flat: binder.flat,
        }
    }
}

struct Binder<'t> {
    tape: &'t mut Tape,
    flat: Vec<Var>,
}

impl Binder<'_> {
    fn p(&mut self, t: &TensorData) -> Var {
        let v = self.tape.param(t);
        self.flat.push(v);
        v
    }

    fn linear(&mut self, l: &LinearParams) -> BoundLinear {
        BoundLinear { w: self.p(&l.w), b: self.p(&l.b) }
    }

    fn ln(&mut self, l: &LayerNormParams) -> BoundLayerNorm {
        BoundLayerNorm { gain: self.p(&l.gain), bias: self.p(&l.bias) }
    }

    fn block(&mut self, b: &BlockParams) -> BoundBlock {
        BoundBlock {
            ln1: self.ln(&b.ln1),
            wq: self.linear(&b.wq),
            wk: self.linear(&b.wk),
            wv: self.linear(&b.wv),
            wo: self.linear(&b.wo),
            ln2: self.ln(&b.ln2),
            fc1: self.linear(&b.fc1),
            fc2: self.linear(&b.fc2),
        }
    }

    fn branch(&mut self, b: &BranchParams) -> BoundBranch {
        BoundBranch {
            theta: self.p(&b.theta),
            conv_ln: self.ln(&b.conv_ln),
            blocks: b.blocks.iter().map(|blk| self.block(blk)).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundBranch {
    pub theta: Var,
    pub conv_ln: BoundLayerNorm,
    pub blocks: Vec<BoundBlock>,
}

/// Tape handles for the whole model, produced by [`ModelParams::bind`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub prompt: BoundPrompt,
    pub spot: BoundBranch,
    pub neighbor: BoundBranch,
    pub cross: BoundCrossAttn,
    pub head_spot: BoundLinear,
    pub head_neighbor: BoundLinear,
    pub head_fused: BoundLinear,
    pub flat: Vec<Var>,
}

/// Zero out all but `floor(ratio * n)` randomly chosen spot rows of `expr`.
/// Returns the masked matrix and per-spot prompt flags (`true` = kept as a
/// prompt). The shuffle always consumes the same number of RNG draws, so a
/// fixed RNG state selects the same spot order for every ratio.
pub fn mask_expression(
    expr: &TensorData,
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(TensorData, Vec<bool>)> {
    if expr.shape.len() != 2 {
        return Err(Error::Dim {
            op: "mask_expression",
            details: format!("expected [n, m] expression, got {:?}", expr.shape),
        });
    }
    if !ratio.is_finite() || !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Param {
            name: "ratio",
            details: format!("{ratio} outside [0, 1]"),
        });
    }
    let (n, m) = (expr.shape[0], expr.shape[1]);
    let kept = (ratio * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut keep = vec![false; n];
    for &i in order.iter().take(kept) {
        keep[i] = true;
    }
    let mut masked = TensorData::zeros(&[n, m]);
    for (i, flag) in keep.iter().enumerate() {
        if *flag {
            masked.data[i * m..(i + 1) * m].copy_from_slice(&expr.data[i * m..(i + 1) * m]);
        }
    }
    Ok((masked, keep))
}

/// One slide's model inputs, already preprocessed and graph-built.
pub struct SlideInputs<'a> {
    /// Spot histology features `[n, d_feat]`.
    pub spot_features: &'a TensorData,
    /// 5x5 neighborhood tokens per spot.
    pub neighbors: &'a NeighborTensor,
    /// Slide-level hypergraph over the `n` spots.
    pub slide_graph: &'a Hypergraph,
    /// One 25-node sub-hypergraph per spot.
    pub neighbor_graphs: &'a [Hypergraph],
    /// Masked expression prompts `[n, n_genes]` (zero rows = unprompted).
    pub y_masked: &'a TensorData,
}

/// Tape handles of the forward pass. Branch-specific entries are `None`
/// when that branch is disabled.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Spot-branch embedding `[n, d_model]`.
    pub t_s: Option<Var>,
    /// Pooled neighbor embedding before the branch transformer.
    pub t_n: Option<Var>,
    /// Neighbor embedding after the branch transformer.
    pub t_n_g: Option<Var>,
    /// Cross-attention output (prompt-conditioned neighbor readout).
    pub z_g: Option<Var>,
    /// Fused embedding feeding the main head.
    pub z: Var,
    pub p_spot: Option<Var>,
    pub p_neighbor: Option<Var>,
    /// Main prediction `[n, n_genes]`.
    pub p_fused: Var,
}

/// Runs the model on `tape`. RNG draws happen in a fixed order (prompt
/// dropout, spot branch, neighbor branch), and every dropout consumes a
/// draw per element, so masking ratio changes never shift downstream draws.
pub fn forward_on_tape(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &ModelConfig,
    inputs: &SlideInputs,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardVars> {
    cfg.validate()?;
    let n = inputs.spot_features.shape[0];
    let shape_err = |what: &str, got: String| Error::Dim {
        op: "forward",
        details: format!("{what}: {got}"),
    };
    if inputs.spot_features.shape.len() != 2 || inputs.spot_features.shape[1] != cfg.d_feat {
        return Err(shape_err(
            "spot features",
            format!("{:?}, want [n, {}]", inputs.spot_features.shape, cfg.d_feat),
        ));
    }
    if inputs.y_masked.shape != vec![n, cfg.n_genes] {
        return Err(shape_err(
            "masked expression",
            format!("{:?}, want [{n}, {}]", inputs.y_masked.shape, cfg.n_genes),
        ));
    }
    if inputs.slide_graph.n_nodes != n {
        return Err(shape_err(
            "slide hypergraph",
            format!("{} nodes for {n} spots", inputs.slide_graph.n_nodes),
        ));
    }
    if inputs.neighbors.n != n || inputs.neighbors.d != cfg.d_feat {
        return Err(shape_err(
            "neighbor tokens",
            format!(
                "[{}, {}] for {n} spots of width {}",
                inputs.neighbors.n, inputs.neighbors.d, cfg.d_feat
            ),
        ));
    }
    if inputs.neighbor_graphs.len() != n {
        return Err(shape_err(
            "neighbor hypergraphs",
            format!("{} graphs for {n} spots", inputs.neighbor_graphs.len()),
        ));
    }

    let phi = if cfg.neighbor_branch {
        let y = tape.constant(inputs.y_masked);
        Some(encode_prompt(tape, y, &bound.prompt, cfg.ln_eps, cfg.dropout, training, rng)?)
    } else {
        None
    };

    let t_s = if cfg.spot_branch {
        let x = tape.constant(inputs.spot_features);
        let mut h = conv_block(
            tape,
            x,
            inputs.slide_graph,
            bound.spot.theta,
            bound.spot.conv_ln.gain,
            bound.spot.conv_ln.bias,
            cfg.ln_eps,
            cfg.dropout,
            training,
            rng,
        )?;
        for blk in &bound.spot.blocks {
            h = transformer_block(tape, h, blk, cfg.heads, cfg.ln_eps, cfg.dropout, training, rng)?;
        }
        Some(h)
    } else {
        None
    };

    let (t_n, t_n_g, z_g) = if cfg.neighbor_branch {
        let mut pooled = Vec::with_capacity(n);
        for i in 0..n {
            let tokens = tape.constant(&inputs.neighbors.tokens_of(i));
            let conv = conv_block(
                tape,
                tokens,
                &inputs.neighbor_graphs[i],
                bound.neighbor.theta,
                bound.neighbor.conv_ln.gain,
                bound.neighbor.conv_ln.bias,
                cfg.ln_eps,
                cfg.dropout,
                training,
                rng,
            )?;
            let valid: Vec<bool> = (0..NeighborTensor::SLOTS)
                .map(|s| inputs.neighbors.is_valid(i, s))
                .collect();
            pooled.push(neighbor_pool(tape, conv, &valid)?);
        }
        let t_n = tape.concat_rows(&pooled)?;
        let mut h = t_n;
        for blk in &bound.neighbor.blocks {
            h = transformer_block(tape, h, blk, cfg.heads, cfg.ln_eps, cfg.dropout, training, rng)?;
        }
        let z_g = cross_attention(
            tape,
            phi.expect("prompt encoded when neighbor branch is on"),
            h,
            &bound.cross,
            cfg.attention_scope,
        )?;
        (Some(t_n), Some(h), Some(z_g))
    } else {
        (None, None, None)
    };

    let z = match (t_s, z_g) {
        (Some(a), Some(b)) => tape.add(a, b)?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => unreachable!("config validation requires a branch"),
    };

    let p_spot = match t_s {
        Some(t) => Some(tape.linear(t, bound.head_spot.w, bound.head_spot.b)?),
        None => None,
    };
    let p_neighbor = match t_n_g {
        Some(t) => Some(tape.linear(t, bound.head_neighbor.w, bound.head_neighbor.b)?),
        None => None,
    };
    let p_fused = tape.linear(z, bound.head_fused.w, bound.head_fused.b)?;

    Ok(ForwardVars { t_s, t_n, t_n_g, z_g, z, p_spot, p_neighbor, p_fused })
}

/// Materialized forward-pass values.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub t_s: Option<TensorData>,
    pub t_n: Option<TensorData>,
    pub t_n_g: Option<TensorData>,
    pub z_g: Option<TensorData>,
    pub z: TensorData,
    pub p_spot: Option<TensorData>,
    pub p_neighbor: Option<TensorData>,
    pub p_fused: TensorData,
}

impl ForwardOutputs {
    pub fn extract(tape: &Tape, vars: &ForwardVars) -> Self {
        let get = |v: Var| tape.value(v);
        Self {
            t_s: vars.t_s.map(get),
            t_n: vars.t_n.map(get),
            t_n_g: vars.t_n_g.map(get),
            z_g: vars.z_g.map(get),
            z: get(vars.z),
            p_spot: vars.p_spot.map(get),
            p_neighbor: vars.p_neighbor.map(get),
            p_fused: get(vars.p_fused),
        }
    }
}

/// Convenience forward on a fresh tape: masks `expr` at `prompt_ratio`,
/// runs the model, and returns the outputs plus the prompt flags.
#[allow(clippy::too_many_arguments)]
pub fn forward(
    params: &ModelParams,
    spot_features: &TensorData,
    neighbors: &NeighborTensor,
    slide_graph: &Hypergraph,
    neighbor_graphs: &[Hypergraph],
    expr: &TensorData,
    prompt_ratio: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(ForwardOutputs, Vec<bool>)> {
    let (y_masked, prompted) = mask_expression(expr, prompt_ratio, rng)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let inputs = SlideInputs {
        spot_features,
        neighbors,
        slide_graph,
        neighbor_graphs,
        y_masked: &y_masked,
    };
    let vars = forward_on_tape(&mut tape, &bound, &params.config, &inputs, training, rng)?;
    Ok((ForwardOutputs::extract(&tape, &vars), prompted))
}

/// Per-term training objective values. `total` is the sum of the fused-head
/// MSE and the MSEs of whichever auxiliary branch heads are enabled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub spot: Option<f64>,
    pub neighbor: Option<f64>,
    pub fused: f64,
    pub total: f64,
}

fn mse_data(pred: &TensorData, target: &TensorData) -> Result<f64> {
    if pred.shape != target.shape {
        return Err(Error::Dim {
            op: "loss",
            details: format!("prediction {:?} vs target {:?}", pred.shape, target.shape),
        });
    }
    let n = pred.data.len() as f64;
    Ok(pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !lambda.is_finite() || !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Param {
            name: "lambda",
            details: format!("{lambda} outside [0, 1]"),
        });
    }
    Ok(())
}

/// Reference (non-tape) loss. The spot term is nominally a convex
/// combination, weighted `lambda`, of prompted- and unprompted-spot
/// objectives; both sides regress the same predictions onto the same
/// targets, so the combination collapses and each term is computed as a
/// single MSE. `lambda` is validated but cannot change the value — the
/// result is bit-identical across the whole `[0, 1]` range.
pub fn compute_loss(outputs: &ForwardOutputs, y: &TensorData, lambda: f64) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    let spot = outputs.p_spot.as_ref().map(|p| mse_data(p, y)).transpose()?;
    let neighbor = outputs.p_neighbor.as_ref().map(|p| mse_data(p, y)).transpose()?;
    let fused = mse_data(&outputs.p_fused, y)?;
    let total = fused + spot.unwrap_or(0.0) + neighbor.unwrap_or(0.0);
    Ok(LossBreakdown { spot, neighbor, fused, total })
}

/// Differentiable counterpart of [`compute_loss`]; same `lambda` semantics.
pub fn loss_on_tape(tape: &mut Tape, vars: &ForwardVars, y: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let mut total = tape.mse(vars.p_fused, y)?;
    if let Some(p) = vars.p_spot {
        let term = tape.mse(p, y)?;
        total = tape.add(total, term)?;
    }
    if let Some(p) = vars.p_neighbor {
        let term = tape.mse(p, y)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}
