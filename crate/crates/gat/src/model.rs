//! The gaze network: a hierarchical shifted-window spatiotemporal attention
//! encoder over embedded patch tokens, followed by a decoder that pools
//! spatially, restores the input frame count by linear temporal
//! interpolation, and maps each frame to a unit 3D gaze vector.
//!
//! One forward implementation serves images and clips: images are duplicated
//! into a two-frame clip before patchification and decoded without
//! interpolation. The forward pass is built on [`crate::tape`], so the same
//! code path yields inference values and training gradients.

use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::GazeVector3;
use crate::patchify::{duplicate_if_image, patchify, ClipTensor, PatchSpec, PatchifyError, TokenSequence};
use crate::tape::{Tape, Tensor, VarId};
use crate::windows::{build_plan, spatial_table_len, temporal_table_len, PlanError, WindowPlan, WindowSpec};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Patch(#[from] PatchifyError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("patch merging needs an even spatial grid, got {h}x{w}")]
    OddMergeGrid { h: usize, w: usize },
    #[error("decoder expects 1 or {expected} frames, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stages: Vec<StageConfig>,
    pub window: WindowSpec,
    pub mlp_ratio: f64,
    pub patch: PatchSpec,
    pub decoder_hidden: usize,
}

impl ModelConfig {
    /// Desk-scale default: two stages of two blocks each, spatial merging in
    /// between, for 64×64 inputs.
    pub fn desk_default() -> ModelConfig {
        ModelConfig {
            stages: vec![
                StageConfig { blocks: 2, dim: 32, heads: 2 },
                StageConfig { blocks: 2, dim: 64, heads: 4 },
            ],
            window: WindowSpec { t: 2, h: 4, w: 4 },
            mlp_ratio: 2.0,
            patch: PatchSpec { t: 2, h: 4, w: 4, c: 32 },
            decoder_hidden: 128,
        }
    }

    pub fn final_dim(&self) -> usize {
        self.stages.last().map(|s| s.dim).unwrap_or(0)
    }

    pub fn mlp_hidden(&self, dim: usize) -> usize {
        (self.mlp_ratio * dim as f64).round() as usize
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.stages.is_empty() {
            return fail("at least one stage".into());
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.blocks < 2 {
                return fail(format!("stage {i} has {} blocks; need at least a regular and a shifted one", st.blocks));
            }
            if st.dim == 0 || st.heads == 0 || st.dim % st.heads != 0 {
                return fail(format!("stage {i}: heads {} must divide dim {}", st.heads, st.dim));
            }
            if i > 0 && st.dim != 2 * self.stages[i - 1].dim {
                return fail(format!("stage {i} dim {} must double the previous stage", st.dim));
            }
            if self.mlp_hidden(st.dim) == 0 {
                return fail(format!("mlp_ratio {} collapses stage {i} hidden width", self.mlp_ratio));
            }
        }
        if self.patch.c != self.stages[0].dim {
            return fail(format!("embedding width {} must equal the first stage dim", self.patch.c));
        }
        // The decoder doubles the temporal length exactly once, so tubelets
        // must span exactly two frames.
        if self.patch.t != 2 {
            return fail(format!("temporal patch extent must be 2, got {}", self.patch.t));
        }
        if self.patch.h == 0 || self.patch.w == 0 {
            return fail("spatial patch extents must be positive".into());
        }
        if self.window.t == 0 || self.window.h == 0 || self.window.w == 0 {
            return fail("window extents must be positive".into());
        }
        if self.decoder_hidden == 0 {
            return fail("decoder hidden width must be positive".into());
        }
        Ok(())
    }
}

/// One named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// All model parameters in fixed declaration order. The order is part of the
/// checkpoint format.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub entries: Vec<ParamTensor>,
    index: HashMap<String, usize>,
}

/// Weight matrices initialize at sigma = 1/sqrt(fan_in) so activations
/// keep unit scale through every linear layer at depth.
pub fn init_sigma(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Normal sample rejected outside two standard deviations.
fn trunc_normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    loop {
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.abs() <= 2.0 {
            return z * sigma;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum InitKind {
    TruncNormal,
    Zeros,
    Ones,
    IntoCamera,
}

/// One slot of the declaration-order parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

/// Names, shapes, and initialization kinds in declaration order. The order
/// is part of the checkpoint format.
pub(crate) fn layout(cfg: &ModelConfig) -> Vec<LayoutEntry> {
    use InitKind::*;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: InitKind| {
        out.push(LayoutEntry { name, shape, init });
    };
    let w = cfg.window.as_array();
    let c0 = cfg.patch.c;
    push("embed.weight".into(), vec![cfg.patch.patch_len(), c0], TruncNormal);
    push("embed.bias".into(), vec![c0], Zeros);
    push("embed.norm.gain".into(), vec![c0], Ones);
    push("embed.norm.shift".into(), vec![c0], Zeros);
    for (s, st) in cfg.stages.iter().enumerate() {
        let c = st.dim;
        let hid = cfg.mlp_hidden(c);
        for blk in 0..st.blocks {
            let p = format!("s{s}.b{blk}");
            push(format!("{p}.norm1.gain"), vec![c], Ones);
            push(format!("{p}.norm1.shift"), vec![c], Zeros);
            push(format!("{p}.attn.qkv.weight"), vec![c, 3 * c], TruncNormal);
            push(format!("{p}.attn.qkv.bias"), vec![3 * c], Zeros);
            push(format!("{p}.attn.bias.spatial"), vec![st.heads, spatial_table_len(w)], Zeros);
            push(format!("{p}.attn.bias.temporal"), vec![st.heads, temporal_table_len(w)], Zeros);
            push(format!("{p}.attn.proj.weight"), vec![c, c], TruncNormal);
            push(format!("{p}.attn.proj.bias"), vec![c], Zeros);
            push(format!("{p}.norm2.gain"), vec![c], Ones);
            push(format!("{p}.norm2.shift"), vec![c], Zeros);
            push(format!("{p}.mlp.fc1.weight"), vec![c, hid], TruncNormal);
            push(format!("{p}.mlp.fc1.bias"), vec![hid], Zeros);
            push(format!("{p}.mlp.fc2.weight"), vec![hid, c], TruncNormal);
            push(format!("{p}.mlp.fc2.bias"), vec![c], Zeros);
        }
        if s + 1 < cfg.stages.len() {
            push(format!("s{s}.merge.norm.gain"), vec![4 * c], Ones);
            push(format!("s{s}.merge.norm.shift"), vec![4 * c], Zeros);
            push(format!("s{s}.merge.reduce.weight"), vec![4 * c, 2 * c], TruncNormal);
        }
    }
    let cf = cfg.final_dim();
    push("final.norm.gain".into(), vec![cf], Ones);
    push("final.norm.shift".into(), vec![cf], Zeros);
    push("decoder.fc1.weight".into(), vec![cf, cfg.decoder_hidden], TruncNormal);
    push("decoder.fc1.bias".into(), vec![cfg.decoder_hidden], Zeros);
    push("decoder.fc2.weight".into(), vec![cfg.decoder_hidden, 3], TruncNormal);
    push("decoder.fc2.bias".into(), vec![3], IntoCamera);
    out
}

impl ParamSet {
    /// Fresh parameters: truncated-normal weights, zero biases and bias
    /// tables, unit normalization gains. The decoder output bias starts at
    /// the into-camera direction so initial pre-normalization outputs have
    /// unit scale.
    pub fn init(cfg: &ModelConfig, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = layout(cfg)
            .into_iter()
            .map(|e| {
                let n = e.shape.iter().product();
                let data = match e.init {
                    InitKind::TruncNormal => {
                        let sigma = init_sigma(e.shape[0]);
                        (0..n).map(|_| trunc_normal(&mut rng, sigma)).collect()
                    }
                    InitKind::Zeros => vec![0.0; n],
                    InitKind::Ones => vec![1.0; n],
                    InitKind::IntoCamera => vec![0.0, 0.0, -1.0],
                };
                ParamTensor { name: e.name, shape: e.shape, data }
            })
            .collect();
        ParamSet::from_entries(entries)
    }

    pub fn from_entries(entries: Vec<ParamTensor>) -> ParamSet {
        let index = entries.iter().enumerate().map(|(i, e)| (e.name.clone(), i)).collect();
        ParamSet { entries, index }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }
}

/// Per-frame unit gaze directions; a single row for images.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeOutput {
    pub directions: Vec<GazeVector3>,
}

/// Parameter leaves registered on a tape, addressable by name.
struct Vars<'a> {
    params: &'a ParamSet,
    leaves: Vec<VarId>,
}

impl<'a> Vars<'a> {
    fn register(tape: &mut Tape, params: &'a ParamSet, trainable: bool) -> Vars<'a> {
        let leaves = params
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let t = Tensor::new(e.shape.clone(), e.data.clone());
                if trainable {
                    tape.param(t, i)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        Vars { params, leaves }
    }

    fn get(&self, name: &str) -> VarId {
        self.leaves[self.params.index_of(name).unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }
}

/// Multi-head windowed attention over pre-normalized tokens (N×C), returning
/// projected token updates in original row order. Scores receive the
/// relative-position bias from the spatial and temporal tables plus the
/// plan's shift mask.
#[allow(clippy::too_many_arguments)]
pub fn window_attention(
    tape: &mut Tape,
    x: VarId,
    plan: &WindowPlan,
    heads: usize,
    qkv_w: VarId,
    qkv_b: VarId,
    spatial: VarId,
    temporal: VarId,
    proj_w: VarId,
    proj_b: VarId,
) -> VarId {
    let dim = tape.value(x).shape[1];
    assert_eq!(dim % heads, 0, "heads divide dim");
    let dh = dim / heads;
    let (nw, m) = (plan.windows, plan.m);

    let qkv = tape.matmul(x, qkv_w);
    let qkv = tape.add_row_bias(qkv, qkv_b);
    let tiled = tape.gather_rows(qkv, plan.gather.clone());
    let q = tape.slice_cols(tiled, 0, dim);
    let k = tape.slice_cols(tiled, dim, dim);
    let v = tape.slice_cols(tiled, 2 * dim, dim);
    let q = tape.scale(q, 1.0 / (dh as f64).sqrt());
    let qh = tape.permute(q, vec![nw, m, heads, dh], vec![0, 2, 1, 3], vec![nw * heads, m, dh]);
    let kh = tape.permute(k, vec![nw, m, heads, dh], vec![0, 2, 1, 3], vec![nw * heads, m, dh]);
    let vh = tape.permute(v, vec![nw, m, heads, dh], vec![0, 2, 1, 3], vec![nw * heads, m, dh]);
    let scores = tape.bmm(qh, kh, true);
    let scores = tape.reshape(scores, vec![nw, heads, m, m]);
    let bias = tape.rel_bias(spatial, temporal, plan.sidx.clone(), plan.tidx.clone(), heads, m);
    let scores = tape.add_bias_mask(scores, bias, plan.mask.clone(), nw, heads, m);
    let probs = tape.softmax(scores);
    let probs = tape.reshape(probs, vec![nw * heads, m, m]);
    let out = tape.bmm(probs, vh, false);
    let out = tape.permute(out, vec![nw, heads, m, dh], vec![0, 2, 1, 3], vec![nw * m, dim]);
    let out = tape.gather_rows(out, plan.scatter.clone());
    let out = tape.matmul(out, proj_w);
    tape.add_row_bias(out, proj_b)
}

/// One pre-normalized transformer block: windowed attention and a two-layer
/// feed-forward, each with a residual connection.
fn block_on_tape(
    tape: &mut Tape,
    vars: &Vars,
    x: VarId,
    plan: &WindowPlan,
    heads: usize,
    prefix: &str,
) -> VarId {
    let n1 = tape.layer_norm(x, vars.get(&format!("{prefix}.norm1.gain")), vars.get(&format!("{prefix}.norm1.shift")));
    let attn = window_attention(
        tape,
        n1,
        plan,
        heads,
        vars.get(&format!("{prefix}.attn.qkv.weight")),
        vars.get(&format!("{prefix}.attn.qkv.bias")),
        vars.get(&format!("{prefix}.attn.bias.spatial")),
        vars.get(&format!("{prefix}.attn.bias.temporal")),
        vars.get(&format!("{prefix}.attn.proj.weight")),
        vars.get(&format!("{prefix}.attn.proj.bias")),
    );
    let x = tape.add(x, attn);
    let n2 = tape.layer_norm(x, vars.get(&format!("{prefix}.norm2.gain")), vars.get(&format!("{prefix}.norm2.shift")));
    let h = tape.matmul(n2, vars.get(&format!("{prefix}.mlp.fc1.weight")));
    let h = tape.add_row_bias(h, vars.get(&format!("{prefix}.mlp.fc1.bias")));
    let h = tape.gelu(h);
    let h = tape.matmul(h, vars.get(&format!("{prefix}.mlp.fc2.weight")));
    let h = tape.add_row_bias(h, vars.get(&format!("{prefix}.mlp.fc2.bias")));
    tape.add(x, h)
}

/// Concatenates each 2×2 spatial neighborhood, normalizes, and halves the
/// channel-doubled width back to 2C. Grid order is t-major, so neighborhood
/// rows are gathered per temporal slice.
fn merge_on_tape(
    tape: &mut Tape,
    vars: &Vars,
    x: VarId,
    grid: [usize; 3],
    stage: usize,
    dim: usize,
) -> Result<(VarId, [usize; 3]), ModelError> {
    let [nt, nh, nw] = grid;
    if nh % 2 != 0 || nw % 2 != 0 {
        return Err(ModelError::OddMergeGrid { h: nh, w: nw });
    }
    let mut idx = Vec::with_capacity(nt * nh * nw);
    for t in 0..nt {
        for h2 in 0..nh / 2 {
            for w2 in 0..nw / 2 {
                for (dh, dw) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    idx.push((t * nh + 2 * h2 + dh) * nw + 2 * w2 + dw);
                }
            }
        }
    }
    let n_out = nt * (nh / 2) * (nw / 2);
    let g = tape.gather_rows(x, Rc::new(idx));
    let cat = tape.reshape(g, vec![n_out, 4 * dim]);
    let ln = tape.layer_norm(
        cat,
        vars.get(&format!("s{stage}.merge.norm.gain")),
        vars.get(&format!("s{stage}.merge.norm.shift")),
    );
    let red = tape.matmul(ln, vars.get(&format!("s{stage}.merge.reduce.weight")));
    Ok((red, [nt, nh / 2, nw / 2]))
}

fn encode_on_tape(
    tape: &mut Tape,
    vars: &Vars,
    cfg: &ModelConfig,
    mut x: VarId,
    mut grid: [usize; 3],
) -> Result<(VarId, [usize; 3]), ModelError> {
    for (s, st) in cfg.stages.iter().enumerate() {
        let plans = [
            build_plan(grid, cfg.window.as_array(), false)?,
            build_plan(grid, cfg.window.as_array(), true)?,
        ];
        for blk in 0..st.blocks {
            x = block_on_tape(tape, vars, x, &plans[blk % 2], st.heads, &format!("s{s}.b{blk}"));
        }
        if s + 1 < cfg.stages.len() {
            (x, grid) = merge_on_tape(tape, vars, x, grid, s, st.dim)?;
        }
    }
    let x = tape.layer_norm(x, vars.get("final.norm.gain"), vars.get("final.norm.shift"));
    Ok((x, grid))
}

/// Row-stochastic (t_out × t_in) matrix for piecewise-linear temporal
/// interpolation between frame centers, endpoints replicated.
pub(crate) fn interp_matrix(t_in: usize, t_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; t_out * t_in];
    for k in 0..t_out {
        let u = (k as f64 + 0.5) * t_in as f64 / t_out as f64 - 0.5;
        if u <= 0.0 {
            m[k * t_in] = 1.0;
        } else if u >= (t_in - 1) as f64 {
            m[k * t_in + t_in - 1] = 1.0;
        } else {
            let j = u.floor() as usize;
            let f = u - j as f64;
            m[k * t_in + j] = 1.0 - f;
            m[k * t_in + j + 1] = f;
        }
    }
    m
}

fn decode_on_tape(
    tape: &mut Tape,
    vars: &Vars,
    x: VarId,
    grid: [usize; 3],
    t_in: usize,
) -> Result<VarId, ModelError> {
    let [nt, nh, nw] = grid;
    let pooled = tape.group_mean_rows(x, nh * nw);
    let rows = if t_in == 1 {
        tape.gather_rows(pooled, Rc::new(vec![0]))
    } else {
        if t_in != 2 * nt {
            return Err(ModelError::LengthMismatch { expected: 2 * nt, got: t_in });
        }
        let m = tape.constant(Tensor::new(vec![t_in, nt], interp_matrix(nt, t_in)));
        tape.matmul(m, pooled)
    };
    let h = tape.matmul(rows, vars.get("decoder.fc1.weight"));
    let h = tape.add_row_bias(h, vars.get("decoder.fc1.bias"));
    let h = tape.gelu(h);
    let o = tape.matmul(h, vars.get("decoder.fc2.weight"));
    let o = tape.add_row_bias(o, vars.get("decoder.fc2.bias"));
    Ok(tape.normalize_rows(o))
}

/// The stem consumes standardized intensities: zero mean, unit variance
/// over the whole sample, with a variance floor for flat inputs. Global
/// brightness and contrast of a crop carry no gaze information.
fn standardize(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = 1.0 / var.sqrt().max(1e-6);
    for v in values {
        *v = (*v - mean) * scale;
    }
}

/// Full forward pass on an existing tape. Returns the (T_in × 3) unit gaze
/// prediction variable; with `trainable`, parameter leaves receive gradients
/// on backward, indexed by their position in `params.entries`.
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &ModelConfig,
    clip: ClipTensor,
    trainable: bool,
) -> Result<VarId, ModelError> {
    let t_in = clip.t;
    let clip = duplicate_if_image(clip);
    let patches = patchify(&clip, cfg.patch)?;
    let vars = Vars::register(tape, params, trainable);
    // Patch extraction permutes pixel entries, so standardizing the patch
    // matrix equals standardizing the clip.
    let mut patch_data = patches.patches;
    standardize(&mut patch_data);
    let x = tape.constant(Tensor::new(vec![patches.n, patches.patch_len], patch_data));
    let x = tape.matmul(x, vars.get("embed.weight"));
    let x = tape.add_row_bias(x, vars.get("embed.bias"));
    let x = tape.layer_norm(x, vars.get("embed.norm.gain"), vars.get("embed.norm.shift"));
    let grid = [patches.grid.0, patches.grid.1, patches.grid.2];
    let (x, grid) = encode_on_tape(tape, &vars, cfg, x, grid)?;
    decode_on_tape(tape, &vars, x, grid, t_in)
}

fn rows_to_output(t: &Tensor) -> GazeOutput {
    let directions = t
        .data
        .chunks_exact(3)
        .map(|r| GazeVector3 { x: r[0], y: r[1], z: r[2] })
        .collect();
    GazeOutput { directions }
}

/// Inference: one unit gaze direction per input frame (one total for
/// images). Deterministic given parameters and input.
pub fn model_forward(clip: ClipTensor, params: &ParamSet, cfg: &ModelConfig) -> Result<GazeOutput, ModelError> {
    let mut tape = Tape::new();
    let out = forward_on_tape(&mut tape, params, cfg, clip, false)?;
    Ok(rows_to_output(tape.value(out)))
}

/// Encoder stages over already-embedded tokens, including the final
/// normalization.
pub fn encoder_forward(
    tokens: &TokenSequence,
    params: &ParamSet,
    cfg: &ModelConfig,
) -> Result<TokenSequence, ModelError> {
    let mut tape = Tape::new();
    let vars = Vars::register(&mut tape, params, false);
    let x = tape.constant(Tensor::new(vec![tokens.n, tokens.c], tokens.tokens.clone()));
    let grid = [tokens.grid.0, tokens.grid.1, tokens.grid.2];
    let (x, grid) = encode_on_tape(&mut tape, &vars, cfg, x, grid)?;
    let out = tape.value(x);
    Ok(TokenSequence {
        tokens: out.data.clone(),
        n: out.shape[0],
        c: out.shape[1],
        grid: (grid[0], grid[1], grid[2]),
    })
}

/// Spatial 2×2 merge of a token grid using stage `stage`'s merge weights.
pub fn patch_merge_spatial(
    tokens: &TokenSequence,
    params: &ParamSet,
    stage: usize,
) -> Result<TokenSequence, ModelError> {
    let name = format!("s{stage}.merge.reduce.weight");
    if params.index_of(&name).is_none() {
        return Err(ModelError::Config(format!("stage {stage} has no merge layer")));
    }
    let mut tape = Tape::new();
    let vars = Vars::register(&mut tape, params, false);
    let x = tape.constant(Tensor::new(vec![tokens.n, tokens.c], tokens.tokens.clone()));
    let grid = [tokens.grid.0, tokens.grid.1, tokens.grid.2];
    let (out, grid) = merge_on_tape(&mut tape, &vars, x, grid, stage, tokens.c)?;
    let t = tape.value(out);
    Ok(TokenSequence { tokens: t.data.clone(), n: t.shape[0], c: t.shape[1], grid: (grid[0], grid[1], grid[2]) })
}

/// Decoder alone: spatial mean pooling, temporal interpolation back to
/// `t_in` frames (skipped when `t_in` is 1), shared per-row MLP, and
/// normalization.
pub fn decode_gaze(tokens: &TokenSequence, params: &ParamSet, t_in: usize) -> Result<GazeOutput, ModelError> {
    let mut tape = Tape::new();
    let vars = Vars::register(&mut tape, params, false);
    let x = tape.constant(Tensor::new(vec![tokens.n, tokens.c], tokens.tokens.clone()));
    let grid = [tokens.grid.0, tokens.grid.1, tokens.grid.2];
    let out = decode_on_tape(&mut tape, &vars, x, grid, t_in)?;
    Ok(rows_to_output(tape.value(out)))
}
