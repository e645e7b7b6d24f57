//! Structure-aware feature extractor.
//!
//! Every level runs nine branches (the content features and their eight
//! directional gradient maps). Each branch has its own long-range encoder
//! (windowed attention block), short-range encoder (conv block) and a
//! per-position MLP fusing the two. The nine fused features are merged and
//! downsampled into the next level.

use rand::Rng;

use super::SafeConfig;
use crate::autograd::{Graph, Var};
use crate::error::{usage, Result};
use crate::nn::{act, conv, conv_act};
use crate::params::{init_conv, ParamStore};
use crate::tensor::Tensor;
use crate::DIRECTION_OFFSETS;

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Number of branches per level: content plus eight directions.
pub const BRANCHES: usize = 9;

/// Called on every directional gradient map before it enters its branch,
/// with `(level, direction, map)`. Used to probe branch isolation.
pub type GradientHook<'a> = dyn Fn(&Graph, usize, usize, Var) -> Result<Var> + 'a;

pub(crate) fn level_prefix(level: usize) -> String {
    format!("s.safe.l{level}")
}

pub(crate) fn branch_prefix(level: usize, branch: usize) -> String {
    format!("s.safe.l{level}.b{branch}")
}

pub fn init_lre(store: &mut ParamStore, rng: &mut impl Rng, p: &str, c: usize, mlp_ratio: f64) {
    let hidden = ((c as f64 * mlp_ratio).round() as usize).max(1);
    for n in ["norm1", "norm2"] {
        store.insert(format!("{p}.{n}.g"), Tensor::full(&[c], 1.0));
        store.insert(format!("{p}.{n}.b"), Tensor::zeros(&[c]));
    }
    init_conv(store, rng, &format!("{p}.qkv"), c, 3 * c, 1);
    init_conv(store, rng, &format!("{p}.proj"), c, c, 1);
    init_conv(store, rng, &format!("{p}.fc1"), c, hidden, 1);
    store.insert(format!("{p}.dw.w"), crate::params::he_normal(rng, &[hidden, 1, 3, 3], 9));
    store.insert(format!("{p}.dw.b"), Tensor::zeros(&[hidden]));
    init_conv(store, rng, &format!("{p}.fc2"), hidden, c, 1);
}

pub fn init_sre(store: &mut ParamStore, rng: &mut impl Rng, p: &str, c: usize) {
    init_conv(store, rng, &format!("{p}.c1"), c, c, 3);
    init_conv(store, rng, &format!("{p}.c2"), c, c, 3);
}

pub fn init_lsr(store: &mut ParamStore, rng: &mut impl Rng, p: &str, c: usize) {
    init_conv(store, rng, &format!("{p}.fc1"), 2 * c, 2 * c, 1);
    init_conv(store, rng, &format!("{p}.fc2"), 2 * c, c, 1);
}

pub fn init_grad_fuse(store: &mut ParamStore, rng: &mut impl Rng, p: &str, c: usize, c_next: usize) {
    init_conv(store, rng, &format!("{p}.merge"), BRANCHES * c, c, 1);
    init_conv(store, rng, &format!("{p}.down"), c, c_next, 3);
}

pub fn init_safe(store: &mut ParamStore, rng: &mut impl Rng, cfg: &SafeConfig) {
    init_conv(store, rng, "s.safe.stem", cfg.in_channels, cfg.channels[0], 3);
    for level in 0..cfg.levels {
        let c = cfg.channels[level];
        for b in 0..BRANCHES {
            let p = branch_prefix(level, b);
            init_lre(store, rng, &format!("{p}.lre"), c, cfg.mlp_ratio);
            init_sre(store, rng, &format!("{p}.sre"), c);
            init_lsr(store, rng, &format!("{p}.lsr"), c);
        }
        init_grad_fuse(store, rng, &format!("{}.gradf", level_prefix(level)), c, cfg.out_channels(level));
    }
}

fn affine_norm(g: &Graph, ps: &ParamStore, p: &str, x: Var) -> Result<Var> {
    let n = g.channel_norm(x, NORM_EPS)?;
    let n = g.mul_channel(n, g.param(ps, &format!("{p}.g"))?)?;
    g.add_channel(n, g.param(ps, &format!("{p}.b"))?)
}

/// Row-stochastic attention weights `(groups, tokens, tokens)` and the value
/// windows of the attention half of an LRE block.
fn attention(g: &Graph, ps: &ParamStore, p: &str, x: Var, window: usize, heads: usize) -> Result<(Var, Var)> {
    let c = g.shape(x)[1];
    let t = affine_norm(g, ps, &format!("{p}.norm1"), x)?;
    let qkv = conv(g, ps, &format!("{p}.qkv"), t, 1)?;
    let q = g.to_windows(g.slice_channels(qkv, 0, c)?, window, heads)?;
    let k = g.to_windows(g.slice_channels(qkv, c, c)?, window, heads)?;
    let v = g.to_windows(g.slice_channels(qkv, 2 * c, c)?, window, heads)?;
    let scale = 1.0 / ((c / heads) as f64).sqrt();
    let scores = g.scale(g.bmm(q, k, true)?, scale);
    let attn = g.softmax_last(scores)?;
    Ok((attn, v))
}

fn check_window(shape: &[usize], window: usize, heads: usize) -> Result<()> {
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(usage(format!("attention window {window} does not divide {h}x{w}")));
    }
    if heads == 0 || c % heads != 0 {
        return Err(usage(format!("{c} channels do not split into {heads} heads")));
    }
    Ok(())
}

/// Attention weights of an LRE block, for inspection.
pub fn lre_attention_weights(g: &Graph, ps: &ParamStore, p: &str, x: Var, window: usize, heads: usize) -> Result<Var> {
    check_window(&g.shape(x), window, heads)?;
    Ok(attention(g, ps, p, x, window, heads)?.0)
}

/// Long-range encoder: windowed multi-head self-attention then a feed-forward
/// block with a depthwise 3x3 conv, both residual.
pub fn lre_forward(g: &Graph, ps: &ParamStore, p: &str, x: Var, window: usize, heads: usize) -> Result<Var> {
    let shape = g.shape(x);
    check_window(&shape, window, heads)?;
    let (attn, v) = attention(g, ps, p, x, window, heads)?;
    let o = g.bmm(attn, v, false)?;
    let o = g.from_windows(o, [shape[0], shape[1], shape[2], shape[3]], window, heads)?;
    let x1 = g.add(x, conv(g, ps, &format!("{p}.proj"), o, 1)?)?;

    let t = affine_norm(g, ps, &format!("{p}.norm2"), x1)?;
    let y = conv_act(g, ps, &format!("{p}.fc1"), t, 1)?;
    let dw = g.depthwise_conv2d(y, g.param(ps, &format!("{p}.dw.w"))?, Some(g.param(ps, &format!("{p}.dw.b"))?))?;
    let y = conv(g, ps, &format!("{p}.fc2"), act(g, dw), 1)?;
    g.add(x1, y)
}

/// Short-range encoder: `x + conv(act(conv(x)))` with 3x3 kernels.
pub fn sre_forward(g: &Graph, ps: &ParamStore, p: &str, x: Var) -> Result<Var> {
    let y = conv_act(g, ps, &format!("{p}.c1"), x, 1)?;
    let y = conv(g, ps, &format!("{p}.c2"), y, 1)?;
    g.add(x, y)
}

/// Per-position MLP over `concat(l, s)`.
pub fn lsr_fuse(g: &Graph, ps: &ParamStore, p: &str, l: Var, s: Var) -> Result<Var> {
    if g.shape(l) != g.shape(s) {
        return Err(usage(format!("lsr_fuse inputs differ: {:?} vs {:?}", g.shape(l), g.shape(s))));
    }
    let cat = g.concat_channels(&[l, s])?;
    let y = conv_act(g, ps, &format!("{p}.fc1"), cat, 1)?;
    conv(g, ps, &format!("{p}.fc2"), y, 1)
}

/// Merges the nine branch features and halves the resolution.
pub fn grad_fuse(g: &Graph, ps: &ParamStore, p: &str, branches: &[Var]) -> Result<Var> {
    if branches.len() != BRANCHES {
        return Err(usage(format!("grad_fuse needs {BRANCHES} inputs, got {}", branches.len())));
    }
    let shape = g.shape(branches[0]);
    if branches.iter().any(|&b| g.shape(b) != shape) {
        return Err(usage("grad_fuse inputs must share one shape"));
    }
    let cat = g.concat_channels(branches)?;
    let m = conv_act(g, ps, &format!("{p}.merge"), cat, 1)?;
    conv_act(g, ps, &format!("{p}.down"), m, 2)
}

fn branch(g: &Graph, ps: &ParamStore, cfg: &SafeConfig, level: usize, b: usize, x: Var) -> Result<Var> {
    let p = branch_prefix(level, b);
    let l = lre_forward(g, ps, &format!("{p}.lre"), x, cfg.window_size, cfg.heads)?;
    let s = sre_forward(g, ps, &format!("{p}.sre"), x)?;
    lsr_fuse(g, ps, &format!("{p}.lsr"), l, s)
}

/// Runs one level on `f` and returns the next, downsampled level.
pub fn safe_level(g: &Graph, ps: &ParamStore, cfg: &SafeConfig, level: usize, f: Var, hook: Option<&GradientHook>) -> Result<Var> {
    let mut fused = Vec::with_capacity(BRANCHES);
    fused.push(branch(g, ps, cfg, level, 0, f)?);
    for (dir, &(dy, dx)) in DIRECTION_OFFSETS.iter().enumerate() {
        let mut gm = g.shift_diff(f, dy, dx)?;
        if let Some(h) = hook {
            gm = h(g, level, dir, gm)?;
        }
        fused.push(branch(g, ps, cfg, level, dir + 1, gm)?);
    }
    grad_fuse(g, ps, &format!("{}.gradf", level_prefix(level)), &fused)
}

/// Feature pyramid `[f_1 (stem), f_2, .., f_{N+1}]`.
pub fn safe_extract(g: &Graph, ps: &ParamStore, cfg: &SafeConfig, image: Var, hook: Option<&GradientHook>) -> Result<Vec<Var>> {
    let shape = g.shape(image);
    if shape.len() != 4 {
        return Err(usage("safe_extract needs a rank-4 image"));
    }
    cfg.check_input(shape[2], shape[3])?;
    let mut pyramid = vec![conv_act(g, ps, "s.safe.stem", image, 1)?];
    for level in 0..cfg.levels {
        let next = safe_level(g, ps, cfg, level, pyramid[level], hook)?;
        pyramid.push(next);
    }
    Ok(pyramid)
}
