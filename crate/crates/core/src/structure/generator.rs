//! Latent mapping and the style-based edge-map generator.
//!
//! A per-channel learned constant at the coarsest pyramid resolution is
//! refined by one block per pyramid level. Each block (after a x2 nearest
//! upsample, except the first) applies a 3x3 convolution whose input channels
//! are scaled by an affine style of `w` and whose output is demodulated, adds
//! the matching pyramid level projected by a 1x1 conv, and applies the
//! activation. A 1x1 head with sigmoid gives the edge map.

use rand::Rng;

use super::GeneratorConfig;
use crate::autograd::{Graph, Var};
use crate::error::{usage, Result};
use crate::nn::{act, conv, linear};
use crate::params::{init_conv, init_linear, normal, ParamStore};
use crate::tensor::Tensor;

const DEMOD_EPS: f64 = 1e-8;

/// `(z, w)` latent codes.
#[derive(Clone, Copy, Debug)]
pub struct LatentCodes {
    pub z: Var,
    pub w: Var,
}

pub(crate) fn init_mapping(store: &mut ParamStore, rng: &mut impl Rng, cfg: &GeneratorConfig, feat: usize) {
    for k in 0..cfg.mapping_layers {
        let fin = if k == 0 { feat } else { cfg.dim_z };
        init_linear(store, rng, &format!("s.map.z{k}"), fin, cfg.dim_z);
    }
    for k in 0..cfg.mapping_layers {
        let fin = if k == 0 { cfg.dim_z } else { cfg.dim_w };
        init_linear(store, rng, &format!("s.map.w{k}"), fin, cfg.dim_w);
    }
}

/// `pyramid_channels` lists the channel count of every pyramid level, finest first.
pub(crate) fn init_generator(store: &mut ParamStore, rng: &mut impl Rng, cfg: &GeneratorConfig, pyramid_channels: &[usize]) {
    let n = pyramid_channels.len();
    store.insert("s.gen.const", normal(rng, &[cfg.channels[0]], 1.0));
    for b in 0..n {
        let cin = if b == 0 { cfg.channels[0] } else { cfg.channels[b - 1] };
        let cout = cfg.channels[b];
        let p = format!("s.gen.b{b}");
        store.insert(format!("{p}.style.w"), normal(rng, &[cin, cfg.dim_w], (1.0 / cfg.dim_w as f64).sqrt()));
        store.insert(format!("{p}.style.b"), Tensor::full(&[cin], 1.0));
        init_conv(store, rng, &format!("{p}.conv"), cin, cout, 3);
        init_conv(store, rng, &format!("{p}.inject"), pyramid_channels[n - 1 - b], cout, 1);
    }
    init_conv(store, rng, "s.gen.head", cfg.channels[n - 1], 1, 1);
}

fn mlp(g: &Graph, ps: &ParamStore, p: &str, layers: usize, mut x: Var) -> Result<Var> {
    for k in 0..layers {
        x = linear(g, ps, &format!("{p}{k}"), x)?;
        if k + 1 < layers {
            x = act(g, x);
        }
    }
    Ok(x)
}

/// Global average pool of the deepest features, then the two mapping MLPs.
pub fn map_to_w(g: &Graph, ps: &ParamStore, cfg: &GeneratorConfig, deepest: Var) -> Result<LatentCodes> {
    let pooled = g.global_avg_pool(deepest)?;
    let z = mlp(g, ps, "s.map.z", cfg.mapping_layers, pooled)?;
    let w = mlp(g, ps, "s.map.w", cfg.mapping_layers, z)?;
    Ok(LatentCodes { z, w })
}

/// Style-modulated, demodulated 3x3 convolution with bias.
pub fn modulated_conv(g: &Graph, ps: &ParamStore, p: &str, x: Var, w_code: Var) -> Result<Var> {
    let style = linear(g, ps, &format!("{p}.style"), w_code)?;
    let weight = g.param(ps, &format!("{p}.conv.w"))?;
    let bias = g.param(ps, &format!("{p}.conv.b"))?;
    let ws = g.shape(weight);
    let (cout, cin, k) = (ws[0], ws[1], ws[2]);
    let xm = g.mul_bc(x, style)?;
    let y = g.conv2d(xm, weight, None, 1, k / 2)?;
    // sum_k W[o,i,k]^2 as an (out, in) matrix
    let wsq = g.sum_last(g.reshape(g.square(weight), &[cout * cin, k * k])?)?;
    let wsq = g.reshape(wsq, &[cout, cin])?;
    let energy = g.matmul(g.square(style), wsq, false, true)?;
    let demod = g.powf(g.add_scalar(energy, DEMOD_EPS), -0.5);
    let y = g.mul_bc(y, demod)?;
    g.add_channel(y, bias)
}

/// Edge map in `(0, 1)` at the finest pyramid resolution.
pub fn sag_generate(g: &Graph, ps: &ParamStore, cfg: &GeneratorConfig, codes: &LatentCodes, pyramid: &[Var]) -> Result<Var> {
    let n = pyramid.len();
    if n != cfg.channels.len() {
        return Err(usage(format!("generator has {} blocks, pyramid has {n} levels", cfg.channels.len())));
    }
    for i in 1..n {
        let (a, b) = (g.shape(pyramid[i - 1]), g.shape(pyramid[i]));
        if a[2] != 2 * b[2] || a[3] != 2 * b[3] {
            return Err(usage(format!("pyramid levels {a:?} and {b:?} are not a x2 ladder")));
        }
    }
    let coarsest = g.shape(pyramid[n - 1]);
    let batch = g.shape(codes.w)[0];
    if coarsest[0] != batch {
        return Err(usage("latent batch differs from pyramid batch"));
    }
    let mut x = g.expand_channels(g.param(ps, "s.gen.const")?, batch, coarsest[2], coarsest[3])?;
    for b in 0..n {
        if b > 0 {
            x = g.upsample_nearest2x(x)?;
        }
        let p = format!("s.gen.b{b}");
        let y = modulated_conv(g, ps, &p, x, codes.w)?;
        let inj = conv(g, ps, &format!("{p}.inject"), pyramid[n - 1 - b], 1)?;
        x = act(g, g.add(y, inj)?);
    }
    let logits = conv(g, ps, "s.gen.head", x, 1)?;
    Ok(g.sigmoid(logits))
}
