//! Structure-guided enhancement: a U-Net over `concat(I_a, I)` whose decoder
//! features are filtered by per-pixel kernels and re-normalized by maps, both
//! synthesized from the edge map. The head predicts a residual over `I_a`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{usage, Error, Result};
use crate::nn::{conv, conv_act};
use crate::params::{init_conv, init_conv_zero, ParamStore};
use crate::unet::{self, UNetConfig};

pub const PREFIX: &str = "e";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgemConfig {
    /// Backbone; `in_channels` must be 6 (`I_a` and `I` stacked).
    pub unet: UNetConfig,
    /// Odd tap count of the per-pixel kernels along each axis.
    pub kernel_size: usize,
    /// Hidden width of the kernel and normalization synthesizers.
    pub guide_channels: usize,
    pub norm_eps: f64,
    /// When false the decoder is the plain U-Net decoder and the edge map is ignored.
    pub guidance: bool,
}

impl SgemConfig {
    pub fn desk() -> Self {
        Self {
            unet: UNetConfig::desk(6, 3),
            kernel_size: 3,
            guide_channels: 16,
            norm_eps: 1e-5,
            guidance: true,
        }
    }

    /// Number of guided decoder levels.
    pub fn levels(&self) -> usize {
        self.unet.depth - 1
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if self.unet.in_channels != 6 {
            return Err(Error::Config(format!("enhancement input is 6 channels, got {}", self.unet.in_channels)));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} is not odd", self.kernel_size)));
        }
        if self.guide_channels == 0 || !(self.norm_eps > 0.0) {
            return Err(Error::Config("guide channels and norm eps must be positive".into()));
        }
        Ok(())
    }
}

fn level_prefix(j: usize) -> String {
    format!("{PREFIX}.dec{j}")
}

pub fn init_sgem(cfg: &SgemConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    unet::init(&mut store, &mut rng, PREFIX, &cfg.unet, true);
    if !cfg.guidance {
        return Ok(store);
    }
    let ch = cfg.unet.channels();
    let kk = cfg.kernel_size * cfg.kernel_size;
    let hid = cfg.guide_channels;
    for j in 0..cfg.levels() {
        let p = level_prefix(j);
        init_conv(&mut store, &mut rng, &format!("{p}.sgc.c1"), 1, hid, 3);
        init_conv(&mut store, &mut rng, &format!("{p}.sgc.c2"), hid, ch[j] * kk, 3);
        init_conv(&mut store, &mut rng, &format!("{p}.sgn.c1"), 1, hid, 3);
        init_conv_zero(&mut store, &format!("{p}.sgn.head"), hid, 2 * ch[j], 3);
    }
    Ok(store)
}

/// Per-pixel kernels `(B, b * k * k, p, q)`, softmax-normalized over the taps
/// of every channel.
pub fn sgc_synthesize(g: &Graph, ps: &ParamStore, cfg: &SgemConfig, level: usize, edges: Var) -> Result<Var> {
    let p = level_prefix(level);
    let h = conv_act(g, ps, &format!("{p}.sgc.c1"), edges, 1)?;
    let logits = conv(g, ps, &format!("{p}.sgc.c2"), h, 1)?;
    g.group_softmax(logits, cfg.kernel_size * cfg.kernel_size)
}

/// Depthwise per-pixel filtering with zero padding.
pub fn sgc_apply(g: &Graph, d: Var, kernels: Var, k: usize) -> Result<Var> {
    g.pixel_filter(d, kernels, k)
}

/// `(alpha, gamma)`, each `(B, b, p, q)`, with `alpha = 1 + head`.
pub fn sgn_synthesize(g: &Graph, ps: &ParamStore, level: usize, edges: Var) -> Result<(Var, Var)> {
    let p = level_prefix(level);
    let h = conv_act(g, ps, &format!("{p}.sgn.c1"), edges, 1)?;
    let out = conv(g, ps, &format!("{p}.sgn.head"), h, 1)?;
    let b = g.shape(out)[1] / 2;
    let alpha = g.add_scalar(g.slice_channels(out, 0, b)?, 1.0);
    let gamma = g.slice_channels(out, b, b)?;
    Ok((alpha, gamma))
}

/// `IN(d) * alpha + gamma`.
pub fn sgn_apply(g: &Graph, d: Var, alpha: Var, gamma: Var, eps: f64) -> Result<Var> {
    let n = g.instance_norm(d, eps)?;
    g.add(g.mul(n, alpha)?, gamma)
}

/// Summary statistics of one guided decoder level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: usize,
    pub height: usize,
    pub width: usize,
    pub alpha_mean: f64,
    pub alpha_std: f64,
    pub gamma_mean: f64,
    pub gamma_std: f64,
    /// Mean Shannon entropy (nats) of the per-pixel, per-channel tap weights.
    pub kernel_entropy: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn kernel_entropy(k: &crate::tensor::Tensor, taps: usize) -> f64 {
    let (b, c, h, w) = k.dims4().expect("rank 4");
    let hw = h * w;
    let groups = c / taps;
    let mut total = 0.0;
    for bi in 0..b {
        for gi in 0..groups {
            let base = (bi * c + gi * taps) * hw;
            for px in 0..hw {
                for t in 0..taps {
                    let p = k.data()[base + t * hw + px];
                    if p > 0.0 {
                        total -= p * p.ln();
                    }
                }
            }
        }
    }
    total / (b * groups * hw) as f64
}

/// `I_hat = clamp(I_a + E(concat(I_a, I) | I_s), 0, 1)`.
pub fn sgem_forward(g: &Graph, ps: &ParamStore, cfg: &SgemConfig, appearance: Var, input: Var, edges: Var) -> Result<Var> {
    sgem_forward_inner(g, ps, cfg, appearance, input, edges, None)
}

/// As [`sgem_forward`], also collecting per-level guidance statistics.
pub fn sgem_forward_with_stats(
    g: &Graph,
    ps: &ParamStore,
    cfg: &SgemConfig,
    appearance: Var,
    input: Var,
    edges: Var,
) -> Result<(Var, Vec<LevelStats>)> {
    let mut stats = Vec::new();
    let out = sgem_forward_inner(g, ps, cfg, appearance, input, edges, Some(&mut stats))?;
    Ok((out, stats))
}

fn sgem_forward_inner(
    g: &Graph,
    ps: &ParamStore,
    cfg: &SgemConfig,
    appearance: Var,
    input: Var,
    edges: Var,
    mut stats: Option<&mut Vec<LevelStats>>,
) -> Result<Var> {
    let (sa, si, se) = (g.shape(appearance), g.shape(input), g.shape(edges));
    if sa.len() != 4 || sa != si {
        return Err(usage(format!("appearance {sa:?} and input {si:?} differ")));
    }
    if se.len() != 4 || se[0] != sa[0] || se[1] != 1 || se[2..] != sa[2..] {
        return Err(usage(format!("edge map {se:?} does not match image {sa:?}")));
    }
    cfg.unet.check_input(sa[2], sa[3])?;
    let x = g.concat_channels(&[appearance, input])?;
    let feats = unet::encode(g, ps, PREFIX, &cfg.unet, x)?;
    let mut h = *feats.last().expect("depth >= 2");
    for j in (0..cfg.levels()).rev() {
        let d = unet::decoder_input(g, ps, PREFIX, j, h, feats[j])?;
        let c = unet::decoder_convs(g, ps, PREFIX, j, d)?;
        h = if cfg.guidance {
            let ds = g.shape(d);
            let e = if ds[2..] == se[2..] { edges } else { g.resize_bilinear(edges, ds[2], ds[3])? };
            let kern = sgc_synthesize(g, ps, cfg, j, e)?;
            let dhat = sgc_apply(g, d, kern, cfg.kernel_size)?;
            let (alpha, gamma) = sgn_synthesize(g, ps, j, e)?;
            let dbar = sgn_apply(g, dhat, alpha, gamma, cfg.norm_eps)?;
            if let Some(st) = stats.as_deref_mut() {
                let (am, asd) = mean_std(g.value(alpha).data());
                let (gm, gsd) = mean_std(g.value(gamma).data());
                st.push(LevelStats {
                    level: j,
                    height: ds[2],
                    width: ds[3],
                    alpha_mean: am,
                    alpha_std: asd,
                    gamma_mean: gm,
                    gamma_std: gsd,
                    kernel_entropy: kernel_entropy(&g.value(kern), cfg.kernel_size * cfg.kernel_size),
                });
            }
            g.add(c, dbar)?
        } else {
            c
        };
    }
    let residual = conv(g, ps, &format!("{PREFIX}.head"), h, 1)?;
    Ok(g.clamp(g.add(appearance, residual)?, 0.0, 1.0))
}
