//! Encoder-decoder skeleton shared by the appearance network, the enhancement
//! module and the baseline edge network.
//!
//! Encoder level `i` runs a strided 3x3 downsampling conv (for `i > 0`) and two
//! 3x3 convs. Decoder level `j` upsamples (nearest), fuses with skip `j` by a
//! 3x3 conv into `d_j`, then applies two 3x3 convs `C(d_j)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{usage, Error, Result};
use crate::nn::{conv, conv_act};
use crate::params::{init_conv, init_conv_zero, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl UNetConfig {
    /// Depth 3, 16 base channels, multipliers `[1, 2, 4]`.
    pub fn desk(in_channels: usize, out_channels: usize) -> Self {
        Self {
            depth: 3,
            base_channels: 16,
            channel_multipliers: vec![1, 2, 4],
            in_channels,
            out_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("U-Net depth must be at least 2, got {}", self.depth)));
        }
        if self.channel_multipliers.len() != self.depth {
            return Err(Error::Config(format!(
                "{} channel multipliers for depth {}",
                self.channel_multipliers.len(),
                self.depth
            )));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("U-Net channel counts must be positive".into()));
        }
        if self.channel_multipliers.contains(&0) {
            return Err(Error::Config("channel multipliers must be positive".into()));
        }
        Ok(())
    }

    /// Channel width of every level, shallow to deep.
    pub fn channels(&self) -> Vec<usize> {
        self.channel_multipliers.iter().map(|m| m * self.base_channels).collect()
    }

    /// Spatial dims must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.required_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(usage(format!("input {h}x{w} is not divisible by {m} (depth {})", self.depth)));
        }
        Ok(())
    }

    /// `(name, cin, cout, k)` of every conv layer in registration order.
    pub fn layer_shapes(&self, prefix: &str) -> Vec<(String, usize, usize, usize)> {
        let ch = self.channels();
        let mut layers = Vec::new();
        for i in 0..self.depth {
            if i == 0 {
                layers.push((format!("{prefix}.enc0.conv1"), self.in_channels, ch[0], 3));
            } else {
                layers.push((format!("{prefix}.enc{i}.down"), ch[i - 1], ch[i], 3));
                layers.push((format!("{prefix}.enc{i}.conv1"), ch[i], ch[i], 3));
            }
            layers.push((format!("{prefix}.enc{i}.conv2"), ch[i], ch[i], 3));
        }
        for j in (0..self.depth - 1).rev() {
            layers.push((format!("{prefix}.dec{j}.fuse"), ch[j + 1] + ch[j], ch[j], 3));
            layers.push((format!("{prefix}.dec{j}.conv1"), ch[j], ch[j], 3));
            layers.push((format!("{prefix}.dec{j}.conv2"), ch[j], ch[j], 3));
        }
        layers
    }
}

/// Registers all body layers plus a 3x3 output head `{prefix}.head`.
pub(crate) fn init(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, cfg: &UNetConfig, zero_head: bool) {
    for (name, cin, cout, k) in cfg.layer_shapes(prefix) {
        init_conv(store, rng, &name, cin, cout, k);
    }
    let head = format!("{prefix}.head");
    if zero_head {
        init_conv_zero(store, &head, cfg.channels()[0], cfg.out_channels, 3);
    } else {
        init_conv(store, rng, &head, cfg.channels()[0], cfg.out_channels, 3);
    }
}

/// Encoder features, shallow to deep; the last entry is the bottleneck.
pub(crate) fn encode(g: &Graph, ps: &ParamStore, prefix: &str, cfg: &UNetConfig, x: Var) -> Result<Vec<Var>> {
    let mut feats = Vec::with_capacity(cfg.depth);
    let mut h = x;
    for i in 0..cfg.depth {
        if i == 0 {
            h = conv_act(g, ps, &format!("{prefix}.enc0.conv1"), h, 1)?;
        } else {
            h = conv_act(g, ps, &format!("{prefix}.enc{i}.down"), h, 2)?;
            h = conv_act(g, ps, &format!("{prefix}.enc{i}.conv1"), h, 1)?;
        }
        h = conv_act(g, ps, &format!("{prefix}.enc{i}.conv2"), h, 1)?;
        feats.push(h);
    }
    Ok(feats)
}

/// Upsamples `prev`, fuses it with `skip` and returns `d_j`.
pub(crate) fn decoder_input(g: &Graph, ps: &ParamStore, prefix: &str, j: usize, prev: Var, skip: Var) -> Result<Var> {
    let up = g.upsample_nearest2x(prev)?;
    let cat = g.concat_channels(&[up, skip])?;
    conv_act(g, ps, &format!("{prefix}.dec{j}.fuse"), cat, 1)
}

/// The level's plain convolutions `C(d_j)`.
pub(crate) fn decoder_convs(g: &Graph, ps: &ParamStore, prefix: &str, j: usize, d: Var) -> Result<Var> {
    let h = conv_act(g, ps, &format!("{prefix}.dec{j}.conv1"), d, 1)?;
    conv_act(g, ps, &format!("{prefix}.dec{j}.conv2"), h, 1)
}

/// Plain U-Net pass ending in the (pre-activation) head output.
pub(crate) fn forward_plain(g: &Graph, ps: &ParamStore, prefix: &str, cfg: &UNetConfig, x: Var) -> Result<Var> {
    let feats = encode(g, ps, prefix, cfg, x)?;
    let mut h = *feats.last().expect("depth >= 2");
    for j in (0..cfg.depth - 1).rev() {
        let d = decoder_input(g, ps, prefix, j, h, feats[j])?;
        h = decoder_convs(g, ps, prefix, j, d)?;
    }
    conv(g, ps, &format!("{prefix}.head"), h, 1)
}
