//! Structure modeling: an edge-map generator driven by a structure-aware
//! feature extractor, plus the edge-map discriminator.

mod generator;
pub mod safe;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{usage, Error, Result};
use crate::nn::{conv_act, linear};
use crate::params::{init_conv, init_linear, ParamStore};
use crate::unet::{self, UNetConfig};

pub use generator::{map_to_w, modulated_conv, sag_generate, LatentCodes};
pub use safe::{
    grad_fuse, lre_attention_weights, lre_forward, lsr_fuse, safe_extract, safe_level, sre_forward, GradientHook,
    BRANCHES,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafeConfig {
    pub levels: usize,
    pub in_channels: usize,
    /// Channel width of each level's input, finest first; `len == levels`.
    pub channels: Vec<usize>,
    pub window_size: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl SafeConfig {
    /// Three levels with widths 16/32/64, 8x8 windows and two heads.
    pub fn desk() -> Self {
        Self {
            levels: 3,
            in_channels: 3,
            channels: vec![16, 32, 64],
            window_size: 8,
            heads: 2,
            mlp_ratio: 2.0,
        }
    }

    /// Channels produced by level `i` (the last level keeps its width).
    pub fn out_channels(&self, level: usize) -> usize {
        self.channels[(level + 1).min(self.levels - 1)]
    }

    /// Channel count of every pyramid entry `[f_1, .., f_{N+1}]`.
    pub fn pyramid_channels(&self) -> Vec<usize> {
        let mut c = self.channels.clone();
        c.push(self.out_channels(self.levels - 1));
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.channels.len() != self.levels {
            return Err(Error::Config(format!(
                "extractor needs one channel width per level: {} levels, {} widths",
                self.levels,
                self.channels.len()
            )));
        }
        if self.window_size == 0 || self.heads == 0 || self.in_channels == 0 {
            return Err(Error::Config("window size, heads and input channels must be positive".into()));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c == 0 || c % self.heads != 0) {
            return Err(Error::Config(format!("width {c} is not a positive multiple of {} heads", self.heads)));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Input dims must be multiples of this: every level halves, and the
    /// deepest attention level still tiles into whole windows.
    pub fn required_multiple(&self) -> usize {
        lcm(1 << self.levels, (1 << (self.levels - 1)) * self.window_size)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.required_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(usage(format!("input {h}x{w} is not divisible by {m} ({} levels, window {})", self.levels, self.window_size)));
        }
        Ok(())
    }
}

pub(crate) fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub(crate) fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub dim_z: usize,
    pub dim_w: usize,
    pub mapping_layers: usize,
    /// Block widths from the coarsest to the finest resolution; one block per pyramid level.
    pub channels: Vec<usize>,
}

impl GeneratorConfig {
    pub fn desk() -> Self {
        Self {
            dim_z: 128,
            dim_w: 128,
            mapping_layers: 2,
            channels: vec![64, 64, 32, 16],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureConfig {
    pub safe: SafeConfig,
    pub generator: GeneratorConfig,
}

impl StructureConfig {
    pub fn desk() -> Self {
        Self {
            safe: SafeConfig::desk(),
            generator: GeneratorConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.safe.validate()?;
        let g = &self.generator;
        if g.dim_z == 0 || g.dim_w == 0 || g.mapping_layers == 0 {
            return Err(Error::Config("latent dims and mapping depth must be positive".into()));
        }
        if g.channels.len() != self.safe.levels + 1 || g.channels.contains(&0) {
            return Err(Error::Config(format!(
                "generator needs {} positive block widths, got {:?}",
                self.safe.levels + 1,
                g.channels
            )));
        }
        Ok(())
    }
}

pub fn init_structure(cfg: &StructureConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    safe::init_safe(&mut store, &mut rng, &cfg.safe);
    let pc = cfg.safe.pyramid_channels();
    generator::init_mapping(&mut store, &mut rng, &cfg.generator, *pc.last().expect("levels >= 1"));
    generator::init_generator(&mut store, &mut rng, &cfg.generator, &pc);
    Ok(store)
}

/// `I_s = G(F(I))`, optionally rewriting gradient maps on the way.
pub fn structure_forward_with(g: &Graph, ps: &ParamStore, cfg: &StructureConfig, image: Var, hook: Option<&GradientHook>) -> Result<Var> {
    let pyramid = safe_extract(g, ps, &cfg.safe, image, hook)?;
    let codes = map_to_w(g, ps, &cfg.generator, *pyramid.last().expect("non-empty"))?;
    sag_generate(g, ps, &cfg.generator, &codes, &pyramid)
}

pub fn structure_forward(g: &Graph, ps: &ParamStore, cfg: &StructureConfig, image: Var) -> Result<Var> {
    structure_forward_with(g, ps, cfg, image, None)
}

pub const BASELINE_PREFIX: &str = "s.base";

/// Plain U-Net edge predictor used in place of the generative structure model
/// for the baseline ablation.
pub fn init_baseline_edge_net(cfg: &UNetConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    unet::init(&mut store, &mut rng, BASELINE_PREFIX, cfg, false);
    Ok(store)
}

pub fn baseline_edge_forward(g: &Graph, ps: &ParamStore, cfg: &UNetConfig, image: Var) -> Result<Var> {
    let s = g.shape(image);
    cfg.check_input(s[2], s[3])?;
    let out = unet::forward_plain(g, ps, BASELINE_PREFIX, cfg, image)?;
    Ok(g.sigmoid(out))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Widths of the stride-2 conv stack.
    pub channels: Vec<usize>,
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        Self {
            channels: vec![16, 32, 32],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("discriminator needs positive widths".into()));
        }
        Ok(())
    }
}

pub fn init_discriminator(cfg: &DiscriminatorConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut cin = 1;
    for (i, &c) in cfg.channels.iter().enumerate() {
        init_conv(&mut store, &mut rng, &format!("d.c{i}"), cin, c, 3);
        cin = c;
    }
    init_linear(&mut store, &mut rng, "d.fc", cin, 1);
    Ok(store)
}

/// One unbounded logit per batch item, shape `(B,)`.
pub fn discriminator_forward(g: &Graph, ps: &ParamStore, cfg: &DiscriminatorConfig, edges: Var) -> Result<Var> {
    let mut x = edges;
    for i in 0..cfg.channels.len() {
        x = conv_act(g, ps, &format!("d.c{i}"), x, 2)?;
    }
    let pooled = g.global_avg_pool(x)?;
    let logit = linear(g, ps, "d.fc", pooled)?;
    let b = g.shape(logit)[0];
    g.reshape(logit, &[b])
}
