//! The assembled enhancer: appearance net, edge model, guided enhancement
//! module and the edge discriminator, with the ablation switches that remove
//! or replace parts of it.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::appearance::{appearance_forward, init_appearance};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::PerceptualConfig;
use crate::params::ParamStore;
use crate::sgem::{init_sgem, sgem_forward, SgemConfig};
use crate::structure::{
    baseline_edge_forward, init_baseline_edge_net, init_discriminator, init_structure, lcm, structure_forward,
    DiscriminatorConfig, StructureConfig,
};
use crate::tensor::Tensor;
use crate::unet::UNetConfig;

/// Ablation switches. All off is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// No appearance net: the enhancer sees `concat(I, I)` and adds its residual to `I`.
    pub disable_appearance: bool,
    /// No edge model at all; implies `disable_gan` and `disable_guidance`.
    pub disable_structure: bool,
    /// Plain decoder in the enhancement module; the edge model is still trained.
    pub disable_guidance: bool,
    /// Edge model trained by BCE only; the discriminator is never updated.
    pub disable_gan: bool,
    /// Plain U-Net edge predictor instead of the generative edge model.
    pub baseline_edge_net: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 5] = ["disable_A", "disable_S", "disable_guidance", "disable_gan", "baseline_edge_net"];

    /// Turns on the named switch (and whatever it implies).
    pub fn enable(&mut self, name: &str) -> Result<()> {
        match name {
            "disable_A" | "disable_appearance" => self.disable_appearance = true,
            "disable_S" | "disable_structure" => {
                self.disable_structure = true;
                self.disable_gan = true;
                self.disable_guidance = true;
            }
            "disable_guidance" => self.disable_guidance = true,
            "disable_gan" => self.disable_gan = true,
            "baseline_edge_net" => self.baseline_edge_net = true,
            _ => {
                return Err(Error::Usage(format!(
                    "unknown ablation '{name}', expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.disable_structure && !(self.disable_gan && self.disable_guidance) {
            return Err(Error::Config("disable_S requires disable_gan and disable_guidance".into()));
        }
        if self.disable_structure && self.baseline_edge_net {
            return Err(Error::Config("baseline_edge_net needs an edge model; it conflicts with disable_S".into()));
        }
        Ok(())
    }

    pub fn uses_gan(&self) -> bool {
        !self.disable_gan && !self.disable_structure
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub appearance: UNetConfig,
    pub structure: StructureConfig,
    pub baseline_edge: UNetConfig,
    pub discriminator: DiscriminatorConfig,
    pub sgem: SgemConfig,
    pub perceptual: PerceptualConfig,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            appearance: UNetConfig::desk(3, 3),
            structure: StructureConfig::desk(),
            baseline_edge: UNetConfig::desk(3, 1),
            discriminator: DiscriminatorConfig::desk(),
            sgem: SgemConfig::desk(),
            perceptual: PerceptualConfig::default(),
        }
    }

    /// Very small networks for tests and smoke runs; inputs must be multiples of 8.
    pub fn tiny() -> Self {
        let unet = |cin, cout| UNetConfig {
            depth: 2,
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            in_channels: cin,
            out_channels: cout,
        };
        Self {
            appearance: unet(3, 3),
            structure: StructureConfig {
                safe: crate::structure::SafeConfig {
                    levels: 2,
                    in_channels: 3,
                    channels: vec![4, 8],
                    window_size: 4,
                    heads: 2,
                    mlp_ratio: 1.0,
                },
                generator: crate::structure::GeneratorConfig {
                    dim_z: 8,
                    dim_w: 8,
                    mapping_layers: 2,
                    channels: vec![8, 8, 4],
                },
            },
            baseline_edge: unet(3, 1),
            discriminator: DiscriminatorConfig { channels: vec![4, 8] },
            sgem: SgemConfig {
                unet: unet(6, 3),
                kernel_size: 3,
                guide_channels: 4,
                norm_eps: 1e-5,
                guidance: true,
            },
            perceptual: PerceptualConfig {
                channels: vec![4, 8],
                seed: 7,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.appearance.validate()?;
        self.structure.validate()?;
        self.baseline_edge.validate()?;
        self.discriminator.validate()?;
        self.sgem.validate()?;
        if self.appearance.in_channels != 3 || self.appearance.out_channels != 3 {
            return Err(Error::Config("appearance net maps 3 channels to 3".into()));
        }
        if self.structure.safe.in_channels != 3 || self.baseline_edge.in_channels != 3 || self.baseline_edge.out_channels != 1 {
            return Err(Error::Config("edge models map 3 channels to 1".into()));
        }
        if self.sgem.unet.out_channels != 3 {
            return Err(Error::Config("enhancement residual has 3 channels".into()));
        }
        Ok(())
    }

    /// Image dims must be multiples of this for every enabled part.
    pub fn required_multiple(&self, ablation: &Ablation) -> usize {
        let mut m = self.sgem.unet.required_multiple();
        if !ablation.disable_appearance {
            m = lcm(m, self.appearance.required_multiple());
        }
        if !ablation.disable_structure {
            m = lcm(
                m,
                if ablation.baseline_edge_net {
                    self.baseline_edge.required_multiple()
                } else {
                    self.structure.safe.required_multiple()
                },
            );
        }
        m
    }
}

/// Parameters of the generator side (`a.*`, `s.*`, `e.*`) and the discriminator (`d.*`).
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub gen: ParamStore,
    pub disc: ParamStore,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub appearance: Option<Var>,
    pub edges: Option<Var>,
    pub enhanced: Var,
}

/// Forward results as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub appearance: Option<Tensor>,
    pub edges: Option<Tensor>,
    pub enhanced: Tensor,
}

impl Model {
    /// Creates only the parts the ablation keeps. The enhancement module's
    /// guidance follows `ablation.disable_guidance`.
    pub fn new(mut config: ModelConfig, ablation: Ablation, seed: u64) -> Result<Self> {
        config.validate()?;
        ablation.validate()?;
        config.sgem.guidance = !ablation.disable_guidance;
        let mut seeds = ChaCha8Rng::seed_from_u64(seed);
        let mut next = || seeds.next_u64();
        let (sa, ss, se, sd) = (next(), next(), next(), next());
        let mut gen = ParamStore::new();
        if !ablation.disable_appearance {
            gen.extend(init_appearance(&config.appearance, sa)?);
        }
        if !ablation.disable_structure {
            gen.extend(if ablation.baseline_edge_net {
                init_baseline_edge_net(&config.baseline_edge, ss)?
            } else {
                init_structure(&config.structure, ss)?
            });
        }
        gen.extend(init_sgem(&config.sgem, se)?);
        let disc = if ablation.uses_gan() {
            init_discriminator(&config.discriminator, sd)?
        } else {
            ParamStore::new()
        };
        Ok(Self {
            config,
            ablation,
            gen,
            disc,
        })
    }

    pub fn required_multiple(&self) -> usize {
        self.config.required_multiple(&self.ablation)
    }

    /// `I_s`, or `None` when the edge model is disabled.
    pub fn edges(&self, g: &Graph, input: Var) -> Result<Option<Var>> {
        if self.ablation.disable_structure {
            return Ok(None);
        }
        Ok(Some(if self.ablation.baseline_edge_net {
            baseline_edge_forward(g, &self.gen, &self.config.baseline_edge, input)?
        } else {
            structure_forward(g, &self.gen, &self.config.structure, input)?
        }))
    }

    /// Full pass. With `detach_edges` the enhancement module receives the edge
    /// map without a gradient path back into the edge model.
    pub fn forward(&self, g: &Graph, input: Var, detach_edges: bool) -> Result<Outputs> {
        let shape = g.shape(input);
        let appearance = if self.ablation.disable_appearance {
            None
        } else {
            Some(appearance_forward(g, &self.gen, &self.config.appearance, input)?)
        };
        let edges = self.edges(g, input)?;
        let guide = match edges {
            Some(e) if detach_edges => g.detach(e),
            Some(e) => e,
            None => g.constant(Tensor::zeros(&[shape[0], 1, shape[2], shape[3]])),
        };
        let base = appearance.unwrap_or(input);
        let enhanced = sgem_forward(g, &self.gen, &self.config.sgem, base, input, guide)?;
        Ok(Outputs {
            appearance,
            edges,
            enhanced,
        })
    }

    /// Forward pass on a concrete batch whose dims are already compatible.
    pub fn infer(&self, input: &Tensor) -> Result<Inference> {
        let g = Graph::new();
        let x = g.constant(input.clone());
        let out = self.forward(&g, x, false)?;
        let get = |v: Var| (*g.value(v)).clone();
        Ok(Inference {
            appearance: out.appearance.map(get),
            edges: out.edges.map(get),
            enhanced: get(out.enhanced),
        })
    }
}
