//! Training objectives and the fixed perceptual feature extractor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{usage, Error, Result};
use crate::nn::conv_frozen;
use crate::params::{init_conv, ParamStore, LEAKY_SLOPE};
use crate::tensor::Tensor;

pub use crate::imaging::BCE_EPS;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Appearance reconstruction.
    pub appearance: f64,
    /// Edge-map cross-entropy.
    pub structure: f64,
    /// Adversarial (generator side).
    pub gan: f64,
    /// Final reconstruction.
    pub enhance: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            appearance: 1.0,
            structure: 0.1,
            gan: 0.01,
            enhance: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.appearance, self.structure, self.gan, self.enhance];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative, got {w:?}")));
        }
        Ok(())
    }
}

/// Values of every term at one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub appearance: f64,
    pub structure: f64,
    pub gan: f64,
    pub enhance: f64,
}

impl LossParts {
    /// Fails on the first non-finite term, naming it.
    pub fn check_finite(&self, step: u64) -> Result<()> {
        for (term, value) in [
            ("appearance", self.appearance),
            ("structure", self.structure),
            ("gan", self.gan),
            ("enhance", self.enhance),
        ] {
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step,
                    term: term.into(),
                    value,
                });
            }
        }
        Ok(())
    }
}

/// `l1 * L_a + l2 * L_s + l3 * L_g + l4 * L_m`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    parts.check_finite(0)?;
    Ok(w.appearance * parts.appearance + w.structure * parts.structure + w.gan * parts.gan + w.enhance * parts.enhance)
}

/// Graph version of [`total_loss`]; absent terms contribute nothing.
pub fn total_loss_var(g: &Graph, terms: [Option<Var>; 4], w: &LossWeights) -> Result<Var> {
    let weights = [w.appearance, w.structure, w.gan, w.enhance];
    let mut acc: Option<Var> = None;
    for (t, k) in terms.into_iter().zip(weights) {
        if let Some(v) = t {
            let s = g.scale(v, k);
            acc = Some(match acc {
                Some(a) => g.add(a, s)?,
                None => s,
            });
        }
    }
    acc.ok_or_else(|| usage("total loss needs at least one term"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelNorm {
    L1,
    L2,
}

/// Feature stack used by the perceptual term. Implementations must not change
/// between calls.
pub trait FeatureExtractor {
    fn features(&self, g: &Graph, x: Var) -> Result<Vec<Var>>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerceptualConfig {
    /// Output widths of the stages; each stage after the first halves resolution.
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 16, 32],
            seed: 7,
        }
    }
}

/// Seeded, frozen random conv stack with a tap after each stage.
#[derive(Clone, Debug)]
pub struct RandomFeatures {
    config: PerceptualConfig,
    params: ParamStore,
}

impl RandomFeatures {
    pub fn new(config: PerceptualConfig) -> Result<Self> {
        if config.channels.is_empty() || config.channels.contains(&0) {
            return Err(Error::Config("perceptual stages need positive widths".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut cin = 3;
        for (i, &c) in config.channels.iter().enumerate() {
            init_conv(&mut params, &mut rng, &format!("phi.s{i}"), cin, c, 3);
            cin = c;
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &PerceptualConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }
}

impl FeatureExtractor for RandomFeatures {
    fn features(&self, g: &Graph, x: Var) -> Result<Vec<Var>> {
        let mut taps = Vec::with_capacity(self.config.channels.len());
        let mut h = x;
        for i in 0..self.config.channels.len() {
            let stride = if i == 0 { 1 } else { 2 };
            h = g.leaky_relu(conv_frozen(g, &self.params, &format!("phi.s{i}"), h, stride)?, LEAKY_SLOPE);
            taps.push(h);
        }
        Ok(taps)
    }
}

fn distance(g: &Graph, a: Var, b: Var, norm: PixelNorm) -> Result<Var> {
    let d = g.sub(a, b)?;
    Ok(match norm {
        PixelNorm::L1 => g.mean(g.abs(d)),
        PixelNorm::L2 => g.mean(g.square(d)),
    })
}

/// Pixel term alone.
pub fn pixel_loss(g: &Graph, pred: Var, target: Var, norm: PixelNorm) -> Result<Var> {
    let (sp, st) = (g.shape(pred), g.shape(target));
    if sp != st {
        return Err(usage(format!("prediction {sp:?} and target {st:?} differ")));
    }
    distance(g, pred, target, norm)
}

/// Pixel distance plus the mean absolute feature difference at every tap.
pub fn reconstruction_loss(g: &Graph, phi: &dyn FeatureExtractor, pred: Var, target: Var, norm: PixelNorm) -> Result<Var> {
    let mut loss = pixel_loss(g, pred, target, norm)?;
    let fp = phi.features(g, pred)?;
    let target = g.detach(target);
    let ft = phi.features(g, target)?;
    for (a, b) in fp.into_iter().zip(ft) {
        loss = g.add(loss, distance(g, a, b, PixelNorm::L1)?)?;
    }
    Ok(loss)
}

/// Mean binary cross-entropy of predicted edges against binary targets.
pub fn structure_bce(g: &Graph, pred: Var, target: &Tensor) -> Result<Var> {
    g.bce_mean(pred, target, BCE_EPS)
}

/// `mean softplus(-fake)`.
pub fn gan_generator_loss(g: &Graph, fake_logits: Var) -> Var {
    g.mean(g.softplus(g.scale(fake_logits, -1.0)))
}

/// `mean softplus(-real) + mean softplus(fake)`.
pub fn gan_discriminator_loss(g: &Graph, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let r = g.mean(g.softplus(g.scale(real_logits, -1.0)));
    let f = g.mean(g.softplus(fake_logits));
    g.add(r, f)
}
