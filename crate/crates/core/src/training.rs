//! Alternating discriminator / generator optimization of the whole model.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::PairedBatch;
use crate::error::{usage, Error, Result};
use crate::losses::{
    gan_discriminator_loss, gan_generator_loss, reconstruction_loss, structure_bce, total_loss_var, LossParts,
    LossWeights, PixelNorm, RandomFeatures,
};
use crate::model::{Ablation, Model, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::structure::discriminator_forward;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr_main: f64,
    pub lr_disc: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub ablation: Ablation,
    /// Stop the enhancement loss from reaching the edge model.
    pub detach_edges: bool,
    pub pixel_norm: PixelNorm,
    /// Checkpoint period in steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            lr_main: 2e-4,
            lr_disc: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            weights: LossWeights::default(),
            ablation: Ablation::default(),
            detach_edges: false,
            pixel_norm: PixelNorm::L1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.adam_main().validate()?;
        self.adam_disc().validate()?;
        self.weights.validate()?;
        self.ablation.validate()
    }

    pub fn adam_main(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_main,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn adam_disc(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_disc,
            ..self.adam_main()
        }
    }

    /// Weights with the terms removed by the ablation set to zero.
    pub fn effective_weights(&self) -> LossWeights {
        let a = &self.ablation;
        let mut w = self.weights;
        if a.disable_appearance {
            w.appearance = 0.0;
        }
        if a.disable_structure {
            w.structure = 0.0;
        }
        if !a.uses_gan() {
            w.gan = 0.0;
        }
        w
    }
}

/// Every loss value of one step; absent terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub step: u64,
    pub appearance: f64,
    pub structure: f64,
    pub gan: f64,
    pub disc: f64,
    pub enhance: f64,
    pub total: f64,
}

impl LossLog {
    pub const CSV_HEADER: &'static str = "step,loss_a,loss_s,loss_g,loss_d,loss_m,loss";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.appearance, self.structure, self.gan, self.disc, self.enhance, self.total
        )
    }

    pub fn parts(&self) -> LossParts {
        LossParts {
            appearance: self.appearance,
            structure: self.structure,
            gan: self.gan,
            enhance: self.enhance,
        }
    }
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub opt_gen: Adam,
    pub opt_disc: Adam,
    pub step: u64,
    /// Drives batch selection.
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model_config: ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_config, cfg.ablation, cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            opt_gen: Adam::new(cfg.adam_main()),
            opt_disc: Adam::new(cfg.adam_disc()),
            step: 0,
            rng,
        })
    }
}

fn finite(step: u64, term: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Divergence {
            step,
            term: term.into(),
            value,
        })
    }
}

fn without_disc(grads: BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    grads.into_iter().filter(|(n, _)| !n.starts_with("d.")).collect()
}

/// One discriminator update followed by one joint update of the other
/// networks, on the whole of `batch`.
pub fn train_step(state: &mut TrainState, batch: &PairedBatch, cfg: &TrainConfig, phi: &RandomFeatures) -> Result<LossLog> {
    let step = state.step + 1;
    let ablation = state.model.ablation;
    let weights = cfg.effective_weights();
    let g = Graph::new();
    let input = g.constant(batch.input.clone());
    let target = g.constant(batch.target.clone());
    // The generator-side forward is computed once; the discriminator update
    // below only reads its (detached) edge map, and the generator parameters
    // do not change until the second phase.
    let out = state.model.forward(&g, input, cfg.detach_edges)?;

    let mut log = LossLog {
        step,
        ..Default::default()
    };
    if ablation.uses_gan() {
        let fake = (*g.value(out.edges.expect("edge model present"))).clone();
        let gd = Graph::new();
        let dcfg = &state.model.config.discriminator;
        let real = discriminator_forward(&gd, &state.model.disc, dcfg, gd.constant(batch.edges.clone()))?;
        let fake = discriminator_forward(&gd, &state.model.disc, dcfg, gd.constant(fake))?;
        let ld = gan_discriminator_loss(&gd, real, fake)?;
        log.disc = finite(step, "disc", gd.value(ld).item())?;
        let grads = gd.backward(ld)?.params(&gd);
        state.opt_disc.step(&mut state.model.disc, &grads)?;
    }

    let mut terms = [None; 4];
    if let Some(ia) = out.appearance {
        terms[0] = Some(reconstruction_loss(&g, phi, ia, target, cfg.pixel_norm)?);
    }
    if let Some(es) = out.edges {
        if !ablation.disable_structure {
            terms[1] = Some(structure_bce(&g, es, &batch.edges)?);
        }
        if ablation.uses_gan() {
            let logits = discriminator_forward(&g, &state.model.disc, &state.model.config.discriminator, es)?;
            terms[2] = Some(gan_generator_loss(&g, logits));
        }
    }
    terms[3] = Some(reconstruction_loss(&g, phi, out.enhanced, target, cfg.pixel_norm)?);
    let value = |t: Option<crate::autograd::Var>| t.map_or(0.0, |v| g.value(v).item());
    log.appearance = finite(step, "appearance", value(terms[0]))?;
    log.structure = finite(step, "structure", value(terms[1]))?;
    log.gan = finite(step, "gan", value(terms[2]))?;
    log.enhance = finite(step, "enhance", value(terms[3]))?;
    let total = total_loss_var(&g, terms, &weights)?;
    log.total = finite(step, "total", g.value(total).item())?;
    let grads = without_disc(g.backward(total)?.params(&g));
    state.opt_gen.step(&mut state.model.gen, &grads)?;
    state.step = step;
    Ok(log)
}

/// Batch indices for the next step: everything when the batch covers the set.
pub fn next_indices(rng: &mut ChaCha8Rng, n: usize, batch_size: usize) -> Vec<usize> {
    if batch_size >= n {
        (0..n).collect()
    } else {
        sample(rng, n, batch_size).into_vec()
    }
}

/// Runs steps until `cfg.steps` is reached, calling `on_step` after each.
pub fn train<F>(state: &mut TrainState, data: &PairedBatch, cfg: &TrainConfig, mut on_step: F) -> Result<Vec<LossLog>>
where
    F: FnMut(&LossLog, &TrainState) -> Result<()>,
{
    if data.is_empty() {
        return Err(usage("training needs at least one sample"));
    }
    let phi = RandomFeatures::new(state.model.config.perceptual.clone())?;
    let mut logs = Vec::new();
    while state.step < cfg.steps {
        let idx = next_indices(&mut state.rng, data.len(), cfg.batch_size);
        let batch = if idx.len() == data.len() && idx.iter().enumerate().all(|(i, &j)| i == j) {
            data.clone()
        } else {
            data.select(&idx)?
        };
        let log = train_step(state, &batch, cfg, &phi)?;
        on_step(&log, state)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}
