//! Appearance network: a plain U-Net predicting the initial restored image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::unet;

pub use crate::unet::UNetConfig;

pub const PREFIX: &str = "a";

/// Fan-in scaled initialization, deterministic in `seed`.
pub fn init_appearance(config: &UNetConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    unet::init(&mut store, &mut rng, PREFIX, config, false);
    Ok(store)
}

/// `I_a = sigmoid(U-Net(I))`, same shape as the input.
pub fn appearance_forward(g: &Graph, params: &ParamStore, config: &UNetConfig, input: Var) -> Result<Var> {
    let [_, _, h, w] = g.shape(input)[..] else {
        return Err(crate::error::usage("appearance input must be rank 4"));
    };
    config.check_input(h, w)?;
    let out = unet::forward_plain(g, params, PREFIX, config, input)?;
    Ok(g.sigmoid(out))
}
