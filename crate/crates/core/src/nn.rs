//! Thin layer helpers binding named parameters to graph operations.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamStore, LEAKY_SLOPE};

/// Convolution with parameters `{prefix}.w` / `{prefix}.b`; padding keeps
/// spatial size for stride 1.
pub fn conv(g: &Graph, ps: &ParamStore, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    let w = g.param(ps, &format!("{prefix}.w"))?;
    let b = g.param(ps, &format!("{prefix}.b"))?;
    let k = g.shape(w)[2];
    g.conv2d(x, w, Some(b), stride, k / 2)
}

/// Convolution whose parameters are held fixed.
pub fn conv_frozen(g: &Graph, ps: &ParamStore, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    let w = g.frozen(ps, &format!("{prefix}.w"))?;
    let b = g.frozen(ps, &format!("{prefix}.b"))?;
    let k = g.shape(w)[2];
    g.conv2d(x, w, Some(b), stride, k / 2)
}

pub fn conv_act(g: &Graph, ps: &ParamStore, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    let y = conv(g, ps, prefix, x, stride)?;
    Ok(g.leaky_relu(y, LEAKY_SLOPE))
}

pub fn linear(g: &Graph, ps: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(ps, &format!("{prefix}.w"))?;
    let b = g.param(ps, &format!("{prefix}.b"))?;
    g.linear(x, w, Some(b))
}

pub fn act(g: &Graph, x: Var) -> Var {
    g.leaky_relu(x, LEAKY_SLOPE)
}
