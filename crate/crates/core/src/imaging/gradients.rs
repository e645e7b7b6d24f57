use crate::error::{Error, Result};
use crate::kernels::{self, DIRECTION_OFFSETS};
use crate::tensor::Tensor;

/// First-order forward differences of `f` toward each of the eight compass
/// directions, ordered `+x, -x, +y, -y, (+x,+y), (+x,-y), (-x,+y), (-x,-y)`.
/// Positions whose neighbour falls outside the tensor are zero.
pub fn compute_gradient_maps(f: &Tensor) -> Result<[Tensor; 8]> {
    f.dims4()?;
    if !f.is_finite() {
        return Err(Error::NonFinite("gradient map input".into()));
    }
    Ok(DIRECTION_OFFSETS.map(|(dy, dx)| kernels::shift_diff(f, dy, dx)))
}
