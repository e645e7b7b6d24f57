//! Image tensors, edge maps, classical operators and quality metrics.

mod canny;
mod gradients;
pub mod io;
mod metrics;

pub use canny::{canny_edges, CannyConfig};
pub use gradients::compute_gradient_maps;
pub use metrics::{
    edge_metrics, edge_metrics_per_image, psnr, psnr_per_image, ssim, ssim_per_image, EdgeScores, MetricEntry, MetricMeans, MetricReport,
    BCE_EPS, PSNR_CAP_DB,
};

use crate::error::{usage, Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Rank-4 `(B, C, H, W)` float image, `C` in `{1, 3}`, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        let (b, c, h, w) = t.dims4()?;
        if b == 0 || h == 0 || w == 0 {
            return Err(usage(format!("empty image tensor {:?}", t.shape())));
        }
        if c != 1 && c != 3 {
            return Err(usage(format!("images need 1 or 3 channels, got {c}")));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite("image tensor".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.0.dims4().expect("validated rank-4")
    }

    /// Rec. 601 luma; single-channel images are returned unchanged.
    pub fn luminance(&self) -> Tensor {
        luminance(&self.0)
    }
}

/// Rank-4 `(B, 1, H, W)` map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap(Tensor);

impl EdgeMap {
    pub fn new(t: Tensor) -> Result<Self> {
        let (_, c, _, _) = t.dims4()?;
        if c != 1 {
            return Err(usage(format!("edge maps have 1 channel, got {c}")));
        }
        if !t.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(usage("edge map values must lie in [0, 1]"));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.0.dims4().expect("validated rank-4")
    }

    pub fn is_binary(&self) -> bool {
        self.0.data().iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

pub(crate) fn luminance(t: &Tensor) -> Tensor {
    let (b, c, h, w) = t.dims4().expect("rank-4");
    if c == 1 {
        return t.clone();
    }
    let hw = h * w;
    let d = t.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            out.push(0.299 * d[base + p] + 0.587 * d[base + hw + p] + 0.114 * d[base + 2 * hw + p]);
        }
    }
    Tensor::new(vec![b, 1, h, w], out).expect("consistent shape")
}

/// Per-(batch, channel) standardization over `H x W`: `(x - mean) / sqrt(var + eps)`.
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    x.dims4()?;
    if !(eps > 0.0) {
        return Err(usage("instance_norm needs eps > 0"));
    }
    Ok(kernels::instance_norm_forward(x, eps).0)
}

/// Bilinear (half-pixel centers) resize of an edge map.
pub fn resize_map(m: &EdgeMap, target_h: usize, target_w: usize) -> Result<EdgeMap> {
    if target_h == 0 || target_w == 0 {
        return Err(usage("resize target must be at least 1x1"));
    }
    let out = kernels::resize_bilinear(m.tensor(), target_h, target_w);
    // convex combinations stay in range up to rounding
    Ok(EdgeMap(out.map(|v| v.clamp(0.0, 1.0))))
}
