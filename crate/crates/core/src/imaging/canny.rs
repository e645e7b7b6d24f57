use serde::{Deserialize, Serialize};

use super::{luminance, EdgeMap, ImageTensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Canny detector settings.
///
/// With `relative` set, `low` and `high` are fractions of the largest gradient
/// magnitude in each image; otherwise they are absolute magnitudes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CannyConfig {
    pub sigma: f64,
    pub low: f64,
    pub high: f64,
    pub relative: bool,
}

impl Default for CannyConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            low: 0.1,
            high: 0.2,
            relative: true,
        }
    }
}

impl CannyConfig {
    pub fn with_thresholds(low: f64, high: f64) -> Self {
        Self {
            low,
            high,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.low >= 0.0 && self.low < self.high) {
            return Err(Error::Config(format!(
                "canny thresholds need 0 <= low < high, got low={} high={}",
                self.low, self.high
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("canny sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Binary edge map of every image in the batch (color is reduced to luma first).
pub fn canny_edges(img: &ImageTensor, cfg: &CannyConfig) -> Result<EdgeMap> {
    cfg.validate()?;
    let luma = luminance(img.tensor());
    let (b, _, h, w) = luma.dims4()?;
    let mut out = Vec::with_capacity(b * h * w);
    for plane in luma.data().chunks(h * w) {
        out.extend(canny_plane(plane, h, w, cfg));
    }
    EdgeMap::new(Tensor::new(vec![b, 1, h, w], out)?)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Separable blur with replicated borders.
fn blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * src[y * w + clamp_idx(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[clamp_idx(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn canny_plane(src: &[f64], h: usize, w: usize, cfg: &CannyConfig) -> Vec<f64> {
    let b = blur(src, h, w, cfg.sigma);
    let at = |y: isize, x: isize| b[clamp_idx(y, h) * w + clamp_idx(x, w)];
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    let mut mag = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let dx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let dy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let i = y as usize * w + x as usize;
            gx[i] = dx;
            gy[i] = dy;
            mag[i] = dx.hypot(dy);
        }
    }
    let max_mag = mag.iter().cloned().fold(0.0, f64::max);
    if max_mag <= 0.0 {
        return vec![0.0; h * w];
    }
    // ties closer than this count as equal so that plateaus thin to one pixel
    // deterministically regardless of rounding
    let tol = 1e-9 * max_mag;

    let m = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let v = mag[i];
            if v <= tol {
                continue;
            }
            let mut angle = gy[i].atan2(gx[i]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            // step toward the gradient direction
            let (sy, sx) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let behind = m(y - sy, x - sx);
            let ahead = m(y + sy, x + sx);
            if v > behind + tol && v >= ahead - tol {
                thin[i] = v;
            }
        }
    }

    let (low, high) = if cfg.relative {
        (cfg.low * max_mag, cfg.high * max_mag)
    } else {
        (cfg.low, cfg.high)
    };
    let mut out = vec![0.0; h * w];
    let mut stack = Vec::new();
    for i in 0..h * w {
        if thin[i] > 0.0 && thin[i] >= high && out[i] == 0.0 {
            out[i] = 1.0;
            stack.push(i);
            while let Some(j) = stack.pop() {
                let (y, x) = ((j / w) as isize, (j % w) as isize);
                for ny in y - 1..=y + 1 {
                    for nx in x - 1..=x + 1 {
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let k = ny as usize * w + nx as usize;
                        if out[k] == 0.0 && thin[k] > 0.0 && thin[k] >= low {
                            out[k] = 1.0;
                            stack.push(k);
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> ImageTensor {
        ImageTensor::new(Tensor::from_fn(&[1, 1, h, w], |i| f(i / w, i % w))).unwrap()
    }

    #[test]
    fn uniform_image_has_no_edges() {
        let e = canny_edges(&img(16, 16, |_, _| 0.5), &CannyConfig::default()).unwrap();
        assert!(e.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_edge_is_one_column() {
        let (h, w) = (32, 32);
        let e = canny_edges(&img(h, w, |_, x| if x < w / 2 { 0.0 } else { 1.0 }), &CannyConfig::default()).unwrap();
        let d = e.tensor().data();
        for y in 0..h {
            let cols: Vec<usize> = (0..w).filter(|&x| d[y * w + x] == 1.0).collect();
            assert_eq!(cols, vec![w / 2 - 1], "row {y}");
        }
    }

    #[test]
    fn step_edge_agrees_with_reference_detector() {
        // imageproc keeps both pixels of a symmetric plateau, we keep one of them
        let (h, w) = (32usize, 32usize);
        let gray = image::GrayImage::from_fn(w as u32, h as u32, |x, _| {
            image::Luma([if (x as usize) < w / 2 { 0 } else { 255 }])
        });
        let reference = imageproc::edges::canny(&gray, 50.0, 100.0);
        let ours = canny_edges(&img(h, w, |_, x| if x < w / 2 { 0.0 } else { 1.0 }), &CannyConfig::default()).unwrap();
        // imageproc never marks the outermost rows/columns
        for y in 1..h - 1 {
            let ref_cols: Vec<usize> = (0..w).filter(|&x| reference.get_pixel(x as u32, y as u32)[0] > 0).collect();
            let our_cols: Vec<usize> = (0..w).filter(|&x| ours.tensor().data()[y * w + x] > 0.0).collect();
            assert!(!ref_cols.is_empty());
            assert!(ref_cols.iter().all(|c| (w / 2 - 1..=w / 2).contains(c)), "{ref_cols:?}");
            assert_eq!(our_cols.len(), 1);
            assert!(ref_cols.contains(&our_cols[0]));
        }
    }

    #[test]
    fn degenerate_thresholds_rejected() {
        let i = img(8, 8, |_, _| 0.0);
        assert!(matches!(canny_edges(&i, &CannyConfig::with_thresholds(0.3, 0.3)), Err(Error::Config(_))));
        assert!(canny_edges(&i, &CannyConfig::with_thresholds(0.5, 0.2)).is_err());
    }

    #[test]
    fn color_input_uses_luminance() {
        let rgb = ImageTensor::new(Tensor::from_fn(&[1, 3, 16, 16], |i| if i % 16 < 8 { 0.1 } else { 0.9 })).unwrap();
        let e = canny_edges(&rgb, &CannyConfig::default()).unwrap();
        assert_eq!(e.dims(), (1, 1, 16, 16));
        assert!(e.tensor().sum() > 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn output_is_binary(vals in proptest::collection::vec(0.0f64..1.0, 144)) {
            let i = ImageTensor::new(Tensor::new(vec![1, 1, 12, 12], vals).unwrap()).unwrap();
            let e = canny_edges(&i, &CannyConfig::default()).unwrap();
            prop_assert!(e.is_binary());
        }

        #[test]
        fn invariant_to_brightness_offset(vals in proptest::collection::vec(0.0f64..0.9, 144), c in 0.0001f64..0.1) {
            let base = Tensor::new(vec![1, 1, 12, 12], vals).unwrap();
            let shifted = base.map(|v| v + c);
            let cfg = CannyConfig::default();
            let a = canny_edges(&ImageTensor::new(base).unwrap(), &cfg).unwrap();
            let b = canny_edges(&ImageTensor::new(shifted).unwrap(), &cfg).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
