use serde::{Deserialize, Serialize};

use super::{luminance, EdgeMap, ImageTensor};
use crate::error::{usage, Error, Result};
use crate::tensor::Tensor;

/// Reported PSNR when the two images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Prediction clamp used by the cross-entropy metric and loss.
pub const BCE_EPS: f64 = 1e-7;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn check_shapes(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB)
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// PSNR in dB over the whole tensor.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, max_val: f64) -> Result<f64> {
    check_shapes(a.tensor(), b.tensor(), "psnr")?;
    if !(max_val > 0.0) {
        return Err(usage("psnr needs max_val > 0"));
    }
    Ok(psnr_from_mse(mse(a.tensor().data(), b.tensor().data()), max_val))
}

/// PSNR of each batch item.
pub fn psnr_per_image(a: &ImageTensor, b: &ImageTensor, max_val: f64) -> Result<Vec<f64>> {
    check_shapes(a.tensor(), b.tensor(), "psnr")?;
    if !(max_val > 0.0) {
        return Err(usage("psnr needs max_val > 0"));
    }
    let (_, c, h, w) = a.dims();
    let n = c * h * w;
    Ok(a.tensor()
        .data()
        .chunks(n)
        .zip(b.tensor().data().chunks(n))
        .map(|(x, y)| psnr_from_mse(mse(x, y), max_val))
        .collect())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering with the SSIM window.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for j in 0..ow {
            tmp[y * ow + j] = (0..k).map(|v| g[v] * x[y * w + j + v]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..k).map(|u| g[u] * tmp[(i + u) * ow + j]).sum();
        }
    }
    out
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_window();
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let mx = filter_valid(x, h, w, &g);
    let my = filter_valid(y, h, w, &g);
    let sxx = filter_valid(&xx, h, w, &g);
    let syy = filter_valid(&yy, h, w, &g);
    let sxy = filter_valid(&xy, h, w, &g);
    let n = mx.len();
    (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum::<f64>()
        / n as f64
}

/// Mean SSIM (11x11 Gaussian window, sigma 1.5, data range 1) of each batch
/// item; color images are compared on luminance.
pub fn ssim_per_image(a: &ImageTensor, b: &ImageTensor) -> Result<Vec<f64>> {
    check_shapes(a.tensor(), b.tensor(), "ssim")?;
    let (_, _, h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(usage(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}")));
    }
    let la = luminance(a.tensor());
    let lb = luminance(b.tensor());
    Ok(la
        .data()
        .chunks(h * w)
        .zip(lb.data().chunks(h * w))
        .map(|(x, y)| ssim_plane(x, y, h, w))
        .collect())
}

/// Batch mean of [`ssim_per_image`].
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let v = ssim_per_image(a, b)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Cross-entropy (nats) and mean squared error between predicted and
/// ground-truth edge maps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeScores {
    pub ce: f64,
    pub l2: f64,
}

fn edge_scores(pred: &[f64], gt: &[f64]) -> EdgeScores {
    let n = pred.len() as f64;
    let mut ce = 0.0;
    let mut l2 = 0.0;
    for (&p, &t) in pred.iter().zip(gt) {
        let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        ce -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
        l2 += (p - t) * (p - t);
    }
    EdgeScores { ce: ce / n, l2: l2 / n }
}

pub fn edge_metrics(pred: &EdgeMap, gt: &EdgeMap) -> Result<EdgeScores> {
    check_shapes(pred.tensor(), gt.tensor(), "edge_metrics")?;
    Ok(edge_scores(pred.tensor().data(), gt.tensor().data()))
}

pub fn edge_metrics_per_image(pred: &EdgeMap, gt: &EdgeMap) -> Result<Vec<EdgeScores>> {
    check_shapes(pred.tensor(), gt.tensor(), "edge_metrics")?;
    let (_, _, h, w) = pred.dims();
    Ok(pred
        .tensor()
        .data()
        .chunks(h * w)
        .zip(gt.tensor().data().chunks(h * w))
        .map(|(p, t)| edge_scores(p, t))
        .collect())
}

/// One row of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub edge_ce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub edge_l2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub psnr: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub edge_ce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub edge_l2: Option<f64>,
}

/// Per-image and aggregate quality scores, serialized as versioned JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: u32,
    pub images: Vec<MetricEntry>,
    pub mean: MetricMeans,
}

impl MetricReport {
    pub const VERSION: u32 = 1;

    pub fn from_entries(images: Vec<MetricEntry>) -> Result<Self> {
        if images.is_empty() {
            return Err(usage("a metric report needs at least one image"));
        }
        let n = images.len() as f64;
        let avg = |f: &dyn Fn(&MetricEntry) -> f64| images.iter().map(f).sum::<f64>() / n;
        let avg_opt = |f: &dyn Fn(&MetricEntry) -> Option<f64>| -> Option<f64> {
            let vals: Option<Vec<f64>> = images.iter().map(f).collect();
            vals.map(|v| v.iter().sum::<f64>() / n)
        };
        let mean = MetricMeans {
            psnr: avg(&|e| e.psnr),
            ssim: avg(&|e| e.ssim),
            edge_ce: avg_opt(&|e| e.edge_ce),
            edge_l2: avg_opt(&|e| e.edge_l2),
        };
        Ok(Self {
            version: Self::VERSION,
            images,
            mean,
        })
    }

    /// CSV with one row per image followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut s = String::from("id,psnr,ssim,edge_ce,edge_l2\n");
        for e in &self.images {
            s.push_str(&format!("{},{},{},{},{}\n", e.id, e.psnr, e.ssim, fmt(e.edge_ce), fmt(e.edge_l2)));
        }
        let m = &self.mean;
        s.push_str(&format!("mean,{},{},{},{}\n", m.psnr, m.ssim, fmt(m.edge_ce), fmt(m.edge_l2)));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(t: Tensor) -> ImageTensor {
        ImageTensor::new(t).unwrap()
    }

    fn rand_image(rng: &mut ChaCha8Rng, shape: &[usize]) -> ImageTensor {
        image(Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0)))
    }

    #[test]
    fn psnr_identical_is_capped() {
        let a = image(Tensor::full(&[1, 3, 8, 8], 0.3));
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_uniform_offset_closed_form() {
        let a = image(Tensor::full(&[1, 3, 8, 8], 0.2));
        let b = image(Tensor::full(&[1, 3, 8, 8], 0.2 + 16.0 / 255.0));
        let expected = 20.0 * (255.0f64 / 16.0).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 24.0484).abs() < 1e-4);
    }

    #[test]
    fn psnr_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a = rand_image(&mut rng, &[1, 3, 6, 7]);
            let b = rand_image(&mut rng, &[1, 3, 6, 7]);
            let mut se = 0.0;
            for i in 0..a.tensor().len() {
                let d = a.tensor().data()[i] - b.tensor().data()[i];
                se += d * d;
            }
            let expected = 10.0 * (1.0 / (se / a.tensor().len() as f64)).log10();
            assert!((psnr(&a, &b, 1.0).unwrap() - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn psnr_shape_mismatch() {
        let a = image(Tensor::zeros(&[1, 3, 8, 8]));
        let b = image(Tensor::zeros(&[1, 3, 8, 9]));
        assert!(matches!(psnr(&a, &b, 1.0), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn ssim_identity_and_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_image(&mut rng, &[2, 3, 16, 16]);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let p = image(Tensor::full(&[1, 1, 16, 16], 0.25));
        let q = image(Tensor::full(&[1, 1, 16, 16], 0.75));
        let expected = (2.0 * 0.25 * 0.75 + 1e-4) / (0.25f64.powi(2) + 0.75f64.powi(2) + 1e-4);
        assert!((ssim(&p, &q).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 0.60006).abs() < 1e-5);
    }

    #[test]
    fn ssim_too_small() {
        let a = image(Tensor::zeros(&[1, 1, 10, 16]));
        assert!(matches!(ssim(&a, &a), Err(Error::Usage(_))));
    }

    /// Window-by-window evaluation with explicit 2-D Gaussian weights.
    fn ssim_oracle(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
        let r = 5.0;
        let mut wts = [[0.0; 11]; 11];
        let mut total = 0.0;
        for (u, row) in wts.iter_mut().enumerate() {
            for (v, val) in row.iter_mut().enumerate() {
                let d2 = (u as f64 - r).powi(2) + (v as f64 - r).powi(2);
                *val = (-d2 / (2.0 * 1.5 * 1.5)).exp();
                total += *val;
            }
        }
        let mut acc = 0.0;
        let mut count = 0;
        for i in 0..=h - 11 {
            for j in 0..=w - 11 {
                let (mut mx, mut my) = (0.0, 0.0);
                for u in 0..11 {
                    for v in 0..11 {
                        let k = wts[u][v] / total;
                        mx += k * x[(i + u) * w + j + v];
                        my += k * y[(i + u) * w + j + v];
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for u in 0..11 {
                    for v in 0..11 {
                        let k = wts[u][v] / total;
                        let dx = x[(i + u) * w + j + v] - mx;
                        let dy = y[(i + u) * w + j + v] - my;
                        vx += k * dx * dx;
                        vy += k * dy * dy;
                        cxy += k * dx * dy;
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        acc / count as f64
    }

    #[test]
    fn ssim_matches_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = rand_image(&mut rng, &[1, 1, 14, 15]);
            let b = rand_image(&mut rng, &[1, 1, 14, 15]);
            let expected = ssim_oracle(a.tensor().data(), b.tensor().data(), 14, 15);
            assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn edge_metric_closed_forms() {
        let gt = EdgeMap::new(Tensor::from_fn(&[1, 1, 4, 4], |i| (i % 3 == 0) as u8 as f64)).unwrap();
        let s = edge_metrics(&gt, &gt).unwrap();
        assert!(s.ce < 1e-6 && s.ce >= 0.0);
        assert_eq!(s.l2, 0.0);
        let half = EdgeMap::new(Tensor::full(&[1, 1, 4, 4], 0.5)).unwrap();
        assert!((edge_metrics(&half, &gt).unwrap().ce - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn edge_metrics_match_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let p = Tensor::from_fn(&[1, 1, 5, 5], |_| rng.gen_range(0.0..1.0));
            let t = Tensor::from_fn(&[1, 1, 5, 5], |_| rng.gen_bool(0.3) as u8 as f64);
            let (mut ce, mut l2) = (0.0, 0.0);
            for i in 0..25 {
                let q = p.data()[i].max(1e-7).min(1.0 - 1e-7);
                let y = t.data()[i];
                ce += -(y * q.ln() + (1.0 - y) * (1.0 - q).ln());
                l2 += (p.data()[i] - y).powi(2);
            }
            let s = edge_metrics(&EdgeMap::new(p).unwrap(), &EdgeMap::new(t).unwrap()).unwrap();
            assert!((s.ce - ce / 25.0).abs() < 1e-9);
            assert!((s.l2 - l2 / 25.0).abs() < 1e-9);
        }
    }

    #[test]
    fn report_means() {
        let entries = vec![
            MetricEntry { id: "a".into(), psnr: 20.0, ssim: 0.5, edge_ce: Some(0.1), edge_l2: None },
            MetricEntry { id: "b".into(), psnr: 30.0, ssim: 0.7, edge_ce: Some(0.3), edge_l2: None },
        ];
        let r = MetricReport::from_entries(entries).unwrap();
        assert_eq!(r.mean.psnr, 25.0);
        assert!((r.mean.ssim - 0.6).abs() < 1e-15);
        assert!((r.mean.edge_ce.unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(r.mean.edge_l2, None);
        assert!(r.to_csv().ends_with("mean,25,0.6,0.2,\n"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn symmetric_metrics(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_image(&mut rng, &[1, 3, 12, 12]);
            let b = rand_image(&mut rng, &[1, 3, 12, 12]);
            prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
            prop_assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
            let s = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn edge_ce_minimized_at_truth(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = Tensor::from_fn(&[1, 1, 4, 4], |_| rng.gen_bool(0.4) as u8 as f64);
            let pred = Tensor::from_fn(&[1, 1, 4, 4], |_| rng.gen_range(0.0..1.0));
            let gt = EdgeMap::new(gt).unwrap();
            let at_truth = edge_metrics(&gt, &gt).unwrap().ce;
            let other = edge_metrics(&EdgeMap::new(pred).unwrap(), &gt).unwrap();
            prop_assert!(other.ce >= 0.0 && other.l2 >= 0.0);
            prop_assert!(at_truth <= other.ce);
        }
    }
}
