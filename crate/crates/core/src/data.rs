//! Paired data: synthetic low-light degradation, dataset packaging in a
//! `low/ high/ edge/ manifest.json` directory, and batch loading with
//! reflection padding.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{usage, Error, Result};
use crate::imaging::io::{read_edge_map, read_rgb, write_png};
use crate::imaging::{canny_edges, CannyConfig, ImageTensor};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeConfig {
    /// Exposure multiplier in `(0, 1]`.
    pub exposure_gain: f64,
    pub gamma: f64,
    pub read_noise_sigma: f64,
    /// Shot noise std is this times `sqrt(gain * clean)`.
    pub shot_noise_scale: f64,
    pub seed: u64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            exposure_gain: 0.3,
            gamma: 1.2,
            read_noise_sigma: 0.01,
            shot_noise_scale: 0.02,
            seed: 0,
        }
    }
}

impl DegradeConfig {
    /// Leaves images untouched.
    pub fn identity() -> Self {
        Self {
            exposure_gain: 1.0,
            gamma: 1.0,
            read_noise_sigma: 0.0,
            shot_noise_scale: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.exposure_gain > 0.0
            && self.exposure_gain <= 1.0
            && self.gamma > 0.0
            && self.gamma.is_finite()
            && self.read_noise_sigma >= 0.0
            && self.read_noise_sigma.is_finite()
            && self.shot_noise_scale >= 0.0
            && self.shot_noise_scale.is_finite();
        if !ok {
            return Err(Error::Config(format!("invalid degradation settings {self:?}")));
        }
        Ok(())
    }
}

/// Noisy signal before the final clamp; split out so noise statistics can be
/// measured without clipping.
pub fn degrade_unclamped(clean: &Tensor, cfg: &DegradeConfig, rng: &mut impl Rng) -> Result<Tensor> {
    cfg.validate()?;
    if clean.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(usage("degrade expects values in [0, 1]"));
    }
    let mut out = clean.clone();
    for v in out.data_mut() {
        let x = *v;
        let lit = cfg.exposure_gain * x;
        let mut y = if cfg.gamma == 1.0 { lit } else { lit.powf(cfg.gamma) };
        if cfg.shot_noise_scale > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            y += cfg.shot_noise_scale * lit.sqrt() * z;
        }
        if cfg.read_noise_sigma > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            y += cfg.read_noise_sigma * z;
        }
        *v = y;
    }
    Ok(out)
}

/// `clamp((gain * x)^gamma + shot + read, 0, 1)`, seeded by `cfg.seed`.
pub fn degrade(clean: &ImageTensor, cfg: &DegradeConfig) -> Result<ImageTensor> {
    degrade_stream(clean, cfg, 0)
}

/// As [`degrade`], drawing noise from stream `stream` of the seeded generator
/// so that different images get independent noise.
pub fn degrade_stream(clean: &ImageTensor, cfg: &DegradeConfig, stream: u64) -> Result<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let noisy = degrade_unclamped(clean.tensor(), cfg, &mut rng)?;
    ImageTensor::new(noisy.map(|v| v.clamp(0.0, 1.0)))
}

/// Piecewise-smooth scene: a soft gradient background with overlapping
/// rectangles and discs, values in `[0, 1]`.
pub fn synthetic_scene(seed: u64, h: usize, w: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] { [rng.gen_range(0.1..0.95), rng.gen_range(0.1..0.95), rng.gen_range(0.1..0.95)] };
    let base = color(&mut rng);
    let tilt = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)];
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let t = tilt[0] * y as f64 / h as f64 + tilt[1] * x as f64 / w as f64;
            for c in 0..3 {
                data[c * h * w + y * w + x] = (base[c] + t).clamp(0.0, 1.0);
            }
        }
    }
    let shapes = rng.gen_range(3..7);
    for _ in 0..shapes {
        let col = color(&mut rng);
        let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let size = rng.gen_range(0.12..0.35) * h.min(w) as f64;
        let disc = rng.gen_bool(0.5);
        let aspect = rng.gen_range(0.5..2.0);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if disc {
                    dy * dy + dx * dx <= size * size
                } else {
                    dy.abs() <= size && dx.abs() <= size * aspect
                };
                if inside {
                    for c in 0..3 {
                        data[c * h * w + y * w + x] = col[c];
                    }
                }
            }
        }
    }
    ImageTensor::new(Tensor::new(vec![1, 3, h, w], data).expect("consistent")).expect("finite")
}

/// Writes `n` synthetic scenes as `scene_XXX.png` into `dir`.
pub fn write_synthetic_sources(dir: &Path, n: usize, h: usize, w: usize, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    (0..n)
        .map(|i| {
            let p = dir.join(format!("scene_{i:03}.png"));
            write_png(synthetic_scene(seed.wrapping_add(i as u64), h, w).tensor(), 0, &p, false)?;
            Ok(p)
        })
        .collect()
}

/// Rounds to the 8-bit grid, matching what a PNG round trip yields.
pub fn quantize8(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub images: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub file: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub ids: Vec<String>,
    pub degrade: DegradeConfig,
    pub canny: CannyConfig,
    pub counts: Counts,
    pub skipped: Vec<Skipped>,
    pub config_hash: String,
}

impl Manifest {
    pub const VERSION: u32 = 1;
    pub const FILE: &'static str = "manifest.json";

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::Load {
            id: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let m: Self = serde_json::from_str(&text)?;
        if m.version != Self::VERSION {
            return Err(Error::Load {
                id: path.display().to_string(),
                reason: format!("manifest version {} (expected {})", m.version, Self::VERSION),
            });
        }
        Ok(m)
    }
}

/// SHA-256 over the canonical JSON of both configs.
pub fn config_hash(degrade: &DegradeConfig, canny: &CannyConfig) -> String {
    let canon = serde_json::to_string(&(degrade, canny)).expect("plain data serializes");
    hex::encode(Sha256::digest(canon.as_bytes()))
}

fn stream_for(id: &str) -> u64 {
    let d = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Builds `low/`, `high/`, `edge/` and `manifest.json` under `out_dir` from
/// every PNG in `src_dir` (sorted by name). Unreadable files are skipped and
/// listed in the manifest.
pub fn build_dataset(src_dir: &Path, out_dir: &Path, degrade_cfg: &DegradeConfig, canny_cfg: &CannyConfig) -> Result<Manifest> {
    degrade_cfg.validate()?;
    canny_cfg.validate()?;
    let mut sources: Vec<PathBuf> = fs::read_dir(src_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    sources.sort();
    for sub in ["low", "high", "edge"] {
        fs::create_dir_all(out_dir.join(sub))?;
    }
    let mut ids = Vec::new();
    let mut skipped = Vec::new();
    for path in sources {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let clean = match read_rgb(&path) {
            Ok(img) => ImageTensor::new(quantize8(img.tensor()))?,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.push(Skipped {
                    file: path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let low = degrade_stream(&clean, degrade_cfg, stream_for(&id))?;
        let edges = canny_edges(&clean, canny_cfg)?;
        let name = format!("{id}.png");
        write_png(low.tensor(), 0, &out_dir.join("low").join(&name), false)?;
        write_png(clean.tensor(), 0, &out_dir.join("high").join(&name), false)?;
        write_png(edges.tensor(), 0, &out_dir.join("edge").join(&name), false)?;
        ids.push(id);
    }
    let manifest = Manifest {
        version: Manifest::VERSION,
        counts: Counts {
            images: ids.len(),
            skipped: skipped.len(),
        },
        ids,
        degrade: *degrade_cfg,
        canny: *canny_cfg,
        skipped,
        config_hash: config_hash(degrade_cfg, canny_cfg),
    };
    fs::write(out_dir.join(Manifest::FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Amount added at the bottom and right edges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pad {
    pub bottom: usize,
    pub right: usize,
}

impl Pad {
    pub fn as_tuple(&self) -> (usize, usize) {
        (self.bottom, self.right)
    }
}

/// Mirror index without repeating the edge sample, periodic for large overhangs.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Pads `H` and `W` up to the next multiple of `multiple` by reflection.
pub fn pad_to_multiple(t: &Tensor, multiple: usize) -> Result<(Tensor, Pad)> {
    let (b, c, h, w) = t.dims4()?;
    if multiple == 0 {
        return Err(usage("padding multiple must be positive"));
    }
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    let pad = Pad {
        bottom: ph - h,
        right: pw - w,
    };
    if ph == h && pw == w {
        return Ok((t.clone(), pad));
    }
    let src = t.data();
    let mut out = Vec::with_capacity(b * c * ph * pw);
    for plane in 0..b * c {
        for y in 0..ph {
            let sy = reflect(y, h);
            for x in 0..pw {
                out.push(src[(plane * h + sy) * w + reflect(x, w)]);
            }
        }
    }
    Ok((Tensor::new(vec![b, c, ph, pw], out)?, pad))
}

/// Crops a padded tensor back to its original size.
pub fn unpad(t: &Tensor, pad: Pad) -> Result<Tensor> {
    let (b, c, h, w) = t.dims4()?;
    if pad.bottom >= h || pad.right >= w {
        return Err(usage(format!("pad {pad:?} exceeds tensor {h}x{w}")));
    }
    let (oh, ow) = (h - pad.bottom, w - pad.right);
    let src = t.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        for y in 0..oh {
            out.extend_from_slice(&src[(plane * h + y) * w..(plane * h + y) * w + ow]);
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

/// One batch ready for the networks.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedBatch {
    pub ids: Vec<String>,
    /// Low-light inputs `(B, 3, H, W)`.
    pub input: Tensor,
    /// Normal-light targets.
    pub target: Tensor,
    /// Binary edge maps of the targets `(B, 1, H, W)`.
    pub edges: Tensor,
    pub pads: Vec<Pad>,
}

impl PairedBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Items at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let pick = |t: &Tensor| -> Result<Tensor> { Tensor::stack_batch(&idx.iter().map(|&i| t.batch_item(i)).collect::<Result<Vec<_>>>()?) };
        Ok(Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            input: pick(&self.input)?,
            target: pick(&self.target)?,
            edges: pick(&self.edges)?,
            pads: idx.iter().map(|&i| self.pads[i]).collect(),
        })
    }
}

fn load_err(id: &str, e: Error) -> Error {
    match e {
        Error::Load { .. } => e,
        other => Error::Load {
            id: id.to_string(),
            reason: other.to_string(),
        },
    }
}

/// Loads `ids` from a dataset directory, padding each item to `multiple`.
/// All padded items must share one size.
pub fn load_batch(dir: &Path, manifest: &Manifest, ids: &[String], multiple: usize) -> Result<PairedBatch> {
    if ids.is_empty() {
        return Err(usage("load_batch needs at least one id"));
    }
    let known: BTreeMap<&str, ()> = manifest.ids.iter().map(|s| (s.as_str(), ())).collect();
    let (mut inputs, mut targets, mut edges, mut pads) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for id in ids {
        if !known.contains_key(id.as_str()) {
            return Err(Error::Load {
                id: id.clone(),
                reason: "not listed in the manifest".into(),
            });
        }
        let name = format!("{id}.png");
        let low = read_rgb(&dir.join("low").join(&name)).map_err(|e| load_err(id, e))?;
        let high = read_rgb(&dir.join("high").join(&name)).map_err(|e| load_err(id, e))?;
        let edge = read_edge_map(&dir.join("edge").join(&name)).map_err(|e| load_err(id, e))?;
        let hw = |d: (usize, usize, usize, usize)| (d.2, d.3);
        if hw(low.dims()) != hw(high.dims()) || hw(edge.dims()) != hw(high.dims()) {
            return Err(Error::Load {
                id: id.clone(),
                reason: "low, high and edge images differ in size".into(),
            });
        }
        let (li, pad) = pad_to_multiple(low.tensor(), multiple)?;
        inputs.push(li);
        targets.push(pad_to_multiple(high.tensor(), multiple)?.0);
        // reflection keeps the padded map binary
        edges.push(pad_to_multiple(edge.tensor(), multiple)?.0);
        pads.push(pad);
    }
    let stack = |v: &[Tensor]| {
        Tensor::stack_batch(v).map_err(|_| usage("batch items have different padded sizes; load them separately"))
    };
    Ok(PairedBatch {
        ids: ids.to_vec(),
        input: stack(&inputs)?,
        target: stack(&targets)?,
        edges: stack(&edges)?,
        pads,
    })
}

/// Every item of the dataset in manifest order.
pub fn load_all(dir: &Path, multiple: usize) -> Result<PairedBatch> {
    let m = Manifest::read(dir)?;
    load_batch(dir, &m, &m.ids, multiple)
}
